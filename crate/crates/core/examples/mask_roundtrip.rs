// Mix a group of feature maps through a stack of random tile masks, then
// unmix and check every value comes back bit-exactly.

use mumkit::mixmask::{generate_mask, mix, unmix, MaskStack, MixSite, MixSpec};
use mumkit::tensorgrid::FeatureBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mumkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = MixSpec { n_group: 4, n_tiles_h: 3, n_tiles_w: 4, ..MixSpec::default() };
    let mut x = FeatureBatch::zeros(4, 2, 24, 32);
    x.data_mut().iter_mut().for_each(|v| *v = rng.gen::<f64>());

    let mut stack = MaskStack::new();
    let mut y = x.clone();
    for depth in 0..5 {
        let m = generate_mask(&spec, &mut rng)?;
        y = mix(&y, &m)?;
        stack.push(if depth == 0 { MixSite::Image } else { MixSite::AfterStage(depth) }, m);
    }
    println!("first tile cell of the first mask: {:?}", stack.entries()[0].1.cell(0, 0));
    println!("mixed differs from input by up to {:.3}", y.max_abs_diff(&x));

    let back = unmix(&y, &stack)?;
    println!("after unmixing {} masks: bit-exact = {}", stack.len(), back.bit_eq(&x));
    assert!(back.bit_eq(&x));
    Ok(())
}
