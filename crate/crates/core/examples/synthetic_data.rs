// Generate a small synthetic split, augment one sample and round-trip the
// split through its binary file format.

use mumkit::ssltrain::keypoints_from_heatmaps;
use mumkit::synthpose::{apply_affine, generate_dataset, AffineParams, DataConfig, DatasetSplit};

fn main() -> mumkit::Result<()> {
    let cfg = DataConfig { n_labeled: 8, n_unlabeled: 16, n_val: 8, seed: 3, ..DataConfig::default() };
    let data = generate_dataset(&cfg)?;
    let s = &data.labeled[0];
    println!("sample image {:?}, heatmaps {:?}", s.image.shape(), s.heatmaps.shape());
    for (k, (p, v)) in s.keypoints.iter().zip(&s.visibility).enumerate() {
        println!("  keypoint {k}: ({:5.1}, {:5.1}) visible={v}", p.0, p.1);
    }
    let decoded = keypoints_from_heatmaps(&s.heatmaps, 0, cfg.render.image_size);
    println!("argmax of heatmap 0 maps back to ({:.1}, {:.1})", decoded[0].0, decoded[0].1);

    let flipped = apply_affine(s, &AffineParams { shift: (2.0, -1.0), scale: 1.05, flip: true }, &cfg.skeleton, &cfg.render);
    println!("after shift/scale/flip, keypoint 0 is at ({:.1}, {:.1})", flipped.keypoints[0].0, flipped.keypoints[0].1);

    let dir = tempfile::tempdir().map_err(|e| mumkit::Error::io("tempdir", e))?;
    let path = dir.path().join("split.spd");
    data.save(&path)?;
    let back = DatasetSplit::load(&path)?;
    println!("saved and reloaded {:?} samples; identical = {}", back.counts(), back.encode() == data.encode());
    Ok(())
}
