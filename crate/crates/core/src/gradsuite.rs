//! Finite-difference checks over every layer type and the mixed network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mixmask::{generate_mask, mix_groups, unmix_groups, MaskStack, MixSite, MixSpec};
use crate::nnkit::{
    gradcheck, gradcheck_subset, mse_backward, mse_forward, numeric_gradient, relative_error, relu_backward,
    relu_forward, upsample2_backward, upsample2_forward, BatchNorm2d, BnMode, Conv2d, FD_STEP,
};
use crate::posenet::{MixMode, MixPlan, PoseNet, PoseNetConfig, UnmixSite};
use crate::tensorgrid::{FeatureBatch, Shape4};

/// Bound for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Bound for the composed network.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteLine {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteLine {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> FeatureBatch {
    FeatureBatch::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn input_check(name: &str, x: &FeatureBatch, analytic: &FeatureBatch, tol: f64, f: impl Fn(&FeatureBatch) -> f64) -> SuiteLine {
    let mut xv = x.data().to_vec();
    let numeric = numeric_gradient(&mut xv, FD_STEP, |v| f(&FeatureBatch::from_vec(x.shape(), v.to_vec()).expect("shape")));
    let worst = analytic.data().iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
    SuiteLine { name: name.into(), checked: numeric.len(), max_rel_err: worst, tolerance: tol }
}

/// Small network used for the exhaustive full-path check.
pub fn small_config(site: UnmixSite) -> (PoseNetConfig, MixSpec) {
    let cfg = PoseNetConfig {
        stage_channels: [3, 4, 4, 5],
        stage_strides: [1, 2, 1, 2],
        decoder_channels: 3,
        n_keypoints: 2,
        input_size: (12, 16),
        heatmap_size: (12, 16),
        unmix_site: site,
        pose_mum_image_mix: true,
    };
    let spec = MixSpec { n_group: 2, n_tiles_h: 3, n_tiles_w: 4, mix_prob: 1.0, ..MixSpec::default() };
    (cfg, spec)
}

/// Gradient check of the mixed forward pass with masks frozen to one draw.
/// `max_per_tensor` limits the work on large networks.
pub fn check_network(cfg: PoseNetConfig, spec: &MixSpec, batch: usize, seed: u64, max_per_tensor: Option<usize>) -> Result<SuiteLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PoseNet::new(cfg.clone(), &mut rng)?;
    let (h, w) = cfg.input_size;
    let x = random(&mut rng, Shape4::new(batch, 1, h, w), 0.0, 1.0);
    let target = random(&mut rng, Shape4::new(batch, cfg.n_keypoints, cfg.heatmap_size.0, cfg.heatmap_size.1), 0.0, 1.0);
    let plan = MixPlan::draw(&cfg, spec, MixMode::PoseMum, batch / spec.n_group, &mut rng)?;
    let out = net.forward_with_plan(&x, &plan, BnMode::Train)?;
    let g = mse_backward(&out.heatmaps, &target)?;
    let analytic = net.backward(&out.trace, &g)?;
    let report = gradcheck_subset(&mut net, &analytic.0, max_per_tensor, |n: &mut PoseNet| {
        let mut probe = n.clone();
        let y = probe.forward_with_plan(&x, &plan, BnMode::Train).expect("forward").heatmaps;
        mse_forward(&y, &target).expect("shapes")
    });
    Ok(SuiteLine {
        name: format!("network mixed, unmix {}, depth {}", cfg.unmix_site.as_str(), plan.depth()),
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        tolerance: NETWORK_TOLERANCE,
    })
}

/// Every layer type, then the small mixed network at each unmix site, then a
/// subset of the default-size network.
pub fn run_suite() -> Result<Vec<SuiteLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut lines = Vec::new();

    for stride in [1, 2] {
        let x = random(&mut rng, Shape4::new(2, 2, 6, 5), -1.0, 1.0);
        let conv = Conv2d::init(2, 3, stride, &mut rng);
        let (y, cache) = conv.forward(&x)?;
        let t = random(&mut rng, y.shape(), -1.0, 1.0);
        let gy = mse_backward(&y, &t)?;
        let (gx, grads) = conv.backward(&cache, &gy)?;
        let r = gradcheck(&mut conv.clone(), &[grads.weight, grads.bias], |c: &mut Conv2d| {
            mse_forward(&c.forward(&x).expect("conv").0, &t).expect("mse")
        });
        lines.push(SuiteLine { name: format!("conv stride {stride} parameters"), checked: r.checked, max_rel_err: r.max_rel_err, tolerance: LAYER_TOLERANCE });
        lines.push(input_check(&format!("conv stride {stride} input"), &x, &gx, LAYER_TOLERANCE, |xb| {
            mse_forward(&conv.forward(xb).expect("conv").0, &t).expect("mse")
        }));
    }

    {
        let x = random(&mut rng, Shape4::new(3, 2, 4, 3), -2.0, 2.0);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.4];
        let (y, cache) = bn.clone().forward_train(&x)?;
        let t = random(&mut rng, y.shape(), -1.0, 1.0);
        let (gx, grads) = bn.backward(&cache, &mse_backward(&y, &t)?)?;
        let r = gradcheck(&mut bn.clone(), &[grads.gamma, grads.beta], |b: &mut BatchNorm2d| {
            mse_forward(&b.forward_train(&x).expect("bn").0, &t).expect("mse")
        });
        lines.push(SuiteLine { name: "batch norm parameters".into(), checked: r.checked, max_rel_err: r.max_rel_err, tolerance: LAYER_TOLERANCE });
        lines.push(input_check("batch norm input", &x, &gx, LAYER_TOLERANCE, |xb| {
            mse_forward(&bn.clone().forward_train(xb).expect("bn").0, &t).expect("mse")
        }));
    }

    {
        let mut x = random(&mut rng, Shape4::new(2, 2, 3, 3), -2.0, 2.0);
        // keep inputs away from the kink
        x.map_inplace(|v| if v.abs() < 1e-3 { v + v.signum() * 1e-3 } else { v });
        let t = random(&mut rng, x.shape(), -1.0, 1.0);
        let y = relu_forward(&x);
        let gx = relu_backward(&y, &mse_backward(&y, &t)?);
        lines.push(input_check("relu", &x, &gx, LAYER_TOLERANCE, |xb| mse_forward(&relu_forward(xb), &t).expect("mse")));
    }

    {
        let x = random(&mut rng, Shape4::new(1, 2, 2, 3), -1.0, 1.0);
        let t = random(&mut rng, Shape4::new(1, 2, 4, 6), -1.0, 1.0);
        let gx = upsample2_backward(&mse_backward(&upsample2_forward(&x), &t)?);
        lines.push(input_check("upsample", &x, &gx, LAYER_TOLERANCE, |xb| {
            mse_forward(&upsample2_forward(xb), &t).expect("mse")
        }));
    }

    {
        let x = random(&mut rng, Shape4::new(2, 1, 2, 3), -1.0, 1.0);
        let t = random(&mut rng, x.shape(), -1.0, 1.0);
        let gx = mse_backward(&x, &t)?;
        lines.push(input_check("mse", &x, &gx, LAYER_TOLERANCE, |xb| mse_forward(xb, &t).expect("mse")));
    }

    {
        let spec = MixSpec { n_group: 3, n_tiles_h: 2, n_tiles_w: 3, ..MixSpec::default() };
        let mask = generate_mask(&spec, &mut rng)?;
        let x = random(&mut rng, Shape4::new(3, 2, 4, 6), -1.0, 1.0);
        let c = random(&mut rng, x.shape(), -1.0, 1.0);
        let dot = |a: &FeatureBatch| a.data().iter().zip(c.data()).map(|(p, q)| p * q).sum::<f64>();
        let mut stack = MaskStack::new();
        stack.push(MixSite::Image, mask.clone());
        // mix backward undoes the permutation, unmix backward reapplies it
        let g_mix = unmix_groups(&c, std::slice::from_ref(&stack))?;
        lines.push(input_check("mix", &x, &g_mix, LAYER_TOLERANCE, |xb| dot(&mix_groups(xb, std::slice::from_ref(&mask)).expect("mix"))));
        let g_unmix = mix_groups(&c, std::slice::from_ref(&mask))?;
        lines.push(input_check("unmix", &x, &g_unmix, LAYER_TOLERANCE, |xb| {
            dot(&unmix_groups(xb, std::slice::from_ref(&stack)).expect("unmix"))
        }));
    }

    for site in [UnmixSite::AfterLayer2, UnmixSite::AfterEncoder, UnmixSite::AfterDecoder] {
        let (cfg, spec) = small_config(site);
        lines.push(check_network(cfg, &spec, 4, 7, None)?);
    }
    let mut default = check_network(PoseNetConfig::default(), &MixSpec { mix_prob: 1.0, ..MixSpec::default() }, 4, 11, Some(6))?;
    default.name = format!("default-size {}", default.name);
    lines.push(default);
    Ok(lines)
}
