use rand::Rng;

use super::{AugmentMode, TrainConfig};
use crate::error::{Error, Result};
use crate::nnkit::BnMode;
use crate::posenet::{Gradients, MixMode, MixPlan, PoseNet};
use crate::synthpose::{cutout_at_joints, AffineParams, PoseSample};
use crate::teacher::TeacherState;
use crate::tensorgrid::FeatureBatch;

use super::metrics::keypoints_from_heatmaps;

/// Images, heatmap targets and a per-(image, keypoint) weight.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: FeatureBatch,
    pub targets: FeatureBatch,
    /// `n * K` entries, 1 for visible keypoints and 0 otherwise.
    pub mask: Vec<f64>,
}

impl LabeledBatch {
    pub fn from_samples(samples: &[PoseSample]) -> Result<Self> {
        let images = FeatureBatch::concat(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let targets = FeatureBatch::concat(&samples.iter().map(|s| &s.heatmaps).collect::<Vec<_>>())?;
        let mask = samples
            .iter()
            .flat_map(|s| s.visibility.iter().map(|v| if *v { 1.0 } else { 0.0 }))
            .collect();
        Ok(Self { images, targets, mask })
    }
}

/// Mean over images of `sum_k m_k sum_pixels (p - t)^2 / (K h w)`, and its
/// gradient with respect to `pred`. No mask means every channel counts.
pub fn masked_mse(pred: &FeatureBatch, target: &FeatureBatch, mask: Option<&[f64]>) -> Result<(f64, FeatureBatch)> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::Shape(format!("prediction {s} vs target {}", target.shape())));
    }
    if let Some(m) = mask {
        if m.len() != s.n * s.c {
            return Err(Error::Shape(format!("mask has {} entries for {} channels", m.len(), s.n * s.c)));
        }
    }
    let norm = (s.c * s.plane_len()) as f64;
    let mut grad = FeatureBatch::zeros(s.n, s.c, s.h, s.w);
    let mut total = 0.0;
    let plane = s.plane_len();
    for n in 0..s.n {
        let mut per_image = 0.0;
        for c in 0..s.c {
            let w = mask.map_or(1.0, |m| m[n * s.c + c]);
            if w == 0.0 {
                continue;
            }
            let start = (n * s.c + c) * plane;
            let (p, t) = (&pred.data()[start..start + plane], &target.data()[start..start + plane]);
            let g = &mut grad.data_mut()[start..start + plane];
            for i in 0..plane {
                let d = p[i] - t[i];
                per_image += w * d * d;
                g[i] = 2.0 * w * d / (norm * s.n as f64);
            }
        }
        total += per_image / norm;
    }
    Ok((total / s.n as f64, grad))
}

/// Teacher predictions on the weak view. These are plain values, so no
/// gradient can reach the teacher.
pub fn pseudo_labels(teacher: &TeacherState, weak: &FeatureBatch) -> Result<FeatureBatch> {
    teacher.infer(weak)
}

/// Student input and regression target for the unlabeled branch.
#[derive(Debug, Clone)]
pub struct StrongView {
    pub input: FeatureBatch,
    pub targets: FeatureBatch,
    /// Mixing applied inside the student forward pass, if any.
    pub mix: Option<MixMode>,
}

fn swap_channels(batch: &mut FeatureBatch, n: usize, pairs: &[(usize, usize)]) {
    for &(a, b) in pairs {
        let pa = batch.plane(n, a).to_vec();
        let pb = batch.plane(n, b).to_vec();
        let s = batch.shape();
        let plane = s.plane_len();
        batch.data_mut()[(n * s.c + a) * plane..(n * s.c + a + 1) * plane].copy_from_slice(&pb);
        batch.data_mut()[(n * s.c + b) * plane..(n * s.c + b + 1) * plane].copy_from_slice(&pa);
    }
}

/// Builds the strong branch from the weak images and their pseudo labels.
pub fn strong_view<R: Rng + ?Sized>(weak: &FeatureBatch, pseudo: FeatureBatch, cfg: &TrainConfig, rng: &mut R) -> Result<StrongView> {
    let n = weak.shape().n;
    match cfg.mode {
        AugmentMode::SupervisedOnly => Ok(StrongView { input: weak.clone(), targets: pseudo, mix: None }),
        AugmentMode::Mum => Ok(StrongView { input: weak.clone(), targets: pseudo, mix: Some(MixMode::Mum) }),
        AugmentMode::PoseMum => Ok(StrongView { input: weak.clone(), targets: pseudo, mix: Some(MixMode::PoseMum) }),
        AugmentMode::Affine => {
            let mut input = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for i in 0..n {
                let p = AffineParams::sample(rng, cfg.aug.max_shift, cfg.aug.max_scale, cfg.aug.flip_prob);
                input.push(p.warp(&weak.slice_items(i, 1)?));
                let hp = p.to_heatmap_space(cfg.render.image_size, cfg.render.heatmap_size);
                let mut t = hp.warp(&pseudo.slice_items(i, 1)?);
                if p.flip {
                    swap_channels(&mut t, 0, &cfg.skeleton.flip_pairs);
                }
                targets.push(t);
            }
            Ok(StrongView {
                input: FeatureBatch::concat(&input.iter().collect::<Vec<_>>())?,
                targets: FeatureBatch::concat(&targets.iter().collect::<Vec<_>>())?,
                mix: None,
            })
        }
        AugmentMode::JointCutout => {
            let mut input = weak.clone();
            let k = pseudo.shape().c;
            for i in 0..n {
                let kp = keypoints_from_heatmaps(&pseudo, i, cfg.render.image_size);
                cutout_at_joints(&mut input, i, &kp, &vec![true; k], cfg.aug.cutout_joints, cfg.aug.cutout_patch, rng);
            }
            Ok(StrongView { input, targets: pseudo, mix: None })
        }
    }
}

/// Unweighted student loss on one view and its parameter gradients.
/// `bn_mode` applies to unmixed views; mixed views always use batch statistics.
pub fn student_loss<R: Rng + ?Sized>(
    student: &mut PoseNet,
    view: &StrongView,
    cfg: &TrainConfig,
    bn_mode: BnMode,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let out = match view.mix {
        Some(mode) => student.forward_student(&view.input, &cfg.mix, mode, rng)?,
        None => student.forward_with_plan(&view.input, &MixPlan::none(), bn_mode)?,
    };
    let (loss, g) = masked_mse(&out.heatmaps, &view.targets, None)?;
    let grads = student.backward(&out.trace, &g)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub sup: f64,
    /// Zero when the unlabeled branch did not run.
    pub unsup: f64,
    /// `sup + lambda_u * unsup`.
    pub total: f64,
    pub grads: Gradients,
}

/// Supervised term on `sup` plus `lambda_u` times the consistency term on the
/// weak unlabeled images (skipped when `weak` is `None` or the mode is
/// supervised only).
pub fn total_loss<R: Rng + ?Sized>(
    student: &mut PoseNet,
    teacher: &TeacherState,
    sup: &LabeledBatch,
    weak: Option<&FeatureBatch>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let (pred, trace) = student.forward_train(&sup.images)?;
    let (sup_loss, g) = masked_mse(&pred, &sup.targets, Some(&sup.mask))?;
    let mut grads = student.backward(&trace, &g)?;
    let mut unsup = 0.0;
    if let (Some(weak), true) = (weak, cfg.mode.uses_unlabeled()) {
        if weak.shape().n % cfg.mix.n_group != 0 {
            return Err(Error::config(
                "train.batch_groups",
                format!("unlabeled batch of {} is not a whole number of groups of {}", weak.shape().n, cfg.mix.n_group),
            ));
        }
        let pseudo = pseudo_labels(teacher, weak)?;
        let view = strong_view(weak, pseudo, cfg, rng)?;
        let (l, g) = student_loss(student, &view, cfg, BnMode::Train, rng)?;
        unsup = l;
        grads.add_scaled(&g, cfg.lambda_u);
    }
    Ok(LossBreakdown {
        sup: sup_loss,
        unsup,
        total: sup_loss + cfg.lambda_u * unsup,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Parameterized;
    use crate::synthpose::{generate_dataset, DataConfig};
    use crate::teacher::{TeacherConfig, TeacherMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: AugmentMode) -> (TrainConfig, PoseNet, LabeledBatch, FeatureBatch) {
        let cfg = TrainConfig { mode, ..TrainConfig::default() };
        let data = generate_dataset(&DataConfig { n_labeled: 4, n_unlabeled: 8, n_val: 0, seed: 3, ..DataConfig::default() }).unwrap();
        let net = PoseNet::new(cfg.net.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sup = LabeledBatch::from_samples(&data.labeled).unwrap();
        let v = data.train_view();
        let weak = FeatureBatch::concat(&(0..8).map(|i| v.unlabeled_image(i)).collect::<Vec<_>>()).unwrap();
        (cfg, net, sup, weak)
    }

    #[test]
    fn masked_mse_by_hand() {
        let p = FeatureBatch::from_vec(crate::tensorgrid::Shape4::new(2, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = FeatureBatch::zeros(2, 2, 1, 1);
        let (l, g) = masked_mse(&p, &t, Some(&[1.0, 0.0, 1.0, 1.0])).unwrap();
        // image 0: 1/2, image 1: (9 + 16)/2
        assert_eq!(l, (0.5 + 12.5) / 2.0);
        assert_eq!(g.data(), &[0.5, 0.0, 1.5, 2.0]);
        assert_eq!(masked_mse(&p, &t, None).unwrap().0, (2.5 + 12.5) / 2.0);
    }

    #[test]
    fn zero_lambda_and_no_unlabeled_reduce_to_supervised() {
        for mode in AugmentMode::ALL {
            let (mut cfg, net, sup, weak) = setup(mode);
            cfg.lambda_u = 0.0;
            let teacher = TeacherState::init_from_student(&net, cfg.teacher).unwrap();
            let mut a = net.clone();
            let with = total_loss(&mut a, &teacher, &sup, Some(&weak), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let mut b = net.clone();
            let without = total_loss(&mut b, &teacher, &sup, None, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(with.total, with.sup);
            assert_eq!(with.sup, without.sup);
            assert_eq!(without.unsup, 0.0);
            assert_eq!(with.grads, without.grads);
        }
    }

    #[test]
    fn additivity() {
        let (mut cfg, net, sup, weak) = setup(AugmentMode::PoseMum);
        cfg.lambda_u = 0.7;
        let teacher = TeacherState::init_from_student(&net, cfg.teacher).unwrap();
        let mut a = net.clone();
        let joint = total_loss(&mut a, &teacher, &sup, Some(&weak), &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut b = net.clone();
        let (pred, _) = b.forward_train(&sup.images).unwrap();
        let sup_only = masked_mse(&pred, &sup.targets, Some(&sup.mask)).unwrap().0;
        let pseudo = pseudo_labels(&teacher, &weak).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let view = strong_view(&weak, pseudo, &cfg, &mut rng).unwrap();
        let (u, _) = student_loss(&mut b, &view, &cfg, BnMode::Train, &mut rng).unwrap();
        assert!((joint.total - (sup_only + 0.7 * u)).abs() < 1e-12);
        assert_eq!(joint.unsup, u);
    }

    #[test]
    fn pseudo_labels_are_detached() {
        let (cfg, net, _, weak) = setup(AugmentMode::Mum);
        let mut teacher = TeacherState::init_from_student(&net, cfg.teacher).unwrap();
        let pseudo = pseudo_labels(&teacher, &weak).unwrap();
        let constant = FeatureBatch::from_vec(pseudo.shape(), pseudo.data().to_vec()).unwrap();
        let view = strong_view(&weak, pseudo, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let detached = StrongView { targets: constant, ..view.clone() };
        let (la, ga) = student_loss(&mut net.clone(), &view, &cfg, BnMode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (lb, gb) = student_loss(&mut net.clone(), &detached, &cfg, BnMode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!((la, &ga), (lb, &gb));

        // moving the teacher changes the loss but not the gradient path
        let mut c = teacher.to_checkpoint();
        for (name, v) in c.clone().entries() {
            if name.ends_with("conv.weight") {
                c.insert(name.clone(), v.iter().map(|x| x * 1.1).collect());
            }
        }
        teacher.load_checkpoint(&c).unwrap();
        let view2 = StrongView { targets: pseudo_labels(&teacher, &weak).unwrap(), ..view };
        let (lc, _) = student_loss(&mut net.clone(), &view2, &cfg, BnMode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn single_teacher_frozen_bn_gives_zero_consistency() {
        let (cfg, mut net, _, weak) = setup(AugmentMode::Affine);
        for _ in 0..2 {
            net.forward_plain(&weak, BnMode::Train).unwrap();
        }
        let teacher = TeacherState::init_from_student(&net, TeacherConfig { mode: TeacherMode::Single, ..cfg.teacher }).unwrap();
        let pseudo = pseudo_labels(&teacher, &weak).unwrap();
        let view = StrongView { input: weak.clone(), targets: pseudo, mix: None };
        let (frozen, _) = student_loss(&mut net.clone(), &view, &cfg, BnMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(frozen, 0.0);
        // batch statistics differ from the running ones, so train mode does not vanish
        let (train, _) = student_loss(&mut net.clone(), &view, &cfg, BnMode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let direct = {
            let mut n2 = net.clone();
            let a = n2.forward_plain(&weak, BnMode::Train).unwrap();
            masked_mse(&a, &teacher.infer(&weak).unwrap(), None).unwrap().0
        };
        assert_eq!(train, direct);
        assert!(net.param_count() > 0);
    }

    #[test]
    fn group_misalignment_is_rejected() {
        let (cfg, mut net, sup, weak) = setup(AugmentMode::Mum);
        let teacher = TeacherState::init_from_student(&net, cfg.teacher).unwrap();
        let odd = weak.slice_items(0, 6).unwrap();
        let r = total_loss(&mut net, &teacher, &sup, Some(&odd), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn affine_view_keeps_shapes_and_cutout_zeroes() {
        for mode in [AugmentMode::Affine, AugmentMode::JointCutout] {
            let (cfg, net, _, weak) = setup(mode);
            let teacher = TeacherState::init_from_student(&net, cfg.teacher).unwrap();
            let pseudo = pseudo_labels(&teacher, &weak).unwrap();
            let view = strong_view(&weak, pseudo.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(view.input.shape(), weak.shape());
            assert_eq!(view.targets.shape(), pseudo.shape());
            if mode == AugmentMode::JointCutout {
                assert_eq!(view.targets, pseudo);
                let zeros = view.input.data().iter().filter(|v| **v == 0.0).count();
                assert!(zeros >= 8 * 49);
            }
        }
    }
}
