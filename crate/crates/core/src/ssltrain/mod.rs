//! Teacher-student training loop, metrics and the ablation runner.

mod experiment;
mod loss;
mod metrics;
mod trainer;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixmask::MixSpec;
use crate::posenet::PoseNetConfig;
use crate::synthpose::{AugmentSpec, RenderSpec, SkeletonSpec};
use crate::teacher::TeacherConfig;

pub use experiment::{
    ablation_grid, read_metrics_csv, run_ablation, run_experiment, write_summary_csv, AblationCell, ExperimentOptions,
    SummaryRow, ABLATION_GRIDS, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER, SIMPLIFIED_AP_NOTE, SUMMARY_FILE,
    SUMMARY_HEADER,
};
pub use loss::{
    masked_mse, pseudo_labels, strong_view, student_loss, total_loss, LabeledBatch, LossBreakdown, StrongView,
};
pub use metrics::{
    evaluate, figure_scale, keypoint_similarity, keypoints_from_heatmaps, similarity_thresholds, EvalResult,
    MetricAccumulator, KAPPA,
};
pub use trainer::{MetricsRow, StepInfo, Trainer};

/// Strong-branch augmentation applied to unlabeled images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentMode {
    /// Labeled data only; the unlabeled branch is skipped.
    SupervisedOnly,
    /// A second random affine on top of the weak view.
    Affine,
    JointCutout,
    Mum,
    PoseMum,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 5] = [
        AugmentMode::SupervisedOnly,
        AugmentMode::Affine,
        AugmentMode::JointCutout,
        AugmentMode::Mum,
        AugmentMode::PoseMum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::SupervisedOnly => "supervised_only",
            AugmentMode::Affine => "affine",
            AugmentMode::JointCutout => "joint_cutout",
            AugmentMode::Mum => "mum",
            AugmentMode::PoseMum => "pose_mum",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != AugmentMode::SupervisedOnly
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "train.mode",
                    format!("unknown mode `{s}` (supervised_only|affine|joint_cutout|mum|pose_mum)"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: PoseNetConfig,
    pub mix: MixSpec,
    pub teacher: TeacherConfig,
    pub mode: AugmentMode,
    /// Weak affine view for the teacher and for labeled batches.
    pub affine: bool,
    pub aug: AugmentSpec,
    pub skeleton: SkeletonSpec,
    pub render: RenderSpec,
    pub lambda_u: f64,
    pub epochs: usize,
    /// Unlabeled batch is `batch_groups * mix.n_group` images.
    pub batch_groups: usize,
    pub sup_batch: usize,
    pub lr: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: PoseNetConfig::default(),
            mix: MixSpec::default(),
            teacher: TeacherConfig::default(),
            mode: AugmentMode::PoseMum,
            affine: true,
            aug: AugmentSpec::default(),
            skeleton: SkeletonSpec::default(),
            render: RenderSpec::default(),
            lambda_u: 1.0,
            epochs: 30,
            batch_groups: 2,
            sup_batch: 8,
            lr: 1e-3,
            lr_milestones: vec![20, 25],
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn unsup_batch(&self) -> usize {
        self.batch_groups * self.mix.n_group
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.mix.validate()?;
        self.teacher.validate()?;
        self.skeleton.validate()?;
        if matches!(self.mode, AugmentMode::Mum | AugmentMode::PoseMum) {
            self.net.validate_mixing(&self.mix)?;
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::config("train.lambda_u", format!("must be finite and >= 0, got {}", self.lambda_u)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_groups == 0 {
            return Err(Error::config("train.batch_groups", "must be positive"));
        }
        if self.sup_batch == 0 {
            return Err(Error::config("train.sup_batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("train.lr_decay_factor", "must lie in (0, 1]"));
        }
        for w in self.lr_milestones.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config("train.lr_milestones", "must be strictly increasing"));
            }
        }
        if self.lr_milestones.iter().any(|m| *m >= self.epochs || *m == 0) {
            return Err(Error::config("train.lr_milestones", format!("must lie in 1..{}", self.epochs)));
        }
        if self.render.image_size != self.net.input_size {
            return Err(Error::config("data.image_size", "must equal net.input_size"));
        }
        if self.render.heatmap_size != self.net.heatmap_size {
            return Err(Error::config("data.heatmap_size", "must equal net.heatmap_size"));
        }
        if self.skeleton.n_keypoints() != self.net.n_keypoints {
            return Err(Error::config("net.n_keypoints", "must match the skeleton"));
        }
        if self.aug.max_scale < 1.0 || self.aug.max_shift < 0.0 || !(0.0..=1.0).contains(&self.aug.flip_prob) {
            return Err(Error::config("aug", "need max_scale >= 1, max_shift >= 0, flip_prob in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|m| **m <= epoch).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_at_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(19), 1e-3);
        assert_eq!(cfg.lr_at(20), cfg.lr_at(19) * 0.1);
        assert_eq!(cfg.lr_at(24), cfg.lr_at(20));
        assert_eq!(cfg.lr_at(25), cfg.lr * 0.1f64.powi(2));
    }

    #[test]
    fn validation_names_fields() {
        let bad = |f: fn(&mut TrainConfig), field: &str| {
            let mut c = TrainConfig::default();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { field: got, .. }) => assert!(got.starts_with(field), "{got} vs {field}"),
                other => panic!("{field}: {other:?}"),
            }
        };
        bad(|c| c.lambda_u = -1.0, "train.lambda_u");
        bad(|c| c.lr_milestones = vec![25, 20], "train.lr_milestones");
        bad(|c| c.lr_milestones = vec![20, 30], "train.lr_milestones");
        bad(|c| c.epochs = 0, "train.epochs");
        bad(|c| c.teacher.decay = 2.0, "teacher.decay");
        bad(|c| c.mix.n_tiles_h = 5, "mix.n_tiles");
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!("POSE_MUM".parse::<AugmentMode>().unwrap(), AugmentMode::PoseMum);
    }
}
