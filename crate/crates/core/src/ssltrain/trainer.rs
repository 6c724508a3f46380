use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{total_loss, LabeledBatch};
use super::metrics::evaluate;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nnkit::{AdamState, Checkpoint, Parameterized};
use crate::posenet::PoseNet;
use crate::synthpose::{apply_affine, AffineParams, PoseSample, TrainView};
use crate::teacher::TeacherState;
use crate::tensorgrid::FeatureBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Number of completed epochs.
    pub epoch: usize,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
    pub pck01: f64,
    pub pck02: f64,
    pub map: f64,
    pub teacher_pck01: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_sup,
            self.loss_unsup,
            self.loss_total,
            self.pck01,
            self.pck02,
            self.map,
            self.teacher_pck01
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Corrupt(format!("metrics row needs 8 fields: `{line}`")));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::Corrupt(format!("bad number `{}`", f[i])));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| Error::Corrupt(format!("bad epoch `{}`", f[0])))?,
            loss_sup: num(1)?,
            loss_unsup: num(2)?,
            loss_total: num(3)?,
            pck01: num(4)?,
            pck02: num(5)?,
            map: num(6)?,
            teacher_pck01: num(7)?,
        })
    }
}

/// State handed to a step observer after the teacher update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub student: &'a PoseNet,
    /// Teacher network as it was before this step's update.
    pub teacher_before: &'a PoseNet,
    pub teacher: &'a TeacherState,
}

/// Random streams are derived from (seed, epoch, purpose), so an epoch's
/// randomness does not depend on what earlier epochs consumed.
const LABELED_ORDER: u64 = 0;
const UNLABELED_ORDER: u64 = 1;
const SUP_AUG: u64 = 2;
const WEAK_AUG: u64 = 3;
const STRONG_AUG: u64 = 4;
const PURPOSES: u64 = 8;

fn stream(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 * PURPOSES + purpose);
    r
}

fn init_stream(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(u64::MAX);
    r
}

pub struct Trainer {
    cfg: TrainConfig,
    student: PoseNet,
    teacher: TeacherState,
    adam: AdamState,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = PoseNet::new(cfg.net.clone(), &mut init_stream(cfg.seed))?;
        let teacher = TeacherState::init_from_student(&student, cfg.teacher)?;
        let sizes: Vec<usize> = student.params().iter().map(|p| p.len()).collect();
        let adam = AdamState::new(&sizes, cfg.lr);
        Ok(Self { cfg, student, teacher, adam, epoch: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn student(&self) -> &PoseNet {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherState {
        &self.teacher
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Iterations per epoch: enough to visit every labeled and every unlabeled
    /// image once. Independent of the augmentation mode.
    pub fn iterations(&self, data: &TrainView) -> usize {
        let l = data.labeled.len().div_ceil(self.cfg.sup_batch);
        let u = data.n_unlabeled().div_ceil(self.cfg.unsup_batch());
        l.max(u)
    }

    pub fn train_epoch(&mut self, data: &TrainView, val: &[PoseSample]) -> Result<MetricsRow> {
        self.train_epoch_observed(data, val, None)
    }

    pub fn train_epoch_observed(
        &mut self,
        data: &TrainView,
        val: &[PoseSample],
        mut observer: Option<&mut dyn FnMut(&StepInfo)>,
    ) -> Result<MetricsRow> {
        if data.labeled.is_empty() {
            return Err(Error::config("data.n_labeled", "training needs at least one labeled sample"));
        }
        self.check_sample(&data.labeled[0])?;
        let e = self.epoch;
        let cfg = self.cfg.clone();
        let lr = cfg.lr_at(e);
        self.adam.lr = lr;

        let (n_l, n_u) = (data.labeled.len(), data.n_unlabeled());
        let (b_s, b_u) = (cfg.sup_batch, cfg.unsup_batch());
        let mut lab_order: Vec<usize> = (0..n_l).collect();
        lab_order.shuffle(&mut stream(cfg.seed, e, LABELED_ORDER));
        let mut unl_order: Vec<usize> = (0..n_u).collect();
        unl_order.shuffle(&mut stream(cfg.seed, e, UNLABELED_ORDER));
        let (mut sup_rng, mut weak_rng, mut strong_rng) =
            (stream(cfg.seed, e, SUP_AUG), stream(cfg.seed, e, WEAK_AUG), stream(cfg.seed, e, STRONG_AUG));
        let use_unlabeled = cfg.mode.uses_unlabeled() && n_u > 0;

        let iters = self.iterations(data);
        let (mut sum_sup, mut sum_unsup, mut sum_total) = (0.0, 0.0, 0.0);
        for it in 0..iters {
            let lab_idx: Vec<usize> = (0..b_s).map(|j| lab_order[(it * b_s + j) % n_l]).collect();
            let samples: Vec<PoseSample> = lab_idx
                .iter()
                .map(|&i| {
                    let s = &data.labeled[i];
                    if cfg.affine {
                        let p = AffineParams::sample(&mut sup_rng, cfg.aug.max_shift, cfg.aug.max_scale, cfg.aug.flip_prob);
                        apply_affine(s, &p, &cfg.skeleton, &cfg.render)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let sup = LabeledBatch::from_samples(&samples)?;

            let mut unl_idx = Vec::new();
            let weak = if use_unlabeled {
                unl_idx = (0..b_u).map(|j| unl_order[(it * b_u + j) % n_u]).collect();
                let imgs: Vec<FeatureBatch> = unl_idx
                    .iter()
                    .map(|&i| {
                        let img = data.unlabeled_image(i);
                        if cfg.affine {
                            AffineParams::sample(&mut weak_rng, cfg.aug.max_shift, cfg.aug.max_scale, cfg.aug.flip_prob)
                                .warp(img)
                        } else {
                            img.clone()
                        }
                    })
                    .collect();
                Some(FeatureBatch::concat(&imgs.iter().collect::<Vec<_>>())?)
            } else {
                None
            };

            let out = total_loss(&mut self.student, &self.teacher, &sup, weak.as_ref(), &cfg, &mut strong_rng)?;
            if !(out.total.is_finite() && out.grads.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {e}, iteration {it}, lr {lr}: sup {} unsup {} total {}; \
                     labeled batch {lab_idx:?}; unlabeled batch {unl_idx:?}",
                    out.sup, out.unsup, out.total
                )));
            }
            sum_sup += out.sup;
            sum_unsup += out.unsup;
            sum_total += out.total;

            self.adam.step(&mut self.student.params_mut(), &out.grads.0);
            let before = observer.as_ref().map(|_| self.teacher.network().clone());
            self.teacher.update(&self.student)?;
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(&StepInfo {
                    epoch: e,
                    iteration: it,
                    lr,
                    loss_total: out.total,
                    student: &self.student,
                    teacher_before: before,
                    teacher: &self.teacher,
                });
            }
        }
        self.epoch += 1;

        let n = iters as f64;
        let (student_eval, teacher_eval) = if val.is_empty() {
            (None, None)
        } else {
            (Some(evaluate(&self.student, val)?), Some(evaluate(self.teacher.network(), val)?))
        };
        Ok(MetricsRow {
            epoch: self.epoch,
            loss_sup: sum_sup / n,
            loss_unsup: sum_unsup / n,
            loss_total: sum_total / n,
            pck01: student_eval.map_or(0.0, |r| r.pck01),
            pck02: student_eval.map_or(0.0, |r| r.pck02),
            map: student_eval.map_or(0.0, |r| r.map),
            teacher_pck01: teacher_eval.map_or(0.0, |r| r.pck01),
        })
    }

    fn check_sample(&self, s: &PoseSample) -> Result<()> {
        let is = s.image.shape();
        let hs = s.heatmaps.shape();
        if (is.h, is.w) != self.cfg.net.input_size || (hs.h, hs.w) != self.cfg.net.heatmap_size || hs.c != self.cfg.net.n_keypoints {
            return Err(Error::config(
                "data",
                format!(
                    "dataset samples are {}x{} with {} heatmaps of {}x{}; the network expects {:?} and {} of {:?}",
                    is.h, is.w, hs.c, hs.h, hs.w, self.cfg.net.input_size, self.cfg.net.n_keypoints, self.cfg.net.heatmap_size
                ),
            ));
        }
        Ok(())
    }

    /// Student, teacher, optimizer and epoch counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend_prefixed("student.", &self.student.to_checkpoint());
        c.extend_prefixed("", &self.teacher.to_checkpoint());
        for ((name, m), v) in self.student.param_names().iter().zip(&self.adam.m).zip(&self.adam.v) {
            c.insert(format!("adam.m.{name}"), m.clone());
            c.insert(format!("adam.v.{name}"), v.clone());
        }
        c.insert("adam.step", vec![self.adam.step as f64]);
        c.insert("train.epoch", vec![self.epoch as f64]);
        c
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        self.student.load_checkpoint(&c.strip_prefix("student."))?;
        self.teacher.load_checkpoint(c)?;
        let names = self.student.param_names();
        for (k, name) in names.iter().enumerate() {
            for (buf, key) in [(&mut self.adam.m[k], format!("adam.m.{name}")), (&mut self.adam.v[k], format!("adam.v.{name}"))] {
                let src = c.require(&key)?;
                if src.len() != buf.len() {
                    return Err(Error::Corrupt(format!("entry `{key}` has the wrong length")));
                }
                buf.copy_from_slice(src);
            }
        }
        self.adam.step = scalar(c, "adam.step")? as u64;
        self.epoch = scalar(c, "train.epoch")? as usize;
        Ok(())
    }
}

fn scalar(c: &Checkpoint, name: &str) -> Result<f64> {
    c.require(name)?
        .first()
        .copied()
        .ok_or_else(|| Error::Corrupt(format!("entry `{name}` is empty")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssltrain::AugmentMode;
    use crate::synthpose::{generate_dataset, DataConfig};

    fn tiny(mode: AugmentMode) -> (TrainConfig, crate::synthpose::DatasetSplit) {
        let cfg = TrainConfig { mode, epochs: 3, lr_milestones: vec![2], ..TrainConfig::default() };
        let data = generate_dataset(&DataConfig { n_labeled: 8, n_unlabeled: 16, n_val: 8, seed: 1, ..DataConfig::default() }).unwrap();
        (cfg, data)
    }

    #[test]
    fn deterministic_given_seed() {
        let (cfg, data) = tiny(AugmentMode::PoseMum);
        let run = || {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            (0..2).map(|_| t.train_epoch(&data.train_view(), &data.val).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_restore_continues_exactly() {
        let (cfg, data) = tiny(AugmentMode::Affine);
        let mut a = Trainer::new(cfg.clone()).unwrap();
        a.train_epoch(&data.train_view(), &data.val).unwrap();
        let ckpt = Checkpoint::decode(&a.to_checkpoint().encode()).unwrap();
        let next = a.train_epoch(&data.train_view(), &data.val).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        b.restore(&ckpt).unwrap();
        assert_eq!(b.epoch(), 1);
        assert_eq!(b.train_epoch(&data.train_view(), &data.val).unwrap(), next);
    }

    #[test]
    fn single_teacher_tracks_student() {
        let (mut cfg, data) = tiny(AugmentMode::Mum);
        cfg.teacher.mode = crate::teacher::TeacherMode::Single;
        let mut t = Trainer::new(cfg).unwrap();
        let mut steps = 0;
        let mut obs = |s: &StepInfo| {
            steps += 1;
            assert_eq!(s.teacher.network().params(), s.student.params());
        };
        t.train_epoch_observed(&data.train_view(), &[], Some(&mut obs)).unwrap();
        assert_eq!(steps, 2);
    }

    #[test]
    fn csv_row_round_trip() {
        let r = MetricsRow { epoch: 3, loss_sup: 0.1, loss_unsup: 1e-17, loss_total: 0.3, pck01: 0.5, pck02: 1.0, map: 0.25, teacher_pck01: 0.0 };
        assert_eq!(MetricsRow::parse_csv(&r.to_csv()).unwrap(), r);
    }
}
