//! Teacher network maintained from the student by copy, EMA or EMAN updates.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nnkit::{Checkpoint, Parameterized};
use crate::posenet::PoseNet;
use crate::tensorgrid::FeatureBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TeacherMode {
    /// Teacher is the current student.
    Single,
    /// Moving average of trainable parameters; BN buffers are left alone.
    Ema,
    /// Moving average of trainable parameters and BN running statistics.
    Eman,
}

impl TeacherMode {
    pub const ALL: [TeacherMode; 3] = [TeacherMode::Single, TeacherMode::Ema, TeacherMode::Eman];

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherMode::Single => "single",
            TeacherMode::Ema => "ema",
            TeacherMode::Eman => "eman",
        }
    }
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(TeacherMode::Single),
            "ema" => Ok(TeacherMode::Ema),
            "eman" => Ok(TeacherMode::Eman),
            other => Err(Error::config("teacher.mode", format!("unknown mode `{other}` (single|ema|eman)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    /// Weight kept on the old teacher value per update.
    pub decay: f64,
    /// EMAN only: average standard deviations instead of the stored variances.
    pub average_std: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Eman,
            decay: 0.6,
            average_std: false,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::config("teacher.decay", format!("{} is outside [0, 1]", self.decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    net: PoseNet,
    pub config: TeacherConfig,
    pub step: u64,
}

impl TeacherState {
    /// Deep copy of the student's parameters and BN statistics.
    pub fn init_from_student(student: &PoseNet, config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: student.clone(),
            config,
            step: 0,
        })
    }

    pub fn network(&self) -> &PoseNet {
        &self.net
    }

    pub fn update(&mut self, student: &PoseNet) -> Result<()> {
        self.check_shapes(student)?;
        let tau = self.config.decay;
        match self.config.mode {
            TeacherMode::Single => {
                let cfg = self.net.config().clone();
                self.net = student.clone();
                // keep our own unmix site; it only affects mixed forwards
                self.net.set_unmix_site(cfg.unmix_site);
            }
            TeacherMode::Ema => average(self.net.params_mut(), student.params(), tau),
            TeacherMode::Eman => {
                average(self.net.params_mut(), student.params(), tau);
                let average_std = self.config.average_std;
                for (t, s) in self.net.bns_mut().iter_mut().zip(student.bns()) {
                    average_one(&mut t.running_mean, &s.running_mean, tau);
                    if average_std && tau != 1.0 {
                        for (tv, sv) in t.running_var.iter_mut().zip(&s.running_var) {
                            let (ts, ss) = (tv.sqrt(), sv.sqrt());
                            let sd = ss + tau * (ts - ss);
                            *tv = sd * sd;
                        }
                    } else {
                        average_one(&mut t.running_var, &s.running_var, tau);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Pseudo heatmaps from the eval-mode teacher. Pure.
    pub fn infer(&self, images: &FeatureBatch) -> Result<FeatureBatch> {
        self.net.infer(images)
    }

    fn check_shapes(&self, student: &PoseNet) -> Result<()> {
        let a: Vec<usize> = self.net.params().iter().chain(self.net.bn_stats().iter()).map(|p| p.len()).collect();
        let b: Vec<usize> = student.params().iter().chain(student.bn_stats().iter()).map(|p| p.len()).collect();
        if a != b {
            return Err(Error::Shape("teacher and student parameter shapes differ".into()));
        }
        Ok(())
    }

    /// Entries under `teacher.`, plus `teacher.step`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend_prefixed("teacher.", &self.net.to_checkpoint());
        c.insert("teacher.step", vec![self.step as f64]);
        c
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.net.load_checkpoint(&ckpt.strip_prefix("teacher."))?;
        let step = ckpt.require("teacher.step")?;
        self.step = step.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

fn average(teacher: Vec<&mut [f64]>, student: Vec<&[f64]>, tau: f64) {
    for (t, s) in teacher.into_iter().zip(student) {
        average_one(t, s, tau);
    }
}

// `s + tau (t - s)`: same value as `tau t + (1 - tau) s` but without
// rounding `1 - tau`, so 0.9 / 0 / 10 gives exactly 1. tau = 1 must freeze
// bit-exactly, which `s + (t - s)` does not.
fn average_one(t: &mut [f64], s: &[f64], tau: f64) {
    if tau == 1.0 {
        return;
    }
    for (tv, sv) in t.iter_mut().zip(s) {
        *tv = sv + tau * (*tv - sv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::BnMode;
    use crate::posenet::PoseNetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> PoseNetConfig {
        PoseNetConfig {
            stage_channels: [2, 3, 3, 4],
            stage_strides: [1, 2, 1, 2],
            decoder_channels: 3,
            n_keypoints: 2,
            input_size: (8, 8),
            heatmap_size: (8, 8),
            ..PoseNetConfig::default()
        }
    }

    fn net(seed: u64) -> PoseNet {
        PoseNet::new(small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn images(seed: u64, n: usize) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureBatch::from_vec(
            crate::tensorgrid::Shape4::new(n, 1, 8, 8),
            (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Student with trained-looking BN buffers, distinct from the fresh ones.
    fn warmed(seed: u64) -> PoseNet {
        let mut s = net(seed);
        for k in 0..3 {
            s.forward_plain(&images(100 + k, 4), BnMode::Train).unwrap();
        }
        s
    }

    fn cfg(mode: TeacherMode, decay: f64) -> TeacherConfig {
        TeacherConfig { mode, decay, average_std: false }
    }

    fn flat(n: &PoseNet) -> (Vec<f64>, Vec<f64>) {
        (
            n.params().iter().flat_map(|p| p.to_vec()).collect(),
            n.bn_stats().iter().flat_map(|p| p.to_vec()).collect(),
        )
    }

    #[test]
    fn init_matches_student_eval() {
        let s = warmed(1);
        let x = images(2, 3);
        for mode in TeacherMode::ALL {
            let t = TeacherState::init_from_student(&s, cfg(mode, 0.6)).unwrap();
            assert_eq!(t.step, 0);
            assert!(t.infer(&x).unwrap().bit_eq(&s.infer(&x).unwrap()));
            assert_eq!(t, TeacherState::init_from_student(&s, cfg(mode, 0.6)).unwrap());
        }
        let t = TeacherState::init_from_student(&s, cfg(TeacherMode::Ema, 0.6)).unwrap();
        let a = t.infer(&x).unwrap();
        assert!(a.bit_eq(&t.infer(&x).unwrap()));
        assert_eq!(a.shape(), crate::tensorgrid::Shape4::new(3, 2, 8, 8));
    }

    #[test]
    fn single_copies_everything() {
        let mut t = TeacherState::init_from_student(&net(3), cfg(TeacherMode::Single, 0.6)).unwrap();
        let s = warmed(4);
        t.update(&s).unwrap();
        assert_eq!(flat(t.network()), flat(&s));
        let x = images(5, 2);
        assert!(t.infer(&x).unwrap().bit_eq(&s.infer(&x).unwrap()));
        assert_eq!(t.step, 1);
    }

    #[test]
    fn scalar_arithmetic() {
        let mut s = net(6);
        let mut t = TeacherState::init_from_student(&s, cfg(TeacherMode::Eman, 0.6)).unwrap();
        t.net.params_mut()[0][0] = 1.0;
        s.params_mut()[0][0] = 0.5;
        t.update(&s).unwrap();
        assert_eq!(t.net.params()[0][0], 0.8);

        t.config.decay = 0.9;
        t.net.bns_mut()[0].running_mean[0] = 0.0;
        s.bns_mut()[0].running_mean[0] = 10.0;
        t.update(&s).unwrap();
        assert_eq!(t.net.bns()[0].running_mean[0], 1.0);
    }

    #[test]
    fn ema_leaves_bn_buffers() {
        let fresh = net(7);
        let mut t = TeacherState::init_from_student(&fresh, cfg(TeacherMode::Ema, 0.6)).unwrap();
        let before = flat(t.network()).1;
        let s = warmed(7);
        t.update(&s).unwrap();
        assert_eq!(flat(t.network()).1, before);

        let mut e = TeacherState::init_from_student(&fresh, cfg(TeacherMode::Eman, 0.6)).unwrap();
        e.update(&s).unwrap();
        let (after, target) = (flat(e.network()).1, flat(&s).1);
        for i in 0..after.len() {
            let expect = 0.6 * before[i] + 0.4 * target[i];
            assert!((after[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn geometric_decay() {
        let s = warmed(8);
        for mode in [TeacherMode::Ema, TeacherMode::Eman] {
            let mut t = TeacherState::init_from_student(&net(9), cfg(mode, 0.6)).unwrap();
            let (p0, b0) = flat(t.network());
            let (ps, bs) = flat(&s);
            for _ in 0..10 {
                t.update(&s).unwrap();
            }
            let (p10, b10) = flat(t.network());
            let k = 0.6f64.powi(10);
            for i in 0..p0.len() {
                let expect = k * (p0[i] - ps[i]).abs();
                assert!(((p10[i] - ps[i]).abs() - expect).abs() <= 1e-12 * p0[i].abs().max(ps[i].abs()).max(1e-3));
            }
            if mode == TeacherMode::Eman {
                for i in 0..b0.len() {
                    let expect = k * (b0[i] - bs[i]).abs();
                    assert!(((b10[i] - bs[i]).abs() - expect).abs() <= 1e-12 * b0[i].abs().max(bs[i].abs()));
                }
            } else {
                assert_eq!(b10, b0);
            }
            assert_eq!(t.step, 10);
        }
    }

    #[test]
    fn decay_edges() {
        let s = warmed(10);
        let init = net(11);
        let mut frozen = TeacherState::init_from_student(&init, cfg(TeacherMode::Eman, 1.0)).unwrap();
        frozen.update(&s).unwrap();
        assert_eq!(flat(frozen.network()), flat(&init));

        let mut eman0 = TeacherState::init_from_student(&init, cfg(TeacherMode::Eman, 0.0)).unwrap();
        eman0.update(&s).unwrap();
        assert_eq!(flat(eman0.network()), flat(&s));

        let mut ema0 = TeacherState::init_from_student(&init, cfg(TeacherMode::Ema, 0.0)).unwrap();
        ema0.update(&s).unwrap();
        assert_eq!(flat(ema0.network()).0, flat(&s).0);
    }

    #[test]
    fn std_flag_averages_deviations() {
        let s = warmed(12);
        let init = net(13);
        let mut t = TeacherState::init_from_student(
            &init,
            TeacherConfig { mode: TeacherMode::Eman, decay: 0.5, average_std: true },
        )
        .unwrap();
        t.update(&s).unwrap();
        let (tv, sv, iv) = (&t.network().bns()[1].running_var, &s.bns()[1].running_var, &init.bns()[1].running_var);
        for c in 0..tv.len() {
            let sd = 0.5 * iv[c].sqrt() + 0.5 * sv[c].sqrt();
            assert!((tv[c] - sd * sd).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_decay_and_shapes() {
        assert!(TeacherState::init_from_student(&net(0), cfg(TeacherMode::Ema, 1.5)).is_err());
        let mut t = TeacherState::init_from_student(&net(0), cfg(TeacherMode::Ema, 0.5)).unwrap();
        let other = PoseNet::new(PoseNetConfig { stage_channels: [2, 3, 3, 5], ..small() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(t.update(&other), Err(Error::Shape(_))));
        assert_eq!(t.step, 0);
        assert!("EMAN".parse::<TeacherMode>().is_ok() && "avg".parse::<TeacherMode>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = TeacherState::init_from_student(&net(14), cfg(TeacherMode::Eman, 0.6)).unwrap();
        t.update(&warmed(15)).unwrap();
        let c = t.to_checkpoint();
        let mut u = TeacherState::init_from_student(&net(16), cfg(TeacherMode::Eman, 0.6)).unwrap();
        u.load_checkpoint(&c).unwrap();
        assert_eq!(flat(u.network()), flat(t.network()));
        assert_eq!(u.step, 1);
    }
}
