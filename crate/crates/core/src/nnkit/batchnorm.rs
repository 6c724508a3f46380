use crate::error::{Error, Result};
use crate::nnkit::Parameterized;
use crate::tensorgrid::FeatureBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running buffers.
    Train,
    /// Normalize with the running buffers; never writes.
    Eval,
}

/// Per-channel batch normalization over `(n, h, w)`.
///
/// Batch variance is the biased estimate (divide by count) both for
/// normalization and for the running update
/// `running <- (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: FeatureBatch,
    inv_std: Vec<f64>,
    /// Batch statistics observed in this call.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &FeatureBatch) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                x.shape().c
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &FeatureBatch, mode: BnMode) -> Result<(FeatureBatch, Option<BnCache>)> {
        match mode {
            BnMode::Train => self.forward_train(x).map(|(y, c)| (y, Some(c))),
            BnMode::Eval => self.forward_eval(x).map(|y| (y, None)),
        }
    }

    pub fn forward_train(&mut self, x: &FeatureBatch) -> Result<(FeatureBatch, BnCache)> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane_len();
        let count = (s.n * plane) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += x.plane(n, c).iter().sum::<f64>();
            }
            mean[c] = sum / count;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += x.plane(n, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
            var[c] = sq / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * plane;
                let xs = &mut xhat.data_mut()[start..start + plane];
                for v in xs.iter_mut() {
                    *v = (*v - mean[c]) * inv_std[c];
                }
                let ys = &mut y.data_mut()[start..start + plane];
                for (yv, xv) in ys.iter_mut().zip(&xhat.data()[start..start + plane]) {
                    *yv = self.gamma[c] * xv + self.beta[c];
                }
            }
        }
        for c in 0..s.c {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    pub fn forward_eval(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane_len();
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                let shift = self.beta[c] - self.running_mean[c] * scale;
                let start = (n * s.c + c) * plane;
                for v in &mut y.data_mut()[start..start + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&self, cache: &BnCache, grad_out: &FeatureBatch) -> Result<(FeatureBatch, BnGrads)> {
        let s = grad_out.shape();
        if s != cache.xhat.shape() {
            return Err(Error::Shape(format!("batch norm grad_out {s} does not match forward")));
        }
        let plane = s.plane_len();
        let count = (s.n * plane) as f64;
        let mut grads = BnGrads {
            gamma: vec![0.0; s.c],
            beta: vec![0.0; s.c],
        };
        for n in 0..s.n {
            for c in 0..s.c {
                let g = grad_out.plane(n, c);
                let xh = cache.xhat.plane(n, c);
                grads.beta[c] += g.iter().sum::<f64>();
                grads.gamma[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut gx = grad_out.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let k = self.gamma[c] * cache.inv_std[c] / count;
                let start = (n * s.c + c) * plane;
                let xh = &cache.xhat.data()[start..start + plane];
                for (v, xv) in gx.data_mut()[start..start + plane].iter_mut().zip(xh) {
                    *v = k * (count * *v - grads.beta[c] - xv * grads.gamma[c]);
                }
            }
        }
        Ok((gx, grads))
    }
}

impl Parameterized for BatchNorm2d {
    fn param_names(&self) -> Vec<String> {
        vec!["gamma".into(), "beta".into()]
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{gradcheck, mse_backward, mse_forward, numeric_gradient, relative_error};
    use crate::tensorgrid::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Shape4) -> FeatureBatch {
        FeatureBatch::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn channel_stats(y: &FeatureBatch, c: usize) -> (f64, f64) {
        let s = y.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, Shape4::new(4, 3, 5, 6));
        let mut bn = BatchNorm2d::new(3);
        let (y, cache) = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(&y, c);
            let expected = cache.batch_var[c] / (cache.batch_var[c] + bn.eps);
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((v - expected).abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, Shape4::new(2, 2, 3, 3));
        let mut bn = BatchNorm2d::new(2);
        bn.eps = 1e-14;
        let before = bn.clone();
        let y = bn.forward_eval(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
        assert_eq!(bn, before);
    }

    #[test]
    fn running_update_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, Shape4::new(3, 2, 4, 4));
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean = vec![0.25, -0.5];
        bn.running_var = vec![2.0, 0.5];

        let mut frozen = bn.clone();
        frozen.momentum = 0.0;
        frozen.forward_train(&x).unwrap();
        assert_eq!(frozen.running_mean, bn.running_mean);
        assert_eq!(frozen.running_var, bn.running_var);

        let mut full = bn.clone();
        full.momentum = 1.0;
        let (_, cache) = full.forward_train(&x).unwrap();
        assert_eq!(full.running_mean, cache.batch_mean);
        assert_eq!(full.running_var, cache.batch_var);

        let mut mid = bn.clone();
        let (_, cache) = mid.forward_train(&x).unwrap();
        for c in 0..2 {
            assert_eq!(mid.running_mean[c], 0.9 * bn.running_mean[c] + 0.1 * cache.batch_mean[c]);
            assert_eq!(mid.running_var[c], 0.9 * bn.running_var[c] + 0.1 * cache.batch_var[c]);
            assert!(mid.running_var[c] >= 0.0);
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut bn = BatchNorm2d::new(2);
        assert!(bn.forward_train(&FeatureBatch::zeros(1, 3, 2, 2)).is_err());
        assert!(bn.forward_eval(&FeatureBatch::zeros(1, 1, 2, 2)).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, Shape4::new(3, 2, 4, 3));
        let mut bn = BatchNorm2d::new(2);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.4];
        let (y, cache) = bn.forward_train(&x).unwrap();
        let target = random(&mut rng, y.shape());
        let (gx, grads) = bn.backward(&cache, &mse_backward(&y, &target).unwrap()).unwrap();

        let report = gradcheck(&mut bn.clone(), &[grads.gamma, grads.beta], |b: &mut BatchNorm2d| {
            mse_forward(&b.forward_train(&x).unwrap().0, &target).unwrap()
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");

        let mut xv = x.data().to_vec();
        let mut probe = bn.clone();
        let num = numeric_gradient(&mut xv, 1e-5, |v| {
            let xb = FeatureBatch::from_vec(x.shape(), v.to_vec()).unwrap();
            mse_forward(&probe.forward_train(&xb).unwrap().0, &target).unwrap()
        });
        let worst = gx.data().iter().zip(&num).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
        assert!(worst < 1e-6, "input grad rel err {worst}");
    }
}
