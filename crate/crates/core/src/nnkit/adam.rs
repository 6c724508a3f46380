/// Adam with bias correction. Moment buffers follow the parameter order
/// handed to [`AdamState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// # Panics
    /// If the parameter or gradient shapes disagree with the moment buffers.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count");
        assert_eq!(grads.len(), self.m.len(), "gradient tensor count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        let mut adam = AdamState::new(&[3], 1e-3);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[vec![0.0; 3]]);
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut adam = AdamState::new(&[1], 0.001);
        adam.step(&mut [&mut p], &[vec![1.0]]);
        assert!((p[0] + 0.001).abs() < 1e-10, "{}", p[0]);
    }

    #[test]
    fn descends_on_parabola() {
        // at lr 1e-3 the recursion only reaches 0.9017 after 100 steps
        let mut theta = vec![1.0];
        let mut adam = AdamState::new(&[1], 0.01);
        // independent scalar recursion as oracle
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        let mut prev = x;
        for t in 1..=100 {
            let g = 2.0 * theta[0];
            adam.step(&mut [&mut theta], &[vec![g]]);
            let go = 2.0 * x;
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!(x < prev);
            prev = x;
        }
        assert!((theta[0] - x).abs() < 1e-12);
        assert!(theta[0].abs() < 0.9);
    }
}
