/// Named trainable tensors, in a fixed order shared by gradients, optimizer
/// state and checkpoints.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Smaller steps tried for entries whose error at [`FD_STEP`] exceeds
/// [`RETRY_ABOVE`]; a ReLU kink crossed by the larger step is not crossed by
/// a small enough one, while a wrong analytic gradient disagrees at every step.
pub const RETRY_STEPS: [f64; 2] = [1e-6, 1e-7];
pub const RETRY_ABOVE: f64 = 1e-6;
/// Denominator floor so that gradients at round-off level are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Entries that needed a smaller step to agree.
    pub retried: usize,
    pub max_rel_err: f64,
    /// Worst entry per tensor.
    pub worst: Vec<GradFailure>,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GradFailure> {
        self.worst.iter().filter(|f| f.rel_err >= tolerance).collect()
    }
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter of `model`. Parameters are restored bit-exactly afterwards.
pub fn gradcheck<M, F>(model: &mut M, analytic: &[Vec<f64>], loss: F) -> GradcheckReport
where
    M: Parameterized,
    F: FnMut(&mut M) -> f64,
{
    gradcheck_subset(model, analytic, None, loss)
}

/// Like [`gradcheck`] but visits at most `max_per_tensor` evenly spaced
/// entries of each tensor.
pub fn gradcheck_subset<M, F>(model: &mut M, analytic: &[Vec<f64>], max_per_tensor: Option<usize>, mut loss: F) -> GradcheckReport
where
    M: Parameterized,
    F: FnMut(&mut M) -> f64,
{
    let names = model.param_names();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    assert_eq!(analytic.len(), sizes.len(), "one analytic gradient per tensor");
    let mut report = GradcheckReport::default();
    for (t, &size) in sizes.iter().enumerate() {
        assert_eq!(analytic[t].len(), size, "gradient shape for {}", names[t]);
        let mut worst: Option<GradFailure> = None;
        let stride = max_per_tensor.map_or(1, |m| size.div_ceil(m.max(1)).max(1));
        for i in (0..size).step_by(stride) {
            let mut central = |step: f64| {
                let orig = model.params()[t][i];
                model.params_mut()[t][i] = orig + step;
                let plus = loss(model);
                model.params_mut()[t][i] = orig - step;
                let minus = loss(model);
                model.params_mut()[t][i] = orig;
                (plus - minus) / (2.0 * step)
            };
            let mut numeric = central(FD_STEP);
            let mut rel_err = relative_error(analytic[t][i], numeric);
            if rel_err > RETRY_ABOVE {
                for step in RETRY_STEPS {
                    let n = central(step);
                    let e = relative_error(analytic[t][i], n);
                    if e < rel_err {
                        numeric = n;
                        rel_err = e;
                    }
                }
                report.retried += 1;
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if worst.as_ref().map_or(true, |w| rel_err > w.rel_err) {
                worst = Some(GradFailure {
                    tensor: names[t].clone(),
                    index: i,
                    analytic: analytic[t][i],
                    numeric,
                    rel_err,
                });
            }
        }
        report.worst.extend(worst);
    }
    report
}

/// Central-difference gradient of `f` with respect to every entry of `values`.
pub fn numeric_gradient(values: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + step;
        let plus = f(values);
        values[i] = orig - step;
        let minus = f(values);
        values[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}
