//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::RegionalModel;
use crate::dataio::RegionalImageSet;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ProbeResult {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self, floor: f64, filter: impl Fn(&str) -> bool) -> f64 {
        self.probes
            .iter()
            .filter(|p| filter(p.tensor))
            .map(|p| p.relative_error(floor))
            .fold(0.0, f64::max)
    }

    pub fn worst(&self, floor: f64) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.relative_error(floor).total_cmp(&b.relative_error(floor)))
    }
}

/// Compare d(raw score)/d(param) with `(f(p+h) - f(p-h)) / 2h` on up to
/// `per_tensor` randomly chosen entries of every tensor accepted by `select`.
pub fn check_gradients(
    model: &RegionalModel<f64>,
    set: &RegionalImageSet<f64>,
    h: f64,
    per_tensor: usize,
    select: impl Fn(&str) -> bool,
    seed: u64,
) -> Result<GradCheckReport> {
    let fwd = model.forward(set)?;
    let mut grads = model.zeros_like();
    model.backward(&fwd, 1.0, Some(&mut grads), false);
    let analytic: Vec<(&'static str, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = GradCheckReport::default();
    for (t, (name, grad)) in analytic.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let picks = sample(&mut rng, grad.len(), per_tensor.min(grad.len())).into_vec();
        for index in picks {
            let original = nth(&mut work, t, index, None);
            nth(&mut work, t, index, Some(original + h));
            let plus = work.forward(set)?.raw;
            nth(&mut work, t, index, Some(original - h));
            let minus = work.forward(set)?.raw;
            nth(&mut work, t, index, Some(original));
            report.probes.push(ProbeResult {
                tensor: name,
                index,
                analytic: grad[index],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(report)
}

/// Read, and optionally overwrite, the `index`-th element of tensor `t`.
fn nth(model: &mut RegionalModel<f64>, t: usize, index: usize, set: Option<f64>) -> f64 {
    let mut tensors = model.named_tensors_mut();
    let slot = tensors[t]
        .1
        .iter_mut()
        .nth(index)
        .expect("index within tensor");
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
