//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! The error for one tensor is `max|a − n| / max(max|a|, max|n|, floor)`
//! where `a` is the analytic and `n` the numeric gradient over the probed
//! entries, and `floor = 1e-5 · max(1, |f|)` keeps round-off in the objective
//! `f` from dominating tensors whose gradient is essentially zero. The report
//! carries the maximum over all tensors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Entries probed per tensor; larger tensors are subsampled.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            max_probes: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the tensor with the largest error.
    pub worst: String,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

impl GradCheck {
    /// Checks `input_grads` (gradients of `f` w.r.t. `inputs`) and the
    /// gradient buffers of every trainable weight in `store` against central
    /// differences of `f`. Values are restored after each probe.
    pub fn run<F>(
        &self,
        store: &mut ParamStore<f64>,
        inputs: &mut [Tensor<f64>],
        input_grads: &[Tensor<f64>],
        mut f: F,
    ) -> Result<GradCheckReport>
    where
        F: FnMut(&ParamStore<f64>, &[Tensor<f64>]) -> Result<f64>,
    {
        if inputs.len() != input_grads.len() {
            return Err(Error::InvalidArgument(
                "grad_check: one analytic gradient per input required".into(),
            ));
        }
        let base = f(store, inputs)?;
        if !base.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let floor = 1e-5 * base.abs().max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            probes: 0,
        };

        for ti in 0..inputs.len() {
            let n = inputs[ti].len();
            let picks = probe_indices(n, self.max_probes, &mut rng);
            let mut pairs = Vec::with_capacity(picks.len());
            for i in picks {
                let numeric = self.central(|v| {
                    let saved = inputs[ti].data()[i];
                    inputs[ti].data_mut()[i] = saved + v;
                    let r = f(store, inputs);
                    inputs[ti].data_mut()[i] = saved;
                    r
                })?;
                pairs.push((input_grads[ti].data()[i], numeric));
            }
            record(format!("input[{ti}]"), &pairs, floor, &mut report)?;
        }

        let ids: Vec<_> = store
            .ids()
            .filter(|&id| {
                let p = store.param(id);
                p.kind == ParamKind::Weight && p.trainable
            })
            .collect();
        for id in ids {
            let n = store.value(id).len();
            let analytic: Vec<f64> = store
                .value(id)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; n]);
            let picks = probe_indices(n, self.max_probes, &mut rng);
            let mut pairs = Vec::with_capacity(picks.len());
            for i in picks {
                let numeric = self.central(|v| {
                    let saved = store.value(id).data()[i];
                    store.value_mut(id).data_mut()[i] = saved + v;
                    let r = f(store, inputs);
                    store.value_mut(id).data_mut()[i] = saved;
                    r
                })?;
                pairs.push((analytic[i], numeric));
            }
            let name = store.param(id).name.clone();
            record(name, &pairs, floor, &mut report)?;
        }
        Ok(report)
    }

    fn central(&self, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let plus = eval(self.eps)?;
        let minus = eval(-self.eps)?;
        Ok((plus - minus) / (2.0 * self.eps))
    }
}

fn record(
    name: String,
    pairs: &[(f64, f64)],
    floor: f64,
    report: &mut GradCheckReport,
) -> Result<()> {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for &(a, n) in pairs {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    let rel = diff / scale.max(floor);
    report.probes += pairs.len();
    if rel >= report.max_rel_error {
        report.max_rel_error = rel;
        report.worst = name;
    }
    Ok(())
}

fn probe_indices(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut x = vec![Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap()];
        let f = |_: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
            Ok(xs[0].data().iter().map(|v| v * v * v).sum())
        };
        let good = vec![x[0].map(|v| 3.0 * v * v)];
        let r = GradCheck::default()
            .run(&mut store, &mut x, &good, f)
            .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        let bad = vec![x[0].map(|v| 2.0 * v * v)];
        let r = GradCheck::default()
            .run(&mut store, &mut x, &bad, f)
            .unwrap();
        assert!(!r.passes(1e-2));
        assert_eq!(r.worst, "input[0]");
    }

    #[test]
    fn non_finite_objective_is_a_failure() {
        let mut store = ParamStore::<f64>::new();
        let mut x = vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()];
        let g = vec![Tensor::zeros(&[1])];
        let r = GradCheck::default().run(&mut store, &mut x, &g, |_, xs| Ok(1.0 / xs[0].data()[0]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
