use super::{ForwardCtx, Mode, ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Pending running-statistic update produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BufferUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Saved state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: Mode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Batch normalization over every axis except the last (channel) one.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Weight,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Weight,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let c = x.channels();
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        if gamma.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{c} input channels vs {} parameters", gamma.len()),
            ));
        }
        let rows = x.len() / c.max(1);
        let eps = T::of(self.eps);
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                if rows == 0 {
                    return Err(Error::InvalidArgument(
                        "batchnorm: zero-element batch".into(),
                    ));
                }
                let (mean, var) = moments(x.data(), c);
                let n = T::of(rows as f64);
                let unbiased = if rows > 1 {
                    n / (n - T::one())
                } else {
                    T::one()
                };
                let m = T::of(self.momentum);
                let rm = store.value(self.running_mean).data();
                let rv = store.value(self.running_var).data();
                ctx.updates.push(BufferUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean: rm
                        .iter()
                        .zip(&mean)
                        .map(|(&r, &b)| (T::one() - m) * r + m * b)
                        .collect(),
                    var: rv
                        .iter()
                        .zip(&var)
                        .map(|(&r, &b)| (T::one() - m) * r + m * b * unbiased)
                        .collect(),
                });
                (mean, var)
            }
            Mode::Infer => (
                store.value(self.running_mean).data().to_vec(),
                store.value(self.running_var).data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = Tensor::zeros(x.shape());
        for ((xr, hr), yr) in x
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.data_mut().chunks_exact_mut(c))
        {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                yr[j] = gamma[j] * h + beta[j];
            }
        }
        Ok((
            y,
            BnCache {
                mode: ctx.mode,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let c = dy.channels();
        if cache.xhat.len() != dy.len() || cache.inv_std.len() != c {
            return Err(Error::shape(
                "batchnorm_backward",
                "cache does not match gradient",
            ));
        }
        let rows = dy.len() / c.max(1);
        let gamma = store.value(self.gamma).data().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (dr, hr) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                dgamma[j] += dr[j] * hr[j];
                dbeta[j] += dr[j];
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        match cache.mode {
            Mode::Train => {
                let n = T::of(rows as f64);
                for ((dr, hr), xr) in dy
                    .data()
                    .chunks_exact(c)
                    .zip(cache.xhat.chunks_exact(c))
                    .zip(dx.data_mut().chunks_exact_mut(c))
                {
                    for j in 0..c {
                        // d xhat = dy·γ; then the usual mean/variance correction.
                        let k = gamma[j] * cache.inv_std[j] / n;
                        xr[j] = k * (n * dr[j] - dbeta[j] - hr[j] * dgamma[j]);
                    }
                }
            }
            Mode::Infer => {
                for (dr, xr) in dy
                    .data()
                    .chunks_exact(c)
                    .zip(dx.data_mut().chunks_exact_mut(c))
                {
                    for j in 0..c {
                        xr[j] = dr[j] * gamma[j] * cache.inv_std[j];
                    }
                }
            }
        }
        store.accumulate_grad(self.gamma, &dgamma);
        store.accumulate_grad(self.beta, &dbeta);
        Ok(dx)
    }
}

/// Per-channel biased mean and variance.
fn moments<T: Real>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let n = T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for r in x.chunks_exact(c) {
        for j in 0..c {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for r in x.chunks_exact(c) {
        for j in 0..c {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

impl<T: Real> BufferUpdate<T> {
    /// Writes the new statistics unless the buffers are frozen.
    pub fn apply(self, store: &mut ParamStore<T>) {
        for (id, vals) in [(self.mean_id, self.mean), (self.var_id, self.var)] {
            let p = store.param_mut(id);
            if p.trainable {
                p.value.data_mut().copy_from_slice(&vals);
            }
        }
    }
}
