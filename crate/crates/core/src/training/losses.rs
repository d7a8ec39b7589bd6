use super::targets::{TargetMaps, REG_WIDTH};
use crate::error::{Error, Result};
use crate::network::{HeadOutput, NUM_CLASSES};
use crate::numerics::{Real, Tensor};

pub const PROB_EPS: f64 = 1e-7;

/// Softmax focal loss, averaged over cells that are not unclear.
/// Returns the loss and its gradient w.r.t. the probabilities.
pub fn focal_loss<T: Real>(
    probs: &Tensor<T>,
    targets: &TargetMaps,
    alpha: f64,
    gamma: f64,
    class_weights: &[f64; NUM_CLASSES],
) -> Result<(f64, Tensor<T>)> {
    if probs.len() != targets.cells() * NUM_CLASSES {
        return Err(Error::shape(
            "focal_loss",
            format!(
                "{:?} probabilities for {} target cells",
                probs.shape(),
                targets.cells()
            ),
        ));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let valid = targets.valid_cells();
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / valid as f64;
    let mut total = 0.0;
    let g = grad.data_mut();
    for (c, row) in probs.data().chunks_exact(NUM_CLASSES).enumerate() {
        if targets.unclear[c] {
            continue;
        }
        let k = targets.class[c] as usize;
        let raw = row[k].as_f64();
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let w = class_weights[k] * alpha * norm;
        let q = 1.0 - p;
        total += -w * q.powf(gamma) * p.ln();
        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
            // d/dp of −(1−p)^γ log p.
            let d = if gamma == 0.0 {
                -1.0 / p
            } else {
                gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p
            };
            g[c * NUM_CLASSES + k] = T::of(w * d);
        }
    }
    Ok((total, grad))
}

/// Elementwise Huber value and derivative.
pub fn huber(e: f64, delta: f64) -> (f64, f64) {
    if e.abs() <= delta {
        (0.5 * e * e, e)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * e.signum())
    }
}

/// Huber loss between `pred` and `target` averaged over the entries where
/// `mask` is set. Returns the loss and the gradient w.r.t. `pred`.
pub fn huber_loss<T: Real>(
    pred: &[T],
    target: &[f64],
    mask: &[bool],
    delta: f64,
) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "huber_loss",
            format!(
                "{} predictions, {} targets, {} mask entries",
                pred.len(),
                target.len(),
                mask.len()
            ),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![T::zero(); pred.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let (v, d) = huber(pred[i].as_f64() - target[i], delta);
            total += v * norm;
            grad[i] = T::of(d * norm);
        }
    }
    Ok((total, grad))
}

/// Regression losses over foreground cells: location and size together,
/// heading separately. Writes gradients into `d`.
pub fn regression_losses<T: Real>(
    head: &HeadOutput<T>,
    targets: &TargetMaps,
    delta_loc_size: f64,
    delta_angle: f64,
    w_loc: f64,
    w_ang: f64,
    d: &mut HeadOutput<T>,
) -> Result<(f64, f64)> {
    let cells = targets.cells();
    if head.loc.len() != cells * 3 {
        return Err(Error::shape(
            "regression_losses",
            "head and target grids differ",
        ));
    }
    let mut pred = Vec::with_capacity(cells * 6);
    let mut tgt = Vec::with_capacity(cells * 6);
    let mut mask = Vec::with_capacity(cells * 6);
    let mut pa = Vec::with_capacity(cells * 2);
    let mut ta = Vec::with_capacity(cells * 2);
    let mut ma = Vec::with_capacity(cells * 2);
    for c in 0..cells {
        let fg = targets.foreground[c];
        let r: &[f64; REG_WIDTH] = &targets.reg[c];
        pred.extend_from_slice(&head.loc.data()[c * 3..c * 3 + 3]);
        pred.extend_from_slice(&head.size.data()[c * 3..c * 3 + 3]);
        tgt.extend_from_slice(&r[..6]);
        mask.extend_from_slice(&[fg; 6]);
        pa.extend_from_slice(&head.heading.data()[c * 2..c * 2 + 2]);
        ta.extend_from_slice(&r[6..]);
        ma.extend_from_slice(&[fg; 2]);
    }
    let (l_ls, g_ls) = huber_loss(&pred, &tgt, &mask, delta_loc_size)?;
    let (l_a, g_a) = huber_loss(&pa, &ta, &ma, delta_angle)?;
    let (wl, wa) = (T::of(w_loc), T::of(w_ang));
    for c in 0..cells {
        for k in 0..3 {
            d.loc.data_mut()[c * 3 + k] += wl * g_ls[c * 6 + k];
            d.size.data_mut()[c * 3 + k] += wl * g_ls[c * 6 + 3 + k];
        }
        for k in 0..2 {
            d.heading.data_mut()[c * 2 + k] += wa * g_a[c * 2 + k];
        }
    }
    Ok((l_ls, l_a))
}

/// Huber (δ = 1) between the auxiliary prediction and its analytic target.
pub fn aux_loss<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    prediction.same_shape(target, "aux_loss")?;
    let t: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let mask = vec![true; t.len()];
    let (l, g) = huber_loss(prediction.data(), &t, &mask, 1.0)?;
    Ok((l, Tensor::from_vec(prediction.shape(), g)?))
}
