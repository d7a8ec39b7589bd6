use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last axis of every cell.
    SoftmaxChannels,
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::SoftmaxChannels => {
            let c = x.channels();
            let mut y = x.clone();
            for row in y.data_mut().chunks_exact_mut(c) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            y
        }
    }
}

/// Gradient w.r.t. the activation input. `x` is the input, `y` the output.
/// The ReLU subgradient at 0 is taken as 0.
pub fn activate_backward<T: Real>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    y.same_shape(dy, "activation_backward")?;
    let mut dx = Tensor::zeros(dy.shape());
    let out = dx.data_mut();
    match kind {
        Activation::Relu => {
            x.same_shape(dy, "activation_backward")?;
            for ((o, &xv), &g) in out.iter_mut().zip(x.data()).zip(dy.data()) {
                *o = if xv > T::zero() { g } else { T::zero() };
            }
        }
        Activation::Sigmoid => {
            for ((o, &yv), &g) in out.iter_mut().zip(y.data()).zip(dy.data()) {
                *o = g * yv * (T::one() - yv);
            }
        }
        Activation::Tanh => {
            for ((o, &yv), &g) in out.iter_mut().zip(y.data()).zip(dy.data()) {
                *o = g * (T::one() - yv * yv);
            }
        }
        Activation::SoftmaxChannels => {
            let c = y.channels();
            for ((o, yr), gr) in out
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(dy.data().chunks_exact(c))
            {
                let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    o[j] = yr[j] * (gr[j] - dotp);
                }
            }
        }
    }
    Ok(dx)
}
