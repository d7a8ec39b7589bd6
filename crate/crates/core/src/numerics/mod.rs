//! Dense tensors, the layer kernels the detector needs, their explicit
//! backward passes, and finite-difference verification.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
mod fpmode;
pub mod gradcheck;
mod params;
mod real;
pub mod scatter;
mod tensor;

pub use activation::{activate, activate_backward, sigmoid, Activation};
pub use batchnorm::{BatchNorm, BnCache, BufferUpdate};
pub use checkpoint::Checkpoint;
pub use conv::{
    conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, Conv2d, ConvTranspose2d,
    Padding,
};
pub use fpmode::FlushDenormals;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use scatter::{scatter_max, scatter_max_backward, ScatterArgmax, INVALID_CELL};
pub use tensor::Tensor;

/// Whether batch statistics are computed (and running statistics updated).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-forward context: run mode plus the running-statistic updates the
/// pass produced, applied afterwards by the single writer of the parameters.
#[derive(Debug, Clone)]
pub struct ForwardCtx<T> {
    pub mode: Mode,
    pub updates: Vec<BufferUpdate<T>>,
}

impl<T: Real> ForwardCtx<T> {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            updates: Vec::new(),
        }
    }

    pub fn commit(self, store: &mut ParamStore<T>) {
        for u in self.updates {
            u.apply(store);
        }
    }
}
