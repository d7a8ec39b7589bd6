use rand::Rng;

use super::voxelize::DECORATION_WIDTH;
use super::GridSpec;
use crate::error::{Error, Result};
use crate::numerics::{
    activate, activate_backward, scatter_max, scatter_max_backward, Activation, BatchNorm, BnCache,
    Conv2d, ForwardCtx, Padding, ParamStore, Real, ScatterArgmax, Tensor,
};

/// Pointwise linear map, batch norm over points, ReLU, then a per-cell
/// maximum into the `[1, L, W, C]` pseudo-image.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub linear: Conv2d,
    pub bn: BatchNorm,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    input: Tensor<T>,
    pre_bn: Tensor<T>,
    bn: Option<BnCache<T>>,
    activated: Tensor<T>,
    argmax: Option<ScatterArgmax>,
}

impl PillarEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        PillarEncoder {
            linear: Conv2d::new(
                store,
                &format!("{name}.linear"),
                DECORATION_WIDTH,
                channels,
                1,
                1,
                Padding::Same,
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
            channels,
        }
    }

    /// `features` is `[1, 1, N', D]`; `cell_index` gives each point's pillar.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        cell_index: &[u32],
        grid: &GridSpec,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let [_, _, n, d] = features.dims4("encode")?;
        let w = store.value(self.linear.weight);
        if d != DECORATION_WIDTH || w.shape()[2] != d || w.shape()[3] != self.channels {
            return Err(Error::shape(
                "encode",
                format!("points carry {d} channels, weights are {:?}", w.shape()),
            ));
        }
        let (l, wd) = (grid.rows(), grid.cols());
        if n == 0 {
            // Nothing to normalize; the pseudo-image is empty.
            let empty = Tensor::zeros(&[1, 1, 0, self.channels]);
            return Ok((
                Tensor::zeros(&[1, l, wd, self.channels]),
                EncoderCache {
                    input: features.clone(),
                    pre_bn: empty.clone(),
                    bn: None,
                    activated: empty,
                    argmax: None,
                },
            ));
        }
        let pre_bn = self.linear.forward(store, features)?;
        let (normed, bn) = self.bn.forward(store, &pre_bn, ctx)?;
        let activated = activate(&normed, Activation::Relu);
        let (image, argmax) = scatter_max(&activated, cell_index, l, wd)?;
        Ok((
            image,
            EncoderCache {
                input: features.clone(),
                pre_bn: normed,
                bn: Some(bn),
                activated,
                argmax: Some(argmax),
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// decorated points.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &EncoderCache<T>,
        dimage: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (Some(argmax), Some(bn)) = (&cache.argmax, &cache.bn) else {
            return Ok(Tensor::zeros(cache.input.shape()));
        };
        let dact = scatter_max_backward(argmax, dimage, cache.activated.shape())?;
        let dnormed = activate_backward(Activation::Relu, &cache.pre_bn, &cache.activated, &dact)?;
        let dpre = self.bn.backward(store, bn, &dnormed)?;
        let dx = self.linear.backward(store, &cache.input, &dpre, true)?;
        Ok(dx.expect("input gradient requested"))
    }
}
