use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    activate, activate_backward, Activation, BatchNorm, BnCache, Conv2d, ConvTranspose2d,
    ForwardCtx, Padding, ParamStore, Real, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Convolutions per downsampling stage; the first one has stride 2.
    pub layers: [usize; 3],
    /// Output channels of each downsampling stage, in multiples of `C`.
    pub down_mult: [usize; 3],
    /// Output channels of each upsampling stage, in multiples of `C`.
    pub up_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: [4, 6, 6],
            down_mult: [2, 2, 4],
            up_mult: 2,
        }
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            layers: [2, 2, 2],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.contains(&0) || self.down_mult.contains(&0) || self.up_mult == 0 {
            return Err(Error::Config(
                "backbone layers and channel multipliers must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self, c: usize) -> usize {
        3 * self.up_mult * c
    }
}

/// Conv (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ConvBnReluCache<T> {
    input: Tensor<T>,
    normed: Tensor<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                k,
                stride,
                Padding::Same,
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, ConvBnReluCache<T>)> {
        let y = self.conv.forward(store, x)?;
        let (normed, bn) = self.bn.forward(store, &y, ctx)?;
        let out = activate(&normed, Activation::Relu);
        Ok((
            out.clone(),
            ConvBnReluCache {
                input: x.clone(),
                normed,
                bn,
                out,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvBnReluCache<T>,
        dout: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let dn = activate_backward(Activation::Relu, &cache.normed, &cache.out, dout)?;
        let dy = self.bn.backward(store, &cache.bn, &dn)?;
        self.conv.backward(store, &cache.input, &dy, need_dx)
    }
}

/// Transposed conv (kernel = stride, no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub deconv: ConvTranspose2d,
    pub bn: BatchNorm,
}

impl UpBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        UpBlock {
            deconv: ConvTranspose2d::new(
                store,
                &format!("{name}.deconv"),
                cin,
                cout,
                stride,
                stride,
                Padding::Valid,
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, ConvBnReluCache<T>)> {
        let y = self.deconv.forward(store, x)?;
        let (normed, bn) = self.bn.forward(store, &y, ctx)?;
        let out = activate(&normed, Activation::Relu);
        Ok((
            out.clone(),
            ConvBnReluCache {
                input: x.clone(),
                normed,
                bn,
                out,
            },
        ))
    }

    fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvBnReluCache<T>,
        dout: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dn = activate_backward(Activation::Relu, &cache.normed, &cache.out, dout)?;
        let dy = self.bn.backward(store, &cache.bn, &dn)?;
        Ok(self
            .deconv
            .backward(store, &cache.input, &dy, true)?
            .expect("requested"))
    }
}

/// Three downsampling stages (strides 2, 4, 8 overall) and three upsampling
/// stages that bring each stage back to stride 2, concatenated.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub down: Vec<Vec<ConvBnRelu>>,
    pub up: Vec<UpBlock>,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    down: Vec<Vec<ConvBnReluCache<T>>>,
    up: Vec<ConvBnReluCache<T>>,
    up_channels: usize,
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let mut down = Vec::new();
        let mut cin = c;
        for s in 0..3 {
            let cout = cfg.down_mult[s] * c;
            let stage = (0..cfg.layers[s])
                .map(|k| {
                    let stride = if k == 0 { 2 } else { 1 };
                    let layer_in = if k == 0 { cin } else { cout };
                    ConvBnRelu::new(
                        store,
                        &format!("{name}.down{s}.{k}"),
                        layer_in,
                        cout,
                        3,
                        stride,
                        rng,
                    )
                })
                .collect();
            down.push(stage);
            cin = cout;
        }
        let up_c = cfg.up_mult * c;
        let up = (0..3)
            .map(|s| {
                UpBlock::new(
                    store,
                    &format!("{name}.up{s}"),
                    cfg.down_mult[s] * c,
                    up_c,
                    1 << s,
                    rng,
                )
            })
            .collect();
        Backbone {
            down,
            up,
            in_channels: c,
            out_channels: 3 * up_c,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let [_, h, w, c] = x.dims4("backbone")?;
        if c != self.in_channels || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(
                "backbone",
                format!(
                    "input {h}×{w}×{c}; expected {} channels and sides divisible by 8",
                    self.in_channels
                ),
            ));
        }
        let mut down_caches = Vec::with_capacity(3);
        let mut stage_outputs = Vec::with_capacity(3);
        let mut cur = x.clone();
        for stage in &self.down {
            let mut caches = Vec::with_capacity(stage.len());
            for layer in stage {
                let (y, cache) = layer.forward(store, &cur, ctx)?;
                caches.push(cache);
                cur = y;
            }
            down_caches.push(caches);
            stage_outputs.push(cur.clone());
        }
        let mut ups = Vec::with_capacity(3);
        let mut up_caches = Vec::with_capacity(3);
        for (blk, s) in self.up.iter().zip(&stage_outputs) {
            let (y, cache) = blk.forward(store, s, ctx)?;
            ups.push(y);
            up_caches.push(cache);
        }
        let out = Tensor::concat_channels(&ups.iter().collect::<Vec<_>>())?;
        Ok((
            out,
            BackboneCache {
                down: down_caches,
                up: up_caches,
                up_channels: self.out_channels / 3,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &BackboneCache<T>,
        dout: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let u = cache.up_channels;
        let parts = dout.split_channels(&[u, u, u])?;
        // Gradient arriving at each down stage's output from its up branch.
        let mut d_stage: Vec<Tensor<T>> = Vec::with_capacity(3);
        for ((blk, c), d) in self.up.iter().zip(&cache.up).zip(&parts) {
            d_stage.push(blk.backward(store, c, d)?);
        }
        let mut carry: Option<Tensor<T>> = None;
        for s in (0..3).rev() {
            let mut d = d_stage[s].clone();
            if let Some(c) = carry.take() {
                d.axpy(T::one(), &c)?;
            }
            let stage = &self.down[s];
            for k in (0..stage.len()).rev() {
                let want = s > 0 || k > 0 || need_dx;
                match stage[k].backward(store, &cache.down[s][k], &d, want)? {
                    Some(dx) => d = dx,
                    None => return Ok(None),
                }
            }
            carry = Some(d);
        }
        Ok(carry)
    }
}
