use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneCache, BackboneConfig};
use super::head::{DetectionHead, HeadCache, HeadOutput};
use super::memory::{AuxCache, AuxHead, CompensationCache, CompensationConv, ConvGru, GruCache};
use crate::dataio::{apply_point_budget, Scan, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{
    extract_2d, relative_transform, transform_scan_points, warp_feature_map,
    warp_feature_map_backward, GridMeta, Pose, Transform2D,
};
use crate::numerics::{ForwardCtx, Mode, ParamStore, Real, Tensor};
use crate::pillars::{pillarize, EncoderCache, GridSpec, PillarConfig, PillarEncoder, Pillars};

/// Where the recurrent memory sits. `None` is the single-frame network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPlacement {
    None,
    BeforeBackbone,
    AfterBackbone,
}

/// How the previous hidden state is brought into the current ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    /// Raw points of every scan are moved into the newest frame up front.
    Preprocessing,
    /// Bilinear warp of the hidden state.
    Interpolation,
    /// Learned convolution over the state and the relative transform.
    Conv,
}

macro_rules! str_enum {
    ($ty:ident { $($name:literal => $variant:ident),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($name, " "),*),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)* })
            }
        }
    };
}

str_enum!(MemoryPlacement { "none" => None, "before_backbone" => BeforeBackbone, "after_backbone" => AfterBackbone });
str_enum!(Compensation { "preprocessing" => Preprocessing, "interpolation" => Interpolation, "conv" => Conv });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub placement: MemoryPlacement,
    pub compensation: Compensation,
    /// Build the auxiliary head (used only with `compensation = "conv"`).
    pub aux_head: bool,
    pub gru_kernel: usize,
    pub compensation_kernel: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            placement: MemoryPlacement::AfterBackbone,
            compensation: Compensation::Conv,
            aux_head: true,
            gru_kernel: 3,
            compensation_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub pillar: PillarConfig,
    pub backbone: BackboneConfig,
    pub memory: MemoryConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.pillar.validate()?;
        self.backbone.validate()?;
        if self.grid.output_stride != 2 {
            return Err(Error::Config(
                "the backbone emits stride-2 features; output_stride must be 2".into(),
            ));
        }
        if self.grid.rows() % 8 != 0 || self.grid.cols() % 8 != 0 {
            return Err(Error::Config(format!(
                "grid {}×{} must be divisible by 8 for the three downsampling stages",
                self.grid.rows(),
                self.grid.cols()
            )));
        }
        let m = &self.memory;
        if m.gru_kernel % 2 == 0 || m.compensation_kernel % 2 == 0 {
            return Err(Error::Config("memory kernels must be odd".into()));
        }
        Ok(())
    }

    /// `(rows, cols, channels)` of the hidden state, if any.
    pub fn hidden_shape(&self) -> Option<[usize; 3]> {
        let c = self.pillar.channels;
        match self.memory.placement {
            MemoryPlacement::None => None,
            MemoryPlacement::BeforeBackbone => Some([self.grid.rows(), self.grid.cols(), c]),
            MemoryPlacement::AfterBackbone => Some([
                self.grid.out_rows(),
                self.grid.out_cols(),
                self.backbone.out_channels(c),
            ]),
        }
    }

    /// Grid on which the hidden state lives.
    pub fn hidden_meta(&self) -> GridMeta {
        match self.memory.placement {
            MemoryPlacement::BeforeBackbone => self.grid.meta(),
            _ => self.grid.out_meta(),
        }
    }

    pub fn is_recurrent(&self) -> bool {
        self.memory.placement != MemoryPlacement::None
    }

    pub fn uses_aux(&self) -> bool {
        self.is_recurrent()
            && self.memory.compensation == Compensation::Conv
            && self.memory.aux_head
    }
}

/// Recurrent feature memory and the ego frame it is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T> {
    pub tensor: Tensor<T>,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct MemoryModule {
    pub gru: ConvGru,
    pub compensation: Option<CompensationConv>,
    pub aux: Option<AuxHead>,
}

/// Auxiliary prediction and its analytic target.
#[derive(Debug, Clone)]
pub struct AuxOutput<T> {
    pub prediction: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Debug, Clone)]
enum CompCache<T> {
    Identity,
    Warp(Transform2D),
    Conv(CompensationCache<T>),
}

#[derive(Debug, Clone)]
struct MemoryCache<T> {
    /// `None` when the state started empty (no compensation applied).
    comp: Option<CompCache<T>>,
    gru: GruCache<T>,
    aux: Option<AuxCache<T>>,
}

/// Everything the backward pass of one frame needs.
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    enc: EncoderCache<T>,
    bb: BackboneCache<T>,
    mem: Option<MemoryCache<T>>,
    head: HeadCache<T>,
}

#[derive(Debug, Clone)]
pub struct Step<T> {
    pub head: HeadOutput<T>,
    pub state: Option<HiddenState<T>>,
    pub aux: Option<AuxOutput<T>>,
    pub cache: StepCache<T>,
}

/// Gradients flowing out of one frame's backward pass.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    /// W.r.t. the previous hidden state, when requested and defined.
    pub dh_prev: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: PillarEncoder,
    pub backbone: Backbone,
    pub memory: Option<MemoryModule>,
    pub head: DetectionHead,
}

impl Model {
    /// Registers every parameter in `store`, drawing initial values from `rng`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.pillar.channels;
        let encoder = PillarEncoder::new(store, "encoder", c, rng);
        let backbone = Backbone::new(store, "backbone", c, &cfg.backbone, rng);
        let memory = cfg.hidden_shape().map(|[_, _, ch]| {
            let m = &cfg.memory;
            let gru = ConvGru::new(store, "memory.gru", ch, ch, m.gru_kernel, rng);
            let (compensation, aux) = if m.compensation == Compensation::Conv {
                let comp = CompensationConv::new(
                    store,
                    "memory.compensation",
                    ch,
                    m.compensation_kernel,
                    rng,
                );
                let aux = m
                    .aux_head
                    .then(|| AuxHead::new(store, "memory.aux", ch, rng));
                (Some(comp), aux)
            } else {
                (None, None)
            };
            MemoryModule {
                gru,
                compensation,
                aux,
            }
        });
        let head = DetectionHead::new(store, "head", backbone.out_channels, rng);
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            backbone,
            memory,
            head,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn build<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Budgets and pillarizes a scan. With `target` set, the points are first
    /// moved from the scan's frame into the `target` ego frame.
    pub fn prepare_scan(&self, scan: &Scan, target: Option<&Pose>) -> Result<Pillars> {
        let mut points = apply_point_budget(
            &scan.points,
            self.cfg.pillar.point_budget,
            scan.timestamp.to_bits(),
        );
        if let Some(t) = target {
            if *t != scan.pose {
                let rel = relative_transform(t, &scan.pose)?;
                transform_scan_points(&mut points, &rel);
            }
        }
        Ok(pillarize(&points, &self.cfg.grid))
    }

    /// Pillarized scans of a sequence with the pose each is expressed in.
    pub fn prepare_sequence(&self, seq: &Sequence) -> Result<Vec<(Pillars, Pose)>> {
        let core = seq.core().pose;
        let pre =
            self.cfg.is_recurrent() && self.cfg.memory.compensation == Compensation::Preprocessing;
        seq.scans()
            .iter()
            .map(|s| {
                if pre {
                    Ok((self.prepare_scan(s, Some(&core))?, core))
                } else {
                    Ok((self.prepare_scan(s, None)?, s.pose))
                }
            })
            .collect()
    }

    fn empty_state<T: Real>(&self) -> Option<Tensor<T>> {
        self.cfg
            .hidden_shape()
            .map(|[h, w, c]| Tensor::zeros(&[1, h, w, c]))
    }

    fn memory_forward<T: Real>(
        &self,
        mem: &MemoryModule,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        pose: &Pose,
        state: Option<&HiddenState<T>>,
        ctx: &ForwardCtx<T>,
        with_aux: bool,
    ) -> Result<(Tensor<T>, Option<AuxOutput<T>>, MemoryCache<T>)> {
        let meta = self.cfg.hidden_meta();
        let (h_comp, comp, aux, aux_cache) = match state {
            None => (
                self.empty_state().expect("recurrent model"),
                None,
                None,
                None,
            ),
            Some(s) => {
                if s.tensor.shape() != x.shape() {
                    return Err(Error::shape(
                        "model_forward",
                        format!(
                            "hidden state {:?} vs features {:?}",
                            s.tensor.shape(),
                            x.shape()
                        ),
                    ));
                }
                let rel = extract_2d(&relative_transform(pose, &s.pose)?);
                match self.cfg.memory.compensation {
                    Compensation::Preprocessing => {
                        (s.tensor.clone(), Some(CompCache::Identity), None, None)
                    }
                    Compensation::Interpolation => (
                        warp_feature_map(&s.tensor, &rel, &meta)?,
                        Some(CompCache::Warp(rel)),
                        None,
                        None,
                    ),
                    Compensation::Conv => {
                        let layer = mem.compensation.as_ref().expect("conv compensation layer");
                        let (h, cache) = layer.forward(store, &s.tensor, &rel)?;
                        let (aux, aux_cache) = match (&mem.aux, with_aux && ctx.mode == Mode::Train)
                        {
                            (Some(head), true) => {
                                let (pred, c) = head.forward(store, &h, ctx.mode)?;
                                let target = warp_feature_map(&s.tensor, &rel, &meta)?;
                                (
                                    Some(AuxOutput {
                                        prediction: pred,
                                        target,
                                    }),
                                    Some(c),
                                )
                            }
                            _ => (None, None),
                        };
                        (h, Some(CompCache::Conv(cache)), aux, aux_cache)
                    }
                }
            }
        };
        let (h, gru) = mem.gru.forward(store, &h_comp, x)?;
        Ok((
            h,
            aux,
            MemoryCache {
                comp,
                gru,
                aux: aux_cache,
            },
        ))
    }

    /// One frame: encode, memory update (if any), backbone, head. `pose` is
    /// the ego frame the pillars are expressed in. The auxiliary head runs
    /// only when `with_aux` is set and `ctx` is in training mode.
    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        pillars: &Pillars,
        pose: &Pose,
        state: Option<&HiddenState<T>>,
        ctx: &mut ForwardCtx<T>,
        with_aux: bool,
    ) -> Result<Step<T>> {
        let feats = pillars.features::<T>();
        let (pseudo, enc) =
            self.encoder
                .forward(store, &feats, &pillars.cell_index, &self.cfg.grid, ctx)?;
        let placement = self.cfg.memory.placement;
        let mut mem_out = None;
        let bb_in = match (&self.memory, placement) {
            (Some(mem), MemoryPlacement::BeforeBackbone) => {
                let (h, aux, cache) =
                    self.memory_forward(mem, store, &pseudo, pose, state, ctx, with_aux)?;
                mem_out = Some((h.clone(), aux, cache));
                h
            }
            _ => pseudo,
        };
        let (feat, bb) = self.backbone.forward(store, &bb_in, ctx)?;
        let head_in = match (&self.memory, placement) {
            (Some(mem), MemoryPlacement::AfterBackbone) => {
                let (h, aux, cache) =
                    self.memory_forward(mem, store, &feat, pose, state, ctx, with_aux)?;
                mem_out = Some((h.clone(), aux, cache));
                h
            }
            _ => feat,
        };
        let (head, head_cache) = self.head.forward(store, &head_in)?;
        let (state, aux, mem) = match mem_out {
            Some((h, aux, cache)) => (
                Some(HiddenState {
                    tensor: h,
                    pose: *pose,
                }),
                aux,
                Some(cache),
            ),
            None => (None, None, None),
        };
        Ok(Step {
            head,
            state,
            aux,
            cache: StepCache {
                enc,
                bb,
                mem,
                head: head_cache,
            },
        })
    }

    fn memory_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &MemoryCache<T>,
        dh: &Tensor<T>,
        daux: Option<&Tensor<T>>,
        need_dh_prev: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mem = self.memory.as_ref().expect("recurrent model");
        let (mut dh_comp, dx) = mem.gru.backward(store, &cache.gru, dh)?;
        let dh_prev = match &cache.comp {
            None => None,
            Some(CompCache::Identity) => need_dh_prev.then_some(dh_comp),
            Some(CompCache::Warp(rel)) => {
                if need_dh_prev {
                    Some(warp_feature_map_backward(
                        &dh_comp,
                        rel,
                        &self.cfg.hidden_meta(),
                    )?)
                } else {
                    None
                }
            }
            Some(CompCache::Conv(cc)) => {
                if let (Some(ac), Some(d)) = (&cache.aux, daux) {
                    let aux = mem.aux.as_ref().expect("aux head");
                    dh_comp.axpy(T::one(), &aux.backward(store, ac, d)?)?;
                }
                let layer = mem.compensation.as_ref().expect("conv compensation layer");
                layer.backward(store, cc, &dh_comp, need_dh_prev)?
            }
        };
        Ok((dx, dh_prev))
    }

    fn encoder_trainable<T: Real>(&self, store: &ParamStore<T>) -> bool {
        [
            self.encoder.linear.weight,
            self.encoder.bn.gamma,
            self.encoder.bn.beta,
        ]
        .iter()
        .any(|&id| store.param(id).trainable)
    }

    /// Accumulates parameter gradients for one frame given the gradients of
    /// the head outputs, (optionally) of the auxiliary prediction and of the
    /// hidden state this frame handed on to the next one.
    pub fn step_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &StepCache<T>,
        dhead: &HeadOutput<T>,
        daux: Option<&Tensor<T>>,
        dstate: Option<&Tensor<T>>,
        need_dh_prev: bool,
    ) -> Result<StepGrads<T>> {
        let placement = self.cfg.memory.placement;
        let mut d = self.head.backward(store, &cache.head, dhead)?;
        let mut dh_prev = None;
        if placement == MemoryPlacement::AfterBackbone {
            let mc = cache.mem.as_ref().expect("memory cache");
            if let Some(ds) = dstate {
                d.axpy(T::one(), ds)?;
            }
            let (dx, dp) = self.memory_backward(store, mc, &d, daux, need_dh_prev)?;
            d = dx;
            dh_prev = dp;
        }
        let enc_trainable = self.encoder_trainable(store);
        let need_bb_dx = enc_trainable || placement == MemoryPlacement::BeforeBackbone;
        let Some(mut d) = self.backbone.backward(store, &cache.bb, &d, need_bb_dx)? else {
            return Ok(StepGrads { dh_prev });
        };
        if placement == MemoryPlacement::BeforeBackbone {
            let mc = cache.mem.as_ref().expect("memory cache");
            if let Some(ds) = dstate {
                d.axpy(T::one(), ds)?;
            }
            let (dx, dp) = self.memory_backward(store, mc, &d, daux, need_dh_prev)?;
            d = dx;
            dh_prev = dp;
        }
        if enc_trainable {
            self.encoder.backward(store, &cache.enc, &d)?;
        }
        Ok(StepGrads { dh_prev })
    }

    /// Runs every scan of `seq` in order, starting from `state`, and returns
    /// the head output of the core frame with the final hidden state.
    pub fn forward_sequence<T: Real>(
        &self,
        store: &ParamStore<T>,
        seq: &Sequence,
        mut state: Option<HiddenState<T>>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(HeadOutput<T>, Option<HiddenState<T>>)> {
        let prepared = self.prepare_sequence(seq)?;
        // The single-frame network only ever looks at the core scan.
        let start = if self.cfg.is_recurrent() {
            0
        } else {
            prepared.len() - 1
        };
        let mut last = None;
        for (pillars, pose) in &prepared[start..] {
            let step = self.step(store, pillars, pose, state.as_ref(), ctx, false)?;
            state = step.state;
            last = Some(step.head);
        }
        Ok((last.expect("sequence is never empty"), state))
    }
}
