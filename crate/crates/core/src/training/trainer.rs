use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{aux_loss, focal_loss, regression_losses};
use super::optim::{bias_init, class_weights, AdamW, OptimConfig};
use super::targets::{build_targets, TargetMaps};
use crate::dataio::Sequence;
use crate::error::{Error, Result};
use crate::network::{HeadOutput, HiddenState, Model, Step, StepCache, NUM_CLASSES};
use crate::numerics::{FlushDenormals, ForwardCtx, Mode, ParamStore, Real, Tensor};
use crate::pillars::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub delta_loc_size: f64,
    pub delta_angle: f64,
    pub w_loc: f64,
    pub w_ang: f64,
    pub lambda_aux: f64,
    /// Exponent of the inverse-frequency class weights; 0 gives uniform weights.
    pub class_weight_power: f64,
    /// Explicit per-channel weights (background first); overrides the power.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
    pub k_min: usize,
    pub k_max: usize,
    /// Backpropagate through the warm-up passes instead of cutting the
    /// gradient at each hidden state.
    pub bptt: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.5,
            focal_gamma: 2.0,
            delta_loc_size: 1.0,
            delta_angle: 3.0,
            w_loc: 2.0,
            w_ang: 1.0,
            lambda_aux: 0.5,
            class_weight_power: 1.0,
            class_weights: None,
            k_min: 1,
            k_max: 9,
            bptt: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.focal_alpha > 0.0) {
            bad.push("focal_alpha must be > 0");
        }
        if !(self.focal_gamma >= 0.0) {
            bad.push("focal_gamma must be >= 0");
        }
        if !(self.delta_loc_size > 0.0 && self.delta_angle > 0.0) {
            bad.push("huber deltas must be > 0");
        }
        if !(self.w_loc >= 0.0 && self.w_ang >= 0.0 && self.lambda_aux >= 0.0) {
            bad.push("loss weights must be >= 0");
        }
        if !(self.class_weight_power >= 0.0) {
            bad.push("class_weight_power must be >= 0");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v > 0.0)) {
                bad.push("class weights must be > 0");
            }
        }
        if self.k_min > self.k_max {
            bad.push("k_min must not exceed k_max");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Sequences whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    /// Set the classifier bias so the initial softmax matches the class
    /// frequencies of the training set.
    pub bias_init: bool,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 1,
            bias_init: true,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// Loss terms of one optimizer step, averaged over the batch. `total`
/// already includes the term weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub loc_size: f64,
    pub angle: f64,
    pub aux: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.focal += s * o.focal;
        self.loc_size += s * o.loc_size;
        self.angle += s * o.angle;
        self.aux += s * o.aux;
    }
}

/// Per-channel fraction of valid target cells over a data set.
pub fn class_frequencies(data: &[Sequence], grid: &GridSpec) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for seq in data {
        let c = build_targets(&seq.annotations, grid).class_counts();
        for k in 0..NUM_CLASSES {
            counts[k] += c[k];
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
    }
    counts.map(|c| c as f64 / total as f64)
}

/// Losses of one final pass and their gradients w.r.t. the head outputs and
/// the auxiliary prediction.
pub fn compute_losses<T: Real>(
    cfg: &LossConfig,
    class_weights: &[f64; NUM_CLASSES],
    step: &Step<T>,
    targets: &TargetMaps,
) -> Result<(LossBreakdown, HeadOutput<T>, Option<Tensor<T>>)> {
    let mut d = step.head.zeros_like();
    let (focal, dprobs) = focal_loss(
        &step.head.probs,
        targets,
        cfg.focal_alpha,
        cfg.focal_gamma,
        class_weights,
    )?;
    d.probs = dprobs;
    let (loc_size, angle) = regression_losses(
        &step.head,
        targets,
        cfg.delta_loc_size,
        cfg.delta_angle,
        cfg.w_loc,
        cfg.w_ang,
        &mut d,
    )?;
    let (aux, daux) = match &step.aux {
        Some(a) if cfg.lambda_aux > 0.0 => {
            let (l, mut g) = aux_loss(&a.prediction, &a.target)?;
            g.scale(T::of(cfg.lambda_aux));
            (l, Some(g))
        }
        _ => (0.0, None),
    };
    let total = focal + cfg.w_loc * loc_size + cfg.w_ang * angle + cfg.lambda_aux * aux;
    Ok((
        LossBreakdown {
            total,
            focal,
            loc_size,
            angle,
            aux,
        },
        d,
        daux,
    ))
}

fn scale_head<T: Real>(d: &mut HeadOutput<T>, s: T) {
    d.probs.scale(s);
    d.loc.scale(s);
    d.size.scale(s);
    d.heading.scale(s);
}

/// Model, parameters and optimizer state of one training run.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub cfg: TrainConfig,
    pub opt: AdamW<T>,
    pub class_weights: [f64; NUM_CLASSES],
    /// Optimizer steps taken.
    pub step: usize,
    /// Sequences skipped because every target cell was unclear.
    pub skipped: usize,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optim.clone());
        let class_weights = cfg.loss.class_weights.unwrap_or([1.0; NUM_CLASSES]);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
        Ok(Trainer {
            model,
            store,
            cfg,
            opt,
            class_weights,
            step: 0,
            skipped: 0,
            rng,
        })
    }

    /// Derives class weights (unless given explicitly) and, if enabled, the
    /// classifier bias from the class frequencies of `data`.
    pub fn prepare(&mut self, data: &[Sequence]) -> Result<[f64; NUM_CLASSES]> {
        let freqs = class_frequencies(data, &self.model.cfg.grid);
        if self.cfg.loss.class_weights.is_none() {
            self.class_weights = class_weights(&freqs, self.cfg.loss.class_weight_power);
        }
        if self.cfg.bias_init {
            let id = self.model.head.cls.bias.expect("classifier has a bias");
            let b: Vec<T> = bias_init(&freqs).iter().map(|&v| T::of(v)).collect();
            self.store.value_mut(id).data_mut().copy_from_slice(&b);
        }
        Ok(freqs)
    }

    /// Position of the sampling stream, for resuming a run.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Number of warm-up scans for a sequence with `past` scans before the core.
    fn draw_k(&mut self, past: usize) -> usize {
        if !self.model.cfg.is_recurrent() {
            return 0;
        }
        let hi = self.cfg.loss.k_max.min(past);
        let lo = self.cfg.loss.k_min.min(hi);
        self.rng.random_range(lo..=hi)
    }

    /// Forward and backward of one sequence with `k` warm-up scans, gradients
    /// scaled by `scale`. Returns `None` for a degenerate sequence.
    pub fn accumulate(
        &mut self,
        seq: &Sequence,
        k: usize,
        scale: f64,
    ) -> Result<Option<LossBreakdown>> {
        let targets = build_targets(&seq.annotations, &self.model.cfg.grid);
        if targets.valid_cells() == 0 {
            return Ok(None);
        }
        let prepared = self.model.prepare_sequence(seq)?;
        let core = prepared.len() - 1;
        if k > core {
            return Err(Error::InvalidArgument(format!(
                "{k} warm-up scans requested, {core} available"
            )));
        }
        let bptt = self.cfg.loss.bptt;
        let mut state: Option<HiddenState<T>> = None;
        let mut warm_caches: Vec<(StepCache<T>, HeadOutput<T>)> = Vec::new();
        for (pillars, pose) in &prepared[core - k..core] {
            let mut ctx = ForwardCtx::new(Mode::Train);
            let s = self
                .model
                .step(&self.store, pillars, pose, state.as_ref(), &mut ctx, false)?;
            ctx.commit(&mut self.store);
            if bptt {
                warm_caches.push((s.cache, s.head.zeros_like()));
            }
            state = s.state;
        }
        let (pillars, pose) = &prepared[core];
        let with_aux = self.model.cfg.uses_aux() && self.cfg.loss.lambda_aux > 0.0;
        let mut ctx = ForwardCtx::new(Mode::Train);
        let step = self.model.step(
            &self.store,
            pillars,
            pose,
            state.as_ref(),
            &mut ctx,
            with_aux,
        )?;
        ctx.commit(&mut self.store);
        let (losses, mut dhead, mut daux) =
            compute_losses(&self.cfg.loss, &self.class_weights, &step, &targets)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", losses.total)));
        }
        let s = T::of(scale);
        scale_head(&mut dhead, s);
        if let Some(g) = daux.as_mut() {
            g.scale(s);
        }
        let need = bptt && k > 0;
        let mut dstate = self
            .model
            .step_backward(
                &mut self.store,
                &step.cache,
                &dhead,
                daux.as_ref(),
                None,
                need,
            )?
            .dh_prev;
        for (i, (cache, zero)) in warm_caches.iter().enumerate().rev() {
            let Some(ds) = dstate.take() else { break };
            dstate = self
                .model
                .step_backward(&mut self.store, cache, zero, None, Some(&ds), i > 0)?
                .dh_prev;
        }
        Ok(Some(losses))
    }

    /// One optimizer step over `batch`. Returns `None` when every sequence
    /// of the batch was degenerate (the step is skipped and counted).
    pub fn train_step(&mut self, batch: &[&Sequence]) -> Result<Option<LossBreakdown>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let _ftz = FlushDenormals::new();
        self.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut sum = LossBreakdown::default();
        let mut used = 0;
        for seq in batch {
            let k = self.draw_k(seq.past_len());
            match self.accumulate(seq, k, scale)? {
                Some(l) => {
                    sum.add_scaled(&l, scale);
                    used += 1;
                }
                None => self.skipped += 1,
            }
        }
        if used == 0 {
            return Ok(None);
        }
        let lr = self.cfg.optim.lr_at(self.step, self.cfg.steps);
        self.opt.step(&mut self.store, lr);
        self.step += 1;
        Ok(Some(sum))
    }

    /// Trains until `cfg.steps` optimizer steps, drawing batches from
    /// shuffled epochs over `data`. `log` sees every completed step.
    pub fn fit(
        &mut self,
        data: &[Sequence],
        mut log: impl FnMut(usize, &LossBreakdown),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training sequences".into()));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut attempts = 0;
        while self.step < self.cfg.steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut self.rng);
                }
                batch.push(&data[order.pop().expect("refilled")]);
            }
            match self.train_step(&batch)? {
                Some(l) => {
                    attempts = 0;
                    log(self.step, &l);
                }
                None => {
                    attempts += 1;
                    if attempts > data.len() {
                        return Err(Error::InvalidArgument(
                            "every training sequence is degenerate".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_scene, SceneConfig};
    use crate::geometry::{ObjectClass, RotatedBox};
    use crate::network::{
        BackboneConfig, Compensation, MemoryConfig, MemoryPlacement, ModelConfig,
    };
    use crate::numerics::{GradCheck, ParamKind};
    use crate::pillars::PillarConfig;

    fn tiny(placement: MemoryPlacement, compensation: Compensation) -> ModelConfig {
        ModelConfig {
            grid: GridSpec {
                x_min: 0.0,
                x_max: 16.0,
                y_min: -8.0,
                y_max: 8.0,
                cell: 1.0,
                output_stride: 2,
            },
            pillar: PillarConfig {
                channels: 4,
                point_budget: 5000,
            },
            backbone: BackboneConfig {
                layers: [1, 1, 1],
                down_mult: [1, 1, 2],
                up_mult: 1,
            },
            memory: MemoryConfig {
                placement,
                compensation,
                ..Default::default()
            },
        }
    }

    fn scenes(n: usize, scans: usize) -> Vec<Sequence> {
        (0..n)
            .map(|i| {
                generate_scene(&SceneConfig {
                    seed: 100 + i as u64,
                    n_scans: scans,
                    spawn_x: [1.0, 15.0],
                    spawn_y: [-7.0, 7.0],
                    ground_range: 20.0,
                    ground_points: 300,
                    clutter_count: [2, 4],
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    fn trainer(cfg: &ModelConfig, train: TrainConfig) -> Trainer<f32> {
        let (model, store) = Model::build::<f32>(cfg, 3).unwrap();
        Trainer::new(model, store, train).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            focal_gamma: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            delta_angle: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            class_weights: Some([1.0, 0.0, 1.0, 1.0]),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            k_min: 3,
            k_max: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn k_zero_is_single_frame_training() {
        let data = scenes(1, 3);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let single = data[0].tail(1);
        let mut a = trainer(&cfg, TrainConfig::default());
        let mut b = trainer(&cfg, TrainConfig::default());
        a.store.zero_grads();
        b.store.zero_grads();
        let la = a.accumulate(&data[0], 0, 1.0).unwrap().unwrap();
        let lb = b.accumulate(&single, 0, 1.0).unwrap().unwrap();
        assert_eq!(la, lb);
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value.grad(), q.value.grad(), "{}", p.name);
        }
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let data = scenes(3, 3);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let tc = TrainConfig {
            steps: 6,
            ..Default::default()
        };
        let run = || {
            let mut t = trainer(&cfg, tc.clone());
            t.prepare(&data).unwrap();
            let mut out = Vec::new();
            t.fit(&data, |_, l| out.push(l.total)).unwrap();
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_tiny_set() {
        let data = scenes(4, 2);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let mut t = trainer(
            &cfg,
            TrainConfig {
                steps: 500,
                ..Default::default()
            },
        );
        t.prepare(&data).unwrap();
        let mut hist = Vec::new();
        t.fit(&data, |_, l| {
            assert!(l.total.is_finite());
            hist.push(l.total)
        })
        .unwrap();
        let early: f64 = hist[10..20].iter().sum::<f64>() / 10.0;
        let late: f64 = hist[490..].iter().sum::<f64>() / 10.0;
        assert!(late <= 0.5 * early, "loss went from {early} to {late}");
    }

    #[test]
    fn conv_without_aux_trains() {
        let data = scenes(2, 3);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let mut loss = LossConfig {
            lambda_aux: 0.0,
            ..Default::default()
        };
        loss.k_min = 2;
        let mut t = trainer(
            &cfg,
            TrainConfig {
                steps: 3,
                loss,
                ..Default::default()
            },
        );
        let mut n = 0;
        t.fit(&data, |_, l| {
            assert_eq!(l.aux, 0.0);
            n += 1
        })
        .unwrap();
        assert_eq!(n, 3);
    }

    #[test]
    fn all_unclear_is_skipped() {
        let mut seq = scenes(1, 1).pop().unwrap();
        seq.annotations = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let (x, y) = (1.0 + 2.0 * i as f64, -7.0 + 2.0 * j as f64);
                seq.annotations.push(RotatedBox::new(
                    x,
                    y,
                    0.0,
                    1.0,
                    1.0,
                    1.0,
                    0.0,
                    ObjectClass::Unclear,
                ));
            }
        }
        let cfg = tiny(MemoryPlacement::None, Compensation::Conv);
        let mut t = trainer(&cfg, TrainConfig::default());
        let before = t.store.clone();
        assert!(t.train_step(&[&seq]).unwrap().is_none());
        assert_eq!(t.skipped, 1);
        assert_eq!(t.step, 0);
        for (p, q) in t.store.iter().zip(before.iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn bias_init_matches_frequencies() {
        let data = scenes(3, 1);
        let cfg = tiny(MemoryPlacement::None, Compensation::Conv);
        let mut t = trainer(&cfg, TrainConfig::default());
        let freqs = t.prepare(&data).unwrap();
        assert!((freqs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w = t.class_weights;
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        // With the classifier kernel zeroed the softmax is the prior.
        let wid = t.model.head.cls.weight;
        t.store.value_mut(wid).data_mut().fill(0.0);
        let prepared = t.model.prepare_sequence(&data[0]).unwrap();
        let mut ctx = ForwardCtx::new(Mode::Infer);
        let s = t
            .model
            .step(
                &t.store,
                &prepared[0].0,
                &prepared[0].1,
                None,
                &mut ctx,
                false,
            )
            .unwrap();
        for row in s.head.probs.data().chunks(4) {
            for k in 0..4 {
                assert!((row[k] as f64 - freqs[k].max(1e-6)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn masked_predictions_do_not_change_loss() {
        let data = scenes(1, 2);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let (model, store) = Model::build::<f64>(&cfg, 1).unwrap();
        let mut targets = build_targets(&data[0].annotations, &cfg.grid);
        targets.unclear[0] = true;
        targets.foreground[0] = false;
        targets.class[0] = 0;
        let prepared = model.prepare_sequence(&data[0]).unwrap();
        let mut ctx = ForwardCtx::new(Mode::Train);
        let step = model
            .step(
                &store,
                &prepared[1].0,
                &prepared[1].1,
                None,
                &mut ctx,
                false,
            )
            .unwrap();
        let lc = LossConfig::default();
        let (base, _, _) = compute_losses(&lc, &[1.0; 4], &step, &targets).unwrap();
        let mut pert = step.clone();
        for c in 0..targets.cells() {
            if !targets.foreground[c] {
                for k in 0..3 {
                    pert.head.loc.data_mut()[c * 3 + k] += 5.0;
                    pert.head.size.data_mut()[c * 3 + k] += 5.0;
                }
                pert.head.heading.data_mut()[c * 2] -= 2.0;
            }
        }
        pert.head.probs.data_mut()[..4].copy_from_slice(&[0.97, 0.01, 0.01, 0.01]);
        let (l, _, _) = compute_losses(&lc, &[1.0; 4], &pert, &targets).unwrap();
        assert_eq!(base, l);
    }

    fn prep_for_gradcheck(store: &mut ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in store.iter_mut() {
            if p.value.shape().len() == 1 && p.kind == ParamKind::Weight {
                let n = p.value.len();
                p.value = Tensor::uniform(&[n], 0.05, 0.3, &mut rng);
            }
        }
    }

    #[test]
    fn final_pass_gradient_matches_finite_differences() {
        let data = scenes(1, 2);
        let cfg = tiny(MemoryPlacement::AfterBackbone, Compensation::Conv);
        let (model, mut store) = Model::build::<f64>(&cfg, 5).unwrap();
        prep_for_gradcheck(&mut store);
        let lc = LossConfig::default();
        let weights = [0.5, 1.0, 1.2, 1.3];
        let targets = build_targets(&data[0].annotations, &cfg.grid);
        let prepared = model.prepare_sequence(&data[0]).unwrap();
        let mut ctx = ForwardCtx::new(Mode::Train);
        let warm = model
            .step(
                &store,
                &prepared[0].0,
                &prepared[0].1,
                None,
                &mut ctx,
                false,
            )
            .unwrap();
        let state = warm.state;
        let (p1, pose1) = (&prepared[1].0, prepared[1].1);
        let step = model
            .step(&store, p1, &pose1, state.as_ref(), &mut ctx, true)
            .unwrap();
        let (_, d, daux) = compute_losses(&lc, &weights, &step, &targets).unwrap();
        store.zero_grads();
        model
            .step_backward(&mut store, &step.cache, &d, daux.as_ref(), None, false)
            .unwrap();
        let report = GradCheck {
            max_probes: 12,
            ..Default::default()
        }
        .run(&mut store, &mut [], &[], |s, _| {
            let mut ctx = ForwardCtx::new(Mode::Train);
            let st = model.step(s, p1, &pose1, state.as_ref(), &mut ctx, true)?;
            Ok(compute_losses(&lc, &weights, &st, &targets)?.0.total)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        for placement in [
            MemoryPlacement::AfterBackbone,
            MemoryPlacement::BeforeBackbone,
        ] {
            bptt_gradcheck(placement);
        }
    }

    fn bptt_gradcheck(placement: MemoryPlacement) {
        let data = scenes(1, 3);
        let cfg = tiny(placement, Compensation::Conv);
        let (model, mut store) = Model::build::<f64>(&cfg, 6).unwrap();
        prep_for_gradcheck(&mut store);
        // The auxiliary target is a stop-gradient function of the previous
        // state, which finite differences through earlier frames would see.
        let lc = LossConfig {
            bptt: true,
            lambda_aux: 0.0,
            ..Default::default()
        };
        let weights = [1.0; 4];
        let targets = build_targets(&data[0].annotations, &cfg.grid);
        let prepared = model.prepare_sequence(&data[0]).unwrap();
        let run = |s: &ParamStore<f64>| -> Result<(f64, Vec<Step<f64>>)> {
            let mut ctx = ForwardCtx::new(Mode::Train);
            let mut state = None;
            let mut steps = Vec::new();
            for (i, (p, pose)) in prepared.iter().enumerate() {
                let st = model.step(
                    s,
                    p,
                    pose,
                    state.as_ref(),
                    &mut ctx,
                    i + 1 == prepared.len(),
                )?;
                state = st.state.clone();
                steps.push(st);
            }
            let l = compute_losses(&lc, &weights, steps.last().unwrap(), &targets)?
                .0
                .total;
            Ok((l, steps))
        };
        let (_, steps) = run(&store).unwrap();
        let (_, d, daux) = compute_losses(&lc, &weights, steps.last().unwrap(), &targets).unwrap();
        store.zero_grads();
        let last = steps.len() - 1;
        let mut ds = model
            .step_backward(
                &mut store,
                &steps[last].cache,
                &d,
                daux.as_ref(),
                None,
                true,
            )
            .unwrap()
            .dh_prev;
        for i in (0..last).rev() {
            let zero = steps[i].head.zeros_like();
            ds = model
                .step_backward(&mut store, &steps[i].cache, &zero, None, ds.as_ref(), i > 0)
                .unwrap()
                .dh_prev;
        }
        let report = GradCheck {
            max_probes: 12,
            ..Default::default()
        }
        .run(&mut store, &mut [], &[], |s, _| Ok(run(s)?.0))
        .unwrap();
        assert!(report.passes(1e-3), "{placement}: {report:?}");
    }
}
