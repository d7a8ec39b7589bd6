use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::numerics::{Checkpoint, ParamKind, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub schedule: LrSchedule,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            lr_min: 0.0,
            schedule: LrSchedule::Cosine,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr
            && self.betas.iter().all(|b| (0.0..1.0).contains(b))
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = if total == 0 {
                    0.0
                } else {
                    (step as f64 / total as f64).min(1.0)
                };
                self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// AdamW with decoupled weight decay. Only trainable weights move.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub t: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update with learning rate `lr` from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let [b1, b2] = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (eps, wd, lr_t) = (T::of(self.cfg.eps), T::of(self.cfg.weight_decay), T::of(lr));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for p in store.iter_mut() {
            if p.kind != ParamKind::Weight || !p.trainable {
                continue;
            }
            let n = p.value.len();
            let grad: Vec<T> = p
                .value
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); n]);
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1t * m[i] + (T::one() - b1t) * g;
                v[i] = b2t * v[i] + (T::one() - b2t) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr_t * (mh / (vh.sqrt() + eps) + wd * *x);
            }
        }
    }

    /// Moments as a checkpoint (`m.<name>`, `v.<name>`) with the step count.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "t": self.t }));
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            for (tag, map) in [("m", &self.m), ("v", &self.v)] {
                let data = map[name].clone();
                let len = data.len();
                let t = Tensor::from_vec(&[len], data).expect("flat moment");
                ck.push(&format!("{tag}.{name}"), &t, true, false);
            }
        }
        ck
    }

    pub fn from_checkpoint(cfg: OptimConfig, ck: &Checkpoint) -> Result<Self> {
        let t = ck.meta["t"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks its step count".into()))?;
        let mut opt = AdamW::new(cfg);
        opt.t = t;
        for (e, v) in &ck.entries {
            let vals: Vec<T> = v.data().iter().map(|&x| T::of(x)).collect();
            match e.name.split_once('.') {
                Some(("m", name)) => opt.m.insert(name.to_string(), vals),
                Some(("v", name)) => opt.v.insert(name.to_string(), vals),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unexpected optimizer key {}",
                        e.name
                    )))
                }
            };
        }
        Ok(opt)
    }
}

/// Classifier bias whose softmax equals the given class frequencies.
/// Zero frequencies are clamped to 1e-6 and the vector renormalized.
pub fn bias_init(freqs: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let clamped = freqs.map(|f| if f.is_finite() { f.max(1e-6) } else { 1e-6 });
    let sum: f64 = clamped.iter().sum();
    clamped.map(|f| (f / sum).ln())
}

/// Inverse-frequency class weights raised to `power`, normalized to mean 1.
/// `power = 0` gives uniform weights.
pub fn class_weights(freqs: &[f64; NUM_CLASSES], power: f64) -> [f64; NUM_CLASSES] {
    let inv = freqs.map(|f| f.max(1e-6).powf(-power));
    let mean = inv.iter().sum::<f64>() / NUM_CLASSES as f64;
    inv.map(|w| w / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{activate, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], w), ParamKind::Weight);
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_still() {
        let mut s = store_with(0.7);
        s.zero_grads();
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut s, 0.1);
        }
        assert_eq!(s.value(s.id("w").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_alone() {
        let mut s = store_with(1.0);
        s.zero_grads();
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut s, 0.1);
        assert!((s.value(s.id("w").unwrap()).data()[0] - 0.999).abs() < 1e-15);
        opt.step(&mut s, 0.1);
        assert!((s.value(s.id("w").unwrap()).data()[0] - 0.999 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = store_with(1.0);
        let id = s.id("w").unwrap();
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut steps = 0;
        while s.value(id).data()[0].abs() >= 0.1 {
            let w = s.value(id).data()[0];
            s.zero_grads();
            s.accumulate_grad(id, &[2.0 * w]);
            opt.step(&mut s, 0.05);
            steps += 1;
            assert!(steps <= 200, "did not converge");
        }
    }

    #[test]
    fn frozen_and_buffers_untouched() {
        let mut s = store_with(1.0);
        s.add("frozen.w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        s.add("b", Tensor::full(&[2], 1.0), ParamKind::Buffer);
        s.freeze_prefixes(&["frozen."]);
        for id in s.ids().collect::<Vec<_>>() {
            let n = s.value(id).len();
            s.accumulate_grad(id, &vec![1.0; n]);
        }
        let mut opt = AdamW::new(OptimConfig::default());
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(s.id("frozen.w").unwrap()).data(), &[1.0, 1.0]);
        assert_eq!(s.value(s.id("b").unwrap()).data(), &[1.0, 1.0]);
        assert_ne!(s.value(s.id("w").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn state_round_trips() {
        let mut s = store_with(1.0);
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &[0.3]);
        let mut a = AdamW::new(OptimConfig::default());
        a.step(&mut s, 0.01);
        let mut b =
            AdamW::<f64>::from_checkpoint(OptimConfig::default(), &a.to_checkpoint()).unwrap();
        assert_eq!(b.t, 1);
        let mut s2 = s.clone();
        a.step(&mut s, 0.01);
        b.step(&mut s2, 0.01);
        assert_eq!(s.value(id).data(), s2.value(id).data());
    }

    #[test]
    fn cosine_schedule_ends() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0, 100), 2e-3);
        assert!(c.lr_at(100, 100).abs() < 1e-18);
        assert!((c.lr_at(50, 100) - 1e-3).abs() < 1e-15);
    }

    fn softmax_of_bias(b: [f64; 4]) -> Vec<f64> {
        let t = Tensor::from_vec(&[1, 1, 1, 4], b.to_vec()).unwrap();
        activate(&t, Activation::SoftmaxChannels).into_data()
    }

    #[test]
    fn bias_init_reproduces_frequencies() {
        let f = [0.94, 0.03, 0.02, 0.01];
        for (p, q) in softmax_of_bias(bias_init(&f)).iter().zip(f) {
            assert!((p - q).abs() < 1e-6);
        }
        let u = bias_init(&[0.25; 4]);
        assert!(u.iter().all(|&b| b == u[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.001..1.0));
            let s: f64 = raw.iter().sum();
            let f = raw.map(|v| v / s);
            for (p, q) in softmax_of_bias(bias_init(&f)).iter().zip(f) {
                assert!((p - q).abs() < 1e-6);
            }
        }
        let z = softmax_of_bias(bias_init(&[1.0, 0.0, 0.0, 0.0]));
        assert!(z[1] > 0.0 && (z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_mean_one() {
        let w = class_weights(&[0.9, 0.05, 0.03, 0.02], 1.0);
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(w[3] > w[2] && w[2] > w[1] && w[1] > w[0]);
        assert_eq!(class_weights(&[0.9, 0.05, 0.03, 0.02], 0.0), [1.0; 4]);
    }
}
