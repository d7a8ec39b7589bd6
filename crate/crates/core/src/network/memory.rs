use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Transform2D;
use crate::numerics::{
    activate, activate_backward, Activation, Conv2d, Mode, Padding, ParamStore, Real, Tensor,
};

/// Convolutional GRU. Both gates come from one convolution over
/// `[h_prev, x]` with `2·Ch` filters (reset first, then update).
#[derive(Debug, Clone)]
pub struct ConvGru {
    pub gates: Conv2d,
    pub candidate: Conv2d,
    pub hidden: usize,
    pub input: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    hx: Tensor<T>,
    rhx: Tensor<T>,
    h_prev: Tensor<T>,
    r: Tensor<T>,
    z: Tensor<T>,
    cand: Tensor<T>,
}

impl ConvGru {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        input: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let cin = hidden + input;
        ConvGru {
            gates: Conv2d::new(
                store,
                &format!("{name}.gates"),
                cin,
                2 * hidden,
                kernel,
                1,
                Padding::Same,
                true,
                rng,
            ),
            candidate: Conv2d::new(
                store,
                &format!("{name}.candidate"),
                cin,
                hidden,
                kernel,
                1,
                Padding::Same,
                true,
                rng,
            ),
            hidden,
            input,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        h_prev: &Tensor<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, GruCache<T>)> {
        if h_prev.channels() != self.hidden || x.channels() != self.input {
            return Err(Error::shape(
                "convgru",
                format!(
                    "state {} / input {} channels, layer expects {} / {}",
                    h_prev.channels(),
                    x.channels(),
                    self.hidden,
                    self.input
                ),
            ));
        }
        let hx = Tensor::concat_channels(&[h_prev, x])?;
        let gates = activate(&self.gates.forward(store, &hx)?, Activation::Sigmoid);
        let mut rz = gates
            .split_channels(&[self.hidden, self.hidden])?
            .into_iter();
        let (r, z) = (rz.next().unwrap(), rz.next().unwrap());
        let mut rh = h_prev.clone();
        rh.data_mut()
            .iter_mut()
            .zip(r.data())
            .for_each(|(v, &g)| *v *= g);
        let rhx = Tensor::concat_channels(&[&rh, x])?;
        let cand = activate(&self.candidate.forward(store, &rhx)?, Activation::Tanh);
        let mut h = h_prev.clone();
        for ((o, &zz), &c) in h.data_mut().iter_mut().zip(z.data()).zip(cand.data()) {
            *o = (T::one() - zz) * *o + zz * c;
        }
        Ok((
            h,
            GruCache {
                hx,
                rhx,
                h_prev: h_prev.clone(),
                r,
                z,
                cand,
            },
        ))
    }

    /// Returns `(dh_prev, dx)`.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &GruCache<T>,
        dh: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = dh.len();
        let (hp, z, r, cand) = (
            cache.h_prev.data(),
            cache.z.data(),
            cache.r.data(),
            cache.cand.data(),
        );
        let g = dh.data();
        let mut dcand_pre = vec![T::zero(); n];
        let mut dz_pre = vec![T::zero(); n];
        let mut dh_prev = vec![T::zero(); n];
        for i in 0..n {
            let dc = g[i] * z[i];
            dcand_pre[i] = dc * (T::one() - cand[i] * cand[i]);
            let dz = g[i] * (cand[i] - hp[i]);
            dz_pre[i] = dz * z[i] * (T::one() - z[i]);
            dh_prev[i] = g[i] * (T::one() - z[i]);
        }
        let dcand_pre = Tensor::from_vec(dh.shape(), dcand_pre)?;
        let drhx = self
            .candidate
            .backward(store, &cache.rhx, &dcand_pre, true)?
            .expect("requested");
        let mut parts = drhx.split_channels(&[self.hidden, self.input])?.into_iter();
        let (drh, mut dx) = (parts.next().unwrap(), parts.next().unwrap());
        let mut dr_pre = vec![T::zero(); n];
        for i in 0..n {
            let drh_i = drh.data()[i];
            dh_prev[i] += drh_i * r[i];
            dr_pre[i] = drh_i * hp[i] * r[i] * (T::one() - r[i]);
        }
        let dgates = Tensor::concat_channels(&[
            &Tensor::from_vec(dh.shape(), dr_pre)?,
            &Tensor::from_vec(dh.shape(), dz_pre)?,
        ])?;
        let dhx = self
            .gates
            .backward(store, &cache.hx, &dgates, true)?
            .expect("requested");
        let mut parts = dhx.split_channels(&[self.hidden, self.input])?.into_iter();
        let (dh_a, dx_a) = (parts.next().unwrap(), parts.next().unwrap());
        dh_prev
            .iter_mut()
            .zip(dh_a.data())
            .for_each(|(a, &b)| *a += b);
        dx.axpy(T::one(), &dx_a)?;
        Ok((Tensor::from_vec(dh.shape(), dh_prev)?, dx))
    }
}

/// `[1, h, w, 6]` map holding `(r11, r12, r21, r22, tx, ty)` at every cell.
pub fn broadcast_transform<T: Real>(rel: &Transform2D, h: usize, w: usize) -> Tensor<T> {
    let v = rel.to_array().map(T::of);
    let data = (0..h * w).flat_map(|_| v).collect();
    Tensor::from_vec(&[1, h, w, 6], data).expect("consistent shape")
}

/// Learned ego-motion compensation: one convolution over the previous
/// state concatenated with the broadcast relative transform.
#[derive(Debug, Clone)]
pub struct CompensationConv {
    pub conv: Conv2d,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct CompensationCache<T> {
    input: Tensor<T>,
}

impl CompensationConv {
    /// The kernel starts as a pass-through of the state (center tap identity,
    /// everything else zero).
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            name,
            channels + 6,
            channels,
            kernel,
            1,
            Padding::Same,
            true,
            rng,
        );
        let cin = channels + 6;
        let mut w = Tensor::<T>::zeros(&[kernel, kernel, cin, channels]);
        let center = (kernel / 2) * kernel + kernel / 2;
        for c in 0..channels {
            w.data_mut()[(center * cin + c) * channels + c] = T::one();
        }
        *store.value_mut(conv.weight) = w;
        CompensationConv { conv, channels }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        h_prev: &Tensor<T>,
        rel: &Transform2D,
    ) -> Result<(Tensor<T>, CompensationCache<T>)> {
        let [_, h, w, c] = h_prev.dims4("compensate_hidden")?;
        if c != self.channels {
            return Err(Error::shape(
                "compensate_hidden",
                format!("state has {c} channels, layer expects {}", self.channels),
            ));
        }
        let input = Tensor::concat_channels(&[h_prev, &broadcast_transform(rel, h, w)])?;
        let out = self.conv.forward(store, &input)?;
        Ok((out, CompensationCache { input }))
    }

    /// Returns the gradient w.r.t. the previous state when asked.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &CompensationCache<T>,
        dout: &Tensor<T>,
        need_dh: bool,
    ) -> Result<Option<Tensor<T>>> {
        let d = self.conv.backward(store, &cache.input, dout, need_dh)?;
        d.map(|d| Ok(d.split_channels(&[self.channels, 6])?.swap_remove(0)))
            .transpose()
    }
}

/// Train-time head regressing the compensated state toward the analytic warp.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AuxCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    mid: Tensor<T>,
}

impl AuxHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        AuxHead {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                Padding::Same,
                true,
                rng,
            ),
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                Padding::Same,
                true,
                rng,
            ),
        }
    }

    /// Fails in inference mode: the auxiliary task exists only for training.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, AuxCache<T>)> {
        if mode != Mode::Train {
            return Err(Error::InvalidArgument(
                "auxiliary head is train-only".into(),
            ));
        }
        let pre = self.conv1.forward(store, x)?;
        let mid = activate(&pre, Activation::Relu);
        let out = self.conv2.forward(store, &mid)?;
        Ok((
            out,
            AuxCache {
                input: x.clone(),
                pre,
                mid,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &AuxCache<T>,
        dout: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dmid = self
            .conv2
            .backward(store, &cache.mid, dout, true)?
            .expect("requested");
        let dpre = activate_backward(Activation::Relu, &cache.pre, &cache.mid, &dmid)?;
        Ok(self
            .conv1
            .backward(store, &cache.input, &dpre, true)?
            .expect("requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{conv2d, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, ch: usize, cx: usize) -> (ParamStore<f64>, ConvGru, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = ConvGru::new(&mut store, "gru", ch, cx, 3, &mut rng);
        (store, gru, rng)
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let (mut store, gru, mut rng) = setup(0, 3, 2);
        let mut b = Tensor::zeros(&[6]);
        b.data_mut()[3..].iter_mut().for_each(|v| *v = -1e3);
        store.set("gru.gates.bias", b).unwrap();
        let h = Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 5, 4, 2], -1.0, 1.0, &mut rng);
        let (out, _) = gru.forward(&store, &h, &x).unwrap();
        assert!(out.max_abs_diff(&h).unwrap() < 1e-12);
    }

    #[test]
    fn open_gates_give_candidate() {
        let (mut store, gru, mut rng) = setup(1, 3, 2);
        store
            .set("gru.gates.bias", Tensor::full(&[6], 1e3))
            .unwrap();
        let h = Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 5, 4, 2], -1.0, 1.0, &mut rng);
        let (out, _) = gru.forward(&store, &h, &x).unwrap();
        let hx = Tensor::concat_channels(&[&h, &x]).unwrap();
        let id = |n: &str| store.value(store.id(n).unwrap());
        let want = conv2d(
            &hx,
            id("gru.candidate.weight"),
            Some(id("gru.candidate.bias")),
            1,
            Padding::Same,
        )
        .unwrap()
        .map(|v| v.tanh());
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn convex_combination() {
        let (store, gru, mut rng) = setup(2, 4, 3);
        let h = Tensor::<f64>::uniform(&[1, 6, 5, 4], -1.0, 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 6, 5, 3], -2.0, 2.0, &mut rng);
        let (out, cache) = gru.forward(&store, &h, &x).unwrap();
        for i in 0..out.len() {
            let (a, b) = (h.data()[i], cache.cand.data()[i]);
            let v = out.data()[i];
            assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (store, gru, _) = setup(3, 3, 2);
        let h = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        assert!(gru.forward(&store, &h, &x).is_err());
    }

    #[test]
    fn gru_gradcheck() {
        let (mut store, gru, mut rng) = setup(4, 3, 2);
        let mut inputs = vec![
            Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[1, 5, 4, 2], -1.0, 1.0, &mut rng),
        ];
        let probe = Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let (_, cache) = gru.forward(&store, &inputs[0], &inputs[1]).unwrap();
        let (dh, dx) = gru.backward(&mut store, &cache, &probe).unwrap();
        let report = GradCheck::default()
            .run(&mut store, &mut inputs, &[dh, dx], |s, x| {
                gru.forward(s, &x[0], &x[1])?.0.dot(&probe)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn broadcast_identity() {
        let m = broadcast_transform::<f64>(&Transform2D::IDENTITY, 3, 2);
        assert_eq!(m.shape(), &[1, 3, 2, 6]);
        for row in m.data().chunks_exact(6) {
            assert_eq!(row, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn compensation_starts_as_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let comp = CompensationConv::new(&mut store, "comp", 4, 3, &mut rng);
        let h = Tensor::<f64>::uniform(&[1, 6, 5, 4], -1.0, 1.0, &mut rng);
        let rel = Transform2D {
            tx: 1.5,
            ty: -0.2,
            ..Transform2D::IDENTITY
        };
        let (out, _) = comp.forward(&store, &h, &rel).unwrap();
        assert_eq!(out.shape(), h.shape());
        assert!(out.max_abs_diff(&h).unwrap() < 1e-12);
    }

    #[test]
    fn compensation_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let comp = CompensationConv::new(&mut store, "comp", 3, 3, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 3, 9, 3], -0.5, 0.5, &mut rng);
        store.set("comp.weight", w).unwrap();
        let rel = Transform2D {
            r11: 0.8,
            r12: -0.6,
            r21: 0.6,
            r22: 0.8,
            tx: 0.4,
            ty: -1.1,
        };
        let mut inputs = vec![Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng)];
        let probe = Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let (_, cache) = comp.forward(&store, &inputs[0], &rel).unwrap();
        let dh = comp
            .backward(&mut store, &cache, &probe, true)
            .unwrap()
            .unwrap();
        let report = GradCheck::default()
            .run(&mut store, &mut inputs, &[dh], |s, x| {
                comp.forward(s, &x[0], &rel)?.0.dot(&probe)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn aux_head_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let aux = AuxHead::new(&mut store, "aux", 3, &mut rng);
        let zero = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let (out, _) = aux.forward(&store, &zero, Mode::Train).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(aux.forward(&store, &zero, Mode::Infer).is_err());
        let mut inputs = vec![Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng)];
        let probe = Tensor::<f64>::uniform(&[1, 5, 4, 3], -1.0, 1.0, &mut rng);
        let (out, cache) = aux.forward(&store, &inputs[0], Mode::Train).unwrap();
        assert_eq!(out.shape(), inputs[0].shape());
        let dx = aux.backward(&mut store, &cache, &probe).unwrap();
        let report = GradCheck::default()
            .run(&mut store, &mut inputs, &[dx], |s, x| {
                aux.forward(s, &x[0], Mode::Train)?.0.dot(&probe)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
