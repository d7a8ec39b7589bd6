use rand::Rng;

use crate::error::Result;
use crate::numerics::{
    activate, activate_backward, Activation, Conv2d, Padding, ParamStore, Real, Tensor,
};

/// Head channels: background first, then the detected classes.
pub const NUM_CLASSES: usize = 4;

/// Per-cell predictions on the head grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    /// `[1, H, W, 4]` softmax probabilities.
    pub probs: Tensor<T>,
    /// `[1, H, W, 3]`: Δx, Δy from the cell center and absolute z (meters).
    pub loc: Tensor<T>,
    /// `[1, H, W, 3]`: l, w, h after ReLU.
    pub size: Tensor<T>,
    /// `[1, H, W, 2]`: sin θ, cos θ.
    pub heading: Tensor<T>,
}

impl<T: Real> HeadOutput<T> {
    pub fn rows(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn zeros_like(&self) -> HeadOutput<T> {
        HeadOutput {
            probs: Tensor::zeros(self.probs.shape()),
            loc: Tensor::zeros(self.loc.shape()),
            size: Tensor::zeros(self.size.shape()),
            heading: Tensor::zeros(self.heading.shape()),
        }
    }
}

/// Anchor-free head: parallel 1×1 convolutions, one box hypothesis per cell.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub cls: Conv2d,
    pub loc: Conv2d,
    pub size: Conv2d,
    pub heading: Conv2d,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Tensor<T>,
    logits: Tensor<T>,
    size_pre: Tensor<T>,
    out: HeadOutput<T>,
}

impl DetectionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = |part: &str, cout: usize| {
            Conv2d::new(
                store,
                &format!("{name}.{part}"),
                cin,
                cout,
                1,
                1,
                Padding::Same,
                true,
                rng,
            )
        };
        DetectionHead {
            cls: conv("cls", NUM_CLASSES),
            loc: conv("loc", 3),
            size: conv("size", 3),
            heading: conv("heading", 2),
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(HeadOutput<T>, HeadCache<T>)> {
        let logits = self.cls.forward(store, x)?;
        let probs = activate(&logits, Activation::SoftmaxChannels);
        let loc = self.loc.forward(store, x)?;
        let size_pre = self.size.forward(store, x)?;
        let size = activate(&size_pre, Activation::Relu);
        let heading = self.heading.forward(store, x)?;
        let out = HeadOutput {
            probs,
            loc,
            size,
            heading,
        };
        Ok((
            out.clone(),
            HeadCache {
                input: x.clone(),
                logits,
                size_pre,
                out,
            },
        ))
    }

    /// Takes gradients w.r.t. each output map; returns the feature gradient.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &HeadCache<T>,
        d: &HeadOutput<T>,
    ) -> Result<Tensor<T>> {
        let x = &cache.input;
        let dlogits = activate_backward(
            Activation::SoftmaxChannels,
            &cache.logits,
            &cache.out.probs,
            &d.probs,
        )?;
        let dsize = activate_backward(Activation::Relu, &cache.size_pre, &cache.out.size, &d.size)?;
        let mut dx = self
            .cls
            .backward(store, x, &dlogits, true)?
            .expect("requested");
        for (layer, g) in [
            (&self.loc, &d.loc),
            (&self.size, &dsize),
            (&self.heading, &d.heading),
        ] {
            dx.axpy(
                T::one(),
                &layer.backward(store, x, g, true)?.expect("requested"),
            )?;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = DetectionHead::new(&mut store, "head", 6, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 5, 4, 6], -3.0, 3.0, &mut rng);
        let (out, _) = head.forward(&store, &x).unwrap();
        assert!(out.size.data().iter().all(|&v| v >= 0.0));
        for row in out.probs.data().chunks_exact(NUM_CLASSES) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!((out.rows(), out.cols()), (5, 4));
    }

    #[test]
    fn head_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = DetectionHead::new(&mut store, "head", 5, &mut rng);
        let mut inputs = vec![Tensor::<f64>::uniform(&[1, 4, 3, 5], -1.0, 1.0, &mut rng)];
        let (out, cache) = head.forward(&store, &inputs[0]).unwrap();
        let probe = HeadOutput {
            probs: Tensor::uniform(out.probs.shape(), -1.0, 1.0, &mut rng),
            loc: Tensor::uniform(out.loc.shape(), -1.0, 1.0, &mut rng),
            size: Tensor::uniform(out.size.shape(), -1.0, 1.0, &mut rng),
            heading: Tensor::uniform(out.heading.shape(), -1.0, 1.0, &mut rng),
        };
        let dx = head.backward(&mut store, &cache, &probe).unwrap();
        let report = GradCheck::default()
            .run(&mut store, &mut inputs, &[dx], |s, x| {
                let (o, _) = head.forward(s, &x[0])?;
                Ok(o.probs.dot(&probe.probs)?
                    + o.loc.dot(&probe.loc)?
                    + o.size.dot(&probe.size)?
                    + o.heading.dot(&probe.heading)?)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
