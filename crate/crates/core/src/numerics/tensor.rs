use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major array of rank ≤ 4.
///
/// Feature maps are `batch × height × width × channels`; the channel axis is
/// always the last one. A gradient buffer can be attached, and when present
/// it always has the same shape as the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_rank(shape).expect("valid rank");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::of(rng.random_range(lo..hi));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank ≥ 1")
    }

    /// The shape as `[batch, height, width, channels]`; rejects other ranks.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(Error::shape(
                op,
                format!("expected a B×H×W×C tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes the element count", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along the channel axis. All leading dims must agree.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &first.shape[..first.shape.len() - 1];
        for p in parts {
            if &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_vec(&shape, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        let c = self.channels();
        if sizes.iter().sum::<usize>() != c {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {sizes:?} do not sum to {c}"),
            ));
        }
        let lead = &self.shape[..self.shape.len() - 1];
        let rows: usize = lead.iter().product();
        let mut out: Vec<Vec<T>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(rows * s))
            .collect();
        for r in 0..rows {
            let row = &self.data[r * c..(r + 1) * c];
            let mut off = 0;
            for (o, &s) in out.iter_mut().zip(sizes) {
                o.extend_from_slice(&row[off..off + s]);
                off += s;
            }
        }
        out.into_iter()
            .zip(sizes)
            .map(|(d, &s)| {
                let mut shape = lead.to_vec();
                shape.push(s);
                Tensor::from_vec(&shape, d)
            })
            .collect()
    }
}
