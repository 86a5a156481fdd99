//! Dense N-dimensional f32 tensors in row-major order.
//!
//! Every image, perturbation, weight, and gradient in the crate is one of
//! these. Values are finite by construction: constructors that accept raw
//! data validate it, and the numeric kernels only combine finite inputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Build from raw row-major data. Rejects element-count mismatches,
    /// zero-sized dimensions, and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::BadShape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor element {i}"),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::BadShape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f32) -> Tensor {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn clamp(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> Tensor {
        let mut out = self.clone();
        out.clamp(lo, hi);
        out
    }

    pub fn l2_norm(&self) -> f32 {
        // f64 accumulation keeps large flat sums stable enough for projections.
        (self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt() as f32
    }

    pub fn linf_norm(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn lp_norm(&self, p: crate::attack::NormP) -> f32 {
        match p {
            crate::attack::NormP::L2 => self.l2_norm(),
            crate::attack::NormP::LInf => self.linf_norm(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64) * (b as f64))
            .sum::<f64>() as f32
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View of image `n` of an [N, ...] batch as its own tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        assert!(!self.shape.is_empty() && n < self.shape[0]);
        let per = self.data.len() / self.shape[0];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::EmptySet("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::BadShape(format!(
                    "stack mismatch: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count_and_finiteness() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn norms() {
        let t = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((t.l2_norm() - 5.0).abs() < 1e-6);
        assert_eq!(t.linf_norm(), 4.0);
    }

    #[test]
    fn add_scaled_and_clamp() {
        let mut a = Tensor::from_vec(&[3], vec![0.0, 0.5, 1.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        a.add_scaled(&b, 0.5);
        assert_eq!(a.data(), &[0.5, 1.0, 1.5]);
        a.clamp(0.0, 1.0);
        assert_eq!(a.data(), &[0.5, 1.0, 1.0]);
    }

    #[test]
    fn stack_and_batch_item() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1).data(), &[3.0, 4.0]);
    }
}
