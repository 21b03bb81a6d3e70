//! Dense row-major tensors with the handful of kernels the tape records.
//!
//! Summation order is fixed (row-major sequential) so runs are reproducible.

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Dense n-dimensional array of scalars in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadShape {
                op: "new",
                shape,
                detail: format!("{} values for {} slots", data.len(), n),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> Result<S, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent of the last axis (1 for a scalar-shaped tensor).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn lead(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place accumulation, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Tensor<S> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Row-major matrix view helpers; tensors of rank != 2 are rejected.
    fn mat_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                shape: self.shape.clone(),
                detail: "expected rank-2 tensor".into(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose2(&self) -> Result<Tensor<S>, TensorError> {
        let (m, n) = self.mat_dims("transpose")?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (m, k) = a.mat_dims("matmul")?;
    let (k2, n) = b.mat_dims("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            let row = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * row[j];
            }
        }
    }
    Ok(out)
}

/// True when `small` can broadcast against `big` as a trailing-suffix shape.
fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Elementwise addition; the smaller operand may broadcast over leading axes.
pub fn add_broadcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if a.shape == b.shape {
        return a.zip(b, "add", |x, y| x + y);
    }
    let (big, small, swapped) = if suffix_of(&b.shape, &a.shape) {
        (a, b, false)
    } else if suffix_of(&a.shape, &b.shape) {
        (b, a, true)
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    let _ = swapped;
    let sn = small.numel().max(1);
    let mut out = big.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = *v + small.data[i % sn];
    }
    Ok(out)
}

/// Sum `grad` down to `shape` (reverse of suffix broadcasting).
pub fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>, TensorError> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    if !suffix_of(shape, grad.shape()) {
        return Err(TensorError::ShapeMismatch {
            op: "reduce_to_shape",
            lhs: grad.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let mut out = Tensor::zeros(shape);
    let sn = out.numel().max(1);
    for (i, &g) in grad.data().iter().enumerate() {
        out.data[i % sn] = out.data[i % sn] + g;
    }
    Ok(out)
}

/// Concatenate along the last axis; leading shapes must match exactly.
pub fn concat_last<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
    let first = parts.first().ok_or(TensorError::Domain {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let lead_shape = &first.shape[..first.shape.len().saturating_sub(1)];
    let lead: usize = lead_shape.iter().product();
    let mut total = 0usize;
    for p in parts {
        if p.shape.len() != first.shape.len()
            || p.shape[..p.shape.len() - 1] != *lead_shape
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += p.last_dim();
    }
    let mut shape = lead_shape.to_vec();
    shape.push(total);
    let mut data = Vec::with_capacity(lead * total);
    for r in 0..lead {
        for p in parts {
            let d = p.last_dim();
            data.extend_from_slice(&p.data[r * d..(r + 1) * d]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Contiguous range of the last axis.
pub fn slice_last<S: Scalar>(t: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>, TensorError> {
    let d = t.last_dim();
    if start + len > d {
        return Err(TensorError::Domain {
            op: "slice",
            detail: format!("range {}..{} out of last-axis extent {}", start, start + len, d),
        });
    }
    let lead = t.lead();
    let mut shape = t.shape[..t.shape.len() - 1].to_vec();
    shape.push(len);
    let mut data = Vec::with_capacity(lead * len);
    for r in 0..lead {
        data.extend_from_slice(&t.data[r * d + start..r * d + start + len]);
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::<f64>::eye(2);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_bias() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let y = add_broadcast(&x, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        let g = reduce_to_shape(&Tensor::full(&[2, 2], 1.0), &[2]).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_slice_round() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(slice_last(&c, 0, 1).unwrap(), a);
        assert_eq!(slice_last(&c, 1, 2).unwrap(), b);
    }
}
