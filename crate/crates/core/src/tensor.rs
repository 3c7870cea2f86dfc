//! Dense row-major tensors of `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A dense tensor. The first dimension indexes "rows": out-filters for a
/// convolution weight, out-units for a dense weight, samples for a batch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("shape must have at least one dimension".into()));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dimension {d} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements in one slice along the leading dimension.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copy of row `i` as a tensor of shape `shape[1..]` (or `[n]` for rank 1).
    pub fn row_tensor(&self, i: usize) -> Tensor {
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor::from_parts_unchecked(shape, self.row(i).to_vec())
    }

    /// Returns a copy with row `i` overwritten. Panics if lengths differ.
    pub fn with_row(&self, i: usize, values: &[f64]) -> Tensor {
        let mut out = self.clone();
        out.row_mut(i).copy_from_slice(values);
        out
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The coefficient pair `(w_a, w_b)` used by [`linear_blend`].
///
/// For `alpha >= 0.5` this is exactly `(alpha, 1 - alpha)`. Below 0.5, `1 - alpha`
/// may round, so `w_a` is recomputed as `1 - w_b`; this keeps
/// `blend(a, b, alpha) == blend(b, a, 1 - alpha)` bit for bit.
pub fn blend_weights(alpha: f64) -> (f64, f64) {
    if alpha >= 0.5 {
        (alpha, 1.0 - alpha)
    } else {
        let wb = 1.0 - alpha;
        (1.0 - wb, wb)
    }
}

/// Elementwise `alpha * a + (1 - alpha) * b` for `alpha` in the open unit interval.
pub fn linear_blend(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    a.same_shape(b)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("blend coefficient {alpha} not in (0, 1)")));
    }
    let (wa, wb) = blend_weights(alpha);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| wa * x + wb * y)
        .collect();
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), data))
}

/// Blend applied to a pair of row slices in place of `dst`.
pub(crate) fn blend_slice(dst: &mut [f64], peer: &[f64], alpha: f64) {
    let (wa, wb) = blend_weights(alpha);
    for (x, y) in dst.iter_mut().zip(peer) {
        *x = wa * *x + wb * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![2], vec![1.0]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let x = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(x.rows(), 2);
        assert_eq!(x.row(1), &[3., 4., 5.]);
        assert_eq!(x.row_tensor(0).shape(), &[3]);
    }

    #[test]
    fn blend_examples() {
        let r = linear_blend(&t(&[1], &[2.0]), &t(&[1], &[4.0]), 0.5).unwrap();
        assert_eq!(r.data(), &[3.0]);
        let r = linear_blend(&t(&[2], &[1.0, 0.0]), &t(&[2], &[0.0, 1.0]), 0.75).unwrap();
        assert_eq!(r.data(), &[0.75, 0.25]);
        let a = t(&[3], &[1.5, -2.0, 7.25]);
        assert!(linear_blend(&a, &a, 0.3).unwrap().bit_eq(&a));
    }

    #[test]
    fn blend_errors() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[1.0, 2.0]);
        assert!(matches!(
            linear_blend(&a, &b, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
        for alpha in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(linear_blend(&a, &a, alpha), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn blend_upper_half_is_literal_formula() {
        let a = t(&[3], &[0.1, -3.3, 9.0]);
        let b = t(&[3], &[2.2, 0.7, -1.0]);
        for alpha in [0.5, 0.6, 0.892699, 0.999] {
            let r = linear_blend(&a, &b, alpha).unwrap();
            for i in 0..3 {
                let want = alpha * a.data()[i] + (1.0 - alpha) * b.data()[i];
                assert_eq!(r.data()[i].to_bits(), want.to_bits());
            }
        }
    }

    fn shaped_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
                .prop_map(move |(x, y)| {
                    (
                        Tensor::new(shape.clone(), x).unwrap(),
                        Tensor::new(shape.clone(), y).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn blend_is_symmetric_bitwise((a, b) in shaped_pair(), alpha in 0.0001f64..0.9999) {
            let l = linear_blend(&a, &b, alpha).unwrap();
            let r = linear_blend(&b, &a, 1.0 - alpha).unwrap();
            prop_assert!(l.bit_eq(&r));
            prop_assert_eq!(l.shape(), a.shape());
        }
    }
}
