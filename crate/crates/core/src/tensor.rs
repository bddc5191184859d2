//! Dense row-major `f64` tensors and the masked per-channel moments shared by
//! every batch-statistic normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// How to fill a freshly created tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

/// Dense tensor with row-major contiguous storage.
///
/// Activations use the `[N, C, L]` layout: batch, channel, flattened spatial
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor needs at least one dimension".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("extent {pos} of {shape:?} is zero")));
    }
    Ok(())
}

impl Tensor {
    /// Creates a tensor of the given shape. Random fills draw from `rng`, which
    /// must be provided for `Fill::Uniform` and `Fill::Normal`.
    pub fn create(shape: &[usize], fill: Fill, rng: Option<&mut Rng>) -> Result<Self> {
        check_extents(shape)?;
        let len = shape.iter().product();
        let data = match (fill, rng) {
            (Fill::Constant(v), _) => vec![v; len],
            (Fill::Uniform { low, high }, Some(rng)) => {
                (0..len).map(|_| rng.uniform(low, high)).collect()
            }
            (Fill::Normal { mean, std }, Some(rng)) => {
                (0..len).map(|_| rng.normal(mean, std)).collect()
            }
            (_, None) => return Err(Error::Config("random fill requires an rng".into())),
        };
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Constant tensor. Panics on a zero extent; use [`Tensor::create`] for
    /// checked construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::create(shape, Fill::Constant(value), None).expect("valid shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_extents(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `[N, C, L]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, l] => Ok((n, c, l)),
            _ => Err(Error::Shape(format!("expected [N, C, L], got {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as a matrix `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected [rows, cols], got {:?}", self.shape))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `Err(NonFinite)` naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Gathers samples along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Shape(format!("index {i} out of range for {:?}", self.shape)));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_vec(&shape, data)
    }

    /// Rearranges `[N, C, L]` activations into `[N*L, C]` per-position vectors.
    pub fn positions(&self) -> Result<Self> {
        let (n, c, l) = self.dims3()?;
        let mut out = vec![0.0; n * c * l];
        for s in 0..n {
            for ch in 0..c {
                let src = &self.data[(s * c + ch) * l..(s * c + ch + 1) * l];
                for (p, &v) in src.iter().enumerate() {
                    out[(s * l + p) * c + ch] = v;
                }
            }
        }
        Self::from_vec(&[n * l, c], out)
    }

    /// Inverse of [`Tensor::positions`].
    pub fn from_positions(pos: &Tensor, n: usize, l: usize) -> Result<Self> {
        let (rows, c) = pos.dims2()?;
        if rows != n * l {
            return Err(Error::Shape(format!("{rows} positions cannot form N={n}, L={l}")));
        }
        let mut out = vec![0.0; n * c * l];
        for s in 0..n {
            for p in 0..l {
                let src = pos.row(s * l + p);
                for (ch, &v) in src.iter().enumerate() {
                    out[(s * c + ch) * l + p] = v;
                }
            }
        }
        Self::from_vec(&[n, c, l], out)
    }
}

/// Per-channel moments over a subset of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    /// Number of selected activations per channel, `selected_samples * L`.
    pub count: usize,
}

/// Mean and biased variance per channel over every `(n, l)` with `mask[n]`.
pub fn masked_moments(x: &Tensor, mask: &[bool]) -> Result<Moments> {
    let (n, c, l) = x.dims3()?;
    if mask.len() != n {
        return Err(Error::Shape(format!("mask has {} entries for N={n}", mask.len())));
    }
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::EmptySelection);
    }
    let count = selected * l;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let rows = (0..n).filter(|&s| mask[s]).map(|s| &data[(s * c + ch) * l..(s * c + ch + 1) * l]);
        let total: f64 = rows.clone().flatten().sum();
        let mu = total / count as f64;
        let sq: f64 = rows.flatten().map(|v| (v - mu) * (v - mu)).sum();
        mean[ch] = mu;
        var[ch] = sq / count as f64;
    }
    Ok(Moments { mean, var, count })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_constant() {
        let t = Tensor::create(&[2, 3], Fill::Constant(0.0), None).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = Tensor::create(&[1], Fill::Constant(7.5), None).unwrap();
        assert_eq!(t.data(), &[7.5]);
    }

    #[test]
    fn create_normal_is_seeded() {
        let fill = Fill::Normal { mean: 0.0, std: 1.0 };
        let a = Tensor::create(&[4], fill, Some(&mut Rng::new(42))).unwrap();
        let b = Tensor::create(&[4], fill, Some(&mut Rng::new(42))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(
            Tensor::create(&[2, 0], Fill::Constant(1.0), None),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn random_fill_needs_rng() {
        let fill = Fill::Uniform { low: 0.0, high: 1.0 };
        assert!(Tensor::create(&[3], fill, None).is_err());
    }

    #[test]
    fn moments_single_sample() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![1.0, 3.0]).unwrap();
        let m = masked_moments(&x, &[true]).unwrap();
        assert_eq!(m.mean, vec![1.0, 3.0]);
        assert_eq!(m.var, vec![0.0, 0.0]);
        assert_eq!(m.count, 1);
    }

    #[test]
    fn moments_three_values() {
        let x = Tensor::from_vec(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let m = masked_moments(&x, &[true; 3]).unwrap();
        assert_eq!(m.mean, vec![2.0]);
        assert!((m.var[0] - 2.0 / 3.0).abs() < 1e-15);

        let m = masked_moments(&x, &[true, false, true]).unwrap();
        assert_eq!(m.mean, vec![2.0]);
        assert_eq!(m.var, vec![1.0]);
        assert_eq!(m.count, 2);
    }

    #[test]
    fn moments_reject_empty_mask() {
        let x = Tensor::zeros(&[2, 1, 1]);
        assert_eq!(masked_moments(&x, &[false, false]), Err(Error::EmptySelection));
        assert!(matches!(masked_moments(&x, &[true]), Err(Error::Shape(_))));
    }

    #[test]
    fn positions_round_trip() {
        let x = Tensor::from_vec(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let p = x.positions().unwrap();
        assert_eq!(p.shape(), &[4, 3]);
        // sample 0, position 1: channels 0..3 live at offsets 1, 3, 5
        assert_eq!(p.row(1), &[1.0, 3.0, 5.0]);
        assert_eq!(Tensor::from_positions(&p, 2, 2).unwrap(), x);
    }
}
