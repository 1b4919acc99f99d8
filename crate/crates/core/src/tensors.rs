//! Dense row-major tensors and the multiscale product-space state.
//!
//! Feature maps are laid out batch-major as `(batch, channels, height, width)`,
//! so the values belonging to one sample are a contiguous slice. Norms over a
//! [`MultiscaleState`] are the L2 norm of the concatenation of all branches,
//! taken per sample and then reduced across the batch.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::{Error, Result};

/// Floating-point element type (`f32` for training, `f64` for checks).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Convert an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for shapes built from validated configs.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn sample_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Extents of a 4-d feature map or kernel.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    pub fn scale_in_place(&mut self, a: T) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    /// `a * x + b * y`.
    pub fn lincomb(a: T, x: &Self, b: T, y: &Self) -> Result<Self> {
        x.same_shape(y)?;
        Ok(Self {
            shape: x.shape.clone(),
            data: x
                .data
                .iter()
                .zip(&y.data)
                .map(|(&u, &v)| a * u + b * v)
                .collect(),
        })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// How per-sample norms are aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Max,
    /// Norm of the whole batch treated as one vector.
    Total,
}

/// The point `z = [z₁, …, zₙ]` of the product space, one tensor per branch.
///
/// All branches share the leading batch extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleState<T> {
    branches: Vec<Tensor<T>>,
}

impl<T: Real> MultiscaleState<T> {
    pub fn new(branches: Vec<Tensor<T>>) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::shape("state needs at least one branch"))?;
        let b = first.batch();
        if let Some(bad) = branches.iter().find(|t| t.batch() != b) {
            return Err(Error::shape(format!(
                "branch batch {} differs from {b}",
                bad.batch()
            )));
        }
        Ok(Self { branches })
    }

    /// A single-branch state holding a flat `(batch, d)` vector.
    pub fn flat(batch: usize, values: Vec<T>) -> Result<Self> {
        let d = values.len() / batch.max(1);
        Self::new(vec![Tensor::new(vec![batch, d], values)?])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            branches: self.branches.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn branches(&self) -> &[Tensor<T>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.branches
    }

    pub fn into_branches(self) -> Vec<Tensor<T>> {
        self.branches
    }

    pub fn branch(&self, i: usize) -> &Tensor<T> {
        &self.branches[i]
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.branches[0].batch()
    }

    pub fn numel(&self) -> usize {
        self.branches.iter().map(Tensor::numel).sum()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.branches.len() != other.branches.len() {
            return Err(Error::shape(format!(
                "{} branches vs {}",
                self.branches.len(),
                other.branches.len()
            )));
        }
        for (a, b) in self.branches.iter().zip(&other.branches) {
            a.same_shape(b)?;
        }
        Ok(())
    }

    /// Checks the branch shapes against an expected list.
    pub fn check_shapes(&self, expected: &[Vec<usize>]) -> Result<()> {
        if self.branches.len() != expected.len()
            || self
                .branches
                .iter()
                .zip(expected)
                .any(|(t, e)| t.shape() != e.as_slice())
        {
            return Err(Error::shape(format!(
                "state shapes {:?} do not match configured {:?}",
                self.branches.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(),
                expected
            )));
        }
        Ok(())
    }

    pub fn sample_dots(&self, other: &Self) -> Result<Vec<T>> {
        self.same_shape(other)?;
        let mut out = vec![T::zero(); self.batch()];
        for (a, b) in self.branches.iter().zip(&other.branches) {
            for (s, o) in out.iter_mut().enumerate() {
                *o += dot(a.sample(s), b.sample(s));
            }
        }
        Ok(out)
    }

    /// Per-sample `sqrt(Σᵢ ‖zᵢ‖²)`.
    pub fn sample_norms(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch()];
        for t in &self.branches {
            for (s, o) in out.iter_mut().enumerate() {
                let x = t.sample(s);
                *o += dot(x, x);
            }
        }
        out.into_iter().map(Float::sqrt).collect()
    }

    pub fn norm_sq_total(&self) -> T {
        self.branches.iter().map(Tensor::norm_sq).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.branches.iter().all(Tensor::all_finite)
    }

    pub fn scale(&self, a: T) -> Self {
        Self {
            branches: self.branches.iter().map(|t| t.scale(a)).collect(),
        }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (s, o) in self.branches.iter_mut().zip(&other.branches) {
            s.add_scaled(a, o)?;
        }
        Ok(())
    }

    /// Concatenate every branch into one flat vector, sample by sample.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for s in 0..self.batch() {
            for t in &self.branches {
                out.extend_from_slice(t.sample(s));
            }
        }
        out
    }

    /// Inverse of [`MultiscaleState::to_flat`] using `self` as the shape template.
    pub fn from_flat_like(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::shape(format!(
                "flat vector of {} values for a state of {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut branches = self.zeros_like().branches;
        let mut k = 0;
        for s in 0..self.batch() {
            for t in branches.iter_mut() {
                let dst = t.sample_mut(s);
                dst.copy_from_slice(&flat[k..k + dst.len()]);
                k += dst.len();
            }
        }
        Ok(Self { branches })
    }
}

/// Product-space norm `sqrt(Σᵢ ‖zᵢ‖₂²)` aggregated over the batch.
pub fn state_norm<T: Real>(z: &MultiscaleState<T>, reduction: Reduction) -> T {
    match reduction {
        Reduction::Total => z.norm_sq_total().sqrt(),
        _ => reduce(&z.sample_norms(), reduction),
    }
}

pub(crate) fn reduce<T: Real>(values: &[T], reduction: Reduction) -> T {
    match reduction {
        Reduction::Mean => {
            values.iter().copied().sum::<T>() / T::lit(values.len().max(1) as f64)
        }
        Reduction::Max => values.iter().fold(T::zero(), |m, &v| m.max(v)),
        Reduction::Total => values.iter().map(|&v| v * v).sum::<T>().sqrt(),
    }
}

/// Branchwise `α·x + β·y`.
pub fn axpy_state<T: Real>(
    alpha: T,
    x: &MultiscaleState<T>,
    beta: T,
    y: &MultiscaleState<T>,
) -> Result<MultiscaleState<T>> {
    x.same_shape(y)?;
    let branches = x
        .branches
        .iter()
        .zip(&y.branches)
        .map(|(a, b)| Tensor::lincomb(alpha, a, beta, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiscaleState { branches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(MultiscaleState::new(vec![t(&[1, 1], &[1.0]), t(&[2, 1], &[1.0, 2.0])]).is_err());
    }

    #[test]
    fn zero_state_has_zero_norm() {
        let z = MultiscaleState::new(vec![t(&[1, 2], &[0.0, 0.0]), t(&[1, 1], &[0.0])]).unwrap();
        assert_eq!(state_norm(&z, Reduction::Mean), 0.0);
    }

    #[test]
    fn three_four_five() {
        let z = MultiscaleState::new(vec![t(&[1, 1], &[3.0]), t(&[1, 1], &[4.0])]).unwrap();
        for r in [Reduction::Mean, Reduction::Max, Reduction::Total] {
            assert_eq!(state_norm(&z, r), 5.0);
        }
    }

    #[test]
    fn matches_flattened_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[1, 5, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let flat: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let oracle = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z = MultiscaleState::new(vec![a, b]).unwrap();
        assert!((state_norm(&z, Reduction::Mean) - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn batch_reduction_is_mean_of_samples() {
        let z = MultiscaleState::new(vec![t(&[2, 1], &[3.0, 1.0]), t(&[2, 1], &[4.0, 0.0])]).unwrap();
        assert_eq!(z.sample_norms(), vec![5.0, 1.0]);
        assert_eq!(state_norm(&z, Reduction::Mean), 3.0);
        assert_eq!(state_norm(&z, Reduction::Max), 5.0);
        assert!((state_norm(&z, Reduction::Total) - 26f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn axpy_examples() {
        let x = MultiscaleState::new(vec![t(&[1, 2], &[1.0, -2.0]), t(&[1, 1], &[0.5])]).unwrap();
        let y = MultiscaleState::new(vec![t(&[1, 2], &[7.0, 3.0]), t(&[1, 1], &[9.0])]).unwrap();
        assert_eq!(axpy_state(1.0, &x, 0.0, &y).unwrap(), x);
        assert_eq!(axpy_state(0.5, &x, 0.5, &x).unwrap(), x);
        assert_eq!(axpy_state(1.0, &x, -1.0, &x).unwrap(), x.zeros_like());
        let bad = MultiscaleState::new(vec![t(&[1, 2], &[1.0, 1.0])]).unwrap();
        assert!(axpy_state(1.0, &x, 1.0, &bad).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let z = MultiscaleState::new(vec![t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), t(&[2, 1], &[5.0, 6.0])])
            .unwrap();
        let flat = z.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(z.from_flat_like(&flat).unwrap(), z);
    }

    fn random_state(rng: &mut ChaCha8Rng) -> MultiscaleState<f64> {
        MultiscaleState::new(vec![
            Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-3.0..3.0)),
            Tensor::from_fn(&[1, 3, 2, 2], |_| rng.gen_range(-3.0..3.0)),
        ])
        .unwrap()
    }

    #[test]
    fn norm_axioms_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = random_state(&mut rng);
            let y = random_state(&mut rng);
            let s: f64 = rng.gen_range(-5.0..5.0);
            let nx = state_norm(&x, Reduction::Mean);
            let ny = state_norm(&y, Reduction::Mean);
            let sum = state_norm(&axpy_state(1.0, &x, 1.0, &y).unwrap(), Reduction::Mean);
            assert!(sum <= (nx + ny) * (1.0 + 1e-6));
            let scaled = state_norm(&x.scale(s), Reduction::Mean);
            assert!((scaled - s.abs() * nx).abs() <= 1e-6 * s.abs() * nx + 1e-15);
            let sq: f64 = x.branches().iter().map(|b| b.norm_sq()).sum();
            assert!((nx * nx - sq).abs() <= 1e-12 * sq);
        }
    }

    proptest! {
        #[test]
        fn norm_is_zero_only_for_zero_state(v in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let z = MultiscaleState::new(vec![t(&[1, 4], &v[..4]), t(&[1, 2], &v[4..])]).unwrap();
            let n = state_norm(&z, Reduction::Mean);
            prop_assert!(n >= 0.0);
            prop_assert_eq!(n == 0.0, v.iter().all(|&x| x == 0.0));
        }
    }
}
