//! Dense linear algebra, stable softmax pieces and a finite-difference
//! gradient oracle.
//!
//! Everything is `f64`. Vectors and matrices refuse non-finite entries at
//! construction, so a NaN surfaces where it was produced rather than three
//! modules downstream.

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("vector has no entries"));
        }
        check_finite(&data)?;
        Ok(DenseVector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        DenseVector::new(data)
    }
}

impl TryFrom<&[f64]> for DenseVector {
    type Error = Error;

    fn try_from(data: &[f64]) -> Result<Self> {
        DenseVector::new(data.to_vec())
    }
}

/// Row-major matrix; batches keep one instance per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix must have at least one row and column"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or(Error::Empty("matrix needs at least one row"))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        DenseMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.iter_rows()) {
            *o = dot(row, x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.iter_rows()) {
            axpy(yi, row, out);
        }
    }

    /// `self += y · xᵀ`
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(cols)) {
            axpy(yi, x, row);
        }
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("entry {i} is {}", data[i]))),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    same_dim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPSILON || nb <= NORM_EPSILON {
        return Err(Error::ZeroNorm { norm: na.min(nb) });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_sim(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn normalize_slice(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n <= NORM_EPSILON {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn l2_normalize(a: &DenseVector) -> Result<DenseVector> {
    normalize_slice(a.as_slice()).map(DenseVector)
}

pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty list"));
    }
    let (m, rest) = max_and_rest(xs)?;
    Ok(xs[m] + rest.ln_1p())
}

/// Index of the maximum and `Σ_{j≠m} exp(x_j − x_m)`. Splitting out the
/// maximum keeps `ln_1p` accurate when one score dominates.
fn max_and_rest(xs: &[f64]) -> Result<(usize, f64)> {
    let m = xs
        .iter()
        .enumerate()
        .fold(0, |best, (j, x)| if *x > xs[best] { j } else { best });
    let max = xs[m];
    if !max.is_finite() || xs.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite(format!("softmax input contains {max}")));
    }
    let rest = xs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != m)
        .map(|(_, x)| (x - max).exp())
        .sum();
    Ok((m, rest))
}

/// `-log softmax(scores)[target]`, clamped at zero against rounding.
pub fn softmax_nll(scores: &[f64], target: usize) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: scores.len(),
        });
    }
    let (m, rest) = max_and_rest(scores)?;
    Ok(((scores[m] - scores[target]) + rest.ln_1p()).max(0.0))
}

/// Softmax probabilities of finite `scores` written into `out`.
pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_grad<F>(mut f: F, point: &DenseVector, step: f64) -> Result<DenseVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut x = point.as_slice().to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let up = f(&x);
        x[k] = orig - step;
        let down = f(&x);
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value {} / {} at coordinate {k}",
                up, down
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    DenseVector::new(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    // Independent of `cosine_slices`: no clamping, no shared helpers.
    fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&v(&[1., 0.]), &v(&[1., 0.])).unwrap(), 1.0);
        assert_eq!(cosine_sim(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        let c = cosine_sim(&v(&[1., 1.]), &v(&[1., 0.])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((c - naive_cosine(&[1., 1.], &[1., 0.])).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&v(&[1., 0.]), &v(&[1., 0., 0.])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_sim(&v(&[0., 0.]), &v(&[1., 0.])),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&v(&[3., 4.])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&v(&[5., 0.])).unwrap().as_slice(), &[1., 0.]);
        assert!(matches!(
            l2_normalize(&v(&[0., 0.])),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0., 0.]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000., 1000.]).unwrap() - (1000. + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[-3.5]).unwrap(), -3.5);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn nll_examples() {
        for n in 1..6 {
            let scores = vec![0.7; n];
            for t in 0..n {
                assert!((softmax_nll(&scores, t).unwrap() - (n as f64).ln()).abs() < 1e-14);
            }
        }
        let expected = (-20f64).exp().ln_1p();
        let got = softmax_nll(&[20., 0.], 0).unwrap();
        assert!((got - expected).abs() < 1e-17);
        assert!((got - 2.061e-9).abs() < 1e-12);
        assert_eq!(softmax_nll(&[4.2], 0).unwrap(), 0.0);
        assert!(matches!(
            softmax_nll(&[1., 2.], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &v(&[3.0]), DEFAULT_FD_STEP).unwrap();
        assert!((g.as_slice()[0] - 6.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 2.5, &v(&[1., -2., 3.]), DEFAULT_FD_STEP).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        let b = [0.0, 1.0];
        let g = finite_diff_grad(|a| naive_cosine(a, &b), &v(&[1., 0.]), DEFAULT_FD_STEP).unwrap();
        assert!(g.as_slice()[0].abs() < 1e-9);
        assert!((g.as_slice()[1] - 1.0).abs() < 1e-9);

        assert!(finite_diff_grad(|x| x[0], &v(&[1.0]), 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|x| 1.0 / (x[0] - 1e-5), &v(&[0.0]), 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matrix_products() {
        let m = DenseMatrix::from_rows(&[[1., 2., 3.], [4., 5., 6.]]).unwrap();
        let mut out = [0.0; 2];
        m.matvec_into(&[1., 0., -1.], &mut out);
        assert_eq!(out, [-2., -2.]);
        let mut back = [0.0; 3];
        m.matvec_t_acc(&[1., 1.], &mut back);
        assert_eq!(back, [5., 7., 9.]);
        let mut z = DenseMatrix::zeros(2, 3);
        z.add_outer(&[1., 2.], &[1., 0., 1.]);
        assert_eq!(z.as_slice(), &[1., 0., 1., 2., 0., 2.]);
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(a in nonzero_vec(7)) {
            let a = DenseVector::new(a).unwrap();
            prop_assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_symmetric(a in nonzero_vec(5), b in nonzero_vec(5)) {
            prop_assert_eq!(cosine_slices(&a, &b).unwrap(), cosine_slices(&b, &a).unwrap());
        }

        #[test]
        fn normalize_unit_and_idempotent(a in nonzero_vec(6)) {
            let n = l2_normalize(&DenseVector::new(a).unwrap()).unwrap();
            prop_assert!((n.norm() - 1.0).abs() < 1e-12);
            let nn = l2_normalize(&n).unwrap();
            for (x, y) in n.as_slice().iter().zip(nn.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&xs).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn nll_non_negative(xs in prop::collection::vec(-100.0f64..100.0, 1..20), t in 0usize..20) {
            let t = t % xs.len();
            prop_assert!(softmax_nll(&xs, t).unwrap() >= 0.0);
        }

        #[test]
        fn finite_diff_matches_analytic(a in prop::collection::vec(-2.0f64..2.0, 4)) {
            // f(x) = Σ sin(x_k) x_k² with gradient cos(x)x² + 2x sin(x)
            let f = |x: &[f64]| x.iter().map(|v| v.sin() * v * v).sum::<f64>();
            let g = finite_diff_grad(f, &DenseVector::new(a.clone()).unwrap(), DEFAULT_FD_STEP).unwrap();
            for (k, &x) in a.iter().enumerate() {
                let analytic = x.cos() * x * x + 2.0 * x * x.sin();
                let rel = (g.as_slice()[k] - analytic).abs() / analytic.abs().max(1e-3);
                prop_assert!(rel < 1e-4, "coordinate {} rel err {}", k, rel);
            }
        }
    }
}
