//! Dense row-major `f64` matrices and the handful of kernels the trainable
//! path needs: products, row softmax, SiLU, RMS norm and masked
//! cross-entropy, each with the gradient rule used by backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside the RMS norm square root.
pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn from N(0, scale²).
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the column range `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn set_columns(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn check_same(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same(op, other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b`, the usual shape of a weight gradient.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the usual shape of an input gradient.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Backprop through a row softmax given its output `probs`:
/// `dx_j = p_j (dy_j − Σ_i p_i dy_i)`.
pub fn softmax_backward_row(probs: &[f64], upstream: &[f64], out: &mut [f64]) {
    let inner = dot(probs, upstream);
    for ((o, &p), &u) in out.iter_mut().zip(probs).zip(upstream) {
        *o = p * (u - inner);
    }
}

/// log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx [x σ(x)] = σ(x) (1 + x (1 − σ(x)))
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(m: &Matrix) -> Matrix {
    m.map(silu_scalar)
}

fn check_gain(op: &'static str, x: &Matrix, gain: &Matrix) -> Result<()> {
    if gain.rows != 1 || gain.cols != x.cols {
        return Err(Error::shape(
            op,
            format!("gain {:?} for input {:?}", gain.shape(), x.shape()),
        ));
    }
    Ok(())
}

pub fn rmsnorm(x: &Matrix, gain: &Matrix) -> Result<Matrix> {
    check_gain("rmsnorm", x, gain)?;
    let mut out = x.clone();
    let g = gain.row(0);
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMSNORM_EPS).sqrt();
        for (v, &gv) in row.iter_mut().zip(g) {
            *v *= inv * gv;
        }
    }
    Ok(out)
}

/// Input gradient of [`rmsnorm`]. With `r = √(mean(x²)+ε)`:
/// `dx_j = g_j dy_j / r − x_j Σ_i g_i dy_i x_i / (n r³)`.
pub fn rmsnorm_backward(x: &Matrix, gain: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    check_gain("rmsnorm_backward", x, gain)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "rmsnorm_backward",
            format!("upstream {:?} for input {:?}", upstream.shape(), x.shape()),
        ));
    }
    let n = x.cols as f64;
    let g = gain.row(0);
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let xr = x.row(i);
        let dy = upstream.row(i);
        let r = (xr.iter().map(|v| v * v).sum::<f64>() / n + RMSNORM_EPS).sqrt();
        let proj: f64 = xr.iter().zip(g).zip(dy).map(|((x, g), d)| x * g * d).sum();
        let coef = proj / (n * r * r * r);
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * dy[j] / r - xr[j] * coef;
        }
    }
    Ok(dx)
}

/// Masked mean cross-entropy and its gradient with respect to `logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows || mask.len() != logits.rows {
        return Err(Error::shape(
            "cross_entropy",
            format!(
                "{} logit rows, {} targets, {} mask entries",
                logits.rows,
                targets.len(),
                mask.len()
            ),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (t, (&target, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if target >= logits.cols {
            return Err(Error::Input(format!(
                "target {target} outside vocabulary of {}",
                logits.cols
            )));
        }
        let lp = log_softmax(logits.row(t));
        loss -= lp[target];
        for (g, l) in grad.row_mut(t).iter_mut().zip(&lp) {
            *g = l.exp() * inv;
        }
        grad[(t, target)] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Deterministic random stream (ChaCha8) keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let r = matmul(&Matrix::from_rows(&[&[1.0, 0.0]]), &m).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 2.0]);
        let r = matmul(&Matrix::from_rows(&[&[0.5, -1.0]]), &m).unwrap();
        assert_eq!(r.as_slice(), &[-2.5, -3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(3);
        let a = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let c = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &b).unwrap()) < 1e-14);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[&[0.0; 4]]));
        assert!(s.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // exp-normalize by hand
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax_rows(&Matrix::from_rows(&[&[1.0, 2.0, 3.0]]));
        for (got, want) in s.as_slice().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
        for (got, ei) in s.as_slice().iter().zip(&e) {
            assert!((got - ei / z).abs() < 1e-15);
        }

        let s = softmax_rows(&Matrix::from_rows(&[&[1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15 && s[(0, 1)] < 1e-300);
    }

    #[test]
    fn silu_examples() {
        let y = silu(&Matrix::from_rows(&[&[0.0, 1.0, -20.0]]));
        assert_eq!(y[(0, 0)], 0.0);
        assert!((y[(0, 1)] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((y[(0, 1)] - 0.73106).abs() < 1e-5);
        assert!(y[(0, 2)].abs() < 1e-7);
    }

    #[test]
    fn silu_grad_matches_finite_differences() {
        for x in [-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 7.0] {
            let fd = central_diff(silu_scalar, x, 1e-5);
            assert!(rel_err(silu_grad_scalar(x), fd) < 1e-6, "x={x}");
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = Matrix::filled(1, 5, 1.0);
        let y = rmsnorm(&ones, &ones).unwrap();
        assert!(y.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-6));

        let zero = Matrix::zeros(1, 5);
        assert_eq!(rmsnorm(&zero, &ones).unwrap(), zero);

        let y = rmsnorm(&Matrix::from_rows(&[&[3.0, 4.0]]), &Matrix::filled(1, 2, 1.0)).unwrap();
        let r = (12.5f64 + 1e-6).sqrt();
        assert!((y[(0, 0)] - 3.0 / r).abs() < 1e-15);
        assert!((y[(0, 0)] - 0.8485).abs() < 1e-4 && (y[(0, 1)] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rmsnorm_gain_shape_checked() {
        assert!(rmsnorm(&Matrix::zeros(2, 3), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let gain = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let w = Matrix::random_normal(3, 5, 1.0, &mut rng);
        // scalar objective: <w, rmsnorm(x)>
        let objective = |x: &Matrix| dot(rmsnorm(x, &gain).unwrap().as_slice(), w.as_slice());
        let dx = rmsnorm_backward(&x, &gain, &w).unwrap();
        for idx in 0..x.as_slice().len() {
            let f = |v: f64| {
                let mut xp = x.clone();
                xp.as_mut_slice()[idx] = v;
                objective(&xp)
            };
            let fd = central_diff(f, x.as_slice()[idx], 1e-5);
            assert!(rel_err(dx.as_slice()[idx], fd) < 1e-6, "idx {idx}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7;
        let (loss, _) = cross_entropy(&Matrix::zeros(1, v), &[3], &[true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);

        let mut peaked = Matrix::zeros(1, v);
        peaked[(0, 2)] = 1000.0;
        let (loss, _) = cross_entropy(&peaked, &[2], &[true]).unwrap();
        assert!(loss.abs() < 1e-12);

        let logits = Matrix::from_rows(&[&[0.0, 1.0]]);
        let (loss, grad) = cross_entropy(&logits, &[0], &[true]).unwrap();
        // -log(e^0 / (e^0 + e^1)) = ln(1 + e)
        let want = (1.0 + 1f64.exp()).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 1.3133).abs() < 1e-4);
        for j in 0..2 {
            let f = |v: f64| {
                let mut l = logits.clone();
                l[(0, j)] = v;
                cross_entropy(&l, &[0], &[true]).unwrap().0
            };
            let fd = central_diff(f, logits[(0, j)], 1e-5);
            assert!(rel_err(grad[(0, j)], fd) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_masking() {
        assert!(matches!(
            cross_entropy(&Matrix::zeros(2, 3), &[0, 1], &[false, false]),
            Err(Error::EmptyLossSupport)
        ));
        let mut rng = SeededRng::new(5);
        let logits = Matrix::random_normal(4, 6, 2.0, &mut rng);
        let targets = [1, 5, 0, 2];
        let mask = [true, false, true, false];
        let (_, grad) = cross_entropy(&logits, &targets, &mask).unwrap();
        assert!(grad.row(1).iter().chain(grad.row(3)).all(|&g| g == 0.0));
        for idx in 0..logits.as_slice().len() {
            let f = |v: f64| {
                let mut l = logits.clone();
                l.as_mut_slice()[idx] = v;
                cross_entropy(&l, &targets, &mask).unwrap().0
            };
            let fd = central_diff(f, logits.as_slice()[idx], 1e-5);
            let g = grad.as_slice()[idx];
            assert!((g - fd).abs() <= 1e-6 * g.abs().max(fd.abs()).max(1e-6), "idx {idx}");
        }
    }

    #[test]
    fn seeded_rng_reproducible() {
        let a: Vec<f64> = {
            let mut r = SeededRng::new(9);
            (0..10).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = SeededRng::new(9);
            (0..10).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);
        let mut r = SeededRng::new(10);
        assert_ne!(a[0], r.normal());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let m = Matrix::from_vec(1, row.len(), row).unwrap();
            let s = softmax_rows(&m);
            let total: f64 = s.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -500.0f64..500.0) {
            let m = Matrix::from_vec(1, row.len(), row).unwrap();
            let shifted = m.map(|v| v + c);
            prop_assert!(softmax_rows(&m).max_abs_diff(&softmax_rows(&shifted)) < 1e-12);
        }

        #[test]
        fn softmax_backward_matches_finite_differences(
            row in prop::collection::vec(-3.0f64..3.0, 2..6),
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed);
            let w: Vec<f64> = (0..row.len()).map(|_| rng.normal()).collect();
            let obj = |r: &[f64]| {
                let mut p = r.to_vec();
                softmax_in_place(&mut p);
                dot(&p, &w)
            };
            let mut p = row.clone();
            softmax_in_place(&mut p);
            let mut g = vec![0.0; row.len()];
            softmax_backward_row(&p, &w, &mut g);
            for j in 0..row.len() {
                let f = |v: f64| { let mut r = row.clone(); r[j] = v; obj(&r) };
                let fd = central_diff(f, row[j], 1e-5);
                prop_assert!((g[j] - fd).abs() <= 1e-6 * g[j].abs().max(fd.abs()).max(1e-4));
            }
        }
    }
}
