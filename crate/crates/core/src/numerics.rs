//! Dense row-major matrices, seeded random streams, softmax and the
//! regularized cross-entropy objective shared by every other module.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `rows x cols` matrix of `f64` stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::invalid(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for s in 0..self.rows {
            let rhs = other.row(s);
            for (i, &a) in self.row(s).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "sub")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_vector",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity norm of the element-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut values = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: cols.len(),
            values,
        }
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        for b in blocks {
            if b.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "hconcat",
                    left: (rows, 0),
                    right: b.shape(),
                });
            }
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                values.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the largest entry of row `r`; ties go to the lowest index.
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax with max-shift stabilization.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise `log(softmax(row))`, computed without forming the probabilities.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let mut arg = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = i;
        }
    }
    let max = row[arg];
    // ln_1p keeps tiny tail mass that `1 + rest` would round away.
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    let tail = rest.ln_1p();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max) - tail;
    }
}

/// Weighted mean cross-entropy `(1/sum w) * sum_s w_s CE(softmax(H_s), Y_s)`.
///
/// `weights = None` means every row has weight one.
pub fn cross_entropy(h: &Matrix, y: &Matrix, weights: Option<&[f64]>) -> Result<f64> {
    if h.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: h.shape(),
            right: y.shape(),
        });
    }
    if let Some(w) = weights {
        if w.len() != h.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy weights",
                left: h.shape(),
                right: (w.len(), 1),
            });
        }
    }
    let mut logp = vec![0.0; h.cols()];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for r in 0..h.rows() {
        let w = weights.map_or(1.0, |w| w[r]);
        if w == 0.0 {
            continue;
        }
        log_softmax_row(h.row(r), &mut logp);
        total -= w * dot(y.row(r), &logp);
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return Err(Error::EmptyInput(
            "cross_entropy: all rows have zero weight",
        ));
    }
    Ok(total / weight_sum)
}

/// `(1/n) sum_s CE(softmax(H_s), Y_s) + (lambda/2)|theta|^2 + b . theta`.
///
/// An empty `perturbation` is read as the zero vector.
pub fn cross_entropy_l2(
    h: &Matrix,
    y: &Matrix,
    theta: &[f64],
    lambda: f64,
    perturbation: &[f64],
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if !perturbation.is_empty() && perturbation.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_l2 perturbation",
            left: (theta.len(), 1),
            right: (perturbation.len(), 1),
        });
    }
    let ce = cross_entropy(h, y, None)?;
    let reg = 0.5 * lambda * dot(theta, theta);
    let lin = if perturbation.is_empty() {
        0.0
    } else {
        dot(perturbation, theta)
    };
    Ok(ce + reg + lin)
}

/// Purpose-specific stream ids; one independent ChaCha stream per party and purpose.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const REQUEST: u64 = 4;

    pub fn init(party: usize) -> u64 {
        1_000 + party as u64
    }

    pub fn noise(party: usize) -> u64 {
        2_000 + party as u64
    }
}

/// A reproducible random stream identified by `(master_seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RandomSource {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    /// Positions the stream at an absolute 32-bit word index.
    pub fn at(master_seed: u64, stream_id: u64, word_index: u128) -> Self {
        let mut src = Self::new(master_seed, stream_id);
        src.rng.set_word_pos(word_index);
        src
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// `dim` i.i.d. draws from `N(0, sigma^2)`.
pub fn gaussian_vector(source: &mut RandomSource, dim: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; dim]);
    }
    Ok((0..dim).map(|_| sigma * source.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let p = softmax_rows(&Matrix::from_rows(&[vec![-1.0, 4.0]]).unwrap());
        let e5 = 5f64.exp();
        assert!((p.get(0, 0) - 1.0 / (1.0 + e5)).abs() < 1e-15);
        assert!((p.get(0, 1) - e5 / (1.0 + e5)).abs() < 1e-15);

        let p = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let h = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let ce = cross_entropy_l2(&h, &y, &[], 0.0, &[]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);

        let with_reg = cross_entropy_l2(&h, &y, &[3.0, 4.0], 1.0, &[]).unwrap();
        assert!((with_reg - (2f64.ln() + 12.5)).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for conf in [1.0, 5.0, 20.0, 40.0] {
            let h = Matrix::from_rows(&[vec![conf, -conf]]).unwrap();
            let ce = cross_entropy_l2(&h, &y, &[], 0.0, &[]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn cross_entropy_rejects_shape_mismatch() {
        let h = Matrix::zeros(2, 2);
        let y = Matrix::zeros(2, 3);
        let err = cross_entropy_l2(&h, &y, &[], 0.0, &[]).unwrap_err();
        assert!(err.to_string().contains("2x2") && err.to_string().contains("2x3"));
    }

    #[test]
    fn gaussian_vector_contract() {
        let mut src = RandomSource::new(7, 11);
        assert_eq!(gaussian_vector(&mut src, 4, 0.0).unwrap(), vec![0.0; 4]);
        assert!(gaussian_vector(&mut src, 4, -1.0).is_err());

        let a = gaussian_vector(&mut RandomSource::at(7, 11, 64), 16, 1.0).unwrap();
        let b = gaussian_vector(&mut RandomSource::at(7, 11, 64), 16, 1.0).unwrap();
        assert_eq!(a, b);
        let c = gaussian_vector(&mut RandomSource::at(7, 12, 64), 16, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_vector_empirical_std() {
        let mut src = RandomSource::new(42, 5);
        let xs = gaussian_vector(&mut src, 100_000, 1.0).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.99..=1.01).contains(&std), "std = {std}");
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.values(), &[-1.0, 7.5, -1.0, 18.0]);
        let at = Matrix::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), ab);
        let bt = Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.5, 2.0, 1.0]]).unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }
}
