//! Minimal dense linear algebra, deterministic sampling, and quantile
//! utilities shared by the rest of the crate.
//!
//! Matrices are row-major `f64` throughout. Nothing here is tuned for large
//! problems; the target sizes are a few hundred rows by a few hundred
//! columns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major observation matrix (`rows` x `cols`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    /// Builds a matrix from a flat row-major buffer, rejecting shape
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DegenerateInput(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DegenerateInput(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "non-finite entry at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Zero matrix; shape must be non-empty.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::DegenerateInput("no rows given".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DegenerateInput("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// New matrix containing the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    /// New matrix containing the given columns, in order.
    pub fn select_cols(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.rows * indices.len());
        for r in 0..self.rows {
            let row = self.row(r);
            values.extend(indices.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: indices.len(),
            values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DataMatrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(p);
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `a (m x k) * b^T (n x k)` -- rows of both operands are contiguous dots.
pub fn matmul_abt(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.cols, b.cols, "matmul_abt shape mismatch");
    let (m, n) = (a.rows, b.rows);
    let mut out = DataMatrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate().take(n) {
            *o = dot(a_row, b.row(j));
        }
    }
    out
}

/// `a^T (k x m) * b (k x n)`, accumulated over the shared leading dimension.
pub fn matmul_atb(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.rows, b.rows, "matmul_atb shape mismatch");
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = DataMatrix::zeros(m, n);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate().take(m) {
            let out_row = out.row_mut(i);
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sample covariance with the `rows - 1` denominator; exactly symmetric.
pub fn covariance_matrix(z: &DataMatrix) -> Result<DataMatrix> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let d = z.cols();
    let means = z.col_means();
    let mut cov = DataMatrix::zeros(d, d);
    for r in 0..n {
        let row = z.row(r);
        for i in 0..d {
            let di = row[i] - means[i];
            for j in i..d {
                let v = cov.get(i, j) + di * (row[j] - means[j]);
                cov.set(i, j, v);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DataMatrix,
}

impl Cholesky {
    pub fn new(a: &DataMatrix) -> Result<Self> {
        let d = a.rows();
        if a.cols() != d {
            return Err(Error::DegenerateInput(format!(
                "matrix must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if !a.is_finite() {
            return Err(Error::IllConditioned { pivot: 0 });
        }
        let mut l = DataMatrix::zeros(d, d);
        for j in 0..d {
            let mut diag = a.get(j, j);
            for k in 0..j {
                let v = l.get(j, k);
                diag -= v * v;
            }
            if !(diag.is_finite() && diag > 0.0) {
                return Err(Error::IllConditioned { pivot: j });
            }
            let diag = diag.sqrt();
            l.set(j, j, diag);
            for i in (j + 1)..d {
                let mut v = a.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / diag);
            }
        }
        Ok(Self { l })
    }

    /// Solves `A x = b` via the stored factor.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.l.rows();
        assert_eq!(b.len(), d, "rhs length mismatch");
        // L y = b
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l.get(i, k) * y[k];
            }
            y[i] = v / self.l.get(i, i);
        }
        // L^T x = y
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut v = y[i];
            for k in (i + 1)..d {
                v -= self.l.get(k, i) * x[k];
            }
            x[i] = v / self.l.get(i, i);
        }
        x
    }

    /// Cheap condition estimate from the factor diagonal:
    /// `(max_j L_jj / min_j L_jj)^2`.
    pub fn condition_estimate(&self) -> f64 {
        let d = self.l.rows();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for j in 0..d {
            let v = self.l.get(j, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let ratio = hi / lo;
        ratio * ratio
    }
}

/// Solves a symmetric positive definite system by Cholesky factorization.
pub fn solve_spd(a: &DataMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(Cholesky::new(a)?.solve(b))
}

/// Linear-interpolation quantile of an unsorted sample (index
/// `h = (n - 1) * level` on the sorted values).
pub fn empirical_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("quantile of empty sample".into()));
    }
    if !(0.0..=1.0).contains(&level) || level.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "quantile level must be in [0, 1], got {level}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "quantile of sample with non-finite values".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        Ok(sorted[lo])
    } else {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    }
}

/// Distribution families available from [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleDist {
    StandardNormal,
    StudentT { df: u32 },
    Lognormal,
    Uniform01,
}

/// Deterministic, explicitly seeded random stream.
///
/// Backed by ChaCha8, a counter-based generator: the same seed yields the
/// same sequence on every platform, and `substream` derives independent
/// streams from one seed without coordination.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from the same seed; `tag` selects the
    /// stream. Tags must be unique per call site.
    pub fn substream(&self, tag: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag);
        Self {
            seed: self.seed,
            rng,
            spare_normal: None,
        }
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Standard normal draw via Box-Muller (pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Draws `count` iid values from the given family.
///
/// Student t is generated as `z / sqrt(chi2 / df)` with the chi-square
/// built from `df` squared normals; lognormal is `exp` of a standard
/// normal.
pub fn sample(dist: SampleDist, rng: &mut RngStream, count: usize) -> Result<Vec<f64>> {
    if let SampleDist::StudentT { df } = dist {
        if df < 1 {
            return Err(Error::InvalidConfig(format!(
                "student t requires df >= 1, got {df}"
            )));
        }
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = match dist {
            SampleDist::StandardNormal => rng.normal(),
            SampleDist::StudentT { df } => {
                let z = rng.normal();
                let chi2: f64 = (0..df)
                    .map(|_| {
                        let g = rng.normal();
                        g * g
                    })
                    .sum();
                z / (chi2 / df as f64).sqrt()
            }
            SampleDist::Lognormal => rng.normal().exp(),
            SampleDist::Uniform01 => rng.uniform(),
        };
        out.push(v);
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn covariance_two_scalar_rows() {
        let z = DataMatrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let cov = covariance_matrix(&z).unwrap();
        assert_abs_diff_eq!(cov.get(0, 0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_identical_rows_is_zero() {
        let z = DataMatrix::new(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let cov = covariance_matrix(&z).unwrap();
        assert!(cov.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let mut rng = RngStream::new(11);
        let values: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let z = DataMatrix::new(5, 3, values).unwrap();
        let cov = covariance_matrix(&z).unwrap();
        let means = z.col_means();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for r in 0..5 {
                    acc += (z.get(r, i) - means[i]) * (z.get(r, j) - means[j]);
                }
                assert_abs_diff_eq!(cov.get(i, j), acc / 4.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_rejects_single_row() {
        let z = DataMatrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            covariance_matrix(&z),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = DataMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = solve_spd(&a, &[3.0, -1.0, 0.5]).unwrap();
        assert_eq!(x, vec![3.0, -1.0, 0.5]);
    }

    #[test]
    fn solve_diagonal() {
        let a = DataMatrix::new(2, 2, vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let x = solve_spd(&a, &[8.0, 27.0]).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let mut rng = RngStream::new(5);
        // A = M^T M + I is SPD.
        let m_values: Vec<f64> = (0..36).map(|_| rng.normal()).collect();
        let m = DataMatrix::new(6, 6, m_values).unwrap();
        let mut a = matmul_atb(&m, &m);
        for i in 0..6 {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        let x_true: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..6).map(|i| dot(a.row(i), &x_true)).collect();
        let x = solve_spd(&a, &b).unwrap();
        for (xi, ti) in x.iter().zip(&x_true) {
            assert_abs_diff_eq!(xi, ti, epsilon = 1e-8);
        }
    }

    #[test]
    fn solve_reports_failing_pivot() {
        // Second pivot is negative after elimination.
        let a = DataMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match solve_spd(&a, &[1.0, 1.0]) {
            Err(Error::IllConditioned { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected ill-conditioned error, got {other:?}"),
        }
    }

    #[test]
    fn quantile_median_and_max() {
        assert_eq!(
            empirical_quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5).unwrap(),
            3.0
        );
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 4.0);
    }

    #[test]
    fn quantile_interpolates() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_abs_diff_eq!(
            empirical_quantile(&values, 0.95).unwrap(),
            94.05,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quantile_rejects_empty() {
        assert!(matches!(
            empirical_quantile(&[], 0.5),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn normal_sample_moments() {
        let mut rng = RngStream::new(42);
        let xs = sample(SampleDist::StandardNormal, &mut rng, 100_000).unwrap();
        assert!(mean(&xs).abs() < 0.02);
        let v = variance(&xs);
        assert!((0.95..=1.05).contains(&v), "variance {v}");
    }

    #[test]
    fn lognormal_is_positive() {
        let mut rng = RngStream::new(1);
        let xs = sample(SampleDist::Lognormal, &mut rng, 10_000).unwrap();
        assert!(xs.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn student_t5_variance_band() {
        let mut rng = RngStream::new(7);
        let xs = sample(SampleDist::StudentT { df: 5 }, &mut rng, 100_000).unwrap();
        let v = variance(&xs);
        assert!((1.4..=2.0).contains(&v), "variance {v}");
    }

    #[test]
    fn fixed_seed_streams_are_identical() {
        let mut a = RngStream::new(99);
        let mut b = RngStream::new(99);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn substreams_differ_from_base() {
        let base = RngStream::new(3);
        let mut s1 = base.substream(1);
        let mut s2 = base.substream(2);
        let a: Vec<u64> = (0..8).map(|_| s1.uniform().to_bits()).collect();
        let b: Vec<u64> = (0..8).map(|_| s2.uniform().to_bits()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn student_t_rejects_zero_df() {
        let mut rng = RngStream::new(0);
        assert!(sample(SampleDist::StudentT { df: 0 }, &mut rng, 1).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = DataMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DataMatrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);

        // a * b == a * (b^T)^T via matmul_abt on the transpose.
        let bt = DataMatrix::new(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(matmul_abt(&a, &bt).values(), c.values());

        // (a^T)^T * b via matmul_atb on the transpose.
        let at = DataMatrix::new(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(matmul_atb(&at, &b).values(), c.values());
    }
}
