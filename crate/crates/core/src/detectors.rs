//! Outlier scorers over the relevant latent matrix, quantile
//! thresholding, consensus aggregation, and the contamination cap.
//!
//! Every detector is written as fit-then-score so the pipeline can refit
//! on the retained inliers and score all observations. The single-matrix
//! entry points (`knn_scores`, `lof_scores`, ...) fit and score the same
//! matrix with self-exclusion where the detector calls for it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    covariance_matrix, empirical_quantile, squared_distance, Cholesky, DataMatrix, RngStream,
};

/// Detector families available to the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Knn,
    Lof,
    Iforest,
    Ecod,
    Hbos,
    Kde,
    T2Latent,
    Boxplot,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Knn => "knn",
            DetectorKind::Lof => "lof",
            DetectorKind::Iforest => "iforest",
            DetectorKind::Ecod => "ecod",
            DetectorKind::Hbos => "hbos",
            DetectorKind::Kde => "kde",
            DetectorKind::T2Latent => "t2_latent",
            DetectorKind::Boxplot => "boxplot",
        }
    }
}

/// How per-detector flags combine into one ensemble flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusRule {
    Any,
    All,
    Majority,
}

/// Ensemble configuration. `None` for `iforest_subsample` and `hbos_bins`
/// means the size-dependent convention (`min(256, n)` and
/// `ceil(sqrt(n))`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub detectors: Vec<DetectorKind>,
    pub rule: ConsensusRule,
    pub per_detector_alpha: f64,
    pub contamination_cap: f64,
    pub knn_k: usize,
    pub lof_k: usize,
    pub iforest_trees: usize,
    pub iforest_subsample: Option<usize>,
    pub hbos_bins: Option<usize>,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            detectors: vec![
                DetectorKind::Knn,
                DetectorKind::Lof,
                DetectorKind::Iforest,
                DetectorKind::Ecod,
                DetectorKind::Hbos,
                DetectorKind::Kde,
                DetectorKind::T2Latent,
            ],
            rule: ConsensusRule::Any,
            per_detector_alpha: 0.05,
            contamination_cap: 0.10,
            knn_k: 5,
            lof_k: 20,
            iforest_trees: 100,
            iforest_subsample: None,
            hbos_bins: None,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(Error::InvalidConfig("empty detector list".into()));
        }
        if !(self.per_detector_alpha > 0.0 && self.per_detector_alpha < 1.0) {
            return Err(Error::InvalidConfig(
                "per_detector_alpha must lie in (0, 1)".into(),
            ));
        }
        if !(self.contamination_cap > 0.0 && self.contamination_cap <= 1.0) {
            return Err(Error::InvalidConfig(
                "contamination_cap must lie in (0, 1]".into(),
            ));
        }
        if self.knn_k < 1 || self.lof_k < 1 || self.iforest_trees < 1 {
            return Err(Error::InvalidConfig(
                "knn_k, lof_k, iforest_trees must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Scores (higher = more anomalous) and flags for one detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorScores {
    pub detector_id: String,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
}

impl DetectorScores {
    fn unflagged(kind: DetectorKind, scores: Vec<f64>) -> Self {
        let n = scores.len();
        Self {
            detector_id: kind.name().to_string(),
            scores,
            flags: vec![false; n],
        }
    }
}

/// Identity mapping for scoring a matrix against itself.
pub fn identity_self_map(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}

// ---------------------------------------------------------------------
// k-nearest-neighbor distance
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct KnnFit {
    fit: DataMatrix,
    k: usize,
}

impl KnnFit {
    fn new(fit: DataMatrix, k: usize) -> Result<Self> {
        if fit.rows() <= k {
            return Err(Error::InvalidConfig(format!(
                "knn needs more than k = {k} points, got {}",
                fit.rows()
            )));
        }
        Ok(Self { fit, k })
    }

    fn score_one(&self, point: &[f64], self_row: Option<usize>) -> f64 {
        let mut dists: Vec<f64> = (0..self.fit.rows())
            .filter(|&j| Some(j) != self_row)
            .map(|j| squared_distance(point, self.fit.row(j)))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        dists[self.k - 1].sqrt()
    }
}

/// Distance to the k-th nearest neighbor (self excluded), brute force.
pub fn knn_scores(z: &DataMatrix, k: usize) -> Result<DetectorScores> {
    let fitted = KnnFit::new(z.clone(), k)?;
    let scores = (0..z.rows())
        .map(|i| fitted.score_one(z.row(i), Some(i)))
        .collect();
    Ok(DetectorScores::unflagged(DetectorKind::Knn, scores))
}

// ---------------------------------------------------------------------
// Local outlier factor
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct LofFit {
    fit: DataMatrix,
    k: usize,
    /// k-distance of each fit point within the fit set.
    kdist: Vec<f64>,
    /// Local reachability density of each fit point.
    lrd: Vec<f64>,
}

/// Neighborhood of `point` in `fit`: all rows within the k-th smallest
/// distance (ties included), excluding `self_row`. Returns (indices,
/// distances).
fn knn_neighborhood(
    fit: &DataMatrix,
    point: &[f64],
    k: usize,
    self_row: Option<usize>,
) -> (Vec<usize>, Vec<f64>) {
    let mut pairs: Vec<(f64, usize)> = (0..fit.rows())
        .filter(|&j| Some(j) != self_row)
        .map(|j| (squared_distance(point, fit.row(j)).sqrt(), j))
        .collect();
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let kdist = pairs[k - 1].0;
    let mut idx = Vec::new();
    let mut dist = Vec::new();
    for (d, j) in pairs {
        if d > kdist {
            break;
        }
        idx.push(j);
        dist.push(d);
    }
    (idx, dist)
}

impl LofFit {
    fn new(fit: DataMatrix, k: usize) -> Result<Self> {
        if fit.rows() <= k {
            return Err(Error::InvalidConfig(format!(
                "lof needs more than k = {k} points, got {}",
                fit.rows()
            )));
        }
        let n = fit.rows();
        let mut kdist = vec![0.0; n];
        let mut neighborhoods = Vec::with_capacity(n);
        for i in 0..n {
            let (idx, dist) = knn_neighborhood(&fit, fit.row(i), k, Some(i));
            kdist[i] = dist[k - 1];
            neighborhoods.push((idx, dist));
        }
        let mut lrd = vec![0.0; n];
        for (i, (idx, dist)) in neighborhoods.iter().enumerate() {
            let reach_sum: f64 = idx
                .iter()
                .zip(dist)
                .map(|(&j, &d)| d.max(kdist[j]))
                .sum();
            lrd[i] = idx.len() as f64 / reach_sum.max(f64::MIN_POSITIVE);
        }
        Ok(Self { fit, k, kdist, lrd })
    }

    fn score_one(&self, point: &[f64], self_row: Option<usize>) -> f64 {
        let (idx, dist) = knn_neighborhood(&self.fit, point, self.k, self_row);
        let reach_sum: f64 = idx
            .iter()
            .zip(&dist)
            .map(|(&j, &d)| d.max(self.kdist[j]))
            .sum();
        let lrd_point = idx.len() as f64 / reach_sum.max(f64::MIN_POSITIVE);
        let neighbor_lrd_mean: f64 =
            idx.iter().map(|&j| self.lrd[j]).sum::<f64>() / idx.len() as f64;
        neighbor_lrd_mean / lrd_point
    }
}

/// Standard LOF: reachability distances, local reachability density, and
/// the mean neighbor-density ratio.
pub fn lof_scores(z: &DataMatrix, k: usize) -> Result<DetectorScores> {
    let fitted = LofFit::new(z.clone(), k)?;
    let scores = (0..z.rows())
        .map(|i| fitted.score_one(z.row(i), Some(i)))
        .collect();
    Ok(DetectorScores::unflagged(DetectorKind::Lof, scores))
}

// ---------------------------------------------------------------------
// Isolation forest
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
enum IfNode {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct IforestFit {
    trees: Vec<Vec<IfNode>>,
    /// Average unsuccessful-search path length for the subsample size.
    c_norm: f64,
}

/// `c(m) = 2 H(m - 1) - 2 (m - 1) / m`, with `H` the harmonic number.
fn average_path_length(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    let harmonic: f64 = (1..m).map(|i| 1.0 / i as f64).sum();
    2.0 * harmonic - 2.0 * (m - 1) as f64 / m as f64
}

fn build_iforest_tree(
    z: &DataMatrix,
    rows: &mut [usize],
    depth: usize,
    depth_limit: usize,
    rng: &mut RngStream,
    nodes: &mut Vec<IfNode>,
) -> usize {
    if rows.len() <= 1 || depth >= depth_limit {
        nodes.push(IfNode::Leaf { size: rows.len() });
        return nodes.len() - 1;
    }
    // Features with spread at this node.
    let d = z.cols();
    let mut usable = Vec::with_capacity(d);
    for c in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &r in rows.iter() {
            let v = z.get(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            usable.push((c, lo, hi));
        }
    }
    if usable.is_empty() {
        nodes.push(IfNode::Leaf { size: rows.len() });
        return nodes.len() - 1;
    }
    let (feature, lo, hi) = usable[rng.index(usable.len())];
    let value = rng.uniform_in(lo, hi);
    let mut split_at = 0;
    for i in 0..rows.len() {
        if z.get(rows[i], feature) < value {
            rows.swap(i, split_at);
            split_at += 1;
        }
    }
    let placeholder = nodes.len();
    nodes.push(IfNode::Leaf { size: 0 });
    let (left_rows, right_rows) = rows.split_at_mut(split_at);
    let left = build_iforest_tree(z, left_rows, depth + 1, depth_limit, rng, nodes);
    let right = build_iforest_tree(z, right_rows, depth + 1, depth_limit, rng, nodes);
    nodes[placeholder] = IfNode::Split {
        feature,
        value,
        left,
        right,
    };
    placeholder
}

impl IforestFit {
    fn new(z: &DataMatrix, trees: usize, subsample: usize, rng: &mut RngStream) -> Result<Self> {
        let n = z.rows();
        if n < 2 {
            return Err(Error::DegenerateInput(
                "isolation forest needs at least 2 points".into(),
            ));
        }
        let m = subsample.min(n).max(2);
        let depth_limit = (m as f64).log2().ceil() as usize;
        let mut forest = Vec::with_capacity(trees);
        let mut indices: Vec<usize> = (0..n).collect();
        for _ in 0..trees {
            // Partial Fisher-Yates: the first m entries form the subsample.
            for i in 0..m {
                let j = i + rng.index(n - i);
                indices.swap(i, j);
            }
            let mut rows = indices[..m].to_vec();
            let mut nodes = Vec::new();
            build_iforest_tree(z, &mut rows, 0, depth_limit, rng, &mut nodes);
            forest.push(nodes);
        }
        Ok(Self {
            trees: forest,
            c_norm: average_path_length(m),
        })
    }

    fn path_length(nodes: &[IfNode], point: &[f64]) -> f64 {
        let mut idx = 0;
        let mut depth = 0usize;
        loop {
            match &nodes[idx] {
                IfNode::Leaf { size } => {
                    return depth as f64 + average_path_length(*size);
                }
                IfNode::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    idx = if point[*feature] < *value { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }

    fn score_one(&self, point: &[f64]) -> f64 {
        let mean_path: f64 = self
            .trees
            .iter()
            .map(|t| Self::path_length(t, point))
            .sum::<f64>()
            / self.trees.len() as f64;
        2f64.powf(-mean_path / self.c_norm)
    }
}

/// Isolation forest with random axis-aligned splits; score
/// `2^(-E[h] / c(m))`.
pub fn iforest_scores(
    z: &DataMatrix,
    trees: usize,
    subsample: usize,
    rng: &mut RngStream,
) -> Result<DetectorScores> {
    let fitted = IforestFit::new(z, trees, subsample, rng)?;
    let scores = (0..z.rows()).map(|i| fitted.score_one(z.row(i))).collect();
    Ok(DetectorScores::unflagged(DetectorKind::Iforest, scores))
}

// ---------------------------------------------------------------------
// Empirical-CDF tail scoring
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EcodFit {
    sorted_cols: Vec<Vec<f64>>,
    n: usize,
}

fn count_le(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x <= v)
}

fn count_ge(sorted: &[f64], v: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x < v)
}

impl EcodFit {
    fn new(z: &DataMatrix) -> Result<Self> {
        if z.rows() < 2 {
            return Err(Error::DegenerateInput("ecod needs at least 2 points".into()));
        }
        let sorted_cols = (0..z.cols())
            .map(|c| {
                let mut col = z.column(c);
                col.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
                col
            })
            .collect();
        Ok(Self {
            sorted_cols,
            n: z.rows(),
        })
    }

    fn score_one(&self, point: &[f64]) -> f64 {
        let n = self.n as f64;
        let floor = 1.0 / n;
        point
            .iter()
            .zip(&self.sorted_cols)
            .map(|(&v, col)| {
                let p_left = (count_le(col, v) as f64 / n).max(floor);
                let p_right = (count_ge(col, v) as f64 / n).max(floor);
                (-p_left.ln()).max(-p_right.ln())
            })
            .sum()
    }
}

/// Per-dimension empirical tail probabilities, clipped at `1/n`; the
/// dimension score is the larger of the two negative log tails, summed
/// over dimensions.
pub fn ecod_scores(z: &DataMatrix) -> Result<DetectorScores> {
    let fitted = EcodFit::new(z)?;
    let scores = (0..z.rows()).map(|i| fitted.score_one(z.row(i))).collect();
    Ok(DetectorScores::unflagged(DetectorKind::Ecod, scores))
}

// ---------------------------------------------------------------------
// Histogram-based scoring
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct HbosDim {
    min: f64,
    width: f64,
    /// Negative log of the +1-smoothed normalized bin mass.
    neg_log_mass: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HbosFit {
    dims: Vec<HbosDim>,
    bins: usize,
}

impl HbosFit {
    fn new(z: &DataMatrix, bins: usize) -> Result<Self> {
        if bins < 1 {
            return Err(Error::InvalidConfig("hbos needs at least 1 bin".into()));
        }
        let n = z.rows();
        let mut dims = Vec::with_capacity(z.cols());
        for c in 0..z.cols() {
            let col = z.column(c);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = (max - min) / bins as f64;
            if width == 0.0 {
                // Constant dimension: one bin with the entire mass.
                dims.push(HbosDim {
                    min,
                    width: 0.0,
                    neg_log_mass: vec![0.0],
                });
                continue;
            }
            let mut counts = vec![0usize; bins];
            for &v in &col {
                let idx = (((v - min) / width) as usize).min(bins - 1);
                counts[idx] += 1;
            }
            let total = (n + bins) as f64;
            let neg_log_mass = counts
                .iter()
                .map(|&c| -(((c + 1) as f64) / total).ln())
                .collect();
            dims.push(HbosDim {
                min,
                width,
                neg_log_mass,
            });
        }
        Ok(Self { dims, bins })
    }

    fn score_one(&self, point: &[f64]) -> f64 {
        point
            .iter()
            .zip(&self.dims)
            .map(|(&v, dim)| {
                if dim.width == 0.0 {
                    return dim.neg_log_mass[0];
                }
                let raw = (v - dim.min) / dim.width;
                let idx = if raw <= 0.0 {
                    0
                } else {
                    (raw as usize).min(self.bins - 1)
                };
                dim.neg_log_mass[idx]
            })
            .sum()
    }
}

/// Equal-width histogram per dimension with +1 smoothing; score is the
/// summed negative log bin mass.
pub fn hbos_scores(z: &DataMatrix, bins: usize) -> Result<DetectorScores> {
    let fitted = HbosFit::new(z, bins)?;
    let scores = (0..z.rows()).map(|i| fitted.score_one(z.row(i))).collect();
    Ok(DetectorScores::unflagged(DetectorKind::Hbos, scores))
}

// ---------------------------------------------------------------------
// Gaussian kernel density scoring
// ---------------------------------------------------------------------

const KDE_BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
struct KdeFit {
    fit: DataMatrix,
    bandwidths: Vec<f64>,
    /// Additive log normalization of the product kernel.
    log_norm: f64,
}

impl KdeFit {
    fn new(z: &DataMatrix) -> Result<Self> {
        let n = z.rows();
        if n < 2 {
            return Err(Error::DegenerateInput("kde needs at least 2 points".into()));
        }
        let d = z.cols();
        // Scott's rule: h_j = sigma_j * n^(-1 / (d + 4)).
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidths: Vec<f64> = (0..d)
            .map(|c| {
                let col = z.column(c);
                let sd = crate::numerics::variance(&col).sqrt();
                let h = sd * factor;
                if h > KDE_BANDWIDTH_FLOOR {
                    h
                } else {
                    KDE_BANDWIDTH_FLOOR
                }
            })
            .collect();
        let log_norm: f64 = bandwidths
            .iter()
            .map(|h| -(h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()))
            .sum();
        Ok(Self {
            fit: z.clone(),
            bandwidths,
            log_norm,
        })
    }

    fn score_one(&self, point: &[f64]) -> f64 {
        // Log density via log-sum-exp over fit points (leave-self-in).
        let n = self.fit.rows();
        let mut lls = Vec::with_capacity(n);
        let mut max_ll = f64::NEG_INFINITY;
        for j in 0..n {
            let mut ll = self.log_norm;
            for ((&q, &x), &h) in point.iter().zip(self.fit.row(j)).zip(&self.bandwidths) {
                let u = (q - x) / h;
                ll -= 0.5 * u * u;
            }
            max_ll = max_ll.max(ll);
            lls.push(ll);
        }
        let sum_exp: f64 = lls.iter().map(|ll| (ll - max_ll).exp()).sum();
        let log_density = max_ll + sum_exp.ln() - (n as f64).ln();
        -log_density
    }
}

/// Gaussian product-kernel density with Scott bandwidths; score is the
/// negative log density.
pub fn kde_scores(z: &DataMatrix) -> Result<DetectorScores> {
    let fitted = KdeFit::new(z)?;
    let scores = (0..z.rows()).map(|i| fitted.score_one(z.row(i))).collect();
    Ok(DetectorScores::unflagged(DetectorKind::Kde, scores))
}

// ---------------------------------------------------------------------
// Hotelling T^2 in latent space
// ---------------------------------------------------------------------

/// Condition-number threshold beyond which the ridge engages.
const T2_CONDITION_LIMIT: f64 = 1e8;
/// Ridge scale relative to the average diagonal.
const T2_RIDGE_LAMBDA: f64 = 1e-6;

/// Factorizes a covariance matrix, adding `lambda * tr / d` to the
/// diagonal when the plain factorization fails or is ill-conditioned
/// (absolute `lambda` when the trace is zero). Returns the factor and
/// whether the ridge engaged.
pub fn factor_covariance(cov: &DataMatrix) -> Result<(Cholesky, bool)> {
    match Cholesky::new(cov) {
        Ok(chol) if chol.condition_estimate() <= T2_CONDITION_LIMIT => Ok((chol, false)),
        _ => {
            let d = cov.rows();
            let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
            let ridge = if trace > 0.0 {
                T2_RIDGE_LAMBDA * trace / d as f64
            } else {
                T2_RIDGE_LAMBDA
            };
            let mut regularized = cov.clone();
            for i in 0..d {
                regularized.set(i, i, regularized.get(i, i) + ridge);
            }
            Ok((Cholesky::new(&regularized)?, true))
        }
    }
}

#[derive(Debug, Clone)]
struct T2Fit {
    mean: Vec<f64>,
    chol: Cholesky,
}

impl T2Fit {
    fn new(z: &DataMatrix) -> Result<Self> {
        if z.rows() < z.cols() + 2 {
            return Err(Error::DegenerateInput(format!(
                "t2 needs more than d + 1 = {} points, got {}",
                z.cols() + 1,
                z.rows()
            )));
        }
        let mean = z.col_means();
        let cov = covariance_matrix(z)?;
        let (chol, _) = factor_covariance(&cov)?;
        Ok(Self { mean, chol })
    }

    fn score_one(&self, point: &[f64]) -> f64 {
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        let solved = self.chol.solve(&centered);
        crate::numerics::dot(&centered, &solved)
    }
}

/// Mahalanobis distance to the sample mean under the sample covariance.
pub fn t2_latent_scores(z: &DataMatrix) -> Result<DetectorScores> {
    let fitted = T2Fit::new(z)?;
    let scores = (0..z.rows()).map(|i| fitted.score_one(z.row(i))).collect();
    Ok(DetectorScores::unflagged(DetectorKind::T2Latent, scores))
}

// ---------------------------------------------------------------------
// Boxplot rule (univariate)
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BoxplotFit {
    lower_fence: f64,
    upper_fence: f64,
}

impl BoxplotFit {
    fn new(values: &[f64]) -> Result<Self> {
        let q1 = empirical_quantile(values, 0.25)?;
        let q3 = empirical_quantile(values, 0.75)?;
        let iqr = q3 - q1;
        Ok(Self {
            lower_fence: q1 - 1.5 * iqr,
            upper_fence: q3 + 1.5 * iqr,
        })
    }

    fn score_one(&self, v: f64) -> (f64, bool) {
        if v < self.lower_fence {
            (self.lower_fence - v, true)
        } else if v > self.upper_fence {
            (v - self.upper_fence, true)
        } else {
            (0.0, false)
        }
    }
}

/// Tukey fences on a univariate latent: flag outside
/// `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`, score the exceedance distance.
pub fn boxplot_flags(values: &[f64]) -> Result<DetectorScores> {
    let fitted = BoxplotFit::new(values)?;
    let mut scores = Vec::with_capacity(values.len());
    let mut flags = Vec::with_capacity(values.len());
    for &v in values {
        let (s, f) = fitted.score_one(v);
        scores.push(s);
        flags.push(f);
    }
    Ok(DetectorScores {
        detector_id: DetectorKind::Boxplot.name().to_string(),
        scores,
        flags,
    })
}

// ---------------------------------------------------------------------
// Thresholding, aggregation, cap
// ---------------------------------------------------------------------

/// Flags scores strictly above the empirical `(1 - alpha0)` quantile of
/// `threshold_basis`.
pub fn threshold_by_quantile_against(
    scores: &[f64],
    threshold_basis: &[f64],
    alpha0: f64,
) -> Result<Vec<bool>> {
    if !(alpha0 > 0.0 && alpha0 < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha0 must lie in (0, 1), got {alpha0}"
        )));
    }
    let cutoff = empirical_quantile(threshold_basis, 1.0 - alpha0)?;
    Ok(scores.iter().map(|&s| s > cutoff).collect())
}

/// Flags scores strictly above their own `(1 - alpha0)` quantile.
pub fn threshold_by_quantile(scores: &[f64], alpha0: f64) -> Result<Vec<bool>> {
    threshold_by_quantile_against(scores, scores, alpha0)
}

/// Combines per-detector flags: `any` = union, `all` = intersection,
/// `majority` = at least `ceil((m + 1) / 2)` votes.
pub fn aggregate(flag_sets: &[Vec<bool>], rule: ConsensusRule) -> Result<Vec<bool>> {
    if flag_sets.is_empty() {
        return Err(Error::InvalidConfig(
            "aggregate needs at least one flag set".into(),
        ));
    }
    let n = flag_sets[0].len();
    if flag_sets.iter().any(|f| f.len() != n) {
        return Err(Error::InvalidConfig("flag vectors differ in length".into()));
    }
    let m = flag_sets.len();
    let needed = match rule {
        ConsensusRule::Any => 1,
        ConsensusRule::All => m,
        ConsensusRule::Majority => m / 2 + 1,
    };
    Ok((0..n)
        .map(|i| flag_sets.iter().filter(|f| f[i]).count() >= needed)
        .collect())
}

/// Mid-rank percentile ranks in `[0, 1]` (ties share the average rank).
pub fn percentile_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let denom = (n - 1) as f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid / denom;
        }
        i = j + 1;
    }
    ranks
}

/// Enforces the contamination budget: when more than `ceil(cap * n)`
/// observations are flagged, only the flagged observations with the
/// highest combined score survive (ties keep the lower index).
pub fn cap_contamination(flags: &[bool], combined_score: &[f64], cap: f64) -> Result<Vec<bool>> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "contamination cap must lie in (0, 1], got {cap}"
        )));
    }
    let n = flags.len();
    let limit = (cap * n as f64).ceil() as usize;
    let flagged: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
    if flagged.len() <= limit {
        return Ok(flags.to_vec());
    }
    let mut ranked = flagged;
    ranked.sort_by(|&a, &b| {
        combined_score[b]
            .partial_cmp(&combined_score[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut capped = vec![false; n];
    for &i in ranked.iter().take(limit) {
        capped[i] = true;
    }
    Ok(capped)
}

// ---------------------------------------------------------------------
// Ensemble orchestration
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
enum FittedDetector {
    Knn(KnnFit),
    Lof(LofFit),
    Iforest(IforestFit),
    Ecod(EcodFit),
    Hbos(HbosFit),
    Kde(KdeFit),
    T2(T2Fit),
    Boxplot(BoxplotFit),
}

/// A detector bank fitted on one latent matrix, scorable on another.
#[derive(Debug, Clone)]
pub struct FittedEnsemble {
    detectors: Vec<(DetectorKind, FittedDetector)>,
}

/// Per-detector scores and flags plus the aggregated ensemble flag.
#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub per_detector: Vec<DetectorScores>,
    /// Mean percentile rank across detectors; the tie-break score for the
    /// contamination cap.
    pub combined_rank: Vec<f64>,
    pub flags: Vec<bool>,
}

/// Fits every configured detector on `z_fit`. When the latent space is
/// univariate the boxplot rule joins the bank.
pub fn fit_ensemble(
    z_fit: &DataMatrix,
    cfg: &EnsembleConfig,
    rng: &mut RngStream,
) -> Result<FittedEnsemble> {
    cfg.validate()?;
    let mut kinds = cfg.detectors.clone();
    if z_fit.cols() == 1 && !kinds.contains(&DetectorKind::Boxplot) {
        kinds.push(DetectorKind::Boxplot);
    }
    let n = z_fit.rows();
    let subsample = cfg.iforest_subsample.unwrap_or_else(|| 256.min(n));
    let bins = cfg
        .hbos_bins
        .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
    let mut detectors = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let fitted = match kind {
            DetectorKind::Knn => FittedDetector::Knn(KnnFit::new(z_fit.clone(), cfg.knn_k)?),
            DetectorKind::Lof => FittedDetector::Lof(LofFit::new(z_fit.clone(), cfg.lof_k)?),
            DetectorKind::Iforest => {
                let mut forest_rng = rng.substream(0x69666f_u64.wrapping_add(cfg.seed));
                FittedDetector::Iforest(IforestFit::new(
                    z_fit,
                    cfg.iforest_trees,
                    subsample,
                    &mut forest_rng,
                )?)
            }
            DetectorKind::Ecod => FittedDetector::Ecod(EcodFit::new(z_fit)?),
            DetectorKind::Hbos => FittedDetector::Hbos(HbosFit::new(z_fit, bins)?),
            DetectorKind::Kde => FittedDetector::Kde(KdeFit::new(z_fit)?),
            DetectorKind::T2Latent => FittedDetector::T2(T2Fit::new(z_fit)?),
            DetectorKind::Boxplot => {
                if z_fit.cols() != 1 {
                    return Err(Error::InvalidConfig(
                        "boxplot detector requires a univariate latent".into(),
                    ));
                }
                FittedDetector::Boxplot(BoxplotFit::new(&z_fit.column(0))?)
            }
        };
        detectors.push((kind, fitted));
    }
    Ok(FittedEnsemble { detectors })
}

impl FittedEnsemble {
    pub fn detector_count(&self) -> usize {
        self.detectors.len()
    }

    /// Scores every row of `z_query`. `self_map[i]` names the fit row
    /// holding the same observation as query row `i`, if any, so the
    /// neighbor detectors can exclude the point itself.
    /// `threshold_rows`, when given, restricts the rows whose scores form
    /// the per-detector threshold quantile.
    pub fn score_and_flag(
        &self,
        z_query: &DataMatrix,
        self_map: &[Option<usize>],
        threshold_rows: Option<&[usize]>,
        alpha0: f64,
        rule: ConsensusRule,
    ) -> Result<EnsembleOutcome> {
        let n = z_query.rows();
        if self_map.len() != n {
            return Err(Error::InvalidConfig("self_map length mismatch".into()));
        }
        let mut per_detector = Vec::with_capacity(self.detectors.len());
        for (kind, fitted) in &self.detectors {
            let mut scores = Vec::with_capacity(n);
            let mut native_flags: Option<Vec<bool>> = None;
            match fitted {
                FittedDetector::Knn(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i), self_map[i]));
                    }
                }
                FittedDetector::Lof(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i), self_map[i]));
                    }
                }
                FittedDetector::Iforest(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i)));
                    }
                }
                FittedDetector::Ecod(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i)));
                    }
                }
                FittedDetector::Hbos(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i)));
                    }
                }
                FittedDetector::Kde(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i)));
                    }
                }
                FittedDetector::T2(f) => {
                    for i in 0..n {
                        scores.push(f.score_one(z_query.row(i)));
                    }
                }
                FittedDetector::Boxplot(f) => {
                    let mut flags = Vec::with_capacity(n);
                    for i in 0..n {
                        let (s, fl) = f.score_one(z_query.get(i, 0));
                        scores.push(s);
                        flags.push(fl);
                    }
                    native_flags = Some(flags);
                }
            }
            let flags = match native_flags {
                Some(f) => f,
                None => {
                    let basis: Vec<f64> = match threshold_rows {
                        Some(rows) => rows.iter().map(|&r| scores[r]).collect(),
                        None => scores.clone(),
                    };
                    threshold_by_quantile_against(&scores, &basis, alpha0)?
                }
            };
            per_detector.push(DetectorScores {
                detector_id: kind.name().to_string(),
                scores,
                flags,
            });
        }

        let mut combined_rank = vec![0.0; n];
        for det in &per_detector {
            for (c, r) in combined_rank.iter_mut().zip(percentile_ranks(&det.scores)) {
                *c += r;
            }
        }
        let m = per_detector.len() as f64;
        combined_rank.iter_mut().for_each(|c| *c /= m);

        let flag_sets: Vec<Vec<bool>> = per_detector.iter().map(|d| d.flags.clone()).collect();
        let flags = aggregate(&flag_sets, rule)?;
        Ok(EnsembleOutcome {
            per_detector,
            combined_rank,
            flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn column(values: &[f64]) -> DataMatrix {
        DataMatrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn knn_hand_computed_distances() {
        let z = column(&[0.0, 1.0, 2.0, 100.0]);
        let scores = knn_scores(&z, 1).unwrap().scores;
        assert_eq!(scores, vec![1.0, 1.0, 1.0, 98.0]);
    }

    #[test]
    fn knn_identical_points_score_zero() {
        let z = column(&[3.0; 6]);
        let scores = knn_scores(&z, 2).unwrap().scores;
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn knn_translation_invariance() {
        let mut rng = RngStream::new(4);
        let values: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let z = DataMatrix::new(10, 2, values.clone()).unwrap();
        let shifted = DataMatrix::new(10, 2, values.iter().map(|v| v + 7.5).collect()).unwrap();
        let a = knn_scores(&z, 3).unwrap().scores;
        let b = knn_scores(&shifted, 3).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn knn_rejects_small_sample() {
        let z = column(&[1.0, 2.0]);
        assert!(knn_scores(&z, 2).is_err());
    }

    #[test]
    fn lof_uniform_grid_near_one() {
        let values: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let z = column(&values);
        let scores = lof_scores(&z, 3).unwrap().scores;
        // Interior points of a homogeneous grid.
        for &s in &scores[5..25] {
            assert!((0.8..=1.2).contains(&s), "interior LOF {s}");
        }
    }

    #[test]
    fn lof_flags_far_point() {
        let mut values: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        values.push(10.0);
        let z = column(&values);
        let scores = lof_scores(&z, 3).unwrap().scores;
        assert!(scores[10] > 1.5, "far point LOF {}", scores[10]);
    }

    #[test]
    fn lof_scale_invariance() {
        let mut rng = RngStream::new(9);
        let values: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let z = DataMatrix::new(20, 2, values.clone()).unwrap();
        let scaled = DataMatrix::new(20, 2, values.iter().map(|v| v * 3.0).collect()).unwrap();
        let a = lof_scores(&z, 4).unwrap().scores;
        let b = lof_scores(&scaled, 4).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn iforest_normalization_constants() {
        // E[h] = c(m) gives score 2^(-1) = 0.5 by construction.
        assert_abs_diff_eq!(average_path_length(2), 1.0, epsilon = 1e-12);
        // c(3) = 2 * (1 + 1/2) - 2 * 2/3.
        assert_abs_diff_eq!(average_path_length(3), 3.0 - 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(average_path_length(1), 0.0);
    }

    #[test]
    fn iforest_is_deterministic_per_seed() {
        let mut rng = RngStream::new(10);
        let values: Vec<f64> = (0..60).map(|_| rng.normal()).collect();
        let z = DataMatrix::new(30, 2, values).unwrap();
        let a = iforest_scores(&z, 25, 16, &mut RngStream::new(5)).unwrap().scores;
        let b = iforest_scores(&z, 25, 16, &mut RngStream::new(5)).unwrap().scores;
        assert_eq!(a, b);
    }

    #[test]
    fn iforest_isolates_extreme_point() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = RngStream::new(1000 + seed);
            let mut values: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
            values.push(1e6);
            let z = column(&values);
            let scores = iforest_scores(&z, 100, 41, &mut rng).unwrap().scores;
            let max_idx = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if max_idx == 40 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "extreme point won in only {hits}/100 seeds");
    }

    #[test]
    fn ecod_orders_tail_points() {
        let values: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let z = column(&values);
        let scores = ecod_scores(&z).unwrap().scores;
        assert!(scores[9] > scores[4], "{} vs {}", scores[9], scores[4]);
    }

    #[test]
    fn ecod_median_is_minimal_and_shift_invariant() {
        let values: Vec<f64> = (0..21).map(|i| i as f64 - 10.0).collect();
        let z = column(&values);
        let scores = ecod_scores(&z).unwrap().scores;
        let min_idx = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(min_idx, 10);

        let shifted = column(&values.iter().map(|v| v + 100.0).collect::<Vec<_>>());
        let b = ecod_scores(&shifted).unwrap().scores;
        for (x, y) in scores.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn hbos_single_bin_is_flat() {
        let z = column(&[1.0, 2.0, 3.0, 4.0]);
        let scores = hbos_scores(&z, 1).unwrap().scores;
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn hbos_sparse_bin_scores_highest() {
        let mut values = vec![0.0; 99];
        values.push(100.0);
        let z = column(&values);
        let scores = hbos_scores(&z, 2).unwrap().scores;
        assert!(scores[99] > scores[0]);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(scores[99], max);
    }

    #[test]
    fn hbos_affine_invariance_with_fixed_bins() {
        let mut rng = RngStream::new(2);
        let values: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let z = column(&values);
        let rescaled = column(&values.iter().map(|v| 4.0 * v - 3.0).collect::<Vec<_>>());
        let a = hbos_scores(&z, 7).unwrap().scores;
        let b = hbos_scores(&rescaled, 7).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn kde_symmetric_and_orders_outlier() {
        let z = column(&[1.0, 1.0]);
        let scores = kde_scores(&z).unwrap().scores;
        assert_abs_diff_eq!(scores[0], scores[1]);

        let z = column(&[0.0, 0.0, 0.0, 10.0]);
        let scores = kde_scores(&z).unwrap().scores;
        assert!(scores[3] > scores[0]);
    }

    #[test]
    fn kde_density_integrates_to_one() {
        let mut rng = RngStream::new(21);
        let values: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let z = column(&values);
        let fit = KdeFit::new(&z).unwrap();
        // Trapezoid quadrature of exp(-score) over a wide grid.
        let (lo, hi, steps) = (-10.0, 10.0, 4000);
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * dx;
            let density = (-fit.score_one(&[x])).exp();
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += w * density * dx;
        }
        assert!((integral - 1.0).abs() < 1e-2, "integral {integral}");
    }

    #[test]
    fn t2_scalar_reduction() {
        let values = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let z = column(&values);
        let scores = t2_latent_scores(&z).unwrap().scores;
        let m = crate::numerics::mean(&values);
        let s2 = crate::numerics::variance(&values);
        for (v, s) in values.iter().zip(&scores) {
            assert_abs_diff_eq!(*s, (v - m) * (v - m) / s2, epsilon = 1e-10);
        }
    }

    #[test]
    fn t2_mean_score_identity() {
        let mut rng = RngStream::new(30);
        let values: Vec<f64> = (0..90).map(|_| rng.normal()).collect();
        let z = DataMatrix::new(30, 3, values).unwrap();
        let scores = t2_latent_scores(&z).unwrap().scores;
        let total: f64 = scores.iter().sum();
        let expected = 3.0 * 29.0;
        assert!(
            (total - expected).abs() / expected < 1e-6,
            "sum {total} vs {expected}"
        );
    }

    #[test]
    fn boxplot_examples() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let out = boxplot_flags(&values).unwrap();
        assert!(out.flags.iter().all(|&f| !f));

        let constant = vec![5.0; 10];
        let out = boxplot_flags(&constant).unwrap();
        assert!(out.flags.iter().all(|&f| !f));

        let mut values = vec![0.0; 20];
        values.push(1000.0);
        let out = boxplot_flags(&values).unwrap();
        assert!(out.flags[20]);
        assert_eq!(out.flags.iter().filter(|&&f| f).count(), 1);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let flags = threshold_by_quantile(&scores, 0.10).unwrap();
        // q_{0.9} = 18.1, so 19 and 20 exceed it.
        let flagged: Vec<usize> = (0..20).filter(|&i| flags[i]).collect();
        assert_eq!(flagged, vec![18, 19]);

        let equal = vec![3.0; 50];
        let flags = threshold_by_quantile(&equal, 0.05).unwrap();
        assert!(flags.iter().all(|&f| !f));

        // Continuous scores, n = 100, alpha0 = 0.05: at most 6 flags.
        let mut rng = RngStream::new(31);
        let continuous: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let flags = threshold_by_quantile(&continuous, 0.05).unwrap();
        assert!(flags.iter().filter(|&&f| f).count() <= 6);
    }

    #[test]
    fn aggregate_rules() {
        let sets = vec![
            vec![true, true, true, false],
            vec![false, true, false, false],
            vec![false, false, false, false],
        ];
        assert_eq!(
            aggregate(&sets, ConsensusRule::Any).unwrap(),
            vec![true, true, true, false]
        );
        assert_eq!(
            aggregate(&sets, ConsensusRule::Majority).unwrap(),
            vec![false, true, false, false]
        );
        assert_eq!(
            aggregate(&sets, ConsensusRule::All).unwrap(),
            vec![false, false, false, false]
        );
    }

    #[test]
    fn cap_keeps_top_ranked() {
        let n = 100;
        let mut flags = vec![false; n];
        let mut combined = vec![0.0; n];
        for i in 0..30 {
            flags[i] = true;
            combined[i] = i as f64;
        }
        let capped = cap_contamination(&flags, &combined, 0.10).unwrap();
        assert_eq!(capped.iter().filter(|&&f| f).count(), 10);
        // Highest combined scores sit at indices 20..30.
        for i in 20..30 {
            assert!(capped[i]);
        }

        // Under the cap: unchanged.
        let mut few = vec![false; n];
        few[3] = true;
        assert_eq!(cap_contamination(&few, &combined, 0.10).unwrap(), few);

        // Equal scores: lowest indices retained.
        let even = vec![1.0; n];
        let mut all = vec![false; n];
        for f in all.iter_mut().take(30) {
            *f = true;
        }
        let capped = cap_contamination(&all, &even, 0.10).unwrap();
        for (i, &f) in capped.iter().enumerate() {
            assert_eq!(f, i < 10);
        }
    }

    #[test]
    fn cap_is_idempotent_and_never_grows() {
        let mut rng = RngStream::new(55);
        let n = 60;
        let flags: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        let combined: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let once = cap_contamination(&flags, &combined, 0.15).unwrap();
        let twice = cap_contamination(&once, &combined, 0.15).unwrap();
        assert_eq!(once, twice);
        let before = flags.iter().filter(|&&f| f).count();
        let after = once.iter().filter(|&&f| f).count();
        assert!(after <= before);
    }

    #[test]
    fn percentile_ranks_handle_ties() {
        let ranks = percentile_ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_abs_diff_eq!(ranks[0], 0.0);
        assert_abs_diff_eq!(ranks[1], 0.5);
        assert_abs_diff_eq!(ranks[2], 0.5);
        assert_abs_diff_eq!(ranks[3], 1.0);
    }

    #[test]
    fn ensemble_adds_boxplot_in_one_dimension() {
        let mut rng = RngStream::new(77);
        let values: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let z = column(&values);
        let cfg = EnsembleConfig {
            knn_k: 3,
            lof_k: 5,
            ..EnsembleConfig::default()
        };
        let fitted = fit_ensemble(&z, &cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(fitted.detector_count(), 8);
        let outcome = fitted
            .score_and_flag(
                &z,
                &identity_self_map(50),
                None,
                cfg.per_detector_alpha,
                cfg.rule,
            )
            .unwrap();
        assert_eq!(outcome.per_detector.len(), 8);
        assert!(outcome
            .per_detector
            .iter()
            .any(|d| d.detector_id == "boxplot"));
    }
}
