//! Penalized exact segmentation of the latent magnitude series (PELT)
//! and conversion of the earliest changepoint into provisional flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DataMatrix;

/// Segmentation parameters. The cost is the within-segment sum of squared
/// deviations from the segment mean (L2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeltConfig {
    pub penalty: f64,
    pub min_segment_length: usize,
}

impl Default for PeltConfig {
    fn default() -> Self {
        Self {
            penalty: 40.0,
            min_segment_length: 10,
        }
    }
}

impl PeltConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0) {
            return Err(Error::InvalidConfig("PELT penalty must be > 0".into()));
        }
        if self.min_segment_length < 2 {
            return Err(Error::InvalidConfig(
                "min_segment_length must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Optimal segmentation: sorted changepoints (each is the 1-based last
/// index of a segment, strictly inside the series) and the penalized
/// objective `sum of segment costs + penalty * K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub changepoints: Vec<usize>,
    pub total_cost: f64,
}

impl Segmentation {
    /// Earliest changepoint, if any.
    pub fn tau_star(&self) -> Option<usize> {
        self.changepoints.first().copied()
    }
}

/// Euclidean norm of each latent row.
pub fn latent_magnitude(z: &DataMatrix) -> Vec<f64> {
    (0..z.rows())
        .map(|r| z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Running sums for O(1) segment costs.
struct SegmentCost {
    cum: Vec<f64>,
    cum_sq: Vec<f64>,
}

impl SegmentCost {
    fn new(s: &[f64]) -> Self {
        let mut cum = Vec::with_capacity(s.len() + 1);
        let mut cum_sq = Vec::with_capacity(s.len() + 1);
        cum.push(0.0);
        cum_sq.push(0.0);
        let (mut a, mut b) = (0.0, 0.0);
        for &v in s {
            a += v;
            b += v * v;
            cum.push(a);
            cum_sq.push(b);
        }
        Self { cum, cum_sq }
    }

    /// Cost of the half-open segment `[a, b)`: sum of squared deviations
    /// from the segment mean.
    #[inline]
    fn cost(&self, a: usize, b: usize) -> f64 {
        let len = (b - a) as f64;
        let sum = self.cum[b] - self.cum[a];
        let sq = self.cum_sq[b] - self.cum_sq[a];
        (sq - sum * sum / len).max(0.0)
    }
}

/// Exact minimizer of the penalized L2 segmentation objective via the
/// PELT dynamic program.
///
/// Candidate pruning is delayed by `min_segment_length` steps: a pruned
/// candidate is dominated only at times where its dominator is itself an
/// admissible previous changepoint, which starts `min_segment_length`
/// after the prune test. Immediate removal can lose the optimum in that
/// window; delayed removal keeps the result identical to the unpruned
/// optimal-partitioning recursion.
pub fn pelt_segment(s: &[f64], cfg: &PeltConfig) -> Result<Segmentation> {
    cfg.validate()?;
    if s.is_empty() {
        return Err(Error::DegenerateInput("empty series".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite series value".into()));
    }
    let n = s.len();
    let min_len = cfg.min_segment_length;
    let costs = SegmentCost::new(s);
    if n < 2 * min_len {
        return Ok(Segmentation {
            changepoints: Vec::new(),
            total_cost: costs.cost(0, n),
        });
    }

    let beta = cfg.penalty;
    // opt[t] = minimal sum of (segment cost + beta) over segmentations of
    // s[0..t); the objective is opt[n] - beta.
    let mut opt = vec![f64::INFINITY; n + 1];
    opt[0] = 0.0;
    let mut prev = vec![0usize; n + 1];
    // (candidate tau, first time it no longer participates)
    let mut candidates: Vec<(usize, usize)> = vec![(0, usize::MAX)];

    for t in min_len..=n {
        if t >= 2 * min_len {
            candidates.push((t - min_len, usize::MAX));
        }
        let mut best = f64::INFINITY;
        let mut best_tau = 0usize;
        for &(tau, dead_from) in &candidates {
            if dead_from <= t || tau + min_len > t {
                continue;
            }
            let value = opt[tau] + costs.cost(tau, t) + beta;
            if value < best {
                best = value;
                best_tau = tau;
            }
        }
        opt[t] = best;
        prev[t] = best_tau;
        for entry in candidates.iter_mut() {
            let (tau, dead_from) = *entry;
            if dead_from != usize::MAX || tau + min_len > t {
                continue;
            }
            if opt[tau] + costs.cost(tau, t) > opt[t] {
                entry.1 = t + min_len;
            }
        }
        candidates.retain(|&(_, dead_from)| dead_from > t + 1);
    }

    let mut changepoints = Vec::new();
    let mut cursor = n;
    while cursor > 0 {
        let tau = prev[cursor];
        if tau > 0 {
            changepoints.push(tau);
        }
        cursor = tau;
    }
    changepoints.reverse();
    Ok(Segmentation {
        changepoints,
        total_cost: opt[n] - beta,
    })
}

/// Flags every observation strictly after the earliest changepoint
/// (`changepoints` are 1-based segment ends, so 0-based row `i` is
/// flagged when `i >= tau_star`). No changepoints means no flags.
pub fn changepoint_flags(seg: &Segmentation, n: usize) -> Vec<bool> {
    match seg.tau_star() {
        None => vec![false; n],
        Some(tau_star) => (0..n).map(|i| i >= tau_star).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(penalty: f64, min_len: usize) -> PeltConfig {
        PeltConfig {
            penalty,
            min_segment_length: min_len,
        }
    }

    #[test]
    fn magnitude_examples() {
        let z = DataMatrix::new(3, 2, vec![3.0, 4.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(latent_magnitude(&z), vec![5.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_series_has_no_changepoints() {
        let s = vec![2.5; 40];
        let seg = pelt_segment(&s, &cfg(1.0, 10)).unwrap();
        assert!(seg.changepoints.is_empty());
        assert_abs_diff_eq!(seg.total_cost, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_level_series_splits_at_twenty() {
        let mut s = vec![0.0; 20];
        s.extend(vec![5.0; 20]);
        let seg = pelt_segment(&s, &cfg(1.0, 10)).unwrap();
        assert_eq!(seg.changepoints, vec![20]);
        assert_abs_diff_eq!(seg.total_cost, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn three_level_series_splits_twice() {
        let mut s = vec![0.0; 15];
        s.extend(vec![4.0; 15]);
        s.extend(vec![8.0; 15]);
        let seg = pelt_segment(&s, &cfg(1.0, 10)).unwrap();
        assert_eq!(seg.changepoints, vec![15, 30]);
    }

    #[test]
    fn short_series_returns_no_changepoints() {
        let s = vec![1.0, 9.0, 1.0, 9.0];
        let seg = pelt_segment(&s, &cfg(1.0, 10)).unwrap();
        assert!(seg.changepoints.is_empty());
    }

    #[test]
    fn flags_follow_earliest_changepoint() {
        let seg = Segmentation {
            changepoints: vec![20],
            total_cost: 0.0,
        };
        let flags = changepoint_flags(&seg, 40);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 20);
        assert!(!flags[19]);
        assert!(flags[20]);

        let seg = Segmentation {
            changepoints: vec![15, 30],
            total_cost: 0.0,
        };
        let flags = changepoint_flags(&seg, 45);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 30);
        assert!(flags[15] && flags[44] && !flags[14]);

        let empty = Segmentation {
            changepoints: vec![],
            total_cost: 0.0,
        };
        assert!(changepoint_flags(&empty, 10).iter().all(|&f| !f));
    }

    #[test]
    fn running_sum_cost_matches_two_pass() {
        let mut rng = crate::numerics::RngStream::new(17);
        let s: Vec<f64> = (0..60).map(|_| rng.normal() * 3.0).collect();
        let costs = SegmentCost::new(&s);
        for a in 0..50 {
            for b in (a + 2)..=60 {
                let seg = &s[a..b];
                let mean = seg.iter().sum::<f64>() / seg.len() as f64;
                let direct: f64 = seg.iter().map(|v| (v - mean) * (v - mean)).sum();
                assert_abs_diff_eq!(costs.cost(a, b), direct, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(pelt_segment(&[1.0, 2.0], &cfg(0.0, 10)).is_err());
        assert!(pelt_segment(&[1.0, 2.0], &cfg(1.0, 1)).is_err());
        assert!(pelt_segment(&[], &cfg(1.0, 2)).is_err());
    }
}
