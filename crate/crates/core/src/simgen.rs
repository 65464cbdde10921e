//! Monte Carlo scenario generation: five base distributions, transient or
//! sustained global mean shifts, and ground-truth labels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DataMatrix, RngStream, SampleDist};

const T_DF: u32 = 5;
/// Multimodal cluster centers; every coordinate of a row shares its
/// cluster's center.
const CLUSTER_CENTER: f64 = 5.0;

/// Base distribution of an uncontaminated row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Normal,
    T5,
    Lognormal,
    Mixed,
    Multimodal,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "t5" => Ok(Self::T5),
            "lognormal" => Ok(Self::Lognormal),
            "mixed" => Ok(Self::Mixed),
            "multimodal" => Ok(Self::Multimodal),
            other => Err(Error::InvalidConfig(format!(
                "unknown distribution '{other}' (expected normal, t5, lognormal, mixed, multimodal)"
            ))),
        }
    }
}

/// Placement of contaminated observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftType {
    /// Contaminated indices sampled uniformly without replacement.
    Transient,
    /// The trailing contiguous block is contaminated.
    Sustained,
    None,
}

impl std::str::FromStr for ShiftType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transient" => Ok(Self::Transient),
            "sustained" => Ok(Self::Sustained),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown shift type '{other}' (expected transient, sustained, none)"
            ))),
        }
    }
}

/// One generative configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub dist: Distribution,
    pub n: usize,
    pub p: usize,
    /// Mean shift added to every coordinate of a contaminated row.
    pub delta: f64,
    /// Fraction of observations replaced by shifted samples.
    pub gamma: f64,
    pub shift_type: ShiftType,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            dist: Distribution::Normal,
            n: 500,
            p: 150,
            delta: 0.0,
            gamma: 0.0,
            shift_type: ShiftType::None,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::InvalidConfig(format!(
                "scenario needs n >= 2 and p >= 1, got n = {}, p = {}",
                self.n, self.p
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Generated sample with ground truth.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub x: DataMatrix,
    /// True when the observation was contaminated.
    pub truth: Vec<bool>,
    /// Set when the requested contamination rounds down to zero rows.
    pub warning: Option<String>,
}

fn base_row(dist: Distribution, p: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    match dist {
        Distribution::Normal => crate::numerics::sample(SampleDist::StandardNormal, rng, p),
        Distribution::T5 => crate::numerics::sample(SampleDist::StudentT { df: T_DF }, rng, p),
        Distribution::Lognormal => crate::numerics::sample(SampleDist::Lognormal, rng, p),
        Distribution::Mixed => {
            // Row-level fair mixture of the normal and t families.
            if rng.uniform() < 0.5 {
                crate::numerics::sample(SampleDist::StandardNormal, rng, p)
            } else {
                crate::numerics::sample(SampleDist::StudentT { df: T_DF }, rng, p)
            }
        }
        Distribution::Multimodal => {
            let center = if rng.uniform() < 0.5 {
                -CLUSTER_CENTER
            } else {
                CLUSTER_CENTER
            };
            let mut row = crate::numerics::sample(SampleDist::StandardNormal, rng, p)?;
            row.iter_mut().for_each(|v| *v += center);
            Ok(row)
        }
    }
}

/// Draws the sample for a scenario. Contaminated rows receive `+delta`
/// on every coordinate; the contaminated count is `ceil(gamma * n)`
/// except that a request rounding below one row yields zero rows plus a
/// warning.
pub fn generate(spec: &ScenarioSpec, rng: &mut RngStream) -> Result<LabeledSample> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n {
        values.extend(base_row(spec.dist, p, rng)?);
    }
    let mut x = DataMatrix::new(n, p, values)?;

    let mut truth = vec![false; n];
    let mut warning = None;
    let contamination_requested =
        spec.shift_type != ShiftType::None && spec.gamma > 0.0 && spec.delta > 0.0;
    if contamination_requested {
        let target = spec.gamma * n as f64;
        if target < 1.0 {
            warning = Some(format!(
                "gamma * n = {target:.3} < 1: no rows contaminated"
            ));
        } else {
            let count = target.ceil() as usize;
            let chosen: Vec<usize> = match spec.shift_type {
                ShiftType::Sustained => (n - count..n).collect(),
                ShiftType::Transient => {
                    // Uniform without replacement via partial Fisher-Yates.
                    let mut idx: Vec<usize> = (0..n).collect();
                    for i in 0..count {
                        let j = i + rng.index(n - i);
                        idx.swap(i, j);
                    }
                    idx.truncate(count);
                    idx
                }
                ShiftType::None => unreachable!(),
            };
            for &i in &chosen {
                truth[i] = true;
                for v in x.row_mut(i) {
                    *v += spec.delta;
                }
            }
        }
    }
    Ok(LabeledSample { x, truth, warning })
}

/// Writes the observation matrix as CSV with an `x1..xp` header; values
/// use the shortest round-trip decimal form.
pub fn write_csv<W: Write>(x: &DataMatrix, mut writer: W) -> std::io::Result<()> {
    let header: Vec<String> = (1..=x.cols()).map(|i| format!("x{i}")).collect();
    writeln!(writer, "{}", header.join(","))?;
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(writer, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the truth vector as a single `label` column of 0/1.
pub fn write_labels_csv<W: Write>(truth: &[bool], mut writer: W) -> std::io::Result<()> {
    writeln!(writer, "label")?;
    for &t in truth {
        writeln!(writer, "{}", if t { 1 } else { 0 })?;
    }
    Ok(())
}
