//! Kernel maximum mean discrepancy between domains.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::stream::{Domain, DomainStream};

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("need at least {need} samples per side, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("all points coincide; the median heuristic gives a zero bandwidth")]
    DegenerateBandwidth,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("points have dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("class {0} is out of range")]
    UnknownClass(usize),
    #[error("invalid conditioning {0:?}; use marginal or class:<index>")]
    BadConditioning(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// V-statistic; includes the diagonal terms and is never negative.
    #[default]
    Biased,
    /// U-statistic; drops the diagonal terms and can dip below zero.
    Unbiased,
}

/// Which instances of each domain enter the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// All instances, ignoring labels.
    #[default]
    Marginal,
    /// Only instances of one gold class; needs gold labels.
    Class(usize),
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Conditioning::Marginal => f.write_str("marginal"),
            Conditioning::Class(c) => write!(f, "class:{c}"),
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "marginal" => Ok(Conditioning::Marginal),
            _ => s
                .strip_prefix("class:")
                .and_then(|c| c.parse().ok())
                .map(Conditioning::Class)
                .ok_or_else(|| DivergenceError::BadConditioning(s.to_string())),
        }
    }
}

impl Serialize for Conditioning {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Conditioning {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Points used for bandwidth selection are capped at this many.
pub const BANDWIDTH_SAMPLE_CAP: usize = 2000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel `exp(-|a - b|^2 / (2 sigma^2))`.
pub fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Median pairwise Euclidean distance. Inputs above
/// [`BANDWIDTH_SAMPLE_CAP`] points are thinned with a fixed stride.
pub fn median_heuristic_bandwidth(points: &[&[f64]]) -> Result<f64, DivergenceError> {
    let stride = points.len().div_ceil(BANDWIDTH_SAMPLE_CAP).max(1);
    let pts: Vec<&[f64]> = points.iter().step_by(stride).copied().collect();
    if pts.len() < 2 {
        return Err(DivergenceError::TooFewSamples { need: 2, got: pts.len() });
    }
    let mut dists: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pts = &pts;
            (i + 1..pts.len()).map(move |j| sq_dist(pts[i], pts[j]).sqrt())
        })
        .collect();
    let n = dists.len();
    let mid = n / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    };
    if median <= 0.0 {
        return Err(DivergenceError::DegenerateBandwidth);
    }
    Ok(median)
}

fn mean_kernel(x: &[&[f64]], y: &[&[f64]], sigma: f64, skip_diagonal: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            sum += rbf(a, b, sigma);
            count += 1;
        }
    }
    sum / count as f64
}

/// Squared MMD between two samples under an RBF kernel of width `sigma`.
pub fn mmd2(x: &[&[f64]], y: &[&[f64]], sigma: f64, estimator: Estimator) -> Result<f64, DivergenceError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DivergenceError::InvalidBandwidth(sigma));
    }
    let got = x.len().min(y.len());
    if got < 2 {
        return Err(DivergenceError::TooFewSamples { need: 2, got });
    }
    let dim = x[0].len();
    if let Some(p) = x.iter().chain(y).find(|p| p.len() != dim) {
        return Err(DivergenceError::Dimension { expected: dim, got: p.len() });
    }
    let unbiased = estimator == Estimator::Unbiased;
    let xx = mean_kernel(x, x, sigma, unbiased);
    let yy = mean_kernel(y, y, sigma, unbiased);
    let xy = mean_kernel(x, y, sigma, false);
    Ok(xx + yy - 2.0 * xy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// `(1 + #{permuted >= observed}) / (1 + n_permutations)`.
    pub p_value: f64,
    pub null: Vec<f64>,
}

/// Permutation test of equal distributions: pooled samples are reshuffled
/// into groups of the original sizes.
pub fn permutation_test(
    x: &[&[f64]],
    y: &[&[f64]],
    sigma: f64,
    estimator: Estimator,
    n_permutations: usize,
    seed: u64,
) -> Result<PermutationTest, DivergenceError> {
    let statistic = mmd2(x, y, sigma, estimator)?;
    let pooled: Vec<&[f64]> = x.iter().chain(y).copied().collect();
    let null: Vec<f64> = (0..n_permutations)
        .into_par_iter()
        .map(|r| {
            let mut perm = pooled.clone();
            perm.shuffle(&mut rng_for(seed, "mmd-permutation", r as u64));
            let (a, b) = perm.split_at(x.len());
            mmd2(a, b, sigma, estimator).expect("sizes checked above")
        })
        .collect();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest { statistic, p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64, null })
}

/// Pairwise discrepancies between all domains of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdMatrix {
    pub names: Vec<String>,
    /// Symmetric, zero diagonal, raw (unscaled) squared MMD.
    pub values: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub estimator: Estimator,
    pub conditioning: Conditioning,
}

impl MmdMatrix {
    /// Discrepancy of each target domain from the source, `t = 1..=T`.
    pub fn to_source(&self) -> Vec<f64> {
        self.values[0][1..].to_vec()
    }
}

/// Sample of a domain's instances (all splits) with their gold labels,
/// capped at `cap` by a seeded draw that keeps arrival order.
fn domain_sample(domain: &Domain, cap: Option<usize>, seed: u64) -> Vec<(&[f64], Option<usize>)> {
    let all: Vec<(u64, &[f64], Option<usize>)> =
        domain.instances().map(|i| (i.arrival_order, i.features.as_slice(), i.gold_label)).collect();
    let mut chosen: Vec<_> = match cap {
        Some(c) if all.len() > c => {
            let mut rng = rng_for(seed, "mmd-subsample", domain.index as u64);
            all.choose_multiple(&mut rng, c).cloned().collect()
        }
        _ => all,
    };
    chosen.sort_by_key(|(a, _, _)| *a);
    chosen.into_iter().map(|(_, x, y)| (x, y)).collect()
}

fn of_class<'a>(sample: &[(&'a [f64], Option<usize>)], c: usize) -> Vec<&'a [f64]> {
    sample.iter().filter(|(_, y)| *y == Some(c)).map(|(x, _)| *x).collect()
}

fn pair_mmd(
    a: &[(&[f64], Option<usize>)],
    b: &[(&[f64], Option<usize>)],
    sigma: f64,
    estimator: Estimator,
    conditioning: Conditioning,
) -> Result<f64, DivergenceError> {
    match conditioning {
        Conditioning::Marginal => {
            let xa: Vec<&[f64]> = a.iter().map(|(x, _)| *x).collect();
            let xb: Vec<&[f64]> = b.iter().map(|(x, _)| *x).collect();
            mmd2(&xa, &xb, sigma, estimator)
        }
        Conditioning::Class(c) => mmd2(&of_class(a, c), &of_class(b, c), sigma, estimator),
    }
}

/// Squared MMD between every pair of domains. One bandwidth, chosen by the
/// median heuristic over the sampled points of the whole stream, is shared
/// by every cell. `subsample_cap` bounds the points drawn per domain.
pub fn mmd_matrix(
    stream: &DomainStream,
    conditioning: Conditioning,
    estimator: Estimator,
    subsample_cap: Option<usize>,
    seed: u64,
) -> Result<MmdMatrix, DivergenceError> {
    if let Conditioning::Class(c) = conditioning {
        if c >= stream.num_classes {
            return Err(DivergenceError::UnknownClass(c));
        }
    }
    let samples: Vec<_> = stream.domains.iter().map(|d| domain_sample(d, subsample_cap, seed)).collect();
    let pooled: Vec<&[f64]> = samples.iter().flatten().map(|(x, _)| *x).collect();
    let bandwidth = median_heuristic_bandwidth(&pooled)?;
    let n = samples.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let cells: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| pair_mmd(&samples[i], &samples[j], bandwidth, estimator, conditioning))
        .collect::<Result<_, _>>()?;
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(cells) {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(MmdMatrix {
        names: stream.domains.iter().map(|d| d.name.clone()).collect(),
        values,
        bandwidth,
        estimator,
        conditioning,
    })
}
