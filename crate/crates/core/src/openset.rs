//! Known/unknown partitioning of target features with the Local Outlier
//! Factor, and nearest-centroid pseudo-labels for the known part.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

pub const DEFAULT_K_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofConfig {
    /// Neighbour count; `None` means `min(20, n - 1)` for a set of `n` points.
    pub k: Option<usize>,
    /// Scores strictly above this are unknown. `"inf"` disables rejection.
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub epsilon: f64,
    /// Width of the fixed random projection applied before scoring.
    pub projection_dim: Option<usize>,
}

impl Default for LofConfig {
    fn default() -> Self {
        Self { k: None, threshold: 1.5, epsilon: 1e-12, projection_dim: None }
    }
}

impl LofConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.k == Some(0) {
            return Err(Error::config(format!("{name}.k must be >= 1")));
        }
        if self.threshold.is_nan() || self.threshold <= 1.0 {
            return Err(Error::config(format!("{name}.threshold must be > 1")));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("{name}.epsilon must be positive")));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::config(format!("{name}.projection_dim must be >= 1")));
        }
        Ok(())
    }

    /// Neighbour count for a set of `n` points.
    pub fn resolved_k(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| DEFAULT_K_CAP.min(n.saturating_sub(1)))
    }
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Text(s) => Err(serde::de::Error::custom(format!("threshold must be a number or \"inf\", got {s:?}"))),
    }
}

/// Result of labelling one target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    /// Positions (within the scored set) judged known, ascending.
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
    /// Class of each entry of `known`, in the same order.
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Per-position prediction: `Some(class)` for known, `None` for unknown.
    pub fn predictions(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (&i, &c) in self.known.iter().zip(&self.labels) {
            out[i] = Some(c);
        }
        out
    }
}

fn check_points<R: AsRef<[f64]>>(op: &'static str, points: &[R]) -> Result<usize> {
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::dim(op, format!("point of width {} among width {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op });
        }
    }
    Ok(dim)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// LOF score of every point, neighbourhoods tie-inclusive.
pub fn lof_scores<R: AsRef<[f64]>>(points: &[R], k: usize, epsilon: f64) -> Result<Vec<f64>> {
    let n = points.len();
    if k == 0 {
        return Err(Error::contract("lof_scores: k must be >= 1"));
    }
    if n < k + 1 {
        return Err(Error::contract(format!("lof_scores: k = {k} needs at least {} points, got {n}", k + 1)));
    }
    check_points("lof_scores", points)?;

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(points[i].as_ref(), points[j].as_ref());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let row = |i: usize| &dist[i * n..(i + 1) * n];

    let mut kdist = Vec::with_capacity(n);
    let mut others = Vec::with_capacity(n - 1);
    for p in 0..n {
        others.clear();
        others.extend(row(p).iter().enumerate().filter(|&(o, _)| o != p).map(|(_, &d)| d));
        let (_, kth, _) = others.select_nth_unstable_by(k - 1, f64::total_cmp);
        kdist.push(*kth);
    }

    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|p| (0..n).filter(|&o| o != p && row(p)[o] <= kdist[p]).collect())
        .collect();

    let lrd: Vec<f64> = (0..n)
        .map(|p| {
            let nb = &neighbours[p];
            let reach: f64 = nb.iter().map(|&o| kdist[o].max(row(p)[o])).sum();
            1.0 / (reach / nb.len() as f64).max(epsilon)
        })
        .collect();

    Ok((0..n)
        .map(|p| {
            let nb = &neighbours[p];
            nb.iter().map(|&o| lrd[o] / lrd[p]).sum::<f64>() / nb.len() as f64
        })
        .collect())
}

/// Partitions points by LOF score: unknown iff score > threshold.
pub fn split_known_unknown<R: AsRef<[f64]>>(
    points: &[R],
    cfg: &LofConfig,
) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let k = cfg.resolved_k(points.len());
    let scores = lof_scores(points, k, cfg.epsilon)?;
    let (unknown, known): (Vec<usize>, Vec<usize>) = (0..points.len()).partition(|&i| scores[i] > cfg.threshold);
    Ok((known, unknown, scores))
}

/// Index of the nearest centroid per point; ties go to the smallest class id.
pub fn assign_pseudo_labels<R: AsRef<[f64]>, C: AsRef<[f64]>>(points: &[R], centroids: &[C]) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(Error::contract("assign_pseudo_labels: no centroids"));
    }
    let dim = check_points("assign_pseudo_labels", centroids)?;
    points
        .iter()
        .map(|p| {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::dim(
                    "assign_pseudo_labels",
                    format!("point of width {} against centroids of width {dim}", p.len()),
                ));
            }
            let mut best = (0, f64::INFINITY);
            for (c, mu) in centroids.iter().enumerate() {
                let d: f64 = p.iter().zip(mu.as_ref()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// LOF split followed by nearest-centroid labels on the known part.
pub fn label_targets<R: AsRef<[f64]>, C: AsRef<[f64]>>(
    points: &[R],
    centroids: &[C],
    cfg: &LofConfig,
) -> Result<PseudoLabelSet> {
    let (known, unknown, scores) = split_known_unknown(points, cfg)?;
    let kept: Vec<&[f64]> = known.iter().map(|&i| points[i].as_ref()).collect();
    let labels = assign_pseudo_labels(&kept, centroids)?;
    Ok(PseudoLabelSet { known, unknown, labels, scores })
}

/// Fixed Gaussian map to the LOF input width, entries N(0, 1/out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofProjection {
    pub matrix: Tensor,
}

impl LofProjection {
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, (1.0 / out_dim as f64).sqrt()).expect("positive std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self { matrix: Tensor::matrix(in_dim, out_dim, data).expect("sized above") }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        features.matmul(&self.matrix)
    }
}
