//! Synthetic open-set multi-domain datasets.
//!
//! Every class has a base mean. Shared classes sit on a circle of radius
//! `radius` in the plane of coordinates 0 and 1; private (target-only)
//! classes sit on a circle of radius `private_radius` in the plane of
//! coordinates 2 and 3 (or on the first plane when `in_dim < 4`). A domain
//! moves every base mean by its affine transform (rotation of each
//! coordinate pair, scaling, translation) and adds isotropic Gaussian noise.
//! Private classes use `noise_sigma * private_spread`, making them sparse
//! relative to the shared clusters.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Provenance;
use crate::error::{Error, Result};
use crate::numcore::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            other => Err(Error::config(format!("unknown role {other:?}"))),
        }
    }
}

/// One point. Target samples never carry a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Option<usize>,
    pub domain_id: usize,
    pub role: Role,
}

/// Affine shift applied to class means of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Radians, applied to every coordinate pair (0,1), (2,3), ...
    pub rotation: f64,
    /// Zero-padded up to the input dimension.
    #[serde(default)]
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn identity(noise_sigma: f64) -> Self {
        Self { rotation: 0.0, translation: Vec::new(), scale: 1.0, noise_sigma }
    }

    /// Default shifts: sources rotate slightly clockwise, targets further
    /// counter-clockwise and translated, so sources never cover the targets.
    pub fn defaults(n_sources: usize, n_targets: usize) -> Vec<DomainSpec> {
        let source = (0..n_sources).map(|i| {
            let i = i as f64;
            DomainSpec {
                rotation: -0.1 * i,
                translation: vec![0.6 * i, -0.4 * i],
                scale: 1.0 + 0.05 * i,
                noise_sigma: 1.0,
            }
        });
        let target = (0..n_targets).map(|j| {
            let j = j as f64;
            DomainSpec {
                rotation: 0.25 + 0.1 * j,
                translation: vec![-1.0 + 0.8 * j, 1.2 - 0.4 * j],
                scale: 0.95 + 0.1 * j,
                noise_sigma: 1.0,
            }
        });
        source.chain(target).collect()
    }

    /// Moves a base mean into this domain.
    pub fn transform(&self, base: &[f64]) -> Vec<f64> {
        let (s, c) = self.rotation.sin_cos();
        let mut out = base.to_vec();
        for pair in out.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v * self.scale + self.translation.get(i).copied().unwrap_or(0.0);
        }
        out
    }

    fn validate(&self, in_dim: usize, idx: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("domain {idx}: scale must be > 0")));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("domain {idx}: noise_sigma must be > 0")));
        }
        if self.translation.len() > in_dim {
            return Err(Error::config(format!(
                "domain {idx}: translation has {} entries for in_dim {}",
                self.translation.len(),
                in_dim
            )));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("domain {idx}: non-finite transform")));
        }
        Ok(())
    }
}

/// Arguments of [`generate_bundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleSpec {
    pub n_sources: usize,
    pub n_targets: usize,
    pub shared_classes: usize,
    pub private_classes: usize,
    pub per_class: usize,
    pub in_dim: usize,
    pub radius: f64,
    pub private_radius: f64,
    pub private_spread: f64,
    /// One per domain, sources first. Empty means [`DomainSpec::defaults`].
    pub domain_specs: Vec<DomainSpec>,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self {
            n_sources: 2,
            n_targets: 2,
            shared_classes: 6,
            private_classes: 3,
            per_class: 50,
            in_dim: 16,
            radius: 10.0,
            private_radius: 10.0,
            private_spread: 10.0,
            domain_specs: Vec::new(),
        }
    }
}

impl BundleSpec {
    pub fn num_domains(&self) -> usize {
        self.n_sources + self.n_targets
    }

    /// Domain specs with defaults filled in.
    pub fn resolved_domain_specs(&self) -> Vec<DomainSpec> {
        if self.domain_specs.is_empty() {
            DomainSpec::defaults(self.n_sources, self.n_targets)
        } else {
            self.domain_specs.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sources < 1 || self.n_targets < 1 {
            return Err(Error::config("need at least one source and one target domain"));
        }
        if self.shared_classes < 2 {
            return Err(Error::config("shared_classes must be >= 2"));
        }
        if self.in_dim < 2 {
            return Err(Error::config("in_dim must be >= 2"));
        }
        if self.per_class < 1 {
            return Err(Error::config("per_class must be >= 1"));
        }
        for (name, v) in [
            ("radius", self.radius),
            ("private_radius", self.private_radius),
            ("private_spread", self.private_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0")));
            }
        }
        let specs = self.resolved_domain_specs();
        if specs.len() != self.num_domains() {
            return Err(Error::config(format!(
                "{} domain specs for {} domains",
                specs.len(),
                self.num_domains()
            )));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate(self.in_dim, i)?;
        }
        Ok(())
    }

    /// Base mean of class `c` (shared classes first, then private ones).
    pub fn base_mean(&self, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.in_dim];
        let (plane, k, total, r) = if c < self.shared_classes {
            (0, c, self.shared_classes, self.radius)
        } else {
            let plane = if self.in_dim >= 4 { 2 } else { 0 };
            // offset by half a step so private means never coincide with shared ones
            (plane, c - self.shared_classes, self.private_classes, self.private_radius)
        };
        let mut angle = 2.0 * std::f64::consts::PI * k as f64 / total as f64;
        if c >= self.shared_classes {
            angle += std::f64::consts::PI / total as f64;
        }
        m[plane] = r * angle.cos();
        m[plane + 1] = r * angle.sin();
        m
    }
}

/// Labelled sources and unlabelled targets, plus the hidden target truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: BundleSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
    eval_truth: Vec<usize>,
}

/// Per-domain summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCount {
    pub domain_id: usize,
    pub role: Role,
    pub count: usize,
}

impl DatasetBundle {
    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn shared_classes(&self) -> usize {
        self.spec.shared_classes
    }

    /// Class id used for every private class in the evaluation truth.
    pub fn unknown_id(&self) -> usize {
        self.spec.shared_classes
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains()
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        (0..self.num_domains()).collect()
    }

    pub fn role_of_domain(&self, d: usize) -> Role {
        if d < self.spec.n_sources {
            Role::Source
        } else {
            Role::Target
        }
    }

    pub fn indices_of_role(&self, role: Role) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].role == role).collect()
    }

    pub fn indices_of_domain(&self, d: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].domain_id == d).collect()
    }

    pub fn per_domain_counts(&self) -> Vec<DomainCount> {
        self.domain_ids()
            .into_iter()
            .map(|d| DomainCount {
                domain_id: d,
                role: self.role_of_domain(d),
                count: self.samples.iter().filter(|s| s.domain_id == d).count(),
            })
            .collect()
    }

    /// Ground-truth class of every sample, with private classes collapsed to
    /// [`DatasetBundle::unknown_id`]. Reserved for evaluation and logging of
    /// label quality; no training path may read it.
    pub fn eval_truth(&self) -> &[usize] {
        &self.eval_truth
    }

    /// Copy with every label removed (source labels included).
    pub fn without_labels(&self) -> Self {
        let mut b = self.clone();
        for s in &mut b.samples {
            s.label = None;
        }
        b
    }

    pub fn write_to<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        let header = BundleHeader {
            format: BUNDLE_FORMAT.to_string(),
            spec: self.spec.clone(),
            seed: self.seed,
            counts: self.per_domain_counts(),
            provenance: provenance.cloned(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        let xs: Vec<String> = (0..self.in_dim()).map(|i| format!("x_{i}")).collect();
        writeln!(w, "domain_id,role,{},label,eval_label", xs.join(","))?;
        for (s, truth) in self.samples.iter().zip(&self.eval_truth) {
            let xs: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            let label = s.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", s.domain_id, s.role, xs.join(","), label, truth)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, path: &Path) -> Result<(Self, Option<Provenance>)> {
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let header: BundleHeader = serde_json::from_str(&header_line)?;
        if header.format != BUNDLE_FORMAT {
            return Err(bad(format!("unsupported format {:?}", header.format)));
        }
        let d = header.spec.in_dim;
        let _columns = lines.next().ok_or_else(|| bad("missing column header".into()))??;
        let mut samples = Vec::new();
        let mut eval_truth = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != d + 4 {
                return Err(bad(format!("row {}: {} columns, expected {}", ln + 1, cols.len(), d + 4)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", ln + 1)));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("row {}: {e}", ln + 1)));
            let x = cols[2..2 + d].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let label = match cols[2 + d] {
                "" => None,
                s => Some(int(s)?),
            };
            samples.push(Sample { x, label, domain_id: int(cols[0])?, role: cols[1].parse()? });
            eval_truth.push(int(cols[3 + d])?);
        }
        let bundle = DatasetBundle { spec: header.spec, seed: header.seed, samples, eval_truth };
        if bundle.per_domain_counts() != header.counts {
            return Err(bad("row counts disagree with header".into()));
        }
        Ok((bundle, header.provenance))
    }
}

const BUNDLE_FORMAT: &str = "degaa-bundle/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    spec: BundleSpec,
    seed: u64,
    counts: Vec<DomainCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

/// Samples every class of every domain from its shifted Gaussian.
///
/// Sources hold shared classes only; targets additionally hold the private
/// classes. Output order is domain, then class, then draw.
pub fn generate_bundle(spec: &BundleSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let specs = spec.resolved_domain_specs();
    let mut rng = rng_for(seed, 0);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::new();
    let mut eval_truth = Vec::new();

    for (d, dspec) in specs.iter().enumerate() {
        let role = if d < spec.n_sources { Role::Source } else { Role::Target };
        let classes = match role {
            Role::Source => spec.shared_classes,
            Role::Target => spec.shared_classes + spec.private_classes,
        };
        for c in 0..classes {
            let mean = dspec.transform(&spec.base_mean(c));
            let private = c >= spec.shared_classes;
            let sigma = if private { dspec.noise_sigma * spec.private_spread } else { dspec.noise_sigma };
            for _ in 0..spec.per_class {
                let x = mean.iter().map(|m| m + sigma * std_normal.sample(&mut rng)).collect();
                let label = (role == Role::Source).then_some(c);
                samples.push(Sample { x, label, domain_id: d, role });
                eval_truth.push(if private { spec.shared_classes } else { c });
            }
        }
    }
    Ok(DatasetBundle { spec: spec.clone(), seed, samples, eval_truth })
}

/// Endless mini-batch stream over a fixed pool of sample indices.
///
/// Each epoch is a fresh uniform shuffle of the pool cut into
/// `batch_size` chunks; a trailing partial chunk is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, batch_size: usize) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::contract("batch sampler over an empty pool"));
        }
        if batch_size == 0 || batch_size > pool.len() {
            return Err(Error::contract(format!(
                "batch size {} must lie in [1, {}]",
                batch_size,
                pool.len()
            )));
        }
        let cursor = pool.len();
        Ok(Self { pool, batch_size, order: Vec::new(), cursor })
    }

    /// Sampler over all samples of `role`.
    pub fn for_role(bundle: &DatasetBundle, role: Role, batch_size: usize) -> Result<Self> {
        Self::new(bundle.indices_of_role(role), batch_size)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }
}

/// `k` distinct elements of `pool`, uniformly, in sampled order.
pub fn sample_distinct(pool: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::contract(format!("cannot draw {} from {} items", k, pool.len())));
    }
    let mut v = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(k);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BundleSpec {
        BundleSpec {
            n_sources: 1,
            n_targets: 1,
            shared_classes: 2,
            private_classes: 0,
            per_class: 10,
            ..BundleSpec::default()
        }
    }

    #[test]
    fn count_bookkeeping() {
        let b = generate_bundle(&small(), 1).unwrap();
        assert_eq!(b.indices_of_role(Role::Source).len(), 20);
        assert_eq!(b.indices_of_role(Role::Target).len(), 20);
        assert!(b.eval_truth().iter().all(|&t| t < 2));
        assert!(b.samples.iter().filter(|s| s.role == Role::Target).all(|s| s.label.is_none()));
        assert!(b.samples.iter().filter(|s| s.role == Role::Source).all(|s| s.label.is_some()));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = BundleSpec::default();
        let a = generate_bundle(&spec, 9).unwrap();
        let b = generate_bundle(&spec, 9).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        a.write_to(&mut wa, None).unwrap();
        b.write_to(&mut wb, None).unwrap();
        assert_eq!(wa, wb);
        assert_ne!(a, generate_bundle(&spec, 10).unwrap());
    }

    #[test]
    fn private_classes_only_in_targets() {
        let b = generate_bundle(&BundleSpec::default(), 0).unwrap();
        for (s, &t) in b.samples.iter().zip(b.eval_truth()) {
            if s.role == Role::Source {
                assert!(t < b.shared_classes());
            }
        }
        for d in 2..4 {
            let unknown = b.indices_of_domain(d).iter().filter(|&&i| b.eval_truth()[i] == 6).count();
            assert_eq!(unknown, 150);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            BundleSpec { n_sources: 0, ..small() },
            BundleSpec { shared_classes: 1, ..small() },
            BundleSpec { in_dim: 1, ..small() },
            BundleSpec { domain_specs: vec![DomainSpec::identity(0.5)], ..small() },
            BundleSpec { domain_specs: vec![DomainSpec::identity(0.0); 2], ..small() },
        ];
        for spec in bad {
            assert!(matches!(generate_bundle(&spec, 0), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn round_trip_through_text() {
        let b = generate_bundle(&BundleSpec { private_classes: 1, ..small() }, 4).unwrap();
        let prov = Provenance { config_hash: "abc".into(), seed: 4 };
        let mut buf = Vec::new();
        b.write_to(&mut buf, Some(&prov)).unwrap();
        let (back, p) = DatasetBundle::read_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, b);
        assert_eq!(p, Some(prov));
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut rng = rng_for(0, 0);
        let mut s = BatchSampler::new((0..17).collect(), 17).unwrap();
        let mut b = s.next_batch(&mut rng);
        b.sort_unstable();
        assert_eq!(b, (0..17).collect::<Vec<_>>());
        assert!(BatchSampler::new(vec![], 1).is_err());
        assert!(BatchSampler::new(vec![1, 2], 3).is_err());
    }

    #[test]
    fn same_seed_same_batches() {
        let run = || {
            let mut rng = rng_for(5, 1);
            let mut s = BatchSampler::new((0..30).collect(), 7).unwrap();
            (0..10).map(|_| s.next_batch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
