//! Domain embeddings.
//!
//! An embedding network `G` is trained episodically: each episode draws a
//! few domains, splits a handful of each domain's points into support and
//! query sets, and scores every query against the per-domain support means
//! with a softmax over negative squared distances. No class label is ever
//! read. After training, the mean embedding of every domain over all of its
//! points is frozen into a [`DomainEmbeddingTable`].

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{sample_distinct, DatasetBundle};
use crate::error::{Error, Result};
use crate::numcore::{
    collect_grads, column_means, cosine_lr, BoundMlp, Mlp, Module, Rng, Sgd, SgdConfig, Tape, Tensor,
    Var,
};

/// `G(x; psi)`: an MLP from the input space to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub mlp: Mlp,
}

impl EmbeddingNet {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        Ok(Self { mlp: Mlp::he(&widths, rng)? })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Embeds each row of `xs`.
    pub fn embed<R: AsRef<[f64]>>(&self, xs: &[R]) -> Result<Tensor> {
        self.mlp.eval(&Tensor::from_rows(xs)?)
    }
}

impl Module for EmbeddingNet {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named("embed")
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Domains drawn per episode.
    pub domains_per_episode: usize,
    pub support: usize,
    pub query: usize,
    pub episodes: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { domains_per_episode: 4, support: 10, query: 10, episodes: 400 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains_per_episode < 2 {
            return Err(Error::config("domains_per_episode must be >= 2"));
        }
        if self.support < 1 || self.query < 1 {
            return Err(Error::config("support and query must be >= 1"));
        }
        Ok(())
    }
}

/// Sample indices for one episode; position `i` in each list belongs to
/// `domains[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub domains: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

/// Mean embedding `(1/N) sum G(x)` of a point set.
///
/// Uses the order-independent mean, so the result is exactly invariant to
/// permuting the points or repeating the whole set.
pub fn kme<R: AsRef<[f64]>>(samples: &[R], net: &EmbeddingNet) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::contract("kme of an empty set"));
    }
    let emb = net.embed(samples)?;
    Ok(column_means(&emb.row_vecs()))
}

/// Draws `domains_per_episode` distinct domains, then disjoint support and
/// query sets inside each.
pub fn sample_episode(bundle: &DatasetBundle, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<Episode> {
    cfg.validate()?;
    let all = bundle.domain_ids();
    if cfg.domains_per_episode > all.len() {
        return Err(Error::config(format!(
            "episode wants {} domains but the bundle has {}",
            cfg.domains_per_episode,
            all.len()
        )));
    }
    let domains = sample_distinct(&all, cfg.domains_per_episode, rng)?;
    let mut support = Vec::with_capacity(domains.len());
    let mut query = Vec::with_capacity(domains.len());
    for &d in &domains {
        let pool = bundle.indices_of_domain(d);
        let need = cfg.support + cfg.query;
        if pool.len() < need {
            return Err(Error::config(format!(
                "domain {} has {} points, episode needs {}",
                d,
                pool.len(),
                need
            )));
        }
        let mut drawn = sample_distinct(&pool, need, rng)?;
        let q = drawn.split_off(cfg.support);
        support.push(drawn);
        query.push(q);
    }
    Ok(Episode { domains, support, query })
}

fn rows(bundle: &DatasetBundle, idx: &[usize]) -> Result<Tensor> {
    let xs: Vec<&[f64]> = idx.iter().map(|&i| bundle.samples[i].x.as_slice()).collect();
    Tensor::from_rows(&xs)
}

/// Records the prototypical loss of `episode` on `tape` and returns it.
pub fn prototypical_loss(
    tape: &mut Tape,
    net: &BoundMlp,
    bundle: &DatasetBundle,
    episode: &Episode,
) -> Result<Var> {
    if episode.domains.len() < 2 {
        return Err(Error::contract("prototypical loss needs at least two domains"));
    }
    let mut prototypes = Vec::with_capacity(episode.domains.len());
    for s in &episode.support {
        let x = tape.constant(rows(bundle, s)?)?;
        let e = net.forward(tape, x)?;
        prototypes.push(tape.mean_rows(e)?);
    }
    let protos = tape.concat_rows(&prototypes)?;

    let mut q_idx = Vec::new();
    let mut labels = Vec::new();
    for (pos, q) in episode.query.iter().enumerate() {
        q_idx.extend_from_slice(q);
        labels.extend(std::iter::repeat_n(pos, q.len()));
    }
    let q = tape.constant(rows(bundle, &q_idx)?)?;
    let eq = net.forward(tape, q)?;
    let dist = tape.sq_dist(eq, protos)?;
    let logits = tape.scale(dist, -1.0)?;
    tape.cross_entropy_logits(logits, &labels)
}

/// Value of the prototypical loss without keeping the tape.
pub fn prototypical_loss_value(bundle: &DatasetBundle, episode: &Episode, net: &EmbeddingNet) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.mlp.bind(&mut tape)?;
    let loss = prototypical_loss(&mut tape, &bound, bundle, episode)?;
    Ok(tape.value(loss).item())
}

/// Episodic SGD on `net`. Returns the trained net and the per-episode loss.
pub fn train_embedding(
    bundle: &DatasetBundle,
    mut net: EmbeddingNet,
    cfg: &EpisodeConfig,
    sgd: &SgdConfig,
    rng: &mut Rng,
) -> Result<(EmbeddingNet, Vec<f64>)> {
    cfg.validate()?;
    let sched = sgd.with_total_steps(cfg.episodes);
    let mut opt = Sgd::new(&sched);
    let mut log = Vec::with_capacity(cfg.episodes);
    for step in 0..cfg.episodes {
        let episode = sample_episode(bundle, cfg, rng)?;
        let mut tape = Tape::new();
        let bound = net.mlp.bind(&mut tape)?;
        let loss = prototypical_loss(&mut tape, &bound, bundle, &episode)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&grads, &bound.vars(), &net.parameters());
        opt.step(net.parameters_mut(), &grads, cosine_lr(step, &sched)?)?;
        if step % 100 == 0 {
            debug!("embed episode {step}: loss {value:.5}");
        }
        log.push(value);
    }
    Ok((net, log))
}

/// Frozen per-domain mean embeddings, keyed by domain id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<usize, Vec<f64>>,
}

impl DomainEmbeddingTable {
    pub fn get(&self, domain: usize) -> Result<&[f64]> {
        self.entries
            .get(&domain)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("no domain embedding for domain {domain}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (d, v) in &self.entries {
            if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("embedding of domain {d} is malformed")));
            }
        }
        Ok(())
    }
}

/// Mean embedding of every domain over all of its points.
pub fn build_embedding_table(bundle: &DatasetBundle, net: &EmbeddingNet) -> Result<DomainEmbeddingTable> {
    let mut entries = BTreeMap::new();
    for d in bundle.domain_ids() {
        let xs: Vec<&[f64]> = bundle.indices_of_domain(d).iter().map(|&i| bundle.samples[i].x.as_slice()).collect();
        entries.insert(d, kme(&xs, net)?);
    }
    Ok(DomainEmbeddingTable { dim: net.out_dim(), entries })
}
