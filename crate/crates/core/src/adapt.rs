//! Joint adaptation of the feature extractor and the aggregation network on
//! labelled source batches and pseudo-labelled target batches, plus the
//! open-set evaluation metrics.

use std::collections::BTreeMap;

use log::{debug, info};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::backbone::{compute_centroids, Backbone, Centroids, Conditioner};
use crate::data::{sample_distinct, BatchSampler, DatasetBundle, Role};
use crate::error::{Error, Result};
use crate::gaa::{GaaNetwork, GraphBatch};
use crate::numcore::{collect_grads, cosine_lr, Module, Rng, Sgd, SgdConfig, Tape, Tensor, Var};
use crate::openset::{assign_pseudo_labels, split_known_unknown, LofConfig, LofProjection, PseudoLabelSet};

/// Domain id given to centroid nodes, which summarise all source domains.
pub const CENTROID_DOMAIN: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    /// One node per shared-class centroid.
    Centroids,
    /// A random source batch of `source_batch` samples.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Weight of the pseudo-labelled target term.
    pub lambda: f64,
    /// Episodes between pseudo-label refreshes.
    pub refresh_period: usize,
    /// Number of refreshes.
    pub outer_iters: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub refresh_centroids: bool,
    /// Draw new batches for every episode instead of once per refresh.
    pub resample_per_episode: bool,
    pub eval_source: EvalSource,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            refresh_period: 50,
            outer_iters: 20,
            source_batch: 64,
            target_batch: 64,
            refresh_centroids: true,
            resample_per_episode: false,
            eval_source: EvalSource::Centroids,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("{name}.lambda must be >= 0, got {}", self.lambda)));
        }
        if self.refresh_period == 0 {
            return Err(Error::config(format!("{name}.refresh_period must be >= 1")));
        }
        if self.source_batch == 0 {
            return Err(Error::config(format!("{name}.source_batch must be >= 1")));
        }
        if self.target_batch < 2 {
            return Err(Error::config(format!("{name}.target_batch must be >= 2")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.outer_iters * self.refresh_period
    }
}

/// Everything the adaptation stage trains or carries.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub backbone: Backbone,
    pub gaa: GaaNetwork,
    pub centroids: Centroids,
    pub projection: Option<LofProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub pseudo_acc: Option<f64>,
    pub unknown_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub refresh: usize,
    pub iter: usize,
    pub known: usize,
    pub unknown: usize,
    pub batch_pseudo_acc: Option<f64>,
    pub batch_unknown_recall: Option<f64>,
    /// Same quantities over the whole target pool.
    pub pool_pseudo_acc: Option<f64>,
    pub pool_unknown_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLogs {
    pub episodes: Vec<EpisodeRecord>,
    pub refreshes: Vec<RefreshRecord>,
}

/// Fraction of LOF-known points whose pseudo-label equals the true class.
pub fn pseudo_accuracy(bundle: &DatasetBundle, idx: &[usize], set: &PseudoLabelSet) -> Option<f64> {
    if set.known.is_empty() {
        return None;
    }
    let truth = bundle.eval_truth();
    let hits = set.known.iter().zip(&set.labels).filter(|(&p, &c)| truth[idx[p]] == c).count();
    Some(hits as f64 / set.known.len() as f64)
}

/// Fraction of truly unknown points that LOF flagged.
pub fn unknown_recall(bundle: &DatasetBundle, idx: &[usize], set: &PseudoLabelSet) -> Option<f64> {
    let truth = bundle.eval_truth();
    let unk = bundle.unknown_id();
    let total = idx.iter().filter(|&&i| truth[i] == unk).count();
    if total == 0 {
        return None;
    }
    let hits = set.unknown.iter().filter(|&&p| truth[idx[p]] == unk).count();
    Some(hits as f64 / total as f64)
}

fn lof_input(features: &Tensor, projection: Option<&LofProjection>) -> Result<Tensor> {
    match projection {
        Some(p) => p.apply(features),
        None => Ok(features.clone()),
    }
}

/// Features of target samples `idx`, LOF split and nearest-centroid labels.
pub fn label_batch(
    bundle: &DatasetBundle,
    idx: &[usize],
    state: &AdaptState,
    cond: &Conditioner,
    lof: &LofConfig,
) -> Result<PseudoLabelSet> {
    let feats = state.backbone.features(bundle, idx, cond)?;
    let scored = lof_input(&feats, state.projection.as_ref())?;
    // LOF may see projected features; centroid distances use the originals.
    let (known, unknown, scores) = split_known_unknown(&scored.row_vecs(), lof)?;
    let kept: Vec<&[f64]> = known.iter().map(|&p| feats.row(p)).collect();
    let labels = assign_pseudo_labels(&kept, &state.centroids.classes)?;
    Ok(PseudoLabelSet { known, unknown, labels, scores })
}

/// `[rows(sel); ...]` as an exact 0/1 selection product.
fn select_rows(tape: &mut Tape, x: Var, rows: std::ops::Range<usize>) -> Result<Var> {
    let n = tape.value(x).rows();
    let mut sel = Tensor::zeros(&[rows.len(), n]);
    for (r, i) in rows.enumerate() {
        sel.data_mut()[r * n + i] = 1.0;
    }
    let s = tape.constant(sel)?;
    tape.matmul(s, x)
}

/// Loss terms of one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss {
    pub total: Var,
    pub source: Var,
    pub target: Option<Var>,
}

/// Records `CE(source) + lambda * CE(known targets, pseudo-labels)` on `tape`.
///
/// `bound_trunk` and `bound_gaa` must be bound on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    bound_trunk: &crate::numcore::BoundMlp,
    bound_gaa: &crate::gaa::BoundGaa,
    backbone: &Backbone,
    bundle: &DatasetBundle,
    cond: &Conditioner,
    source: &[usize],
    targets: &[usize],
    pseudo: &[usize],
    lambda: f64,
) -> Result<EpisodeLoss> {
    if targets.len() != pseudo.len() {
        return Err(Error::dim("episode_loss", format!("{} targets, {} pseudo-labels", targets.len(), pseudo.len())));
    }
    let labels = source
        .iter()
        .map(|&i| bundle.samples[i].label.ok_or_else(|| Error::contract("source sample without label")))
        .collect::<Result<Vec<_>>>()?;
    let mut all = source.to_vec();
    all.extend_from_slice(targets);
    let x = tape.constant(backbone.input_matrix(bundle, &all, cond)?)?;
    let feats = bound_trunk.forward(tape, x)?;
    let graph = GraphBatch::new(
        all.iter().map(|&i| bundle.samples[i].role).collect(),
        all.iter().map(|&i| bundle.samples[i].domain_id).collect(),
    )?;
    let fwd = if targets.is_empty() {
        bound_gaa.forward_lenient(tape, feats, &graph)?
    } else {
        bound_gaa.forward(tape, feats, &graph)?
    };
    let ns = source.len();
    let src_logits = select_rows(tape, fwd.logits, 0..ns)?;
    let src_loss = tape.cross_entropy_logits(src_logits, &labels)?;
    if targets.is_empty() {
        return Ok(EpisodeLoss { total: src_loss, source: src_loss, target: None });
    }
    let tgt_logits = select_rows(tape, fwd.logits, ns..all.len())?;
    let tgt_loss = tape.cross_entropy_logits(tgt_logits, pseudo)?;
    let weighted = tape.scale(tgt_loss, lambda)?;
    let total = tape.add(src_loss, weighted)?;
    Ok(EpisodeLoss { total, source: src_loss, target: Some(tgt_loss) })
}

struct Batches {
    source: Vec<usize>,
    targets: Vec<usize>,
    labels: PseudoLabelSet,
}

fn draw_batches(
    bundle: &DatasetBundle,
    state: &AdaptState,
    cond: &Conditioner,
    lof: &LofConfig,
    samplers: &mut (BatchSampler, BatchSampler),
    rng: &mut Rng,
) -> Result<Batches> {
    let source = samplers.0.next_batch(rng);
    let targets = samplers.1.next_batch(rng);
    let labels = label_batch(bundle, &targets, state, cond, lof)?;
    Ok(Batches { source, targets, labels })
}

/// Pseudo-label quality over every target sample under the current state.
pub fn pool_quality(
    bundle: &DatasetBundle,
    state: &AdaptState,
    cond: &Conditioner,
    lof: &LofConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let idx = bundle.indices_of_role(Role::Target);
    let set = label_batch(bundle, &idx, state, cond, lof)?;
    Ok((pseudo_accuracy(bundle, &idx, &set), unknown_recall(bundle, &idx, &set)))
}

/// Runs `outer_iters` refreshes of `refresh_period` episodes each.
pub fn run_adaptation(
    bundle: &DatasetBundle,
    cond: &Conditioner,
    mut state: AdaptState,
    cfg: &AdaptConfig,
    lof: &LofConfig,
    sgd: &SgdConfig,
    rng: &mut Rng,
) -> Result<(AdaptState, AdaptLogs)> {
    cfg.validate("adapt")?;
    let mut logs = AdaptLogs::default();
    if cfg.outer_iters == 0 {
        return Ok((state, logs));
    }
    let sched = sgd.with_total_steps(cfg.total_steps());
    let mut opt = Sgd::new(&sched);
    let mut samplers = (
        BatchSampler::for_role(bundle, Role::Source, cfg.source_batch)?,
        BatchSampler::for_role(bundle, Role::Target, cfg.target_batch)?,
    );
    let mut iter = 0;
    for refresh in 0..cfg.outer_iters {
        if cfg.refresh_centroids && refresh > 0 {
            state.centroids = compute_centroids(bundle, cond, &state.backbone)?;
        }
        let mut batches = draw_batches(bundle, &state, cond, lof, &mut samplers, rng)?;
        let (pool_acc, pool_recall) = pool_quality(bundle, &state, cond, lof)?;
        let record = RefreshRecord {
            refresh,
            iter,
            known: batches.labels.known.len(),
            unknown: batches.labels.unknown.len(),
            batch_pseudo_acc: pseudo_accuracy(bundle, &batches.targets, &batches.labels),
            batch_unknown_recall: unknown_recall(bundle, &batches.targets, &batches.labels),
            pool_pseudo_acc: pool_acc,
            pool_unknown_recall: pool_recall,
        };
        info!(
            "refresh {refresh}: known {}/{}, pool pseudo-acc {:?}, pool unknown recall {:?}",
            record.known,
            batches.targets.len(),
            pool_acc,
            pool_recall
        );
        logs.refreshes.push(record);

        for k in 0..cfg.refresh_period {
            if cfg.resample_per_episode && k > 0 {
                batches = draw_batches(bundle, &state, cond, lof, &mut samplers, rng)?;
            }
            let known: Vec<usize> = batches.labels.known.iter().map(|&p| batches.targets[p]).collect();
            let mut tape = Tape::new();
            let bound_trunk = state.backbone.trunk.bind(&mut tape)?;
            let bound_gaa = state.gaa.bind(&mut tape)?;
            let loss = episode_loss(
                &mut tape,
                &bound_trunk,
                &bound_gaa,
                &state.backbone,
                bundle,
                cond,
                &batches.source,
                &known,
                &batches.labels.labels,
                cfg.lambda,
            )?;
            let value = tape.value(loss.total).item();
            let grads = tape.backward(loss.total)?;
            let mut vars = bound_trunk.vars();
            vars.extend(bound_gaa.vars());
            let mut params = state.backbone.trunk.parameters();
            params.extend(state.gaa.parameters());
            let grads = collect_grads(&grads, &vars, &params);
            let lr = cosine_lr(iter, &sched)?;
            let mut params_mut = state.backbone.trunk.parameters_mut();
            params_mut.extend(state.gaa.parameters_mut());
            opt.step(params_mut, &grads, lr)?;
            logs.episodes.push(EpisodeRecord {
                iter,
                loss: value,
                lr,
                pseudo_acc: pseudo_accuracy(bundle, &batches.targets, &batches.labels),
                unknown_recall: unknown_recall(bundle, &batches.targets, &batches.labels),
            });
            if iter % 100 == 0 {
                debug!("adapt iter {iter}: loss {value:.5} lr {lr:.2e}");
            }
            iter += 1;
        }
    }
    Ok((state, logs))
}

/// Hit and sample counts of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub hits: u64,
    pub total: u64,
}

impl ClassTally {
    pub fn recall(&self) -> Option<Ratio<i128>> {
        (self.total > 0).then(|| Ratio::new(self.hits as i128, self.total as i128))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub os: f64,
    pub os_star: f64,
    pub unknown_recall: Option<f64>,
    /// Recall per class id; the unknown class has id `shared_classes`.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub tallies: Vec<ClassTally>,
    pub shared_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy: Option<f64>,
}

fn ratio_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn mean_ratio(rs: &[Ratio<i128>]) -> Ratio<i128> {
    if rs.is_empty() {
        return Ratio::from_integer(0);
    }
    rs.iter().fold(Ratio::from_integer(0), |a, &b| a + b) / Ratio::from_integer(rs.len() as i128)
}

impl Metrics {
    /// Per-class recalls over ids `0..=shared` (id `shared` is unknown).
    /// Classes absent from `truth` are left out of both means.
    pub fn from_predictions(truth: &[usize], pred: &[usize], shared: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim("metrics", format!("{} truths for {} predictions", truth.len(), pred.len())));
        }
        let mut tallies = vec![ClassTally { hits: 0, total: 0 }; shared + 1];
        for (&t, &p) in truth.iter().zip(pred) {
            if t > shared || p > shared {
                return Err(Error::contract(format!("class id out of range 0..={shared}")));
            }
            tallies[t].total += 1;
            tallies[t].hits += u64::from(t == p);
        }
        let mut m = Self {
            os: 0.0,
            os_star: 0.0,
            unknown_recall: None,
            per_class_accuracy: BTreeMap::new(),
            tallies,
            shared_classes: shared,
            pseudo_label_accuracy: None,
        };
        for (c, t) in m.tallies.iter().enumerate() {
            if let Some(r) = t.recall() {
                m.per_class_accuracy.insert(c, ratio_f64(r));
            }
        }
        m.os = ratio_f64(m.os_ratio());
        m.os_star = ratio_f64(m.os_star_ratio());
        m.unknown_recall = m.unknown_recall_ratio().map(ratio_f64);
        Ok(m)
    }

    pub fn os_star_ratio(&self) -> Ratio<i128> {
        let rs: Vec<_> = self.tallies[..self.shared_classes].iter().filter_map(ClassTally::recall).collect();
        mean_ratio(&rs)
    }

    pub fn os_ratio(&self) -> Ratio<i128> {
        let rs: Vec<_> = self.tallies.iter().filter_map(ClassTally::recall).collect();
        mean_ratio(&rs)
    }

    pub fn unknown_recall_ratio(&self) -> Option<Ratio<i128>> {
        self.tallies[self.shared_classes].recall()
    }
}

/// Per-target predictions (`shared_classes` = unknown) and their metrics.
pub fn evaluate(
    bundle: &DatasetBundle,
    state: &AdaptState,
    cond: &Conditioner,
    lof: &LofConfig,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<(Metrics, Vec<usize>)> {
    let idx = bundle.indices_of_role(Role::Target);
    let unknown = bundle.unknown_id();
    let feats = state.backbone.features(bundle, &idx, cond)?;
    let scored = lof_input(&feats, state.projection.as_ref())?;
    let (known, _, _) = split_known_unknown(&scored.row_vecs(), lof)?;

    let mut pred = vec![unknown; idx.len()];
    if !known.is_empty() {
        let (source_rows, source_domains): (Vec<Vec<f64>>, Vec<usize>) = match cfg.eval_source {
            EvalSource::Centroids => {
                (state.centroids.classes.clone(), vec![CENTROID_DOMAIN; state.centroids.len()])
            }
            EvalSource::Sampled => {
                let pool = bundle.indices_of_role(Role::Source);
                let pick = sample_distinct(&pool, cfg.source_batch.min(pool.len()), rng)?;
                let f = state.backbone.features(bundle, &pick, cond)?;
                (f.row_vecs(), pick.iter().map(|&i| bundle.samples[i].domain_id).collect())
            }
        };
        let ns = source_rows.len();
        let mut rows = source_rows;
        rows.extend(known.iter().map(|&p| feats.row(p).to_vec()));
        let mut roles = vec![Role::Source; ns];
        roles.extend(std::iter::repeat_n(Role::Target, known.len()));
        let mut domains = source_domains;
        domains.extend(known.iter().map(|&p| bundle.samples[idx[p]].domain_id));
        let graph = GraphBatch::new(roles, domains)?;
        let out = state.gaa.eval(&Tensor::from_rows(&rows)?, &graph)?;
        let classes = out.logits.argmax_rows();
        for (r, &p) in known.iter().enumerate() {
            pred[p] = classes[ns + r];
        }
    }
    let truth: Vec<usize> = idx.iter().map(|&i| bundle.eval_truth()[i]).collect();
    Ok((Metrics::from_predictions(&truth, &pred, bundle.shared_classes())?, pred))
}

/// Average of per-seed metrics, field by field.
pub fn mean_metrics(runs: &[Metrics]) -> Option<MeanMetrics> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let avg = |f: &dyn Fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let recall: Option<Vec<f64>> = runs.iter().map(|m| m.unknown_recall).collect();
    Some(MeanMetrics {
        os: avg(&|m| m.os),
        os_star: avg(&|m| m.os_star),
        unknown_recall: recall.map(|v| v.iter().sum::<f64>() / n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub os: f64,
    pub os_star: f64,
    pub unknown_recall: Option<f64>,
}
