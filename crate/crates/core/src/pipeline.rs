//! Stage orchestration: in-memory stage functions, their on-disk wrappers
//! with provenance checks, multi-seed runs and the ablation studies.

use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    evaluate, mean_metrics, run_adaptation, AdaptLogs, AdaptState, MeanMetrics, Metrics, RefreshRecord,
};
use crate::backbone::{
    compute_centroids, warmup_train, Backbone, BackboneHeader, Centroids, CombineMode, Conditioner,
};
use crate::checkpoint::{read_json, write_atomic, write_json, Checkpoint, Provenance};
use crate::config::RunConfig;
use crate::data::{generate_bundle, DatasetBundle};
use crate::embed::{build_embedding_table, train_embedding, DomainEmbeddingTable, EmbeddingNet};
use crate::error::{Error, Result};
use crate::gaa::{Aggregation, GaaHeader, GaaNetwork};
use crate::numcore::{rng_for, Linear, Mlp};
use crate::openset::LofProjection;

const STREAM_EMBED: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_ADAPT: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_PROJECTION: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Gen,
    Embed,
    Warmup,
    Adapt,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Gen, Stage::Embed, Stage::Warmup, Stage::Adapt, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Embed => "embed",
            Stage::Warmup => "warmup",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}; expected one of gen, embed, warmup, adapt, eval")))
    }
}

// ---------------------------------------------------------------------------
// In-memory stages

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub net: EmbeddingNet,
    pub table: DomainEmbeddingTable,
    pub log: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WarmupOutput {
    pub backbone: Backbone,
    pub centroids: Centroids,
    pub log: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub state: AdaptState,
    pub logs: AdaptLogs,
}

pub fn gen_stage(cfg: &RunConfig) -> Result<DatasetBundle> {
    generate_bundle(&cfg.data, cfg.seed)
}

/// Trains the embedding network on the bundle with every label removed.
pub fn embed_stage(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<EmbedOutput> {
    let blind = bundle.without_labels();
    let mut rng = rng_for(cfg.seed, STREAM_EMBED);
    let net = EmbeddingNet::new(blind.in_dim(), &cfg.embedding.hidden, cfg.embedding.dim, &mut rng)?;
    let (net, log) = train_embedding(&blind, net, &cfg.embedding.episode, &cfg.embedding.sgd, &mut rng)?;
    let table = build_embedding_table(&blind, &net)?;
    Ok(EmbedOutput { net, table, log })
}

pub fn conditioner(cfg: &RunConfig, table: &DomainEmbeddingTable) -> Conditioner {
    Conditioner::new(table.clone(), cfg.backbone.use_domain_embedding)
}

pub fn warmup_stage(cfg: &RunConfig, bundle: &DatasetBundle, table: &DomainEmbeddingTable) -> Result<WarmupOutput> {
    let cond = conditioner(cfg, table);
    let mut rng = rng_for(cfg.seed, STREAM_WARMUP);
    let b = &cfg.backbone;
    let net = Backbone::new(
        bundle.in_dim(),
        table.dim,
        &b.hidden,
        b.feat_dim,
        bundle.shared_classes(),
        b.combine_mode,
        &mut rng,
    )?;
    let (backbone, log) =
        warmup_train(bundle, &cond, net, &cfg.warmup.sgd, cfg.warmup.steps, cfg.warmup.batch_size, &mut rng)?;
    let centroids = compute_centroids(bundle, &cond, &backbone)?;
    Ok(WarmupOutput { backbone, centroids, log })
}

pub fn adapt_stage(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    table: &DomainEmbeddingTable,
    warm: &WarmupOutput,
) -> Result<AdaptOutput> {
    let cond = conditioner(cfg, table);
    let mut rng = rng_for(cfg.seed, STREAM_ADAPT);
    let feat = warm.backbone.feat_dim();
    let gaa = GaaNetwork::new(&cfg.gaa, feat, bundle.shared_classes(), &mut rng)?;
    let projection = cfg
        .lof
        .projection_dim
        .map(|d| LofProjection::random(feat, d, &mut rng_for(cfg.seed, STREAM_PROJECTION)));
    let state = AdaptState { backbone: warm.backbone.clone(), gaa, centroids: warm.centroids.clone(), projection };
    let (state, logs) = run_adaptation(bundle, &cond, state, &cfg.adapt, &cfg.lof, &cfg.adapt_sgd, &mut rng)?;
    Ok(AdaptOutput { state, logs })
}

pub fn eval_stage(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    table: &DomainEmbeddingTable,
    adapted: &AdaptOutput,
) -> Result<Metrics> {
    let cond = conditioner(cfg, table);
    let mut rng = rng_for(cfg.seed, STREAM_EVAL);
    let (mut metrics, _) = evaluate(bundle, &adapted.state, &cond, &cfg.lof, &cfg.adapt, &mut rng)?;
    metrics.pseudo_label_accuracy = adapted.logs.refreshes.last().and_then(|r| r.pool_pseudo_acc);
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub bundle: DatasetBundle,
    pub embed: EmbedOutput,
    pub warmup: WarmupOutput,
    pub adapt: AdaptOutput,
    pub metrics: Metrics,
}

/// All five stages without touching the filesystem.
pub fn run_in_memory(cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate()?;
    let bundle = gen_stage(cfg)?;
    let embed = embed_stage(cfg, &bundle)?;
    let warmup = warmup_stage(cfg, &bundle, &embed.table)?;
    let adapt = adapt_stage(cfg, &bundle, &embed.table, &warmup)?;
    let metrics = eval_stage(cfg, &bundle, &embed.table, &adapt)?;
    Ok(RunOutputs { bundle, embed, warmup, adapt, metrics })
}

// ---------------------------------------------------------------------------
// Files

pub const BUNDLE_FILE: &str = "bundle.dat";
pub const EMBED_NET_FILE: &str = "embedding_net.json";
pub const EMBED_TABLE_FILE: &str = "embedding_table.json";
pub const EMBED_LOG_FILE: &str = "embed_log.csv";
pub const WARMUP_NET_FILE: &str = "backbone_warmup.json";
pub const WARMUP_CENTROIDS_FILE: &str = "centroids_warmup.json";
pub const WARMUP_LOG_FILE: &str = "warmup_log.csv";
pub const ADAPT_BACKBONE_FILE: &str = "backbone_adapted.json";
pub const ADAPT_GAA_FILE: &str = "gaa.json";
pub const ADAPT_EXTRAS_FILE: &str = "adapt_state.json";
pub const ADAPT_LOG_FILE: &str = "adapt_log.csv";
pub const REFRESH_LOG_FILE: &str = "refresh_log.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// A JSON payload tagged with the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedHeader {
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptExtras {
    pub centroids: Centroids,
    pub projection: Option<LofProjection>,
    pub refreshes: Vec<RefreshRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub os: f64,
    pub os_star: f64,
    pub unknown_recall: Option<f64>,
    pub metrics: Metrics,
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn new(cfg: &RunConfig, metrics: Metrics) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            os: metrics.os,
            os_star: metrics.os_star,
            unknown_recall: metrics.unknown_recall,
            metrics,
            config: RunConfig { output_dir: None, ..cfg.clone() },
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// CSV with a leading `# config_hash=... seed=...` line.
pub fn csv_bytes<T: Serialize>(prov: &Provenance, rows: &[T]) -> Result<Vec<u8>> {
    let mut out = format!("# config_hash={} seed={}\n", prov.config_hash, prov.seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(prov, rows)?)
}

/// One output directory bound to one configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub provenance: Provenance,
}

impl Workspace {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let provenance = Provenance { config_hash: cfg.hash(), seed: cfg.seed };
        Ok(Self { dir: dir.into(), cfg, provenance })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn require(&self, file: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingPrerequisite { stage: stage.name(), path: p })
        }
    }

    fn check(&self, prov: Option<&Provenance>, stage: Stage, path: &Path) -> Result<()> {
        if prov == Some(&self.provenance) {
            Ok(())
        } else {
            Err(Error::StalePrerequisite { stage: stage.name(), path: path.to_path_buf() })
        }
    }

    fn load_stamped<T: DeserializeOwned>(&self, file: &str, stage: Stage) -> Result<T> {
        let p = self.require(file, stage)?;
        let s: Stamped<T> = read_json(&p)?;
        self.check(Some(&s.provenance), stage, &p)?;
        Ok(s.data)
    }

    fn save_stamped<T: Serialize>(&self, file: &str, data: T) -> Result<()> {
        write_json(&self.path(file), &Stamped { provenance: self.provenance.clone(), data })
    }

    fn load_checkpoint<H: DeserializeOwned>(&self, file: &str, stage: Stage) -> Result<Checkpoint<H>> {
        let p = self.require(file, stage)?;
        let ck: Checkpoint<H> = read_json(&p)?;
        self.check(ck.provenance.as_ref(), stage, &p)?;
        Ok(ck)
    }

    pub fn load_bundle(&self) -> Result<DatasetBundle> {
        let p = self.require(BUNDLE_FILE, Stage::Gen)?;
        let f = fs::File::open(&p)?;
        let (bundle, prov) = DatasetBundle::read_from(BufReader::new(f), &p)?;
        self.check(prov.as_ref(), Stage::Gen, &p)?;
        Ok(bundle)
    }

    pub fn load_table(&self) -> Result<DomainEmbeddingTable> {
        let t: DomainEmbeddingTable = self.load_stamped(EMBED_TABLE_FILE, Stage::Embed)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load_warmup(&self) -> Result<WarmupOutput> {
        let ck = self.load_checkpoint::<BackboneHeader>(WARMUP_NET_FILE, Stage::Warmup)?;
        let backbone = Backbone::from_checkpoint(&ck)?;
        let centroids = self.load_stamped(WARMUP_CENTROIDS_FILE, Stage::Warmup)?;
        Ok(WarmupOutput { backbone, centroids, log: Vec::new() })
    }

    pub fn load_adapted(&self) -> Result<AdaptOutput> {
        let bb = self.load_checkpoint::<BackboneHeader>(ADAPT_BACKBONE_FILE, Stage::Adapt)?;
        let gaa = self.load_checkpoint::<GaaHeader>(ADAPT_GAA_FILE, Stage::Adapt)?;
        let extras: AdaptExtras = self.load_stamped(ADAPT_EXTRAS_FILE, Stage::Adapt)?;
        Ok(AdaptOutput {
            state: AdaptState {
                backbone: Backbone::from_checkpoint(&bb)?,
                gaa: GaaNetwork::from_checkpoint(&gaa)?,
                centroids: extras.centroids,
                projection: extras.projection,
            },
            logs: AdaptLogs { episodes: Vec::new(), refreshes: extras.refreshes },
        })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<Option<Metrics>> {
        info!("stage {stage} -> {}", self.dir.display());
        let cfg = &self.cfg;
        let prov = &self.provenance;
        match stage {
            Stage::Gen => {
                let bundle = gen_stage(cfg)?;
                let mut bytes = Vec::new();
                bundle.write_to(&mut bytes, Some(prov))?;
                write_atomic(&self.path(BUNDLE_FILE), &bytes)?;
            }
            Stage::Embed => {
                let bundle = self.load_bundle()?;
                let out = embed_stage(cfg, &bundle)?;
                let header = EmbedHeader { widths: out.net.mlp.widths() };
                write_json(&self.path(EMBED_NET_FILE), &Checkpoint::capture(header, &out.net, Some(prov.clone())))?;
                self.save_stamped(EMBED_TABLE_FILE, &out.table)?;
                let rows: Vec<LossRow> = out.log.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
                write_csv(&self.path(EMBED_LOG_FILE), prov, &rows)?;
            }
            Stage::Warmup => {
                let bundle = self.load_bundle()?;
                let table = self.load_table()?;
                let out = warmup_stage(cfg, &bundle, &table)?;
                write_json(&self.path(WARMUP_NET_FILE), &out.backbone.checkpoint(Some(prov.clone())))?;
                self.save_stamped(WARMUP_CENTROIDS_FILE, &out.centroids)?;
                let rows: Vec<LossRow> = out.log.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
                write_csv(&self.path(WARMUP_LOG_FILE), prov, &rows)?;
            }
            Stage::Adapt => {
                let bundle = self.load_bundle()?;
                let table = self.load_table()?;
                let warm = self.load_warmup()?;
                let out = adapt_stage(cfg, &bundle, &table, &warm)?;
                write_json(&self.path(ADAPT_BACKBONE_FILE), &out.state.backbone.checkpoint(Some(prov.clone())))?;
                write_json(&self.path(ADAPT_GAA_FILE), &out.state.gaa.checkpoint(Some(prov.clone())))?;
                self.save_stamped(
                    ADAPT_EXTRAS_FILE,
                    AdaptExtras {
                        centroids: out.state.centroids.clone(),
                        projection: out.state.projection.clone(),
                        refreshes: out.logs.refreshes.clone(),
                    },
                )?;
                write_csv(&self.path(ADAPT_LOG_FILE), prov, &out.logs.episodes)?;
                write_csv(&self.path(REFRESH_LOG_FILE), prov, &out.logs.refreshes)?;
            }
            Stage::Eval => {
                let bundle = self.load_bundle()?;
                let table = self.load_table()?;
                let adapted = self.load_adapted()?;
                let metrics = eval_stage(cfg, &bundle, &table, &adapted)?;
                write_json(&self.path(METRICS_FILE), &MetricsReport::new(cfg, metrics.clone()))?;
                return Ok(Some(metrics));
            }
        }
        Ok(None)
    }

    /// Runs `stages` in pipeline order; returns the metrics if `eval` ran.
    pub fn run(&self, stages: &[Stage]) -> Result<Option<Metrics>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut metrics = None;
        for st in ordered {
            if let Some(m) = self.run_stage(st)? {
                metrics = Some(m);
            }
        }
        Ok(metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MeanMetrics,
}

/// Runs every stage for `count` consecutive seeds starting at `cfg.seed`,
/// one sub-directory each, and writes `summary.json` in `dir`.
pub fn run_seeds(cfg: &RunConfig, dir: &Path, stages: &[Stage], count: usize) -> Result<Option<SeedSummary>> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed + i).collect();
    let mut reports = Vec::new();
    for &s in &seeds {
        let c = cfg.with_seed(s);
        let ws = Workspace::new(c.clone(), dir.join(format!("seed-{s}")))?;
        if let Some(m) = ws.run(stages)? {
            reports.push(MetricsReport::new(&c, m));
        }
    }
    if reports.len() != seeds.len() {
        return Ok(None);
    }
    let ms: Vec<Metrics> = reports.iter().map(|r| r.metrics.clone()).collect();
    let summary = SeedSummary {
        config_hash: cfg.hash(),
        seeds,
        per_seed: reports,
        mean: mean_metrics(&ms).expect("at least one seed"),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Some(summary))
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Study {
    Embedding,
    Combine,
    Aggregation,
    LofDim,
    LabelCurve,
}

impl Study {
    pub const ALL: [Study; 5] = [Study::Embedding, Study::Combine, Study::Aggregation, Study::LofDim, Study::LabelCurve];

    pub fn name(self) -> &'static str {
        match self {
            Study::Embedding => "embedding",
            Study::Combine => "combine",
            Study::Aggregation => "aggregation",
            Study::LofDim => "lof_dim",
            Study::LabelCurve => "label_curve",
        }
    }

    /// `(variant name, config)` pairs compared by this study.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Study::Embedding => vec![
                ("on".into(), with(&|c| c.backbone.use_domain_embedding = true)),
                ("off".into(), with(&|c| c.backbone.use_domain_embedding = false)),
            ],
            Study::Combine => [CombineMode::Concat, CombineMode::ElementwiseMul]
                .into_iter()
                .map(|m| {
                    (
                        m.to_string(),
                        with(&|c| {
                            c.backbone.combine_mode = m;
                            c.embedding.dim = c.data.in_dim;
                        }),
                    )
                })
                .collect(),
            Study::Aggregation => [Aggregation::Attention, Aggregation::Affinity]
                .into_iter()
                .map(|a| (a.to_string(), with(&|c| c.gaa.aggregation = a)))
                .collect(),
            Study::LofDim => base
                .ablation
                .lof_dims
                .iter()
                .map(|&d| (d.to_string(), with(&|c| c.lof.projection_dim = Some(d))))
                .collect(),
            Study::LabelCurve => vec![("default".into(), base.clone())],
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown study {s:?}; expected one of embedding, combine, aggregation, lof_dim, label_curve"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: String,
    pub variant: String,
    pub seeds: String,
    pub os: f64,
    pub os_star: f64,
    pub unknown_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub refresh: usize,
    pub iter: usize,
    pub pool_pseudo_acc: Option<f64>,
    pub batch_pseudo_acc: Option<f64>,
    pub pool_unknown_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub study: Study,
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<(String, u64, Metrics)>,
    pub curve: Vec<CurveRow>,
}

/// Runs every variant of `study` on every seed with otherwise equal settings.
pub fn run_ablation(cfg: &RunConfig, study: Study, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    let mut curve = Vec::new();
    for (variant, vcfg) in study.variants(cfg) {
        vcfg.validate()?;
        let mut ms = Vec::new();
        for &s in seeds {
            info!("ablation {study}/{variant}, seed {s}");
            let out = run_in_memory(&vcfg.with_seed(s))?;
            if study == Study::LabelCurve {
                curve.extend(out.adapt.logs.refreshes.iter().map(|r| CurveRow {
                    seed: s,
                    refresh: r.refresh,
                    iter: r.iter,
                    pool_pseudo_acc: r.pool_pseudo_acc,
                    batch_pseudo_acc: r.batch_pseudo_acc,
                    pool_unknown_recall: r.pool_unknown_recall,
                }));
            }
            per_seed.push((variant.clone(), s, out.metrics.clone()));
            ms.push(out.metrics);
        }
        let mean = mean_metrics(&ms).expect("non-empty");
        rows.push(AblationRow {
            study: study.name().into(),
            variant,
            seeds: seed_list.clone(),
            os: mean.os,
            os_star: mean.os_star,
            unknown_recall: mean.unknown_recall,
        });
    }
    Ok(AblationReport { study, rows, per_seed, curve })
}

/// Writes `ablation_<study>.csv` (and `label_curve.csv`) into `dir`.
pub fn write_ablation(report: &AblationReport, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let prov = Provenance { config_hash: cfg.hash(), seed: cfg.seed };
    let mut written = Vec::new();
    let p = dir.join(format!("ablation_{}.csv", report.study.name()));
    write_csv(&p, &prov, &report.rows)?;
    written.push(p);
    if report.study == Study::LabelCurve {
        let p = dir.join("label_curve.csv");
        write_csv(&p, &prov, &report.curve)?;
        written.push(p);
    }
    Ok(written)
}

/// Rebuilds an embedding network from its checkpoint.
pub fn load_embedding_net(path: &Path) -> Result<EmbeddingNet> {
    let ck: Checkpoint<EmbedHeader> = read_json(path)?;
    let mut net = EmbeddingNet {
        mlp: Mlp { layers: ck.header.widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect() },
    };
    ck.restore_into(&mut net)?;
    Ok(net)
}
