//! Feature extractor `F(x, d_e; theta)`, its supervised warm-up on source
//! data, and per-class source centroids.

use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::{BatchSampler, DatasetBundle, Role};
use crate::embed::DomainEmbeddingTable;
use crate::error::{Error, Result};
use crate::numcore::{
    collect_grads, column_means, cosine_lr, BoundLinear, BoundMlp, Linear, Mlp, Module, Rng, Sgd, SgdConfig,
    Tape, Tensor, Var,
};

/// How the domain embedding joins the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Concat,
    ElementwiseMul,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Concat => "concat",
            CombineMode::ElementwiseMul => "elementwise_mul",
        })
    }
}

/// Supplies the per-domain vector fed next to every input.
///
/// With `enabled == false` the embedding is replaced by the neutral vector
/// of the combine mode: zeros for concatenation, ones for multiplication.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub table: DomainEmbeddingTable,
    pub enabled: bool,
}

impl Conditioner {
    pub fn new(table: DomainEmbeddingTable, enabled: bool) -> Self {
        Self { table, enabled }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn vector(&self, domain: usize, mode: CombineMode) -> Result<Vec<f64>> {
        let v = self.table.get(domain)?;
        Ok(match (self.enabled, mode) {
            (true, _) => v.to_vec(),
            (false, CombineMode::Concat) => vec![0.0; v.len()],
            (false, CombineMode::ElementwiseMul) => vec![1.0; v.len()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneHeader {
    pub in_dim: usize,
    pub de_dim: usize,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub combine_mode: CombineMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub trunk: Mlp,
    /// Warm-up classifier over the shared classes; unused after warm-up.
    pub head: Linear,
    pub combine: CombineMode,
    pub in_dim: usize,
    pub de_dim: usize,
}

impl Backbone {
    pub fn new(
        in_dim: usize,
        de_dim: usize,
        hidden: &[usize],
        feat_dim: usize,
        classes: usize,
        combine: CombineMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let first = match combine {
            CombineMode::Concat => in_dim + de_dim,
            CombineMode::ElementwiseMul => {
                if in_dim != de_dim {
                    return Err(Error::dim(
                        "backbone",
                        format!("elementwise_mul needs in_dim == de_dim, got {in_dim} and {de_dim}"),
                    ));
                }
                in_dim
            }
        };
        let mut widths = vec![first];
        widths.extend_from_slice(hidden);
        widths.push(feat_dim);
        let trunk = Mlp::he(&widths, rng)?;
        let head = Linear::he(feat_dim, classes, rng);
        Ok(Self { trunk, head, combine, in_dim, de_dim })
    }

    pub fn feat_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn header(&self) -> BackboneHeader {
        BackboneHeader {
            in_dim: self.in_dim,
            de_dim: self.de_dim,
            widths: self.trunk.widths(),
            classes: self.classes(),
            combine_mode: self.combine,
        }
    }

    pub fn checkpoint(&self, provenance: Option<Provenance>) -> Checkpoint<BackboneHeader> {
        Checkpoint::capture(self.header(), self, provenance)
    }

    pub fn from_checkpoint(ck: &Checkpoint<BackboneHeader>) -> Result<Self> {
        let h = &ck.header;
        let mut net = Self {
            trunk: Mlp {
                layers: h.widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            },
            head: Linear::zeros(*h.widths.last().unwrap_or(&0), h.classes),
            combine: h.combine_mode,
            in_dim: h.in_dim,
            de_dim: h.de_dim,
        };
        ck.restore_into(&mut net)?;
        Ok(net)
    }

    /// Joins one input with its domain vector according to the combine mode.
    pub fn combine_one(&self, x: &[f64], de: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.len() != self.in_dim || de.len() != self.de_dim {
            return Err(Error::dim(
                "extract",
                format!(
                    "{} mode expects x of {} and d_e of {}, got {} and {}",
                    self.combine,
                    self.in_dim,
                    self.de_dim,
                    x.len(),
                    de.len()
                ),
            ));
        }
        match self.combine {
            CombineMode::Concat => {
                out.extend_from_slice(x);
                out.extend_from_slice(de);
            }
            CombineMode::ElementwiseMul => out.extend(x.iter().zip(de).map(|(a, b)| a * b)),
        }
        Ok(())
    }

    /// Network input for bundle samples `idx`.
    pub fn input_matrix(&self, bundle: &DatasetBundle, idx: &[usize], cond: &Conditioner) -> Result<Tensor> {
        let width = self.trunk.in_dim();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            let s = &bundle.samples[i];
            let de = cond.vector(s.domain_id, self.combine)?;
            self.combine_one(&s.x, &de, &mut data)?;
        }
        Tensor::matrix(idx.len(), width, data)
    }

    /// Feature vector of a single input.
    pub fn extract(&self, x: &[f64], de: &[f64]) -> Result<Vec<f64>> {
        let mut input = Vec::new();
        self.combine_one(x, de, &mut input)?;
        let width = input.len();
        Ok(self.trunk.eval(&Tensor::matrix(1, width, input)?)?.into_data())
    }

    /// Features of bundle samples `idx`, one row each.
    pub fn features(&self, bundle: &DatasetBundle, idx: &[usize], cond: &Conditioner) -> Result<Tensor> {
        self.trunk.eval(&self.input_matrix(bundle, idx, cond)?)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundBackbone> {
        Ok(BoundBackbone { trunk: self.trunk.bind(tape)?, head: self.head.bind(tape)? })
    }
}

impl Module for Backbone {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.trunk.named("trunk");
        v.extend(self.head.named("head"));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub trunk: BoundMlp,
    pub head: BoundLinear,
}

impl BoundBackbone {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.trunk.vars();
        v.extend(self.head.vars());
        v
    }
}

/// Mean source feature of each shared class; index = class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub classes: Vec<Vec<f64>>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.classes)
    }
}

/// Warm-up loss for one batch, recorded on `tape`.
pub fn warmup_loss(
    tape: &mut Tape,
    bound: &BoundBackbone,
    net: &Backbone,
    bundle: &DatasetBundle,
    batch: &[usize],
    cond: &Conditioner,
) -> Result<Var> {
    let labels = batch
        .iter()
        .map(|&i| bundle.samples[i].label.ok_or_else(|| Error::contract("warm-up batch holds an unlabelled sample")))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(net.input_matrix(bundle, batch, cond)?)?;
    let f = bound.trunk.forward(tape, x)?;
    let logits = bound.head.forward(tape, f)?;
    tape.cross_entropy_logits(logits, &labels)
}

/// Supervised cross-entropy training on random source mini-batches.
pub fn warmup_train(
    bundle: &DatasetBundle,
    cond: &Conditioner,
    mut net: Backbone,
    sgd: &SgdConfig,
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<(Backbone, Vec<f64>)> {
    for d in 0..bundle.spec.n_sources {
        cond.table.get(d)?;
    }
    if steps == 0 {
        return Ok((net, Vec::new()));
    }
    let mut sampler = BatchSampler::for_role(bundle, Role::Source, batch_size)?;
    let sched = sgd.with_total_steps(steps);
    let mut opt = Sgd::new(&sched);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next_batch(rng);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape)?;
        let loss = warmup_loss(&mut tape, &bound, &net, bundle, &batch, cond)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&grads, &bound.vars(), &net.parameters());
        opt.step(net.parameters_mut(), &grads, cosine_lr(step, &sched)?)?;
        if step % 100 == 0 {
            debug!("warm-up step {step}: loss {value:.5}");
        }
        log.push(value);
    }
    Ok((net, log))
}

/// Accuracy of the warm-up head over all source samples.
pub fn source_accuracy(bundle: &DatasetBundle, cond: &Conditioner, net: &Backbone) -> Result<f64> {
    let idx = bundle.indices_of_role(Role::Source);
    let feats = net.features(bundle, &idx, cond)?;
    let head = Mlp { layers: vec![net.head.clone()] };
    let pred = head.eval(&feats)?.argmax_rows();
    let hits = idx.iter().zip(&pred).filter(|(&i, &p)| bundle.samples[i].label == Some(p)).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Per-class mean of source features under the current parameters.
pub fn compute_centroids(bundle: &DatasetBundle, cond: &Conditioner, net: &Backbone) -> Result<Centroids> {
    let idx = bundle.indices_of_role(Role::Source);
    let feats = net.features(bundle, &idx, cond)?;
    let classes = bundle.shared_classes();
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); classes];
    for (row, &i) in idx.iter().enumerate() {
        let label = bundle.samples[i]
            .label
            .ok_or_else(|| Error::contract("centroids need labelled source samples"))?;
        groups[label].push(feats.row(row));
    }
    let classes = groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            if g.is_empty() {
                Err(Error::contract(format!("class {c} has no source samples")))
            } else {
                Ok(column_means(g))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Centroids { classes })
}
