//! Graph attentional aggregation over a mixed source/target batch.
//!
//! Layers alternate between intra-role edges (first layer) and inter-role
//! edges. Each layer computes multi-head attention messages, merges them,
//! and applies a residual update `x + mlp([x | m])`. A linear classifier
//! over the shared classes reads the final node features.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::Role;
use crate::error::{Error, Result};
use crate::numcore::{BoundLinear, BoundMlp, Linear, Mlp, Module, Rng, Tape, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Attention,
    Affinity,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Attention => "attention",
            Aggregation::Affinity => "affinity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    Intra,
    Cross,
}

impl EdgeMode {
    /// Mode of layer `layer` (0-based): even layers are intra-role.
    pub fn for_layer(layer: usize) -> Self {
        if layer % 2 == 0 {
            EdgeMode::Intra
        } else {
            EdgeMode::Cross
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaaConfig {
    pub layers: usize,
    pub heads: usize,
    pub aggregation: Aggregation,
    /// Divide attention logits by the square root of the head width.
    pub scale_attention: bool,
    /// Intra-role edges only between different domains.
    pub strict_intra: bool,
}

impl Default for GaaConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 2, aggregation: Aggregation::Attention, scale_attention: false, strict_intra: false }
    }
}

impl GaaConfig {
    pub fn validate(&self, name: &str, feat_dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config(format!("{name}.layers must be >= 1")));
        }
        let attention = self.aggregation == Aggregation::Attention;
        if self.heads == 0 || (attention && feat_dim % self.heads != 0) {
            return Err(Error::config(format!(
                "{name}.heads must be >= 1 and divide the feature width {feat_dim}, got {}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Node bookkeeping for one graph: role and domain of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub roles: Vec<Role>,
    pub domains: Vec<usize>,
}

impl GraphBatch {
    pub fn new(roles: Vec<Role>, domains: Vec<usize>) -> Result<Self> {
        if roles.len() != domains.len() {
            return Err(Error::dim("graph_batch", format!("{} roles for {} domains", roles.len(), domains.len())));
        }
        Ok(Self { roles, domains })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn has_edge(&self, mode: EdgeMode, strict_intra: bool, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let same_role = self.roles[i] == self.roles[j];
        match mode {
            EdgeMode::Intra => same_role && !(strict_intra && self.domains[i] == self.domains[j]),
            EdgeMode::Cross => !same_role,
        }
    }

    /// Directed pairs `(receiver, sender)` in row-major order.
    pub fn edges(&self, mode: EdgeMode, strict_intra: bool) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(mode, strict_intra, i, j))
            .collect()
    }

    /// Row-major `n × n` adjacency.
    pub fn mask(&self, mode: EdgeMode, strict_intra: bool) -> Vec<bool> {
        let n = self.len();
        (0..n * n).map(|e| self.has_edge(mode, strict_intra, e / n, e % n)).collect()
    }
}

/// Query, key and value maps of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaaLayer {
    /// Empty for affinity aggregation.
    pub heads: Vec<Head>,
    /// `[F, F]` head merge, no bias; absent for affinity aggregation.
    pub merge: Option<Tensor>,
    /// `2F → F → F`, final layer zero at initialisation.
    pub update: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaaNetwork {
    pub config: GaaConfig,
    pub feat_dim: usize,
    pub layers: Vec<GaaLayer>,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaaHeader {
    pub config: GaaConfig,
    pub feat_dim: usize,
    pub classes: usize,
}

impl GaaNetwork {
    pub fn new(cfg: &GaaConfig, feat_dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate("gaa", feat_dim)?;
        let head_dim = feat_dim / cfg.heads.max(1);
        let layers = (0..cfg.layers)
            .map(|_| {
                let (heads, merge) = match cfg.aggregation {
                    Aggregation::Attention => {
                        let heads = (0..cfg.heads)
                            .map(|_| Head {
                                query: Linear::he(feat_dim, head_dim, rng),
                                key: Linear::he(feat_dim, head_dim, rng),
                                value: Linear::he(feat_dim, head_dim, rng),
                            })
                            .collect();
                        (heads, Some(Linear::he(feat_dim, feat_dim, rng).weight))
                    }
                    Aggregation::Affinity => (Vec::new(), None),
                };
                let mut update = Mlp::he(&[2 * feat_dim, feat_dim, feat_dim], rng)?;
                update.layers[1] = Linear::zeros(feat_dim, feat_dim);
                Ok(GaaLayer { heads, merge, update })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: cfg.clone(), feat_dim, layers, classifier: Linear::he(feat_dim, classes, rng) })
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn header(&self) -> GaaHeader {
        GaaHeader { config: self.config.clone(), feat_dim: self.feat_dim, classes: self.classes() }
    }

    pub fn checkpoint(&self, provenance: Option<Provenance>) -> Checkpoint<GaaHeader> {
        Checkpoint::capture(self.header(), self, provenance)
    }

    pub fn from_checkpoint(ck: &Checkpoint<GaaHeader>) -> Result<Self> {
        let h = &ck.header;
        let mut net = Self::new(&h.config, h.feat_dim, h.classes, &mut crate::numcore::rng_for(0, 0))?;
        ck.restore_into(&mut net)?;
        Ok(net)
    }

    /// Binds every parameter through `leaf`, in [`Module::parameters`] order.
    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Result<Var>) -> Result<BoundGaa> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let heads = layer
                .heads
                .iter()
                .map(|h| {
                    Ok(BoundHead {
                        query: bind_linear(leaf, &h.query)?,
                        key: bind_linear(leaf, &h.key)?,
                        value: bind_linear(leaf, &h.value)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let update = BoundMlp {
                layers: layer.update.layers.iter().map(|l| bind_linear(leaf, l)).collect::<Result<Vec<_>>>()?,
            };
            let merge = layer.merge.as_ref().map(|m| leaf(m)).transpose()?;
            layers.push(BoundLayer { heads, merge, update });
        }
        let classifier = bind_linear(leaf, &self.classifier)?;
        Ok(BoundGaa { config: self.config.clone(), feat_dim: self.feat_dim, layers, classifier })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundGaa> {
        self.bind_with(&mut |t| tape.param(t.clone()))
    }

    /// Forward pass outside of training, checking that both roles are present
    /// when a cross layer exists.
    pub fn eval(&self, features: &Tensor, batch: &GraphBatch) -> Result<GaaOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(features.clone())?;
        let fwd = bound.forward(&mut tape, x, batch)?;
        Ok(fwd.values(&tape))
    }
}

fn bind_linear(leaf: &mut dyn FnMut(&Tensor) -> Result<Var>, l: &Linear) -> Result<BoundLinear> {
    Ok(BoundLinear { w: leaf(&l.weight)?, b: leaf(&l.bias)? })
}

fn lin_named<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, l: &'a Linear) {
    out.extend(l.named(&prefix));
}

impl Module for GaaNetwork {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, h) in layer.heads.iter().enumerate() {
                lin_named(&mut out, format!("layer.{i}.head.{t}.query"), &h.query);
                lin_named(&mut out, format!("layer.{i}.head.{t}.key"), &h.key);
                lin_named(&mut out, format!("layer.{i}.head.{t}.value"), &h.value);
            }
            out.extend(layer.update.named(&format!("layer.{i}.update")));
            if let Some(m) = &layer.merge {
                out.push((format!("layer.{i}.merge"), m));
            }
        }
        lin_named(&mut out, "classifier".into(), &self.classifier);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.extend(h.query.params_mut());
                out.extend(h.key.params_mut());
                out.extend(h.value.params_mut());
            }
            out.extend(layer.update.params_mut());
            if let Some(m) = &mut layer.merge {
                out.push(m);
            }
        }
        out.extend(self.classifier.params_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub heads: Vec<BoundHead>,
    pub merge: Option<Var>,
    pub update: BoundMlp,
}

#[derive(Debug, Clone)]
pub struct BoundGaa {
    pub config: GaaConfig,
    pub feat_dim: usize,
    pub layers: Vec<BoundLayer>,
    pub classifier: BoundLinear,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GaaForward {
    pub embeddings: Var,
    pub logits: Var,
    /// Row-stochastic weights per layer and head (one entry per layer for
    /// affinity aggregation).
    pub attention: Vec<Vec<Var>>,
}

impl GaaForward {
    pub fn values(&self, tape: &Tape) -> GaaOutput {
        GaaOutput {
            embeddings: tape.value(self.embeddings).clone(),
            logits: tape.value(self.logits).clone(),
            attention: self.attention.iter().map(|l| l.iter().map(|&v| tape.value(v).clone()).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaaOutput {
    pub embeddings: Tensor,
    pub logits: Tensor,
    pub attention: Vec<Vec<Tensor>>,
}

impl BoundGaa {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend(h.query.vars());
                out.extend(h.key.vars());
                out.extend(h.value.vars());
            }
            out.extend(layer.update.vars());
            out.extend(layer.merge);
        }
        out.extend(self.classifier.vars());
        out
    }

    /// Forward pass; an empty role with a cross layer present is rejected.
    pub fn forward(&self, tape: &mut Tape, x: Var, batch: &GraphBatch) -> Result<GaaForward> {
        if self.layers.len() >= 2 && (batch.count(Role::Source) == 0 || batch.count(Role::Target) == 0) {
            return Err(Error::contract(format!(
                "gaa_forward: {} layers need both roles, got {} source and {} target nodes",
                self.layers.len(),
                batch.count(Role::Source),
                batch.count(Role::Target)
            )));
        }
        self.forward_lenient(tape, x, batch)
    }

    /// Forward pass that lets nodes without in-edges receive zero messages.
    pub fn forward_lenient(&self, tape: &mut Tape, x: Var, batch: &GraphBatch) -> Result<GaaForward> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != batch.len() || shape[1] != self.feat_dim {
            return Err(Error::dim(
                "gaa_forward",
                format!("features {shape:?} for {} nodes of width {}", batch.len(), self.feat_dim),
            ));
        }
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = Rc::new(batch.mask(EdgeMode::for_layer(l), self.config.strict_intra));
            let (next, weights) = self.layer_forward(tape, layer, h, mask)?;
            h = next;
            attention.push(weights);
        }
        let logits = self.classifier.forward(tape, h)?;
        Ok(GaaForward { embeddings: h, logits, attention })
    }

    fn layer_forward(&self, tape: &mut Tape, layer: &BoundLayer, x: Var, mask: Rc<Vec<bool>>) -> Result<(Var, Vec<Var>)> {
        let (message, weights) = match self.config.aggregation {
            Aggregation::Attention => {
                let mut msgs = Vec::with_capacity(layer.heads.len());
                let mut weights = Vec::with_capacity(layer.heads.len());
                for head in &layer.heads {
                    let (m, a) = attention_message(tape, head, x, mask.clone(), self.config.scale_attention)?;
                    msgs.push(m);
                    weights.push(a);
                }
                let cat = tape.concat_cols(&msgs)?;
                let merge = layer.merge.ok_or_else(|| Error::contract("attention layer without merge matrix"))?;
                (tape.matmul(cat, merge)?, weights)
            }
            Aggregation::Affinity => {
                let (m, a) = affinity_message(tape, x, mask)?;
                (m, vec![a])
            }
        };
        let joined = tape.concat_cols(&[x, message])?;
        let delta = layer.update.forward(tape, joined)?;
        Ok((tape.add(x, delta)?, weights))
    }
}

/// One head's messages `α V` with `α = masked softmax(Q Kᵀ)`.
pub fn attention_message(
    tape: &mut Tape,
    head: &BoundHead,
    x: Var,
    mask: Rc<Vec<bool>>,
    scaled: bool,
) -> Result<(Var, Var)> {
    let q = head.query.forward(tape, x)?;
    let k = head.key.forward(tape, x)?;
    let v = head.value.forward(tape, x)?;
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if scaled {
        let d = tape.value(q).cols() as f64;
        scores = tape.scale(scores, 1.0 / d.sqrt())?;
    }
    let alpha = tape.masked_softmax_rows(scores, mask)?;
    Ok((tape.matmul(alpha, v)?, alpha))
}

/// Messages `A X` with `A = masked softmax` of pairwise cosine similarity.
pub fn affinity_message(tape: &mut Tape, x: Var, mask: Rc<Vec<bool>>) -> Result<(Var, Var)> {
    let unit = tape.normalize_rows(x, COSINE_EPS)?;
    let ut = tape.transpose(unit)?;
    let cos = tape.matmul(unit, ut)?;
    let a = tape.masked_softmax_rows(cos, mask)?;
    Ok((tape.matmul(a, x)?, a))
}
