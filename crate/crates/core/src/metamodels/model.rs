use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BoundBackbone, Linear};
use crate::autodiff::{matmul, softmax_rows, NodeId, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::taskgen::{MetaExample, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    ProtoNet,
    MatchNet,
    FoMaml,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::ProtoNet => "protonet",
            Variant::MatchNet => "matchnet",
            Variant::FoMaml => "fomaml",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "protonet" => Ok(Variant::ProtoNet),
            "matchnet" => Ok(Variant::MatchNet),
            "fomaml" => Ok(Variant::FoMaml),
            other => Err(invalid(format!("unknown variant `{other}`"))),
        }
    }

    pub const ALL: [Variant; 3] = [Variant::ProtoNet, Variant::MatchNet, Variant::FoMaml];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// First-order MAML: a base classifier (trunk + linear head) whose
/// initialization is meta-learned; each episode adapts it by `inner_steps`
/// full-batch gradient steps of size `inner_lr` on the support set.
#[derive(Clone, Debug, PartialEq)]
pub struct FoMaml {
    pub backbone: Backbone,
    pub head: Linear,
    pub inner_lr: f64,
    pub inner_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaModel {
    ProtoNet { backbone: Backbone },
    MatchNet { backbone: Backbone, temperature: f64 },
    FoMaml(FoMaml),
}

/// Architecture and hyper-parameters for building a fresh meta model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_embedding() -> usize {
    16
}
fn default_temperature() -> f64 {
    0.1
}
fn default_inner_lr() -> f64 {
    0.5
}
fn default_inner_steps() -> usize {
    1
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            hidden: default_hidden(),
            embedding_dim: default_embedding(),
            temperature: default_temperature(),
            inner_lr: default_inner_lr(),
            inner_steps: default_inner_steps(),
        }
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }

    /// Fresh model for `input_dim` features and `ways`-way episodes.
    pub fn build(&self, input_dim: usize, ways: usize, rng: &RngStream) -> Result<MetaModel> {
        let backbone = Backbone::new(&self.widths(input_dim), &rng.child("backbone"))?;
        self.with_backbone(backbone, ways, rng)
    }

    /// Model around an existing backbone (e.g. a pre-trained one).
    pub fn with_backbone(&self, backbone: Backbone, ways: usize, rng: &RngStream) -> Result<MetaModel> {
        match self.variant {
            Variant::ProtoNet => Ok(MetaModel::protonet(backbone)),
            Variant::MatchNet => MetaModel::matchnet(backbone, self.temperature),
            Variant::FoMaml => {
                let head = Linear::random(backbone.embedding_dim(), ways, 1.0, &rng.child("head"));
                MetaModel::fomaml(backbone, head, self.inner_lr, self.inner_steps)
            }
        }
    }
}

/// Per-validation-instance class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLogits {
    pub rows: Vec<Vec<f64>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl EpisodeLogits {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { rows: t.to_rows() }
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }
}

/// Raw per-query scores of one model on one episode, before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub enum EpisodeScores {
    /// Class logits: negative squared distances (ProtoNet) or head outputs (FoMaml).
    Logits(EpisodeLogits),
    /// Pre-softmax cosine attention scores over support items (MatchNet).
    Attention {
        scores: Vec<Vec<f64>>,
        support_labels: Vec<usize>,
        ways: usize,
    },
}

impl EpisodeScores {
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        match self {
            EpisodeScores::Logits(l) => l
                .rows
                .iter()
                .map(|r| softmax_rows(r, 1, r.len()))
                .collect(),
            EpisodeScores::Attention {
                scores,
                support_labels,
                ways,
            } => attention_to_probs(scores, support_labels, *ways),
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        match self {
            EpisodeScores::Logits(l) => l.predictions(),
            EpisodeScores::Attention { .. } => self.probabilities().iter().map(|r| argmax(r)).collect(),
        }
    }
}

fn one_hot(labels: &[usize], ways: usize) -> Vec<f64> {
    let mut m = vec![0.0; labels.len() * ways];
    for (i, &y) in labels.iter().enumerate() {
        m[i * ways + y] = 1.0;
    }
    m
}

/// Class distribution from attention scores: softmax over support items, then
/// summed per support label.
pub fn attention_to_probs(scores: &[Vec<f64>], support_labels: &[usize], ways: usize) -> Vec<Vec<f64>> {
    let n = support_labels.len();
    let flat: Vec<f64> = scores.concat();
    let att = softmax_rows(&flat, scores.len(), n);
    let probs = matmul(&att, &one_hot(support_labels, ways), scores.len(), n, ways);
    probs.chunks(ways).map(<[f64]>::to_vec).collect()
}

/// Prototype-averaging matrix `[ways, n_support]` with `1` where the support
/// item has that label; rows are divided by the shot count afterwards.
fn indicator(labels: &[usize], ways: usize) -> Result<(Tensor, f64)> {
    let mut counts = vec![0usize; ways];
    let mut data = vec![0.0; ways * labels.len()];
    for (j, &y) in labels.iter().enumerate() {
        if y >= ways {
            return Err(invalid(format!("support label {y} out of range")));
        }
        counts[y] += 1;
        data[y * labels.len() + j] = 1.0;
    }
    if counts.iter().any(|&c| c != counts[0] || c == 0) {
        return Err(invalid(format!("unbalanced support set {counts:?}")));
    }
    Ok((Tensor::matrix(ways, labels.len(), data)?, counts[0] as f64))
}

/// Class prototypes on the tape: per-label sum of support embeddings divided
/// by the shot count.
fn prototypes(tape: &mut Tape, support: NodeId, labels: &[usize], ways: usize) -> Result<NodeId> {
    let (ind, shots) = indicator(labels, ways)?;
    let ind = tape.constant(ind);
    let sums = tape.matmul(ind, support)?;
    if shots == 1.0 {
        Ok(sums)
    } else {
        tape.scale(sums, 1.0 / shots)
    }
}

fn protonet_logits_on_tape(tape: &mut Tape, support: NodeId, labels: &[usize], ways: usize, query: NodeId) -> Result<NodeId> {
    let protos = prototypes(tape, support, labels, ways)?;
    let dist = tape.sq_dist(query, protos)?;
    tape.scale(dist, -1.0)
}

fn l2_normalize_rows(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let v = tape.value(x)?;
    let (n, e) = (v.rows(), v.cols());
    if (0..n).any(|i| v.row(i).iter().all(|&z| z == 0.0)) {
        return Err(invalid("zero-norm embedding: cosine similarity undefined"));
    }
    let sq = tape.mul(x, x)?;
    let ones_col = tape.constant(Tensor::filled(vec![e, 1], 1.0));
    let norms_sq = tape.matmul(sq, ones_col)?;
    let log_norm = tape.log(norms_sq)?;
    let neg_half = tape.scale(log_norm, -0.5)?;
    let inv_norm = tape.exp(neg_half)?;
    let ones_row = tape.constant(Tensor::filled(vec![1, e], 1.0));
    let spread = tape.matmul(inv_norm, ones_row)?;
    tape.mul(x, spread)
}

/// Returns `(attention scores, class probabilities)` nodes.
fn matchnet_on_tape(
    tape: &mut Tape,
    support: NodeId,
    labels: &[usize],
    ways: usize,
    query: NodeId,
    temperature: f64,
) -> Result<(NodeId, NodeId)> {
    let sn = l2_normalize_rows(tape, support)?;
    let qn = l2_normalize_rows(tape, query)?;
    let st = tape.transpose(sn)?;
    let cos = tape.matmul(qn, st)?;
    let scores = tape.scale(cos, 1.0 / temperature)?;
    let att = tape.softmax_rows(scores)?;
    let y = tape.constant(Tensor::matrix(labels.len(), ways, one_hot(labels, ways))?);
    let probs = tape.matmul(att, y)?;
    Ok((scores, probs))
}

/// Mean negative log-probability of the true labels.
fn nll_of_probs(tape: &mut Tape, probs: NodeId, labels: &[usize], ways: usize) -> Result<NodeId> {
    let logp = tape.log(probs)?;
    let mask = tape.constant(Tensor::matrix(labels.len(), ways, one_hot(labels, ways))?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// ProtoNet logits from precomputed embeddings: `-||q - prototype_c||^2`.
pub fn protonet_logits_from_embeddings(
    support: &Tensor,
    support_labels: &[usize],
    ways: usize,
    query: &Tensor,
) -> Result<EpisodeLogits> {
    let mut tape = Tape::new();
    let s = tape.constant(support.detached());
    let q = tape.constant(query.detached());
    let logits = protonet_logits_on_tape(&mut tape, s, support_labels, ways, q)?;
    Ok(EpisodeLogits::from_tensor(tape.value(logits)?))
}

/// MatchNet class distribution from precomputed embeddings.
pub fn matchnet_probs_from_embeddings(
    support: &Tensor,
    support_labels: &[usize],
    ways: usize,
    query: &Tensor,
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(support.detached());
    let q = tape.constant(query.detached());
    let (scores, _) = matchnet_on_tape(&mut tape, s, support_labels, ways, q, temperature)?;
    let scores = tape.value(scores)?.to_rows();
    Ok(attention_to_probs(&scores, support_labels, ways))
}

pub fn protonet_logits(backbone: &Backbone, episode: &MetaExample) -> Result<EpisodeLogits> {
    let s = backbone.forward(&episode.support_matrix()?)?;
    let q = backbone.forward(&episode.query_matrix()?)?;
    protonet_logits_from_embeddings(&s, &episode.support_labels(), episode.ways, &q)
}

pub fn matchnet_probs(backbone: &Backbone, temperature: f64, episode: &MetaExample) -> Result<Vec<Vec<f64>>> {
    let s = backbone.forward(&episode.support_matrix()?)?;
    let q = backbone.forward(&episode.query_matrix()?)?;
    matchnet_probs_from_embeddings(&s, &episode.support_labels(), episode.ways, &q, temperature)
}

/// `steps` iterations of full-batch gradient descent on `loss`, which builds a
/// scalar loss node from the bound parameters.
pub fn gradient_descent<F>(params: &[Tensor], step_size: f64, steps: usize, mut loss: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step_size >= 0.0) || !step_size.is_finite() {
        return Err(invalid("step size must be finite and non-negative"));
    }
    let mut current: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    if step_size == 0.0 {
        return Ok(current);
    }
    for step in 0..steps {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = current.iter().map(|p| tape.leaf(p.detached().requiring_grad())).collect();
        let l = loss(&mut tape, &ids).map_err(|e| adapt_err(step, e))?;
        tape.backward(l)?;
        for (p, id) in current.iter_mut().zip(&ids) {
            let updated: Vec<f64> = match tape.grad(*id) {
                Some(g) => p.data().iter().zip(g).map(|(v, g)| v - step_size * g).collect(),
                None => continue,
            };
            p.assign(&updated).map_err(|e| adapt_err(step, e))?;
        }
    }
    Ok(current)
}

fn adapt_err(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("adaptation step {step}: {m}")),
        other => other,
    }
}

fn classifier_on_tape(tape: &mut Tape, trunk: &BoundBackbone, head: &super::BoundLinear, x: NodeId) -> Result<NodeId> {
    let h = trunk.forward(tape, x)?;
    head.forward(tape, h)
}

fn unbind_classifier(ids: &[NodeId], n_backbone: usize) -> (BoundBackbone, super::BoundLinear) {
    let layers = ids[..n_backbone]
        .chunks(2)
        .map(|c| super::BoundLinear {
            weight: c[0],
            bias: c[1],
        })
        .collect();
    let head = super::BoundLinear {
        weight: ids[n_backbone],
        bias: ids[n_backbone + 1],
    };
    (BoundBackbone { layers }, head)
}

fn classifier_params(backbone: &Backbone, head: &Linear) -> Vec<Tensor> {
    backbone
        .params()
        .into_iter()
        .chain(head.params())
        .map(Tensor::detached)
        .collect()
}

fn classifier_from_params(backbone: &Backbone, params: Vec<Tensor>) -> Result<(Backbone, Linear)> {
    let n = backbone.params().len();
    let mut it = params.into_iter();
    let layers = (0..n / 2)
        .map(|_| Linear::new(it.next().expect("weight"), it.next().expect("bias")))
        .collect::<Result<Vec<_>>>()?;
    let head = Linear::new(it.next().expect("head weight"), it.next().expect("head bias"))?;
    Ok((Backbone::from_layers(layers)?, head))
}

/// Inner loop of first-order MAML: `steps` full-batch gradient steps of size
/// `step_size` on the support cross-entropy, starting from `(backbone, head)`.
pub fn fomaml_adapt(
    backbone: &Backbone,
    head: &Linear,
    support: &Tensor,
    labels: &[usize],
    step_size: f64,
    steps: usize,
) -> Result<(Backbone, Linear)> {
    if steps == 0 {
        return Err(invalid("inner step count must be at least 1"));
    }
    let n_backbone = backbone.params().len();
    let adapted = gradient_descent(&classifier_params(backbone, head), step_size, steps, |tape, ids| {
        let (trunk, h) = unbind_classifier(ids, n_backbone);
        let x = tape.constant(support.detached());
        let logits = classifier_on_tape(tape, &trunk, &h, x)?;
        tape.cross_entropy(logits, labels)
    })?;
    classifier_from_params(backbone, adapted)
}

/// Nodes of one episode's loss graph.
#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    pub loss: NodeId,
    /// One leaf per entry of [`MetaModel::params`]. For FoMaml these hold the
    /// adapted parameters; their gradients are the first-order meta-gradient.
    pub leaves: Vec<NodeId>,
    /// Class logits (ProtoNet, FoMaml) or class probabilities (MatchNet).
    pub class_scores: NodeId,
    /// MatchNet attention scores over support items.
    pub attention: Option<NodeId>,
}

/// Loss and accuracy of one episode as seen during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
}

impl MetaModel {
    pub fn protonet(backbone: Backbone) -> Self {
        MetaModel::ProtoNet { backbone }
    }

    pub fn matchnet(backbone: Backbone, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid("MatchNet temperature must be positive"));
        }
        Ok(MetaModel::MatchNet { backbone, temperature })
    }

    /// `inner_lr = 0` is accepted and means "no adaptation".
    pub fn fomaml(backbone: Backbone, head: Linear, inner_lr: f64, inner_steps: usize) -> Result<Self> {
        if !(inner_lr >= 0.0) || !inner_lr.is_finite() || inner_steps == 0 {
            return Err(invalid("FoMaml needs inner_lr >= 0 and inner_steps >= 1"));
        }
        if head.input_dim() != backbone.embedding_dim() {
            return Err(Error::Shape {
                primitive: "fomaml head",
                shapes: vec![vec![backbone.embedding_dim()], head.weight.shape().to_vec()],
            });
        }
        Ok(MetaModel::FoMaml(FoMaml {
            backbone,
            head,
            inner_lr,
            inner_steps,
        }))
    }

    pub fn variant(&self) -> Variant {
        match self {
            MetaModel::ProtoNet { .. } => Variant::ProtoNet,
            MetaModel::MatchNet { .. } => Variant::MatchNet,
            MetaModel::FoMaml(_) => Variant::FoMaml,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        match self {
            MetaModel::ProtoNet { backbone } | MetaModel::MatchNet { backbone, .. } => backbone,
            MetaModel::FoMaml(m) => &m.backbone,
        }
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        match self {
            MetaModel::ProtoNet { backbone } | MetaModel::MatchNet { backbone, .. } => backbone,
            MetaModel::FoMaml(m) => &mut m.backbone,
        }
    }

    /// Trainable parameters: backbone layers in order, then the FoMaml head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.backbone().params();
        if let MetaModel::FoMaml(m) = self {
            p.extend(m.head.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            MetaModel::ProtoNet { backbone } | MetaModel::MatchNet { backbone, .. } => backbone.params_mut(),
            MetaModel::FoMaml(m) => {
                let mut p = m.backbone.params_mut();
                p.extend(m.head.params_mut());
                p
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.backbone().layers().len())
            .flat_map(|i| [format!("backbone.{i}.weight"), format!("backbone.{i}.bias")])
            .collect();
        if self.variant() == Variant::FoMaml {
            names.push("head.weight".into());
            names.push("head.bias".into());
        }
        names
    }

    /// All parameters flattened in [`MetaModel::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Records the validation loss of `episode` on `tape`.
    pub fn build_graph(&self, tape: &mut Tape, episode: &MetaExample) -> Result<EpisodeGraph> {
        let ways = episode.ways;
        let support_labels = episode.support_labels();
        let query_labels = episode.query_labels();
        let xs = tape.constant(episode.support_matrix()?);
        let xq = tape.constant(episode.query_matrix()?);
        match self {
            MetaModel::ProtoNet { backbone } => {
                let bound = backbone.bind(tape);
                let s = bound.forward(tape, xs)?;
                let q = bound.forward(tape, xq)?;
                let logits = protonet_logits_on_tape(tape, s, &support_labels, ways, q)?;
                let loss = tape.cross_entropy(logits, &query_labels)?;
                Ok(EpisodeGraph {
                    loss,
                    leaves: bound.ids(),
                    class_scores: logits,
                    attention: None,
                })
            }
            MetaModel::MatchNet { backbone, temperature } => {
                let bound = backbone.bind(tape);
                let s = bound.forward(tape, xs)?;
                let q = bound.forward(tape, xq)?;
                let (scores, probs) = matchnet_on_tape(tape, s, &support_labels, ways, q, *temperature)?;
                let loss = nll_of_probs(tape, probs, &query_labels, ways)?;
                Ok(EpisodeGraph {
                    loss,
                    leaves: bound.ids(),
                    class_scores: probs,
                    attention: Some(scores),
                })
            }
            MetaModel::FoMaml(m) => {
                if m.head.output_dim() != ways {
                    return Err(invalid(format!(
                        "FoMaml head has {} outputs, episode is {ways}-way",
                        m.head.output_dim()
                    )));
                }
                let support = tape.value(xs)?.detached();
                let (trunk, head) = fomaml_adapt(&m.backbone, &m.head, &support, &support_labels, m.inner_lr, m.inner_steps)?;
                let bound = trunk.bind(tape);
                let bound_head = head.bind(tape);
                let logits = classifier_on_tape(tape, &bound, &bound_head, xq)?;
                let loss = tape.cross_entropy(logits, &query_labels)?;
                let mut leaves = bound.ids();
                leaves.extend(bound_head.ids());
                Ok(EpisodeGraph {
                    loss,
                    leaves,
                    class_scores: logits,
                    attention: None,
                })
            }
        }
    }

    /// Raw scores on the episode's validation set.
    pub fn scores(&self, episode: &MetaExample) -> Result<EpisodeScores> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, episode)?;
        Ok(match graph.attention {
            Some(att) => EpisodeScores::Attention {
                scores: tape.value(att)?.to_rows(),
                support_labels: episode.support_labels(),
                ways: episode.ways,
            },
            None => EpisodeScores::Logits(EpisodeLogits::from_tensor(tape.value(graph.class_scores)?)),
        })
    }

    pub fn predict(&self, episode: &MetaExample) -> Result<Vec<usize>> {
        Ok(self.scores(episode)?.predictions())
    }

    /// Adds `weight * d loss / d params` into the parameter gradient slots.
    pub fn accumulate_episode_grad(&mut self, episode: &MetaExample, weight: f64) -> Result<EpisodeOutcome> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, episode)?;
        let loss = tape.value(graph.loss)?.item();
        let accuracy = accuracy_of(&graph_predictions(&tape, &graph)?, &episode.query_labels());
        let scaled = tape.scale(graph.loss, weight)?;
        tape.backward(scaled)?;
        collect_grads(&tape, &graph.leaves, &mut self.params_mut())?;
        Ok(EpisodeOutcome { loss, accuracy })
    }
}

pub(crate) fn graph_predictions(tape: &Tape, graph: &EpisodeGraph) -> Result<Vec<usize>> {
    Ok(tape.value(graph.class_scores)?.to_rows().iter().map(|r| argmax(r)).collect())
}

pub(crate) fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Adds the tape gradients of `leaves` into the matching parameters.
pub fn collect_grads(tape: &Tape, leaves: &[NodeId], params: &mut [&mut Tensor]) -> Result<()> {
    if leaves.len() != params.len() {
        return Err(invalid("leaf/parameter count mismatch"));
    }
    for (id, p) in leaves.iter().zip(params.iter_mut()) {
        match tape.grad(*id) {
            Some(g) => p.accumulate_grad(g)?,
            None => p.accumulate_grad(&vec![0.0; p.len()])?,
        }
    }
    Ok(())
}

/// Mean cross-entropy of the model's validation-set predictions.
pub fn episode_loss(model: &MetaModel, episode: &MetaExample) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, episode)?;
    Ok(tape.value(graph.loss)?.item())
}

/// Fraction of validation instances predicted correctly (ties to the lowest label).
pub fn episode_accuracy(model: &MetaModel, episode: &MetaExample) -> Result<f64> {
    Ok(accuracy_of(&model.predict(episode)?, &episode.query_labels()))
}

/// Squared Euclidean distance between two flattened parameter vectors.
pub fn model_space_loss(theta: &[f64], theta_star: &[f64]) -> Result<f64> {
    if theta.len() != theta_star.len() {
        return Err(Error::Shape {
            primitive: "model_space_loss",
            shapes: vec![vec![theta.len()], vec![theta_star.len()]],
        });
    }
    Ok(theta.iter().zip(theta_star).map(|(a, b)| (a - b) * (a - b)).sum())
}
