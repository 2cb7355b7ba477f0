use rand::Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{invalid, Result};
use crate::metamodels::{accuracy_of, collect_grads, graph_predictions, BoundLinear, EpisodeOutcome, Linear, MetaModel};
use crate::taskgen::{ClassPool, MetaExample, RngStream};

/// Auxiliary all-classes classification objective sharing the meta model's
/// backbone; only the final linear layer is its own.
#[derive(Clone, Debug)]
pub struct AuxObjective<'a> {
    pub head: Linear,
    pub lambda: f64,
    pub pool: &'a ClassPool,
    pub batch_size: usize,
}

impl<'a> AuxObjective<'a> {
    pub fn new(pool: &'a ClassPool, embedding_dim: usize, lambda: f64, batch_size: usize, rng: &RngStream) -> Result<Self> {
        if !(lambda >= 0.0) || batch_size == 0 {
            return Err(invalid("aux objective needs lambda >= 0 and a positive batch size"));
        }
        Ok(Self {
            head: Linear::random(embedding_dim, pool.num_classes(), 1.0, rng),
            lambda,
            pool,
            batch_size,
        })
    }

    /// Uniform draw (with replacement) of labelled pool instances; labels are
    /// pool class ids.
    pub fn sample_batch(&self, rng: &RngStream) -> Result<(Tensor, Vec<usize>)> {
        let index: Vec<(usize, usize, usize)> = self
            .pool
            .classes()
            .iter()
            .enumerate()
            .flat_map(|(c, class)| {
                class
                    .domains
                    .iter()
                    .enumerate()
                    .flat_map(move |(d, xs)| (0..xs.len()).map(move |s| (c, d, s)))
            })
            .collect();
        let mut r = rng.rng();
        let mut data = Vec::with_capacity(self.batch_size * self.pool.dim());
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let (c, d, s) = index[r.random_range(0..index.len())];
            data.extend_from_slice(&self.pool.class(c).domains[d][s]);
            labels.push(c);
        }
        Ok((Tensor::matrix(self.batch_size, self.pool.dim(), data)?, labels))
    }
}

pub(crate) struct AuxNodes {
    pub backbone: Vec<NodeId>,
    pub head: BoundLinear,
}

/// Records `episode_loss + lambda * CE(head(backbone(batch)))`.
pub(crate) fn combined_graph(
    tape: &mut Tape,
    model: &MetaModel,
    episode: &MetaExample,
    head: &Linear,
    batch: &Tensor,
    batch_labels: &[usize],
    lambda: f64,
) -> Result<(crate::metamodels::EpisodeGraph, NodeId, AuxNodes)> {
    let graph = model.build_graph(tape, episode)?;
    let trunk = model.backbone().bind(tape);
    let bound_head = head.bind(tape);
    let x = tape.constant(batch.detached());
    let e = trunk.forward(tape, x)?;
    let logits = bound_head.forward(tape, e)?;
    let ce = tape.cross_entropy(logits, batch_labels)?;
    let weighted = tape.scale(ce, lambda)?;
    let total = tape.add(graph.loss, weighted)?;
    Ok((
        graph,
        total,
        AuxNodes {
            backbone: trunk.ids(),
            head: bound_head,
        },
    ))
}

/// Episode loss plus `lambda` times the auxiliary cross-entropy of `head` on
/// the labelled batch.
pub fn multiobjective_loss(
    model: &MetaModel,
    head: &Linear,
    episode: &MetaExample,
    batch: &Tensor,
    batch_labels: &[usize],
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid("lambda must be non-negative"));
    }
    let mut tape = Tape::new();
    let (_, total, _) = combined_graph(&mut tape, model, episode, head, batch, batch_labels, lambda)?;
    Ok(tape.value(total)?.item())
}

/// Adds `weight` times the gradient of the combined objective into the model
/// parameters and the aux head. Returns the episode part of the loss.
pub(crate) fn accumulate_combined_grad(
    model: &mut MetaModel,
    aux: &mut AuxObjective<'_>,
    episode: &MetaExample,
    batch: &Tensor,
    batch_labels: &[usize],
    weight: f64,
) -> Result<EpisodeOutcome> {
    let mut tape = Tape::new();
    let (graph, total, nodes) = combined_graph(&mut tape, model, episode, &aux.head, batch, batch_labels, aux.lambda)?;
    let loss = tape.value(graph.loss)?.item();
    let accuracy = accuracy_of(&graph_predictions(&tape, &graph)?, &episode.query_labels());
    let scaled = tape.scale(total, weight)?;
    tape.backward(scaled)?;
    collect_grads(&tape, &graph.leaves, &mut model.params_mut())?;
    collect_grads(&tape, &nodes.backbone, &mut model.backbone_mut().params_mut())?;
    collect_grads(&tape, &nodes.head.ids(), &mut aux.head.params_mut())?;
    Ok(EpisodeOutcome { loss, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metamodels::{episode_loss, ModelConfig, Variant};
    use crate::taskgen::{make_gaussian_pool, sample_episode, EpisodeSpec, GaussianPoolParams};

    #[test]
    fn zero_weight_and_uniform_aux() {
        let pool = make_gaussian_pool(&GaussianPoolParams::new(6, 4, 10, 1.0, 0.5), &RngStream::new(0)).unwrap();
        let ep = sample_episode(&pool, &EpisodeSpec::new(3, 1, 2), &RngStream::new(1), None).unwrap();
        let model = ModelConfig::new(Variant::ProtoNet).build(4, 3, &RngStream::new(2)).unwrap();
        let aux = AuxObjective::new(&pool, 16, 1.0, 8, &RngStream::new(3)).unwrap();
        let (x, y) = aux.sample_batch(&RngStream::new(4)).unwrap();
        let base = episode_loss(&model, &ep).unwrap();
        let l0 = multiobjective_loss(&model, &aux.head, &ep, &x, &y, 0.0).unwrap();
        assert_eq!(l0.to_bits(), base.to_bits());

        // a zero head gives uniform logits over the 6 pool classes
        let zero_head = Linear::zeros(16, 6);
        let l1 = multiobjective_loss(&model, &zero_head, &ep, &x, &y, 1.0).unwrap();
        assert!((l1 - (base + 6f64.ln())).abs() < 1e-12);
    }
}
