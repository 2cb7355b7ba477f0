use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metamodels::{argmax, attention_to_probs, accuracy_of, EpisodeScores, MetaModel};
use crate::metatrain::{meta_train, TrainConfig};
use crate::taskgen::{subsample_pool, ClassPool, MetaExample, PoolMeta, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Bag1: average raw scores (logits / attention scores).
    Logits,
    /// Bag2: average normalized class probabilities.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagEnsemble {
    pub members: Vec<MetaModel>,
    pub mode: Aggregation,
    /// Metadata of the sub-pool each member was trained on.
    pub sub_pools: Vec<PoolMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    /// Per-query class scores: averaged logits (Bag1, ProtoNet/FoMaml), class
    /// probabilities from averaged attention (Bag1, MatchNet), or averaged
    /// probabilities (Bag2).
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Trains `bags` members, each on its own `classes_per_bag`-class sub-pool
/// (stream `rng.index(b)`) starting from `init`, with the episode seed of
/// member `b` offset by `b`.
pub fn train_bag(
    pool: &ClassPool,
    bags: usize,
    classes_per_bag: usize,
    init: &MetaModel,
    base: &TrainConfig,
    mode: Aggregation,
    rng: &RngStream,
) -> Result<BagEnsemble> {
    train_bag_with(pool, bags, classes_per_bag, base, mode, rng, |_, _| Ok(init.clone()))
}

/// [`train_bag`] with a per-member initializer receiving the member index and
/// its sub-pool (e.g. to pre-train on the sub-pool).
pub fn train_bag_with<F>(
    pool: &ClassPool,
    bags: usize,
    classes_per_bag: usize,
    base: &TrainConfig,
    mode: Aggregation,
    rng: &RngStream,
    init: F,
) -> Result<BagEnsemble>
where
    F: Fn(usize, &ClassPool) -> Result<MetaModel>,
{
    if bags == 0 {
        return Err(invalid("a bag ensemble needs at least one member"));
    }
    let mut members = Vec::with_capacity(bags);
    let mut sub_pools = Vec::with_capacity(bags);
    for b in 0..bags {
        let sub = subsample_pool(pool, Some(classes_per_bag), None, &rng.index(b as u64))?;
        let cfg = TrainConfig {
            seed: base.seed.wrapping_add(b as u64),
            ..base.clone()
        };
        let (model, _) = meta_train(init(b, &sub)?, &sub, None, &cfg)?;
        members.push(model);
        sub_pools.push(sub.meta().clone());
    }
    Ok(BagEnsemble {
        members,
        mode,
        sub_pools,
    })
}

fn mean_rows(rows: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut acc = rows[0].clone();
    for m in &rows[1..] {
        for (a, r) in acc.iter_mut().zip(m) {
            a.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
    }
    let b = rows.len() as f64;
    acc.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x /= b));
    acc
}

pub fn ensemble_predict(ensemble: &BagEnsemble, episode: &MetaExample) -> Result<EnsemblePrediction> {
    let first = ensemble.members.first().ok_or_else(|| invalid("empty ensemble"))?;
    if ensemble.members.iter().any(|m| m.variant() != first.variant()) {
        return Err(invalid("ensemble members must share one variant"));
    }
    let member_scores = ensemble
        .members
        .iter()
        .map(|m| m.scores(episode))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&member_scores, ensemble.mode)
}

/// Combines per-member scores under the given aggregation.
pub fn aggregate(member_scores: &[EpisodeScores], mode: Aggregation) -> Result<EnsemblePrediction> {
    if member_scores.is_empty() {
        return Err(invalid("empty ensemble"));
    }
    let scores = match mode {
        Aggregation::Probabilities => mean_rows(&member_scores.iter().map(EpisodeScores::probabilities).collect::<Vec<_>>()),
        Aggregation::Logits => match &member_scores[0] {
            EpisodeScores::Logits(_) => {
                let rows = member_scores
                    .iter()
                    .map(|s| match s {
                        EpisodeScores::Logits(l) => Ok(l.rows.clone()),
                        _ => Err(invalid("mixed score kinds in ensemble")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                mean_rows(&rows)
            }
            EpisodeScores::Attention {
                support_labels, ways, ..
            } => {
                let rows = member_scores
                    .iter()
                    .map(|s| match s {
                        EpisodeScores::Attention { scores, .. } => Ok(scores.clone()),
                        _ => Err(invalid("mixed score kinds in ensemble")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                attention_to_probs(&mean_rows(&rows), support_labels, *ways)
            }
        },
    };
    let labels = scores.iter().map(|r| argmax(r)).collect();
    Ok(EnsemblePrediction { scores, labels })
}

pub fn ensemble_accuracy(ensemble: &BagEnsemble, episode: &MetaExample) -> Result<f64> {
    Ok(accuracy_of(&ensemble_predict(ensemble, episode)?.labels, &episode.query_labels()))
}
