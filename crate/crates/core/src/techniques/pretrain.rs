use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{optimizer_step, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::metamodels::{argmax, collect_grads, Backbone, Linear};
use crate::metatrain::OptimizerConfig;
use crate::taskgen::{ClassPool, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub backbone: Backbone,
    /// All-classes head; only useful for inspection, meta models drop it.
    pub head: Linear,
    /// Training-set accuracy of backbone + head on the whole pool.
    pub accuracy: f64,
}

fn pool_matrix(pool: &ClassPool) -> (Vec<Vec<f64>>, Vec<usize>) {
    pool.instances().map(|i| (i.features, i.class_id)).unzip()
}

fn classify(backbone: &Backbone, head: &Linear, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
    let e = backbone.forward(&Tensor::from_rows(xs)?)?;
    let mut tape = Tape::new();
    let hb = head.bind(&mut tape);
    let en = tape.constant(e);
    let logits = hb.forward(&mut tape, en)?;
    Ok(tape.value(logits)?.to_rows().iter().map(|r| argmax(r)).collect())
}

/// Trains `backbone` plus a fresh linear head as a `C_pool`-way classifier
/// over every instance of the pool with minibatch cross-entropy.
pub fn pretrain_backbone(pool: &ClassPool, backbone: Backbone, config: &PretrainConfig, rng: &RngStream) -> Result<Pretrained> {
    if pool.num_classes() < 2 {
        return Err(invalid("pre-training needs at least two classes"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let (xs, ys) = pool_matrix(pool);
    let mut backbone = backbone;
    let mut head = Linear::random(backbone.embedding_dim(), pool.num_classes(), 1.0, &rng.child("head"));
    let mut opt = config.optimizer.state();
    let mut head_opt = config.optimizer.state();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut rng.child("shuffle").index(epoch as u64).rng());
        for batch in order.chunks(config.batch_size) {
            let x: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape);
            let hb = head.bind(&mut tape);
            let xn = tape.constant(Tensor::from_rows(&x)?);
            let e = bb.forward(&mut tape, xn)?;
            let logits = hb.forward(&mut tape, e)?;
            let loss = tape
                .cross_entropy(logits, &y)
                .map_err(|_| Error::Diverged { epoch, loss: f64::NAN })?;
            tape.backward(loss)?;
            collect_grads(&tape, &bb.ids(), &mut backbone.params_mut())?;
            collect_grads(&tape, &hb.ids(), &mut head.params_mut())?;
            optimizer_step(&mut backbone.params_mut(), &mut opt).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            optimizer_step(&mut head.params_mut(), &mut head_opt)?;
        }
    }
    for p in backbone.params_mut().into_iter().chain(head.params_mut()) {
        p.clear_grad();
    }
    let preds = classify(&backbone, &head, &xs)?;
    let accuracy = preds.iter().zip(&ys).filter(|(p, y)| p == y).count() as f64 / ys.len() as f64;
    Ok(Pretrained {
        backbone,
        head,
        accuracy,
    })
}
