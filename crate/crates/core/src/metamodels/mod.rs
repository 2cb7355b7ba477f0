//! Meta hypothesis sets over a shared MLP backbone: ProtoNet, MatchNet and
//! first-order MAML, with the validation-based and model-space meta losses.

mod backbone;
mod checkpoint;
mod model;

pub use backbone::{backbone_forward, Backbone, BoundBackbone, BoundLinear, Linear};
pub use checkpoint::{load_model, model_from_text, model_to_text, save_model, MODEL_HEADER};
pub use model::{
    argmax, attention_to_probs, collect_grads, episode_accuracy, episode_loss, fomaml_adapt, gradient_descent,
    matchnet_probs, matchnet_probs_from_embeddings, model_space_loss, protonet_logits, protonet_logits_from_embeddings,
    EpisodeGraph, EpisodeLogits, EpisodeOutcome, EpisodeScores, FoMaml, MetaModel, ModelConfig, Variant,
};

pub(crate) use model::{accuracy_of, graph_predictions};
