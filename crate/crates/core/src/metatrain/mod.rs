//! Meta-ERM engine: episodic training, meta-validation model selection and
//! meta-test evaluation.

mod eval;
mod train;

pub use eval::{
    eval_stream, evaluate_episodes, evaluate_meta_model, meta_validate_select, worker_threads, EvalReport, Selection,
};
pub use train::{meta_train, meta_train_with, EpochStats, OptimizerConfig, TrainConfig, TrainingCurve};

pub(crate) use eval::evaluate_source;
