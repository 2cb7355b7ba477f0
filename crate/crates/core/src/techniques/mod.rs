//! Generalization techniques layered on the meta-ERM engine: supervised
//! pre-training, multi-objective training, bagging, K-means task
//! augmentation and nearest-neighbour meta model adaptation.

pub mod bagging;
pub mod kmeans;
pub mod metaknn;
pub mod multiobjective;
pub mod pretrain;

pub use bagging::{aggregate, ensemble_accuracy, ensemble_predict, train_bag, train_bag_with, Aggregation, BagEnsemble, EnsemblePrediction};
pub use kmeans::{kmeans, kmeans_augment_pool, kmeans_objective, AugmentedPool, MAX_LLOYD_ITERS};
pub use metaknn::{build_task_index, meta_knn_adapt, task_embedding, KnnOutcome, MetaKnnConfig, TaskIndex, INDEX_HEADER, SUPPORT_MEAN};
pub use multiobjective::{multiobjective_loss, AuxObjective};
pub use pretrain::{pretrain_backbone, PretrainConfig, Pretrained};
