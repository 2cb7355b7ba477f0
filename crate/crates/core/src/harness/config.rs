use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metamodels::ModelConfig;
use crate::metatrain::{OptimizerConfig, TrainConfig};
use crate::taskgen::{DomainTransform, EpisodeSpec, GaussianPoolParams, HeterogeneousPoolParams};
use crate::techniques::{MetaKnnConfig, PretrainConfig};

pub const CONFIG_SCHEMA: &str = "metaepi-config v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    GenCurve,
    Techniques,
    Bagging,
    Augment,
    Metaknn,
    Domainshift,
    SingleRun,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::GenCurve,
        ExperimentId::Techniques,
        ExperimentId::Bagging,
        ExperimentId::Augment,
        ExperimentId::Metaknn,
        ExperimentId::Domainshift,
        ExperimentId::SingleRun,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExperimentId::GenCurve => "gen-curve",
            ExperimentId::Techniques => "techniques",
            ExperimentId::Bagging => "bagging",
            ExperimentId::Augment => "augment",
            ExperimentId::Metaknn => "metaknn",
            ExperimentId::Domainshift => "domainshift",
            ExperimentId::SingleRun => "single-run",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| invalid(format!("unknown experiment `{s}`")))
    }
}

/// Class counts of the disjoint meta-train / meta-val / meta-test pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 32,
            val: 0,
            test: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    /// Validation instances per class in training episodes.
    pub val_per_class: usize,
    /// Validation instances per class in meta-test episodes; defaults to
    /// `val_per_class`.
    #[serde(default)]
    pub test_val_per_class: Option<usize>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            val_per_class: 15,
            test_val_per_class: None,
        }
    }
}

impl EpisodeConfig {
    pub fn train_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.ways, self.shots, self.val_per_class)
    }

    pub fn test_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.ways, self.shots, self.test_val_per_class.unwrap_or(self.val_per_class))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    #[serde(default = "default_meta_batch")]
    pub meta_batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub val_episodes: usize,
}

fn default_meta_batch() -> usize {
    4
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            episodes_per_epoch: 100,
            meta_batch: 4,
            optimizer: OptimizerConfig::default(),
            val_episodes: 0,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, spec: EpisodeSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            episodes_per_epoch: self.episodes_per_epoch,
            epochs: self.epochs,
            meta_batch: self.meta_batch,
            optimizer: self.optimizer,
            spec,
            seed,
            val_episodes: self.val_episodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueConfig {
    pub pretrain: PretrainConfig,
    /// Weight of the auxiliary all-classes objective.
    pub lambda: f64,
    pub aux_batch: usize,
}

impl Default for TechniqueConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig {
                epochs: 10,
                batch_size: 64,
                optimizer: OptimizerConfig::default(),
            },
            lambda: 1.0,
            aux_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenCurveConfig {
    pub instances: Vec<usize>,
    pub classes: Vec<usize>,
    /// Training epochs per grid point, overriding `train.epochs`.
    pub epochs: usize,
    /// Validation instances per class in meta-training episodes; must fit
    /// in the smallest `instances` value together with the shots.
    pub val_per_class: usize,
}

impl Default for GenCurveConfig {
    fn default() -> Self {
        Self {
            instances: vec![10, 50, 200],
            classes: vec![8, 16, 32],
            epochs: 80,
            val_per_class: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaggingConfig {
    pub bags: usize,
    pub classes_per_bag: usize,
    /// Members start from the shared pre-trained backbone in the
    /// `pretrain=1` arm.
    pub shared_pretrain: bool,
}

impl Default for BaggingConfig {
    fn default() -> Self {
        Self {
            bags: 10,
            classes_per_bag: 24,
            shared_pretrain: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub ks: Vec<usize>,
    pub trials: usize,
    /// Fine Gaussian clusters merged into each coarse class of the
    /// challenging-split pool.
    pub clusters_per_class: usize,
    pub instances_per_cluster: usize,
    /// Within-cluster standard deviation of the fine clusters.
    pub cluster_spread: f64,
    /// Validation instances per class in (augmented) meta-training episodes.
    pub val_per_class: usize,
    /// Coarse classes in the meta-train pool; episodes use all of them.
    pub train_classes: usize,
    pub test_classes: usize,
    /// Run K-means in the embedding of a backbone pre-trained on the coarse
    /// classes instead of raw features.
    pub pretrained_features: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            trials: 30,
            clusters_per_class: 4,
            instances_per_cluster: 100,
            cluster_spread: 0.5,
            val_per_class: 5,
            train_classes: 10,
            test_classes: 20,
            pretrained_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaKnnSection {
    pub num_subs: usize,
    pub offset_scale: f64,
    pub noise_scale_spread: f64,
    /// Meta-train / meta-test classes per sub-distribution.
    pub train_classes_per_sub: usize,
    pub test_classes_per_sub: usize,
    pub index_tasks: usize,
    pub knn: MetaKnnConfig,
}

impl Default for MetaKnnSection {
    fn default() -> Self {
        Self {
            num_subs: 4,
            offset_scale: 1.0,
            noise_scale_spread: 0.8,
            train_classes_per_sub: 16,
            test_classes_per_sub: 8,
            index_tasks: 2000,
            knn: MetaKnnConfig {
                k: 100,
                epochs: 1,
                step_size: 2e-4,
                meta_batch: 4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftConfig {
    pub cases: Vec<String>,
    /// The last `rotated_dims` informative coordinates are rotated pairwise
    /// by `angle` radians in domain 1; the rest map to themselves.
    pub rotated_dims: usize,
    pub angle: f64,
    pub offset: f64,
    pub noise: f64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        Self {
            cases: ["I-1", "I-2", "I-3", "I-4"].map(String::from).to_vec(),
            rotated_dims: 8,
            angle: std::f64::consts::FRAC_PI_2,
            offset: 0.5,
            noise: 0.1,
        }
    }
}

impl DomainShiftConfig {
    /// Domain-1 map for a pool of width `dim` with `informative` signal
    /// coordinates.
    pub fn transform(&self, dim: usize, informative: usize) -> Result<DomainTransform> {
        if self.rotated_dims > informative || !self.rotated_dims.is_multiple_of(2) {
            return Err(invalid("rotated_dims must be even and within the informative coordinates"));
        }
        let mut t = DomainTransform::identity(dim);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let start = informative - self.rotated_dims;
        for i in (start..informative).step_by(2) {
            t.matrix[i][i] = c;
            t.matrix[i][i + 1] = -s;
            t.matrix[i + 1][i] = s;
            t.matrix[i + 1][i + 1] = c;
            t.offset[i] = self.offset;
            t.offset[i + 1] = self.offset;
        }
        t.noise = self.noise;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub experiment: Option<ExperimentId>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_pool")]
    pub pool: GaussianPoolParams,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub techniques: TechniqueConfig,
    #[serde(default)]
    pub gen_curve: GenCurveConfig,
    #[serde(default)]
    pub bagging: BaggingConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub metaknn: MetaKnnSection,
    #[serde(default)]
    pub domainshift: DomainShiftConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_eval_episodes() -> usize {
    500
}

fn default_pool() -> GaussianPoolParams {
    GaussianPoolParams {
        nuisance_dims: 16,
        nuisance_spread: 1.5,
        ..GaussianPoolParams::new(52, 32, 200, 1.0, 1.0)
    }
}

fn default_model() -> ModelConfig {
    ModelConfig::new(crate::metamodels::Variant::ProtoNet)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            experiment: None,
            seeds: default_seeds(),
            eval_episodes: default_eval_episodes(),
            pool: default_pool(),
            split: SplitConfig::default(),
            episode: EpisodeConfig::default(),
            model: default_model(),
            train: TrainSection::default(),
            techniques: TechniqueConfig::default(),
            gen_curve: GenCurveConfig::default(),
            bagging: BaggingConfig::default(),
            augment: AugmentConfig::default(),
            metaknn: MetaKnnSection::default(),
            domainshift: DomainShiftConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_experiment(id: ExperimentId) -> Self {
        Self {
            experiment: Some(id),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Version(format!(
                "config schema `{}` (expected `{CONFIG_SCHEMA}`)",
                self.schema
            )));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must be non-empty"));
        }
        if self.eval_episodes == 0 {
            return Err(invalid("eval_episodes must be at least 1"));
        }
        self.episode.train_spec().validate()?;
        self.episode.test_spec().validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("config serialization: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Heterogeneous pool parameters of the metaknn recipe: the `pool`
    /// section supplies the per-sub class generator.
    pub fn heterogeneous_params(&self) -> HeterogeneousPoolParams {
        let m = &self.metaknn;
        HeterogeneousPoolParams {
            base: GaussianPoolParams {
                num_classes: m.train_classes_per_sub + m.test_classes_per_sub,
                ..self.pool.clone()
            },
            num_subs: m.num_subs,
            offset_scale: m.offset_scale,
            noise_scale_spread: m.noise_scale_spread,
        }
    }
}
