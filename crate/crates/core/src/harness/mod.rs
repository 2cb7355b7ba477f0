//! Experiment configuration, recipes and CSV result emission.

mod config;
mod recipes;
mod records;

pub use config::{
    AugmentConfig, BaggingConfig, DomainShiftConfig, EpisodeConfig, ExperimentConfig, ExperimentId, GenCurveConfig, MetaKnnSection,
    SplitConfig, TechniqueConfig, TrainSection, CONFIG_SCHEMA,
};
pub use recipes::{
    case_domains, challenging_splits, domainshift_specs, gaussian_splits, heterogeneous_splits, run_experiment, run_experiment_to,
    two_domain_splits, Splits,
};
pub use records::{emit_csv, parse_csv, records_to_csv, sort_records, ResultRecord, CSV_HEADER, METRICS};
