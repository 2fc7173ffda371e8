//! Tabular schema and preprocessing, masking and missingness scenarios,
//! permutation feature importance, and the synthetic paired dataset.

mod importance;
mod masking;
mod schema;
mod synth;

pub use importance::{feature_importance, FeatureImportance, PERMUTATION_REPEATS};
pub use masking::{
    apply_missing_scenario, batch_indices, corrupt_tabular, random_msk, BatchMode, MissingScenario, ScenarioKind,
};
pub use schema::{zscore_fit_transform, Column, ColumnKind, OrdinalCodec, TabularBatch, TabularSchema, ZScore};
pub use synth::{synth_generate, Dataset, SplitDataset, SynthConfig};
