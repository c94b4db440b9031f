//! Data ingestion and benchmark construction.

mod features;
mod interactions;
mod kg;
mod noise;
mod split;
mod synthetic;
mod vocab;

pub use features::{load_features, read_features, write_features, FeatureMatrix, Modality};
pub use interactions::{
    k_core_filter, load_interactions, parse_interactions, write_interactions, InteractionDataset,
    InteractionFormat,
};
pub use kg::{
    construct_kg_from_metadata, load_kg, load_metadata, write_kg, EntityType, ItemMetadata,
    KgBuildOptions, KnowledgeGraph, Triple, RELATION_NAMES,
};
pub use noise::{inject_kg_noise, NoiseMode, NoiseReport};
pub use split::{
    build_normal_cold_splits, build_strict_cold_splits, read_split_manifest,
    write_split_manifest, NormalColdSplit, SplitRatios, SplitSpec,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
pub use vocab::Vocab;
