//! Shared inputs for the benchmarks.

use dikw_core::simulator::{self, DemographicsMix, GroundTruthModel};
use dikw_core::{CatalogRef, Dataset, DatasetRef, GatePolicy, LlmMode, MessageCatalog, RunConfig};

pub const SEED: u64 = 20240301;

pub fn catalog() -> MessageCatalog {
    MessageCatalog::stage1()
}

pub fn model(catalog: &MessageCatalog) -> GroundTruthModel {
    GroundTruthModel::uniform(catalog, -1.2, SEED)
}

/// A simulated dataset of `n` encounters over the stage-1 catalog.
pub fn dataset(n: usize) -> Dataset {
    let catalog = catalog();
    let table = simulator::generate(&model(&catalog), n, &DemographicsMix::default(), &catalog).expect("simulation");
    Dataset::new(table, catalog).expect("dataset")
}

/// Canned-mode run over `n` simulated encounters with no review gates.
pub fn run_config(n: usize) -> RunConfig {
    let model = model(&catalog());
    let mut config = RunConfig::new(DatasetRef::Simulated { model, n, mix: None }, CatalogRef::default());
    config.review_gates = GatePolicy::none();
    config.llm_mode = LlmMode::Canned;
    config
}
