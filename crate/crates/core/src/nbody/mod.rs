//! Self-contained generators for the charged, spring and gravity particle systems.

mod dataset;
mod sim;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, DatasetMeta, PropertyKind, Split, SplitCounts,
    TrajectoryDataset, SCHEMA_VERSION,
};
pub use sim::{
    simulate, simulate_charged, simulate_from, simulate_gravity, simulate_spring, Diagnostics,
    InitialConditions, Scenario, ScenarioConfig, Simulation,
};
