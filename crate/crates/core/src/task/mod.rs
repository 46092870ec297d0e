//! Synthetic corridor-driving task: scenarios, rasters, labels, the expert
//! planner, the reference model and evaluation metrics.

pub mod dataset;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod scenario;

pub use dataset::{Batch, Dataset, DatasetConfig, DatasetSplits, Sample, Split, Targets};
pub use metrics::SampleMetrics;
pub use model::build_reference_model;
pub use raster::{rasterize, Labels, Observation};
pub use scenario::{expert_plan, generate_scenario, Point, Scenario};
