//! Multi-modal Bayesian deforestation detection on co-registered image
//! time series (optical NDVI, SAR backscatter ratio and SAR coherence).

pub mod analyze;
pub mod cube;
pub mod detector;
pub mod error;
pub mod forest;
pub mod grid;
pub mod pipeline;
pub mod preprocess;
pub mod raw;
pub mod synth;
pub mod tvdenoise;

pub use cube::{ForestClass, ForestMask, Modality, Scene, SceneCube, SceneMeta};
pub use detector::{AlertRecord, DetectionMap, Thresholds};
pub use error::{BuddError, Result};
pub use forest::{Channel, ChannelCubes, ChannelSet, ModelGrid, PerChannel, PeriodSplit};
pub use grid::{Grid, Rect};
pub use pipeline::{run_pipeline, PipelineConfig};
