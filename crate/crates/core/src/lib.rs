//! Build and score a corpus of daily forecast reports: ingest forecast
//! discussions, cut them into four dated days, label claims per day, score
//! generated reports and derive rejection-sampling and preference datasets.

pub mod augmentation;
pub mod claims;
pub mod error;
pub mod gateway;
pub mod ingestion;
pub mod metrics;
pub mod model;
pub mod preference;
pub mod prompting;
pub mod protocol;
pub mod segmentation;
pub mod stations;
pub mod text;

pub use error::{Error, Result};
pub use model::{Aspect, Claim, DailyForecast, DayAnnotation, InstanceRecord, RawReport, SegmentedReport};
pub use protocol::AnnotationProtocol;
pub use stations::Station;
