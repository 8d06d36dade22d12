use thiserror::Error;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // protocol
    #[error("claim {0:?} listed more than once")]
    DuplicateClaim(String),
    #[error("unknown aspect {0:?}")]
    UnknownAspect(String),
    #[error("unknown claim {0:?}")]
    UnknownClaim(String),
    #[error("claim {0:?} has an empty keyword list")]
    EmptyKeywordList(String),
    #[error("keyword {0:?} appears more than once")]
    DuplicateKeyword(String),
    #[error("protocol does not cover claim {0:?}")]
    MissingClaim(String),

    // records
    #[error("unknown station {0:?}")]
    UnknownStation(String),
    #[error("report body is empty")]
    EmptyBody,
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    // ingestion
    #[error("reports from more than one station: {0} and {1}")]
    MixedStations(String, String),
    #[error("invalid date range: {0}")]
    InvalidRange(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("cannot parse product: {0}")]
    Parse(String),

    // segmentation / extraction
    #[error("backend error: {0}")]
    Backend(#[from] GatewayError),
    #[error("segmentation produced no content for any day")]
    NoCoverage,
    #[error("schema error: {0}")]
    Schema(String),

    // metrics
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dates not aligned at position {0}")]
    DateMismatch(usize),
    #[error("unknown group key {0:?}")]
    UnknownKey(String),

    // augmentation
    #[error("TF-IDF distance needs a corpus")]
    MissingCorpus,
    #[error("embedding distance needs an embedder")]
    MissingEmbedder,
    #[error("no sub-report available for day {0}")]
    EmptyDay(usize),

    // prompting
    #[error("no <<date, weekday>> Report: markers found")]
    NoMarkers,
    #[error("ranking prompt needs 9 candidates, got {0}")]
    WrongArity(usize),
    #[error("malformed ranking: {0}")]
    MalformedRanking(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
