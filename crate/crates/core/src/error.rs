use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("filter design: requested {requested_db:.1} dB stopband but {num_taps} taps reach at most {achievable_db:.1} dB")]
    FilterDesign {
        requested_db: f64,
        achievable_db: f64,
        num_taps: usize,
    },
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("cannot resolve asset reference `{0}`")]
    AssetResolution(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("sampler state became non-finite at step {step}")]
    NumericDivergence { step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("lora: {0}")]
    Lora(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("binary archive error: {0}")]
    Archive(#[from] bincode::Error),
}
