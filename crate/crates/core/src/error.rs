use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("window of {tau} frames does not fit an utterance of {total_frames} frames")]
    WindowTooLong { tau: usize, total_frames: usize },

    #[error("phoneme index {k} out of range for a segmentation of {count} phonemes")]
    SegmentOutOfRange { k: usize, count: usize },

    #[error("window of {tau} frames is shorter than the {duration}-frame segment")]
    WindowTooShort { tau: usize, duration: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),

    #[error("invalid phoneme inventory: {0}")]
    InvalidInventory(String),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt audio file: {0}")]
    CorruptFile(String),

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("crossfade window out of range: {0}")]
    FadeOutOfRange(String),

    #[error("no alignment file for {0}")]
    MissingAlignment(PathBuf),

    #[error("alignment parse error in {path}: {detail}")]
    AlignmentParse { path: String, detail: String },

    #[error("item {id}: phoneme {symbol:?} not in inventory")]
    UnknownPhoneme { id: String, symbol: String },

    #[error("item {id}: alignment spans {alignment} frames but audio has {audio} frames")]
    FrameCountMismatch {
        id: String,
        alignment: usize,
        audio: usize,
    },

    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("phoneme {0:?} does not occur in the corpus")]
    PhonemeAbsent(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty segment")]
    EmptySegment,

    #[error("contrastive phoneme {0:?} equals the true phoneme")]
    SamePhoneme(String),

    #[error("training needs at least 2 phoneme classes, found {0}")]
    TooFewClasses(usize),

    #[error("phoneme {symbol:?} occurs {count} times in the training split, need at least 2")]
    PhonemeTooRare { symbol: String, count: usize },

    #[error("utterance too short: {frames} frames, window needs {tau}")]
    UtteranceTooShort { frames: usize, tau: usize },

    #[error("invalid phoneme request: {0}")]
    InvalidPhoneme(String),

    #[error("blend of {blend} frames does not fit beside the masked region")]
    BlendTooWide { blend: usize },

    #[error("external vocoder failed: {0}")]
    ExternalVocoderFailed(String),

    #[error("no donor for phoneme {0:?}")]
    NoDonor(String),

    #[error("model missing: {0}")]
    ModelMissing(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
