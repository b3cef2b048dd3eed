//! Error type shared by all laboratory modules.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tokenization or scoring was handed an empty text.
    EmptyText,
    /// An operation needed a sequence of at least `need` tokens.
    SequenceTooShort { len: usize, need: usize },
    /// A split role could not be filled from the candidate pool.
    SplitCapacity { role: &'static str, requested: usize, survived: usize },
    /// The low-rank adapter rank must stay below min(rows, cols).
    RankTooLarge { rank: usize, rows: usize, cols: usize },
    /// Training produced a non-finite loss at the given update step.
    TrainingDiverged { step: usize },
    /// The requested training mode conflicts with the model state.
    InvalidMode(String),
    /// A checkpoint or artifact file failed structural validation.
    Format(String),
    /// A configuration value is out of its documented domain.
    InvalidConfig(String),
    /// The attack needs a reference model that was not supplied.
    MissingReference { attack: &'static str },
    /// The attack needs a conditioning prefix that was not supplied.
    MissingPrefix { attack: &'static str },
    /// A score denominator was exactly zero.
    DegenerateDenominator { attack: &'static str },
    /// Classifier training data contained only one label.
    SingleClass,
    /// A metric was asked to compare empty member or nonmember sets.
    EmptyClass { members: usize, nonmembers: usize },
    /// A paraphrase exchange file failed validation.
    ExchangeInvalid {
        missing: Vec<String>,
        empty: Vec<String>,
        unknown: Vec<String>,
    },
    /// A flagged sample has no paraphrase in the external exchange.
    MissingParaphrase { id: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyText => write!(f, "input text is empty"),
            Error::SequenceTooShort { len, need } => {
                write!(f, "sequence has {len} tokens but {need} are required")
            }
            Error::SplitCapacity { role, requested, survived } => write!(
                f,
                "cannot fill {role}: {requested} requested but only {survived} \
                 candidates survived"
            ),
            Error::RankTooLarge { rank, rows, cols } => {
                write!(f, "adapter rank {rank} must be below min({rows}, {cols})")
            }
            Error::TrainingDiverged { step } => {
                write!(f, "loss became non-finite at update step {step}")
            }
            Error::InvalidMode(msg) => write!(f, "invalid training mode: {msg}"),
            Error::Format(msg) => write!(f, "malformed artifact: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::MissingReference { attack } => {
                write!(f, "{attack} requires a reference model")
            }
            Error::MissingPrefix { attack } => {
                write!(f, "{attack} requires a conditioning prefix")
            }
            Error::DegenerateDenominator { attack } => {
                write!(f, "{attack} denominator is zero")
            }
            Error::SingleClass => {
                write!(f, "classifier training data contains a single class")
            }
            Error::EmptyClass { members, nonmembers } => write!(
                f,
                "metric needs both classes: {members} members, {nonmembers} nonmembers"
            ),
            Error::ExchangeInvalid { missing, empty, unknown } => write!(
                f,
                "paraphrase exchange invalid: missing ids [{}], empty paraphrases [{}], \
                 unknown ids [{}]",
                missing.join(", "),
                empty.join(", "),
                unknown.join(", ")
            ),
            Error::MissingParaphrase { id } => {
                write!(f, "no external paraphrase provided for flagged sample {id}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
