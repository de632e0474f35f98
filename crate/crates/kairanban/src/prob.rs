//! Label spaces and probability vectors.
//!
//! Every prediction in the pipeline is a distribution over a fixed, ordered
//! set of sentiment labels. [`ProbabilityVector`] enforces the normalization
//! invariant at construction time and carries an explicit placeholder state:
//! the document that seeds a circulation run starts with an all-zero vector
//! that no numeric operation may consume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the sum-to-one check at the type boundary.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Errors from label-space and probability-vector construction and math.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("a label space needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("label {0:?} is empty or duplicates another label")]
    InvalidLabel(String),
    #[error("cannot normalize: all entries are zero")]
    AllZero,
    #[error("cannot normalize: entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entry {index} is not a finite number")]
    NonFinite { index: usize },
    #[error("operation not defined on a placeholder distribution")]
    PlaceholderInput,
    #[error("expected {expected} entries, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("entries sum to {sum}, not 1 within tolerance")]
    NotNormalized { sum: f64 },
    #[error("entry {index} is outside [0, 1] ({value})")]
    OutOfRange { index: usize, value: f64 },
}

/// An ordered set of class labels. Order is significant: probability vectors,
/// confusion counts, and prompt renderings all follow it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    /// Builds a label space from at least two unique, non-empty labels.
    /// Uniqueness is case-insensitive because model replies are matched to
    /// labels case-insensitively.
    pub fn new<I, S>(labels: I) -> Result<Self, ProbError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ProbError::TooFewLabels(labels.len()));
        }
        let mut seen: Vec<String> = Vec::with_capacity(labels.len());
        for label in &labels {
            let folded = label.trim().to_lowercase();
            if folded.is_empty() || seen.contains(&folded) {
                return Err(ProbError::InvalidLabel(label.clone()));
            }
            seen.push(folded);
        }
        Ok(Self { labels })
    }

    /// The three-point sentiment scale used by the tweet and finance corpora.
    pub fn ternary() -> Self {
        Self::new(["negative", "neutral", "positive"]).expect("static labels are valid")
    }

    /// The five-point sentiment scale used by the movie-review corpus.
    pub fn five_point() -> Self {
        Self::new([
            "very negative",
            "negative",
            "neutral",
            "positive",
            "very positive",
        ])
        .expect("static labels are valid")
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Labels in declaration order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Label at `index`. Panics if out of range, mirroring slice indexing.
    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Case-insensitive lookup of a label name (leading/trailing whitespace
    /// ignored).
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let folded = name.trim().to_lowercase();
        self.labels.iter().position(|l| l.to_lowercase() == folded)
    }

    /// Labels joined with `", "`, handy for prompt slots.
    pub fn joined(&self) -> String {
        self.labels.join(", ")
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = ProbError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

/// Serialized shape of a [`ProbabilityVector`]; deserialization re-runs the
/// constructor so invalid vectors cannot enter through stored transcripts.
#[derive(Serialize, Deserialize)]
struct ProbabilityVectorRepr {
    entries: Vec<f64>,
    placeholder: bool,
}

/// A probability distribution over the labels of some [`LabelSpace`], stored
/// in label order.
///
/// Two states exist:
/// * regular — entries in `[0, 1]` summing to 1 within [`SUM_TOLERANCE`];
/// * placeholder — every entry exactly `0.0`, used only to seed the first
///   document step. Numeric operations reject placeholders with
///   [`ProbError::PlaceholderInput`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbabilityVectorRepr", into = "ProbabilityVectorRepr")]
pub struct ProbabilityVector {
    entries: Vec<f64>,
    placeholder: bool,
}

impl ProbabilityVector {
    /// Validates and wraps an already-normalized vector.
    pub fn new(entries: Vec<f64>) -> Result<Self, ProbError> {
        if entries.is_empty() {
            return Err(ProbError::WrongLength {
                expected: 1,
                got: 0,
            });
        }
        let mut sum = 0.0;
        for (index, &value) in entries.iter().enumerate() {
            if !value.is_finite() {
                return Err(ProbError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(ProbError::OutOfRange { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        Ok(Self {
            entries,
            placeholder: false,
        })
    }

    /// The all-zero placeholder that seeds a circulation document.
    pub fn placeholder(k: usize) -> Self {
        Self {
            entries: vec![0.0; k],
            placeholder: true,
        }
    }

    /// The uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution needs at least one class");
        Self {
            entries: vec![1.0 / k as f64; k],
            placeholder: false,
        }
    }

    /// A distribution with all mass on `index`. Panics if out of range; this
    /// is a construction aid for fixtures and gold vectors, not a parser.
    pub fn one_hot(k: usize, index: usize) -> Self {
        assert!(index < k, "one-hot index {index} out of range for k={k}");
        let mut entries = vec![0.0; k];
        entries[index] = 1.0;
        Self {
            entries,
            placeholder: false,
        }
    }

    /// Rescales non-negative raw weights to sum to 1.
    pub fn normalize(raw: &[f64]) -> Result<Self, ProbError> {
        if raw.is_empty() {
            return Err(ProbError::WrongLength {
                expected: 1,
                got: 0,
            });
        }
        let mut sum = 0.0;
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() {
                return Err(ProbError::NonFinite { index });
            }
            if value < 0.0 {
                return Err(ProbError::NegativeEntry { index, value });
            }
            sum += value;
        }
        if sum == 0.0 {
            return Err(ProbError::AllZero);
        }
        Ok(Self {
            entries: raw.iter().map(|v| v / sum).collect(),
            placeholder: false,
        })
    }

    /// Whether this is the all-zero placeholder.
    pub fn is_placeholder(&self) -> bool {
        self.placeholder
    }

    /// Entries in label order.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    /// Shannon entropy in nats, with the `0 ln 0 = 0` convention. Lies in
    /// `[0, ln k]`.
    pub fn entropy(&self) -> Result<f64, ProbError> {
        if self.placeholder {
            return Err(ProbError::PlaceholderInput);
        }
        let h: f64 = self
            .entries
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum();
        Ok((-h).max(0.0))
    }

    /// Population variance of the entries around their mean `1/k`. Zero for
    /// the uniform distribution, at most `(k-1)/k^2` for a one-hot vector.
    pub fn variance(&self) -> Result<f64, ProbError> {
        if self.placeholder {
            return Err(ProbError::PlaceholderInput);
        }
        let k = self.entries.len() as f64;
        let mean = 1.0 / k;
        let ss: f64 = self.entries.iter().map(|p| (p - mean).powi(2)).sum();
        Ok(ss / k)
    }

    /// Index of the largest entry; ties break toward the lowest index.
    pub fn argmax_index(&self) -> Result<usize, ProbError> {
        if self.placeholder {
            return Err(ProbError::PlaceholderInput);
        }
        let mut best = 0;
        for (i, &p) in self.entries.iter().enumerate().skip(1) {
            if p > self.entries[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Label of the largest entry; ties break toward the lowest index.
    pub fn argmax_label<'a>(&self, space: &'a LabelSpace) -> Result<&'a str, ProbError> {
        if self.entries.len() != space.k() {
            return Err(ProbError::WrongLength {
                expected: space.k(),
                got: self.entries.len(),
            });
        }
        Ok(space.label(self.argmax_index()?))
    }
}

impl TryFrom<ProbabilityVectorRepr> for ProbabilityVector {
    type Error = ProbError;

    fn try_from(repr: ProbabilityVectorRepr) -> Result<Self, Self::Error> {
        if repr.placeholder {
            if repr.entries.iter().any(|&p| p != 0.0) {
                return Err(ProbError::NotNormalized {
                    sum: repr.entries.iter().sum(),
                });
            }
            Ok(Self::placeholder(repr.entries.len()))
        } else {
            Self::new(repr.entries)
        }
    }
}

impl From<ProbabilityVector> for ProbabilityVectorRepr {
    fn from(v: ProbabilityVector) -> Self {
        Self {
            entries: v.entries,
            placeholder: v.placeholder,
        }
    }
}
