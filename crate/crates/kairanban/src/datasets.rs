//! Dataset ingestion and seeded sampling.
//!
//! Three sentiment corpora are supported, each with a fixed label space:
//!
//! * `sst5` — five-point movie reviews, TSV or CSV with `text,label` rows;
//! * `tweeteval` — three-point tweets, TSV or paired `*_text.txt` /
//!   `*_labels.txt` files;
//! * `financial_phrasebank` — three-point finance sentences in the
//!   `sentence@label` format, read with Latin-1 tolerance.
//!
//! Labels may be written as names (case-insensitive) or as 0-based indices.
//! Instance ids are `<dataset>:<row>` with 1-based data rows, so a transcript
//! always points back at its source line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::LabelSpace;

/// Errors from locating, reading, or sampling datasets.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file not found; tried {tried:?}")]
    FileNotFound { tried: Vec<PathBuf> },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{name} row {row} is malformed: {detail}")]
    MalformedRow {
        name: String,
        row: usize,
        detail: String,
    },
    #[error("{name} row {row} has unknown label {value:?}")]
    UnknownLabel {
        name: String,
        row: usize,
        value: String,
    },
    #[error("sample of {requested} exceeds dataset size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid dataset option: {0}")]
    InvalidOption(String),
}

/// One labeled text instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    /// `<dataset>:<row>`, rows 1-based.
    pub id: String,
    pub text: String,
    pub gold_label_index: usize,
}

/// The supported corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Sst5,
    #[serde(rename = "tweeteval")]
    TweetEval,
    FinancialPhrasebank,
}

impl DatasetName {
    pub const ALL: [DatasetName; 3] = [
        DatasetName::Sst5,
        DatasetName::TweetEval,
        DatasetName::FinancialPhrasebank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Sst5 => "sst5",
            DatasetName::TweetEval => "tweeteval",
            DatasetName::FinancialPhrasebank => "financial_phrasebank",
        }
    }

    /// The label space this corpus is annotated with.
    pub fn space(self) -> LabelSpace {
        match self {
            DatasetName::Sst5 => LabelSpace::five_point(),
            DatasetName::TweetEval | DatasetName::FinancialPhrasebank => LabelSpace::ternary(),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "sst5" | "sst-5" => Ok(DatasetName::Sst5),
            "tweeteval" | "tweet_eval" => Ok(DatasetName::TweetEval),
            "financial_phrasebank" | "phrasebank" => Ok(DatasetName::FinancialPhrasebank),
            other => Err(format!(
                "unknown dataset {other:?}; expected sst5, tweeteval, or financial_phrasebank"
            )),
        }
    }
}

/// Where and how a dataset's rows are stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DataFormat {
    /// `text<TAB>label` rows; the label follows the last tab.
    TabSeparated { path: PathBuf },
    /// CSV rows `text,label`, optional header.
    Csv { path: PathBuf },
    /// `sentence@label` rows; the label follows the last `@`.
    AtSeparated { path: PathBuf },
    /// One text per line in one file, one label per line in another.
    PairedLines {
        text_path: PathBuf,
        label_path: PathBuf,
    },
}

/// File-resolution knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolveOptions {
    /// Which sst5 split to read (default `test`).
    pub sst5_split: String,
    /// Minimum annotator-agreement tier of the finance corpus: `50`, `66`,
    /// `75` (default), or `100`.
    pub phrasebank_agreement: String,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        Self {
            sst5_split: "test".to_string(),
            phrasebank_agreement: "75".to_string(),
        }
    }
}

/// A named dataset bound to concrete files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(flatten)]
    pub format: DataFormat,
}

impl DatasetSpec {
    pub fn space(&self) -> LabelSpace {
        self.name.space()
    }

    /// The candidate file layouts for `name` under `data_dir`, in lookup
    /// order.
    fn candidates(
        name: DatasetName,
        data_dir: &Path,
        options: &ResolveOptions,
    ) -> Result<Vec<DataFormat>, DatasetError> {
        Ok(match name {
            DatasetName::Sst5 => {
                let split = options.sst5_split.trim();
                if split.is_empty() {
                    return Err(DatasetError::InvalidOption("sst5 split is empty".into()));
                }
                vec![
                    DataFormat::TabSeparated {
                        path: data_dir.join(format!("sst5_{split}.tsv")),
                    },
                    DataFormat::Csv {
                        path: data_dir.join(format!("sst5_{split}.csv")),
                    },
                ]
            }
            DatasetName::TweetEval => vec![
                DataFormat::TabSeparated {
                    path: data_dir.join("tweeteval_test.tsv"),
                },
                DataFormat::PairedLines {
                    text_path: data_dir.join("tweeteval").join("test_text.txt"),
                    label_path: data_dir.join("tweeteval").join("test_labels.txt"),
                },
            ],
            DatasetName::FinancialPhrasebank => {
                let tier = options.phrasebank_agreement.trim();
                if !matches!(tier, "50" | "66" | "75" | "100") {
                    return Err(DatasetError::InvalidOption(format!(
                        "phrasebank agreement tier must be 50, 66, 75, or 100, got {tier:?}"
                    )));
                }
                vec![
                    DataFormat::AtSeparated {
                        path: data_dir.join(format!("financial_phrasebank_{tier}.txt")),
                    },
                    DataFormat::AtSeparated {
                        path: data_dir.join(format!("Sentences_{tier}Agree.txt")),
                    },
                ]
            }
        })
    }

    /// Finds the dataset's files under `data_dir` using the documented
    /// naming conventions, trying each candidate in order.
    pub fn resolve(
        name: DatasetName,
        data_dir: &Path,
        options: &ResolveOptions,
    ) -> Result<Self, DatasetError> {
        let mut tried = Vec::new();
        for format in Self::candidates(name, data_dir, options)? {
            let exists = match &format {
                DataFormat::TabSeparated { path }
                | DataFormat::Csv { path }
                | DataFormat::AtSeparated { path } => {
                    tried.push(path.clone());
                    path.is_file()
                }
                DataFormat::PairedLines {
                    text_path,
                    label_path,
                } => {
                    tried.push(text_path.clone());
                    text_path.is_file() && label_path.is_file()
                }
            };
            if exists {
                return Ok(Self { name, format });
            }
        }
        Err(DatasetError::FileNotFound { tried })
    }

    /// The first-choice layout for `name`, whether or not the file exists.
    /// Useful when a missing dataset should fail its own cells at load time
    /// rather than abort the whole run up front.
    pub fn conventional(
        name: DatasetName,
        data_dir: &Path,
        options: &ResolveOptions,
    ) -> Result<Self, DatasetError> {
        let format = Self::candidates(name, data_dir, options)?
            .into_iter()
            .next()
            .expect("every dataset has at least one candidate layout");
        Ok(Self { name, format })
    }

    /// Loads every row, preserving file order.
    pub fn load(&self) -> Result<Vec<Instance>, DatasetError> {
        let space = self.space();
        match &self.format {
            DataFormat::TabSeparated { path } => self.load_separated(path, '\t', &space),
            DataFormat::AtSeparated { path } => self.load_separated(path, '@', &space),
            DataFormat::Csv { path } => self.load_csv(path, &space),
            DataFormat::PairedLines {
                text_path,
                label_path,
            } => self.load_paired(text_path, label_path, &space),
        }
    }

    fn instance(
        &self,
        row: usize,
        text: &str,
        raw_label: &str,
        space: &LabelSpace,
    ) -> Result<Instance, DatasetError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(DatasetError::MalformedRow {
                name: self.name.to_string(),
                row,
                detail: "empty text".into(),
            });
        }
        let gold_label_index =
            parse_label(raw_label, space).ok_or_else(|| DatasetError::UnknownLabel {
                name: self.name.to_string(),
                row,
                value: raw_label.trim().to_string(),
            })?;
        Ok(Instance {
            id: format!("{}:{row}", self.name),
            text: text.to_string(),
            gold_label_index,
        })
    }

    fn load_separated(
        &self,
        path: &Path,
        separator: char,
        space: &LabelSpace,
    ) -> Result<Vec<Instance>, DatasetError> {
        let content = read_lossy_latin1(path)?;
        let mut instances = Vec::new();
        let mut row = 0;
        for line in content.lines() {
            if line.trim().is_empty() {
                continue;
            }
            row += 1;
            let (text, label) =
                line.rsplit_once(separator)
                    .ok_or_else(|| DatasetError::MalformedRow {
                        name: self.name.to_string(),
                        row,
                        detail: format!("no {separator:?} separator"),
                    })?;
            instances.push(self.instance(row, text, label, space)?);
        }
        Ok(instances)
    }

    fn load_csv(&self, path: &Path, space: &LabelSpace) -> Result<Vec<Instance>, DatasetError> {
        let content = read_lossy_latin1(path)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(content.as_bytes());
        let mut instances = Vec::new();
        let mut row = 0;
        for (i, result) in reader.records().enumerate() {
            let record = result.map_err(|e| DatasetError::MalformedRow {
                name: self.name.to_string(),
                row: i + 1,
                detail: e.to_string(),
            })?;
            if record.len() != 2 {
                return Err(DatasetError::MalformedRow {
                    name: self.name.to_string(),
                    row: i + 1,
                    detail: format!("expected 2 columns, got {}", record.len()),
                });
            }
            let (text, label) = (&record[0], &record[1]);
            if i == 0
                && text.trim().eq_ignore_ascii_case("text")
                && label.trim().eq_ignore_ascii_case("label")
            {
                continue; // header row
            }
            row += 1;
            instances.push(self.instance(row, text, label, space)?);
        }
        Ok(instances)
    }

    fn load_paired(
        &self,
        text_path: &Path,
        label_path: &Path,
        space: &LabelSpace,
    ) -> Result<Vec<Instance>, DatasetError> {
        let texts = read_lossy_latin1(text_path)?;
        let labels = read_lossy_latin1(label_path)?;
        let texts: Vec<&str> = texts.lines().collect();
        let labels: Vec<&str> = labels.lines().collect();
        if texts.len() != labels.len() {
            return Err(DatasetError::MalformedRow {
                name: self.name.to_string(),
                row: texts.len().min(labels.len()) + 1,
                detail: format!(
                    "text/label line counts differ ({} vs {})",
                    texts.len(),
                    labels.len()
                ),
            });
        }
        texts
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (text, label))| self.instance(i + 1, text, label, space))
            .collect()
    }
}

/// Reads a file as UTF-8, falling back to a byte-for-byte Latin-1 decode for
/// corpora distributed in legacy encodings.
fn read_lossy_latin1(path: &Path) -> Result<String, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match String::from_utf8(bytes) {
        Ok(text) => text,
        Err(err) => err.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

/// Parses a label as a 0-based index or a case-insensitive name.
fn parse_label(raw: &str, space: &LabelSpace) -> Option<usize> {
    let trimmed = raw.trim();
    if let Ok(index) = trimmed.parse::<usize>() {
        return (index < space.k()).then_some(index);
    }
    space.index_of(trimmed)
}

/// Draws `n` instances without replacement, in draw order, from a seeded
/// generator. The same pool, `n`, and seed always produce the same sample.
pub fn sample_instances(
    pool: &[Instance],
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>, DatasetError> {
    if n > pool.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
        out.push(pool[indices[i]].clone());
    }
    Ok(out)
}
