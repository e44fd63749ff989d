//! Result codes and master-text report rendering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Abnormality;

/// Master text shipped with the crate.
pub const DEFAULT_MASTER_TEXT: &str = include_str!("../assets/master_text.tsv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("master text has no complete record for {0}")]
    MissingSentence(String),
    #[error("master text line {line}: unknown abnormality {key:?}")]
    UnknownAbnormality { line: usize, key: String },
    #[error("master text line {line}: empty sentence for {abnormality}")]
    EmptySentence { line: usize, abnormality: String },
    #[error("master text line {line}: second record for {abnormality}")]
    DuplicateAbnormality { line: usize, abnormality: String },
    #[error("invalid result code {0:?}: expected three characters of 0/1")]
    BadResultCode(String),
}

/// Ordered (cardiomegaly, effusion, consolidation) findings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResultCode([bool; 3]);

impl ResultCode {
    pub fn new(bits: [bool; 3]) -> Self {
        ResultCode(bits)
    }

    pub fn bits(self) -> [bool; 3] {
        self.0
    }

    pub fn get(self, abnormality: Abnormality) -> bool {
        self.0[abnormality.index()]
    }

    /// All eight codes in ascending binary order.
    pub fn all() -> impl Iterator<Item = ResultCode> {
        (0u8..8).map(|n| ResultCode([n & 4 != 0, n & 2 != 0, n & 1 != 0]))
    }

    pub fn with_flipped(self, abnormality: Abnormality) -> Self {
        let mut bits = self.0;
        bits[abnormality.index()] ^= true;
        ResultCode(bits)
    }
}

/// Concatenates the three per-model labels.
pub fn aggregate(labels: [bool; 3]) -> ResultCode {
    ResultCode(labels)
}

impl fmt::Display for ResultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ResultCode {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() != 3 {
            return Err(ReportError::BadResultCode(s.to_string()));
        }
        let mut bits = [false; 3];
        for (bit, &c) in bits.iter_mut().zip(bytes) {
            *bit = match c {
                b'0' => false,
                b'1' => true,
                _ => return Err(ReportError::BadResultCode(s.to_string())),
            };
        }
        Ok(ResultCode(bits))
    }
}

impl Serialize for ResultCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResultCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub negative: String,
    pub positive: String,
}

/// Negative/positive sentence for each abnormality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterText {
    pairs: [SentencePair; 3],
}

impl MasterText {
    pub fn parse(doc: &str) -> Result<Self, ReportError> {
        let mut pairs: [Option<SentencePair>; 3] = Default::default();
        for (n, line) in doc.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let key = fields.next().unwrap_or_default().trim();
            let abnormality: Abnormality = key.parse().map_err(|_| ReportError::UnknownAbnormality {
                line: line_no,
                key: key.to_string(),
            })?;
            let (Some(negative), Some(positive)) = (fields.next(), fields.next()) else {
                return Err(ReportError::MissingSentence(abnormality.to_string()));
            };
            let (negative, positive) = (negative.trim(), positive.trim());
            if negative.is_empty() || positive.is_empty() {
                return Err(ReportError::EmptySentence {
                    line: line_no,
                    abnormality: abnormality.to_string(),
                });
            }
            let slot = &mut pairs[abnormality.index()];
            if slot.is_some() {
                return Err(ReportError::DuplicateAbnormality {
                    line: line_no,
                    abnormality: abnormality.to_string(),
                });
            }
            *slot = Some(SentencePair {
                negative: negative.to_string(),
                positive: positive.to_string(),
            });
        }
        let [a, b, c] = pairs;
        let take = |p: Option<SentencePair>, abn: Abnormality| p.ok_or_else(|| ReportError::MissingSentence(abn.to_string()));
        Ok(MasterText {
            pairs: [
                take(a, Abnormality::Cardiomegaly)?,
                take(b, Abnormality::Effusion)?,
                take(c, Abnormality::Consolidation)?,
            ],
        })
    }

    pub fn pair(&self, abnormality: Abnormality) -> &SentencePair {
        &self.pairs[abnormality.index()]
    }

    pub fn sentence(&self, abnormality: Abnormality, present: bool) -> &str {
        let pair = self.pair(abnormality);
        if present {
            &pair.positive
        } else {
            &pair.negative
        }
    }

    /// Renders back into the tab-separated document format.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for abn in Abnormality::ALL {
            let p = self.pair(abn);
            out.push_str(&format!("{abn}\t{}\t{}\n", p.negative, p.positive));
        }
        out
    }
}

impl Default for MasterText {
    fn default() -> Self {
        MasterText::parse(DEFAULT_MASTER_TEXT).expect("bundled master text is valid")
    }
}

impl FromStr for MasterText {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MasterText::parse(s)
    }
}

pub fn load_master_text(doc: &str) -> Result<MasterText, ReportError> {
    MasterText::parse(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    /// Cardiomegaly, effusion, consolidation sentences in that order.
    pub lines: [String; 3],
    pub result_code: ResultCode,
}

impl Report {
    /// Sentences joined by a single line feed, no trailing newline.
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    /// Report text preceded by a `Result code: NNN` header line.
    pub fn text_with_metadata(&self) -> String {
        format!("Result code: {}\n{}", self.result_code, self.text())
    }

    /// Recovers the code from a [`Report::text_with_metadata`] rendering.
    pub fn parse_code(rendered: &str) -> Option<ResultCode> {
        rendered
            .lines()
            .next()?
            .strip_prefix("Result code: ")?
            .parse()
            .ok()
    }
}

pub fn generate_report(code: ResultCode, master: &MasterText) -> Report {
    Report {
        lines: Abnormality::ALL.map(|abn| master.sentence(abn, code.get(abn)).to_string()),
        result_code: code,
    }
}
