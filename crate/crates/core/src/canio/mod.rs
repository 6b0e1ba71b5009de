//! CAN traffic ingestion and emission.
//!
//! Two text formats are supported: the challenge-dataset CSV layout
//! (`timestamp,id,dlc,payload,label`) and the `candump -l` log line
//! `(<ts>) <iface> <ID>#<HEXDATA>`. Both parsers run in strict mode (first bad
//! row aborts) or lenient mode (bad rows are skipped and reported).

mod candump;
mod csv_format;
mod frame;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use candump::{parse_candump, write_candump};
pub use csv_format::{parse_dataset_csv, write_dataset_csv, ColumnMapping, ColumnRef, LabelAliases};
pub use frame::{AddressWidth, CanFrame, FrameError, Label};

/// Serialization formats understood by [`write_frames`] and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    DatasetCsv,
    Candump,
}

impl std::str::FromStr for FrameFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dataset-csv" | "csv" => Ok(Self::DatasetCsv),
            "candump" => Ok(Self::Candump),
            other => Err(format!("unknown frame format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub mode: ParseMode,
    pub address_width: AddressWidth,
    pub labels: LabelAliases,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            mode: ParseMode::Strict,
            address_width: AddressWidth::Standard,
            labels: LabelAliases::default(),
        }
    }
}

impl ParseOptions {
    pub fn lenient() -> Self {
        Self {
            mode: ParseMode::Lenient,
            ..Self::default()
        }
    }
}

/// What went wrong with one input row.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowErrorKind {
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("bad timestamp `{0}`")]
    Timestamp(String),
    #[error("bad CAN id `{0}`")]
    CanId(String),
    #[error("bad DLC `{0}`")]
    Dlc(String),
    #[error("bad payload `{0}`")]
    Payload(String),
    #[error("DLC {dlc} does not match {bytes} payload bytes")]
    DlcMismatch { dlc: usize, bytes: usize },
    #[error("unknown label `{0}`")]
    Label(String),
    #[error("malformed line")]
    Syntax,
    #[error("timestamp {ts} earlier than previous {prev}")]
    OutOfOrder { ts: f64, prev: f64 },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// A row-level failure with its 1-based line number in the input.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct RowError {
    pub line: u64,
    pub kind: RowErrorKind,
}

#[derive(Debug, Error)]
pub enum CanioError {
    #[error(transparent)]
    Row(#[from] RowError),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamSource {
    DatasetCsv,
    Candump,
    Synthetic,
}

/// Summary of a parsed or generated frame stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStreamMeta {
    pub source: StreamSource,
    pub address_width: AddressWidth,
    pub frame_count: usize,
    /// Fraction of frames carrying a Normal or Attack label.
    pub label_coverage: f64,
    pub attack_count: usize,
}

impl FrameStreamMeta {
    pub fn from_frames(source: StreamSource, address_width: AddressWidth, frames: &[CanFrame]) -> Self {
        let labeled = frames.iter().filter(|f| f.label != Label::Unlabeled).count();
        let attack_count = frames.iter().filter(|f| f.label == Label::Attack).count();
        let label_coverage = if frames.is_empty() {
            0.0
        } else {
            labeled as f64 / frames.len() as f64
        };
        Self {
            source,
            address_width,
            frame_count: frames.len(),
            label_coverage,
            attack_count,
        }
    }
}

/// Result of a parse: the accepted frames plus everything lenient mode
/// tolerated.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub frames: Vec<CanFrame>,
    pub errors: Vec<RowError>,
    pub monotonicity_warnings: usize,
    pub meta: FrameStreamMeta,
}

/// Shared row bookkeeping for both parsers.
struct Collector {
    mode: ParseMode,
    frames: Vec<CanFrame>,
    errors: Vec<RowError>,
    monotonicity_warnings: usize,
}

impl Collector {
    fn new(mode: ParseMode) -> Self {
        Self {
            mode,
            frames: Vec::new(),
            errors: Vec::new(),
            monotonicity_warnings: 0,
        }
    }

    fn push(&mut self, line: u64, row: Result<CanFrame, RowErrorKind>) -> Result<(), CanioError> {
        match row {
            Ok(frame) => {
                if let Some(prev) = self.frames.last() {
                    if frame.timestamp() < prev.timestamp() {
                        if self.mode == ParseMode::Strict {
                            return Err(RowError {
                                line,
                                kind: RowErrorKind::OutOfOrder {
                                    ts: frame.timestamp(),
                                    prev: prev.timestamp(),
                                },
                            }
                            .into());
                        }
                        self.monotonicity_warnings += 1;
                    }
                }
                self.frames.push(frame);
                Ok(())
            }
            Err(kind) => {
                let err = RowError { line, kind };
                match self.mode {
                    ParseMode::Strict => Err(err.into()),
                    ParseMode::Lenient => {
                        log::debug!("skipping {err}");
                        self.errors.push(err);
                        Ok(())
                    }
                }
            }
        }
    }

    fn finish(self, source: StreamSource, width: AddressWidth) -> ParseOutcome {
        if self.monotonicity_warnings > 0 {
            log::warn!(
                "{} frames arrived with decreasing timestamps",
                self.monotonicity_warnings
            );
        }
        let meta = FrameStreamMeta::from_frames(source, width, &self.frames);
        ParseOutcome {
            frames: self.frames,
            errors: self.errors,
            monotonicity_warnings: self.monotonicity_warnings,
            meta,
        }
    }
}

/// Writes frames in the requested format.
pub fn write_frames<W: std::io::Write>(
    frames: &[CanFrame],
    format: FrameFormat,
    out: W,
) -> Result<(), CanioError> {
    match format {
        FrameFormat::DatasetCsv => write_dataset_csv(frames, out),
        FrameFormat::Candump => write_candump(frames, "can0", out),
    }
}

/// Parses frames in the requested format with the default column mapping.
pub fn parse_frames<R: std::io::Read>(
    input: R,
    format: FrameFormat,
    options: &ParseOptions,
) -> Result<ParseOutcome, CanioError> {
    match format {
        FrameFormat::DatasetCsv => parse_dataset_csv(input, &ColumnMapping::default(), options),
        FrameFormat::Candump => parse_candump(std::io::BufReader::new(input), options),
    }
}

fn parse_hex_id(s: &str, width: AddressWidth) -> Result<u32, RowErrorKind> {
    let t = s.trim();
    let t = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    if t.is_empty() || t.len() > 8 {
        return Err(RowErrorKind::CanId(s.to_string()));
    }
    let id = u32::from_str_radix(t, 16).map_err(|_| RowErrorKind::CanId(s.to_string()))?;
    if id > width.max_id() {
        return Err(RowErrorKind::Frame(FrameError::IdOutOfRange { id, width }));
    }
    Ok(id)
}

fn parse_timestamp(s: &str) -> Result<f64, RowErrorKind> {
    let ts: f64 = s
        .trim()
        .parse()
        .map_err(|_| RowErrorKind::Timestamp(s.to_string()))?;
    if !ts.is_finite() || ts < 0.0 {
        return Err(RowErrorKind::Timestamp(s.to_string()));
    }
    Ok(ts)
}

/// Accepts `"DE AD BE EF"`, `"DEADBEEF"`, or an empty string.
fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, RowErrorKind> {
    let bad = || RowErrorKind::Payload(s.to_string());
    let mut out = Vec::new();
    for tok in s.split_whitespace() {
        if tok.len() % 2 != 0 || !tok.is_ascii() {
            return Err(bad());
        }
        for i in (0..tok.len()).step_by(2) {
            out.push(u8::from_str_radix(&tok[i..i + 2], 16).map_err(|_| bad())?);
        }
    }
    Ok(out)
}

/// Standard ids use `min_digits` hex digits, extended ids always eight.
fn format_id(id: u32, min_digits: usize) -> String {
    if id <= AddressWidth::Standard.max_id() {
        format!("{id:0min_digits$X}")
    } else {
        format!("{id:08X}")
    }
}
