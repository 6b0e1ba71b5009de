use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    format_id, parse_hex_bytes, parse_hex_id, parse_timestamp, CanFrame, CanioError, Collector,
    Label, ParseOptions, ParseOutcome, RowErrorKind, StreamSource,
};

pub const DEFAULT_HEADER: [&str; 5] = ["Timestamp", "CAN ID", "DLC", "Data", "Label"];

/// Locates a column either by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    fn resolve(&self, header: &csv::StringRecord) -> Option<usize> {
        match self {
            ColumnRef::Index(i) => (*i < header.len()).then_some(*i),
            ColumnRef::Name(n) => header.iter().position(|h| h.trim().eq_ignore_ascii_case(n)),
        }
    }

    fn describe(&self) -> String {
        match self {
            ColumnRef::Index(i) => format!("#{i}"),
            ColumnRef::Name(n) => n.clone(),
        }
    }
}

/// Where each field lives in a dataset CSV. The default follows the
/// challenge ordering: timestamp, id, dlc, space-separated payload, label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub timestamp: ColumnRef,
    pub can_id: ColumnRef,
    pub dlc: ColumnRef,
    pub payload: ColumnRef,
    pub label: Option<ColumnRef>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            timestamp: ColumnRef::Index(0),
            can_id: ColumnRef::Index(1),
            dlc: ColumnRef::Index(2),
            payload: ColumnRef::Index(3),
            label: Some(ColumnRef::Index(4)),
        }
    }
}

/// Label spellings, compared case-insensitively after trimming. An empty
/// field means Unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAliases {
    pub normal: Vec<String>,
    pub attack: Vec<String>,
}

impl Default for LabelAliases {
    fn default() -> Self {
        Self {
            normal: vec!["R".into(), "Normal".into(), "0".into()],
            attack: vec!["T".into(), "Attack".into(), "1".into()],
        }
    }
}

impl LabelAliases {
    pub fn resolve(&self, raw: &str) -> Result<Label, RowErrorKind> {
        let v = raw.trim();
        if v.is_empty() {
            return Ok(Label::Unlabeled);
        }
        if self.normal.iter().any(|a| a.eq_ignore_ascii_case(v)) {
            Ok(Label::Normal)
        } else if self.attack.iter().any(|a| a.eq_ignore_ascii_case(v)) {
            Ok(Label::Attack)
        } else {
            Err(RowErrorKind::Label(raw.to_string()))
        }
    }
}

struct Resolved {
    timestamp: usize,
    can_id: usize,
    dlc: usize,
    payload: usize,
    label: Option<usize>,
    width: usize,
}

fn resolve(mapping: &ColumnMapping, header: &csv::StringRecord) -> Result<Resolved, CanioError> {
    let req = |c: &ColumnRef| c.resolve(header).ok_or_else(|| CanioError::MissingColumn(c.describe()));
    Ok(Resolved {
        timestamp: req(&mapping.timestamp)?,
        can_id: req(&mapping.can_id)?,
        dlc: req(&mapping.dlc)?,
        payload: req(&mapping.payload)?,
        // A label column the header does not have means the file is unlabeled.
        label: mapping.label.as_ref().and_then(|c| c.resolve(header)),
        width: header.len(),
    })
}

/// Parses a dataset CSV with a header row into frames.
pub fn parse_dataset_csv<R: Read>(
    input: R,
    mapping: &ColumnMapping,
    options: &ParseOptions,
) -> Result<ParseOutcome, CanioError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.is_empty() {
        // Empty input is an empty stream (what the writer emits for no frames).
        return Ok(Collector::new(options.mode).finish(StreamSource::DatasetCsv, options.address_width));
    }
    let cols = resolve(mapping, &header)?;
    let mut collector = Collector::new(options.mode);
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                collector.push(line, parse_row(&record, &cols, options))?;
            }
            Err(e) => {
                // Invalid UTF-8 and similar record-level faults.
                let line = e.position().map_or(0, |p| p.line());
                if !matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) {
                    return Err(e.into());
                }
                collector.push(line, Err(RowErrorKind::Syntax))?;
            }
        }
    }
    Ok(collector.finish(StreamSource::DatasetCsv, options.address_width))
}

fn parse_row(
    record: &csv::StringRecord,
    cols: &Resolved,
    options: &ParseOptions,
) -> Result<CanFrame, RowErrorKind> {
    if record.len() != cols.width {
        return Err(RowErrorKind::FieldCount {
            expected: cols.width,
            found: record.len(),
        });
    }
    let ts = parse_timestamp(&record[cols.timestamp])?;
    let id = parse_hex_id(&record[cols.can_id], options.address_width)?;
    let dlc_raw = &record[cols.dlc];
    let dlc: usize = dlc_raw
        .trim()
        .parse()
        .ok()
        .filter(|d| *d <= 8)
        .ok_or_else(|| RowErrorKind::Dlc(dlc_raw.to_string()))?;
    let payload = parse_hex_bytes(&record[cols.payload])?;
    if payload.len() != dlc {
        return Err(RowErrorKind::DlcMismatch {
            dlc,
            bytes: payload.len(),
        });
    }
    let label = match cols.label {
        Some(i) => options.labels.resolve(&record[i])?,
        None => Label::Unlabeled,
    };
    Ok(CanFrame::new(ts, id, &payload, label, options.address_width)?)
}

/// Writes frames as dataset CSV: six-decimal timestamps, 4-digit standard or
/// 8-digit extended hex ids, space-separated payload bytes, `R`/`T` labels.
pub fn write_dataset_csv<W: Write>(frames: &[CanFrame], out: W) -> Result<(), CanioError> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    if frames.is_empty() {
        w.flush()?;
        return Ok(());
    }
    w.write_record(DEFAULT_HEADER)?;
    let mut payload = String::with_capacity(24);
    for f in frames {
        payload.clear();
        for (i, b) in f.payload().iter().enumerate() {
            if i > 0 {
                payload.push(' ');
            }
            payload.push_str(&format!("{b:02X}"));
        }
        let label = match f.label {
            Label::Normal => "R",
            Label::Attack => "T",
            Label::Unlabeled => "",
        };
        w.write_record([
            format!("{:.6}", f.timestamp()).as_str(),
            format_id(f.can_id(), 4).as_str(),
            f.dlc().to_string().as_str(),
            payload.as_str(),
            label,
        ])?;
    }
    w.flush()?;
    Ok(())
}
