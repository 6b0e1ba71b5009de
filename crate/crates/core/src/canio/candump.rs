use std::io::{BufRead, Write};

use super::{
    format_id, parse_hex_bytes, parse_hex_id, parse_timestamp, CanFrame, CanioError, Collector,
    Label, ParseOptions, ParseOutcome, RowErrorKind, StreamSource,
};

/// Parses `candump -l` style lines: `(<ts>) <iface> <ID>#<HEXDATA>`.
///
/// Blank lines are ignored. Frames come out Unlabeled.
pub fn parse_candump<R: BufRead>(input: R, options: &ParseOptions) -> Result<ParseOutcome, CanioError> {
    let mut collector = Collector::new(options.mode);
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                collector.push(line_no, Err(RowErrorKind::Syntax))?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if line.trim().is_empty() {
            continue;
        }
        collector.push(line_no, parse_line(&line, options))?;
    }
    Ok(collector.finish(StreamSource::Candump, options.address_width))
}

fn parse_line(line: &str, options: &ParseOptions) -> Result<CanFrame, RowErrorKind> {
    let mut parts = line.split_whitespace();
    let (Some(ts), Some(_iface), Some(body)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(RowErrorKind::Syntax);
    };
    let ts = ts
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or(RowErrorKind::Syntax)?;
    let ts = parse_timestamp(ts)?;
    let (id, data) = body.split_once('#').ok_or(RowErrorKind::Syntax)?;
    if data.starts_with('#') || data.starts_with('R') {
        // CAN FD (`##`) and remote frames are not classic data frames.
        return Err(RowErrorKind::Syntax);
    }
    let id = parse_hex_id(id, options.address_width)?;
    let payload = parse_hex_bytes(data)?;
    if data.contains(char::is_whitespace) || payload.len() > 8 {
        return Err(RowErrorKind::Payload(data.to_string()));
    }
    Ok(CanFrame::new(ts, id, &payload, Label::Unlabeled, options.address_width)?)
}

/// Writes one candump line per frame. Labels are not representable and are
/// dropped.
pub fn write_candump<W: Write>(frames: &[CanFrame], iface: &str, mut out: W) -> Result<(), CanioError> {
    let mut data = String::with_capacity(16);
    for f in frames {
        data.clear();
        for b in f.payload() {
            data.push_str(&format!("{b:02X}"));
        }
        writeln!(
            out,
            "({:.6}) {} {}#{}",
            f.timestamp(),
            iface,
            format_id(f.can_id(), 3),
            data
        )?;
    }
    out.flush()?;
    Ok(())
}
