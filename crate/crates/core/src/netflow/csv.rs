//! CSV form of raw records.
//!
//! Schema (header required, in this canonical column order):
//! `ip_src,port_src,ip_dst,port_dst,protocol,packets,bytes,start_ts,end_ts,tcp_flags,tos`
//! with timestamps in epoch milliseconds. Columns are matched by name, so a
//! permuted header is accepted. `tcp_flags` and `tos` may be decimal or
//! `0x`-prefixed hex.

use std::io::{BufRead, Write};
use std::net::Ipv4Addr;

use thiserror::Error;

use super::{FlowKey, RawRecord};

pub const CSV_HEADER: &str =
    "ip_src,port_src,ip_dst,port_dst,protocol,packets,bytes,start_ts,end_ts,tcp_flags,tos";

const COLUMNS: [&str; 11] = [
    "ip_src", "port_src", "ip_dst", "port_dst", "protocol", "packets", "bytes", "start_ts",
    "end_ts", "tcp_flags", "tos",
];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("missing header line")]
    MissingHeader,
    #[error("header is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: bad {column} value `{value}`")]
    BadField { line: usize, column: &'static str, value: String },
    #[error("line {line}: start_ts {start} after end_ts {end}")]
    StartAfterEnd { line: usize, start: i64, end: i64 },
    #[error("line {line}: packets must be >= 1")]
    ZeroPackets { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_u8_field(s: &str, line: usize, column: &'static str) -> Result<u8, CsvError> {
    let res = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u8::from_str_radix(hex, 16),
        None => s.parse(),
    };
    res.map_err(|_| CsvError::BadField { line, column, value: s.to_string() })
}

fn parse_field<T: std::str::FromStr>(
    s: &str,
    line: usize,
    column: &'static str,
) -> Result<T, CsvError> {
    s.parse().map_err(|_| CsvError::BadField { line, column, value: s.to_string() })
}

/// Parse CSV records in file order. Line numbers in errors are 1-based and
/// count the header.
pub fn parse_csv<R: BufRead>(reader: R) -> Result<Vec<RawRecord>, CsvError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(CsvError::MissingHeader),
    };
    let names: Vec<&str> = header.trim_end().split(',').map(str::trim).collect();
    let mut index = [0usize; 11];
    for (i, col) in COLUMNS.iter().enumerate() {
        index[i] = names
            .iter()
            .position(|n| n == col)
            .ok_or(CsvError::MissingColumn(COLUMNS[i]))?;
    }

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(CsvError::FieldCount {
                line: lineno,
                expected: names.len(),
                found: fields.len(),
            });
        }
        let get = |i: usize| fields[index[i]];
        let ip_src: Ipv4Addr = parse_field(get(0), lineno, "ip_src")?;
        let port_src: u16 = parse_field(get(1), lineno, "port_src")?;
        let ip_dst: Ipv4Addr = parse_field(get(2), lineno, "ip_dst")?;
        let port_dst: u16 = parse_field(get(3), lineno, "port_dst")?;
        let protocol: u8 = parse_field(get(4), lineno, "protocol")?;
        let packets: u64 = parse_field(get(5), lineno, "packets")?;
        let bytes: u64 = parse_field(get(6), lineno, "bytes")?;
        let start_ts: i64 = parse_field(get(7), lineno, "start_ts")?;
        let end_ts: i64 = parse_field(get(8), lineno, "end_ts")?;
        let tcp_flags = parse_u8_field(get(9), lineno, "tcp_flags")?;
        let tos = parse_u8_field(get(10), lineno, "tos")?;
        if start_ts > end_ts {
            return Err(CsvError::StartAfterEnd { line: lineno, start: start_ts, end: end_ts });
        }
        if packets == 0 {
            return Err(CsvError::ZeroPackets { line: lineno });
        }
        records.push(RawRecord {
            key: FlowKey { ip_src, port_src, ip_dst, port_dst, protocol },
            packets,
            bytes,
            start_ts,
            end_ts,
            tcp_flags,
            tos,
        });
    }
    Ok(records)
}

/// Write records in the canonical column order. Returns bytes written.
pub fn write_csv<W: Write>(records: &[RawRecord], sink: &mut W) -> Result<u64, CsvError> {
    let mut written = 0u64;
    let mut emit = |s: String| -> Result<u64, CsvError> {
        sink.write_all(s.as_bytes())?;
        Ok(s.len() as u64)
    };
    written += emit(format!("{CSV_HEADER}\n"))?;
    for r in records {
        written += emit(format!(
            "{},{},{},{},{},{},{},{},{},0x{:02x},{}\n",
            r.key.ip_src,
            r.key.port_src,
            r.key.ip_dst,
            r.key.port_dst,
            r.key.protocol,
            r.packets,
            r.bytes,
            r.start_ts,
            r.end_ts,
            r.tcp_flags,
            r.tos
        ))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netflow::toy;

    #[test]
    fn parses_worked_example_row() {
        let text = format!(
            "{CSV_HEADER}\n192.168.1.10,5430,173.124.18.52,80,6,145,1815,1375690161000,1375699541000,0x16,0\n"
        );
        let records = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(records, vec![toy::records()[0].clone()]);
    }

    #[test]
    fn header_only_file_is_empty() {
        let records = parse_csv(format!("{CSV_HEADER}\n").as_bytes()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn start_after_end_names_the_row() {
        let text = format!(
            "{CSV_HEADER}\n10.0.0.1,1,10.0.0.2,2,6,1,1,100,200,0,0\n10.0.0.1,1,10.0.0.2,2,6,1,1,500,200,0,0\n"
        );
        match parse_csv(text.as_bytes()) {
            Err(CsvError::StartAfterEnd { line: 3, start: 500, end: 200 }) => {}
            other => panic!("expected StartAfterEnd on line 3, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_rejected() {
        let text = "ip_src,port_src,ip_dst,port_dst,protocol,packets,bytes,start_ts,end_ts,tcp_flags\n";
        assert!(matches!(parse_csv(text.as_bytes()), Err(CsvError::MissingColumn("tos"))));
    }

    #[test]
    fn non_numeric_field_names_line_and_column() {
        let text = format!("{CSV_HEADER}\n10.0.0.1,1,10.0.0.2,2,6,zap,1,100,200,0,0\n");
        match parse_csv(text.as_bytes()) {
            Err(CsvError::BadField { line: 2, column: "packets", .. }) => {}
            other => panic!("expected BadField, got {other:?}"),
        }
    }

    #[test]
    fn permuted_header_is_accepted() {
        let text = "tos,tcp_flags,end_ts,start_ts,bytes,packets,protocol,port_dst,ip_dst,port_src,ip_src\n\
                    0,0x16,1375699541000,1375690161000,1815,145,6,80,173.124.18.52,5430,192.168.1.10\n";
        let records = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(records, vec![toy::records()[0].clone()]);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let records = toy::records();
        let mut out = Vec::new();
        let n = write_csv(&records, &mut out).unwrap();
        assert_eq!(n, out.len() as u64);
        assert_eq!(parse_csv(out.as_slice()).unwrap(), records);
    }

    #[test]
    fn decimal_flags_are_accepted() {
        let text = format!("{CSV_HEADER}\n10.0.0.1,1,10.0.0.2,2,6,1,1,100,200,22,0\n");
        assert_eq!(parse_csv(text.as_bytes()).unwrap()[0].tcp_flags, 0x16);
    }
}
