//! NetFlow v5 binary export format.
//!
//! A stream is a concatenation of packets, each a 24-byte header followed by
//! `count` 48-byte records. All integers are big-endian. Record First/Last
//! timestamps are relative to the exporting device's SysUptime; the header's
//! unix_secs/unix_nsecs anchor them to wall-clock time.

use std::net::Ipv4Addr;

use thiserror::Error;

use super::{FlowKey, RawRecord};

pub const HEADER_LEN: usize = 24;
pub const RECORD_LEN: usize = 48;
/// Classic exporters cap a packet at 30 records; the canonical writer does too.
pub const MAX_RECORDS_PER_PACKET: usize = 30;

#[derive(Debug, Error)]
pub enum V5Error {
    #[error("truncated header at byte offset {offset}: {remaining} bytes left, need {HEADER_LEN}")]
    TruncatedHeader { offset: usize, remaining: usize },
    #[error("bad version {version} at byte offset {offset}: expected 5")]
    BadVersion { offset: usize, version: u16 },
    #[error(
        "truncated packet at byte offset {offset}: header count {count} needs {needed} record bytes, {remaining} left"
    )]
    TruncatedRecords { offset: usize, count: u16, needed: usize, remaining: usize },
    #[error("record at byte offset {offset} has zero packet count")]
    ZeroPackets { offset: usize },
    #[error("record at byte offset {offset} has First {first} ms after Last {last} ms")]
    FirstAfterLast { offset: usize, first: u32, last: u32 },
    #[error("record at byte offset {offset} exceeds v5 field width: {field} = {value}")]
    FieldOverflow { offset: usize, field: &'static str, value: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse a stream of concatenated NetFlow v5 packets into raw records.
///
/// Uptime-relative First/Last fields are converted to absolute epoch
/// milliseconds. Fields the record model does not carry (interfaces, AS
/// numbers, masks, next hop) are discarded.
pub fn parse_netflow_v5(bytes: &[u8]) -> Result<Vec<RawRecord>, V5Error> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let remaining = bytes.len() - offset;
        if remaining < HEADER_LEN {
            return Err(V5Error::TruncatedHeader { offset, remaining });
        }
        let header = &bytes[offset..offset + HEADER_LEN];
        let version = be16(header, 0);
        if version != 5 {
            return Err(V5Error::BadVersion { offset, version });
        }
        let count = be16(header, 2);
        let sys_uptime = be32(header, 4) as i64;
        let unix_secs = be32(header, 8) as i64;
        let unix_nsecs = be32(header, 12) as i64;
        // Epoch time of the device's boot, in milliseconds.
        let boot_ms = unix_secs * 1000 + unix_nsecs / 1_000_000 - sys_uptime;

        let needed = count as usize * RECORD_LEN;
        if remaining - HEADER_LEN < needed {
            return Err(V5Error::TruncatedRecords {
                offset,
                count,
                needed,
                remaining: remaining - HEADER_LEN,
            });
        }

        let mut rec_off = offset + HEADER_LEN;
        for _ in 0..count {
            let r = &bytes[rec_off..rec_off + RECORD_LEN];
            let packets = be32(r, 16) as u64;
            if packets == 0 {
                return Err(V5Error::ZeroPackets { offset: rec_off });
            }
            let first = be32(r, 24);
            let last = be32(r, 28);
            if first > last {
                return Err(V5Error::FirstAfterLast { offset: rec_off, first, last });
            }
            records.push(RawRecord {
                key: FlowKey {
                    ip_src: Ipv4Addr::from(be32(r, 0)),
                    port_src: be16(r, 32),
                    ip_dst: Ipv4Addr::from(be32(r, 4)),
                    port_dst: be16(r, 34),
                    protocol: r[38],
                },
                packets,
                bytes: be32(r, 20) as u64,
                start_ts: boot_ms + first as i64,
                end_ts: boot_ms + last as i64,
                tcp_flags: r[37],
                tos: r[39],
            });
            rec_off += RECORD_LEN;
        }
        offset = rec_off;
    }
    Ok(records)
}

/// Write records as canonical NetFlow v5 packets and return the byte count.
///
/// The writer is deterministic: records are chunked 30 per packet, each
/// packet's boot time is anchored at the chunk's earliest start timestamp,
/// SysUptime is set just past the chunk's latest end, flow_sequence counts
/// previously written records, and all discarded v5 fields are zero. Parsing
/// the output reproduces the input records exactly (timestamps are already
/// millisecond-resolution), and re-serializing parsed canonical bytes is
/// bit-identical.
pub fn write_netflow_v5<W: std::io::Write>(
    records: &[RawRecord],
    sink: &mut W,
) -> Result<u64, V5Error> {
    let mut written = 0u64;
    let mut sequence = 0u32;
    for chunk in records.chunks(MAX_RECORDS_PER_PACKET) {
        let boot_ms = chunk.iter().map(|r| r.start_ts).min().unwrap();
        let max_end = chunk.iter().map(|r| r.end_ts).max().unwrap();
        let sys_uptime = max_end - boot_ms + 1000;
        if sys_uptime > u32::MAX as i64 {
            return Err(V5Error::FieldOverflow {
                offset: 0,
                field: "SysUptime",
                value: sys_uptime as u64,
            });
        }
        let wall_ms = boot_ms + sys_uptime;

        let mut packet = Vec::with_capacity(HEADER_LEN + chunk.len() * RECORD_LEN);
        packet.extend_from_slice(&5u16.to_be_bytes());
        packet.extend_from_slice(&(chunk.len() as u16).to_be_bytes());
        packet.extend_from_slice(&(sys_uptime as u32).to_be_bytes());
        packet.extend_from_slice(&((wall_ms / 1000) as u32).to_be_bytes());
        packet.extend_from_slice(&(((wall_ms % 1000) * 1_000_000) as u32).to_be_bytes());
        packet.extend_from_slice(&sequence.to_be_bytes());
        packet.extend_from_slice(&[0u8; 4]); // engine_type, engine_id, sampling_interval

        for r in chunk {
            let first = r.start_ts - boot_ms;
            let last = r.end_ts - boot_ms;
            for (field, value) in [
                ("dPkts", r.packets),
                ("dOctets", r.bytes),
                ("First", first as u64),
                ("Last", last as u64),
            ] {
                if value > u32::MAX as u64 {
                    return Err(V5Error::FieldOverflow { offset: 0, field, value });
                }
            }
            packet.extend_from_slice(&u32::from(r.key.ip_src).to_be_bytes());
            packet.extend_from_slice(&u32::from(r.key.ip_dst).to_be_bytes());
            packet.extend_from_slice(&[0u8; 8]); // nexthop, input, output
            packet.extend_from_slice(&(r.packets as u32).to_be_bytes());
            packet.extend_from_slice(&(r.bytes as u32).to_be_bytes());
            packet.extend_from_slice(&(first as u32).to_be_bytes());
            packet.extend_from_slice(&(last as u32).to_be_bytes());
            packet.extend_from_slice(&r.key.port_src.to_be_bytes());
            packet.extend_from_slice(&r.key.port_dst.to_be_bytes());
            packet.push(0); // pad1
            packet.push(r.tcp_flags);
            packet.push(r.key.protocol);
            packet.push(r.tos);
            packet.extend_from_slice(&[0u8; 8]); // src_as, dst_as, masks, pad2
        }

        sink.write_all(&packet)?;
        written += packet.len() as u64;
        sequence = sequence.wrapping_add(chunk.len() as u32);
    }
    Ok(written)
}
