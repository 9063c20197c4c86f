//! NetFlow record model: raw records, flows, and ordered bi-directional flows.
//!
//! Raw records arrive from the v5 binary format or from CSV exports. They are
//! grouped into [`Flow`]s (exact 5-tuple key equality) and [`OrderedBiFlow`]s
//! (unordered endpoint pair plus protocol, records sorted by start timestamp).

mod csv;
mod v5;

pub use csv::{parse_csv, write_csv, CsvError};
pub use v5::{parse_netflow_v5, write_netflow_v5, V5Error};

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid CIDR `{0}`")]
pub struct CidrParseError(String);

/// The 5-tuple identifying one unidirectional packet stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub ip_src: Ipv4Addr,
    pub port_src: u16,
    pub ip_dst: Ipv4Addr,
    pub port_dst: u16,
    pub protocol: u8,
}

impl FlowKey {
    /// Same key with source and destination endpoints swapped.
    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            ip_src: self.ip_dst,
            port_src: self.port_dst,
            ip_dst: self.ip_src,
            port_dst: self.port_src,
            protocol: self.protocol,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.ip_src, self.port_src, self.ip_dst, self.port_dst, self.protocol
        )
    }
}

/// One NetFlow raw record: a key plus the exported data tuple.
///
/// Timestamps are milliseconds since the Unix epoch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawRecord {
    pub key: FlowKey,
    pub packets: u64,
    pub bytes: u64,
    pub start_ts: i64,
    pub end_ts: i64,
    pub tcp_flags: u8,
    pub tos: u8,
}

/// All raw records sharing one exact key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    pub records: Vec<RawRecord>,
}

/// One endpoint of a bi-directional conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Records exchanged between two endpoints in either direction, sorted by
/// start timestamp (ties by end timestamp, then direction a->b before b->a,
/// then the remaining record fields so the order is total).
///
/// `endpoint_a` is always the numerically smaller (ip, port) pair, which makes
/// the representation canonical regardless of input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedBiFlow {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub protocol: u8,
    pub records: Vec<RawRecord>,
}

impl OrderedBiFlow {
    /// Start timestamp of the first (earliest) record.
    pub fn first_start_ts(&self) -> i64 {
        self.records[0].start_ts
    }

    /// True if `record` flows from `endpoint_a` to `endpoint_b`.
    pub fn is_a_to_b(&self, record: &RawRecord) -> bool {
        record.key.ip_src == self.endpoint_a.ip && record.key.port_src == self.endpoint_a.port
    }
}

/// Group records by exact key equality. Output is sorted by key so repeated
/// runs over permuted input produce identical results.
pub fn assemble_flows(records: &[RawRecord]) -> Vec<Flow> {
    let mut by_key: HashMap<FlowKey, Vec<RawRecord>> = HashMap::new();
    for r in records {
        by_key.entry(r.key).or_default().push(r.clone());
    }
    let mut flows: Vec<Flow> = by_key
        .into_iter()
        .map(|(key, mut records)| {
            records.sort_by(record_order);
            Flow { key, records }
        })
        .collect();
    flows.sort_by_key(|f| f.key);
    flows
}

/// Group records by unordered endpoint pair and protocol, then sort each
/// group into an [`OrderedBiFlow`]. Output is independent of input order.
pub fn build_obfs(records: &[RawRecord]) -> Vec<OrderedBiFlow> {
    let mut by_pair: HashMap<(Endpoint, Endpoint, u8), Vec<RawRecord>> = HashMap::new();
    for r in records {
        let src = Endpoint { ip: r.key.ip_src, port: r.key.port_src };
        let dst = Endpoint { ip: r.key.ip_dst, port: r.key.port_dst };
        let (a, b) = if src <= dst { (src, dst) } else { (dst, src) };
        by_pair.entry((a, b, r.key.protocol)).or_default().push(r.clone());
    }
    let mut obfs: Vec<OrderedBiFlow> = by_pair
        .into_iter()
        .map(|((a, b, protocol), mut records)| {
            records.sort_by(|x, y| obf_record_order(a, x, y));
            OrderedBiFlow { endpoint_a: a, endpoint_b: b, protocol, records }
        })
        .collect();
    obfs.sort_by_key(|o| (o.endpoint_a, o.endpoint_b, o.protocol));
    obfs
}

/// Total order used inside OBFs: start, end, direction (a->b first), then the
/// remaining fields to break ties between otherwise-identical records.
fn obf_record_order(a: Endpoint, x: &RawRecord, y: &RawRecord) -> std::cmp::Ordering {
    let dir = |r: &RawRecord| (r.key.ip_src, r.key.port_src) != (a.ip, a.port);
    (x.start_ts, x.end_ts, dir(x), x.key, x.packets, x.bytes, x.tcp_flags, x.tos).cmp(&(
        y.start_ts,
        y.end_ts,
        dir(y),
        y.key,
        y.packets,
        y.bytes,
        y.tcp_flags,
        y.tos,
    ))
}

fn record_order(x: &RawRecord, y: &RawRecord) -> std::cmp::Ordering {
    (x.start_ts, x.end_ts, x.packets, x.bytes, x.tcp_flags, x.tos).cmp(&(
        y.start_ts,
        y.end_ts,
        y.packets,
        y.bytes,
        y.tcp_flags,
        y.tos,
    ))
}

/// An IPv4 prefix in `a.b.c.d/len` notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    pub network: Ipv4Addr,
    pub prefix_len: u8,
}

impl Cidr {
    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        if self.prefix_len == 0 {
            return true;
        }
        let mask = u32::MAX << (32 - self.prefix_len as u32);
        (u32::from(ip) & mask) == (u32::from(self.network) & mask)
    }
}

impl FromStr for Cidr {
    type Err = CidrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (net, len) = s.split_once('/').ok_or_else(|| CidrParseError(s.to_string()))?;
        let network: Ipv4Addr = net.parse().map_err(|_| CidrParseError(s.to_string()))?;
        let prefix_len: u8 = len.parse().map_err(|_| CidrParseError(s.to_string()))?;
        if prefix_len > 32 {
            return Err(CidrParseError(s.to_string()));
        }
        Ok(Cidr { network, prefix_len })
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix_len)
    }
}

/// The monitored side of the tap: a list of CIDR prefixes. An IP is "local"
/// if any prefix contains it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalNet {
    prefixes: Vec<Cidr>,
}

impl LocalNet {
    pub fn new(prefixes: Vec<Cidr>) -> Self {
        LocalNet { prefixes }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.prefixes.iter().any(|p| p.contains(ip))
    }

    pub fn prefixes(&self) -> &[Cidr] {
        &self.prefixes
    }
}

impl Serialize for Cidr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for LocalNet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.prefixes.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LocalNet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(LocalNet { prefixes: Vec::<Cidr>::deserialize(deserializer)? })
    }
}


#[cfg(test)]
mod tests {
    use super::toy;
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;

    #[test]
    fn flow_key_reverse_is_involutive() {
        let k = toy::records()[0].key;
        assert_ne!(k.reversed(), k);
        assert_eq!(k.reversed().reversed(), k);
        assert_eq!(k.reversed().protocol, k.protocol);
    }

    #[test]
    fn toy_records_assemble_into_four_flows() {
        let recs = toy::records();
        let flows = assemble_flows(&recs);
        assert_eq!(flows.len(), 4);
        let find = |key: FlowKey| flows.iter().find(|f| f.key == key).unwrap();

        let f1 = find(recs[0].key);
        assert_eq!(f1.records, vec![recs[0].clone(), recs[2].clone()]);
        assert_eq!(find(recs[1].key).records, vec![recs[1].clone()]);
        assert_eq!(find(recs[3].key).records, vec![recs[3].clone()]);
        assert_eq!(find(recs[4].key).records, vec![recs[4].clone()]);
    }

    #[test]
    fn assemble_flows_single_and_empty() {
        let recs = toy::records();
        let one = assemble_flows(&recs[..1]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].records.len(), 1);
        assert!(assemble_flows(&[]).is_empty());
    }

    #[test]
    fn toy_records_build_two_obfs() {
        let recs = toy::records();
        let obfs = build_obfs(&recs);
        assert_eq!(obfs.len(), 2);

        // TCP conversation: nfr1, nfr2, nfr3 by start timestamp.
        let tcp = obfs.iter().find(|o| o.protocol == 6).unwrap();
        assert_eq!(tcp.records, vec![recs[0].clone(), recs[1].clone(), recs[2].clone()]);

        // UDP conversation: nfr5 first, its start timestamp is prior to nfr4's.
        let udp = obfs.iter().find(|o| o.protocol == 17).unwrap();
        assert_eq!(udp.records, vec![recs[4].clone(), recs[3].clone()]);
    }

    #[test]
    fn build_obfs_is_input_order_independent() {
        let mut recs = toy::records();
        let forward = build_obfs(&recs);
        recs.reverse();
        assert_eq!(build_obfs(&recs), forward);
    }

    /// Brute-force grouping: compare every record pair for endpoint-set
    /// equality, then insertion-sort each group by the OBF ordering rule.
    fn obf_oracle(records: &[RawRecord]) -> Vec<OrderedBiFlow> {
        let endpoints = |r: &RawRecord| {
            let s = Endpoint { ip: r.key.ip_src, port: r.key.port_src };
            let d = Endpoint { ip: r.key.ip_dst, port: r.key.port_dst };
            if s <= d {
                (s, d)
            } else {
                (d, s)
            }
        };
        let mut groups: Vec<Vec<RawRecord>> = Vec::new();
        for r in records {
            let mut placed = false;
            for g in groups.iter_mut() {
                if endpoints(&g[0]) == endpoints(r) && g[0].key.protocol == r.key.protocol {
                    g.push(r.clone());
                    placed = true;
                    break;
                }
            }
            if !placed {
                groups.push(vec![r.clone()]);
            }
        }
        let mut obfs: Vec<OrderedBiFlow> = groups
            .into_iter()
            .map(|mut g| {
                let (a, b) = endpoints(&g[0]);
                let rank = |r: &RawRecord| {
                    let outgoing_from_a =
                        r.key.ip_src == a.ip && r.key.port_src == a.port;
                    (
                        r.start_ts,
                        r.end_ts,
                        !outgoing_from_a,
                        r.key,
                        r.packets,
                        r.bytes,
                        r.tcp_flags,
                        r.tos,
                    )
                };
                g.sort_by(|x, y| rank(x).cmp(&rank(y)));
                OrderedBiFlow { endpoint_a: a, endpoint_b: b, protocol: g[0].key.protocol, records: g }
            })
            .collect();
        obfs.sort_by_key(|o| (o.endpoint_a, o.endpoint_b, o.protocol));
        obfs
    }

    fn random_records(n: usize, seed: u64) -> Vec<RawRecord> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let start = rng.random_range(0..100_000i64);
                // Small pools force plenty of key and endpoint-pair collisions.
                RawRecord {
                    key: FlowKey {
                        ip_src: Ipv4Addr::new(10, 0, 0, rng.random_range(1..6)),
                        port_src: rng.random_range(1000..1006),
                        ip_dst: Ipv4Addr::new(10, 0, 0, rng.random_range(1..6)),
                        port_dst: rng.random_range(1000..1006),
                        protocol: *[6u8, 17].choose(&mut rng).unwrap(),
                    },
                    packets: rng.random_range(1..100),
                    bytes: rng.random_range(1..10_000),
                    start_ts: start,
                    end_ts: start + rng.random_range(0..50_000),
                    tcp_flags: rng.random(),
                    tos: 0,
                }
            })
            .collect()
    }

    #[test]
    fn build_obfs_matches_brute_force_oracle() {
        let recs = random_records(1000, 07_2013);
        assert_eq!(build_obfs(&recs), obf_oracle(&recs));
    }

    #[test]
    fn record_count_is_conserved_across_partitions() {
        let recs = random_records(500, 42);
        let flow_total: usize = assemble_flows(&recs).iter().map(|f| f.records.len()).sum();
        let obf_total: usize = build_obfs(&recs).iter().map(|o| o.records.len()).sum();
        assert_eq!(flow_total, recs.len());
        assert_eq!(obf_total, recs.len());
    }

    #[test]
    fn cidr_parse_and_contains() {
        let c: Cidr = "192.168.0.0/16".parse().unwrap();
        assert!(c.contains("192.168.1.10".parse().unwrap()));
        assert!(!c.contains("192.169.0.1".parse().unwrap()));
        assert_eq!(c.to_string(), "192.168.0.0/16");
        assert!("300.0.0.0/8".parse::<Cidr>().is_err());
        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
        assert!("10.0.0.0".parse::<Cidr>().is_err());

        let all: Cidr = "0.0.0.0/0".parse().unwrap();
        assert!(all.contains("8.8.8.8".parse().unwrap()));
    }

    proptest! {
        #[test]
        fn obfs_invariant_under_permutation(seed in 0u64..500, n in 1usize..60) {
            let recs = random_records(n, seed);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD));
            prop_assert_eq!(build_obfs(&recs), build_obfs(&shuffled));
        }

        #[test]
        fn obf_records_sorted_by_start(seed in 0u64..500, n in 1usize..60) {
            let recs = random_records(n, seed);
            for obf in build_obfs(&recs) {
                for pair in obf.records.windows(2) {
                    prop_assert!(pair[0].start_ts <= pair[1].start_ts);
                }
            }
        }
    }
}
