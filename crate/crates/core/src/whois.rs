//! Netrange resolution: map a remote IP to the smallest address block its
//! service provider controls, via the five regional registries' whois
//! services or a persistent offline cache.
//!
//! The (netrange, remote port) pair is the [`ServiceKey`] that partitions
//! OBFs into per-service training sets, so resolution must be deterministic:
//! the smallest containing range wins, ties broken by lowest first address.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netflow::{LocalNet, OrderedBiFlow};

/// Where a netrange was learned from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RirSource {
    Arin,
    Ripe,
    Apnic,
    Iana,
    Lacnic,
    Reserved,
    Cache,
}

impl RirSource {
    pub const REGISTRIES: [RirSource; 5] =
        [RirSource::Arin, RirSource::Ripe, RirSource::Apnic, RirSource::Iana, RirSource::Lacnic];

    /// Well-known whois server for each registry.
    pub fn server(self) -> Option<&'static str> {
        match self {
            RirSource::Arin => Some("whois.arin.net"),
            RirSource::Ripe => Some("whois.ripe.net"),
            RirSource::Apnic => Some("whois.apnic.net"),
            RirSource::Iana => Some("whois.iana.org"),
            RirSource::Lacnic => Some("whois.lacnic.net"),
            RirSource::Reserved | RirSource::Cache => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RirSource::Arin => "arin",
            RirSource::Ripe => "ripe",
            RirSource::Apnic => "apnic",
            RirSource::Iana => "iana",
            RirSource::Lacnic => "lacnic",
            RirSource::Reserved => "reserved",
            RirSource::Cache => "cache",
        }
    }
}

impl fmt::Display for RirSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RirSource {
    type Err = WhoisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arin" => Ok(RirSource::Arin),
            "ripe" => Ok(RirSource::Ripe),
            "apnic" => Ok(RirSource::Apnic),
            "iana" => Ok(RirSource::Iana),
            "lacnic" => Ok(RirSource::Lacnic),
            "reserved" => Ok(RirSource::Reserved),
            "cache" => Ok(RirSource::Cache),
            _ => Err(WhoisError::BadSource(s.to_string())),
        }
    }
}

/// A contiguous IPv4 address block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetRange {
    pub first: Ipv4Addr,
    pub last: Ipv4Addr,
    pub source: RirSource,
}

impl NetRange {
    pub fn new(first: Ipv4Addr, last: Ipv4Addr, source: RirSource) -> Result<Self, WhoisError> {
        if first > last {
            return Err(WhoisError::InvertedRange { first, last });
        }
        Ok(NetRange { first, last, source })
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.first <= ip && ip <= self.last
    }

    pub fn address_count(&self) -> u64 {
        u32::from(self.last) as u64 - u32::from(self.first) as u64 + 1
    }
}

impl fmt::Display for NetRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

/// The (netrange, contacted port) pair identifying one network service.
///
/// Equality, ordering, and hashing use only (first, last, port); the source
/// registry is informational.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ServiceKey {
    pub netrange: NetRange,
    pub port: u16,
}

impl ServiceKey {
    fn discriminant(&self) -> (Ipv4Addr, Ipv4Addr, u16) {
        (self.netrange.first, self.netrange.last, self.port)
    }
}

impl PartialEq for ServiceKey {
    fn eq(&self, other: &Self) -> bool {
        self.discriminant() == other.discriminant()
    }
}

impl Eq for ServiceKey {}

impl Hash for ServiceKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.discriminant().hash(state);
    }
}

impl PartialOrd for ServiceKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ServiceKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.discriminant().cmp(&other.discriminant())
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.netrange, self.port)
    }
}

#[derive(Debug, Error)]
pub enum WhoisError {
    #[error("range first address {first} is above last address {last}")]
    InvertedRange { first: Ipv4Addr, last: Ipv4Addr },
    #[error("unknown netrange source `{0}`")]
    BadSource(String),
    #[error("offline cache has no netrange containing {0}")]
    CacheMiss(Ipv4Addr),
    #[error("all five registry queries failed for {ip}: {detail}")]
    ResolutionFailed { ip: Ipv4Addr, detail: String },
    #[error("no registry returned a range containing {0}")]
    NoRangeReturned(Ipv4Addr),
    #[error("cache file {path} line {line}: {reason}")]
    BadCacheLine { path: String, line: usize, reason: String },
    #[error("OBF {a} <-> {b} has {n_local} local endpoints, expected exactly 1")]
    AmbiguousLocality { a: String, b: String, n_local: usize },
    #[error("whois query to {server} failed: {reason}")]
    QueryFailed { server: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Blocks no registry owns; resolved without queries.
const RESERVED_BLOCKS: [(Ipv4Addr, Ipv4Addr); 5] = [
    (Ipv4Addr::new(10, 0, 0, 0), Ipv4Addr::new(10, 255, 255, 255)),
    (Ipv4Addr::new(127, 0, 0, 0), Ipv4Addr::new(127, 255, 255, 255)),
    (Ipv4Addr::new(169, 254, 0, 0), Ipv4Addr::new(169, 254, 255, 255)),
    (Ipv4Addr::new(172, 16, 0, 0), Ipv4Addr::new(172, 31, 255, 255)),
    (Ipv4Addr::new(192, 168, 0, 0), Ipv4Addr::new(192, 168, 255, 255)),
];

/// The built-in reserved range containing `ip`, if any.
pub fn reserved_range(ip: Ipv4Addr) -> Option<NetRange> {
    RESERVED_BLOCKS
        .iter()
        .find(|(first, last)| *first <= ip && ip <= *last)
        .map(|&(first, last)| NetRange { first, last, source: RirSource::Reserved })
}

/// One cached netrange with its retrieval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheEntry {
    pub range: NetRange,
    pub retrieved_at_ms: i64,
}

/// Persistent netrange store. Entries are kept sorted by (first, last) so
/// saved files and lookups are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WhoisCache {
    entries: Vec<CacheEntry>,
}

impl WhoisCache {
    pub fn new() -> Self {
        WhoisCache::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Insert or refresh a range. Entries are keyed by (first, last).
    pub fn insert(&mut self, range: NetRange, retrieved_at_ms: i64) {
        match self
            .entries
            .binary_search_by_key(&(range.first, range.last), |e| (e.range.first, e.range.last))
        {
            Ok(i) => self.entries[i] = CacheEntry { range, retrieved_at_ms },
            Err(i) => self.entries.insert(i, CacheEntry { range, retrieved_at_ms }),
        }
    }

    /// Smallest stored range containing `ip`: fewest addresses, ties by
    /// lowest first address.
    pub fn smallest_containing(&self, ip: Ipv4Addr) -> Option<&CacheEntry> {
        self.smallest_containing_fresh(ip, i64::MAX, None)
    }

    /// Like [`smallest_containing`](Self::smallest_containing) but ignoring
    /// entries older than `max_age_ms` relative to `now_ms`.
    pub fn smallest_containing_fresh(
        &self,
        ip: Ipv4Addr,
        now_ms: i64,
        max_age_ms: Option<i64>,
    ) -> Option<&CacheEntry> {
        self.entries
            .iter()
            .filter(|e| e.range.contains(ip))
            .filter(|e| match max_age_ms {
                Some(age) => now_ms.saturating_sub(e.retrieved_at_ms) <= age,
                None => true,
            })
            .min_by_key(|e| (e.range.address_count(), e.range.first))
    }

    /// Load a line-delimited `first,last,source,retrieved_at_ms` cache file.
    /// Blank lines and `#` comments are allowed.
    pub fn load(path: &Path) -> Result<Self, WhoisError> {
        let text = fs::read_to_string(path)?;
        let mut cache = WhoisCache::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| WhoisError::BadCacheLine {
                path: path.display().to_string(),
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let first: Ipv4Addr =
                fields[0].parse().map_err(|_| bad(format!("bad first ip `{}`", fields[0])))?;
            let last: Ipv4Addr =
                fields[1].parse().map_err(|_| bad(format!("bad last ip `{}`", fields[1])))?;
            let source: RirSource =
                fields[2].parse().map_err(|_| bad(format!("bad source `{}`", fields[2])))?;
            let retrieved_at_ms: i64 =
                fields[3].parse().map_err(|_| bad(format!("bad timestamp `{}`", fields[3])))?;
            let range = NetRange::new(first, last, source).map_err(|e| bad(e.to_string()))?;
            cache.insert(range, retrieved_at_ms);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), WhoisError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.range.first, e.range.last, e.range.source, e.retrieved_at_ms
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Offline resolution: smallest cached range containing `ip`, falling back
/// to the built-in reserved blocks.
pub fn resolve_offline(ip: Ipv4Addr, cache: &WhoisCache) -> Result<NetRange, WhoisError> {
    if let Some(entry) = cache.smallest_containing(ip) {
        return Ok(entry.range);
    }
    reserved_range(ip).ok_or(WhoisError::CacheMiss(ip))
}

/// Transport for registry queries, so the online resolver can be replayed
/// from recorded transcripts in tests and offline environments.
pub trait RirClient {
    fn query(&mut self, rir: RirSource, ip: Ipv4Addr) -> Result<String, WhoisError>;

    /// Number of wire queries issued so far.
    fn query_count(&self) -> u64;
}

/// Live whois client: opens TCP to `<server>:43`, sends `<ip>\r\n`, reads
/// until the server closes the connection.
pub struct TcpRirClient {
    timeout: Duration,
    queries: u64,
}

impl TcpRirClient {
    pub fn new(timeout: Duration) -> Self {
        TcpRirClient { timeout, queries: 0 }
    }
}

impl RirClient for TcpRirClient {
    fn query(&mut self, rir: RirSource, ip: Ipv4Addr) -> Result<String, WhoisError> {
        let server = rir.server().expect("query is only issued to registries");
        self.queries += 1;
        let fail = |reason: String| WhoisError::QueryFailed { server: server.to_string(), reason };
        let addr = format!("{server}:43");
        let mut addrs =
            std::net::ToSocketAddrs::to_socket_addrs(&addr).map_err(|e| fail(e.to_string()))?;
        let sock = addrs.next().ok_or_else(|| fail("no address resolved".to_string()))?;
        let mut stream = std::net::TcpStream::connect_timeout(&sock, self.timeout)
            .map_err(|e| fail(e.to_string()))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(|e| fail(e.to_string()))?;
        stream.set_write_timeout(Some(self.timeout)).map_err(|e| fail(e.to_string()))?;
        stream.write_all(format!("{ip}\r\n").as_bytes()).map_err(|e| fail(e.to_string()))?;
        let mut response = String::new();
        stream.read_to_string(&mut response).map_err(|e| fail(e.to_string()))?;
        Ok(response)
    }

    fn query_count(&self) -> u64 {
        self.queries
    }
}

/// Replays recorded transcripts from a directory of `<rir>_<ip>.txt` files.
pub struct ReplayRirClient {
    dir: PathBuf,
    queries: u64,
}

impl ReplayRirClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayRirClient { dir: dir.into(), queries: 0 }
    }
}

impl RirClient for ReplayRirClient {
    fn query(&mut self, rir: RirSource, ip: Ipv4Addr) -> Result<String, WhoisError> {
        self.queries += 1;
        let path = self.dir.join(format!("{}_{}.txt", rir.name(), ip));
        fs::read_to_string(&path).map_err(|e| WhoisError::QueryFailed {
            server: rir.name().to_string(),
            reason: format!("{}: {e}", path.display()),
        })
    }

    fn query_count(&self) -> u64 {
        self.queries
    }
}

/// Extract candidate ranges from one registry response.
///
/// Recognizes `NetRange:`/`inetnum:` lines holding `A - B` spans and
/// `CIDR:`/`inetnum:`/`route:` lines holding one or more `A/n` prefixes.
/// Anything unrecognized is ignored; an empty result means the response was
/// unparseable.
pub fn parse_rir_response(text: &str, source: RirSource) -> Vec<NetRange> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with('%') || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else { continue };
        let key = key.trim().to_ascii_lowercase();
        if key != "netrange" && key != "inetnum" && key != "cidr" && key != "route" {
            continue;
        }
        let value = value.trim();
        if let Some((a, b)) = value.split_once('-') {
            if let (Ok(first), Ok(last)) = (a.trim().parse(), b.trim().parse()) {
                if let Ok(range) = NetRange::new(first, last, source) {
                    out.push(range);
                }
            }
            continue;
        }
        for part in value.split(',') {
            if let Ok(cidr) = part.trim().parse::<crate::netflow::Cidr>() {
                let base = u32::from(cidr.network);
                let mask =
                    if cidr.prefix_len == 0 { 0u32 } else { u32::MAX << (32 - cidr.prefix_len) };
                let first = Ipv4Addr::from(base & mask);
                let last = Ipv4Addr::from((base & mask) | !mask);
                out.push(NetRange { first, last, source });
            }
        }
    }
    out
}

/// Online resolution: reserved blocks and fresh cache entries short-circuit;
/// otherwise all five registries are queried, and the smallest returned
/// range containing `ip` is cached and returned. Registries that fail or
/// return nothing parseable are skipped; if every query fails the resolution
/// fails.
pub fn resolve_online(
    ip: Ipv4Addr,
    cache: &mut WhoisCache,
    client: &mut dyn RirClient,
    now_ms: i64,
    max_age_ms: Option<i64>,
) -> Result<NetRange, WhoisError> {
    if let Some(range) = reserved_range(ip) {
        return Ok(range);
    }
    if let Some(entry) = cache.smallest_containing_fresh(ip, now_ms, max_age_ms) {
        return Ok(entry.range);
    }

    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for rir in RirSource::REGISTRIES {
        match client.query(rir, ip) {
            Ok(text) => candidates
                .extend(parse_rir_response(&text, rir).into_iter().filter(|r| r.contains(ip))),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if failures.len() == RirSource::REGISTRIES.len() {
        return Err(WhoisError::ResolutionFailed { ip, detail: failures.join("; ") });
    }
    let best = candidates
        .into_iter()
        .min_by_key(|r| (r.address_count(), r.first))
        .ok_or(WhoisError::NoRangeReturned(ip))?;
    cache.insert(best, now_ms);
    Ok(best)
}

/// The service an OBF talks to: the remote endpoint's netrange plus its
/// port. Exactly one endpoint must be inside the monitored network.
pub fn service_key_of(
    obf: &OrderedBiFlow,
    local: &LocalNet,
    cache: &WhoisCache,
) -> Result<ServiceKey, WhoisError> {
    let a_local = local.contains(obf.endpoint_a.ip);
    let b_local = local.contains(obf.endpoint_b.ip);
    let remote = match (a_local, b_local) {
        (true, false) => obf.endpoint_b,
        (false, true) => obf.endpoint_a,
        _ => {
            return Err(WhoisError::AmbiguousLocality {
                a: obf.endpoint_a.to_string(),
                b: obf.endpoint_b.to_string(),
                n_local: usize::from(a_local) + usize::from(b_local),
            })
        }
    };
    let netrange = resolve_offline(remote.ip, cache)?;
    Ok(ServiceKey { netrange, port: remote.port })
}
