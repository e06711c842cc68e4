//! Address-indexed microarchitecture state: branch predictor, TLB, cache
//! metadata and load/store queue, plus the latency model and the observation
//! function seen by the adversary.
//!
//! Every set-associative structure keeps a usage stack per set with index 0
//! as most recently used.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{PAGE_SHIFT, PAGE_SIZE};
use crate::layout::Perms;
use crate::memtable::INST_BYTES;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UarchError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid latency table: {0}")]
    Latency(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyTable {
    pub tlb_hit: u64,
    pub ptw_level: u64,
    pub l1_hit: u64,
    pub l2_hit: u64,
    pub dram: u64,
    /// Extra cycles when a branch resolves against its prediction.
    pub mispredict: u64,
    pub fault: u64,
    pub store_forward: u64,
}

impl Default for LatencyTable {
    fn default() -> Self {
        Self { tlb_hit: 1, ptw_level: 20, l1_hit: 4, l2_hit: 14, dram: 120, mispredict: 12, fault: 300, store_forward: 2 }
    }
}

impl LatencyTable {
    pub fn validate(&self) -> Result<(), UarchError> {
        let all = [
            self.tlb_hit,
            self.ptw_level,
            self.l1_hit,
            self.l2_hit,
            self.dram,
            self.mispredict,
            self.fault,
            self.store_forward,
        ];
        if all.contains(&0) {
            return Err(UarchError::Latency("all latencies must be positive".into()));
        }
        if !(self.l1_hit < self.l2_hit && self.l2_hit < self.dram) {
            return Err(UarchError::Latency("expected l1 < l2 < dram".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub entries: u64,
    pub ways: u64,
}

impl Geometry {
    pub fn sets(&self) -> u64 {
        self.entries / self.ways
    }

    fn validate(&self, what: &str) -> Result<(), UarchError> {
        if self.ways == 0 || !self.entries.is_multiple_of(self.ways) || !self.sets().is_power_of_two() {
            return Err(UarchError::Geometry(format!("{what}: {} entries, {} ways", self.entries, self.ways)));
        }
        Ok(())
    }
}

/// Set-associative tag store with true LRU.
#[derive(Clone, Debug, PartialEq, Eq)]
struct SetAssoc<T> {
    geom: Geometry,
    sets: BTreeMap<u64, Vec<T>>,
}

impl<T: Clone> SetAssoc<T> {
    fn new(geom: Geometry) -> Self {
        Self { geom, sets: BTreeMap::new() }
    }

    fn set_of(&self, tag: u64) -> u64 {
        tag & (self.geom.sets() - 1)
    }

    fn access(&mut self, tag: u64, key: impl Fn(&T) -> u64) -> Option<T> {
        let set = self.sets.get_mut(&(tag & (self.geom.sets() - 1)))?;
        let pos = set.iter().position(|e| key(e) == tag)?;
        let e = set.remove(pos);
        set.insert(0, e.clone());
        Some(e)
    }

    fn peek(&self, tag: u64, key: impl Fn(&T) -> u64) -> Option<&T> {
        self.sets.get(&self.set_of(tag))?.iter().find(|e| key(e) == tag)
    }

    /// Insert at MRU, replacing an entry with the same tag or evicting the LRU one.
    fn fill(&mut self, tag: u64, value: T, key: impl Fn(&T) -> u64) -> Option<T> {
        let ways = self.geom.ways as usize;
        let set = self.sets.entry(tag & (self.geom.sets() - 1)).or_default();
        let evicted = match set.iter().position(|e| key(e) == tag) {
            Some(pos) => {
                set.remove(pos);
                None
            }
            None if set.len() == ways => set.pop(),
            None => None,
        };
        set.insert(0, value);
        evicted
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TlbEntry {
    /// Page number of the lookup key: virtual in baseline, masked in Oreo.
    pub tag: u64,
    pub ppn: u64,
    pub perms: Perms,
    /// Stored offset field; populated in Oreo mode only.
    pub offset: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tlb {
    inner: SetAssoc<TlbEntry>,
}

impl Tlb {
    pub fn new(geom: Geometry) -> Self {
        Self { inner: SetAssoc::new(geom) }
    }

    pub fn geometry(&self) -> Geometry {
        self.inner.geom
    }

    /// Look up page `tag`; promotes on hit, never fills.
    pub fn access(&mut self, tag: u64) -> Option<TlbEntry> {
        self.inner.access(tag, |e| e.tag)
    }

    pub fn peek(&self, tag: u64) -> Option<&TlbEntry> {
        self.inner.peek(tag, |e| e.tag)
    }

    pub fn fill(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        self.inner.fill(entry.tag, entry, |e| e.tag)
    }

    pub fn len(&self) -> usize {
        self.inner.sets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn encode(&self, out: &mut Vec<u64>) {
        for (set, ways) in &self.inner.sets {
            for (rank, e) in ways.iter().enumerate() {
                out.extend([*set, rank as u64, e.tag, e.ppn, e.perms.bits() as u64]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheGeometry {
    pub size: u64,
    pub ways: u64,
    pub line: u64,
}

impl CacheGeometry {
    pub const L1: CacheGeometry = CacheGeometry { size: 64 << 10, ways: 8, line: 64 };
    pub const L2: CacheGeometry = CacheGeometry { size: 2 << 20, ways: 16, line: 64 };

    pub fn sets(&self) -> u64 {
        self.size / self.line / self.ways
    }

    fn as_geometry(&self) -> Result<Geometry, UarchError> {
        if !self.line.is_power_of_two() || !self.size.is_multiple_of(self.line) {
            return Err(UarchError::Geometry(format!("cache of {} bytes with {}-byte lines", self.size, self.line)));
        }
        let g = Geometry { entries: self.size / self.line, ways: self.ways };
        g.validate("cache")?;
        Ok(g)
    }
}

/// One cache level's tag store. Tags are physical line numbers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLevel {
    line_shift: u32,
    inner: SetAssoc<u64>,
}

impl CacheLevel {
    pub fn new(geom: CacheGeometry) -> Result<Self, UarchError> {
        Ok(Self { line_shift: geom.line.trailing_zeros(), inner: SetAssoc::new(geom.as_geometry()?) })
    }

    pub fn line_of(&self, paddr: u64) -> u64 {
        paddr >> self.line_shift
    }

    pub fn set_index(&self, paddr: u64) -> u64 {
        self.inner.set_of(self.line_of(paddr))
    }

    pub fn sets(&self) -> u64 {
        self.inner.geom.sets()
    }

    pub fn contains(&self, paddr: u64) -> bool {
        let line = self.line_of(paddr);
        self.inner.peek(line, |t| *t).is_some()
    }

    fn access(&mut self, paddr: u64) -> bool {
        let line = self.line_of(paddr);
        self.inner.access(line, |t| *t).is_some()
    }

    fn fill(&mut self, paddr: u64) -> Option<u64> {
        let line = self.line_of(paddr);
        self.inner.fill(line, line, |t| *t).map(|l| l << self.line_shift)
    }

    fn encode(&self, out: &mut Vec<u64>) {
        for (set, ways) in &self.inner.sets {
            for (rank, tag) in ways.iter().enumerate() {
                out.extend([*set, rank as u64, *tag]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CachePath {
    Inst,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HitLevel {
    L1,
    L2,
    Dram,
}

/// L1I, L1D and a unified L2, modeled as independent levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheMeta {
    pub l1i: CacheLevel,
    pub l1d: CacheLevel,
    pub l2: CacheLevel,
}

impl CacheMeta {
    pub fn new(cfg: &UarchConfig) -> Result<Self, UarchError> {
        Ok(Self { l1i: CacheLevel::new(cfg.l1i)?, l1d: CacheLevel::new(cfg.l1d)?, l2: CacheLevel::new(cfg.l2)? })
    }

    /// Access `paddr` through the given L1; fills every level that missed.
    pub fn touch(&mut self, path: CachePath, paddr: u64, lat: &LatencyTable) -> (HitLevel, u64) {
        let l1 = match path {
            CachePath::Inst => &mut self.l1i,
            CachePath::Data => &mut self.l1d,
        };
        if l1.access(paddr) {
            return (HitLevel::L1, lat.l1_hit);
        }
        l1.fill(paddr);
        if self.l2.access(paddr) {
            return (HitLevel::L2, lat.l2_hit);
        }
        self.l2.fill(paddr);
        (HitLevel::Dram, lat.dram)
    }

    fn encode(&self, out: &mut Vec<u64>) {
        for level in [&self.l1i, &self.l1d, &self.l2] {
            let mut body = Vec::new();
            level.encode(&mut body);
            out.push(body.len() as u64);
            out.extend(body);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BtbEntry {
    pub tag: u64,
    pub target: u64,
}

/// Direct-mapped BTB indexed by low PC bits, plus a last-direction table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPred {
    entries: u64,
    btb: BTreeMap<u64, BtbEntry>,
    taken: BTreeMap<u64, bool>,
}

impl BranchPred {
    pub fn new(entries: u64) -> Result<Self, UarchError> {
        if !entries.is_power_of_two() {
            return Err(UarchError::Geometry(format!("BTB with {entries} entries")));
        }
        Ok(Self { entries, btb: BTreeMap::new(), taken: BTreeMap::new() })
    }

    pub fn entries(&self) -> u64 {
        self.entries
    }

    pub fn index(&self, pc: u64) -> u64 {
        (pc / INST_BYTES) & (self.entries - 1)
    }

    /// Predicted target for a branch at `src`, if the BTB holds one.
    pub fn predict(&self, src: u64) -> Option<u64> {
        self.btb.get(&self.index(src)).filter(|e| e.tag == src).map(|e| e.target)
    }

    pub fn predict_taken(&self, src: u64) -> bool {
        self.taken.get(&self.index(src)).copied().unwrap_or(false)
    }

    /// Record that control reached `target` from `src`.
    pub fn update(&mut self, target: u64, src: u64) {
        let idx = self.index(src);
        let taken = target != src.wrapping_add(INST_BYTES);
        self.taken.insert(idx, taken);
        if taken {
            self.btb.insert(idx, BtbEntry { tag: src, target });
        }
    }

    fn encode(&self, out: &mut Vec<u64>) {
        out.push(self.btb.len() as u64);
        for (idx, e) in &self.btb {
            out.extend([*idx, e.tag, e.target]);
        }
        let taken: Vec<u64> = self.taken.iter().filter(|(_, t)| **t).map(|(i, _)| *i).collect();
        out.push(taken.len() as u64);
        out.extend(taken);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemKind {
    Load,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LsqEntry {
    pub seq: u64,
    pub kind: MemKind,
    /// Address key: virtual in baseline, masked in Oreo.
    pub key: u64,
    pub ppn: Option<u64>,
    /// Protected bits of the virtual address (Oreo only).
    pub extracted_bits: u64,
    /// Whether the protected bits match the stored offset (Oreo only).
    pub precheck_ok: Option<bool>,
    pub data: u64,
    /// Stored offset and permissions of the translated page; not observable.
    pub offset: Option<u64>,
    pub perms: Option<Perms>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lsq {
    entries: VecDeque<LsqEntry>,
}

impl Lsq {
    pub fn push(&mut self, e: LsqEntry) {
        self.entries.push_back(e);
    }

    pub fn get(&self, seq: u64) -> Option<&LsqEntry> {
        self.entries.iter().find(|e| e.seq == seq)
    }

    pub fn get_mut(&mut self, seq: u64) -> Option<&mut LsqEntry> {
        self.entries.iter_mut().find(|e| e.seq == seq)
    }

    pub fn remove(&mut self, seq: u64) -> Option<LsqEntry> {
        let pos = self.entries.iter().position(|e| e.seq == seq)?;
        self.entries.remove(pos)
    }

    /// Drop entries younger than `seq`.
    pub fn squash_after(&mut self, seq: u64) {
        self.entries.retain(|e| e.seq <= seq);
    }

    /// Youngest older store to the same word whose address translated.
    pub fn forward(&self, key: u64, seq: u64) -> Option<&LsqEntry> {
        self.entries
            .iter()
            .rev()
            .filter(|e| e.seq < seq && e.kind == MemKind::Store)
            .find(|e| e.key & !7 == key & !7 && e.ppn.is_some())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LsqEntry> {
        self.entries.iter()
    }

    // Only the address side is observable: kind, key and translation.
    fn encode(&self, out: &mut Vec<u64>) {
        out.push(self.entries.len() as u64);
        for e in &self.entries {
            let kind = match e.kind {
                MemKind::Load => 0,
                MemKind::Store => 1,
            };
            out.extend([kind, e.key, e.ppn.unwrap_or(u64::MAX)]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UarchConfig {
    pub tlb: Geometry,
    pub l1i: CacheGeometry,
    pub l1d: CacheGeometry,
    pub l2: CacheGeometry,
    pub btb_entries: u64,
    pub latency: LatencyTable,
}

impl Default for UarchConfig {
    fn default() -> Self {
        Self {
            tlb: Geometry { entries: 64, ways: 4 },
            l1i: CacheGeometry::L1,
            l1d: CacheGeometry::L1,
            l2: CacheGeometry::L2,
            btb_entries: 4096,
            latency: LatencyTable::default(),
        }
    }
}

impl UarchConfig {
    pub fn validate(&self) -> Result<(), UarchError> {
        self.tlb.validate("tlb")?;
        self.latency.validate()?;
        Uarch::new(self).map(|_| ())
    }
}

/// The microarchitecture state μ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Uarch {
    pub bp: BranchPred,
    pub lsq: Lsq,
    pub cache: CacheMeta,
    pub tlb: Tlb,
}

impl Uarch {
    /// Reset state; independent of mode and layout.
    pub fn new(cfg: &UarchConfig) -> Result<Self, UarchError> {
        cfg.tlb.validate("tlb")?;
        Ok(Self {
            bp: BranchPred::new(cfg.btb_entries)?,
            lsq: Lsq::default(),
            cache: CacheMeta::new(cfg)?,
            tlb: Tlb::new(cfg.tlb),
        })
    }

    pub fn observe(&self) -> Observation {
        let mut out = Vec::with_capacity(256);
        for (tag, f) in [
            (OBS_BP, Self::encode_bp as fn(&Self, &mut Vec<u64>)),
            (OBS_LSQ, Self::encode_lsq),
            (OBS_CACHE, Self::encode_cache),
            (OBS_TLB, Self::encode_tlb),
        ] {
            let mut body = Vec::new();
            f(self, &mut body);
            out.push(tag);
            out.push(body.len() as u64);
            out.extend(body);
        }
        Observation(out)
    }

    fn encode_bp(&self, out: &mut Vec<u64>) {
        self.bp.encode(out)
    }

    fn encode_lsq(&self, out: &mut Vec<u64>) {
        self.lsq.encode(out)
    }

    fn encode_cache(&self, out: &mut Vec<u64>) {
        self.cache.encode(out)
    }

    fn encode_tlb(&self, out: &mut Vec<u64>) {
        self.tlb.encode(out)
    }
}

const OBS_BP: u64 = 0xb9;
const OBS_LSQ: u64 = 0x15;
const OBS_CACHE: u64 = 0xca;
const OBS_TLB: u64 = 0x7b;

/// Canonical snapshot of ⟨BP, LSQ, Cache, TLB⟩ including LRU ranks.
///
/// Excludes data words, store data, stored offset fields and the core state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation(pub Vec<u64>);

impl Observation {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "TLB")]
    Tlb,
    #[serde(rename = "Cache")]
    Cache,
    #[serde(rename = "MMU/PTW")]
    MmuPtw,
}

impl Structure {
    pub const ALL: [Structure; 4] = [Structure::Tlb, Structure::Cache, Structure::Bp, Structure::MmuPtw];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Bp => "BP",
            Structure::Tlb => "TLB",
            Structure::Cache => "Cache",
            Structure::MmuPtw => "MMU/PTW",
        }
    }

    pub fn parse(s: &str) -> Option<Structure> {
        Structure::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Marks a missing translation in event inputs.
pub const NONE: u64 = u64::MAX;

/// Input presented to one structure at one step.
///
/// BP: `(target, src)`. TLB: `(page key, ppn or NONE)`. Cache: `(physical line address)`.
/// MMU/PTW: `(key, pte addresses...)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub step: u64,
    pub structure: Structure,
    pub input: Vec<u64>,
}

impl TraceEvent {
    pub fn render_input(&self) -> String {
        let mut s = String::new();
        for (i, x) in self.input.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            if *x == NONE {
                s.push('-');
            } else {
                let _ = write!(s, "{x:#x}");
            }
        }
        s
    }

    /// One NDJSON line with a stable field order.
    pub fn to_ndjson(&self) -> String {
        format!(
            "{{\"step\":{},\"structure\":\"{}\",\"input\":\"{}\"}}",
            self.step,
            self.structure.name(),
            self.render_input()
        )
    }

    pub fn parse_ndjson(line: &str) -> Result<TraceEvent, String> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            step: u64,
            structure: String,
            input: String,
        }
        let raw: Raw = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let structure = Structure::parse(&raw.structure).ok_or_else(|| format!("unknown structure {:?}", raw.structure))?;
        let input = if raw.input.is_empty() {
            Vec::new()
        } else {
            raw.input
                .split(',')
                .map(|t| if t == "-" { Ok(NONE) } else { crate::addr::parse_u64(t) })
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(TraceEvent { step: raw.step, structure, input })
    }

    /// The inputs that live in the virtual (or masked) address space.
    pub fn virtual_inputs(&self) -> &[u64] {
        match self.structure {
            Structure::Bp => &self.input,
            Structure::Tlb | Structure::MmuPtw => &self.input[..1.min(self.input.len())],
            Structure::Cache => &[],
        }
    }
}

/// Page base of a key, as used for TLB tags.
pub fn page_tag(key: u64) -> u64 {
    key >> PAGE_SHIFT
}

pub fn page_key(tag: u64) -> u64 {
    tag * PAGE_SIZE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> UarchConfig {
        UarchConfig::default()
    }

    #[test]
    fn tlb_fill_then_hit_and_lru_eviction() {
        let mut t = Tlb::new(Geometry { entries: 8, ways: 2 });
        let e = |tag| TlbEntry { tag, ppn: tag + 100, perms: Perms::USER_RW, offset: 0 };
        assert!(t.access(4).is_none());
        t.fill(e(4));
        assert_eq!(t.access(4).unwrap().ppn, 104);
        // Same set (4 sets): 0, 4, 8.
        t.fill(e(0));
        t.access(4);
        assert_eq!(t.fill(e(8)).unwrap().tag, 0);
        assert!(t.access(0).is_none());
        assert!(t.access(4).is_some() && t.access(8).is_some());
    }

    #[test]
    fn cache_cold_then_warm() {
        let lat = LatencyTable::default();
        let mut c = CacheMeta::new(&cfg()).unwrap();
        assert_eq!(c.touch(CachePath::Data, 0x1000, &lat), (HitLevel::Dram, 120));
        assert_eq!(c.touch(CachePath::Data, 0x1008, &lat), (HitLevel::L1, 4));
        assert_eq!(c.touch(CachePath::Inst, 0x1000, &lat), (HitLevel::L2, 14));
    }

    #[test]
    fn prime_probe_single_eviction() {
        let lat = LatencyTable::default();
        let mut c = CacheMeta::new(&cfg()).unwrap();
        let span = c.l1d.sets() * 64;
        let set = 5u64;
        let primes: Vec<u64> = (0..8).map(|w| 0x10_0000 + w * span + set * 64).collect();
        for &p in &primes {
            c.touch(CachePath::Data, p, &lat);
        }
        let victim = 0x90_0000 + set * 64;
        assert_eq!(c.l1d.set_index(victim), set);
        c.touch(CachePath::Data, victim, &lat);
        let missing: Vec<u64> = primes.iter().copied().filter(|&p| !c.l1d.contains(p)).collect();
        assert_eq!(missing, vec![primes[0]]);
    }

    #[test]
    fn btb_last_writer_wins() {
        let mut bp = BranchPred::new(4096).unwrap();
        bp.update(0x5000, 0x1000);
        assert_eq!(bp.predict(0x1000), Some(0x5000));
        assert!(bp.predict_taken(0x1000));
        let alias = 0x1000 + 4096 * 4;
        assert_eq!(bp.index(alias), bp.index(0x1000));
        bp.update(0x7000, alias);
        assert_eq!(bp.predict(0x1000), None);
        assert_eq!(bp.predict(alias), Some(0x7000));
        bp.update(alias + 4, alias);
        assert!(!bp.predict_taken(alias));
    }

    #[test]
    fn observation_tracks_structure() {
        let a = Uarch::new(&cfg()).unwrap();
        let mut b = Uarch::new(&cfg()).unwrap();
        assert_eq!(a.observe(), b.observe());
        b.tlb.fill(TlbEntry { tag: 1, ppn: 2, perms: Perms::USER_RW, offset: 0 });
        assert_ne!(a.observe(), b.observe());
    }

    #[test]
    fn observation_ignores_offset_field() {
        let mut a = Uarch::new(&cfg()).unwrap();
        let mut b = Uarch::new(&cfg()).unwrap();
        a.tlb.fill(TlbEntry { tag: 1, ppn: 2, perms: Perms::USER_RW, offset: 3 });
        b.tlb.fill(TlbEntry { tag: 1, ppn: 2, perms: Perms::USER_RW, offset: 7 });
        assert_eq!(a.observe(), b.observe());
    }

    #[test]
    fn event_ndjson_round_trip() {
        let e = TraceEvent { step: 7, structure: Structure::MmuPtw, input: vec![0xffff_ffff_c000_0000, NONE, 0x40] };
        let line = e.to_ndjson();
        assert_eq!(line, r#"{"step":7,"structure":"MMU/PTW","input":"0xffffffffc0000000,-,0x40"}"#);
        assert_eq!(TraceEvent::parse_ndjson(&line).unwrap(), e);
    }

    #[test]
    fn latency_validation() {
        assert!(LatencyTable::default().validate().is_ok());
        assert!(LatencyTable { l2_hit: 200, ..Default::default() }.validate().is_err());
        assert!(LatencyTable { fault: 0, ..Default::default() }.validate().is_err());
    }
}
