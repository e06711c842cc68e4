//! Address roles and the masking algebra.
//!
//! A randomization region is split into equal subregions. Masking folds every
//! subregion onto the first one by clearing the region's protected bits, and
//! the inverse adds the secret offset back.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

macro_rules! addr_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        pub struct $name(pub u64);

        impl $name {
            pub const fn raw(self) -> u64 {
                self.0
            }

            pub const fn page(self) -> u64 {
                self.0 >> PAGE_SHIFT
            }

            pub const fn page_base(self) -> Self {
                Self(self.0 & !(PAGE_SIZE - 1))
            }

            pub const fn wrapping_add(self, delta: u64) -> Self {
                Self(self.0.wrapping_add(delta))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:#x})", stringify!($name), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:#x}", self.0)
            }
        }
    };
}

addr_type!(
    /// A virtual address as produced by software, possibly carrying secret bits.
    VirtAddr
);
addr_type!(
    /// A virtual address with the protected bits of its region cleared.
    MaskedAddr
);
addr_type!(
    /// A physical address.
    PhysAddr
);

impl MaskedAddr {
    /// A masked address is itself a legal virtual address (inside the first subregion).
    pub const fn as_virt(self) -> VirtAddr {
        VirtAddr(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Oreo,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Baseline, Mode::Oreo];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Oreo => "oreo",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("offset {offset:#x} has bits outside the protected mask {mask:#x}")]
    OffsetOutsideMask { offset: u64, mask: u64 },
    #[error("address {0:#x} is outside the region")]
    OutsideRegion(u64),
    #[error("invalid bits-selection strategy: {0}")]
    InvalidStrategy(String),
}

/// Whether `v` is canonical for a `width`-bit address space. Bits listed in
/// `allowed` may deviate from the sign extension (non-canonical protected bits).
pub fn is_canonical(v: u64, width: u32, allowed: u64) -> bool {
    if width >= 64 {
        return true;
    }
    let x = v & !allowed;
    let shift = 64 - width;
    (((x << shift) as i64) >> shift) as u64 == x
}

/// A randomization region `[start, end)` divided into subregions of `subregion_len` bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RegionSpec", into = "RegionSpec")]
pub struct RandRegion {
    id: u16,
    start: VirtAddr,
    end: VirtAddr,
    subregion_len: u64,
    protected_mask: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    #[serde(default)]
    pub id: u16,
    #[serde(with = "hex_u64")]
    pub start: u64,
    #[serde(with = "hex_u64")]
    pub end: u64,
    #[serde(with = "hex_u64")]
    pub subregion_len: u64,
}

impl TryFrom<RegionSpec> for RandRegion {
    type Error = AddrError;

    fn try_from(s: RegionSpec) -> Result<Self, AddrError> {
        RandRegion::new(s.id, VirtAddr(s.start), VirtAddr(s.end), s.subregion_len)
    }
}

impl From<RandRegion> for RegionSpec {
    fn from(r: RandRegion) -> Self {
        RegionSpec { id: r.id, start: r.start.0, end: r.end.0, subregion_len: r.subregion_len }
    }
}

impl fmt::Debug for RandRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RandRegion")
            .field("id", &self.id)
            .field("start", &format_args!("{:#x}", self.start.0))
            .field("end", &format_args!("{:#x}", self.end.0))
            .field("subregion_len", &format_args!("{:#x}", self.subregion_len))
            .field("protected_mask", &format_args!("{:#x}", self.protected_mask))
            .finish()
    }
}

impl RandRegion {
    /// The protected mask is derived: it covers bits `[log2(subregion_len), ceil(log2(end - start)))`.
    /// `start` must be aligned to that span so that clearing the mask agrees with the
    /// subtract-and-modulo formulation.
    pub fn new(id: u16, start: VirtAddr, end: VirtAddr, subregion_len: u64) -> Result<Self, AddrError> {
        if start.0 >= end.0 {
            return Err(AddrError::InvalidRegion(format!("start {start} must be below end {end}")));
        }
        if !subregion_len.is_power_of_two() {
            return Err(AddrError::InvalidRegion(format!(
                "subregion length {subregion_len:#x} is not a power of two"
            )));
        }
        let len = end.0 - start.0;
        if !len.is_multiple_of(subregion_len) {
            return Err(AddrError::InvalidRegion(format!(
                "region length {len:#x} is not a multiple of the subregion length {subregion_len:#x}"
            )));
        }
        let span_bits = 64 - (len - 1).leading_zeros();
        let span_mask = if span_bits >= 64 { u64::MAX } else { (1u64 << span_bits) - 1 };
        if start.0 & span_mask != 0 {
            return Err(AddrError::InvalidRegion(format!(
                "start {start} is not aligned to the region span 2^{span_bits}"
            )));
        }
        let protected_mask = span_mask & !(subregion_len - 1);
        Ok(Self { id, start, end, subregion_len, protected_mask })
    }

    /// Region `[start, start + count * 2^sub_shift)`.
    pub fn with_subregions(id: u16, start: VirtAddr, sub_shift: u32, count: u64) -> Result<Self, AddrError> {
        let len = 1u64 << sub_shift;
        let end = count
            .checked_mul(len)
            .and_then(|l| start.0.checked_add(l))
            .ok_or_else(|| AddrError::InvalidRegion("region end overflows".into()))?;
        Self::new(id, start, VirtAddr(end), len)
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn start(&self) -> VirtAddr {
        self.start
    }

    pub fn end(&self) -> VirtAddr {
        self.end
    }

    pub fn subregion_len(&self) -> u64 {
        self.subregion_len
    }

    pub fn protected_mask(&self) -> u64 {
        self.protected_mask
    }

    /// Index of the lowest protected bit.
    pub fn protected_lo(&self) -> u32 {
        self.subregion_len.trailing_zeros()
    }

    pub fn protected_bits(&self) -> u32 {
        self.protected_mask.count_ones()
    }

    pub fn subregions(&self) -> u64 {
        (self.end.0 - self.start.0) / self.subregion_len
    }

    pub fn contains(&self, v: VirtAddr) -> bool {
        self.start.0 <= v.0 && v.0 < self.end.0
    }

    pub fn contains_raw(&self, x: u64) -> bool {
        self.start.0 <= x && x < self.end.0
    }

    pub fn subregion_base(&self, index: u64) -> VirtAddr {
        VirtAddr(self.start.0 + index * self.subregion_len)
    }

    pub fn subregion_index(&self, v: VirtAddr) -> Option<u64> {
        self.contains(v).then(|| (v.0 - self.start.0) / self.subregion_len)
    }

    /// Offset of subregion `index`, i.e. `index * subregion_len`.
    pub fn offset_of(&self, index: u64) -> u64 {
        index * self.subregion_len
    }

    pub fn validate_offset(&self, offset: u64) -> Result<(), AddrError> {
        if offset & !self.protected_mask != 0 {
            return Err(AddrError::OffsetOutsideMask { offset, mask: self.protected_mask });
        }
        Ok(())
    }

    pub fn disjoint(&self, other: &RandRegion) -> bool {
        self.end.0 <= other.start.0 || other.end.0 <= self.start.0
    }
}

pub fn check_disjoint(regions: &[RandRegion]) -> Result<(), AddrError> {
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if !a.disjoint(b) {
                return Err(AddrError::InvalidRegion(format!(
                    "regions {} and {} overlap",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

/// The region containing `v`, if any.
pub fn classify(v: VirtAddr, regions: &[RandRegion]) -> Option<&RandRegion> {
    regions.iter().find(|r| r.contains(v))
}

/// Clear the protected bits of `v`. Addresses outside every region pass through.
pub fn virt2mask(v: VirtAddr, regions: &[RandRegion]) -> MaskedAddr {
    match classify(v, regions) {
        Some(r) => MaskedAddr(v.0 & !r.protected_mask),
        None => MaskedAddr(v.0),
    }
}

/// `((v - start) mod subregion_len) + start`; must agree with [`virt2mask`].
pub fn virt2mask_formula(v: VirtAddr, regions: &[RandRegion]) -> MaskedAddr {
    match classify(v, regions) {
        Some(r) => MaskedAddr((v.0 - r.start.0) % r.subregion_len + r.start.0),
        None => MaskedAddr(v.0),
    }
}

/// `offset + w`, rejecting offsets with bits outside the region's protected mask.
pub fn mask2valid(w: MaskedAddr, offset: u64, region: &RandRegion) -> Result<VirtAddr, AddrError> {
    region.validate_offset(offset)?;
    Ok(mask2valid_unchecked(w, offset))
}

/// Hot-path variant for offsets that were validated when the configuration was loaded.
pub fn mask2valid_unchecked(w: MaskedAddr, offset: u64) -> VirtAddr {
    VirtAddr(w.0.wrapping_add(offset))
}

/// The protected bits of `v` in place (`v & protected_mask`).
pub fn extract_oblivious_bits(v: VirtAddr, region: &RandRegion) -> Result<u64, AddrError> {
    if !region.contains(v) {
        return Err(AddrError::OutsideRegion(v.0));
    }
    Ok(v.0 & region.protected_mask)
}

/// Protected bits of `v` against whichever region contains it; zero outside all regions.
pub fn oblivious_bits(v: VirtAddr, regions: &[RandRegion]) -> u64 {
    classify(v, regions).map_or(0, |r| v.0 & r.protected_mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    DefaultBaseline,
    NaiveOreo,
    EnhancedBaseline,
    EnhancedOreo,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::DefaultBaseline,
        StrategyKind::NaiveOreo,
        StrategyKind::EnhancedBaseline,
        StrategyKind::EnhancedOreo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::DefaultBaseline => "default_baseline",
            StrategyKind::NaiveOreo => "naive_oreo",
            StrategyKind::EnhancedBaseline => "enhanced_baseline",
            StrategyKind::EnhancedOreo => "enhanced_oreo",
        }
    }
}

/// Which address bits are randomized and which are protected.
///
/// Bits `[k, k + n)` are randomized by default ASLR. For the enhanced variants
/// `m` further bits above them are randomized; for the Oreo variants `m` bits are
/// protected. For `EnhancedBaseline` the `m` extra bits are randomized but not protected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsStrategy {
    pub kind: StrategyKind,
    pub k: u32,
    pub n: u32,
    pub m: u32,
    /// Lowest protected bit for `EnhancedOreo`; defaults to `k + n`.
    #[serde(default)]
    pub protected_lo: Option<u32>,
    /// Size of the relocated content, checked against the subregion size for `NaiveOreo`.
    #[serde(default)]
    pub valid_bytes: Option<u64>,
}

impl BitsStrategy {
    pub fn new(kind: StrategyKind, k: u32, n: u32, m: u32) -> Self {
        Self { kind, k, n, m, protected_lo: None, valid_bytes: None }
    }

    pub fn validate(&self) -> Result<(), AddrError> {
        let bad = |s: String| Err(AddrError::InvalidStrategy(s));
        if self.k < PAGE_SHIFT {
            return bad(format!("k = {} is below the page-granularity floor of 12", self.k));
        }
        if self.k + self.n + self.m > 64 {
            return bad("randomized bits exceed 64".into());
        }
        match self.kind {
            StrategyKind::DefaultBaseline => {
                if self.m != 0 {
                    return bad("default baseline has no extra bits (m must be 0)".into());
                }
            }
            StrategyKind::EnhancedBaseline => {}
            StrategyKind::NaiveOreo => {
                if self.m > self.n {
                    return bad(format!("m = {} exceeds n = {}", self.m, self.n));
                }
                if let Some(valid) = self.valid_bytes {
                    let sub = 1u128 << (self.k + self.n - self.m);
                    if sub < valid as u128 {
                        return bad(format!(
                            "subregion 2^{} is smaller than the valid region ({valid} bytes)",
                            self.k + self.n - self.m
                        ));
                    }
                }
            }
            StrategyKind::EnhancedOreo => {
                let lo = self.protected_lo.unwrap_or(self.k + self.n);
                if lo < self.k + self.n {
                    return bad(format!(
                        "protected bits start at {lo}, inside the default randomized bits [{}, {})",
                        self.k,
                        self.k + self.n
                    ));
                }
                if lo + self.m > 64 {
                    return bad("protected bits exceed 64".into());
                }
            }
        }
        Ok(())
    }

    /// Bit positions protected from the microarchitecture, if any.
    pub fn protected_range(&self) -> Option<Range<u32>> {
        match self.kind {
            StrategyKind::DefaultBaseline | StrategyKind::EnhancedBaseline => None,
            StrategyKind::NaiveOreo => Some(self.k + self.n - self.m..self.k + self.n),
            StrategyKind::EnhancedOreo => {
                let lo = self.protected_lo.unwrap_or(self.k + self.n);
                Some(lo..lo + self.m)
            }
        }
    }
}

/// Entropy in bits against locating gadgets, before and after microarchitectural bypasses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub kind: StrategyKind,
    pub orig_code_reuse: u32,
    pub orig_speculative: u32,
    pub remaining_code_reuse: u32,
    pub remaining_speculative: u32,
    /// Same columns when the extra bits can only take `positions` values.
    pub position_limited: Option<PositionLimited>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionLimited {
    pub positions: u64,
    pub orig_code_reuse: f64,
    pub remaining_code_reuse: f64,
}

impl EntropyReport {
    pub fn columns(&self) -> (u32, u32, u32, u32) {
        (self.orig_code_reuse, self.orig_speculative, self.remaining_code_reuse, self.remaining_speculative)
    }
}

pub fn entropy_report(strategy: &BitsStrategy) -> Result<EntropyReport, AddrError> {
    strategy.validate()?;
    let (n, m) = (strategy.n, strategy.m);
    let (a, b, c, d) = match strategy.kind {
        StrategyKind::DefaultBaseline => (n, n, 0, 0),
        StrategyKind::NaiveOreo => (n, n - m, m, 0),
        StrategyKind::EnhancedBaseline => (m + n, n, 0, 0),
        StrategyKind::EnhancedOreo => (m + n, n, m, 0),
    };
    Ok(EntropyReport {
        kind: strategy.kind,
        orig_code_reuse: a,
        orig_speculative: b,
        remaining_code_reuse: c,
        remaining_speculative: d,
        position_limited: None,
    })
}

/// As [`entropy_report`], additionally reporting the entropy when the `m` extra bits
/// admit only `positions` distinct values (e.g. a region smaller than `2^m` subregions).
pub fn entropy_report_with_positions(
    strategy: &BitsStrategy,
    positions: u64,
) -> Result<EntropyReport, AddrError> {
    let mut report = entropy_report(strategy)?;
    if positions == 0 {
        return Err(AddrError::InvalidStrategy("positions must be positive".into()));
    }
    let extra = (positions as f64).log2().min(strategy.m as f64);
    let (orig, remaining) = match strategy.kind {
        StrategyKind::DefaultBaseline => (strategy.n as f64, 0.0),
        StrategyKind::NaiveOreo => (strategy.n as f64, extra),
        StrategyKind::EnhancedBaseline => (strategy.n as f64 + extra, 0.0),
        StrategyKind::EnhancedOreo => (strategy.n as f64 + extra, extra),
    };
    report.position_limited =
        Some(PositionLimited { positions, orig_code_reuse: orig, remaining_code_reuse: remaining });
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSizing {
    pub tlb_entries: u64,
    pub rob_entries: u64,
    pub lsq_entries: u64,
    pub num_regions: u64,
    pub offset_bits: u64,
}

impl CoreSizing {
    /// The Mega BOOM configuration.
    pub const MEGA_BOOM: CoreSizing =
        CoreSizing { tlb_entries: 584, rob_entries: 128, lsq_entries: 64, num_regions: 2, offset_bits: 8 };
}

impl Default for CoreSizing {
    fn default() -> Self {
        Self::MEGA_BOOM
    }
}

/// Bits of region metadata: start and end bounds plus a 64-bit protected-bit vector.
pub const REGION_METADATA_BITS: u64 = 128 + 64;
pub const ARCHPC_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub tlb_extra_bytes: u64,
    pub rob_lsq_extra_bytes: u64,
    pub region_metadata_bytes: u64,
    pub archpc_bytes: u64,
    pub total_in_core_bytes: u64,
    pub total_memory_system_bytes: u64,
}

pub fn cost_report(c: &CoreSizing) -> CostReport {
    let bytes = |bits: u64| bits.div_ceil(8);
    let tlb_extra_bytes = bytes(c.tlb_entries * c.offset_bits);
    // ROB entries hold the offset; LSQ entries hold the offset plus the precheck flag.
    let rob_lsq_extra_bytes = bytes(c.rob_entries * c.offset_bits + c.lsq_entries * (c.offset_bits + 1));
    let region_metadata_bytes = bytes(c.num_regions * REGION_METADATA_BITS);
    CostReport {
        tlb_extra_bytes,
        rob_lsq_extra_bytes,
        region_metadata_bytes,
        archpc_bytes: ARCHPC_BYTES,
        total_in_core_bytes: rob_lsq_extra_bytes + region_metadata_bytes + ARCHPC_BYTES,
        total_memory_system_bytes: tlb_extra_bytes,
    }
}

/// A named region and bits-selection configuration.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub region: RandRegion,
    pub strategy: BitsStrategy,
    /// The bits randomized by default ASLR.
    pub randomized_bits: Range<u32>,
    /// Distinct values the protected bits can take within the region budget.
    pub positions: u64,
}

pub const KERNEL_REGION_START: u64 = 0xffff_ff80_0000_0000;
pub const KERNEL_REGION_END: u64 = 0xffff_ffef_0000_0000;
/// Each of kernel text and modules gets half of the unused kernel range.
pub const KERNEL_REGION_BUDGET: u64 = (KERNEL_REGION_END - KERNEL_REGION_START) / 2;
pub const PRESET_NAMES: [&str; 3] = ["kernel_text", "kernel_modules", "user_space"];

pub fn kernel_region() -> RandRegion {
    RandRegion::new(0, VirtAddr(KERNEL_REGION_START), VirtAddr(KERNEL_REGION_END), 1 << 31)
        .expect("kernel region is well formed")
}

pub fn preset(name: &str) -> Option<Preset> {
    let p = match name {
        "kernel_text" => Preset {
            name: "kernel_text",
            region: kernel_region(),
            strategy: BitsStrategy {
                protected_lo: Some(31),
                ..BitsStrategy::new(StrategyKind::EnhancedOreo, 21, 9, 8)
            },
            randomized_bits: 21..30,
            positions: KERNEL_REGION_BUDGET >> 31,
        },
        "kernel_modules" => Preset {
            name: "kernel_modules",
            region: kernel_region(),
            // 1024 allowed offsets, although bits 12 to 29 vary.
            strategy: BitsStrategy {
                protected_lo: Some(31),
                ..BitsStrategy::new(StrategyKind::EnhancedOreo, 12, 10, 8)
            },
            randomized_bits: 12..30,
            positions: KERNEL_REGION_BUDGET >> 31,
        },
        "user_space" => Preset {
            name: "user_space",
            region: RandRegion::new(0, VirtAddr(0), VirtAddr(1 << 53), 1 << 48)
                .expect("user region is well formed"),
            strategy: BitsStrategy {
                protected_lo: Some(48),
                ..BitsStrategy::new(StrategyKind::EnhancedOreo, 12, 28, 5)
            },
            randomized_bits: 12..40,
            positions: 32,
        },
        _ => return None,
    };
    Some(p)
}

impl Preset {
    /// The same preset evaluated under another strategy kind.
    pub fn strategy_as(&self, kind: StrategyKind) -> BitsStrategy {
        let s = self.strategy;
        match kind {
            StrategyKind::DefaultBaseline => BitsStrategy::new(kind, s.k, s.n, 0),
            StrategyKind::NaiveOreo => BitsStrategy::new(kind, s.k, s.n, s.m.min(s.n)),
            StrategyKind::EnhancedBaseline => BitsStrategy::new(kind, s.k, s.n, s.m),
            StrategyKind::EnhancedOreo => s,
        }
    }
}

pub mod hex_u64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(n),
            Raw::Str(s) => super::parse_u64(&s).map_err(de::Error::custom),
        }
    }
}

/// Parse a decimal or `0x`-prefixed hexadecimal integer, allowing `_` separators.
pub fn parse_u64(s: &str) -> Result<u64, String> {
    let t: String = s.trim().chars().filter(|&c| c != '_').collect();
    let r = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(h, 16)
    } else {
        t.parse::<u64>()
    };
    r.map_err(|e| format!("bad integer {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_region() -> RandRegion {
        RandRegion::new(0, VirtAddr(0xFF000_0000), VirtAddr(0xFF000_0000 + (1 << 28)), 1 << 20).unwrap()
    }

    #[test]
    fn worked_example() {
        let r = example_region();
        assert_eq!(r.protected_mask(), 0x0FF0_0000);
        let v = VirtAddr(0xFFAB1_2340);
        assert_eq!(virt2mask(v, &[r]), MaskedAddr(0xFF001_2340));
        assert_eq!(virt2mask_formula(v, &[r]), MaskedAddr(0xFF001_2340));
        assert_eq!(extract_oblivious_bits(v, &r).unwrap(), 0xAB0_0000);
        assert_eq!(mask2valid(MaskedAddr(0xFF001_2340), 0xAB0_0000, &r).unwrap(), v);
        assert_eq!(virt2mask(r.start(), &[r]), MaskedAddr(r.start().0));
        assert_eq!(extract_oblivious_bits(r.start(), &r).unwrap(), 0);
    }

    #[test]
    fn classify_membership() {
        let r = example_region();
        assert_eq!(classify(VirtAddr(0xFF001_2340), &[r]), Some(&r));
        assert_eq!(classify(VirtAddr(0xFEFFF_FFFF), &[r]), None);
        let other = RandRegion::new(1, VirtAddr(0x1_0000_0000), VirtAddr(0x1_1000_0000), 1 << 20).unwrap();
        assert_eq!(classify(VirtAddr(0xFFAB1_2340), &[r, other]).map(|x| x.id()), Some(0));
    }

    #[test]
    fn out_of_region_is_identity() {
        let r = example_region();
        let v = VirtAddr(0x1234_5678);
        assert_eq!(virt2mask(v, &[r]).0, v.0);
        assert!(extract_oblivious_bits(v, &r).is_err());
    }

    #[test]
    fn rejects_bad_offsets_and_regions() {
        let r = example_region();
        assert!(mask2valid(MaskedAddr(0xFF000_0000), 0x1000, &r).is_err());
        assert_eq!(mask2valid(MaskedAddr(0xFF000_0040), 0, &r).unwrap(), VirtAddr(0xFF000_0040));
        assert!(RandRegion::new(0, VirtAddr(0x2000), VirtAddr(0x1000), 0x1000).is_err());
        assert!(RandRegion::new(0, VirtAddr(0), VirtAddr(0x3000), 0x1800).is_err());
        assert!(RandRegion::new(0, VirtAddr(0x1000), VirtAddr(0x9000), 0x1000).is_err());
    }

    #[test]
    fn kernel_region_protects_bits_31_to_38() {
        let r = kernel_region();
        assert_eq!(r.protected_mask(), 0xff << 31);
        assert_eq!(r.subregions(), 222);
        assert_eq!(KERNEL_REGION_BUDGET >> 31, 111);
    }

    #[test]
    fn canonical_width() {
        assert!(is_canonical(0xffff_ff80_0000_0000, 48, 0));
        assert!(is_canonical(0x0000_7fff_ffff_f000, 48, 0));
        assert!(!is_canonical(0x0001_0000_0000_0000, 48, 0));
        assert!(is_canonical(0x001f_0000_0000_1000, 48, 0x001f_0000_0000_0000));
        assert!(is_canonical(0x00ff_ffff_ffff_f000, 57, 0));
        assert!(!is_canonical(0x00ff_ffff_ffff_f000, 48, 0));
        assert!(!is_canonical(0x0100_0000_0000_0000, 57, 0));
    }

    #[test]
    fn entropy_table() {
        let e = entropy_report(&BitsStrategy::new(StrategyKind::DefaultBaseline, 21, 9, 0)).unwrap();
        assert_eq!(e.columns(), (9, 9, 0, 0));
        let s = BitsStrategy { protected_lo: Some(31), ..BitsStrategy::new(StrategyKind::EnhancedOreo, 21, 9, 8) };
        assert_eq!(entropy_report(&s).unwrap().columns(), (17, 9, 8, 0));
        let naive0 = entropy_report(&BitsStrategy::new(StrategyKind::NaiveOreo, 21, 9, 0)).unwrap();
        assert_eq!(naive0.columns(), e.columns());
        assert!(BitsStrategy::new(StrategyKind::DefaultBaseline, 11, 9, 0).validate().is_err());
        assert!(BitsStrategy::new(StrategyKind::NaiveOreo, 21, 4, 5).validate().is_err());
        let inside = BitsStrategy { protected_lo: Some(25), ..s };
        assert!(inside.validate().is_err());
    }

    #[test]
    fn position_limited_entropy() {
        let p = preset("kernel_text").unwrap();
        let e = entropy_report_with_positions(&p.strategy, p.positions).unwrap();
        assert_eq!(e.remaining_code_reuse, 8);
        let pl = e.position_limited.unwrap();
        assert_eq!(pl.positions, 111);
        assert!((pl.remaining_code_reuse - 111f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn cost_arithmetic() {
        let c = cost_report(&CoreSizing::MEGA_BOOM);
        assert_eq!(c.tlb_extra_bytes, 584);
        assert_eq!(c.rob_lsq_extra_bytes, 200);
        assert_eq!(c.region_metadata_bytes, 48);
        assert_eq!(c.total_in_core_bytes, 256);
        assert_eq!(c.total_memory_system_bytes, 584);
    }

    #[test]
    fn region_serde_round_trip() {
        let r = example_region();
        let s = serde_json::to_string(&r).unwrap();
        let back: RandRegion = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        let bad = r#"{"start":"0x2000","end":"0x1000","subregion_len":"0x1000"}"#;
        assert!(serde_json::from_str::<RandRegion>(bad).is_err());
    }
}
