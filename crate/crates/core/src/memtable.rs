//! Physical memory and hierarchical page tables.
//!
//! Baseline tables are keyed by virtual page numbers. Oreo tables are keyed by
//! masked page numbers and keep the protected bits of each page in the leaf PTE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{
    classify, is_canonical, oblivious_bits, virt2mask, MaskedAddr, Mode, PhysAddr, RandRegion, VirtAddr,
    PAGE_SHIFT, PAGE_SIZE,
};
use crate::layout::{Layout, LayoutError, Perms};
use crate::machine::Inst;

/// Page-table nodes are bump-allocated upwards from here.
pub const PT_BASE: PhysAddr = PhysAddr(0x4000_0000);
pub const PTE_BYTES: u64 = 8;
/// Width of the leaf offset field. Kernel presets need 8 or 9 bits, user space 5.
pub const OFFSET_FIELD_BITS: u32 = 9;
pub const KERNEL_OFFSET_BITS: u32 = 9;
pub const USER_OFFSET_BITS: u32 = 5;
/// Bytes per instruction slot in physical memory.
pub const INST_BYTES: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("page {page:#x} is mapped twice under the {mode} key")]
    KeyCollision { page: u64, mode: Mode },
    #[error("offset field {field:#x} of page {page:#x} needs more than {width} bits")]
    OffsetTooWide { page: u64, field: u64, width: u32 },
    #[error("key {0:#x} is not canonical for the page-table width")]
    NonCanonical(u64),
    #[error("invalid page-table configuration: {0}")]
    Config(String),
    #[error("physical ranges overlap: {0}")]
    Overlap(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtConfig {
    pub levels: u32,
    pub index_bits: u32,
    pub page_bits: u32,
}

impl Default for PtConfig {
    fn default() -> Self {
        Self { levels: 4, index_bits: 9, page_bits: PAGE_SHIFT }
    }
}

impl PtConfig {
    pub const FIVE_LEVEL: PtConfig = PtConfig { levels: 5, index_bits: 9, page_bits: PAGE_SHIFT };

    pub fn width(&self) -> u32 {
        self.levels * self.index_bits + self.page_bits
    }

    pub fn validate(&self) -> Result<(), MemError> {
        if self.page_bits != PAGE_SHIFT || self.index_bits != 9 || self.levels == 0 || self.width() > 64 {
            return Err(MemError::Config(format!(
                "{} levels x {} bits + {} page bits",
                self.levels, self.index_bits, self.page_bits
            )));
        }
        Ok(())
    }

    fn index(&self, key: u64, level: u32) -> u64 {
        let shift = self.page_bits + self.index_bits * (self.levels - 1 - level);
        (key >> shift) & ((1 << self.index_bits) - 1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Pte {
    pub valid: bool,
    pub ppn: u64,
    pub perms: Perms,
    /// Protected bits of the page's valid address, shifted down to bit 0. Zero in baseline.
    pub offset: u16,
}

pub fn encode_offset(offset: u64, lo: u32, width: u32) -> Option<u16> {
    let field = offset >> lo;
    (field << lo == offset && field < 1 << width).then_some(field as u16)
}

pub fn decode_offset(field: u16, lo: u32) -> u64 {
    (field as u64) << lo
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Node {
    level: u32,
    entries: Vec<Pte>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageTable {
    cfg: PtConfig,
    root: PhysAddr,
    nodes: BTreeMap<u64, Node>,
}

/// Result of one walk: the PTE addresses read, up to and including the first
/// invalid one, and the leaf entry when the walk succeeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Walk {
    pub ptes: Vec<PhysAddr>,
    pub leaf: Option<Pte>,
}

/// One leaf mapping to install.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafSpec {
    pub key_page: u64,
    pub ppn: u64,
    pub perms: Perms,
    pub offset: u16,
}

impl PageTable {
    pub fn config(&self) -> PtConfig {
        self.cfg
    }

    pub fn root(&self) -> PhysAddr {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Physical range occupied by the table.
    pub fn span(&self) -> (PhysAddr, PhysAddr) {
        (self.root, PhysAddr(self.root.0 + self.nodes.len() as u64 * PAGE_SIZE))
    }

    /// Install `leaves` with nodes allocated in sorted key order starting at `base`.
    pub fn from_leaves(cfg: PtConfig, base: PhysAddr, mut leaves: Vec<LeafSpec>) -> Result<Self, MemError> {
        cfg.validate()?;
        leaves.sort_by_key(|l| l.key_page);
        let mut pt = PageTable { cfg, root: base, nodes: BTreeMap::new() };
        let empty = |level| Node { level, entries: vec![Pte::default(); 1 << cfg.index_bits] };
        pt.nodes.insert(base.0, empty(0));
        let mut next = base.0 + PAGE_SIZE;
        for leaf in &leaves {
            if !is_canonical(leaf.key_page, cfg.width(), 0) {
                return Err(MemError::NonCanonical(leaf.key_page));
            }
            let mut node = base.0;
            for level in 0..cfg.levels {
                let idx = cfg.index(leaf.key_page, level) as usize;
                let last = level + 1 == cfg.levels;
                let entry = pt.nodes.get_mut(&node).expect("node allocated").entries[idx];
                if last {
                    if entry.valid {
                        return Err(MemError::Config(format!("leaf {:#x} installed twice", leaf.key_page)));
                    }
                    pt.nodes.get_mut(&node).expect("node allocated").entries[idx] =
                        Pte { valid: true, ppn: leaf.ppn, perms: leaf.perms, offset: leaf.offset };
                } else if entry.valid {
                    node = entry.ppn << PAGE_SHIFT;
                } else {
                    let child = next;
                    next += PAGE_SIZE;
                    pt.nodes.insert(child, empty(level + 1));
                    pt.nodes.get_mut(&node).expect("node allocated").entries[idx] =
                        Pte { valid: true, ppn: child >> PAGE_SHIFT, perms: Perms::TABLE, offset: 0 };
                    node = child;
                }
            }
        }
        Ok(pt)
    }

    pub fn walk(&self, key: u64) -> Walk {
        let mut ptes = Vec::with_capacity(self.cfg.levels as usize);
        if !is_canonical(key, self.cfg.width(), 0) {
            return Walk { ptes, leaf: None };
        }
        let mut node = self.root.0;
        for level in 0..self.cfg.levels {
            let idx = self.cfg.index(key, level);
            ptes.push(PhysAddr(node + idx * PTE_BYTES));
            let pte = self.nodes[&node].entries[idx as usize];
            if !pte.valid {
                return Walk { ptes, leaf: None };
            }
            if level + 1 == self.cfg.levels {
                return Walk { ptes, leaf: Some(pte) };
            }
            node = pte.ppn << PAGE_SHIFT;
        }
        unreachable!("walk terminates at the leaf level")
    }

    /// One line per valid PTE, sorted by node address then index.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (addr, node) in &self.nodes {
            for (i, e) in node.entries.iter().enumerate().filter(|(_, e)| e.valid) {
                out.push_str(&format!(
                    "L{} node={:#x} idx={:03} valid=1 ppn={:#x} perms={} off={:#x}\n",
                    node.level,
                    addr,
                    i,
                    e.ppn,
                    e.perms.render(),
                    e.offset
                ));
            }
        }
        out
    }

    /// Same as [`dump`](Self::dump) with every offset field shown as zero.
    pub fn dump_without_offsets(&self) -> String {
        let mut pt = self.clone();
        for node in pt.nodes.values_mut() {
            for e in &mut node.entries {
                e.offset = 0;
            }
        }
        pt.dump()
    }
}

/// Anything that can index the page table: a virtual address in baseline mode,
/// a masked address in Oreo mode.
pub trait TransKey: Copy {
    fn key(self) -> u64;
}

impl TransKey for VirtAddr {
    fn key(self) -> u64 {
        self.0
    }
}

impl TransKey for MaskedAddr {
    fn key(self) -> u64 {
        self.0
    }
}

pub fn trans<K: TransKey>(x: K, pt: &PageTable) -> Option<PhysAddr> {
    let k = x.key();
    pt.walk(k).leaf.map(|p| PhysAddr((p.ppn << PAGE_SHIFT) | (k & (PAGE_SIZE - 1))))
}

pub fn ptw<K: TransKey>(x: K, pt: &PageTable) -> Vec<PhysAddr> {
    pt.walk(x.key()).ptes
}

/// The stored offset for `w`'s page, widened back to its bit positions.
pub fn offset_lookup(w: MaskedAddr, pt: &PageTable, regions: &[RandRegion]) -> Option<u64> {
    let leaf = pt.walk(w.0).leaf?;
    let lo = classify(w.as_virt(), regions).map_or(0, |r| r.protected_lo());
    Some(decode_offset(leaf.offset, lo))
}

/// Leaf entries for `layout` under `mode`.
pub fn leaves_for(layout: &Layout, mode: Mode) -> Result<Vec<LeafSpec>, MemError> {
    layout.validate()?;
    let regions = layout.regions();
    let mut leaves = Vec::new();
    for p in layout.pages() {
        let (key_page, offset) = match mode {
            Mode::Baseline => (p.vpage.0, 0),
            Mode::Oreo => {
                let bits = oblivious_bits(p.vpage, &regions);
                let lo = classify(p.vpage, &regions).map_or(0, |r| r.protected_lo());
                let width = OFFSET_FIELD_BITS;
                let field = encode_offset(bits, lo, width).ok_or(MemError::OffsetTooWide {
                    page: p.vpage.0,
                    field: bits >> lo,
                    width,
                })?;
                (virt2mask(p.vpage, &regions).0, field)
            }
        };
        leaves.push(LeafSpec { key_page, ppn: p.ppage.0 >> PAGE_SHIFT, perms: p.perms, offset });
    }
    let mut keys: Vec<u64> = leaves.iter().map(|l| l.key_page).collect();
    keys.sort_unstable();
    if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
        return Err(MemError::KeyCollision { page: w[0], mode });
    }
    Ok(leaves)
}

pub fn build_page_table(layout: &Layout, mode: Mode, cfg: PtConfig) -> Result<PageTable, MemError> {
    PageTable::from_leaves(cfg, PT_BASE, leaves_for(layout, mode)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSegment {
    pub pbase: PhysAddr,
    pub insts: Vec<Inst>,
}

impl CodeSegment {
    pub fn end(&self) -> u64 {
        self.pbase.0 + self.insts.len() as u64 * INST_BYTES
    }
}

/// Program memory, data memory and page table.
///
/// Code and page table are read-only after construction; data is zero-filled and
/// only changes through committed stores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhysMem {
    pub code: Vec<CodeSegment>,
    pub data: BTreeMap<u64, u64>,
    pub pt: PageTable,
    pub mode: Mode,
    pub regions: Vec<RandRegion>,
}

impl PhysMem {
    pub fn build(layout: &Layout, mode: Mode, cfg: PtConfig, code: Vec<CodeSegment>) -> Result<Self, MemError> {
        let pt = build_page_table(layout, mode, cfg)?;
        let (pt_lo, pt_hi) = pt.span();
        let mut ranges: Vec<(u64, u64, String)> =
            code.iter().map(|c| (c.pbase.0, c.end(), format!("code at {}", c.pbase))).collect();
        ranges.push((pt_lo.0, pt_hi.0, "page table".into()));
        for p in layout.pages() {
            let end = p.ppage.0 + PAGE_SIZE;
            if p.ppage.0 < pt_hi.0 && pt_lo.0 < end {
                return Err(MemError::Overlap(format!("page {} maps the page table", p.vpage)));
            }
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(MemError::Overlap(format!("{} and {}", w[0].2, w[1].2)));
            }
        }
        Ok(Self { code, data: BTreeMap::new(), pt, mode, regions: layout.regions() })
    }

    pub fn fetch(&self, paddr: PhysAddr) -> Option<Inst> {
        if !paddr.0.is_multiple_of(INST_BYTES) {
            return None;
        }
        self.code
            .iter()
            .find(|c| c.pbase.0 <= paddr.0 && paddr.0 < c.end())
            .map(|c| c.insts[((paddr.0 - c.pbase.0) / INST_BYTES) as usize])
    }

    pub fn read_word(&self, paddr: PhysAddr) -> u64 {
        self.data.get(&(paddr.0 & !7)).copied().unwrap_or(0)
    }

    pub fn write_word(&mut self, paddr: PhysAddr, value: u64) {
        self.data.insert(paddr.0 & !7, value);
    }
}
