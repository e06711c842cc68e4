//! ASLR layouts: the secret partial map from virtual to physical addresses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{check_disjoint, AddrError, PhysAddr, RandRegion, VirtAddr, PAGE_SIZE};

pub const DEFAULT_CODE_PBASE: PhysAddr = PhysAddr(0x0040_0000);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("content of {len:#x} bytes does not fit a subregion of {subregion_len:#x} bytes")]
    TooLarge { len: u64, subregion_len: u64 },
    #[error("subregion index {index} out of range (region has {count})")]
    BadIndex { index: u64, count: u64 },
    #[error("mappings overlap: {0}")]
    Overlap(String),
    #[error("misaligned mapping: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Addr(#[from] AddrError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
    /// Only accessible in kernel mode.
    pub privileged: bool,
}

impl Perms {
    pub const KERNEL_RX: Perms = Perms { read: true, write: false, exec: true, privileged: true };
    pub const KERNEL_RW: Perms = Perms { read: true, write: true, exec: false, privileged: true };
    pub const USER_RX: Perms = Perms { read: true, write: false, exec: true, privileged: false };
    pub const USER_RW: Perms = Perms { read: true, write: true, exec: false, privileged: false };
    pub const USER_RWX: Perms = Perms { read: true, write: true, exec: true, privileged: false };
    /// Permissions of interior page-table entries.
    pub const TABLE: Perms = Perms { read: true, write: true, exec: true, privileged: false };

    pub fn bits(self) -> u8 {
        (self.read as u8) | (self.write as u8) << 1 | (self.exec as u8) << 2 | (self.privileged as u8) << 3
    }

    pub fn render(self) -> String {
        let f = |b: bool, c: char| if b { c } else { '-' };
        [f(self.read, 'r'), f(self.write, 'w'), f(self.exec, 'x'), f(self.privileged, 'p')].iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// All content shares one offset.
    Coarse { offset: u64 },
    /// Page `p` of the content sits at `offsets[p]`.
    PerPage { offsets: Vec<u64> },
}

/// Content placed inside a randomization region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMapping {
    pub region: RandRegion,
    pub placement: Placement,
    /// Byte position of the content within its subregion.
    pub inner: u64,
    /// Mapped length in bytes, a multiple of the page size.
    pub extent: u64,
    pub pbase: PhysAddr,
    pub perms: Perms,
}

/// Content at a fixed, non-randomized virtual address.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMapping {
    pub vstart: VirtAddr,
    pub len: u64,
    pub pbase: PhysAddr,
    pub perms: Perms,
}

/// One mapped virtual page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageMap {
    pub vpage: VirtAddr,
    pub ppage: PhysAddr,
    pub perms: Perms,
    /// Index into [`Layout::randomized`] for pages inside a region.
    pub region: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub randomized: Vec<RegionMapping>,
    pub fixed: Vec<FixedMapping>,
}

impl RegionMapping {
    pub fn pages(&self) -> u64 {
        self.extent / PAGE_SIZE
    }

    fn page_offset(&self, page: u64) -> u64 {
        match &self.placement {
            Placement::Coarse { offset } => *offset,
            Placement::PerPage { offsets } => offsets[page as usize],
        }
    }

    /// Virtual address of content byte `r`.
    pub fn vaddr_of(&self, r: u64) -> VirtAddr {
        let page = r / PAGE_SIZE;
        VirtAddr(self.region.start().0 + self.page_offset(page) + self.inner + r)
    }

    /// Start of the valid content (the randomized entry address).
    pub fn valid_start(&self) -> VirtAddr {
        self.vaddr_of(0)
    }

    /// The masked image of content byte `r`, independent of the placement.
    pub fn masked_of(&self, r: u64) -> VirtAddr {
        VirtAddr(self.region.start().0 + self.inner + r)
    }

    fn query(&self, v: VirtAddr) -> Option<PhysAddr> {
        let rel = v.0.checked_sub(self.region.start().0)?;
        if !self.region.contains(v) {
            return None;
        }
        let within = rel % self.region.subregion_len();
        let r = within.checked_sub(self.inner)?;
        if r >= self.extent {
            return None;
        }
        let page = r / PAGE_SIZE;
        (rel - within == self.page_offset(page)).then(|| PhysAddr(self.pbase.0 + r))
    }

    fn check(&self) -> Result<(), LayoutError> {
        let r = &self.region;
        if self.extent == 0 || !self.extent.is_multiple_of(PAGE_SIZE) || !self.inner.is_multiple_of(PAGE_SIZE) {
            return Err(LayoutError::Misaligned(format!(
                "inner {:#x} and extent {:#x} must be page multiples",
                self.inner, self.extent
            )));
        }
        if !self.pbase.0.is_multiple_of(PAGE_SIZE) {
            return Err(LayoutError::Misaligned(format!("physical base {}", self.pbase)));
        }
        if self.inner + self.extent > r.subregion_len() {
            return Err(LayoutError::TooLarge { len: self.inner + self.extent, subregion_len: r.subregion_len() });
        }
        let check_offset = |o: u64| -> Result<(), LayoutError> {
            r.validate_offset(o)?;
            if o / r.subregion_len() >= r.subregions() {
                return Err(LayoutError::BadIndex { index: o / r.subregion_len(), count: r.subregions() });
            }
            Ok(())
        };
        match &self.placement {
            Placement::Coarse { offset } => check_offset(*offset)?,
            Placement::PerPage { offsets } => {
                if offsets.len() as u64 != self.pages() {
                    return Err(LayoutError::Misaligned(format!(
                        "{} page offsets for {} pages",
                        offsets.len(),
                        self.pages()
                    )));
                }
                for &o in offsets {
                    check_offset(o)?;
                }
            }
        }
        Ok(())
    }
}

impl Layout {
    pub fn regions(&self) -> Vec<RandRegion> {
        let mut out: Vec<RandRegion> = Vec::new();
        for m in &self.randomized {
            if !out.contains(&m.region) {
                out.push(m.region);
            }
        }
        out
    }

    /// The layout function: the physical address of `v`, or nothing when unmapped.
    pub fn query(&self, v: VirtAddr) -> Option<PhysAddr> {
        self.query_perms(v).map(|(p, _)| p)
    }

    pub fn query_perms(&self, v: VirtAddr) -> Option<(PhysAddr, Perms)> {
        for m in &self.randomized {
            if let Some(p) = m.query(v) {
                return Some((p, m.perms));
            }
        }
        self.fixed.iter().find_map(|f| {
            let d = v.0.checked_sub(f.vstart.0)?;
            (d < f.len).then(|| (PhysAddr(f.pbase.0 + d), f.perms))
        })
    }

    /// Coarse offset of randomized mapping `i`.
    pub fn offset(&self, i: usize) -> Option<u64> {
        match &self.randomized.get(i)?.placement {
            Placement::Coarse { offset } => Some(*offset),
            Placement::PerPage { .. } => None,
        }
    }

    pub fn valid_start(&self, i: usize) -> VirtAddr {
        self.randomized[i].valid_start()
    }

    /// Every mapped page, randomized mappings first.
    pub fn pages(&self) -> Vec<PageMap> {
        let mut out = Vec::new();
        for (i, m) in self.randomized.iter().enumerate() {
            for p in 0..m.pages() {
                out.push(PageMap {
                    vpage: m.vaddr_of(p * PAGE_SIZE),
                    ppage: PhysAddr(m.pbase.0 + p * PAGE_SIZE),
                    perms: m.perms,
                    region: Some(i),
                });
            }
        }
        for f in &self.fixed {
            for p in 0..f.len.div_ceil(PAGE_SIZE) {
                out.push(PageMap {
                    vpage: VirtAddr(f.vstart.0 + p * PAGE_SIZE),
                    ppage: PhysAddr(f.pbase.0 + p * PAGE_SIZE),
                    perms: f.perms,
                    region: None,
                });
            }
        }
        out
    }

    /// Checks offsets, alignment, and that no two pages collide either virtually or
    /// in their masked images.
    pub fn validate(&self) -> Result<(), LayoutError> {
        check_disjoint(&self.regions())?;
        for m in &self.randomized {
            m.check()?;
        }
        let regions = self.regions();
        for f in &self.fixed {
            if f.vstart.0 % PAGE_SIZE != 0 || f.pbase.0 % PAGE_SIZE != 0 || f.len == 0 {
                return Err(LayoutError::Misaligned(format!("fixed mapping at {}", f.vstart)));
            }
            let end = f.vstart.0.checked_add(f.len).ok_or_else(|| LayoutError::Overlap("wraps".into()))?;
            if regions.iter().any(|r| f.vstart.0 < r.end().0 && r.start().0 < end) {
                return Err(LayoutError::Overlap(format!("fixed mapping at {} enters a region", f.vstart)));
            }
        }
        let pages = self.pages();
        let mut virt: Vec<u64> = pages.iter().map(|p| p.vpage.0).collect();
        let mut masked: Vec<u64> = pages
            .iter()
            .map(|p| crate::addr::virt2mask(p.vpage, &regions).0)
            .collect();
        let mut phys: Vec<u64> = pages.iter().map(|p| p.ppage.0).collect();
        for (name, list) in [("virtual", &mut virt), ("masked", &mut masked), ("physical", &mut phys)] {
            list.sort_unstable();
            if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
                return Err(LayoutError::Overlap(format!("{name} page {:#x} mapped twice", w[0])));
            }
        }
        Ok(())
    }
}

/// A recipe for the layouts of one program inside one region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub region: RandRegion,
    pub program_len: u64,
    pub inner: u64,
    pub pbase: PhysAddr,
    pub perms: Perms,
    pub fixed: Vec<FixedMapping>,
}

impl LayoutSpec {
    pub fn new(region: RandRegion, program_len: u64) -> Self {
        Self { region, program_len, inner: 0, pbase: DEFAULT_CODE_PBASE, perms: Perms::KERNEL_RX, fixed: Vec::new() }
    }

    pub fn extent(&self) -> u64 {
        self.program_len.div_ceil(PAGE_SIZE).max(1) * PAGE_SIZE
    }

    pub fn count(&self) -> u64 {
        self.region.subregions()
    }

    fn check_fit(&self) -> Result<(), LayoutError> {
        let need = self.inner + self.extent();
        if need > self.region.subregion_len() {
            return Err(LayoutError::TooLarge { len: need, subregion_len: self.region.subregion_len() });
        }
        Ok(())
    }

    fn build(&self, placement: Placement) -> Result<Layout, LayoutError> {
        self.check_fit()?;
        let layout = Layout {
            randomized: vec![RegionMapping {
                region: self.region,
                placement,
                inner: self.inner,
                extent: self.extent(),
                pbase: self.pbase,
                perms: self.perms,
            }],
            fixed: self.fixed.clone(),
        };
        layout.validate()?;
        Ok(layout)
    }

    /// The layout whose content sits in subregion `index`.
    pub fn at_index(&self, index: u64) -> Result<Layout, LayoutError> {
        if index >= self.count() {
            return Err(LayoutError::BadIndex { index, count: self.count() });
        }
        self.build(Placement::Coarse { offset: self.region.offset_of(index) })
    }

    pub fn enumerate(&self) -> Result<LayoutSet, LayoutError> {
        let layouts = (0..self.count()).map(|i| self.at_index(i)).collect::<Result<Vec<_>, _>>()?;
        Ok(LayoutSet { region: self.region, n: self.count(), layouts })
    }

    pub fn sample_index(&self, seed: u64) -> u64 {
        ChaCha8Rng::seed_from_u64(seed).gen_range(0..self.count())
    }

    pub fn sample(&self, seed: u64) -> Result<Layout, LayoutError> {
        self.at_index(self.sample_index(seed))
    }

    /// Page `p` placed in subregion `indices[p]`.
    pub fn per_page(&self, indices: &[u64]) -> Result<Layout, LayoutError> {
        let pages = self.extent() / PAGE_SIZE;
        if indices.len() as u64 != pages {
            return Err(LayoutError::Misaligned(format!("{} indices for {pages} pages", indices.len())));
        }
        let mut offsets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.count() {
                return Err(LayoutError::BadIndex { index: i, count: self.count() });
            }
            offsets.push(self.region.offset_of(i));
        }
        self.build(Placement::PerPage { offsets })
    }
}

/// All layouts of one program within one region: `L_i` places it in subregion `i`.
#[derive(Clone, Debug)]
pub struct LayoutSet {
    pub region: RandRegion,
    pub n: u64,
    pub layouts: Vec<Layout>,
}

pub fn enumerate_layouts(region: &RandRegion, program_len: u64) -> Result<LayoutSet, LayoutError> {
    LayoutSpec::new(*region, program_len).enumerate()
}

pub fn sample_layout(region: &RandRegion, program_len: u64, seed: u64) -> Result<Layout, LayoutError> {
    LayoutSpec::new(*region, program_len).sample(seed)
}

pub fn query(layout: &Layout, v: VirtAddr) -> Option<PhysAddr> {
    layout.query(v)
}

/// Each of `pages` pages independently placed in a uniformly chosen subregion.
pub fn page_granularity_layout(region: &RandRegion, pages: u64, seed: u64) -> Result<Layout, LayoutError> {
    let spec = LayoutSpec::new(*region, pages * PAGE_SIZE);
    spec.check_fit()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<u64> = (0..pages).map(|_| rng.gen_range(0..region.subregions())).collect();
    spec.per_page(&indices)
}
