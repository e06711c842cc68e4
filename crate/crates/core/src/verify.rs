//! Trace equivalence relations and exhaustive non-interference sweeps over all
//! layouts of a region.

use rayon::prelude::*;
use serde::Serialize;

use crate::addr::{virt2mask, MaskedAddr, Mode, PhysAddr, RandRegion, VirtAddr, PAGE_SIZE};
use crate::layout::{FixedMapping, Layout, LayoutError, LayoutSpec, Perms};
use crate::machine::{Inst, Machine, MachineConfig, MachineError, Operand, Program, Request, RunTrace, Status};
use crate::memtable::{build_page_table, ptw, trans, MemError, PageTable, INST_BYTES};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    pub step: usize,
    pub left: String,
    pub right: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EquivalenceVerdict {
    pub holds: bool,
    pub counterexample: Option<Counterexample>,
}

impl EquivalenceVerdict {
    fn ok() -> Self {
        Self { holds: true, counterexample: None }
    }

    fn fail(step: usize, left: impl ToString, right: impl ToString) -> Self {
        Self { holds: false, counterexample: Some(Counterexample { step, left: left.to_string(), right: right.to_string() }) }
    }
}

fn show(r: Option<&Request>) -> String {
    r.map_or_else(|| "<end>".to_string(), ToString::to_string)
}

/// Pairs up the addresses of two requests of the same kind. `None` when the
/// kinds differ or a fetch has a source on one side only.
fn addr_pairs(a: &Request, b: &Request) -> Option<Vec<(VirtAddr, VirtAddr)>> {
    match (*a, *b) {
        (Request::None, Request::None) => Some(vec![]),
        (Request::Fetch { v, src }, Request::Fetch { v: w, src: s2 }) => match (src, s2) {
            (Some(x), Some(y)) => Some(vec![(v, w), (x, y)]),
            (None, None) => Some(vec![(v, w)]),
            _ => None,
        },
        (Request::Load(v), Request::Load(w)) | (Request::Store(v, _), Request::Store(w, _)) => Some(vec![(v, w)]),
        (Request::Check(v), Request::Check(w)) => Some(vec![(v, w)]),
        _ => None,
    }
}

fn compare_traces(
    a: &[Request],
    b: &[Request],
    same: impl Fn(VirtAddr, VirtAddr) -> bool,
) -> EquivalenceVerdict {
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        match addr_pairs(x, y) {
            Some(pairs) if pairs.iter().all(|&(v, w)| same(v, w)) => {}
            _ => return EquivalenceVerdict::fail(k, x, y),
        }
    }
    if a.len() != b.len() {
        let k = a.len().min(b.len());
        return EquivalenceVerdict::fail(k, show(a.get(k)), show(b.get(k)));
    }
    EquivalenceVerdict::ok()
}

/// Functional equivalence: same kinds, and each address pair is equal or maps to
/// the same physical location under the respective layouts. Store data is ignored.
pub fn func_equiv(a: &[Request], b: &[Request], la: &Layout, lb: &Layout) -> EquivalenceVerdict {
    compare_traces(a, b, |v, w| {
        v == w || {
            let p = la.query(v);
            p.is_some() && p == lb.query(w)
        }
    })
}

/// Mask equivalence: same kinds and pointwise equal masked addresses.
pub fn mask_equiv(a: &[Request], b: &[Request], regions: &[RandRegion]) -> EquivalenceVerdict {
    compare_traces(a, b, |v, w| virt2mask(v, regions) == virt2mask(w, regions))
}

/// Pointwise equality of two observation traces.
pub fn obs_equiv(a: &RunTrace, b: &RunTrace) -> EquivalenceVerdict {
    for (k, (x, y)) in a.observations.iter().zip(&b.observations).enumerate() {
        if x != y {
            return EquivalenceVerdict::fail(k, format!("{} words", x.0.len()), format!("{} words", y.0.len()));
        }
    }
    if a.observations.len() != b.observations.len() {
        let k = a.observations.len().min(b.observations.len());
        return EquivalenceVerdict::fail(k, format!("{:?}", a.status), format!("{:?}", b.status));
    }
    EquivalenceVerdict::ok()
}

/// Agreement of translation and walk for every instruction slot in `[start, start + len)`.
pub fn tables_agree(a: &PageTable, b: &PageTable, start: u64, len: u64) -> Option<u64> {
    (0..len.div_ceil(INST_BYTES)).map(|i| start + i * INST_BYTES).find(|&w| {
        let w = MaskedAddr(w);
        trans(w, a) != trans(w, b) || ptw(w, a) != ptw(w, b)
    })
}

/// Public equivalence of two machine states: same program, same observation,
/// and page tables that agree on the masked program range.
pub fn pub_equiv(a: &Machine, b: &Machine, start: MaskedAddr, len: u64) -> EquivalenceVerdict {
    if a.mem().code != b.mem().code {
        return EquivalenceVerdict::fail(0, "program", "program");
    }
    if a.observe() != b.observe() {
        return EquivalenceVerdict::fail(0, "observation", "observation");
    }
    if let Some(w) = tables_agree(&a.mem().pt, &b.mem().pt, start.0, len) {
        return EquivalenceVerdict::fail(0, format!("page table at {w:#x}"), format!("page table at {w:#x}"));
    }
    EquivalenceVerdict::ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairFinding {
    pub left: u64,
    pub right: u64,
    pub step: usize,
    pub detail: String,
}

/// Everything needed to replay a finding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplayBundle {
    pub program: String,
    pub region: RandRegion,
    pub mode: Mode,
    pub budget: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NiReport {
    pub program: String,
    pub mode: Mode,
    pub layouts: u64,
    pub pairs_checked: usize,
    pub precondition_violations: Vec<PairFinding>,
    /// Pairs whose observation traces differ. Counterexamples in Oreo mode;
    /// expected in baseline mode.
    pub distinguishable: Vec<PairFinding>,
    pub replay: ReplayBundle,
}

impl NiReport {
    /// Oreo-mode distinguishable pairs that satisfy the functional-equivalence precondition.
    pub fn counterexamples(&self) -> usize {
        match self.mode {
            Mode::Oreo => self.distinguishable.iter().filter(|d| !self.violates_precondition(d.left, d.right)).count(),
            Mode::Baseline => 0,
        }
    }

    pub fn violates_precondition(&self, left: u64, right: u64) -> bool {
        self.precondition_violations.iter().any(|p| (p.left, p.right) == (left, right))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// Run `program` under every layout of `spec`, keeping requests and observations.
pub fn run_all(
    program: &Program,
    spec: &LayoutSpec,
    mode: Mode,
    budget: u64,
    cfg: &MachineConfig,
) -> Result<(Vec<Layout>, Vec<RunTrace>), VerifyError> {
    let layouts = spec.enumerate()?.layouts;
    let cfg = cfg.observing();
    let traces = layouts
        .par_iter()
        .map(|l| Ok(Machine::init(program, l, mode, &cfg)?.run_trace(budget)))
        .collect::<Result<Vec<_>, VerifyError>>()?;
    Ok((layouts, traces))
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Check observation-trace equality over all layout pairs. Runs that crash are
/// compared on their common prefix and must crash at the same step.
pub fn check_noninterference(
    program: &Program,
    spec: &LayoutSpec,
    mode: Mode,
    budget: u64,
    cfg: &MachineConfig,
) -> Result<NiReport, VerifyError> {
    let (layouts, traces) = run_all(program, spec, mode, budget, cfg)?;
    let ps = pairs(layouts.len());
    let results: Vec<(Option<PairFinding>, Option<PairFinding>)> = ps
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&traces[i], &traces[j]);
            let pre = func_equiv(&a.requests, &b.requests, &layouts[i], &layouts[j]);
            let pre = pre.counterexample.map(|c| PairFinding {
                left: i as u64,
                right: j as u64,
                step: c.step,
                detail: format!("{} vs {}", c.left, c.right),
            });
            let crash_mismatch = a.crash_step() != b.crash_step();
            let obs = obs_equiv(a, b);
            let dist = match obs.counterexample {
                Some(c) if !(crash_mismatch && c.step == a.observations.len().min(b.observations.len())) => {
                    Some(PairFinding { left: i as u64, right: j as u64, step: c.step, detail: "observation".into() })
                }
                _ if crash_mismatch => Some(PairFinding {
                    left: i as u64,
                    right: j as u64,
                    step: a.observations.len().min(b.observations.len()),
                    detail: format!("crash steps {:?} vs {:?}", a.crash_step(), b.crash_step()),
                }),
                _ => None,
            };
            (pre, dist)
        })
        .collect();
    let (pre, dist): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(NiReport {
        program: program.to_string(),
        mode,
        layouts: layouts.len() as u64,
        pairs_checked: ps.len(),
        precondition_violations: pre.into_iter().flatten().collect(),
        distinguishable: dist.into_iter().flatten().collect(),
        replay: ReplayBundle { program: program.to_string(), region: spec.region, mode, budget },
    })
}

/// Every functionally equivalent pair must also be mask equivalent.
pub fn check_mask_equiv(layouts: &[Layout], traces: &[RunTrace]) -> Vec<PairFinding> {
    let regions = layouts.first().map(Layout::regions).unwrap_or_default();
    pairs(layouts.len())
        .into_iter()
        .filter_map(|(i, j)| {
            let (a, b) = (&traces[i].requests, &traces[j].requests);
            if !func_equiv(a, b, &layouts[i], &layouts[j]).holds {
                return None;
            }
            mask_equiv(a, b, &regions).counterexample.map(|c| PairFinding {
                left: i as u64,
                right: j as u64,
                step: c.step,
                detail: format!("{} vs {}", c.left, c.right),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Lemma2Report {
    pub layouts: u64,
    pub pairs_checked: usize,
    pub addresses_per_pair: u64,
    pub counterexamples: Vec<PairFinding>,
}

impl Lemma2Report {
    pub fn holds(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Translation and walk agreement across all layout pairs, over the masked
/// image of the program region, for Oreo page tables.
pub fn check_lemma2(spec: &LayoutSpec, cfg: &MachineConfig) -> Result<Lemma2Report, VerifyError> {
    check_lemma2_with(spec, |l| build_page_table(l, Mode::Oreo, cfg.pt))
}

/// [`check_lemma2`] with a caller-supplied table builder.
pub fn check_lemma2_with(
    spec: &LayoutSpec,
    build: impl Fn(&Layout) -> Result<PageTable, MemError> + Sync,
) -> Result<Lemma2Report, VerifyError> {
    let layouts = spec.enumerate()?.layouts;
    let tables = layouts.par_iter().map(&build).collect::<Result<Vec<_>, _>>()?;
    let start = spec.region.start().0 + spec.inner;
    let len = spec.extent();
    let ps = pairs(tables.len());
    let counterexamples = ps
        .par_iter()
        .filter_map(|&(i, j)| {
            tables_agree(&tables[i], &tables[j], start, len).map(|w| PairFinding {
                left: i as u64,
                right: j as u64,
                step: 0,
                detail: format!("masked address {w:#x}"),
            })
        })
        .collect();
    Ok(Lemma2Report {
        layouts: layouts.len() as u64,
        pairs_checked: ps.len(),
        addresses_per_pair: len / INST_BYTES,
        counterexamples,
    })
}

/// Region used for the exhaustive checks: eight 64 KB subregions at the top of
/// the kernel half.
pub fn toy_region(subregions: u64) -> RandRegion {
    RandRegion::with_subregions(0, VirtAddr(TOY_START), 16, subregions).expect("toy region is well formed")
}

pub const TOY_START: u64 = 0xffff_ffff_c000_0000;
/// Fixed kernel data page shared by all layouts.
pub const TOY_DATA: u64 = 0xffff_ffff_8000_0000;
pub const TOY_DATA_P: u64 = 0x0100_0000;

/// The layout recipe for the probe suite: a full subregion of kernel text and
/// one fixed data page.
pub fn toy_spec(region: RandRegion) -> LayoutSpec {
    let mut spec = LayoutSpec::new(region, region.subregion_len());
    spec.perms = Perms::KERNEL_RX;
    spec.fixed.push(FixedMapping {
        vstart: VirtAddr(TOY_DATA),
        len: PAGE_SIZE,
        pbase: PhysAddr(TOY_DATA_P),
        perms: Perms::KERNEL_RW,
    });
    spec
}

const SLOTS_PER_PAGE: usize = (PAGE_SIZE / INST_BYTES) as usize;

fn slot(page: usize, i: usize) -> usize {
    page * SLOTS_PER_PAGE + i
}

fn rel(from: usize, to: usize) -> i64 {
    to as i64 - from as i64
}

/// Nops with a direct jump at the start of each page to the next, halting on the last.
fn linear_fetch_walk(pages: usize) -> Program {
    let mut insts = vec![Inst::Nop; pages * SLOTS_PER_PAGE];
    for p in 0..pages {
        let at = slot(p, 2);
        insts[at] = if p + 1 == pages { Inst::Halt } else { Inst::DirectBranch(rel(at, slot(p + 1, 0))) };
    }
    Program::new(insts)
}

/// Loads through entry-relative pointers into every page, plus a store and
/// reload on the fixed data page.
fn load_sweep(pages: usize) -> Program {
    let mut p = Program::new(Vec::new());
    for r in 1..=8u8 {
        let page = (r as usize * pages / 8).min(pages - 1) as u64;
        p = p.with_preload(r, Operand::Base(page * PAGE_SIZE + 0x40 * r as u64));
        p.insts.push(Inst::Load(9, r));
    }
    p = p.with_preload(10, Operand::Const(TOY_DATA + 0x80));
    p.insts.extend([Inst::Store(10, 9), Inst::Load(11, 10), Inst::Load(12, 1), Inst::Halt]);
    p
}

/// Conditional branches with mixed outcomes, repeated so the predictor trains,
/// then an indirect jump to a later page.
fn branch_ladder(pages: usize) -> Program {
    let mut insts = vec![Inst::Nop; pages.min(4) * SLOTS_PER_PAGE];
    let mut at = 0;
    for round in 0..3 {
        for (k, reg) in [1u8, 2, 3, 2, 1].into_iter().enumerate() {
            insts[at] = Inst::CondBranch(2 + (k as i64 % 2), reg);
            at += 2 + k % 2;
        }
        insts[at] = Inst::MovImm(2, round + 1);
        at += 1;
    }
    insts[at] = Inst::IndirectJump(5);
    let target = slot(pages.min(4) - 1, 16);
    insts[target] = Inst::Load(6, 4);
    insts[target + 1] = Inst::DirectBranch(rel(target + 1, slot(1, 0)));
    insts[slot(1, 0)] = Inst::Halt;
    let mut p = Program::new(insts);
    p = p.with_preload(1, Operand::Const(1));
    p = p.with_preload(3, Operand::Const(0));
    p = p.with_preload(4, Operand::Base(0x100));
    p.with_preload(5, Operand::Base((target as u64) * INST_BYTES))
}

/// Loads at page stride across the whole content, each missing the TLB.
fn strided_loads(pages: usize) -> Program {
    let mut p = Program::new(Vec::new());
    for k in 0..pages.min(14) {
        let r = 1 + k as u8;
        p = p.with_preload(r, Operand::Base(k as u64 * PAGE_SIZE + 8 * k as u64));
        p.insts.push(Inst::Load(15, r));
        p.insts.push(Inst::Prefetch(r));
    }
    p.insts.push(Inst::Halt);
    p
}

/// A mispredicted branch guarding loads through a pointer, a constant address
/// in another subregion, and an indirect jump.
fn transient_gadget(region: &RandRegion) -> Program {
    let foreign = region.subregion_base(region.subregions() - 1).0 + 3 * PAGE_SIZE + 0x10;
    let insts = vec![
        Inst::CondBranch(6, 1),
        Inst::Load(7, 2),
        Inst::Load(8, 3),
        Inst::Store(4, 7),
        Inst::IndirectJump(5),
        Inst::Nop,
        Inst::Halt,
    ];
    let mut p = Program::new(insts);
    p = p.with_preload(1, Operand::Const(1));
    p = p.with_preload(2, Operand::Base(2 * PAGE_SIZE));
    p = p.with_preload(3, Operand::Const(foreign));
    p = p.with_preload(4, Operand::Const(TOY_DATA));
    p.with_preload(5, Operand::Base(5 * PAGE_SIZE))
}

pub const PROBE_NAMES: [&str; 5] = ["linear_fetch_walk", "load_sweep", "branch_ladder", "strided_loads", "transient_gadget"];

/// The five probe programs for `spec`, each paired with its name.
pub fn probe_suite(spec: &LayoutSpec) -> Vec<(&'static str, Program)> {
    let pages = (spec.extent() / PAGE_SIZE) as usize;
    vec![
        (PROBE_NAMES[0], linear_fetch_walk(pages)),
        (PROBE_NAMES[1], load_sweep(pages)),
        (PROBE_NAMES[2], branch_ladder(pages)),
        (PROBE_NAMES[3], strided_loads(pages)),
        (PROBE_NAMES[4], transient_gadget(&spec.region)),
    ]
}

pub const PROBE_BUDGET: u64 = 20_000;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub mode: Mode,
    pub programs: Vec<NiReport>,
    pub mask_equiv_violations: usize,
}

impl SuiteReport {
    pub fn counterexamples(&self) -> usize {
        self.programs.iter().map(NiReport::counterexamples).sum()
    }

    /// Layout pairs distinguishable by at least one probe program.
    pub fn distinguishable_pairs(&self) -> usize {
        let mut v: Vec<(u64, u64)> =
            self.programs.iter().flat_map(|r| r.distinguishable.iter().map(|f| (f.left, f.right))).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    pub fn precondition_violations(&self) -> usize {
        self.programs.iter().map(|r| r.precondition_violations.len()).sum()
    }

    pub fn pairs(&self) -> usize {
        self.programs.first().map_or(0, |r| r.pairs_checked)
    }
}

/// Non-interference plus the mask-equivalence check over the whole probe suite.
pub fn check_suite(spec: &LayoutSpec, mode: Mode, cfg: &MachineConfig) -> Result<SuiteReport, VerifyError> {
    let mut programs = Vec::new();
    let mut mask_violations = 0;
    for (_, p) in probe_suite(spec) {
        let (layouts, traces) = run_all(&p, spec, mode, PROBE_BUDGET, cfg)?;
        mask_violations += check_mask_equiv(&layouts, &traces).len();
        programs.push(check_noninterference(&p, spec, mode, PROBE_BUDGET, cfg)?);
    }
    Ok(SuiteReport { mode, programs, mask_equiv_violations: mask_violations })
}

/// Whether every run of the probe suite halts.
pub fn suite_halts(spec: &LayoutSpec, mode: Mode, cfg: &MachineConfig) -> Result<bool, VerifyError> {
    for (_, p) in probe_suite(spec) {
        let (_, traces) = run_all(&p, spec, mode, PROBE_BUDGET, cfg)?;
        if traces.iter().any(|t| t.status != Status::Halted) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn func_equiv_basics() {
        let spec = toy_spec(toy_region(8));
        let (l0, l3) = (spec.at_index(0).unwrap(), spec.at_index(3).unwrap());
        let a = vec![Request::Fetch { v: l0.valid_start(0), src: None }, Request::Load(VirtAddr(7))];
        let b = vec![Request::Fetch { v: l3.valid_start(0), src: None }, Request::Load(VirtAddr(7))];
        assert!(func_equiv(&a, &a, &l0, &l3).holds);
        assert!(func_equiv(&a, &b, &l0, &l3).holds);
        let c = vec![a[0], Request::Store(VirtAddr(7), 1)];
        assert_eq!(func_equiv(&a, &c, &l0, &l0).counterexample.unwrap().step, 1);
        assert_eq!(func_equiv(&a, &a[..1], &l0, &l0).counterexample.unwrap().step, 1);
    }

    #[test]
    fn mask_equiv_basics() {
        let r = toy_region(8);
        let v = r.subregion_base(2).0 + 0x44;
        let a = vec![Request::Load(VirtAddr(v))];
        let b = vec![Request::Load(VirtAddr(v ^ (3 << 16)))];
        let c = vec![Request::Load(VirtAddr(v ^ 0x8))];
        assert!(mask_equiv(&a, &b, &[r]).holds);
        assert!(!mask_equiv(&a, &c, &[r]).holds);
    }

    #[test]
    fn fresh_oreo_states_are_public_equivalent() {
        let spec = toy_spec(toy_region(8));
        let p = linear_fetch_walk(16);
        let w = MaskedAddr(spec.region.start().0);
        let cfg = MachineConfig::default();
        let m = |i, mode| Machine::init(&p, &spec.at_index(i).unwrap(), mode, &cfg).unwrap();
        assert!(pub_equiv(&m(0, Mode::Oreo), &m(5, Mode::Oreo), w, spec.extent()).holds);
        assert!(!pub_equiv(&m(0, Mode::Baseline), &m(5, Mode::Baseline), w, spec.extent()).holds);
    }

    #[test]
    fn public_equivalence_is_preserved_step_by_step() {
        let spec = toy_spec(toy_region(8));
        let w = MaskedAddr(spec.region.start().0);
        let cfg = MachineConfig::default();
        for (_, p) in probe_suite(&spec) {
            let mut a = Machine::init(&p, &spec.at_index(1).unwrap(), Mode::Oreo, &cfg).unwrap();
            let mut b = Machine::init(&p, &spec.at_index(6).unwrap(), Mode::Oreo, &cfg).unwrap();
            for _ in 0..60 {
                let (ra, rb) = (a.step(), b.step());
                assert_eq!(ra.is_some(), rb.is_some());
                assert!(mask_equiv(&ra.into_iter().collect::<Vec<_>>(), &rb.into_iter().collect::<Vec<_>>(), &[spec.region]).holds);
                assert!(pub_equiv(&a, &b, w, PAGE_SIZE).holds);
            }
        }
    }

    #[test]
    fn probe_suite_halts_everywhere() {
        let spec = toy_spec(toy_region(8));
        for mode in Mode::ALL {
            assert!(suite_halts(&spec, mode, &MachineConfig::default()).unwrap());
        }
    }

    #[test]
    fn single_layout_sweep_is_vacuous() {
        let spec = toy_spec(toy_region(1));
        for mode in Mode::ALL {
            let r = check_noninterference(&load_sweep(16), &spec, mode, 1000, &MachineConfig::default()).unwrap();
            assert_eq!(r.pairs_checked, 0);
            assert!(r.distinguishable.is_empty());
        }
    }
}
