//! Attacker/victim scenarios that try to recover the planted subregion index.
//!
//! Every scenario is mode-agnostic: the same programs and schedule run under
//! both modes. Phases run one after another on a shared μ.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::addr::{kernel_region, Mode, PhysAddr, RandRegion, VirtAddr, PAGE_SIZE};
use crate::layout::{FixedMapping, Layout, LayoutError, LayoutSpec, Perms};
use crate::machine::{
    assemble, Inst, MachineConfig, MachineError, Privilege, Program, Regs, Request, RunTrace, Session, Status,
    NUM_REGS,
};
use crate::memtable::{CodeSegment, INST_BYTES};
use crate::uarch::{Structure, TraceEvent};

pub const USER_CODE_V: u64 = 0x0000_0000_0040_0000;
pub const USER_CODE_P: u64 = 0x0080_0000;
pub const USER_BUF_V: u64 = 0x0000_0000_1000_0000;
pub const USER_BUF_P: u64 = 0x0100_0000;
pub const KDATA_V: u64 = 0xffff_ffff_8000_0000;
pub const KDATA_P: u64 = 0x0200_0000;

const PHASE_BUDGET: u64 = 200_000;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("phase {phase} ended with {status:?}")]
    Phase { phase: String, status: Status },
    #[error("unknown attack {0:?}; available: {1}")]
    Unknown(String, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Leak,
    NoLeak,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Deviations {
    pub tlb: usize,
    pub cache: usize,
    pub bp: usize,
    pub mmu_ptw: usize,
}

impl Deviations {
    pub fn get(&self, s: Structure) -> usize {
        match s {
            Structure::Tlb => self.tlb,
            Structure::Cache => self.cache,
            Structure::Bp => self.bp,
            Structure::MmuPtw => self.mmu_ptw,
        }
    }

    pub fn total(&self) -> usize {
        self.tlb + self.cache + self.bp + self.mmu_ptw
    }
}

/// Per-structure count of positions where two event streams differ.
pub fn trace_deviations(a: &[TraceEvent], b: &[TraceEvent]) -> Deviations {
    let count = |s: Structure| {
        let x: Vec<&Vec<u64>> = a.iter().filter(|e| e.structure == s).map(|e| &e.input).collect();
        let y: Vec<&Vec<u64>> = b.iter().filter(|e| e.structure == s).map(|e| &e.input).collect();
        let common = x.iter().zip(&y).filter(|(p, q)| p != q).count();
        common + x.len().abs_diff(y.len())
    };
    Deviations {
        tlb: count(Structure::Tlb),
        cache: count(Structure::Cache),
        bp: count(Structure::Bp),
        mmu_ptw: count(Structure::MmuPtw),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeRow {
    pub index: u64,
    #[serde(with = "crate::addr::hex_u64")]
    pub addr: u64,
    pub measurement: i64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub mode: Mode,
    pub candidates: u64,
    pub planted: u64,
    pub recovered: Option<u64>,
    /// Layout `planted + 1 mod N`, decoded to rule out coincidental matches.
    pub control: u64,
    pub control_recovered: Option<u64>,
    pub verdict: Verdict,
    pub rows: Vec<ProbeRow>,
    pub deviations: Option<Deviations>,
}

impl AttackReport {
    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "addr", "measurement", "tlb_dev", "cache_dev", "bp_dev", "mmu_ptw_dev"])
            .expect("in-memory write");
        let d = self.deviations.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                format!("{:#x}", r.addr),
                r.measurement.to_string(),
                d.tlb.to_string(),
                d.cache.to_string(),
                d.bp.to_string(),
                d.mmu_ptw.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "attack": self.attack,
            "mode": self.mode,
            "verdict": self.verdict,
            "recovered": self.recovered,
            "planted": self.planted,
            "control": self.control,
            "control_recovered": self.control_recovered,
            "deviations": self.deviations,
        })
    }

    pub fn measurements(&self) -> Vec<i64> {
        self.rows.iter().map(|r| r.measurement).collect()
    }
}

/// The index of the single smallest value, if strictly smaller than all others.
pub fn unique_min(xs: &[i64]) -> Option<u64> {
    let min = *xs.iter().min()?;
    let mut it = xs.iter().enumerate().filter(|(_, &x)| x == min);
    let (i, _) = it.next()?;
    (it.next().is_none() && xs.len() > 1).then_some(i as u64)
}

pub fn unique_max(xs: &[i64]) -> Option<u64> {
    let neg: Vec<i64> = xs.iter().map(|x| -x).collect();
    unique_min(&neg)
}

/// Kernel text in a randomized region plus fixed user code, a user buffer and a
/// kernel data page.
#[derive(Clone, Debug)]
struct Env {
    spec: LayoutSpec,
    victim: Program,
    user: Vec<Inst>,
    kdata: Vec<(u64, u64)>,
    cfg: MachineConfig,
}

impl Env {
    fn new(cfg: &MachineConfig, region: RandRegion, inner: u64, victim: Program, user_pages: u64, buf_pages: u64) -> Self {
        let mut spec = LayoutSpec::new(region, victim.len_bytes().max(INST_BYTES));
        spec.inner = inner;
        spec.perms = Perms::KERNEL_RX;
        spec.fixed = vec![
            FixedMapping {
                vstart: VirtAddr(USER_CODE_V),
                len: user_pages * PAGE_SIZE,
                pbase: PhysAddr(USER_CODE_P),
                perms: Perms::USER_RX,
            },
            FixedMapping {
                vstart: VirtAddr(USER_BUF_V),
                len: buf_pages * PAGE_SIZE,
                pbase: PhysAddr(USER_BUF_P),
                perms: Perms::USER_RW,
            },
            FixedMapping { vstart: VirtAddr(KDATA_V), len: PAGE_SIZE, pbase: PhysAddr(KDATA_P), perms: Perms::KERNEL_RW },
        ];
        let user = vec![Inst::Nop; (user_pages * PAGE_SIZE / INST_BYTES) as usize];
        Self { spec, victim, user, kdata: Vec::new(), cfg: *cfg }
    }

    fn region(&self) -> &RandRegion {
        &self.spec.region
    }

    fn candidates(&self) -> u64 {
        self.spec.count()
    }

    /// Probe address in subregion `i` at the victim's in-subregion position.
    fn probe(&self, i: u64, disp: u64) -> u64 {
        self.region().subregion_base(i).0 + self.spec.inner + disp
    }

    /// Copy `p` into user code at byte `offset`; returns its entry.
    fn place(&mut self, offset: u64, p: &Program) -> VirtAddr {
        let at = (offset / INST_BYTES) as usize;
        assert!(at + p.insts.len() <= self.user.len(), "user program overflows its mapping");
        self.user[at..at + p.insts.len()].copy_from_slice(&p.insts);
        VirtAddr(USER_CODE_V + offset)
    }

    fn layout(&self, index: u64) -> Result<Layout, AttackError> {
        Ok(self.spec.at_index(index)?)
    }

    fn session(&self, index: u64, mode: Mode) -> Result<(Session, Layout), AttackError> {
        let layout = self.layout(index)?;
        let code = vec![
            CodeSegment { pbase: layout.randomized[0].pbase, insts: self.victim.insts.clone() },
            CodeSegment { pbase: PhysAddr(USER_CODE_P), insts: self.user.clone() },
        ];
        let mut s = Session::new(&layout, mode, code, &self.cfg)?;
        for &(off, value) in &self.kdata {
            s.mem.write_word(PhysAddr(KDATA_P + off), value);
        }
        Ok((s, layout))
    }
}

fn regs(pairs: &[(u8, u64)]) -> Regs {
    let mut r = [0; NUM_REGS];
    for &(i, v) in pairs {
        r[i as usize] = v;
    }
    r
}

fn run_phase(
    s: &mut Session,
    name: &str,
    entry: VirtAddr,
    regs: Regs,
    privilege: Privilege,
    expect: fn(&Status) -> bool,
) -> Result<RunTrace, AttackError> {
    let t = s.run(entry, regs, privilege, PHASE_BUDGET);
    if !expect(&t.status) {
        return Err(AttackError::Phase { phase: name.to_string(), status: t.status });
    }
    Ok(t)
}

fn halted(s: &Status) -> bool {
    *s == Status::Halted
}

fn crashed(s: &Status) -> bool {
    matches!(s, Status::Crashed { .. })
}

fn victim_run(s: &mut Session, env: &Env, layout: &Layout, extra: &[(u8, u64)]) -> Result<RunTrace, AttackError> {
    let entry = layout.valid_start(0);
    let mut r = env.victim.regs(entry);
    for &(i, v) in extra {
        r[i as usize] = v;
    }
    run_phase(s, "victim", entry, r, Privilege::Kernel, halted)
}

fn asm(src: &str) -> Program {
    assemble(src).expect("built-in program assembles")
}

fn nop_halt() -> Program {
    asm("nop\nhalt")
}

type Experiment<'a> = dyn Fn(u64) -> Result<(Vec<ProbeRow>, Option<u64>), AttackError> + 'a;

/// Decode the planted layout and a control layout; Leak needs both to decode
/// to their own index.
fn conclude(
    attack: &str,
    mode: Mode,
    candidates: u64,
    planted: u64,
    exp: &Experiment<'_>,
) -> Result<AttackReport, AttackError> {
    let (rows, recovered) = exp(planted)?;
    let control = (planted + 1) % candidates;
    let (_, control_recovered) = exp(control)?;
    let verdict = if recovered == Some(planted) && control_recovered == Some(control) {
        Verdict::Leak
    } else {
        Verdict::NoLeak
    };
    Ok(AttackReport {
        attack: attack.to_string(),
        mode,
        candidates,
        planted,
        recovered,
        control,
        control_recovered,
        verdict,
        rows,
        deviations: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefetchSetup {
    pub region: RandRegion,
    /// Position of the victim text inside its subregion.
    pub inner: u64,
    pub probe_disp: u64,
}

impl PrefetchSetup {
    /// Eight 64 KB subregions.
    pub fn toy() -> Self {
        Self { region: toy_region(), inner: 0, probe_disp: 0x40 }
    }

    /// The kernel region with its 2 GB stride.
    pub fn kernel_scale() -> Self {
        Self { region: kernel_region(), inner: 0x180_0000, probe_disp: 0x40 }
    }
}

pub fn toy_region() -> RandRegion {
    crate::verify::toy_region(8)
}

fn prefetch_env(setup: &PrefetchSetup, cfg: &MachineConfig) -> (Env, VirtAddr) {
    let mut env = Env::new(cfg, setup.region, setup.inner, nop_halt(), 1, 1);
    let entry = env.place(0, &asm("prefetch [r1]\nrdtsc r2\nprefetch [r1]\nrdtsc r3\nhalt"));
    (env, entry)
}

/// Prefetch each candidate twice and time the second prefetch.
pub fn prefetch_attack(setup: &PrefetchSetup, mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let (env, entry) = prefetch_env(setup, cfg);
    let exp = |index: u64| {
        let (mut s, _) = env.session(index, mode)?;
        let rows = probe_rows(&env, setup.probe_disp, |addr| {
            let t = run_phase(&mut s, "probe", entry, regs(&[(1, addr)]), Privilege::User, halted)?;
            Ok(t.regs[3] as i64 - t.regs[2] as i64)
        })?;
        let decoded = unique_min(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    conclude("prefetch", mode, env.candidates(), planted, &exp)
}

/// Same probe with no victim mapping in the probed region.
pub fn prefetch_empty_region(setup: &PrefetchSetup, mode: Mode, cfg: &MachineConfig) -> Result<Vec<i64>, AttackError> {
    let (env, entry) = prefetch_env(setup, cfg);
    let other = RandRegion::with_subregions(1, VirtAddr(0xffff_ffff_f800_0000), 16, 8).expect("probe region");
    let (mut s, _) = env.session(0, mode)?;
    (0..other.subregions())
        .map(|i| {
            let addr = other.subregion_base(i).0 + 0x40;
            let t = run_phase(&mut s, "probe", entry, regs(&[(1, addr)]), Privilege::User, halted)?;
            Ok(t.regs[3] as i64 - t.regs[2] as i64)
        })
        .collect()
}

fn probe_rows(
    env: &Env,
    disp: u64,
    mut measure: impl FnMut(u64) -> Result<i64, AttackError>,
) -> Result<Vec<ProbeRow>, AttackError> {
    (0..env.candidates())
        .map(|i| {
            let addr = env.probe(i, disp);
            Ok(ProbeRow { index: i, addr, measurement: measure(addr)? })
        })
        .collect()
}

/// The victim's own fetch warms the TLB; the attacker then times one prefetch per subregion.
pub fn entrybleed_tlb(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    entrybleed_with(mode, planted, true, cfg)
}

pub fn entrybleed_with(mode: Mode, planted: u64, victim: bool, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let mut env = Env::new(cfg, toy_region(), 0, nop_halt(), 1, 1);
    let entry = env.place(0, &asm("rdtsc r2\nprefetch [r1]\nrdtsc r3\nhalt"));
    let exp = |index: u64| {
        let (mut s, layout) = env.session(index, mode)?;
        if victim {
            victim_run(&mut s, &env, &layout, &[])?;
        }
        let rows = probe_rows(&env, 0, |addr| {
            let t = run_phase(&mut s, "probe", entry, regs(&[(1, addr)]), Privilege::User, halted)?;
            Ok(t.regs[3] as i64 - t.regs[2] as i64)
        })?;
        let decoded = unique_min(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    conclude("entrybleed", mode, env.candidates(), planted, &exp)
}

const EVICT_PAGES: u64 = 64;

fn eviction_program() -> Program {
    let mut insts = Vec::new();
    for p in 0..EVICT_PAGES {
        insts.push(Inst::MovImm(1, USER_BUF_V + p * PAGE_SIZE));
        insts.push(Inst::Load(2, 1));
    }
    insts.push(Inst::Halt);
    Program::new(insts)
}

/// Per candidate: flush the TLB, warm the probe code, then fault twice on the
/// candidate and compare the two fault latencies.
pub fn drk_double_fault(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let mut env = Env::new(cfg, toy_region(), 0, nop_halt(), 1, EVICT_PAGES);
    let evict = env.place(0, &eviction_program());
    let probe = env.place(0x800, &asm("ld r2, [r1]\nhalt"));
    let benign = USER_BUF_V + 0x10;
    let exp = |index: u64| {
        let (mut s, _) = env.session(index, mode)?;
        let rows = probe_rows(&env, 0x40, |addr| {
            run_phase(&mut s, "evict", evict, regs(&[]), Privilege::User, halted)?;
            run_phase(&mut s, "warm", probe, regs(&[(1, benign)]), Privilege::User, halted)?;
            let first = run_phase(&mut s, "fault1", probe, regs(&[(1, addr)]), Privilege::User, crashed)?;
            let second = run_phase(&mut s, "fault2", probe, regs(&[(1, addr)]), Privilege::User, crashed)?;
            Ok(first.total_cycles as i64 - second.total_cycles as i64)
        })?;
        let positive: Vec<u64> = rows.iter().filter(|r| r.measurement > 0).map(|r| r.index).collect();
        let decoded = (positive.len() == 1).then(|| positive[0]);
        Ok((rows, decoded))
    };
    conclude("drk", mode, env.candidates(), planted, &exp)
}

fn load_latency(t: &RunTrace, v: u64) -> Option<i64> {
    t.requests.iter().position(|r| *r == Request::Load(VirtAddr(v))).map(|k| t.latencies[k] as i64)
}

/// A transient store and load to the guess; forwarding only happens when the
/// store address translated.
pub fn data_bounce(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let mut env = Env::new(cfg, toy_region(), 0, nop_halt(), 1, 1);
    let entry = env.place(0, &asm("bnz r1, out\nst [r2], r3\nld r4, [r2]\nout:\nhalt"));
    let benign = USER_BUF_V + 0x100;
    let exp = |index: u64| {
        let (mut s, _) = env.session(index, mode)?;
        let rows = probe_rows(&env, 0x40, |addr| {
            run_phase(&mut s, "train", entry, regs(&[(1, 0), (2, benign), (3, 7)]), Privilege::User, halted)?;
            let t = run_phase(&mut s, "bounce", entry, regs(&[(1, 1), (2, addr), (3, 7)]), Privilege::User, halted)?;
            Ok(load_latency(&t, addr).unwrap_or(-1))
        })?;
        let decoded = unique_min(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    conclude("data_bounce", mode, env.candidates(), planted, &exp)
}

/// Four 4 KB subregions: the protected bits 12-13 fall inside the BTB index.
pub fn jump_region() -> RandRegion {
    RandRegion::with_subregions(0, VirtAddr(0xffff_ffff_f000_0000), 12, 4).expect("jump region")
}

const VICTIM_BRANCH: u64 = 0x100;

fn jump_victim() -> Program {
    let mut insts = vec![Inst::Nop; (VICTIM_BRANCH / INST_BYTES) as usize];
    insts.extend([Inst::DirectBranch(2), Inst::Nop, Inst::Halt]);
    Program::new(insts)
}

/// Prime BTB slots with attacker branches aliasing each candidate victim PC,
/// let the victim branch, then time each attacker branch again.
pub fn jump_over_aslr(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    jump_over_with(mode, planted, true, cfg)
}

pub fn jump_over_with(mode: Mode, planted: u64, victim: bool, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let region = jump_region();
    let mut env = Env::new(cfg, region, 0, jump_victim(), region.subregions(), 1);
    let n = region.subregions();
    let mut slots = Vec::new();
    for i in 0..n {
        let page = i * PAGE_SIZE;
        let entry = env.place(page + VICTIM_BRANCH - INST_BYTES, &asm("rdtsc r3\njr r1\nhalt"));
        let target = env.place(page + 0x800, &asm("rdtsc r2\nhalt"));
        slots.push((entry, target));
    }
    let exp = |index: u64| {
        let (mut s, layout) = env.session(index, mode)?;
        for &(entry, target) in &slots {
            run_phase(&mut s, "prime", entry, regs(&[(1, target.0)]), Privilege::User, halted)?;
        }
        if victim {
            victim_run(&mut s, &env, &layout, &[])?;
        }
        let mut rows = Vec::new();
        for (i, &(entry, target)) in slots.iter().enumerate() {
            let t = run_phase(&mut s, "probe", entry, regs(&[(1, target.0)]), Privilege::User, halted)?;
            rows.push(ProbeRow {
                index: i as u64,
                addr: region.subregion_base(i as u64).0 + VICTIM_BRANCH,
                measurement: t.regs[2] as i64 - t.regs[3] as i64,
            });
        }
        let decoded = unique_max(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    conclude("jump_over", mode, n, planted, &exp)
}

/// Eight 32 KB subregions: the protected bits 15-17 select the leaf PTE's cache line.
pub fn anc_region() -> RandRegion {
    RandRegion::with_subregions(0, VirtAddr(0xffff_ffff_e000_0000), 15, 8).expect("anc region")
}

const L1_SETS: u64 = 128;
const L1_WAYS: u64 = 8;
const LINE: u64 = 64;

fn prime_line(set: u64, way: u64) -> u64 {
    USER_BUF_V + way * L1_SETS * LINE + set * LINE
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheProfile {
    /// Probe time per L1D set.
    pub times: Vec<i64>,
}

impl CacheProfile {
    /// Sets slower than the all-hit time.
    pub fn evicted_sets(&self) -> Vec<u64> {
        let base = self.times.iter().copied().min().unwrap_or(0);
        self.times.iter().enumerate().filter(|(_, &t)| t > base).map(|(i, _)| i as u64).collect()
    }
}

struct Anc {
    env: Env,
    prime: VirtAddr,
    probe: VirtAddr,
}

impl Anc {
    fn new(cfg: &MachineConfig) -> Self {
        let buf_pages = L1_SETS * L1_WAYS * LINE / PAGE_SIZE;
        let mut env = Env::new(cfg, anc_region(), 0, nop_halt(), 8, buf_pages);
        let mut insts = Vec::new();
        for way in 0..L1_WAYS {
            for set in 0..L1_SETS {
                insts.push(Inst::MovImm(1, prime_line(set, way)));
                insts.push(Inst::Load(2, 1));
            }
        }
        insts.push(Inst::Halt);
        let prime = env.place(0, &Program::new(insts));
        let mut probe: Vec<Inst> = vec![Inst::ReadTimer(14)];
        probe.extend((1..=L1_WAYS as u8).map(|r| Inst::Load(0, r)));
        probe.extend([Inst::ReadTimer(15), Inst::Halt]);
        let probe = env.place(5 * PAGE_SIZE, &Program::new(probe));
        Self { env, prime, probe }
    }

    fn set_regs(set: u64) -> Regs {
        let pairs: Vec<(u8, u64)> = (0..L1_WAYS).map(|w| (w as u8 + 1, prime_line(set, w))).collect();
        regs(&pairs)
    }

    fn profile(&self, index: u64, mode: Mode, victim: bool) -> Result<CacheProfile, AttackError> {
        let (mut s, layout) = self.env.session(index, mode)?;
        let user = Privilege::User;
        run_phase(&mut s, "warm", self.probe, Self::set_regs(0), user, halted)?;
        run_phase(&mut s, "prime", self.prime, regs(&[]), user, halted)?;
        run_phase(&mut s, "prime", self.prime, regs(&[]), user, halted)?;
        if victim {
            victim_run(&mut s, &self.env, &layout, &[])?;
        }
        let mut times = Vec::with_capacity(L1_SETS as usize);
        for set in 0..L1_SETS {
            let t = run_phase(&mut s, "probe", self.probe, Self::set_regs(set), user, halted)?;
            times.push(t.regs[15] as i64 - t.regs[14] as i64);
        }
        Ok(CacheProfile { times })
    }
}

/// Cache profile after prime, optional victim fetch, and probe.
pub fn anc_profile(mode: Mode, index: u64, victim: bool, cfg: &MachineConfig) -> Result<CacheProfile, AttackError> {
    Anc::new(cfg).profile(index, mode, victim)
}

/// Prime+Probe on L1D around a victim fetch. The profile is matched against
/// templates the attacker records for every candidate layout.
pub fn anc_ptw_probe(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let anc = Anc::new(cfg);
    let n = anc.env.candidates();
    let templates = (0..n).map(|c| anc.profile(c, mode, true)).collect::<Result<Vec<_>, _>>()?;
    let exp = |index: u64| {
        let observed = &templates[index as usize];
        let matches: Vec<u64> = (0..n).filter(|&c| templates[c as usize] == *observed).collect();
        let rows = observed
            .times
            .iter()
            .enumerate()
            .map(|(set, &t)| ProbeRow { index: set as u64, addr: prime_line(set as u64, 0), measurement: t })
            .collect();
        Ok((rows, (matches.len() == 1).then(|| matches[0])))
    };
    conclude("anc", mode, n, planted, &exp)
}

fn blindside_victim() -> Program {
    let mut insts = vec![Inst::Nop; 0x204];
    insts[0] = Inst::CondBranch(2, 1);
    insts[1] = Inst::IndirectJump(2);
    insts[2] = Inst::Halt;
    insts[0x200] = Inst::Load(3, 4);
    insts[0x201] = Inst::Nop;
    insts[0x202] = Inst::Halt;
    Program::new(insts)
}

const BLINDSIDE_FUNC: u64 = 0x800;

struct BlindSide {
    env: Env,
}

impl BlindSide {
    fn new(cfg: &MachineConfig) -> Self {
        Self { env: Env::new(cfg, toy_region(), 0, blindside_victim(), 1, 1) }
    }

    /// Victim run on a fresh μ with the corrupted pointer set to `guess`.
    fn trace(&self, index: u64, mode: Mode, guess: u64) -> Result<RunTrace, AttackError> {
        let mut env = self.env.clone();
        env.cfg = env.cfg.with_events();
        let (mut s, layout) = env.session(index, mode)?;
        let data = layout.valid_start(0).0 + 0x100;
        victim_run(&mut s, &env, &layout, &[(1, 1), (2, guess), (4, data)])
    }
}

/// Victim trace with the corrupted pointer set to `guess`, events recorded.
pub fn blindside_trace(mode: Mode, index: u64, guess: u64, cfg: &MachineConfig) -> Result<RunTrace, AttackError> {
    BlindSide::new(cfg).trace(index, mode, guess)
}

/// Per-structure deviations between a valid and an invalid guess.
pub fn blindside_probe(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let b = BlindSide::new(cfg);
    let n = b.env.candidates();
    let exp = |index: u64| {
        let rows = probe_rows(&b.env, BLINDSIDE_FUNC, |guess| {
            Ok(b.trace(index, mode, guess)?.events.len() as i64)
        })?;
        let decoded = unique_max(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    let mut report = conclude("blindside", mode, n, planted, &exp)?;
    let valid = b.trace(planted, mode, b.env.probe(planted, BLINDSIDE_FUNC))?;
    let invalid = b.trace(planted, mode, b.env.probe((planted + 1) % n, BLINDSIDE_FUNC))?;
    report.deviations = Some(trace_deviations(&valid.events, &invalid.events));
    Ok(report)
}

const SPECTRE_PROBE_V: u64 = USER_BUF_V + PAGE_SIZE;

/// A victim bounds-check gadget transiently reads a kernel word that encodes
/// the text position and uses it as a load address. The ISA has no ALU, so the
/// word already holds `probe_base + index * 64`.
pub fn spectre_probe(mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let victim = asm("bnz r1, out\nld r5, [r6]\nld r7, [r5]\nout:\nhalt");
    let mut base = Env::new(cfg, toy_region(), 0, victim, 1, 2);
    let entry = base.place(0, &asm("rdtsc r2\nld r4, [r1]\nrdtsc r3\nhalt"));
    let n = base.candidates();
    let exp = |index: u64| {
        let mut env = base.clone();
        env.kdata = vec![(0, SPECTRE_PROBE_V + index * LINE)];
        let (mut s, layout) = env.session(index, mode)?;
        victim_run(&mut s, &env, &layout, &[(1, 1), (6, KDATA_V)])?;
        let mut rows = Vec::new();
        for i in 0..n {
            let addr = SPECTRE_PROBE_V + i * LINE;
            let t = run_phase(&mut s, "probe", entry, regs(&[(1, addr)]), Privilege::User, halted)?;
            rows.push(ProbeRow { index: i, addr, measurement: t.regs[3] as i64 - t.regs[2] as i64 });
        }
        let decoded = unique_min(&rows.iter().map(|r| r.measurement).collect::<Vec<_>>());
        Ok((rows, decoded))
    };
    conclude("spectre_probe", mode, n, planted, &exp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    Latency,
    TraceDiff,
    CacheSetProfile,
    FaultLatency,
    BtbCollision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttackInfo {
    pub name: &'static str,
    pub measurement: Measurement,
    /// Leakage path: 1 layout probing, 2 secret pointers used as addresses, 3 pointers leaked as data.
    pub path: u8,
    pub has_victim: bool,
}

pub const ATTACKS: [AttackInfo; 9] = [
    AttackInfo { name: "prefetch", measurement: Measurement::Latency, path: 1, has_victim: false },
    AttackInfo { name: "prefetch_kernel", measurement: Measurement::Latency, path: 1, has_victim: false },
    AttackInfo { name: "drk", measurement: Measurement::FaultLatency, path: 1, has_victim: false },
    AttackInfo { name: "data_bounce", measurement: Measurement::Latency, path: 1, has_victim: false },
    AttackInfo { name: "blindside", measurement: Measurement::TraceDiff, path: 1, has_victim: true },
    AttackInfo { name: "jump_over", measurement: Measurement::BtbCollision, path: 2, has_victim: true },
    AttackInfo { name: "anc", measurement: Measurement::CacheSetProfile, path: 2, has_victim: true },
    AttackInfo { name: "entrybleed", measurement: Measurement::Latency, path: 2, has_victim: true },
    AttackInfo { name: "spectre_probe", measurement: Measurement::Latency, path: 3, has_victim: true },
];

pub fn attack_names() -> String {
    ATTACKS.iter().map(|a| a.name).collect::<Vec<_>>().join(", ")
}

pub fn candidates(name: &str) -> Result<u64, AttackError> {
    Ok(match name {
        "prefetch_kernel" => kernel_region().subregions(),
        "jump_over" => jump_region().subregions(),
        "anc" => anc_region().subregions(),
        n if ATTACKS.iter().any(|a| a.name == n) => toy_region().subregions(),
        _ => return Err(AttackError::Unknown(name.to_string(), attack_names())),
    })
}

/// Run `name` against the layout whose index is drawn from `seed`.
pub fn run_attack(name: &str, mode: Mode, seed: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    let n = candidates(name)?;
    let planted = planted_index(n, seed);
    run_attack_at(name, mode, planted, cfg)
}

pub fn planted_index(candidates: u64, seed: u64) -> u64 {
    use rand::{Rng, SeedableRng};
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).gen_range(0..candidates)
}

pub fn run_attack_at(name: &str, mode: Mode, planted: u64, cfg: &MachineConfig) -> Result<AttackReport, AttackError> {
    match name {
        "prefetch" => prefetch_attack(&PrefetchSetup::toy(), mode, planted, cfg),
        "prefetch_kernel" => prefetch_attack(&PrefetchSetup::kernel_scale(), mode, planted, cfg),
        "drk" => drk_double_fault(mode, planted, cfg),
        "data_bounce" => data_bounce(mode, planted, cfg),
        "blindside" => blindside_probe(mode, planted, cfg),
        "jump_over" => jump_over_aslr(mode, planted, cfg),
        "anc" => anc_ptw_probe(mode, planted, cfg),
        "entrybleed" => entrybleed_tlb(mode, planted, cfg),
        "spectre_probe" => spectre_probe(mode, planted, cfg),
        _ => Err(AttackError::Unknown(name.to_string(), attack_names())),
    }
}

/// Human-readable one-line summary.
pub fn describe(r: &AttackReport) -> String {
    let mut s = format!("{} [{}]: {:?}", r.attack, r.mode.name(), r.verdict);
    let _ = write!(s, " planted={} recovered={:?}", r.planted, r.recovered);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MachineConfig {
        MachineConfig::default()
    }

    #[test]
    fn unique_extrema() {
        assert_eq!(unique_min(&[5, 1, 5]), Some(1));
        assert_eq!(unique_min(&[1, 1, 5]), None);
        assert_eq!(unique_min(&[3, 3, 3]), None);
        assert_eq!(unique_max(&[3, 9, 3]), Some(1));
    }

    #[test]
    fn prefetch_toy_dips_at_planted() {
        let r = prefetch_attack(&PrefetchSetup::toy(), Mode::Baseline, 5, &cfg()).unwrap();
        assert_eq!(r.recovered, Some(5));
        assert_eq!(r.verdict, Verdict::Leak);
        let o = prefetch_attack(&PrefetchSetup::toy(), Mode::Oreo, 5, &cfg()).unwrap();
        let m = o.measurements();
        assert_eq!(m.iter().max(), m.iter().min());
        assert_eq!(o.verdict, Verdict::NoLeak);
    }

    #[test]
    fn empty_region_is_flat() {
        for mode in Mode::ALL {
            let m = prefetch_empty_region(&PrefetchSetup::toy(), mode, &cfg()).unwrap();
            assert_eq!(m.iter().max(), m.iter().min());
        }
    }

    #[test]
    fn drk_delta_matches_walk_cost() {
        let r = drk_double_fault(Mode::Baseline, 3, &cfg()).unwrap();
        let lat = crate::uarch::LatencyTable::default();
        for row in &r.rows {
            let want = if row.index == 3 { 4 * lat.ptw_level as i64 } else { 0 };
            assert_eq!(row.measurement, want, "probe {}", row.index);
        }
        let o = drk_double_fault(Mode::Oreo, 3, &cfg()).unwrap();
        assert!(o.rows.windows(2).all(|w| w[0].measurement == w[1].measurement));
        assert_eq!(o.verdict, Verdict::NoLeak);
    }

    #[test]
    fn data_bounce_forwarding_latency() {
        let r = data_bounce(Mode::Baseline, 2, &cfg()).unwrap();
        let fwd = crate::uarch::LatencyTable::default().store_forward as i64;
        assert_eq!(r.rows[2].measurement, fwd);
        assert!(r.rows.iter().filter(|x| x.index != 2).all(|x| x.measurement > fwd));
        let o = data_bounce(Mode::Oreo, 2, &cfg()).unwrap();
        assert!(o.rows.iter().all(|x| x.measurement == fwd));
    }

    #[test]
    fn jump_over_needs_a_victim() {
        let r = jump_over_with(Mode::Baseline, 2, false, &cfg()).unwrap();
        assert_eq!(r.recovered, None);
        assert_eq!(jump_over_aslr(Mode::Baseline, 2, &cfg()).unwrap().recovered, Some(2));
    }

    #[test]
    fn anc_control_has_no_evictions() {
        for mode in Mode::ALL {
            assert!(anc_profile(mode, 3, false, &cfg()).unwrap().evicted_sets().is_empty());
            assert!(!anc_profile(mode, 3, true, &cfg()).unwrap().evicted_sets().is_empty());
        }
    }

    #[test]
    fn unknown_attack_lists_names() {
        let e = run_attack("nope", Mode::Oreo, 0, &cfg()).unwrap_err().to_string();
        assert!(e.contains("prefetch") && e.contains("anc"));
    }
}
