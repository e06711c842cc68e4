//! The executable machine: a small ISA, a speculative in-order-issue core and
//! the one-request-per-step semantics for baseline and Oreo modes.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{mask2valid_unchecked, oblivious_bits, virt2mask, Mode, PhysAddr, RandRegion, VirtAddr};
use crate::layout::{Layout, Perms};
use crate::memtable::{decode_offset, CodeSegment, MemError, PhysMem, PtConfig, INST_BYTES};
use crate::uarch::{
    page_key, page_tag, CachePath, MemKind, Observation, Structure, TlbEntry, TraceEvent, Uarch, UarchConfig,
    UarchError, NONE,
};

pub const NUM_REGS: usize = 16;
pub const DEFAULT_WINDOW: usize = 8;

pub type Regs = [u64; NUM_REGS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Inst {
    Nop,
    MovImm(u8, u64),
    /// Offsets are in instructions, relative to the branch itself.
    DirectBranch(i64),
    /// Taken iff the register is nonzero.
    CondBranch(i64, u8),
    IndirectJump(u8),
    Load(u8, u8),
    Store(u8, u8),
    Prefetch(u8),
    ReadTimer(u8),
    Halt,
}

impl Inst {
    pub fn is_mem(self) -> bool {
        matches!(self, Inst::Load(..) | Inst::Store(..) | Inst::Prefetch(_))
    }

    fn regs(self) -> Vec<u8> {
        match self {
            Inst::MovImm(r, _) | Inst::CondBranch(_, r) | Inst::IndirectJump(r) | Inst::Prefetch(r) | Inst::ReadTimer(r) => {
                vec![r]
            }
            Inst::Load(a, b) | Inst::Store(a, b) => vec![a, b],
            Inst::Nop | Inst::DirectBranch(_) | Inst::Halt => vec![],
        }
    }
}

impl fmt::Display for Inst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Inst::Nop => write!(f, "nop"),
            Inst::MovImm(r, x) => write!(f, "mov r{r}, {x:#x}"),
            Inst::DirectBranch(rel) => write!(f, "jmp {rel:+}"),
            Inst::CondBranch(rel, r) => write!(f, "bnz r{r}, {rel:+}"),
            Inst::IndirectJump(r) => write!(f, "jr r{r}"),
            Inst::Load(d, a) => write!(f, "ld r{d}, [r{a}]"),
            Inst::Store(a, v) => write!(f, "st [r{a}], r{v}"),
            Inst::Prefetch(a) => write!(f, "prefetch [r{a}]"),
            Inst::ReadTimer(d) => write!(f, "rdtsc r{d}"),
            Inst::Halt => write!(f, "halt"),
        }
    }
}

/// Initial register value, resolved against the program's entry address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Const(u64),
    /// Entry address plus a byte displacement.
    Base(u64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub insts: Vec<Inst>,
    pub labels: BTreeMap<String, usize>,
    pub preloads: Vec<(u8, Operand)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

impl Program {
    pub fn new(insts: Vec<Inst>) -> Self {
        Self { insts, ..Default::default() }
    }

    pub fn len_bytes(&self) -> u64 {
        self.insts.len() as u64 * INST_BYTES
    }

    pub fn label(&self, name: &str) -> Option<u64> {
        self.labels.get(name).map(|&i| i as u64 * INST_BYTES)
    }

    pub fn with_preload(mut self, reg: u8, value: Operand) -> Self {
        self.preloads.retain(|(r, _)| *r != reg);
        self.preloads.push((reg, value));
        self
    }

    pub fn regs(&self, entry: VirtAddr) -> Regs {
        let mut regs = [0; NUM_REGS];
        for &(r, op) in &self.preloads {
            regs[r as usize] = match op {
                Operand::Const(x) => x,
                Operand::Base(d) => entry.0.wrapping_add(d),
            };
        }
        regs
    }

    pub fn parse(src: &str) -> Result<Program, AsmError> {
        assemble(src)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (r, op) in &self.preloads {
            match op {
                Operand::Const(x) => writeln!(f, ".preload r{r}, {x:#x}")?,
                Operand::Base(d) => writeln!(f, ".preload r{r}, base+{d:#x}")?,
            }
        }
        for inst in &self.insts {
            writeln!(f, "{inst}")?;
        }
        Ok(())
    }
}

fn parse_reg(tok: &str) -> Result<u8, String> {
    let n = tok
        .trim()
        .strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .ok_or_else(|| format!("expected register, found {tok:?}"))?;
    if n as usize >= NUM_REGS {
        return Err(format!("register r{n} out of range"));
    }
    Ok(n)
}

fn parse_mem(tok: &str) -> Result<u8, String> {
    let inner = tok
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("expected [rN], found {tok:?}"))?;
    parse_reg(inner)
}

fn parse_imm(tok: &str) -> Result<u64, String> {
    crate::addr::parse_u64(tok.trim())
}

/// Assemble the textual format: one mnemonic per line, `label:` lines, `;`
/// comments, and `.preload rN, <value>` directives where the value is a
/// number, `base+<disp>` or `@label`.
pub fn assemble(src: &str) -> Result<Program, AsmError> {
    enum Pending {
        Done(Inst),
        Jmp(String),
        Bnz(u8, String),
    }
    let mut prog = Program::default();
    let mut pending = Vec::new();
    let mut preload_labels = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| AsmError { line, msg };
        let text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if let Some(name) = text.strip_suffix(':') {
            let name = name.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err(format!("bad label {name:?}")));
            }
            if prog.labels.insert(name.to_string(), pending.len()).is_some() {
                return Err(err(format!("duplicate label {name:?}")));
            }
            continue;
        }
        let (op, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let args: Vec<&str> = if rest.trim().is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
        let want = |k: usize| -> Result<(), AsmError> {
            if args.len() == k {
                Ok(())
            } else {
                Err(err(format!("{op} takes {k} operand(s), found {}", args.len())))
            }
        };
        let p = match op.to_ascii_lowercase().as_str() {
            ".preload" => {
                want(2)?;
                let r = parse_reg(args[0]).map_err(err)?;
                let v = args[1];
                if let Some(l) = v.strip_prefix('@') {
                    preload_labels.push((line, r, l.to_string()));
                    prog.preloads.push((r, Operand::Base(0)));
                } else if let Some(d) = v.strip_prefix("base") {
                    let d = d.trim();
                    let disp = if d.is_empty() {
                        0
                    } else {
                        parse_imm(d.strip_prefix('+').ok_or_else(|| err(format!("bad displacement {d:?}")))?)
                            .map_err(err)?
                    };
                    prog.preloads.push((r, Operand::Base(disp)));
                } else {
                    prog.preloads.push((r, Operand::Const(parse_imm(v).map_err(err)?)));
                }
                continue;
            }
            "nop" => {
                want(0)?;
                Pending::Done(Inst::Nop)
            }
            "halt" => {
                want(0)?;
                Pending::Done(Inst::Halt)
            }
            "mov" => {
                want(2)?;
                Pending::Done(Inst::MovImm(parse_reg(args[0]).map_err(err)?, parse_imm(args[1]).map_err(err)?))
            }
            "jmp" => {
                want(1)?;
                Pending::Jmp(args[0].to_string())
            }
            "bnz" => {
                want(2)?;
                Pending::Bnz(parse_reg(args[0]).map_err(err)?, args[1].to_string())
            }
            "jr" => {
                want(1)?;
                Pending::Done(Inst::IndirectJump(parse_reg(args[0]).map_err(err)?))
            }
            "ld" => {
                want(2)?;
                Pending::Done(Inst::Load(parse_reg(args[0]).map_err(err)?, parse_mem(args[1]).map_err(err)?))
            }
            "st" => {
                want(2)?;
                Pending::Done(Inst::Store(parse_mem(args[0]).map_err(err)?, parse_reg(args[1]).map_err(err)?))
            }
            "prefetch" => {
                want(1)?;
                Pending::Done(Inst::Prefetch(parse_mem(args[0]).map_err(err)?))
            }
            "rdtsc" => {
                want(1)?;
                Pending::Done(Inst::ReadTimer(parse_reg(args[0]).map_err(err)?))
            }
            other => return Err(err(format!("unknown mnemonic {other:?}"))),
        };
        pending.push((line, p));
    }
    let target = |line: usize, at: usize, t: &str, labels: &BTreeMap<String, usize>| -> Result<i64, AsmError> {
        if t.starts_with('+') || t.starts_with('-') {
            return t.parse::<i64>().map_err(|e| AsmError { line, msg: e.to_string() });
        }
        labels
            .get(t)
            .map(|&i| i as i64 - at as i64)
            .ok_or_else(|| AsmError { line, msg: format!("unknown label {t:?}") })
    };
    for (at, (line, p)) in pending.into_iter().enumerate() {
        prog.insts.push(match p {
            Pending::Done(i) => i,
            Pending::Jmp(t) => Inst::DirectBranch(target(line, at, &t, &prog.labels)?),
            Pending::Bnz(r, t) => Inst::CondBranch(target(line, at, &t, &prog.labels)?, r),
        });
    }
    for (line, r, l) in preload_labels {
        let at = prog.label(&l).ok_or_else(|| AsmError { line, msg: format!("unknown label {l:?}") })?;
        for p in prog.preloads.iter_mut().filter(|p| p.0 == r) {
            p.1 = Operand::Base(at);
        }
    }
    Ok(prog)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Request {
    None,
    /// `src` is the previously fetched PC, absent for the first fetch of a run.
    Fetch { v: VirtAddr, src: Option<VirtAddr> },
    Load(VirtAddr),
    Store(VirtAddr, u64),
    Check(VirtAddr),
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::None => "none",
            Request::Fetch { .. } => "fetch",
            Request::Load(_) => "load",
            Request::Store(..) => "store",
            Request::Check(_) => "check",
        }
    }

    /// Every address carried by the request.
    pub fn addrs(&self) -> Vec<VirtAddr> {
        match *self {
            Request::None => vec![],
            Request::Fetch { v, src } => std::iter::once(v).chain(src).collect(),
            Request::Load(v) | Request::Store(v, _) | Request::Check(v) => vec![v],
        }
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::None => write!(f, "none()"),
            Request::Fetch { v, src: Some(s) } => write!(f, "fetch({v}, {s})"),
            Request::Fetch { v, src: None } => write!(f, "fetch({v}, -)"),
            Request::Load(v) => write!(f, "load({v})"),
            Request::Store(v, d) => write!(f, "store({v}, {d:#x})"),
            Request::Check(v) => write!(f, "check({v})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Privilege {
    User,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Unmapped,
    Permission,
    ObliviousBits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    #[serde(with = "crate::addr::hex_u64")]
    pub addr: u64,
    pub on_fetch: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Status {
    Halted,
    Crashed { step: u64, fault: Fault },
    Budget,
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Uarch(#[from] UarchError),
    #[error("program of {len:#x} bytes does not fit the mapped extent {extent:#x}")]
    ProgramTooLarge { len: u64, extent: u64 },
    #[error("layout has no randomized mapping to hold the program")]
    NoCodeMapping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub uarch: UarchConfig,
    pub pt: PtConfig,
    pub window: usize,
    pub privilege: Privilege,
    pub record_observations: bool,
    pub record_events: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            uarch: UarchConfig::default(),
            pt: PtConfig::default(),
            window: DEFAULT_WINDOW,
            privilege: Privilege::Kernel,
            record_observations: false,
            record_events: false,
        }
    }
}

impl MachineConfig {
    pub fn observing(mut self) -> Self {
        self.record_observations = true;
        self
    }

    pub fn with_events(mut self) -> Self {
        self.record_events = true;
        self
    }

    pub fn with_privilege(mut self, p: Privilege) -> Self {
        self.privilege = p;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunTrace {
    pub requests: Vec<Request>,
    /// `observe(μ)` before the first step and after each completed step.
    pub observations: Vec<Observation>,
    pub events: Vec<TraceEvent>,
    /// Latency charged to each completed step, excluding the base cycle.
    pub latencies: Vec<u64>,
    /// Cycle counter after each completed step.
    pub cycles: Vec<u64>,
    pub status: Status,
    /// Final cycle count, including fault delivery on a crash.
    pub total_cycles: u64,
    pub commits: u64,
    pub regs: Regs,
    pub data: BTreeMap<u64, u64>,
}

impl RunTrace {
    pub fn steps(&self) -> u64 {
        self.requests.len() as u64
    }

    pub fn crash_step(&self) -> Option<u64> {
        match self.status {
            Status::Crashed { step, .. } => Some(step),
            _ => None,
        }
    }

    pub fn events_for(&self, s: Structure) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.structure == s)
    }

    pub fn summary(&self) -> serde_json::Value {
        let status = match self.status {
            Status::Halted => "halted",
            Status::Crashed { .. } => "crashed",
            Status::Budget => "budget",
        };
        serde_json::json!({
            "status": status,
            "steps": self.steps(),
            "cycles": self.total_cycles,
            "crash_step": self.crash_step(),
            "commits": self.commits,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Access {
    Exec,
    Read,
    Write,
    Prefetch,
}

fn perms_ok(p: Perms, access: Access, privilege: Privilege) -> bool {
    if p.privileged && privilege == Privilege::User {
        return false;
    }
    match access {
        Access::Exec => p.exec,
        Access::Read | Access::Prefetch => p.read,
        Access::Write => p.write,
    }
}

#[derive(Clone, Copy, Debug)]
struct Translation {
    paddr: Option<PhysAddr>,
    perms: Option<Perms>,
    /// Stored offset of the page, widened to its bit positions.
    offset: Option<u64>,
}

#[derive(Clone, Debug)]
struct RobEntry {
    seq: u64,
    /// Fetch key: masked in Oreo mode.
    pc: u64,
    inst: Inst,
    done: bool,
    fault: Option<Fault>,
    correct_offset: u64,
    dest: Option<(u8, u64)>,
    store: Option<(PhysAddr, u64)>,
    taken: bool,
    jump_target: Option<u64>,
    /// Set while this branch is the unresolved one.
    pending: bool,
    predicted_next: u64,
    actual_next: u64,
}

#[derive(Clone, Debug)]
struct Core {
    spec_regs: Regs,
    arch_regs: Regs,
    pc: u64,
    arch_pc: VirtAddr,
    last_fetch: Option<u64>,
    rob: VecDeque<RobEntry>,
    next_seq: u64,
    pending: Option<u64>,
    checkpoint: Regs,
    fetch_halted: bool,
    fetch_stalled: bool,
    cycles: u64,
    commits: u64,
}

/// One machine instance ⟨m, μ, E, mode⟩.
pub struct Machine {
    mem: PhysMem,
    uarch: Uarch,
    cfg: MachineConfig,
    core: Core,
    step: u64,
    status: Option<Status>,
    trace: RunTrace,
}

enum Outcome {
    Emit(Request, u64),
    Crash(Fault),
}

impl Machine {
    /// Place `program` at the layout's first randomized mapping and reset μ.
    pub fn init(program: &Program, layout: &Layout, mode: Mode, cfg: &MachineConfig) -> Result<Self, MachineError> {
        let m = layout.randomized.first().ok_or(MachineError::NoCodeMapping)?;
        if program.len_bytes() > m.extent {
            return Err(MachineError::ProgramTooLarge { len: program.len_bytes(), extent: m.extent });
        }
        let code = vec![CodeSegment { pbase: m.pbase, insts: program.insts.clone() }];
        let mem = PhysMem::build(layout, mode, cfg.pt, code)?;
        let uarch = Uarch::new(&cfg.uarch)?;
        let entry = layout.valid_start(0);
        Ok(Self::resume(mem, uarch, entry, program.regs(entry), cfg))
    }

    /// Start a run on existing memory and μ, e.g. one phase of a multi-run scenario.
    pub fn resume(mem: PhysMem, mut uarch: Uarch, entry: VirtAddr, regs: Regs, cfg: &MachineConfig) -> Self {
        uarch.lsq = Default::default();
        let pc = match mem.mode {
            Mode::Baseline => entry.0,
            Mode::Oreo => virt2mask(entry, &mem.regions).0,
        };
        let core = Core {
            spec_regs: regs,
            arch_regs: regs,
            pc,
            arch_pc: entry,
            last_fetch: None,
            rob: VecDeque::new(),
            next_seq: 0,
            pending: None,
            checkpoint: regs,
            fetch_halted: false,
            fetch_stalled: false,
            cycles: 0,
            commits: 0,
        };
        let observations = if cfg.record_observations { vec![uarch.observe()] } else { Vec::new() };
        let trace = RunTrace {
            requests: Vec::new(),
            observations,
            events: Vec::new(),
            latencies: Vec::new(),
            cycles: Vec::new(),
            status: Status::Budget,
            total_cycles: 0,
            commits: 0,
            regs,
            data: BTreeMap::new(),
        };
        Self { mem, uarch, cfg: *cfg, core, step: 0, status: None, trace }
    }

    pub fn mode(&self) -> Mode {
        self.mem.mode
    }

    pub fn mem(&self) -> &PhysMem {
        &self.mem
    }

    pub fn uarch(&self) -> &Uarch {
        &self.uarch
    }

    pub fn observe(&self) -> Observation {
        self.uarch.observe()
    }

    /// The speculative fetch PC (masked in Oreo mode).
    pub fn pc(&self) -> u64 {
        self.core.pc
    }

    pub fn arch_pc(&self) -> VirtAddr {
        self.core.arch_pc
    }

    pub fn arch_regs(&self) -> &Regs {
        &self.core.arch_regs
    }

    pub fn cycles(&self) -> u64 {
        self.core.cycles
    }

    pub fn status(&self) -> Option<Status> {
        self.status
    }

    pub fn into_parts(self) -> (PhysMem, Uarch) {
        (self.mem, self.uarch)
    }

    /// Advance one step. Returns the emitted request, or `None` once the machine
    /// has halted or crashed.
    pub fn step(&mut self) -> Option<Request> {
        if self.status.is_some() {
            return None;
        }
        match self.advance() {
            Outcome::Emit(req, lat) => {
                self.core.cycles += 1 + lat;
                self.trace.requests.push(req);
                self.trace.latencies.push(lat);
                self.trace.cycles.push(self.core.cycles);
                if self.cfg.record_observations {
                    self.trace.observations.push(self.uarch.observe());
                }
                self.step += 1;
                Some(req)
            }
            Outcome::Crash(fault) => {
                self.core.cycles += 1 + self.cfg.uarch.latency.fault;
                self.core.rob.clear();
                self.uarch.lsq = Default::default();
                self.status = Some(Status::Crashed { step: self.step, fault });
                None
            }
        }
    }

    /// Step until halt, crash or `budget` steps.
    pub fn run(mut self, budget: u64) -> (RunTrace, PhysMem, Uarch) {
        while self.step < budget && self.step().is_some() {}
        let status = self.status.unwrap_or(Status::Budget);
        let mut trace = std::mem::replace(&mut self.trace, empty_trace());
        trace.status = status;
        trace.total_cycles = self.core.cycles;
        trace.commits = self.core.commits;
        trace.regs = self.core.arch_regs;
        trace.data = self.mem.data.clone();
        (trace, self.mem, self.uarch)
    }

    pub fn run_trace(self, budget: u64) -> RunTrace {
        self.run(budget).0
    }

    fn event(&mut self, structure: Structure, input: Vec<u64>) {
        if self.cfg.record_events {
            self.trace.events.push(TraceEvent { step: self.step, structure, input });
        }
    }

    fn assert_masked(&self, key: u64) {
        if self.mem.mode == Mode::Oreo {
            debug_assert_eq!(oblivious_bits(VirtAddr(key), &self.mem.regions), 0, "unmasked key {key:#x}");
        }
    }

    fn key_of(&self, v: VirtAddr) -> u64 {
        match self.mem.mode {
            Mode::Baseline => v.0,
            Mode::Oreo => virt2mask(v, &self.mem.regions).0,
        }
    }

    fn region_lo(&self, key: u64) -> u32 {
        crate::addr::classify(VirtAddr(key), &self.mem.regions).map_or(0, RandRegion::protected_lo)
    }

    /// TLB lookup, page walk on a miss, then the data or instruction access.
    fn translate(&mut self, key: u64, access: Access, lat: &mut u64) -> Translation {
        self.assert_masked(key);
        let l = self.cfg.uarch.latency;
        let tag = page_tag(key);
        *lat += l.tlb_hit;
        let entry = match self.uarch.tlb.access(tag) {
            Some(e) => {
                self.event(Structure::Tlb, vec![page_key(tag), e.ppn]);
                Some(e)
            }
            None => {
                let walk = self.mem.pt.walk(key);
                let mut input = vec![page_key(tag)];
                for pte in &walk.ptes {
                    self.uarch.cache.touch(CachePath::Data, pte.0, &l);
                    *lat += l.ptw_level;
                    self.event(Structure::Cache, vec![pte.0 & !63]);
                    input.push(pte.0);
                }
                self.event(Structure::MmuPtw, input);
                let e = walk.leaf.map(|p| TlbEntry { tag, ppn: p.ppn, perms: p.perms, offset: p.offset });
                if let Some(e) = e {
                    self.uarch.tlb.fill(e);
                }
                self.event(Structure::Tlb, vec![page_key(tag), e.map_or(NONE, |e| e.ppn)]);
                e
            }
        };
        let Some(e) = entry else {
            return Translation { paddr: None, perms: None, offset: None };
        };
        let paddr = PhysAddr(page_key(e.ppn) | (key & (crate::addr::PAGE_SIZE - 1)));
        if perms_ok(e.perms, access, self.cfg.privilege) {
            let path = if access == Access::Exec { CachePath::Inst } else { CachePath::Data };
            let (_, c) = self.uarch.cache.touch(path, paddr.0, &l);
            *lat += c;
            self.event(Structure::Cache, vec![paddr.0 & !63]);
        }
        Translation { paddr: Some(paddr), perms: Some(e.perms), offset: Some(decode_offset(e.offset, self.region_lo(key))) }
    }

    fn can_fetch(&self) -> bool {
        if self.core.fetch_halted || self.core.fetch_stalled {
            return false;
        }
        match self.core.pending {
            None => true,
            Some(b) => self.core.rob.iter().filter(|e| e.seq > b).count() < self.cfg.window,
        }
    }

    fn advance(&mut self) -> Outcome {
        if let Some(head) = self.core.rob.front() {
            if head.done && !head.pending {
                return self.commit();
            }
        }
        if let Some(i) = self.core.rob.iter().position(|e| !e.done && e.inst.is_mem()) {
            return self.execute(i);
        }
        if self.can_fetch() {
            return self.fetch();
        }
        if self.core.pending.is_some() {
            return self.resolve();
        }
        debug_assert!(false, "machine has nothing to do");
        Outcome::Emit(Request::None, 0)
    }

    fn fetch(&mut self) -> Outcome {
        let mut lat = 0;
        let v = self.core.pc;
        let src = self.core.last_fetch;
        if let Some(s) = src {
            self.assert_masked(s);
            self.uarch.bp.update(v, s);
            self.event(Structure::Bp, vec![v, s]);
        }
        let tr = self.translate(v, Access::Exec, &mut lat);
        self.core.last_fetch = Some(v);
        let req = Request::Fetch { v: VirtAddr(v), src: src.map(VirtAddr) };
        let seq = self.core.next_seq;
        self.core.next_seq += 1;
        let mut e = RobEntry {
            seq,
            pc: v,
            inst: Inst::Nop,
            done: true,
            fault: None,
            correct_offset: tr.offset.unwrap_or(0),
            dest: None,
            store: None,
            taken: false,
            jump_target: None,
            pending: false,
            predicted_next: 0,
            actual_next: 0,
        };
        let fault = |kind| Some(Fault { kind, addr: v, on_fetch: true });
        let inst = match (tr.paddr, tr.perms) {
            (None, _) => Err(fault(FaultKind::Unmapped)),
            (Some(_), Some(p)) if !perms_ok(p, Access::Exec, self.cfg.privilege) => Err(fault(FaultKind::Permission)),
            (Some(pa), _) => self.mem.fetch(pa).ok_or(fault(FaultKind::Unmapped)),
        };
        let inst = match inst {
            Ok(i) => i,
            Err(f) => {
                e.fault = f;
                self.core.fetch_stalled = true;
                self.core.rob.push_back(e);
                return Outcome::Emit(req, lat);
            }
        };
        e.inst = inst;
        let fall = v.wrapping_add(INST_BYTES);
        let rel = |r: i64| v.wrapping_add((r as u64).wrapping_mul(INST_BYTES));
        let mut next = fall;
        let regs = &mut self.core.spec_regs;
        match inst {
            Inst::Nop => {}
            Inst::MovImm(r, x) => {
                regs[r as usize] = x;
                e.dest = Some((r, x));
            }
            Inst::ReadTimer(r) => {
                // Sampled once this fetch completes.
                let t = self.core.cycles + 1 + lat;
                regs[r as usize] = t;
                e.dest = Some((r, t));
            }
            Inst::Halt => self.core.fetch_halted = true,
            Inst::DirectBranch(r) => {
                e.taken = true;
                next = rel(r);
            }
            Inst::CondBranch(r, c) => {
                e.taken = regs[c as usize] != 0;
                let actual = if e.taken { rel(r) } else { fall };
                let predicted = if self.uarch.bp.predict_taken(v) { rel(r) } else { fall };
                next = self.speculate(&mut e, predicted, actual);
            }
            Inst::IndirectJump(r) => {
                let target = regs[r as usize];
                e.jump_target = Some(target);
                let actual = self.key_of(VirtAddr(target));
                let predicted = self.uarch.bp.predict(v).unwrap_or(fall);
                next = self.speculate(&mut e, predicted, actual);
            }
            Inst::Load(..) | Inst::Store(..) | Inst::Prefetch(_) => e.done = false,
        }
        self.core.pc = next;
        self.core.rob.push_back(e);
        Outcome::Emit(req, lat)
    }

    /// Follow the prediction if no other branch is unresolved; otherwise resolve now.
    fn speculate(&mut self, e: &mut RobEntry, predicted: u64, actual: u64) -> u64 {
        if self.core.pending.is_some() {
            return actual;
        }
        e.pending = true;
        e.predicted_next = predicted;
        e.actual_next = actual;
        self.core.pending = Some(e.seq);
        self.core.checkpoint = self.core.spec_regs;
        predicted
    }

    fn resolve(&mut self) -> Outcome {
        let b = self.core.pending.take().expect("pending branch");
        let i = self.core.rob.iter().position(|e| e.seq == b).expect("pending branch in ROB");
        let e = &mut self.core.rob[i];
        e.pending = false;
        let (pc, predicted, actual) = (e.pc, e.predicted_next, e.actual_next);
        if predicted == actual {
            return Outcome::Emit(Request::None, 0);
        }
        self.core.rob.truncate(i + 1);
        self.uarch.lsq.squash_after(b);
        self.core.spec_regs = self.core.checkpoint;
        self.core.pc = actual;
        self.core.last_fetch = Some(pc);
        self.core.fetch_halted = false;
        self.core.fetch_stalled = false;
        Outcome::Emit(Request::None, self.cfg.uarch.latency.mispredict)
    }

    fn execute(&mut self, i: usize) -> Outcome {
        let mut lat = 0;
        let (seq, inst) = (self.core.rob[i].seq, self.core.rob[i].inst);
        let (addr_reg, kind, access) = match inst {
            Inst::Load(_, a) => (a, MemKind::Load, Access::Read),
            Inst::Store(a, _) => (a, MemKind::Store, Access::Write),
            Inst::Prefetch(a) => (a, MemKind::Load, Access::Prefetch),
            _ => unreachable!("execute on non-memory instruction"),
        };
        let v = VirtAddr(self.core.spec_regs[addr_reg as usize]);
        let key = self.key_of(v);
        let oreo = self.mem.mode == Mode::Oreo;
        let extracted = if oreo { oblivious_bits(v, &self.mem.regions) } else { 0 };
        let mut lsq = crate::uarch::LsqEntry {
            seq,
            kind,
            key,
            ppn: None,
            extracted_bits: extracted,
            precheck_ok: None,
            data: 0,
            offset: None,
            perms: None,
        };
        let forwarded = match inst {
            Inst::Load(..) => self.uarch.lsq.forward(key, seq).copied(),
            _ => None,
        };
        let (paddr, perms, value) = if let Some(st) = forwarded {
            lat += self.cfg.uarch.latency.store_forward;
            let tag = page_tag(key);
            if let Some(t) = self.uarch.tlb.access(tag) {
                self.event(Structure::Tlb, vec![page_key(tag), t.ppn]);
            }
            lsq.ppn = st.ppn;
            lsq.offset = st.offset;
            (st.ppn.map(|p| PhysAddr(page_key(p) | (key & 0xfff))), st.perms, st.data)
        } else {
            let tr = self.translate(key, access, &mut lat);
            lsq.ppn = tr.paddr.map(|p| p.page());
            lsq.offset = tr.offset;
            let value = match (inst, tr.paddr) {
                (Inst::Load(..), Some(pa)) if tr.perms.is_some_and(|p| perms_ok(p, access, self.cfg.privilege)) => {
                    self.mem.read_word(pa)
                }
                _ => 0,
            };
            (tr.paddr, tr.perms, value)
        };
        lsq.perms = perms;
        if oreo {
            lsq.precheck_ok = lsq.offset.map(|o| o == extracted);
        }
        let privilege = self.cfg.privilege;
        let e = &mut self.core.rob[i];
        e.done = true;
        let fault = match (paddr, perms) {
            (None, _) => Some(FaultKind::Unmapped),
            (Some(_), Some(p)) if !perms_ok(p, access, privilege) => Some(FaultKind::Permission),
            _ => None,
        };
        let req = match inst {
            Inst::Load(d, _) => {
                e.fault = fault.map(|kind| Fault { kind, addr: v.0, on_fetch: false });
                e.dest = Some((d, value));
                self.core.spec_regs[d as usize] = value;
                Request::Load(v)
            }
            Inst::Store(_, r) => {
                let d = self.core.spec_regs[r as usize];
                lsq.data = d;
                e.fault = fault.map(|kind| Fault { kind, addr: v.0, on_fetch: false });
                e.store = paddr.map(|p| (p, d));
                Request::Store(v, d)
            }
            _ => Request::Load(v),
        };
        self.assert_masked(key);
        self.uarch.lsq.push(lsq);
        Outcome::Emit(req, lat)
    }

    fn commit(&mut self) -> Outcome {
        let e = self.core.rob.front().expect("head").clone();
        if let Some(f) = e.fault {
            return Outcome::Crash(f);
        }
        let oreo = self.mem.mode == Mode::Oreo;
        let arch_pc = self.core.arch_pc;
        if oreo {
            let masked = virt2mask(arch_pc, &self.mem.regions);
            if mask2valid_unchecked(masked, e.correct_offset) != arch_pc {
                return Outcome::Crash(Fault { kind: FaultKind::ObliviousBits, addr: arch_pc.0, on_fetch: true });
            }
        }
        let lsq = if e.inst.is_mem() { self.uarch.lsq.get(e.seq).copied() } else { None };
        if oreo && !matches!(e.inst, Inst::Prefetch(_)) {
            if let Some(l) = lsq {
                if l.precheck_ok != Some(true) {
                    let v = mask2valid_unchecked(crate::addr::MaskedAddr(l.key), l.extracted_bits);
                    return Outcome::Crash(Fault { kind: FaultKind::ObliviousBits, addr: v.0, on_fetch: false });
                }
            }
        }
        self.core.rob.pop_front();
        if let Some((r, x)) = e.dest {
            self.core.arch_regs[r as usize] = x;
        }
        if let Some((pa, d)) = e.store {
            self.mem.write_word(pa, d);
        }
        if lsq.is_some() {
            self.uarch.lsq.remove(e.seq);
        }
        let fall = arch_pc.wrapping_add(INST_BYTES);
        let rel = |r: i64| arch_pc.wrapping_add((r as u64).wrapping_mul(INST_BYTES));
        self.core.arch_pc = match e.inst {
            Inst::DirectBranch(r) => rel(r),
            Inst::CondBranch(r, _) if e.taken => rel(r),
            Inst::IndirectJump(_) => VirtAddr(e.jump_target.expect("jump target")),
            _ => fall,
        };
        self.core.commits += 1;
        if e.inst == Inst::Halt {
            self.status = Some(Status::Halted);
        }
        let req = if oreo { Request::Check(arch_pc) } else { Request::None };
        Outcome::Emit(req, 0)
    }
}

fn empty_trace() -> RunTrace {
    RunTrace {
        requests: Vec::new(),
        observations: Vec::new(),
        events: Vec::new(),
        latencies: Vec::new(),
        cycles: Vec::new(),
        status: Status::Budget,
        total_cycles: 0,
        commits: 0,
        regs: [0; NUM_REGS],
        data: BTreeMap::new(),
    }
}

/// Memory image and μ carried across the phases of a multi-run scenario.
pub struct Session {
    pub mem: PhysMem,
    pub uarch: Uarch,
    pub cfg: MachineConfig,
}

impl Session {
    pub fn new(layout: &Layout, mode: Mode, code: Vec<CodeSegment>, cfg: &MachineConfig) -> Result<Self, MachineError> {
        Ok(Self { mem: PhysMem::build(layout, mode, cfg.pt, code)?, uarch: Uarch::new(&cfg.uarch)?, cfg: *cfg })
    }

    pub fn mode(&self) -> Mode {
        self.mem.mode
    }

    /// Run one phase from `entry` with the given registers and privilege.
    pub fn run(&mut self, entry: VirtAddr, regs: Regs, privilege: Privilege, budget: u64) -> RunTrace {
        let mode = self.mem.mode;
        let mem = std::mem::replace(&mut self.mem, placeholder_mem(mode));
        let uarch = self.uarch.clone();
        let cfg = self.cfg.with_privilege(privilege);
        let (trace, mem, uarch) = Machine::resume(mem, uarch, entry, regs, &cfg).run(budget);
        self.mem = mem;
        self.uarch = uarch;
        trace
    }
}

fn placeholder_mem(mode: Mode) -> PhysMem {
    PhysMem::build(&Layout::default(), mode, PtConfig::default(), Vec::new()).expect("empty layout builds")
}

/// Architectural end state of the in-order reference interpreter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefOutcome {
    pub regs: Regs,
    pub data: BTreeMap<u64, u64>,
    pub commits: u64,
    pub crashed: bool,
}

/// Execute `program` one instruction at a time against the layout function
/// directly, with no speculation and no microarchitecture.
pub fn reference_run(
    program: &Program,
    layout: &Layout,
    privilege: Privilege,
    budget: u64,
) -> Result<RefOutcome, MachineError> {
    let m = layout.randomized.first().ok_or(MachineError::NoCodeMapping)?;
    let entry = layout.valid_start(0);
    let code = CodeSegment { pbase: m.pbase, insts: program.insts.clone() };
    let fetch = |pa: PhysAddr| {
        (pa.0 >= code.pbase.0 && pa.0 < code.end() && pa.0.is_multiple_of(INST_BYTES))
            .then(|| code.insts[((pa.0 - code.pbase.0) / INST_BYTES) as usize])
    };
    let mut regs = program.regs(entry);
    let mut data = BTreeMap::new();
    let mut pc = entry;
    let mut commits = 0;
    let access = |v: u64, a: Access| {
        layout.query_perms(VirtAddr(v)).filter(|(_, p)| perms_ok(*p, a, privilege)).map(|(pa, _)| pa)
    };
    let mut crashed = false;
    while commits < budget {
        let Some(inst) = access(pc.0, Access::Exec).and_then(fetch) else {
            crashed = true;
            break;
        };
        let fall = pc.wrapping_add(INST_BYTES);
        let mut next = fall;
        match inst {
            Inst::Nop | Inst::Prefetch(_) => {}
            Inst::MovImm(r, x) => regs[r as usize] = x,
            Inst::ReadTimer(r) => regs[r as usize] = 0,
            Inst::DirectBranch(r) => next = pc.wrapping_add((r as u64).wrapping_mul(INST_BYTES)),
            Inst::CondBranch(r, c) => {
                if regs[c as usize] != 0 {
                    next = pc.wrapping_add((r as u64).wrapping_mul(INST_BYTES));
                }
            }
            Inst::IndirectJump(r) => next = VirtAddr(regs[r as usize]),
            Inst::Load(d, a) => match access(regs[a as usize], Access::Read) {
                Some(pa) => regs[d as usize] = data.get(&(pa.0 & !7)).copied().unwrap_or(0),
                None => {
                    crashed = true;
                    break;
                }
            },
            Inst::Store(a, s) => match access(regs[a as usize], Access::Write) {
                Some(pa) => {
                    data.insert(pa.0 & !7, regs[s as usize]);
                }
                None => {
                    crashed = true;
                    break;
                }
            },
            Inst::Halt => {
                commits += 1;
                break;
            }
        }
        commits += 1;
        pc = next;
    }
    Ok(RefOutcome { regs, data, commits, crashed })
}

/// Registers referenced anywhere in `program`.
pub fn used_regs(program: &Program) -> Vec<u8> {
    let mut r: Vec<u8> = program.insts.iter().flat_map(|i| i.regs()).collect();
    r.sort_unstable();
    r.dedup();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{RandRegion, PAGE_SIZE};
    use crate::layout::{FixedMapping, LayoutSpec};

    const DATA_V: u64 = 0x10_0000;
    const DATA_P: u64 = 0x80_0000;

    fn region() -> RandRegion {
        RandRegion::with_subregions(0, VirtAddr(0xffff_ffff_c000_0000), 16, 8).unwrap()
    }

    fn layout(i: u64) -> Layout {
        let mut spec = LayoutSpec::new(region(), 4 * PAGE_SIZE);
        spec.fixed.push(FixedMapping { vstart: VirtAddr(DATA_V), len: PAGE_SIZE, pbase: PhysAddr(DATA_P), perms: Perms::USER_RW });
        spec.at_index(i).unwrap()
    }

    fn run(src: &str, i: u64, mode: Mode) -> RunTrace {
        let p = assemble(src).unwrap();
        Machine::init(&p, &layout(i), mode, &MachineConfig::default().observing().with_events()).unwrap().run_trace(500)
    }

    #[test]
    fn assembler_round_trip() {
        let src = "start:\n nop\n mov r1, 0x10\n bnz r1, start\n jr r3\n ld r1, [r2]\n st [r2], r3\n prefetch [r4]\n rdtsc r5\n jmp start\n halt\n";
        let p = assemble(src).unwrap();
        assert_eq!(p.insts[2], Inst::CondBranch(-2, 1));
        assert_eq!(p.insts[8], Inst::DirectBranch(-8));
        let again = assemble(&p.to_string()).unwrap();
        assert_eq!(again.insts, p.insts);
    }

    #[test]
    fn assembler_errors() {
        assert_eq!(assemble("nop\nfoo r1").unwrap_err().line, 2);
        assert!(assemble("mov r16, 1").is_err());
        assert!(assemble("jmp nowhere").is_err());
        assert!(assemble("a:\na:\n").is_err());
    }

    #[test]
    fn preload_operands() {
        let p = assemble(".preload r1, base+0x40\n.preload r2, 0x99\n.preload r3, @end\nnop\nend:\nhalt").unwrap();
        let r = p.regs(VirtAddr(0x1000));
        assert_eq!((r[1], r[2], r[3]), (0x1040, 0x99, 0x1004));
    }

    #[test]
    fn nop_stream_then_halt() {
        let t = run("nop\nnop\nnop\nnop\nnop\nhalt", 2, Mode::Baseline);
        assert_eq!(t.status, Status::Halted);
        assert_eq!(t.commits, 6);
        assert_eq!(t.steps(), 12);
        assert_eq!(t.observations.len() as u64, t.steps() + 1);
        assert!(t.requests.iter().filter(|r| matches!(r, Request::Fetch { .. })).count() == 6);
    }

    #[test]
    fn oreo_inits_agree_baseline_inits_differ() {
        let p = assemble("halt").unwrap();
        let cfg = MachineConfig::default();
        let a = Machine::init(&p, &layout(0), Mode::Oreo, &cfg).unwrap();
        let b = Machine::init(&p, &layout(3), Mode::Oreo, &cfg).unwrap();
        assert_eq!(a.pc(), b.pc());
        assert_eq!(a.observe(), b.observe());
        let a = Machine::init(&p, &layout(0), Mode::Baseline, &cfg).unwrap();
        let b = Machine::init(&p, &layout(3), Mode::Baseline, &cfg).unwrap();
        assert_ne!(a.pc(), b.pc());
    }

    #[test]
    fn store_then_load_round_trip() {
        let src = format!("mov r1, {DATA_V:#x}\nmov r2, 0x55\nst [r1], r2\nld r3, [r1]\nhalt");
        for mode in Mode::ALL {
            let t = run(&src, 1, mode);
            assert_eq!(t.status, Status::Halted, "{mode:?}");
            assert_eq!(t.regs[3], 0x55);
            assert_eq!(t.data.get(&DATA_P), Some(&0x55));
        }
    }

    #[test]
    fn timer_is_strictly_monotonic() {
        let t = run("rdtsc r1\nrdtsc r2\nnop\nrdtsc r3\nhalt", 0, Mode::Oreo);
        assert!(t.regs[1] < t.regs[2] && t.regs[2] < t.regs[3]);
    }

    #[test]
    fn baseline_load_fills_tlb_and_cache() {
        let p = assemble(&format!("ld r1, [r2]\nhalt\n.preload r2, {DATA_V:#x}")).unwrap();
        let cfg = MachineConfig::default().with_events();
        let t = Machine::init(&p, &layout(0), Mode::Baseline, &cfg).unwrap().run_trace(100);
        let load_step = t.requests.iter().position(|r| matches!(r, Request::Load(_))).unwrap() as u64;
        let cache: Vec<_> = t.events.iter().filter(|e| e.step == load_step && e.structure == Structure::Cache).collect();
        assert_eq!(cache.len(), 5);
        let ptw = t.events.iter().find(|e| e.step == load_step && e.structure == Structure::MmuPtw).unwrap();
        assert_eq!(ptw.input.len(), 5);
    }

    #[test]
    fn mispredicted_branch_leaves_residue_only() {
        // r1 = 0 so the branch is not taken; the BTB-less predictor guesses not-taken,
        // so train it taken first with r1 = 1.
        let src = format!(
            ".preload r2, {DATA_V:#x}\n.preload r1, 1\n\
             top:\n bnz r1, skip\n st [r2], r2\n skip:\n mov r1, 0\n bnz r5, top\n halt"
        );
        let p = assemble(&src).unwrap();
        let p = p.with_preload(5, Operand::Const(0));
        let t = Machine::init(&p, &layout(0), Mode::Baseline, &MachineConfig::default()).unwrap().run_trace(500);
        assert_eq!(t.status, Status::Halted);
        assert!(t.data.is_empty());
    }

    #[test]
    fn transient_fault_does_not_crash() {
        // Taken branch predicted not-taken; the fall-through load to an unmapped page is squashed.
        let src = ".preload r1, 1\n.preload r2, 0xdead000\nbnz r1, out\nld r3, [r2]\nout:\nhalt";
        for mode in Mode::ALL {
            let t = run(src, 4, mode);
            assert_eq!(t.status, Status::Halted);
            assert!(t.requests.contains(&Request::Load(VirtAddr(0xdead000))));
        }
    }

    #[test]
    fn wrong_bits_load_crashes_only_in_oreo_at_commit() {
        let l = layout(2);
        let wrong = VirtAddr(l.valid_start(0).0 ^ (1 << 16));
        let src = format!(".preload r2, {:#x}\nld r1, [r2]\nhalt", wrong.0);
        let t = run(&src, 2, Mode::Oreo);
        match t.status {
            Status::Crashed { fault, .. } => assert_eq!(fault.kind, FaultKind::ObliviousBits),
            s => panic!("{s:?}"),
        }
        match run(&src, 2, Mode::Baseline).status {
            Status::Crashed { fault, .. } => assert_eq!(fault.kind, FaultKind::Unmapped),
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let src = format!(".preload r2, {DATA_V:#x}\nrdtsc r1\nst [r2], r1\nld r3, [r2]\nhalt");
        assert_eq!(run(&src, 5, Mode::Oreo), run(&src, 5, Mode::Oreo));
    }

    #[test]
    fn budget_zero_has_initial_observation_only() {
        let p = assemble("halt").unwrap();
        let m = Machine::init(&p, &layout(0), Mode::Oreo, &MachineConfig::default().observing()).unwrap();
        let t = m.run_trace(0);
        assert_eq!(t.status, Status::Budget);
        assert_eq!(t.observations.len(), 1);
    }
}
