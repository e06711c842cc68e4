//! Command-line front end: scenario files in, traces and reports out.
//!
//! Exit codes: 0 success, 1 verification counterexample, 2 configuration error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::addr::{
    cost_report, entropy_report_with_positions, hex_u64, preset, BitsStrategy, CoreSizing, Mode, PhysAddr,
    RandRegion, StrategyKind, VirtAddr, PRESET_NAMES,
};
use crate::attacks::{self, trace_deviations, Deviations};
use crate::layout::{FixedMapping, Layout, LayoutSpec, Perms};
use crate::machine::{assemble, Machine, MachineConfig, Privilege, Program, RunTrace};
use crate::uarch::{LatencyTable, Structure, TraceEvent};
use crate::verify::{self, toy_spec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("verification failed: {0} counterexample(s)")]
    Counterexamples(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Counterexamples(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

fn config(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "oreo", about = "Masked-translation ASLR simulator", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenario's program and dump its traces.
    Run(ScenarioArgs),
    /// Run the scenario's attack and write CSV/JSON reports.
    Attack(ScenarioArgs),
    /// Exhaustive non-interference checks.
    Verify(ScenarioArgs),
    /// Entropy table for a bits-selection strategy.
    Entropy(EntropyArgs),
    /// Storage cost of the extra hardware state.
    Cost(CostArgs),
    /// Per-structure deviations between two trace files or directories.
    TraceDiff { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub scenario: PathBuf,
    /// Output directory; overrides the scenario's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run only this mode.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Worker threads for sweeps.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[arg(long, default_value = "kernel_text")]
    pub preset: String,
    /// Strategy kind; all four when omitted.
    #[arg(long)]
    pub kind: Option<StrategyKind>,
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub n: Option<u32>,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = CoreSizing::MEGA_BOOM.tlb_entries)]
    pub tlb_entries: u64,
    #[arg(long, default_value_t = CoreSizing::MEGA_BOOM.rob_entries)]
    pub rob_entries: u64,
    #[arg(long, default_value_t = CoreSizing::MEGA_BOOM.lsq_entries)]
    pub lsq_entries: u64,
    #[arg(long, default_value_t = CoreSizing::MEGA_BOOM.num_regions)]
    pub regions: u64,
    #[arg(long, default_value_t = CoreSizing::MEGA_BOOM.offset_bits)]
    pub offset_bits: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl clap::ValueEnum for Mode {
    fn value_variants<'a>() -> &'a [Self] {
        &Mode::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

impl clap::ValueEnum for StrategyKind {
    fn value_variants<'a>() -> &'a [Self] {
        &StrategyKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
pub struct Hex(#[serde(with = "hex_u64")] pub u64);

/// A JSON experiment description. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub modes: Option<Vec<Mode>>,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub layout: LayoutChoice,
    /// Offset of the program inside its subregion.
    #[serde(default)]
    pub inner: Hex,
    #[serde(default)]
    pub fixed: Vec<FixedConfig>,
    /// Assembly source.
    #[serde(default)]
    pub program: Option<String>,
    #[serde(default)]
    pub privilege: Option<Privilege>,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub latency: Option<LatencyTable>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// `toy` (64 KB subregions at the top of the kernel half) or `kernel`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub subregions: Option<u64>,
    #[serde(default)]
    pub start: Option<Hex>,
    #[serde(default)]
    pub end: Option<Hex>,
    #[serde(default)]
    pub subregion_len: Option<Hex>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutChoice {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub index: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedConfig {
    pub vstart: Hex,
    pub len: Hex,
    pub pbase: Hex,
    pub perms: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub name: String,
    /// Seeds drawing the planted layout; `[0]` when omitted.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Explicit planted index; overrides `seeds`.
    #[serde(default)]
    pub planted: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// `suite` (the probe suite), `program` (the scenario program) or `lemma2`.
    #[serde(default = "default_check")]
    pub check: String,
}

fn default_check() -> String {
    "suite".into()
}

const DEFAULT_BUDGET: u64 = 100_000;

fn parse_perms(s: &str) -> Result<Perms, CliError> {
    Ok(match s {
        "kernel_rx" => Perms::KERNEL_RX,
        "kernel_rw" => Perms::KERNEL_RW,
        "user_rx" => Perms::USER_RX,
        "user_rw" => Perms::USER_RW,
        "user_rwx" => Perms::USER_RWX,
        _ => return Err(config(format!("unknown perms {s:?}"))),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let s: Scenario = serde_json::from_str(text).map_err(config)?;
        s.region()?;
        if let Some(l) = &s.latency {
            l.validate().map_err(config)?;
        }
        Ok(s)
    }

    pub fn region(&self) -> Result<RandRegion, CliError> {
        let r = &self.region;
        let explicit = [r.start, r.end, r.subregion_len];
        if explicit.iter().any(Option::is_some) {
            if r.preset.is_some() || r.subregions.is_some() {
                return Err(config("region: give either a preset or start/end/subregion_len"));
            }
            let (Some(s), Some(e), Some(l)) = (r.start, r.end, r.subregion_len) else {
                return Err(config("region: start, end and subregion_len are all required"));
            };
            return RandRegion::new(0, VirtAddr(s.0), VirtAddr(e.0), l.0).map_err(config);
        }
        match r.preset.as_deref().unwrap_or("toy") {
            "toy" => {
                let n = r.subregions.unwrap_or(8);
                RandRegion::with_subregions(0, VirtAddr(verify::TOY_START), 16, n).map_err(config)
            }
            "kernel" if r.subregions.is_none() => Ok(crate::addr::kernel_region()),
            "kernel" => Err(config("region: the kernel preset has a fixed subregion count")),
            other => Err(config(format!("unknown region preset {other:?}; available: toy, kernel"))),
        }
    }

    pub fn modes(&self, over: Option<Mode>) -> Vec<Mode> {
        match over {
            Some(m) => vec![m],
            None => self.modes.clone().unwrap_or_else(|| Mode::ALL.to_vec()),
        }
    }

    pub fn machine_config(&self) -> MachineConfig {
        let mut cfg = MachineConfig::default();
        if let Some(l) = self.latency {
            cfg.uarch.latency = l;
        }
        cfg.privilege = self.privilege.unwrap_or(Privilege::Kernel);
        cfg
    }

    pub fn program(&self) -> Result<Program, CliError> {
        let src = self.program.as_deref().ok_or_else(|| config("scenario has no \"program\""))?;
        assemble(src).map_err(config)
    }

    pub fn layout_spec(&self, program: &Program) -> Result<LayoutSpec, CliError> {
        let mut spec = LayoutSpec::new(self.region()?, program.len_bytes().max(4));
        spec.inner = self.inner.0;
        spec.perms = match self.privilege.unwrap_or(Privilege::Kernel) {
            Privilege::Kernel => Perms::KERNEL_RX,
            Privilege::User => Perms::USER_RX,
        };
        spec.fixed = self
            .fixed
            .iter()
            .map(|f| {
                Ok(FixedMapping {
                    vstart: VirtAddr(f.vstart.0),
                    len: f.len.0,
                    pbase: PhysAddr(f.pbase.0),
                    perms: parse_perms(&f.perms)?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        Ok(spec)
    }

    pub fn layout(&self, spec: &LayoutSpec) -> Result<Layout, CliError> {
        let c = &self.layout;
        let index = match (c.index, c.seed) {
            (Some(_), Some(_)) => return Err(config("layout: give either index or seed")),
            (Some(i), None) => i,
            (None, Some(seed)) => spec.sample_index(seed),
            (None, None) => 0,
        };
        spec.at_index(index).map_err(config)
    }

    fn output(&self, args: &ScenarioArgs) -> Option<PathBuf> {
        args.out.clone().or_else(|| self.output.clone())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.into(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

pub fn trace_file_name(s: Structure) -> &'static str {
    match s {
        Structure::Tlb => "tlb.ndjson",
        Structure::Cache => "cache.ndjson",
        Structure::Bp => "bp.ndjson",
        Structure::MmuPtw => "mmu_ptw.ndjson",
    }
}

/// Per-structure trace files, the request list and the JSON summary.
pub fn write_run(dir: &Path, trace: &RunTrace) -> Result<(), CliError> {
    for s in Structure::ALL {
        let body: String = trace.events_for(s).map(|e| e.to_ndjson() + "\n").collect();
        write(&dir.join(trace_file_name(s)), body)?;
    }
    let requests: String = trace.requests.iter().map(|r| format!("{r}\n")).collect();
    write(&dir.join("requests.txt"), requests)?;
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&trace.summary()).expect("json") + "\n")
}

pub fn cmd_run(args: &ScenarioArgs) -> Result<String, CliError> {
    let sc = Scenario::load(&args.scenario)?;
    let program = sc.program()?;
    let spec = sc.layout_spec(&program)?;
    let layout = sc.layout(&spec)?;
    let cfg = sc.machine_config().with_events();
    let budget = sc.budget.unwrap_or(DEFAULT_BUDGET);
    let mut out = String::new();
    for mode in sc.modes(args.mode) {
        let trace = Machine::init(&program, &layout, mode, &cfg).map_err(config)?.run_trace(budget);
        if let Some(dir) = sc.output(args) {
            write_run(&dir.join(mode.name()), &trace)?;
        }
        writeln!(out, "{mode}: {}", trace.summary()).expect("string");
    }
    Ok(out)
}

pub fn cmd_attack(args: &ScenarioArgs) -> Result<String, CliError> {
    let sc = Scenario::load(&args.scenario)?;
    let a = sc.attack.as_ref().ok_or_else(|| config("scenario has no \"attack\""))?;
    let n = attacks::candidates(&a.name).map_err(config)?;
    let cfg = sc.machine_config();
    let planted: Vec<u64> = match (a.planted, a.seeds.is_empty()) {
        (Some(p), _) if p >= n => return Err(config(format!("planted index {p} out of range 0..{n}"))),
        (Some(p), _) => vec![p],
        (None, true) => vec![attacks::planted_index(n, 0)],
        (None, false) => a.seeds.iter().map(|&s| attacks::planted_index(n, s)).collect(),
    };
    let mut out = String::new();
    for mode in sc.modes(args.mode) {
        for (k, &p) in planted.iter().enumerate() {
            let r = attacks::run_attack_at(&a.name, mode, p, &cfg).map_err(config)?;
            if let Some(dir) = sc.output(args) {
                let stem = dir.join(format!("{}_{}_{k}", r.attack, mode.name()));
                write(&stem.with_extension("csv"), r.csv())?;
                write(&stem.with_extension("json"), serde_json::to_string_pretty(&r.summary()).expect("json") + "\n")?;
            }
            writeln!(out, "{}", attacks::describe(&r)).expect("string");
        }
    }
    Ok(out)
}

pub fn cmd_verify(args: &ScenarioArgs) -> Result<String, CliError> {
    let sc = Scenario::load(&args.scenario)?;
    let check = sc.verify.as_ref().map_or_else(default_check, |v| v.check.clone());
    let cfg = sc.machine_config();
    let region = sc.region()?;
    let mut out = String::new();
    let mut counterexamples = 0;
    let mut rejected = 0;
    let mut reports = Vec::new();
    match check.as_str() {
        "suite" => {
            let spec = toy_spec(region);
            for mode in sc.modes(args.mode) {
                let r = verify::check_suite(&spec, mode, &cfg).map_err(config)?;
                writeln!(
                    out,
                    "{mode}: layouts {} pairs {} programs {} counterexamples {} precondition violations {} mask-equivalence violations {}",
                    spec.count(),
                    r.pairs(),
                    r.programs.len(),
                    r.counterexamples(),
                    r.precondition_violations(),
                    r.mask_equiv_violations
                )
                .expect("string");
                if mode == Mode::Baseline {
                    writeln!(out, "baseline distinguishable pairs: {}", r.distinguishable_pairs()).expect("string");
                }
                counterexamples += r.counterexamples() + if mode == Mode::Oreo { r.mask_equiv_violations } else { 0 };
                reports.push(serde_json::to_value(&r).expect("json"));
            }
        }
        "program" => {
            let program = sc.program()?;
            let spec = sc.layout_spec(&program)?;
            let budget = sc.budget.unwrap_or(DEFAULT_BUDGET);
            for mode in sc.modes(args.mode) {
                let r = verify::check_noninterference(&program, &spec, mode, budget, &cfg).map_err(config)?;
                writeln!(
                    out,
                    "{mode}: pairs {} distinguishable {} precondition violations {}",
                    r.pairs_checked,
                    r.distinguishable.len(),
                    r.precondition_violations.len()
                )
                .expect("string");
                counterexamples += r.counterexamples();
                rejected += r.precondition_violations.len();
                reports.push(serde_json::to_value(&r).expect("json"));
            }
        }
        "lemma2" => {
            let r = verify::check_lemma2(&toy_spec(region), &cfg).map_err(config)?;
            writeln!(out, "lemma2: pairs {} counterexamples {}", r.pairs_checked, r.counterexamples.len())
                .expect("string");
            counterexamples += r.counterexamples.len();
            reports.push(serde_json::to_value(&r).expect("json"));
        }
        other => return Err(config(format!("unknown check {other:?}; available: suite, program, lemma2"))),
    }
    if let Some(dir) = sc.output(args) {
        write(&dir.join("verify.json"), serde_json::to_string_pretty(&reports).expect("json") + "\n")?;
    }
    if rejected > 0 && counterexamples == 0 {
        eprint!("{out}");
        return Err(config(format!(
            "program is not functionally equivalent across layouts ({rejected} pair(s)); see the precondition report"
        )));
    }
    if counterexamples > 0 {
        eprint!("{out}");
        return Err(CliError::Counterexamples(counterexamples));
    }
    Ok(out)
}

pub fn entropy_table(args: &EntropyArgs) -> Result<Vec<(StrategyKind, [String; 4])>, CliError> {
    let p = preset(&args.preset)
        .ok_or_else(|| config(format!("unknown preset {:?}; available: {}", args.preset, PRESET_NAMES.join(", "))))?;
    let kinds = args.kind.map_or_else(|| StrategyKind::ALL.to_vec(), |k| vec![k]);
    kinds
        .into_iter()
        .map(|kind| {
            let mut s: BitsStrategy = p.strategy_as(kind);
            s.k = args.k.unwrap_or(s.k);
            s.n = args.n.unwrap_or(s.n);
            s.m = args.m.unwrap_or(s.m);
            let r = entropy_report_with_positions(&s, p.positions).map_err(config)?;
            let (a, b, c, d) = r.columns();
            Ok((kind, [a, b, c, d].map(|x| x.to_string())))
        })
        .collect()
}

const ENTROPY_HEADER: [&str; 5] =
    ["strategy", "orig_code_reuse", "orig_speculative", "remaining_code_reuse", "remaining_speculative"];

fn csv_of(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

pub fn cmd_entropy(args: &EntropyArgs) -> Result<String, CliError> {
    let rows: Vec<Vec<String>> = entropy_table(args)?
        .into_iter()
        .map(|(k, cols)| std::iter::once(k.name().to_string()).chain(cols).collect())
        .collect();
    if let Some(p) = &args.csv {
        write(p, csv_of(&ENTROPY_HEADER, &rows))?;
    }
    Ok(table(&ENTROPY_HEADER, &rows))
}

pub fn cmd_cost(args: &CostArgs) -> Result<String, CliError> {
    let c = cost_report(&CoreSizing {
        tlb_entries: args.tlb_entries,
        rob_entries: args.rob_entries,
        lsq_entries: args.lsq_entries,
        num_regions: args.regions,
        offset_bits: args.offset_bits,
    });
    let header = ["item", "bytes"];
    let rows: Vec<Vec<String>> = [
        ("tlb", c.tlb_extra_bytes),
        ("rob_lsq", c.rob_lsq_extra_bytes),
        ("region_metadata", c.region_metadata_bytes),
        ("archpc", c.archpc_bytes),
        ("in_core_total", c.total_in_core_bytes),
        ("memory_system_total", c.total_memory_system_bytes),
    ]
    .iter()
    .map(|(k, v)| vec![k.to_string(), v.to_string()])
    .collect();
    if let Some(p) = &args.csv {
        write(p, csv_of(&header, &rows))?;
    }
    Ok(table(&header, &rows))
}

/// Events from an NDJSON file, or from every `*.ndjson` file in a directory.
pub fn load_events(path: &Path) -> Result<Vec<TraceEvent>, CliError> {
    let io = |source| CliError::Io { path: path.into(), source };
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut events = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|source| CliError::Io { path: f.clone(), source })?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            events.push(TraceEvent::parse_ndjson(line).map_err(|e| config(format!("{}:{}: {e}", f.display(), i + 1)))?);
        }
    }
    Ok(events)
}

pub fn diff_events(a: &[TraceEvent], b: &[TraceEvent]) -> Result<Deviations, CliError> {
    let set = |x: &[TraceEvent]| x.iter().map(|e| e.structure.name()).collect::<BTreeSet<_>>();
    let (sa, sb) = (set(a), set(b));
    if sa != sb {
        return Err(config(format!("traces cover different structures: {sa:?} vs {sb:?}")));
    }
    Ok(trace_deviations(a, b))
}

pub fn cmd_trace_diff(a: &Path, b: &Path) -> Result<String, CliError> {
    let d = diff_events(&load_events(a)?, &load_events(b)?)?;
    let rows: Vec<Vec<String>> =
        Structure::ALL.iter().map(|&s| vec![s.name().to_string(), d.get(s).to_string()]).collect();
    Ok(table(&["structure", "deviations"], &rows))
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    if let Command::Run(a) | Command::Attack(a) | Command::Verify(a) = &cli.command {
        if let Some(j) = a.jobs {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
        }
    }
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Entropy(a) => cmd_entropy(a),
        Command::Cost(a) => cmd_cost(a),
        Command::TraceDiff { a, b } => cmd_trace_diff(a, b),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::toy_region;

    #[test]
    fn unknown_keys_rejected() {
        let e = Scenario::parse(r#"{"program": "halt", "colour": 1}"#).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
    }

    #[test]
    fn malformed_region() {
        let e = Scenario::parse(r#"{"region": {"start": "0x2000", "end": "0x1000", "subregion_len": "0x1000"}}"#)
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn region_defaults_to_toy() {
        let s = Scenario::parse("{}").unwrap();
        assert_eq!(s.region().unwrap(), toy_region(8));
    }

    #[test]
    fn missing_program() {
        let s = Scenario::parse("{}").unwrap();
        assert!(s.program().unwrap_err().to_string().contains("program"));
    }

    #[test]
    fn entropy_rows() {
        let args = EntropyArgs { preset: "kernel_text".into(), kind: None, k: None, n: None, m: None, csv: None };
        let rows = entropy_table(&args).unwrap();
        let get = |k| rows.iter().find(|r| r.0 == k).unwrap().1.clone();
        assert_eq!(get(StrategyKind::EnhancedOreo), ["17", "9", "8", "0"].map(String::from));
        assert_eq!(get(StrategyKind::DefaultBaseline), ["9", "9", "0", "0"].map(String::from));
    }

    #[test]
    fn structure_set_mismatch() {
        let a = vec![TraceEvent { step: 0, structure: Structure::Tlb, input: vec![1] }];
        let b = vec![TraceEvent { step: 0, structure: Structure::Bp, input: vec![1] }];
        assert!(diff_events(&a, &b).is_err());
        assert_eq!(diff_events(&a, &a).unwrap().total(), 0);
    }
}
