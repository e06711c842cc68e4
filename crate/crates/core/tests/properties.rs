use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use oreo::addr::{
    mask2valid, oblivious_bits, virt2mask, virt2mask_formula, MaskedAddr, Mode, PhysAddr, RandRegion, VirtAddr,
    PAGE_SIZE,
};
use oreo::layout::{FixedMapping, Layout, LayoutSpec, Perms};
use oreo::machine::{reference_run, Inst, Machine, MachineConfig, Operand, Privilege, Program, Status};
use oreo::uarch::{CacheMeta, CachePath, Geometry, HitLevel, LatencyTable, Tlb, TlbEntry, UarchConfig};
use oreo::verify::{func_equiv, obs_equiv};

// Masking algebra.

fn region_strategy() -> impl Strategy<Value = RandRegion> {
    (12u32..=24, 1u32..=8, any::<u64>(), any::<u64>()).prop_map(|(shift, m, count_seed, hi)| {
        let max = 1u64 << m;
        let count = (max / 2) + 1 + count_seed % (max / 2).max(1);
        let count = count.min(max).max(2);
        let span = shift + m;
        let room = 47 - span;
        let start = 0xffff_8000_0000_0000 | ((hi % (1 << room)) << span);
        RandRegion::with_subregions(0, VirtAddr(start), shift, count).unwrap()
    })
}

fn in_region(r: &RandRegion, x: u64) -> VirtAddr {
    VirtAddr(r.start().0 + x % (r.end().0 - r.start().0))
}

proptest! {
    #[test]
    fn masking_idempotent_and_reconstructs(r in region_strategy(), x in any::<u64>()) {
        let regions = [r];
        let v = in_region(&r, x);
        let w = virt2mask(v, &regions);
        prop_assert_eq!(virt2mask(VirtAddr(w.0), &regions), w);
        prop_assert_eq!(virt2mask_formula(v, &regions), w);
        prop_assert_eq!(w.0 & r.protected_mask(), 0);
        let off = oblivious_bits(v, &regions);
        prop_assert_eq!(mask2valid(w, off, &r).unwrap(), v);
        // Masking removes exactly the protected bits.
        prop_assert_eq!(w.0 | off, v.0);
    }

    #[test]
    fn masking_is_identity_outside(r in region_strategy(), v in any::<u64>()) {
        prop_assume!(!r.contains(VirtAddr(v)));
        prop_assert_eq!(virt2mask(VirtAddr(v), &[r]), MaskedAddr(v));
    }

    #[test]
    fn mask_collision_class_is_one_per_subregion(r in region_strategy(), x in any::<u64>()) {
        let inner = x % r.subregion_len();
        let images: HashSet<MaskedAddr> =
            (0..r.subregions()).map(|i| virt2mask(VirtAddr(r.subregion_base(i).0 + inner), &[r])).collect();
        prop_assert_eq!(images.len(), 1);
        let m = r.protected_bits();
        if r.subregions() == 1 << m {
            let w = *images.iter().next().unwrap();
            let preimages = (0..1u64 << m).filter(|i| virt2mask(VirtAddr(w.0 | (i << r.protected_lo())), &[r]) == w).count();
            prop_assert_eq!(preimages as u64, 1 << m);
        }
    }
}

// LRU oracle: per-set timestamps instead of ordered lists.

#[derive(Default)]
struct LruOracle {
    ways: usize,
    sets: u64,
    clock: u64,
    lines: BTreeMap<u64, BTreeMap<u64, u64>>,
}

impl LruOracle {
    fn new(g: Geometry) -> Self {
        Self { ways: g.ways as usize, sets: g.entries / g.ways, ..Default::default() }
    }

    /// Returns (hit, evicted).
    fn access(&mut self, tag: u64) -> (bool, Option<u64>) {
        self.clock += 1;
        let set = self.lines.entry(tag % self.sets).or_default();
        if let Some(t) = set.get_mut(&tag) {
            *t = self.clock;
            return (true, None);
        }
        let mut evicted = None;
        if set.len() == self.ways {
            let (&victim, _) = set.iter().min_by_key(|(_, &t)| t).unwrap();
            set.remove(&victim);
            evicted = Some(victim);
        }
        set.insert(tag, self.clock);
        (false, evicted)
    }

    fn contains(&self, tag: u64) -> bool {
        self.lines.get(&(tag % self.sets)).is_some_and(|s| s.contains_key(&tag))
    }
}

proptest! {
    #[test]
    fn tlb_matches_lru_oracle(tags in prop::collection::vec(0u64..48, 1..400)) {
        let g = Geometry { entries: 16, ways: 4 };
        let mut tlb = Tlb::new(g);
        let mut oracle = LruOracle::new(g);
        for &t in &tags {
            let hit = tlb.access(t).is_some();
            let evicted = if hit { None } else {
                tlb.fill(TlbEntry { tag: t, ppn: t, perms: Perms::KERNEL_RX, offset: 0 }).map(|e| e.tag)
            };
            prop_assert_eq!((hit, evicted), oracle.access(t));
        }
        for t in 0..48 {
            prop_assert_eq!(tlb.peek(t).is_some(), oracle.contains(t));
        }
    }

    #[test]
    fn cache_levels_match_lru_oracle(lines in prop::collection::vec((0u64..4096, any::<bool>()), 1..600)) {
        let mut cfg = UarchConfig::default();
        cfg.l1i.size = 2 << 10;
        cfg.l1d.size = 2 << 10;
        cfg.l2.size = 16 << 10;
        let mut meta = CacheMeta::new(&cfg).unwrap();
        let geom = |c: oreo::uarch::CacheGeometry| Geometry { entries: c.size / c.line, ways: c.ways };
        let (mut l1i, mut l1d, mut l2) =
            (LruOracle::new(geom(cfg.l1i)), LruOracle::new(geom(cfg.l1d)), LruOracle::new(geom(cfg.l2)));
        let lat = LatencyTable::default();
        for &(line, inst) in &lines {
            let paddr = line * 64 + 8;
            let (path, l1) = if inst { (CachePath::Inst, &mut l1i) } else { (CachePath::Data, &mut l1d) };
            let want = if l1.access(line).0 {
                HitLevel::L1
            } else if l2.access(line).0 {
                HitLevel::L2
            } else {
                HitLevel::Dram
            };
            let (got, cycles) = meta.touch(path, paddr, &lat);
            prop_assert_eq!(got, want);
            let expect_cycles = match want { HitLevel::L1 => lat.l1_hit, HitLevel::L2 => lat.l2_hit, HitLevel::Dram => lat.dram };
            prop_assert_eq!(cycles, expect_cycles);
        }
    }
}

// Random programs against the in-order reference.

const DATA_V: u64 = 0x0000_0000_0010_0000;
const DATA_P: u64 = 0x0080_0000;
const REGION_START: u64 = 0xffff_ffff_c000_0000;
const JUMP_REG: u8 = 14;

fn region() -> RandRegion {
    RandRegion::with_subregions(0, VirtAddr(REGION_START), 16, 8).unwrap()
}

fn spec() -> LayoutSpec {
    let mut s = LayoutSpec::new(region(), 2 * PAGE_SIZE);
    s.fixed.push(FixedMapping {
        vstart: VirtAddr(DATA_V),
        len: PAGE_SIZE,
        pbase: PhysAddr(DATA_P),
        perms: Perms::USER_RW,
    });
    s
}

fn layouts() -> Vec<Layout> {
    spec().enumerate().unwrap().layouts
}

fn reg() -> impl Strategy<Value = u8> {
    0u8..8
}

/// Address-ish immediates: data words, in-region words at fixed offsets (valid in
/// one layout only), unmapped and kernel-text-of-another-subregion addresses.
fn imm() -> impl Strategy<Value = u64> {
    prop_oneof![
        (0u64..16).prop_map(|k| DATA_V + 8 * k),
        (0u64..8, 0u64..8).prop_map(|(s, k)| REGION_START + (s << 16) + 8 * k),
        Just(0x7000_0000u64),
        Just(DATA_V + PAGE_SIZE),
        0u64..4,
    ]
}

fn inst(with_timer: bool) -> impl Strategy<Value = Inst> {
    let timer = if with_timer { 2 } else { 0 };
    prop_oneof![
        2 => Just(Inst::Nop),
        4 => (reg(), imm()).prop_map(|(r, x)| Inst::MovImm(r, x)),
        1 => (1i64..4).prop_map(Inst::DirectBranch),
        3 => (1i64..4, reg()).prop_map(|(o, r)| Inst::CondBranch(o, r)),
        1 => Just(Inst::IndirectJump(JUMP_REG)),
        4 => (reg(), reg()).prop_map(|(d, a)| Inst::Load(d, a)),
        3 => (reg(), reg()).prop_map(|(a, s)| Inst::Store(a, s)),
        1 => reg().prop_map(Inst::Prefetch),
        1 => Just(Inst::Halt),
        timer => (8u8..14).prop_map(Inst::ReadTimer),
    ]
}

/// Programs always terminate: branches only go forward and the indirect
/// jump register holds the address of the final `halt`.
fn program(with_timer: bool) -> impl Strategy<Value = Program> {
    (prop::collection::vec(inst(with_timer), 1..24), prop::collection::vec(imm(), 4), 0u64..24).prop_map(
        |(mut insts, pre, code_disp)| {
            insts.push(Inst::Halt);
            let last = (insts.len() as u64 - 1) * 4;
            let mut p = Program::new(insts).with_preload(JUMP_REG, Operand::Base(last));
            for (r, x) in pre.into_iter().enumerate() {
                p = p.with_preload(r as u8, Operand::Const(x));
            }
            // A code-relative pointer, identical across layouts up to the offset.
            p.with_preload(4, Operand::Base(code_disp * 4))
        },
    )
}

const BUDGET: u64 = 5_000;

fn cfg() -> MachineConfig {
    MachineConfig::default().observing().with_events()
}

fn check_against_reference(p: &Program, layout: &Layout, mode: Mode) -> Result<(), TestCaseError> {
    let t = Machine::init(p, layout, mode, &cfg()).unwrap().run_trace(BUDGET);
    let r = reference_run(p, layout, Privilege::Kernel, BUDGET).unwrap();
    prop_assert_ne!(t.status, Status::Budget, "{}", p);
    prop_assert_eq!(matches!(t.status, Status::Crashed { .. }), r.crashed, "{}", p);
    prop_assert_eq!(t.commits, r.commits, "{}", p);
    prop_assert_eq!(t.regs, r.regs, "{}", p);
    prop_assert_eq!(&t.data, &r.data, "{}", p);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn squash_soundness(p in program(false), index in 0usize..8) {
        let l = &layouts()[index];
        for mode in Mode::ALL {
            check_against_reference(&p, l, mode)?;
        }
    }
}

#[test]
fn squash_soundness_exhaustive_small() {
    let alphabet = [
        Inst::Nop,
        Inst::MovImm(1, 0),
        Inst::MovImm(2, DATA_V + 8),
        Inst::CondBranch(2, 1),
        Inst::CondBranch(2, 3),
        Inst::IndirectJump(JUMP_REG),
        Inst::Load(1, 0),
        Inst::Load(5, 4),
        Inst::Store(0, 3),
        Inst::Store(2, 0),
        Inst::Prefetch(6),
        Inst::Halt,
    ];
    let l = layouts();
    let mut n = 0;
    for a in alphabet {
        for b in alphabet {
            for c in alphabet {
                let p = Program::new(vec![a, b, c, Inst::Halt])
                    .with_preload(JUMP_REG, Operand::Base(12))
                    .with_preload(0, Operand::Const(DATA_V))
                    .with_preload(3, Operand::Const(7))
                    .with_preload(4, Operand::Base(4))
                    .with_preload(6, Operand::Const(REGION_START + (1 << 16)));
                for mode in Mode::ALL {
                    check_against_reference(&p, &l[3], mode).unwrap();
                }
                n += 1;
            }
        }
    }
    assert_eq!(n, 12 * 12 * 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn timer_strictly_increases(mut insts in prop::collection::vec(prop_oneof![
        Just(Inst::Nop),
        (reg(), reg()).prop_map(|(d, a)| Inst::Load(d, a)),
        (reg(), reg()).prop_map(|(a, s)| Inst::Store(a, s)),
        reg().prop_map(Inst::Prefetch),
        reg().prop_map(|r| Inst::CondBranch(1, r)),
    ], 0..30), slots in prop::collection::vec(0usize..30, 2..6), index in 0usize..8) {
        let mut timers = Vec::new();
        for (k, s) in slots.iter().enumerate() {
            let at = (*s).min(insts.len());
            insts.insert(at, Inst::ReadTimer(8 + k as u8));
        }
        for (i, inst) in insts.iter().enumerate() {
            if let Inst::ReadTimer(r) = inst {
                timers.push((i, *r));
            }
        }
        insts.push(Inst::Halt);
        let p = Program::new(insts)
            .with_preload(0, Operand::Const(DATA_V))
            .with_preload(1, Operand::Const(1))
            .with_preload(2, Operand::Const(0x7000_0000));
        for mode in Mode::ALL {
            let t = Machine::init(&p, &layouts()[index], mode, &cfg()).unwrap().run_trace(BUDGET);
            if t.status != Status::Halted {
                continue;
            }
            let values: Vec<u64> = timers.iter().map(|&(_, r)| t.regs[r as usize]).collect();
            prop_assert!(values.windows(2).all(|w| w[0] < w[1]), "{:?} {}", values, p);
            prop_assert!(values[0] > 0);
        }
    }

    /// Oreo keys never carry protected bits, and pairs meeting the
    /// functional-equivalence precondition are indistinguishable, crashes included.
    #[test]
    fn oreo_masking_and_noninterference(p in program(false), i in 0usize..8, j in 0usize..8) {
        let l = layouts();
        let regions = l[0].regions();
        let ta = Machine::init(&p, &l[i], Mode::Oreo, &cfg()).unwrap().run_trace(BUDGET);
        let tb = Machine::init(&p, &l[j], Mode::Oreo, &cfg()).unwrap().run_trace(BUDGET);
        for e in ta.events.iter().chain(&tb.events) {
            for &v in e.virtual_inputs() {
                prop_assert_eq!(oblivious_bits(VirtAddr(v), &regions), 0, "{:?}", e);
            }
        }
        if func_equiv(&ta.requests, &tb.requests, &l[i], &l[j]).holds {
            prop_assert!(obs_equiv(&ta, &tb).holds, "{}", p);
            prop_assert_eq!(ta.crash_step(), tb.crash_step());
            prop_assert_eq!(&ta.events, &tb.events);
        }
    }

    #[test]
    fn runs_are_deterministic(p in program(true), i in 0usize..8) {
        let l = &layouts()[i];
        for mode in Mode::ALL {
            let a = Machine::init(&p, l, mode, &cfg()).unwrap().run_trace(BUDGET);
            let b = Machine::init(&p, l, mode, &cfg()).unwrap().run_trace(BUDGET);
            prop_assert_eq!(&a.requests, &b.requests);
            prop_assert_eq!(&a.observations, &b.observations);
            prop_assert_eq!(&a.events, &b.events);
            prop_assert_eq!(a.total_cycles, b.total_cycles);
        }
    }
}
