use oreo::addr::Mode;
use oreo::machine::MachineConfig;
use oreo::memtable::build_page_table;
use oreo::verify::{check_lemma2, check_lemma2_with, check_suite, toy_region, toy_spec};

#[test]
fn oreo_probe_suite_has_no_counterexamples() {
    let spec = toy_spec(toy_region(8));
    let r = check_suite(&spec, Mode::Oreo, &MachineConfig::default()).unwrap();
    assert_eq!(r.precondition_violations(), 0);
    assert_eq!(r.mask_equiv_violations, 0);
    for p in &r.programs {
        assert!(p.distinguishable.is_empty(), "{:?}", p.distinguishable.first());
    }
}

#[test]
fn baseline_probe_suite_distinguishes_every_pair() {
    let spec = toy_spec(toy_region(8));
    let r = check_suite(&spec, Mode::Baseline, &MachineConfig::default()).unwrap();
    assert_eq!(r.precondition_violations(), 0);
    assert_eq!(r.mask_equiv_violations, 0);
    assert_eq!(r.pairs(), 28);
    assert_eq!(r.distinguishable_pairs(), 28);
}

#[test]
fn lemma2_holds_for_sixteen_subregions() {
    let r = check_lemma2(&toy_spec(toy_region(16)), &MachineConfig::default()).unwrap();
    assert_eq!(r.layouts, 16);
    assert_eq!(r.pairs_checked, 120);
    assert!(r.holds());
}

#[test]
fn lemma2_single_subregion_is_vacuous() {
    let r = check_lemma2(&toy_spec(toy_region(1)), &MachineConfig::default()).unwrap();
    assert_eq!(r.pairs_checked, 0);
    assert!(r.holds());
}

#[test]
fn lemma2_catches_unmasked_tables() {
    // Baseline tables map the program at its randomized address only.
    let cfg = MachineConfig::default();
    let r = check_lemma2_with(&toy_spec(toy_region(8)), |l| build_page_table(l, Mode::Baseline, cfg.pt)).unwrap();
    assert!(!r.holds());
}
