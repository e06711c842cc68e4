use oreo::addr::Mode;
use oreo::attacks::{self, Verdict, ATTACKS};
use oreo::machine::MachineConfig;
use oreo::uarch::Structure;

fn cfg() -> MachineConfig {
    MachineConfig::default()
}

fn expected(name: &str, mode: Mode) -> Verdict {
    match (name, mode) {
        ("spectre_probe", _) | (_, Mode::Baseline) => Verdict::Leak,
        _ => Verdict::NoLeak,
    }
}

#[test]
fn every_attack_every_layout() {
    for info in ATTACKS.iter().filter(|a| a.name != "prefetch_kernel") {
        let n = attacks::candidates(info.name).unwrap();
        for mode in Mode::ALL {
            let mut oreo_vectors = Vec::new();
            for planted in 0..n {
                let r = attacks::run_attack_at(info.name, mode, planted, &cfg()).unwrap();
                assert_eq!(r.verdict, expected(info.name, mode), "{} {:?} planted {planted}: {r:?}", info.name, mode);
                if r.verdict == Verdict::Leak {
                    assert_eq!(r.recovered, Some(planted));
                }
                if mode == Mode::Oreo && info.name != "spectre_probe" {
                    oreo_vectors.push(r.measurements());
                }
            }
            assert!(oreo_vectors.windows(2).all(|w| w[0] == w[1]), "{} measurements vary with layout", info.name);
        }
    }
}

#[test]
fn anc_baseline_profiles_differ_oreo_constant() {
    let base: Vec<_> = (0..8).map(|i| attacks::anc_profile(Mode::Baseline, i, true, &cfg()).unwrap()).collect();
    assert_ne!(base[0].evicted_sets(), base[1].evicted_sets());
    let oreo: Vec<_> = (0..8).map(|i| attacks::anc_profile(Mode::Oreo, i, true, &cfg()).unwrap()).collect();
    assert!(oreo.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn blindside_out_of_region_guess_deviates() {
    let region = attacks::toy_region();
    let valid = region.subregion_base(4).0 + 0x800;
    for mode in Mode::ALL {
        let a = attacks::blindside_trace(mode, 4, valid, &cfg()).unwrap();
        let b = attacks::blindside_trace(mode, 4, 0x7000_0000, &cfg()).unwrap();
        let d = attacks::trace_deviations(&a.events, &b.events);
        assert!(d.total() > 0, "{mode:?}");
    }
}

#[test]
fn blindside_deviation_counts() {
    let b = attacks::blindside_probe(Mode::Baseline, 2, &cfg()).unwrap().deviations.unwrap();
    for s in Structure::ALL {
        assert!(b.get(s) >= 1, "{s:?}");
    }
    let o = attacks::blindside_probe(Mode::Oreo, 2, &cfg()).unwrap().deviations.unwrap();
    assert_eq!(o.total(), 0);
}

#[test]
fn entrybleed_without_victim_finds_nothing() {
    let r = attacks::entrybleed_with(Mode::Baseline, 1, false, &cfg()).unwrap();
    assert_eq!(r.recovered, None);
    assert_eq!(r.verdict, Verdict::NoLeak);
}

#[test]
fn report_serialization() {
    let r = attacks::run_attack("prefetch", Mode::Baseline, 3, &cfg()).unwrap();
    let csv = r.csv();
    assert_eq!(csv.lines().count(), 1 + r.rows.len());
    assert!(csv.starts_with("index,addr,measurement"));
    let j = r.summary();
    assert_eq!(j["verdict"], "Leak");
    assert_eq!(j["planted"], r.planted);
}
