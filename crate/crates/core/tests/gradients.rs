use pram_core::suites::{run_scope, Scope};

fn check(scope: Scope, tolerance: f64) {
    let report = run_scope(scope, tolerance, 7).unwrap();
    assert!(!report.cases.is_empty());
    assert!(report.passed(), "{scope} failed:\n{}", report.table());
}

#[test]
fn ops_pass_at_1e_6() {
    check(Scope::Ops, 1e-6);
}

#[test]
fn relation_module_passes_at_1e_6() {
    check(Scope::Pram, 1e-6);
}

#[test]
fn losses_pass_at_1e_6() {
    check(Scope::Losses, 1e-6);
}

#[test]
fn other_seeds_also_pass() {
    for seed in [1, 2] {
        for scope in [Scope::Ops, Scope::Pram, Scope::Losses] {
            let r = run_scope(scope, 1e-6, seed).unwrap();
            assert!(r.passed(), "{scope} seed {seed}:\n{}", r.table());
        }
    }
}

#[test]
fn impossible_tolerance_is_reported_not_raised() {
    let r = run_scope(Scope::Losses, 1e-15, 7).unwrap();
    assert!(!r.passed());
    assert!(r.table().contains("FAIL"));
    assert!(r.max_error() > 0.0);
}
