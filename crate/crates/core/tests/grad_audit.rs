use speechtext::audit::{audit, audit_all, DEFAULT_TOL, MODULES, MUTANT};

#[test]
fn every_registered_subgraph_passes_at_default_tolerance() {
    let results = audit_all(0, DEFAULT_TOL).unwrap();
    assert_eq!(results.len(), MODULES.len());
    for r in &results {
        println!("{:<24} max rel err {:.3e} at {} ({:.3e} vs {:.3e}, {} probes)", r.module, r.max_rel_error, r.worst, r.analytic, r.numeric, r.checked);
    }
    for r in &results {
        assert!(r.passed, "{} failed: {:.3e} at {}", r.module, r.max_rel_error, r.worst);
        assert!(r.checked > 0);
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in 1..4 {
        for r in audit_all(seed, DEFAULT_TOL).unwrap() {
            assert!(r.passed, "seed {seed}: {} failed: {:.3e} at {}", r.module, r.max_rel_error, r.worst);
        }
    }
}

#[test]
fn wrong_backward_is_caught() {
    let r = audit(MUTANT, 0, DEFAULT_TOL).unwrap();
    assert!(!r.passed);
    assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{}", r.max_rel_error);
    assert!(r.worst.starts_with("x["));
}

#[test]
fn unknown_module_is_a_config_error() {
    let e = audit("flux_capacitor", 0, DEFAULT_TOL).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("flux_capacitor"));
}
