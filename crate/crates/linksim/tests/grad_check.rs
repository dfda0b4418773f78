//! Every primitive op's hand-written backward rule against central finite
//! differences. `fdcheck::run_op_suite` is also what the workspace acceptance
//! suite invokes, so this file doubles as its unit-level harness.

use linksim::autodiff::fdcheck::{self, REL_TOL};

#[test]
fn all_primitive_ops_match_finite_differences() {
    let reports = fdcheck::run_op_suite(0xC0FFEE).expect("op suite ran");
    assert!(reports.len() >= 20, "expected full op coverage, got {}", reports.len());
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "{:24} max rel err {:10.3e} over {:5} elements  {}",
            r.name,
            r.max_rel_err,
            r.checked_elements,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failures.push(r.name.clone());
        }
    }
    assert!(failures.is_empty(), "gradient mismatches in: {failures:?} (tol {REL_TOL})");
}

#[test]
fn suite_is_deterministic_in_seed() {
    let a = fdcheck::run_op_suite(7).unwrap();
    let b = fdcheck::run_op_suite(7).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
    }
}
