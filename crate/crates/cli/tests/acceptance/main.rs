//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 3 10`.

use std::process::ExitCode;
use std::time::Instant;

#[path = "../../../core/tests/support/mod.rs"]
mod support;

mod ablation;
mod algebra;
mod determinism;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient suite", algebra::gradient_suite),
    (2, "oracle equivalence", algebra::oracle_equivalence),
    (3, "reductions", algebra::reductions),
    (4, "refinement algebra", algebra::refinement_algebra),
    (5, "permutation equivariance", algebra::permutation_equivariance),
    (6, "component ablation", ablation::components),
    (7, "iterative refinement", ablation::iterative),
    (8, "salience re-ranking pl-AP", ablation::reranking),
    (9, "seesaw beta trade-off", ablation::debiasing),
    (10, "determinism", determinism::run),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failed += !outcome.passed as usize;
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
