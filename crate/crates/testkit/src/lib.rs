//! Reference oracles and acceptance checks.
//!
//! Everything here recomputes expected values independently of the code
//! under test: brute-force memory consolidation, central finite
//! differences, Monte-Carlo moments and perturbation probes.

pub mod causality;
pub mod criteria;
pub mod fixtures;
pub mod gradcheck;
pub mod memory_ref;
pub mod moments;

use std::time::Instant;

/// Result of one acceptance check.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {} ({:.1} s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Runs `f`, timing it and failing the check if it exceeds `budget_s`.
pub fn timed(name: &str, budget_s: f64, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    let in_budget = seconds <= budget_s;
    let detail = if in_budget {
        detail
    } else {
        format!("{detail}; over the {budget_s:.0} s budget")
    };
    Outcome {
        name: name.to_string(),
        pass: ok && in_budget,
        detail,
        seconds,
    }
}
