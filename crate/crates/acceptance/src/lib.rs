//! The acceptance criteria as runnable checks. Each returns an [`Outcome`]
//! carrying the measured values so the runner can print one line per
//! criterion.

pub mod contracts;
pub mod geometry;
pub mod gradients;
pub mod learning;
pub mod losses;
pub mod metrics;

use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into(), elapsed: Duration::ZERO }
    }
}

/// Runs `f`, records its wall time and fails it when over `budget`.
pub fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    o.elapsed = t.elapsed();
    if o.elapsed > budget {
        o.passed = false;
        o.detail += &format!("; over budget {:.0?} > {:.0?}", o.elapsed, budget);
    }
    o
}

/// Collects sub-check failures into one outcome.
#[derive(Default)]
pub struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    pub fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    pub fn finish(self) -> Outcome {
        let mut parts = self.notes;
        if !self.failures.is_empty() {
            parts.push(format!("FAILED: {}", self.failures.join("; ")));
        }
        Outcome::new(self.failures.is_empty(), parts.join(", "))
    }
}
