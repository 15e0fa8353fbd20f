//! Acceptance criteria, run in sequence in one process.
//!
//! Each criterion prints one `PASS` or `FAIL` line. Positional arguments
//! select criteria by number (`cargo test --test acceptance -- 3 5`).

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

mod augmentation;
mod formulas;
mod gradients;
mod momentum;
mod sampler;
mod taxonomy;
mod training;

/// Detail on success, reason on failure.
pub type Outcome = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Converts a library error into a failure reason.
pub fn lib<T>(r: polypseg::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const CRITERIA: [(u32, &str, fn() -> Outcome); 10] = [
    (1, "formula oracles", formulas::run),
    (2, "gradient suite", gradients::run),
    (3, "taxonomy correctness", taxonomy::run),
    (4, "sampler constraint", sampler::run),
    (5, "augmentation consistency", augmentation::run),
    (6, "momentum semantics", momentum::run),
    (7, "overfit sanity", training::overfit),
    (8, "ablation wiring", training::ablations),
    (9, "resume determinism", training::resume),
    (10, "full-size config dry run", training::config_dry_run),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id:>2}] {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name} ({secs:.1}s): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
