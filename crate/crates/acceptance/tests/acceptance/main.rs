//! Acceptance criteria. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

mod common;
mod determinism;
mod emodm;
mod gradients;
mod mask;
mod metrics;
mod overfit;
mod priors;
mod service;

type Check = fn() -> Result<String, String>;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, Check); 9] = [
        (1, "gradient fidelity", gradients::run),
        (2, "prior oracle", priors::run),
        (3, "mask semantics", mask::run),
        (4, "overfit oracle", overfit::run),
        (5, "planted-shift emotion learning", emodm::run),
        (6, "metric oracles", metrics::run),
        (7, "fusion and gate identities", identities::run),
        (8, "determinism and persistence", determinism::run),
        (9, "service contract", service::run),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
