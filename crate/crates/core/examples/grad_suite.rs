//! Runs the finite-difference gradient suite: `cargo run --release --example grad_suite`.

use memir_core::diagnostics::{gradient_suite, SuiteConfig};

fn main() -> memir_core::Result<()> {
    for c in gradient_suite(&SuiteConfig::default())? {
        println!(
            "{:<18} seeds {:>3}  entries {:>7}  max rel err {:.2e}  {:.1}s  {}",
            c.name,
            c.seeds,
            c.entries_checked,
            c.max_rel_error,
            c.seconds,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
