//! Acceptance criteria, one line per criterion. Criteria 1 and 5 also carry
//! wall-clock limits.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use d2cache_cli::selftest::{run_check, SelftestOptions, CHECK_COUNT};

fn time_limit(id: usize) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(10)),
        5 => Some(Duration::from_secs(30)),
        _ => None,
    }
}

fn main() -> ExitCode {
    let opts = SelftestOptions::default();
    let mut failed = 0;
    for id in 1..=CHECK_COUNT {
        let start = Instant::now();
        let mut outcome = run_check(id, &opts);
        let elapsed = start.elapsed();
        if let Some(limit) = time_limit(id) {
            if elapsed >= limit {
                outcome.passed = false;
                outcome.detail = format!("took {elapsed:.2?}, limit {limit:?}; {}", outcome.detail);
            }
        }
        if !outcome.passed {
            failed += 1;
        }
        println!("{outcome}");
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        CHECK_COUNT - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
