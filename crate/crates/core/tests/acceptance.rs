//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//!
//! `RWRP_ACCEPTANCE_PROFILE=quick` runs the reduced-budget profile.

use std::process::ExitCode;

use rwrp::verify::{run_suite, Profile, SuiteConfig};

fn main() -> ExitCode {
    let profile = std::env::var("RWRP_ACCEPTANCE_PROFILE")
        .ok()
        .and_then(|p| p.parse().ok())
        .unwrap_or(Profile::Desk);
    let cfg = SuiteConfig {
        profile,
        ..SuiteConfig::desk()
    };
    let results = run_suite(&cfg, |r| println!("{}", r.line()));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
