//! Runs every acceptance criterion and prints one pass/fail line per criterion.
//! Set `ACCEPTANCE_SUITE=fast` to skip the training criteria during development.

use std::io::Write;
use std::path::PathBuf;

use rubric_aqa::acceptance::{run_acceptance, Suite, Thresholds};

fn main() {
    let suite = match std::env::var("ACCEPTANCE_SUITE").as_deref() {
        Ok("fast") => Suite::Fast,
        _ => Suite::Full,
    };
    let thresholds = Thresholds::builtin();
    println!("acceptance suite: {suite:?}");
    let report = run_acceptance(
        suite,
        &thresholds,
        |r| {
            println!("{}", r.line());
            std::io::stdout().flush().ok();
        },
        |msg| eprintln!("  {msg}"),
    );
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.json");
    if let Ok(text) = serde_json::to_string_pretty(&report) {
        std::fs::write(&out, text).ok();
        println!("report written to {}", out.display());
    }
    let failed = report.criteria.iter().filter(|c| !c.pass).count();
    println!("{} of {} criteria passed", report.criteria.len() - failed, report.criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
