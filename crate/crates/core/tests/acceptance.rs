//! Acceptance criteria, one line each. Exits nonzero if any criterion fails.

use squash_core::validation::{run_check, ValidationConfig};

fn main() {
    // `cargo test -- --list` and filtered runs expect no work
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let cfg = ValidationConfig::default();
    let mut failed = 0;
    for id in 1..=10 {
        let record = run_check(id, &cfg).expect("check ids are 1 to 10");
        println!("{}", record.line());
        if record.failed() {
            failed += 1;
        }
    }
    println!("{failed} of 10 criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
