//! Prints the TOML of one randomized fault scenario, for replaying a seed
//! with `mercury-sim run`.
//!
//! cargo run --example random_scenario -- 42 > seed42.toml

use std::process::ExitCode;

use mercury_core::harness::suite;

fn main() -> ExitCode {
    let Some(seed) = std::env::args().nth(1).and_then(|a| a.parse::<u64>().ok()) else {
        eprintln!("usage: random_scenario <seed>");
        return ExitCode::from(2);
    };
    print!("{}", suite::randomized_seed(seed).to_toml());
    ExitCode::SUCCESS
}
