//! Writes a synthetic choice-data CSV for trying out `matchlab fit`.
//!
//! Usage:
//!   cargo run --release -p matchlab --example synthetic_choices -- \
//!       OUT.csv [N_STUDENTS] [SEED] [acceptance|ranked]

use std::path::Path;

use matchlab::logit::{synthetic_dataset, FitMode};
use matchlab::rng::RngStream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(String::as_str).unwrap_or("choices.csv");
    let n: u32 = args
        .get(2)
        .map(|s| s.parse().expect("N_STUDENTS must be an integer"))
        .unwrap_or(5000);
    let seed: u64 = args
        .get(3)
        .map(|s| s.parse().expect("SEED must be an integer"))
        .unwrap_or(7);
    let mode = match args.get(4).map(String::as_str) {
        Some("ranked") => FitMode::Ranked,
        _ => FitMode::Acceptance,
    };
    let mut stream = RngStream::root(seed).fork(0);
    let (data, design, truth) = synthetic_dataset(n, 8, mode, &mut stream);
    data.write_csv(Path::new(out)).expect("writing the CSV failed");
    println!("wrote {} rows to {out}", data.rows.len());
    println!("generating coefficients:");
    for (name, value) in design.names.iter().zip(&truth) {
        println!("  {name:<20} {value:>8.4}");
    }
}
