//! Matches a jittered copy of the reference field back to the original.
//!
//! Run with `cargo run --release --example match_partitions`. Outputs go to the system
//! temp dir; pass a directory as the first argument to override.

use std::path::PathBuf;

use tetrastab::experiment::{run, Command, RunOptions};

fn main() {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/match_jittered.json");
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tetrastab-match"));
    faer::set_global_parallelism(faer::Par::Seq);
    let report = run(Command::Match, &RunOptions { config, out, seed: None }).expect("match run");
    println!("{}", report.summary.trim_end());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
}
