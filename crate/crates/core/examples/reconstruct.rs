//! Landweber recovery of interior vertices from DtN data after a random jitter.
//!
//! Run with `cargo run --release --example reconstruct`. Outputs go to the system
//! temp dir; pass a directory as the first argument to override.

use std::path::PathBuf;

use tetrastab::experiment::{run, Command, RunOptions};

fn main() {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/reconstruct_jitter.json");
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tetrastab-reconstruct"));
    faer::set_global_parallelism(faer::Par::Seq);
    let report = run(Command::Reconstruct, &RunOptions { config, out, seed: None }).expect("reconstruct run");
    println!("{}", report.summary.trim_end());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
}
