//! Admissibility checks and regularity constants for the two-tetrahedron field.
//!
//! Run with `cargo run --release --example partition_validate`. Outputs go to the system
//! temp dir; pass a directory as the first argument to override.

use std::path::PathBuf;

use tetrastab::experiment::{run, Command, RunOptions};

fn main() {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/validate_two_tet.json");
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tetrastab-validate"));
    faer::set_global_parallelism(faer::Par::Seq);
    let report = run(Command::Validate, &RunOptions { config, out, seed: None }).expect("validate run");
    println!("{}", report.summary.trim_end());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
}
