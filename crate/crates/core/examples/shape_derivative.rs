//! Shape derivative of the DtN pairing, volume and facet forms side by side.
//!
//! Run with `cargo run --release --example shape_derivative`. Outputs go to the system
//! temp dir; pass a directory as the first argument to override.

use std::path::PathBuf;

use tetrastab::experiment::{run, Command, RunOptions};

fn main() {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/derivative_reference.json");
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tetrastab-derivative"));
    faer::set_global_parallelism(faer::Par::Seq);
    let report = run(Command::Derivative, &RunOptions { config, out, seed: None }).expect("derivative run");
    println!("{}", report.summary.trim_end());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
}
