//! Runs a bundled preset, shrunk to a few blocks, and writes per-run CSV and
//! JSON, a summary table and SVG figures.
//!
//!     cargo run --release --example preset_run -- [preset] [out_dir]

use std::path::PathBuf;

use poisonlink::cli::{self, RunArgs};

fn main() -> poisonlink::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "fig12".into());
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("poisonlink_preset"));
    let run_args = RunArgs {
        name: Some(name),
        blocks: Some(3),
        reps: Some(1),
        l_info: Some(1000),
        epochs: Some(10),
        ..Default::default()
    };
    let preset = match cli::load_preset(&run_args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(cli::EXIT_USAGE);
        }
    };
    let outcome = cli::execute(&preset, &out, true)?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    Ok(())
}
