//! Runs the full pipeline on the toy generator and prints the comparison.
//!
//! `cargo run --release --example toy_experiment -- [micro|desk] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use jointdiff::pipeline::{cmd_pipeline, PipelineConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map(String::as_str).unwrap_or("micro");
    let config = match kind {
        "micro" => PipelineConfig::micro(),
        "desk" => PipelineConfig::desk(),
        other => {
            eprintln!("unknown preset {other:?} (micro or desk)");
            std::process::exit(2);
        }
    };
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| format!("target/toy_{kind}")));
    let start = Instant::now();
    match cmd_pipeline(&config, &out) {
        Ok(m) => {
            print!("{}", m.report.unwrap_or_default().to_table());
            println!("elapsed {:.1} s, artifacts in {}", start.elapsed().as_secs_f64(), out.display());
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
