//! Runs every stage of an experiment config and prints the report.
//!
//! cargo run --release --example pipeline -- configs/smoke.toml [output-root]

use std::path::PathBuf;

use rml_adapt::harness::{ExperimentConfig, Pipeline};

fn main() -> rml_adapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(args.next().unwrap_or_else(|| "configs/smoke.toml".into()));
    let cfg = ExperimentConfig::load(&config)?;
    cfg.validate()?;
    let root = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rml-adapt-example"));
    let p = Pipeline::with_root(cfg, &root);
    for stage in p.stages() {
        println!("{stage}: {:?}", p.run(stage)?);
    }
    println!("{}", std::fs::read_to_string(p.path("reports/report.md"))?);
    Ok(())
}
