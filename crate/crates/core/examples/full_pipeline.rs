//! Every stage at desk scale: 60 road segments, 9000 simulated runs, one
//! quantile network, equalized calibration on curvature, gate and report.
//!
//! Usage: `cargo run --release --example full_pipeline [OUT_DIR]`

use capguard::pipeline::{HyperGrid, Pipeline, PipelineConfig, SelectOn, REPORT_FILE};

fn main() -> capguard::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "capguard-out".into());
    let cfg = PipelineConfig {
        n_segments: 60,
        n_cal: 2000,
        n_test: 2000,
        n_holdout: 0,
        select_on: SelectOn::Test,
        grid: HyperGrid {
            hidden: vec![vec![380, 380]],
            learning_rate: vec![5e-4],
            batch_size: vec![128],
        },
        out_dir: out.into(),
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(cfg)?;
    p.gen_roads()?;
    p.gen_data()?;
    p.diagnose()?;
    p.train()?;
    p.calibrate()?;
    p.evaluate()?;
    p.select()?;
    p.gate()?;
    p.report()?;
    print!("{}", std::fs::read_to_string(p.path(REPORT_FILE))?);
    Ok(())
}
