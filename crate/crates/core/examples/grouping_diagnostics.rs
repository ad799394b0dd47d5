//! Feature relevance and heteroscedasticity diagnostics on a simulated
//! dataset, and a scan of candidate curvature thresholds for grouping.

use capguard::dataset::{generate_dataset, sample_scenarios};
use capguard::featdiag::{diagnose, evaluate_thresholds, DiagnoseConfig};
use capguard::roadgeom::{generate_segments, SegmentGenConfig};
use capguard::vehiclesim::VehicleParams;

fn main() -> capguard::Result<()> {
    let segments = generate_segments(30, 3, &SegmentGenConfig::default())?;
    let ds = generate_dataset(&sample_scenarios(segments, 15, 10, 3)?, &VehicleParams::default(), "example")?;

    let report = diagnose(&ds, &DiagnoseConfig::default())?;
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| b.mi_nats.total_cmp(&a.mi_nats));
    println!("{:<14} {:>8} {:>6} {:>10} {:>10}", "feature", "MI", "mRMR", "BP F", "BF F");
    for r in &rows {
        println!(
            "{:<14} {:>8.4} {:>6} {:>10.2} {:>10.2}",
            r.feature,
            r.mi_nats,
            r.mrmr_rank,
            r.bp_f,
            r.bf_f.unwrap_or(f64::NAN)
        );
    }

    println!("\ncurvature threshold scan:");
    for t in evaluate_thresholds(&ds, &[0.001, 0.002, 0.003, 0.005, 0.01])? {
        println!(
            "  k > {:<6} n = {:>4}/{:<4} label var {:.4} / {:.4}  BF F {:.2}",
            t.threshold, t.n[0], t.n[1], t.label_variance[0], t.label_variance[1], t.bf_f
        );
    }
    Ok(())
}
