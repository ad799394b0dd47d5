//! Admit or reject lane changes from predicted deviation bounds.
//!
//! The first part feeds fixed bounds straight into the decision rule; the
//! second trains a small predictor and gates a real road segment.

use capguard::conformal::calibrate;
use capguard::dataset::{generate_dataset, sample_scenarios, split_dataset};
use capguard::featdiag::GroupingSpec;
use capguard::gate::{clearance, decide, evaluate_candidates, Calibrated, DEFAULT_ACCELS};
use capguard::quantnet::{train, TrainConfig};
use capguard::roadgeom::{generate_segments, RoadSegment, SegmentGenConfig};
use capguard::vehiclesim::{DegradationState, ManeuverTemplate, VehicleParams};

fn main() -> capguard::Result<()> {
    let clear = clearance(3.47, 1.96)?;
    println!("clearance on a 3.47 m lane: {clear:.3} m per side\n");
    for row in [[0.23, 0.25, 0.28, 0.30, 0.32], [0.45, 0.487, 0.49, 0.56, 0.87], [0.9; 5]] {
        let scored = DEFAULT_ACCELS
            .iter()
            .zip(row)
            .map(|(&a, e)| (ManeuverTemplate::lane_change(1, 30.0, a), Ok((e, false))))
            .collect();
        let d = decide(scored, 0.75);
        let verdicts: Vec<&str> = d.candidates.iter().map(|c| c.verdict.as_str()).collect();
        let chosen = if d.is_mrm() { "MRM".to_string() } else { format!("a = {}", d.chosen.a_lat_max) };
        println!("{row:?} -> {verdicts:?} -> {chosen}");
    }

    let params = VehicleParams::default();
    let segments = generate_segments(25, 11, &SegmentGenConfig::default())?;
    let ds = generate_dataset(&sample_scenarios(segments, 15, 10, 11)?, &params, "example")?;
    let (tr, cal, _) = split_dataset(&ds, 1000, 0, 11)?;
    let cfg = TrainConfig { hidden: vec![64, 64], learning_rate: 1e-3, ..TrainConfig::default() };
    let model = train(&tr.features(), &tr.labels(), &cfg)?;
    let calib = calibrate(&model, &cal, 0.1, &GroupingSpec::default())?;
    let bound = Calibrated { predictor: &model, calibration: &calib };

    let road = RoadSegment::straight(0, 200.0, 3.47);
    for (name, deg) in [("nominal", DegradationState::nominal()), ("uniform 0.2", DegradationState::uniform(0.2))] {
        let d = evaluate_candidates(&road, 30.0, 1, &DEFAULT_ACCELS, &deg, &bound, params.vehicle_width)?;
        println!("\n{name}:");
        d.write_csv(std::io::stdout())?;
    }
    Ok(())
}
