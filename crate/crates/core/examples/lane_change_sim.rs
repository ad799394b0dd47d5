//! Track a lane change with a healthy and a degraded steering system.
//!
//! Pass a directory to also write the 50 Hz traces as CSV.

use std::fs::File;

use capguard::roadgeom::RoadSegment;
use capguard::vehiclesim::{
    plan_reference, simulate_tracking, write_trace_csv, DegradationState, ManeuverTemplate, VehicleParams,
};

fn main() -> capguard::Result<()> {
    let out = std::env::args().nth(1);
    let params = VehicleParams::default();
    let road = RoadSegment::constant(0, 250.0, 0.004, 3.4);
    let maneuver = ManeuverTemplate::lane_change(1, 40.0, 4.0);
    let reference = plan_reference(&road, &maneuver, maneuver.target_speed_kmh)?;

    let mut slow_front = DegradationState::nominal();
    slow_front.steer_rate[0] = 0.15;
    slow_front.steer_rate[1] = 0.3;
    let cases = [
        ("nominal", DegradationState::nominal()),
        ("uniform 0.5", DegradationState::uniform(0.5)),
        ("slow front rate", slow_front),
        ("steering frozen", {
            let mut d = DegradationState::nominal();
            d.steer_angle = [0.0; 4];
            d.steer_rate = [0.0; 4];
            d
        }),
    ];
    for (name, deg) in cases {
        let sim = simulate_tracking(&road, &reference, &deg, &params, out.is_some())?;
        println!(
            "{name:<16} eps_lat_max = {:.3} m{}",
            sim.eps_lat_max,
            if sim.clipped { "  (clipped)" } else { "" }
        );
        if let (Some(dir), Some(trace)) = (&out, &sim.trace) {
            let path = std::path::Path::new(dir).join(format!("trace_{}.csv", name.replace(' ', "_")));
            write_trace_csv(File::create(&path)?, trace)?;
        }
    }
    Ok(())
}
