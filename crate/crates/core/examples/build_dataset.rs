//! Simulate a small scenario grid and split it into train, calibration and
//! test sets.

use capguard::dataset::{config_hash, generate_dataset, sample_scenarios, save_dataset, split_dataset};
use capguard::roadgeom::{generate_segments, SegmentGenConfig};
use capguard::util::{mean, percentile_sorted};
use capguard::vehiclesim::VehicleParams;

fn main() -> capguard::Result<()> {
    let ranges = SegmentGenConfig::default();
    let params = VehicleParams::default();
    let segments = generate_segments(12, 7, &ranges)?;
    let set = sample_scenarios(segments, 15, 10, 7)?;
    let ds = generate_dataset(&set, &params, &config_hash(&(&ranges, &params)))?;

    let mut y = ds.labels();
    y.sort_by(f64::total_cmp);
    let clipped = ds.samples.iter().filter(|s| s.clipped).count();
    println!("{} runs, {} clipped", ds.len(), clipped);
    println!(
        "label mean {:.3} m, median {:.3} m, p90 {:.3} m",
        mean(&y),
        percentile_sorted(&y, 50.0),
        percentile_sorted(&y, 90.0)
    );

    let (train, cal, test) = split_dataset(&ds, 300, 300, 7)?;
    println!("split: train {} / cal {} / test {}", train.len(), cal.len(), test.len());

    let path = std::env::temp_dir().join("capguard_example_dataset.csv");
    save_dataset(&ds, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
