//! Marginal versus group-wise calibration when one group is much noisier and
//! the predictor cannot tell the groups apart.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use capguard::conformal::{
    calibrate_scores, conformity_score, coverage_report, histogram_svg, length_histogram, CalibrationMode,
};
use capguard::quantnet::{train, TrainConfig};
use capguard::util::seeded_rng;

struct Data {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    g: Vec<usize>,
}

fn sample(n: usize, seed: u64) -> Data {
    let mut rng = seeded_rng(seed);
    let mut d = Data { x: vec![], y: vec![], g: vec![] };
    for _ in 0..n {
        let x: f64 = rng.random_range(0.0..1.0);
        let g = usize::from(rng.random_bool(0.3));
        let e: f64 = StandardNormal.sample(&mut rng);
        let sigma = (0.05 + 0.1 * x) * if g == 1 { 4.0 } else { 1.0 };
        d.x.push(vec![x]);
        d.y.push((1.0 + x + sigma * e).abs());
        d.g.push(g);
    }
    d
}

fn main() -> capguard::Result<()> {
    let (tr, cal, test) = (sample(5000, 1), sample(2000, 2), sample(4000, 3));
    let model = train(&tr.x, &tr.y, &TrainConfig { hidden: vec![64, 64], learning_rate: 1e-3, ..TrainConfig::default() })?;

    let pc = model.predict_batch(&cal.x)?;
    let scores: Vec<f64> = pc.iter().zip(&cal.y).map(|(&(l, h), &y)| conformity_score(l, h, y)).collect();
    let pt = model.predict_batch(&test.x)?;

    let mut hists = Vec::new();
    for (name, mode) in [("marginal", CalibrationMode::Marginal), ("equalized", CalibrationMode::Equalized)] {
        let (groups, n) = match mode {
            CalibrationMode::Marginal => (vec![0; scores.len()], 1),
            CalibrationMode::Equalized => (cal.g.clone(), 2),
        };
        let calib = calibrate_scores(&scores, &groups, n, 0.1, mode)?;
        let intervals = pt
            .iter()
            .zip(&test.g)
            .map(|(&(l, h), &g)| calib.interval(l, h, if n == 1 { 0 } else { g }))
            .collect::<capguard::Result<Vec<_>>>()?;
        let r = coverage_report(&intervals, &test.y, &test.g)?;
        println!(
            "{name:<10} all {:.3}  quiet {:.3}  noisy {:.3}  p90 length {:.3}",
            r.marginal,
            r.per_group[&0].coverage,
            r.per_group[&1].coverage,
            r.length_percentile(90.0).unwrap_or(f64::NAN)
        );
        hists.push((name, length_histogram(&intervals, 25, 2.0)));
    }
    let path = std::env::temp_dir().join("capguard_example_lengths.svg");
    std::fs::write(&path, histogram_svg("Interval lengths", &hists))?;
    println!("wrote {}", path.display());
    Ok(())
}
