//! Fit the two-headed quantile network to heteroscedastic data and check how
//! often labels fall under each head.

use rand::Rng;

use capguard::quantnet::{train_logged, QuantileModel, TrainConfig};
use capguard::util::seeded_rng;

fn sample(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = seeded_rng(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    // Non-negative labels whose spread grows with the first input.
    let y = x.iter().map(|r| 0.2 + 0.3 * r[1] + r[0] * rng.random_range(0.0..0.5)).collect();
    (x, y)
}

fn main() -> capguard::Result<()> {
    let (x, y) = sample(4000, 1);
    let cfg = TrainConfig {
        hidden: vec![64, 64],
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (model, log) = train_logged(&x, &y, &cfg)?;
    let last = log.last().expect("at least one epoch");
    println!(
        "{} epochs, best at {}, validation pinball {:.5} (last epoch train {:.5})",
        model.meta.epochs_run, model.meta.best_epoch, model.meta.val_loss, last.train_loss
    );

    let (xt, yt) = sample(2000, 2);
    let pred = model.predict_batch(&xt)?;
    let below = |head: fn(&(f64, f64)) -> f64| {
        pred.iter().zip(&yt).filter(|(p, y)| **y <= head(p)).count() as f64 / yt.len() as f64
    };
    println!("fraction below lower head {:.3} (target 0.05)", below(|p| p.0));
    println!("fraction below upper head {:.3} (target 0.95)", below(|p| p.1));

    let path = std::env::temp_dir().join("capguard_example_model.json");
    model.save(&path)?;
    let back = QuantileModel::load(&path)?;
    assert_eq!(back.predict(&xt[0])?, model.predict(&xt[0])?);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
