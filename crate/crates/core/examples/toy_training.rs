//! Trains a small attention U-Net on 32^3 phantom ROIs and reports DICE.
//!
//! cargo run --release -p vesselseg --example toy_training -- [epochs]

use std::time::Instant;

use vesselseg::network::{build_unet, UNetSpec};
use vesselseg::phantom::{cohort_specs, generate_phantom, CohortJitter, PhantomSpec};
use vesselseg::training::{train_with, validate, Sample, TrainConfig};

fn main() -> vesselseg::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(200);
    let specs = cohort_specs(18, &PhantomSpec::toy(32), &CohortJitter::default(), 42)?;
    let mut samples = Vec::new();
    for (id, spec) in &specs {
        let p = generate_phantom(spec)?;
        samples.push(Sample::new(id.clone(), p.cta, p.gt_cta)?);
    }
    let test = samples.split_off(13);
    let valid = samples.split_off(10);
    let model = build_unet(&UNetSpec::new(3, 2, 8, true), 1)?;
    let cfg = TrainConfig {
        epochs,
        seed: 7,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (best, history) = train_with(model, &samples, &valid, &cfg, |r| {
        println!(
            "epoch {:4} loss {:.4} train {:.4} valid {:.4} ({:.0}s)",
            r.epoch,
            r.loss,
            r.train.combined,
            r.valid.as_ref().map_or(f64::NAN, |v| v.combined),
            t0.elapsed().as_secs_f64()
        );
    })?;
    let scores = validate(&best, &test, cfg.window)?;
    println!("best epoch {} held-out {:?}", history.best_epoch, scores);
    Ok(())
}
