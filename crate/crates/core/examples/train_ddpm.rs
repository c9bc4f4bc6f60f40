//! Centralized DDPM training on the toy dataset, then sampling and scoring.
//!
//!     cargo run --release --example train_ddpm -- [steps] [out_dir]

use std::path::PathBuf;

use phoenix::data::make_toy_dataset;
use phoenix::denoiser::{build_unet, save_checkpoint, DenoiserConfig};
use phoenix::diffusion::{generate, keyed_noise_batch, make_schedule, training_loss, write_image, ScheduleKind};
use phoenix::metrics::{train_eval_classifier, FeatureSpace, MetricsContext};
use phoenix::numeric::{adam_step, AdamState};

fn main() -> phoenix::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(1500, |s| s.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train_ddpm".into()));
    std::fs::create_dir_all(&out).map_err(|e| phoenix::Error::io(&out, e))?;

    let data = make_toy_dataset(4, 200, 8, 1)?;
    let reference = make_toy_dataset(4, 100, 8, 2)?;
    let config = DenoiserConfig::desk();
    let schedule = make_schedule(ScheduleKind::Cosine, 50)?;
    let mut model = build_unet(&config, 0)?;
    println!("{} parameters", model.param_count());

    let mut adam = AdamState::new(2e-3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for step in 0..steps {
        if step * 32 % data.len() < 32 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut phoenix::rng::substream(3, &[step as u64]));
        }
        let start = step * 32 % data.len();
        let batch: Vec<usize> = (start..start + 32).map(|i| order[i % data.len()]).collect();
        let (x0, t, noise) = keyed_noise_batch(data.images(), &batch, schedule.steps(), 3, 0, step as u64)?;
        let (loss, grads) = training_loss(&model, &schedule, &x0, &t, &noise)?.loss_and_grad(&model.params)?;
        adam_step(&mut model.params, &grads, &mut adam)?;
        if step % 250 == 0 || step + 1 == steps {
            println!("step {step:>5}  loss {loss:.4}");
        }
    }
    save_checkpoint(&out.join("model.phxc"), &model.params)?;

    let samples = generate(&model, &schedule, &config.sample_shape(), 128, 9)?;
    for i in 0..16 {
        write_image(&out.join(format!("sample_{i:02}.pgm")), samples.row(i), 1, 8, 8)?;
    }
    let (clf, _) = train_eval_classifier(&data, 8, 0)?;
    let report = MetricsContext::new(clf, &reference, FeatureSpace::Classifier, 3)?.report(&samples)?;
    println!("{report:#?}");
    println!("wrote {}", out.display());
    Ok(())
}
