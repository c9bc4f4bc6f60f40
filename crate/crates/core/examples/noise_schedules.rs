//! Prints the linear and cosine variance schedules and noises one toy image
//! at a few steps.
//!
//!     cargo run --example noise_schedules

use phoenix::data::make_toy_dataset;
use phoenix::diffusion::{make_schedule, q_sample_closed, ScheduleKind};
use phoenix::numeric::Tensor;
use phoenix::rng;

fn main() -> phoenix::Result<()> {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = make_schedule(kind, 1000)?;
        println!("{kind:?}, T = 1000");
        println!("{:>6} {:>10} {:>10} {:>12}", "t", "beta", "alpha_bar", "post. var");
        for t in [1, 10, 100, 250, 500, 750, 900, 1000] {
            println!(
                "{t:>6} {:>10.6} {:>10.6} {:>12.3e}",
                s.beta(t),
                s.alpha_bar(t),
                s.posterior_variance(t)
            );
        }
        println!();
    }

    let s = make_schedule(ScheduleKind::Cosine, 50)?;
    let img = make_toy_dataset(4, 1, 8, 0)?.images().gather_rows(&[1])?;
    let mut noise = Tensor::zeros(img.shape());
    rng::fill_normal(&mut rng::substream(1, &[0]), noise.data_mut());
    for t in [0, 5, 15, 30, 50] {
        let x = q_sample_closed(&img, t, &s, &noise)?;
        println!("t = {t}");
        for row in x.data().chunks(8) {
            let line: String = row
                .iter()
                .map(|&v| match v {
                    v if v > 0.5 => '#',
                    v if v > 0.0 => '+',
                    v if v > -0.5 => '.',
                    _ => ' ',
                })
                .collect();
            println!("  {line}");
        }
    }
    Ok(())
}
