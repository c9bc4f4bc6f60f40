//! The metric suite on real toy images, on degraded copies, and on pure
//! noise, in both classifier-feature and pixel space.
//!
//!     cargo run --release --example metrics_suite

use phoenix::data::make_toy_dataset;
use phoenix::metrics::{frechet_distance, gaussian_stats, train_eval_classifier, FeatureSpace, Features, MetricsContext};
use phoenix::numeric::Tensor;
use phoenix::rng;

fn main() -> phoenix::Result<()> {
    let train = make_toy_dataset(4, 150, 8, 0)?;
    let reference = make_toy_dataset(4, 100, 8, 1)?;
    let fresh = make_toy_dataset(4, 64, 8, 2)?;
    let (clf, losses) = train_eval_classifier(&train, 8, 3)?;
    println!("classifier loss {:.4} -> {:.4}, held-out accuracy {:.3}", losses[0], losses[losses.len() - 1], clf.accuracy(&reference)?);

    let mut noisy = fresh.images().clone();
    let mut r = rng::substream(4, &[0]);
    let mut eps = Tensor::zeros(noisy.shape());
    rng::fill_normal(&mut r, eps.data_mut());
    for (v, e) in noisy.data_mut().iter_mut().zip(eps.data()) {
        *v = (*v + 0.6 * e).clamp(-1.0, 1.0);
    }
    let one_class = fresh.images().gather_rows(&(0..fresh.len()).filter(|i| i % 4 == 0).collect::<Vec<_>>())?;
    let noise = eps.map(|v| v.clamp(-1.0, 1.0));

    for space in [FeatureSpace::Classifier, FeatureSpace::Pixels] {
        let ctx = MetricsContext::new(clf.clone(), &reference, space, 3)?;
        println!("\n{space:?} features");
        println!("{:<12} {:>9} {:>7} {:>7} {:>7} {:>7}", "samples", "fid", "is", "prec", "recall", "tv");
        for (name, s) in [("fresh", fresh.images()), ("noisy", &noisy), ("one class", &one_class), ("noise", &noise)] {
            let r = ctx.report(s)?;
            println!(
                "{name:<12} {:>9.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                r.fid, r.is_mean, r.precision, r.recall, r.tv_distance
            );
        }
    }

    let a = Features::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]])?;
    let b = Features::from_rows(&[vec![2.0], vec![3.0], vec![1.0]])?;
    println!("\n1-D shift by 2: fid {}", frechet_distance(&gaussian_stats(&a)?, &gaussian_stats(&b)?)?);
    Ok(())
}
