//! Desk-scale comparison of the plain non-IID baseline with the
//! data-sharing strategy (warmup on a shared pool, then the pool's
//! α-subset merged into every client).
//!
//!     cargo run --release --example data_sharing -- [seed] [out_dir]

use phoenix::pipeline::{cmd_report, run_pipeline, PartitionSpec, RunConfig};

fn main() -> phoenix::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let out = args.next().unwrap_or_else(|| "out/data_sharing".into());

    let mut base = RunConfig::desk();
    base.output_dir = out.into();
    base.set_seed(seed);
    base.run_id = format!("non_iid_seed{seed}");
    let mut shared = base.clone();
    shared.run_id = format!("data_sharing_seed{seed}");
    shared.partition = PartitionSpec::DataSharing {
        beta_pct: 25.0,
        alpha_pct: 100.0,
        classes_per_client: 2,
    };

    let a = run_pipeline(&base)?;
    let b = run_pipeline(&shared)?;
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "run", "fid", "prec", "recall", "tv");
    for s in [&a, &b] {
        let r = &s.report;
        println!(
            "{:<24} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            s.run_id, r.fid, r.precision, r.recall, r.tv_distance
        );
    }
    cmd_report(&base, &[])?;
    println!("table written to {}", base.output_dir.join("report.csv").display());
    Ok(())
}
