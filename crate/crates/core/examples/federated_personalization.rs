//! Personalization layers plus threshold filtering on the desk preset:
//! clients keep the last decoder block private, and the server warns and
//! then disconnects the client with the lowest sample precision.
//!
//!     cargo run --release --example federated_personalization -- [out_dir]

use phoenix::federation::DropPolicy;
use phoenix::pipeline::{run_pipeline, RunConfig};

fn main() -> phoenix::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = RunConfig::desk();
    config.output_dir = std::env::args().nth(1).unwrap_or_else(|| "out/personalization".into()).into();
    config.run_id = "personalization_filtering".into();
    config.federation.personalization = true;
    config.federation.threshold_filtering = true;
    config.federation.drop_policy = DropPolicy::LowestPrecision;

    let summary = run_pipeline(&config)?;
    let log = std::fs::read_to_string(config.run_dir().join("runlog.csv")).map_err(|e| phoenix::Error::io(config.run_dir(), e))?;
    print!("{log}");
    for (round, event) in &summary.events {
        println!("round {round}: {event:?}");
    }
    println!("disconnected: {:?}", summary.disconnected);
    println!("{:#?}", summary.report);
    Ok(())
}
