//! The two-strike filter on hand-written precision traces, under each
//! drop policy.
//!
//!     cargo run --example threshold_filtering

use std::collections::{BTreeMap, BTreeSet};

use phoenix::federation::{filter_step, DropPolicy, FilterRules, FilterState};

fn run(policy: DropPolicy, immediate: bool, trace: &[[f64; 4]]) -> phoenix::Result<()> {
    println!("policy {} immediate {immediate}", policy.label());
    let rules = FilterRules {
        immediate,
        min_active_clients: 2,
    };
    let mut state = FilterState::new(4, policy);
    for (r, round) in trace.iter().enumerate() {
        let metrics: BTreeMap<usize, f64> = round.iter().copied().enumerate().collect();
        let out = filter_step(&state, &metrics, &BTreeSet::new(), rules)?;
        let status: Vec<&str> = out.state.status.iter().map(|s| s.as_str()).collect();
        println!("  round {} {round:?} -> {status:?} {:?}", r + 1, out.events);
        state = out.state;
    }
    Ok(())
}

fn main() -> phoenix::Result<()> {
    let trace = [
        [0.82, 0.74, 0.91, 0.55],
        [0.80, 0.65, 0.90, 0.52],
        [0.85, 0.69, 0.88, 0.71],
        [0.83, 0.58, 0.90, 0.75],
    ];
    run(DropPolicy::LowestPrecision, false, &trace)?;
    run(DropPolicy::FixedThreshold(0.7), false, &trace)?;
    run(DropPolicy::FixedThreshold(0.6), false, &trace)?;
    run(DropPolicy::LowestPrecision, true, &trace)?;
    Ok(())
}
