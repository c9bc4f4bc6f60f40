use std::collections::BTreeSet;

use phoenix::data::make_toy_dataset;
use phoenix::denoiser::{build_unet, DenoiserConfig};
use phoenix::diffusion::{make_schedule, ScheduleKind};
use phoenix::federation::{
    assemble, fedavg, local_train, run_federation, ClientState, DiffusionObjective, FederationConfig, LocalOutcome,
    RunOutput,
};
use phoenix::numeric::NamedTensors;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Drives `rounds` rounds of personalized training on the desk U-Net by
/// hand, checking after each one that no personal tensor was uploaded,
/// that aggregation left every client's personal block bit-identical and
/// that the blocks differ between clients. Finally compares against
/// `run_federation` on the same inputs.
pub fn check_personal_block(rounds: usize) -> Result<(), String> {
    let e = |e: phoenix::Error| e.to_string();
    let model = DenoiserConfig::desk();
    let data = make_toy_dataset(4, 8, 8, 2).map_err(e)?;
    let schedule = make_schedule(ScheduleKind::Cosine, 10).map_err(e)?;
    let objective = DiffusionObjective {
        config: &model,
        schedule: &schedule,
        data: &data,
        seed: 4,
    };
    let config = FederationConfig {
        client_count: 4,
        server_rounds: rounds,
        local_epochs: 1,
        batch_size: 8,
        personalization: true,
        record_wall_time: false,
        eval_start_round: 1,
        seed: 4,
        ..FederationConfig::desk()
    };
    let initial = build_unet(&model, 4).map_err(e)?.params;
    let personal: BTreeSet<String> = initial.personal_names().into_iter().collect();
    ensure!(!personal.is_empty(), "no personal parameters");
    ensure!(
        personal.iter().all(|n| n.starts_with(&format!("{}.", model.personal_prefix()))),
        "personal names outside {}",
        model.personal_prefix()
    );
    let lists: Vec<Vec<usize>> = (0..4).map(|c| (0..32).filter(|i| i % 4 == c).collect()).collect();

    let mut clients: Vec<ClientState> =
        lists.iter().enumerate().map(|(i, l)| ClientState::new(i, l.clone(), &config)).collect();
    let mut global = initial.clone();
    for round in 1..=rounds {
        let mut updates = Vec::new();
        for c in clients.iter_mut() {
            let LocalOutcome::Trained(u) = local_train(c, &global, &objective, &config, round).map_err(e)? else {
                return Err(format!("client {} did not train", c.id));
            };
            ensure!(
                u.base_params.keys().all(|n| !personal.contains(n)),
                "client {} uploaded a personal tensor",
                c.id
            );
            ensure!(
                c.personal_params.keys().cloned().collect::<BTreeSet<_>>() == personal,
                "client {} keeps the wrong personal set",
                c.id
            );
            updates.push(u);
        }
        let kept: Vec<NamedTensors> = clients.iter().map(|c| c.personal_params.clone()).collect();
        global.assign(&fedavg(&updates).map_err(e)?).map_err(e)?;
        for (c, before) in clients.iter().zip(&kept) {
            ensure!(&c.personal_params == before, "round {round}: client {} personal block moved", c.id);
            let assembled = assemble(&global, c, &config).map_err(e)?;
            for (name, t) in before {
                let now: Vec<u32> = assembled.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
                let was: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                ensure!(now == was, "round {round}: {name} changed by aggregation");
            }
        }
        for name in &personal {
            ensure!(global.get(name) == initial.get(name), "global copy of {name} moved");
            let values: BTreeSet<Vec<u32>> = clients
                .iter()
                .map(|c| c.personal_params[name].data().iter().map(|v| v.to_bits()).collect())
                .collect();
            ensure!(values.len() == 4, "{name} identical across clients after round {round}");
        }
    }

    let result = run_federation(&initial, &lists, &objective, None, &config, &RunOutput::default()).map_err(e)?;
    ensure!(result.global == global, "run_federation disagrees with the manual loop");
    for (a, b) in result.clients.iter().zip(&clients) {
        ensure!(a.personal_params == b.personal_params, "client {} personal block differs", a.id);
    }
    Ok(())
}
