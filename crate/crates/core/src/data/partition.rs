use std::collections::BTreeSet;

use log::warn;
use rand::seq::SliceRandom;

use super::{Dataset, PartitionMode, PartitionPlan, SharingPlan};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, STREAM_PARTITION};

const SHARD_RETRIES: usize = 10_000;

// Sub-labels under STREAM_PARTITION.
const IID: u64 = 1;
const SKEW: u64 = 2;
const STRATIFY: u64 = 3;
const SHARED: u64 = 4;
const MERGE: u64 = 5;

/// Sizes of `n` items split into `parts`, remainder front-loaded.
fn split_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

fn cut(items: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(items[start..start + s].to_vec());
        start += s;
    }
    out
}

pub fn partition_iid(dataset: &Dataset, client_count: usize, seed: u64) -> Result<PartitionPlan> {
    let n = dataset.len();
    if client_count == 0 || client_count > n {
        return Err(Error::Argument(format!(
            "cannot split {n} samples across {client_count} clients"
        )));
    }
    // Stratified shuffle: classes are shuffled internally and then dealt
    // round-robin (class order reshuffled each round), so contiguous slices
    // carry near-equal class proportions.
    let mut r = rng::substream(seed, &[STREAM_PARTITION, IID]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut r);
    }
    let mut order = Vec::with_capacity(n);
    let mut depth = 0;
    while order.len() < n {
        let mut classes: Vec<usize> = (0..by_class.len()).filter(|&c| depth < by_class[c].len()).collect();
        classes.shuffle(&mut r);
        order.extend(classes.iter().map(|&c| by_class[c][depth]));
        depth += 1;
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Iid,
        assignments: cut(&order, &split_sizes(n, client_count)),
        client_count,
        degenerate: false,
    })
}

fn distinct_labels(labels: &[usize], ix: &[usize]) -> usize {
    ix.iter().map(|&i| labels[i]).collect::<BTreeSet<_>>().len()
}

/// Shard-based label skew over `pool` (indices into `labels`).
fn label_skew_over(
    pool: &[usize],
    labels: &[usize],
    client_count: usize,
    classes_per_client: usize,
    rng: &mut Rng,
) -> Result<(Vec<Vec<usize>>, bool)> {
    if client_count == 0 || classes_per_client == 0 {
        return Err(Error::Argument("client_count and classes_per_client must be positive".into()));
    }
    let present = distinct_labels(labels, pool);
    if client_count == 1 {
        warn!("label skew with a single client: it holds all {present} classes");
        return Ok((vec![pool.to_vec()], true));
    }
    let shards = client_count * classes_per_client;
    if shards < present {
        return Err(Error::Argument(format!(
            "{client_count} clients x {classes_per_client} classes cannot cover {present} classes"
        )));
    }
    if shards > pool.len() {
        return Err(Error::Argument(format!("{shards} shards from only {} samples", pool.len())));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by_key(|&i| (labels[i], i));
    let shard_lists = cut(&sorted, &split_sizes(sorted.len(), shards));

    let mut order: Vec<usize> = (0..shards).collect();
    for _ in 0..SHARD_RETRIES {
        order.shuffle(rng);
        let clients: Vec<Vec<usize>> = order
            .chunks(classes_per_client)
            .map(|own| {
                let mut ix: Vec<usize> = own.iter().flat_map(|&s| shard_lists[s].iter().copied()).collect();
                ix.sort_unstable();
                ix
            })
            .collect();
        if clients
            .iter()
            .all(|ix| distinct_labels(labels, ix) <= classes_per_client)
        {
            return Ok((clients, false));
        }
    }
    Err(Error::Argument(format!(
        "no shard assignment keeps every client within {classes_per_client} labels"
    )))
}

pub fn partition_label_skew(
    dataset: &Dataset,
    client_count: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    let mut r = rng::substream(seed, &[STREAM_PARTITION, SKEW]);
    let (assignments, degenerate) =
        label_skew_over(&pool, dataset.labels(), client_count, classes_per_client, &mut r)?;
    Ok(PartitionPlan {
        mode: PartitionMode::LabelSkew,
        assignments,
        client_count,
        degenerate,
    })
}

fn pct_of(pct: f64, n: usize) -> usize {
    (pct * n as f64 / 100.0).round() as usize
}

/// Client/server split, label-skewed client parts, shared pool G and the
/// α-subset of G merged into every client.
pub fn data_sharing_split(
    dataset: &Dataset,
    client_count: usize,
    beta_pct: f64,
    alpha_pct: f64,
    classes_per_client: usize,
    seed: u64,
) -> Result<SharingPlan> {
    if !(beta_pct > 0.0) || !(0.0..=100.0).contains(&alpha_pct) {
        return Err(Error::Argument(format!(
            "need beta_pct > 0 and alpha_pct in [0, 100], got {beta_pct}, {alpha_pct}"
        )));
    }
    let labels = dataset.labels();

    // Stratified 80/20: every class keeps four fifths of its samples.
    let mut client_pool = Vec::new();
    let mut server_pool = Vec::new();
    let mut strat = rng::substream(seed, &[STREAM_PARTITION, STRATIFY]);
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut strat);
        let keep = (members.len() * 4 + 2) / 5;
        client_pool.extend_from_slice(&members[..keep]);
        server_pool.extend_from_slice(&members[keep..]);
    }
    client_pool.sort_unstable();
    server_pool.sort_unstable();

    let g = pct_of(beta_pct, client_pool.len());
    if g > server_pool.len() {
        return Err(Error::Argument(format!(
            "beta {beta_pct}% of {} client samples needs {g} shared samples, server holds {}",
            client_pool.len(),
            server_pool.len()
        )));
    }
    if g == 0 {
        return Err(Error::Argument(format!("beta {beta_pct}% yields an empty shared pool")));
    }

    let mut skew = rng::substream(seed, &[STREAM_PARTITION, SKEW]);
    let (client_part, _) = label_skew_over(&client_pool, labels, client_count, classes_per_client, &mut skew)?;

    let mut shuffled = server_pool.clone();
    shuffled.shuffle(&mut rng::substream(seed, &[STREAM_PARTITION, SHARED]));
    let mut shared_pool = shuffled[..g].to_vec();
    shared_pool.sort_unstable();

    let m = pct_of(alpha_pct, g);
    let mut pick = shared_pool.clone();
    pick.shuffle(&mut rng::substream(seed, &[STREAM_PARTITION, MERGE]));
    let mut merged_subset = pick[..m].to_vec();
    merged_subset.sort_unstable();

    let merged_clients = client_part
        .iter()
        .map(|part| part.iter().chain(&merged_subset).copied().collect())
        .collect();
    Ok(SharingPlan {
        client_part,
        server_part: server_pool,
        shared_pool,
        merged_subset,
        merged_clients,
        beta_pct,
        alpha_pct,
    })
}
