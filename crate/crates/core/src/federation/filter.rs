//! Two-strike threshold filtering of poorly performing clients.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::DropPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientStatus {
    Active,
    Warned,
    Disconnected,
}

impl ClientStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientStatus::Active => "active",
            ClientStatus::Warned => "warned",
            ClientStatus::Disconnected => "disconnected",
        }
    }

    pub fn connected(self) -> bool {
        self != ClientStatus::Disconnected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub status: Vec<ClientStatus>,
    pub poor_count: Vec<u8>,
    pub policy: DropPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterRules {
    pub immediate: bool,
    pub min_active_clients: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterEvent {
    Warned(usize),
    Restored(usize),
    Disconnected(usize),
    /// A disconnect withheld because too few clients would remain.
    Suppressed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub state: FilterState,
    pub disconnected: Vec<usize>,
    pub events: Vec<FilterEvent>,
}

impl FilterState {
    pub fn new(clients: usize, policy: DropPolicy) -> Self {
        FilterState {
            status: vec![ClientStatus::Active; clients],
            poor_count: vec![0; clients],
            policy,
        }
    }

    pub fn connected_count(&self) -> usize {
        self.status.iter().filter(|s| s.connected()).count()
    }
}

/// Applies one round of metrics. `precision` maps client id to its
/// precision this round; `excused` clients (faulted this round) are left
/// untouched and need no entry.
pub fn filter_step(
    state: &FilterState,
    precision: &BTreeMap<usize, f64>,
    excused: &BTreeSet<usize>,
    rules: FilterRules,
) -> Result<FilterOutcome> {
    let n = state.status.len();
    let judged: Vec<usize> = (0..n)
        .filter(|&i| state.status[i].connected() && !excused.contains(&i))
        .collect();
    for &i in &judged {
        match precision.get(&i) {
            Some(p) if p.is_finite() => {}
            Some(p) => return Err(Error::Protocol(format!("client {i} reported precision {p}"))),
            None => return Err(Error::Protocol(format!("no metrics from connected client {i}"))),
        }
    }

    let poor: BTreeSet<usize> = match state.policy {
        DropPolicy::LowestPrecision => {
            // Iterating in id order with a strict comparison keeps the
            // lowest id among tied minima.
            let mut best: Option<(usize, f64)> = None;
            for &i in &judged {
                let p = precision[&i];
                if best.is_none_or(|(_, bp)| p < bp) {
                    best = Some((i, p));
                }
            }
            best.into_iter().map(|(i, _)| i).collect()
        }
        DropPolicy::FixedThreshold(theta) => judged.iter().copied().filter(|i| precision[i] < theta).collect(),
    };

    let mut next = state.clone();
    let mut events = Vec::new();
    let mut candidates = Vec::new();
    for &i in &judged {
        if poor.contains(&i) {
            next.poor_count[i] = next.poor_count[i].saturating_add(1).min(2);
            if rules.immediate || next.poor_count[i] >= 2 {
                candidates.push(i);
            } else {
                next.status[i] = ClientStatus::Warned;
                events.push(FilterEvent::Warned(i));
            }
        } else {
            next.poor_count[i] = 0;
            if next.status[i] == ClientStatus::Warned {
                next.status[i] = ClientStatus::Active;
                events.push(FilterEvent::Restored(i));
            }
        }
    }

    let mut disconnected = Vec::new();
    for i in candidates {
        if next.connected_count() > rules.min_active_clients {
            next.status[i] = ClientStatus::Disconnected;
            next.poor_count[i] = 2;
            disconnected.push(i);
            events.push(FilterEvent::Disconnected(i));
        } else {
            info!("keeping client {i}: disconnecting it would leave fewer than {} clients", rules.min_active_clients);
            next.status[i] = ClientStatus::Warned;
            next.poor_count[i] = 1;
            events.push(FilterEvent::Suppressed(i));
        }
    }
    Ok(FilterOutcome {
        state: next,
        disconnected,
        events,
    })
}
