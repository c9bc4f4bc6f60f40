use std::collections::{BTreeMap, BTreeSet};

use phoenix::federation::{DropPolicy, FilterEvent};

use FilterEvent::{Disconnected as D, Restored as R, Suppressed as S, Warned as W};

pub struct Scenario {
    pub name: &'static str,
    pub policy: DropPolicy,
    pub immediate: bool,
    pub min_active: usize,
    /// Precision per client per round; `None` marks a faulted client.
    pub rounds: Vec<Vec<Option<f64>>>,
    pub expected: Vec<Vec<FilterEvent>>,
}

fn p(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|&x| if x < 0.0 { None } else { Some(x) }).collect()
}

pub const LOWEST: DropPolicy = DropPolicy::LowestPrecision;

pub fn scenarios() -> Vec<Scenario> {
    let sc = |name, policy, immediate, min_active, rounds: Vec<Vec<Option<f64>>>, expected| Scenario {
        name,
        policy,
        immediate,
        min_active,
        rounds,
        expected,
    };
    vec![
        sc(
            "lowest twice then next lowest",
            LOWEST,
            false,
            2,
            vec![p(&[0.9, 0.8, 0.7, 0.1]), p(&[0.9, 0.8, 0.7, 0.1]), p(&[0.9, 0.8, 0.7, 0.99])],
            vec![vec![W(3)], vec![D(3)], vec![W(2)]],
        ),
        sc(
            "recovery resets the strike",
            LOWEST,
            false,
            2,
            vec![p(&[0.9, 0.8, 0.7, 0.1]), p(&[0.9, 0.8, 0.1, 0.95]), p(&[0.9, 0.8, 0.95, 0.95])],
            vec![vec![W(3)], vec![W(2), R(3)], vec![W(1), R(2)]],
        ),
        sc(
            "tied minimum goes to the lower id",
            LOWEST,
            false,
            2,
            vec![
                p(&[0.5, 0.3, 0.3, 0.9]),
                p(&[0.5, 0.3, 0.3, 0.9]),
                p(&[0.5, 0.3, 0.3, 0.9]),
                p(&[0.5, 0.3, 0.3, 0.9]),
            ],
            vec![vec![W(1)], vec![D(1)], vec![W(2)], vec![D(2)]],
        ),
        sc(
            "suppressed at the client floor",
            LOWEST,
            false,
            2,
            vec![
                p(&[0.1, 0.5, 0.9]),
                p(&[0.1, 0.5, 0.9]),
                p(&[0.1, 0.2, 0.9]),
                p(&[0.1, 0.2, 0.9]),
                p(&[0.1, 0.2, 0.9]),
            ],
            vec![vec![W(0)], vec![D(0)], vec![W(1)], vec![S(1)], vec![S(1)]],
        ),
        sc(
            "threshold 0.7 with a recovery",
            DropPolicy::FixedThreshold(0.7),
            false,
            2,
            vec![p(&[0.9, 0.65, 0.69, 0.8]), p(&[0.9, 0.65, 0.75, 0.8])],
            vec![vec![W(1), W(2)], vec![R(2), D(1)]],
        ),
        sc(
            "threshold 0.6 boundary is not poor",
            DropPolicy::FixedThreshold(0.6),
            false,
            2,
            vec![p(&[0.59, 0.6, 0.61, 0.2]), p(&[0.59, 0.6, 0.61, 0.2])],
            vec![vec![W(0), W(3)], vec![D(0), D(3)]],
        ),
        sc(
            "threshold with everyone poor",
            DropPolicy::FixedThreshold(0.6),
            false,
            2,
            vec![p(&[0.1, 0.2, 0.3]), p(&[0.1, 0.2, 0.3])],
            vec![vec![W(0), W(1), W(2)], vec![D(0), S(1), S(2)]],
        ),
        sc(
            "immediate lowest",
            LOWEST,
            true,
            2,
            vec![p(&[0.9, 0.1, 0.5, 0.6]), p(&[0.9, 0.1, 0.5, 0.6])],
            vec![vec![D(1)], vec![D(2)]],
        ),
        sc(
            "immediate threshold at the floor",
            DropPolicy::FixedThreshold(0.7),
            true,
            2,
            vec![p(&[0.5, 0.5, 0.9])],
            vec![vec![D(0), S(1)]],
        ),
        sc(
            "faulted round keeps the strike",
            LOWEST,
            false,
            2,
            vec![p(&[0.9, 0.1, 0.8, 0.7]), p(&[0.9, -1.0, 0.8, 0.7]), p(&[0.9, 0.05, 0.8, 0.95])],
            vec![vec![W(1)], vec![W(3)], vec![R(3), D(1)]],
        ),
        sc(
            "alternating worst never disconnects",
            LOWEST,
            false,
            2,
            vec![
                p(&[0.1, 0.5, 0.5, 0.5]),
                p(&[0.5, 0.1, 0.5, 0.5]),
                p(&[0.1, 0.5, 0.5, 0.5]),
            ],
            vec![vec![W(0)], vec![R(0), W(1)], vec![W(0), R(1)]],
        ),
        sc(
            "threshold 0.7 nobody below",
            DropPolicy::FixedThreshold(0.7),
            false,
            2,
            vec![p(&[0.8, 0.9, 0.75, 0.7]), p(&[0.8, 0.9, 0.75, 0.7])],
            vec![vec![], vec![]],
        ),
        sc(
            "floor of one",
            LOWEST,
            false,
            1,
            vec![p(&[0.2, 0.3]), p(&[0.2, 0.3]), p(&[0.2, 0.3]), p(&[0.2, 0.3])],
            vec![vec![W(0)], vec![D(0)], vec![W(1)], vec![S(1)]],
        ),
        sc(
            "threshold 0.6 staggered strikes",
            DropPolicy::FixedThreshold(0.6),
            false,
            2,
            vec![
                p(&[0.5, 0.9, 0.9, 0.9, 0.9]),
                p(&[0.5, 0.5, 0.9, 0.9, 0.9]),
                p(&[0.9, 0.5, 0.5, 0.9, 0.9]),
            ],
            vec![vec![W(0)], vec![W(1), D(0)], vec![W(2), D(1)]],
        ),
    ]
}

pub fn step_inputs(round: &[Option<f64>]) -> (BTreeMap<usize, f64>, BTreeSet<usize>) {
    let mut m = BTreeMap::new();
    let mut excused = BTreeSet::new();
    for (i, v) in round.iter().enumerate() {
        match v {
            Some(v) => {
                m.insert(i, *v);
            }
            None => {
                excused.insert(i);
            }
        }
    }
    (m, excused)
}


use phoenix::federation::{filter_step, ClientStatus, FilterRules, FilterState};

/// Replays every scenario and reports the first mismatch.
pub fn run_scenarios() -> Result<usize, String> {
    let all = scenarios();
    for s in &all {
        let rules = FilterRules {
            immediate: s.immediate,
            min_active_clients: s.min_active,
        };
        let mut state = FilterState::new(s.rounds[0].len(), s.policy);
        for (r, (round, want)) in s.rounds.iter().zip(&s.expected).enumerate() {
            let (m, excused) = step_inputs(round);
            let out = filter_step(&state, &m, &excused, rules).map_err(|e| e.to_string())?;
            if &out.events != want {
                return Err(format!("{}: round {} gave {:?}, expected {want:?}", s.name, r + 1, out.events));
            }
            state = out.state;
        }
    }
    Ok(all.len())
}

pub const LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Checks a random trace against the invariants: disconnection is
/// absorbing, needs a poor verdict (two in a row unless immediate), and
/// never takes the connected count below the floor. Cells index
/// [`LEVELS`]; `None` is a faulted client.
pub fn check_trace(
    n: usize,
    lowest: bool,
    immediate: bool,
    min_active: usize,
    trace: &[Vec<Option<u8>>],
) -> Result<(), String> {
    let policy = if lowest { DropPolicy::LowestPrecision } else { DropPolicy::FixedThreshold(0.6) };
    let rules = FilterRules {
        immediate,
        min_active_clients: min_active,
    };
    let mut state = FilterState::new(n, policy);
    // Poor verdict of each client's last judged round.
    let mut last_poor = vec![false; n];
    for (r, round) in trace.iter().enumerate() {
        let values: Vec<Option<f64>> = round.iter().map(|c| c.map(|l| LEVELS[l as usize])).collect();
        let (m, excused) = step_inputs(&values);
        let judged: Vec<usize> = (0..n)
            .filter(|&i| state.status[i].connected() && !excused.contains(&i))
            .collect();
        let poor: BTreeSet<usize> = if lowest {
            let min = judged.iter().map(|i| m[i]).fold(f64::INFINITY, f64::min);
            judged.iter().copied().find(|i| m[i] == min).into_iter().collect()
        } else {
            judged.iter().copied().filter(|i| m[i] < 0.6).collect()
        };
        let out = filter_step(&state, &m, &excused, rules).map_err(|e| e.to_string())?;
        for i in 0..n {
            if state.status[i] == ClientStatus::Disconnected && out.state.status[i] != ClientStatus::Disconnected {
                return Err(format!("round {r}: client {i} reconnected"));
            }
            if state.status[i].connected() && !out.state.status[i].connected() {
                if !poor.contains(&i) {
                    return Err(format!("round {r}: client {i} dropped without a poor verdict"));
                }
                if !immediate && !last_poor[i] {
                    return Err(format!("round {r}: client {i} dropped on its first strike"));
                }
            }
            if out.state.status[i] == ClientStatus::Warned && !(poor.contains(&i) || excused.contains(&i)) {
                return Err(format!("round {r}: client {i} warned while fine"));
            }
        }
        if out.state.connected_count() < n.min(min_active) {
            return Err(format!("round {r}: only {} clients left", out.state.connected_count()));
        }
        for &i in &judged {
            last_poor[i] = poor.contains(&i);
        }
        state = out.state;
    }
    Ok(())
}
