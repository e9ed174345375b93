//! Named scenarios and the random adversarial generator.

use std::collections::{BTreeMap, BTreeSet};

use aegis_core::node::{DeadlineBase, InputSource, NodeConfig, SyncWindow};
use aegis_core::primary::StakeTx;
use aegis_core::{NodeId, Params, Ratio, Step};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schedule::{
    Behavior, ByzantineSpec, ConsensusKind, DelayPolicy, DelayRule, EntryOrder, MsgKind, NodeSpec,
    Schedule, StakeEvent, WritePolicy,
};

/// (Δa, Δw, Δp, Δc) for the three parameter sets exercised by the sweeps.
pub const PARAM_SETS: [(Step, Step, Step, Step); 3] =
    [(50, 2, 2, 40), (200, 2, 2, 40), (200, 2, 10, 150)];

pub fn params(set: usize, t_gst: Step) -> Params {
    let (delta_active, delta_write, delta_prop, delta_consensus) = PARAM_SETS[set];
    Params {
        delta_active,
        delta_write,
        delta_prop,
        delta_consensus,
        alpha: Ratio::TWO_THIRDS,
        t_gst,
    }
}

fn small(t_gst: Step) -> Params {
    params(0, t_gst)
}

fn ids(r: std::ops::Range<u32>) -> Vec<NodeId> {
    r.map(NodeId).collect()
}

fn coalition(nodes: Vec<NodeId>, behavior: Behavior, from: Step) -> ByzantineSpec {
    ByzantineSpec {
        nodes,
        behavior,
        from,
    }
}

pub const NAMES: [&str; 14] = [
    "happy",
    "async_start",
    "tight_timing",
    "early_reset",
    "silent",
    "withhold",
    "single_checkpointer",
    "churn",
    "oracle",
    "equivocation",
    "stale_committee",
    "long_range",
    "long_range_no_joiner",
    "deadline_last_entry",
];

/// Scenarios whose Byzantine weight stays within one third of every active
/// committee, so every safety property must hold.
pub const WITHIN_THRESHOLD: [&str; 11] = [
    "happy",
    "async_start",
    "tight_timing",
    "early_reset",
    "silent",
    "withhold",
    "single_checkpointer",
    "churn",
    "oracle",
    "long_range",
    "long_range_no_joiner",
];

pub fn named(name: &str, seed: u64) -> Option<Schedule> {
    let s = match name {
        "happy" => happy(seed),
        "async_start" => async_start(seed),
        "tight_timing" => tight_timing(seed),
        "early_reset" => early_reset(seed),
        "silent" => silent(seed),
        "withhold" => withhold(seed),
        "single_checkpointer" => single_checkpointer(seed),
        "churn" => churn(seed),
        "oracle" => oracle(seed),
        "equivocation" => equivocation(seed, 4),
        "stale_committee" => stale_committee(seed),
        "long_range" => long_range(seed, true),
        "long_range_no_joiner" => long_range(seed, false),
        "deadline_last_entry" => deadline_last_entry(seed),
        _ => return None,
    };
    Some(s)
}

/// Four correct nodes, synchronous from the start.
pub fn happy(seed: u64) -> Schedule {
    Schedule::uniform("happy", seed, small(0), 4)
}

/// Seven correct nodes split in two groups until GST = 5 Δa, so the first
/// committees stall and are reset.
pub fn async_start(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("async_start", seed, small(250), 7);
    s.delay = DelayPolicy::Partition {
        groups: vec![ids(0..3), ids(3..7)],
        since: 0,
    };
    s
}

/// Every message and every write takes the maximum delay.
pub fn tight_timing(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("tight_timing", seed, small(0), 4);
    s.delay = DelayPolicy::FixedMax;
    s.writes = WritePolicy::Max;
    s
}

/// One node submits a reset every step.
pub fn early_reset(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("early_reset", seed, small(100), 4);
    s.byzantine = vec![coalition(vec![NodeId(3)], Behavior::SpamResets, 0)];
    s
}

/// Two of seven nodes never act.
pub fn silent(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("silent", seed, small(100), 7);
    s.byzantine = vec![coalition(ids(5..7), Behavior::Silent, 0)];
    s
}

/// Two of seven nodes keep their precommits, blocks and entries to
/// themselves for Δa steps.
pub fn withhold(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("withhold", seed, small(100), 7);
    s.byzantine = vec![coalition(ids(5..7), Behavior::Withhold { hold: 50 }, 0)];
    s
}

/// Until 3 Δa only node 0 receives precommits and blocks in time, so it
/// alone logs by consensus and checkpoints.
pub fn single_checkpointer(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("single_checkpointer", seed, small(150), 4);
    let mut rules = Vec::new();
    for to in 1..4 {
        for kind in [MsgKind::Precommit, MsgKind::Block] {
            rules.push(DelayRule {
                from: None,
                to: Some(NodeId(to)),
                kind: Some(kind),
                since: 0,
                until: 150,
                delay: 60,
            });
        }
    }
    s.delay = DelayPolicy::Handcrafted { rules };
    s
}

/// Stake changes before GST: two nodes join, one leaves, one doubles.
pub fn churn(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("churn", seed, small(200), 6);
    s.nodes[4].stake = 0;
    s.nodes[5].stake = 0;
    s.nodes[5].join = 60;
    let ev = |at, tx| StakeEvent { at, tx };
    s.stake_events = vec![
        ev(
            30,
            StakeTx::Stake {
                node: NodeId(4),
                weight: 1,
            },
        ),
        ev(
            80,
            StakeTx::Stake {
                node: NodeId(5),
                weight: 2,
            },
        ),
        ev(120, StakeTx::Unstake { node: NodeId(0) }),
        ev(
            150,
            StakeTx::Stake {
                node: NodeId(1),
                weight: 2,
            },
        ),
    ];
    s
}

/// The happy scenario with the oracle consensus.
pub fn oracle(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("oracle", seed, small(100), 4);
    s.consensus = ConsensusKind::Oracle;
    s.delay = DelayPolicy::Uniform;
    s
}

/// An equivocating coalition holding half (n = 4) or three sevenths (n = 7)
/// of the stake splits the correct nodes into two sides; each side decides a
/// different block in the first round led by the coalition: round 2 for
/// n = 4, round 0 for n = 7. The culprits
/// order their unstake early so the slash races their withdrawal.
pub fn equivocation(seed: u64, n: u32) -> Schedule {
    let (byz, group_a, group_b) = match n {
        4 => (ids(2..4), ids(0..1), ids(1..2)),
        _ => (ids(0..3), ids(3..5), ids(5..7)),
    };
    let mut s = Schedule::uniform("equivocation", seed, small(40), n);
    // the two sides hear each other only after GST; the coalition is fast
    s.delay = DelayPolicy::Partition {
        groups: vec![group_a.clone(), group_b],
        since: 0,
    };
    s.node.inputs = InputSource::PerNode;
    s.stake_events = byz
        .iter()
        .map(|&node| StakeEvent {
            at: 20 + seed % 20,
            tx: StakeTx::Unstake { node },
        })
        .collect();
    s.horizon = Some(400);
    s.byzantine = vec![coalition(byz, Behavior::Equivocate { group_a }, 0)];
    s
}

/// Five of seven nodes wait for the checkpointed committee to go stale,
/// then present certificates of that committee as valid past staleness and
/// under the following reset. Until GST every message from step 40 on takes
/// the maximum delay, so the committee does go stale.
pub fn stale_committee(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("stale_committee", seed, small(200), 7);
    s.delay = DelayPolicy::Partition {
        groups: (0..7).map(|i| vec![NodeId(i)]).collect(),
        since: 40,
    };
    s.byzantine = vec![coalition(ids(2..7), Behavior::StaleCommitteeBlock, 0)];
    s
}

/// Nodes 0 to 3 form the first committees, then hand their stake to nodes 4
/// to 7 at step 100 and, once withdrawn, forge histories under the first
/// reset's committee. With `joiner`, node 8 joins at step 200 holding no
/// stake and must still adopt the honest ledger.
pub fn long_range(seed: u64, joiner: bool) -> Schedule {
    let name = if joiner {
        "long_range"
    } else {
        "long_range_no_joiner"
    };
    let mut s = Schedule::uniform(name, seed, small(100), if joiner { 9 } else { 8 });
    let handover = 100;
    let mut events = Vec::new();
    for spec in s.nodes.iter_mut().skip(4) {
        spec.stake = 0;
    }
    for i in 0..4 {
        events.push(StakeEvent {
            at: handover,
            tx: StakeTx::Stake {
                node: NodeId(i + 4),
                weight: 1,
            },
        });
        events.push(StakeEvent {
            at: handover,
            tx: StakeTx::Unstake { node: NodeId(i) },
        });
    }
    s.stake_events = events;
    if joiner {
        s.nodes[8].join = handover + 100;
    }
    s.byzantine = vec![coalition(
        ids(0..4),
        Behavior::LongRangeFork { length: 6 },
        handover + 60,
    )];
    s
}

/// The happy scenario with the deadline measured from the last entry.
pub fn deadline_last_entry(seed: u64) -> Schedule {
    let mut s = Schedule::uniform("deadline_last_entry", seed, small(100), 4);
    s.node.deadline = DeadlineBase::LastEntry;
    s
}

/// A correct-only schedule with uniform inputs for the validity sweep.
/// Every fourth seed has GST at 5 Δa and a pre-GST partition that forces
/// reset cycles.
pub fn validity_run(seed: u64) -> Schedule {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let n = r.gen_range(4..=7);
    let mut s = Schedule::uniform("validity", seed, small(0), n);
    if seed.is_multiple_of(4) {
        s.params.t_gst = 250;
        let cut = r.gen_range(1..n);
        s.delay = DelayPolicy::Partition {
            groups: vec![ids(0..cut), ids(cut..n)],
            since: 0,
        };
    } else {
        s.params.t_gst = r.gen_range(0..=250);
    }
    s.writes = *[WritePolicy::Uniform, WritePolicy::Max, WritePolicy::Min]
        .choose(&mut r)
        .unwrap();
    s
}

/// A schedule for the progress sweep: GST anywhere up to 5 Δa, arbitrary
/// pre-GST delays, correct nodes only.
pub fn progress_run(seed: u64) -> Schedule {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let set = if seed % 10 == 9 { r.gen_range(1..3) } else { 0 };
    let da = PARAM_SETS[set].0;
    let n = r.gen_range(4..=7);
    let mut s = Schedule::uniform("progress", seed, params(set, r.gen_range(0..=5 * da)), n);
    s.delay = random_delay(&mut r, n, s.params.t_gst);
    s.writes = *[WritePolicy::Uniform, WritePolicy::Max, WritePolicy::Min]
        .choose(&mut r)
        .unwrap();
    s
}

fn random_delay(r: &mut ChaCha8Rng, n: u32, gst: Step) -> DelayPolicy {
    match r.gen_range(0..4) {
        0 => DelayPolicy::Uniform,
        1 => DelayPolicy::FixedMax,
        2 => {
            let k = r.gen_range(1..=n / 2);
            let mut all = ids(0..n);
            all.shuffle(r);
            all.truncate(k as usize);
            all.sort();
            DelayPolicy::Targeted { nodes: all }
        }
        _ => {
            let cut = r.gen_range(1..n);
            let mut all = ids(0..n);
            all.shuffle(r);
            let (a, b) = all.split_at(cut as usize);
            let (mut a, mut b) = (a.to_vec(), b.to_vec());
            a.sort();
            b.sort();
            DelayPolicy::Partition {
                groups: vec![a, b],
                since: r.gen_range(0..=gst),
            }
        }
    }
}

/// A random adversarial schedule. The coalition's stake is at most one
/// third of the total at every step: stake only ever joins on the correct
/// side.
pub fn random_adversarial(seed: u64) -> Schedule {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let set = if seed % 8 == 7 { r.gen_range(1..3) } else { 0 };
    let da = PARAM_SETS[set].0;
    let gst = r.gen_range(0..=5 * da);
    let n: u32 = r.gen_range(4..=10);
    let mut s = Schedule::uniform("random", seed, params(set, gst), n);
    for spec in s.nodes.iter_mut() {
        spec.stake = r.gen_range(1..=3);
    }
    let total: u64 = s.nodes.iter().map(|n| n.stake).sum();

    let mut order = ids(0..n);
    order.shuffle(&mut r);
    let mut byz = Vec::new();
    let mut weight = 0;
    for id in order {
        let w = s.nodes[id.0 as usize].stake;
        if 3 * (weight + w) <= total && r.gen_bool(0.6) {
            byz.push(id);
            weight += w;
        }
    }
    byz.sort();
    let honest: Vec<NodeId> = ids(0..n).into_iter().filter(|i| !byz.contains(i)).collect();

    // late correct stake
    if r.gen_bool(0.3) && gst > 0 {
        let id = NodeId(n);
        let at = r.gen_range(0..=gst);
        s.nodes.push(NodeSpec {
            id,
            stake: 0,
            join: r.gen_range(0..=at),
        });
        s.stake_events.push(StakeEvent {
            at,
            tx: StakeTx::Stake {
                node: id,
                weight: r.gen_range(1..=3),
            },
        });
    }
    let all = s.nodes.len() as u32;

    if !byz.is_empty() {
        let behavior = match r.gen_range(0..4) {
            0 => Behavior::Silent,
            1 => Behavior::Withhold {
                hold: r.gen_range(1..=da),
            },
            2 => {
                let mut a: Vec<NodeId> =
                    honest.iter().copied().filter(|_| r.gen_bool(0.5)).collect();
                a.sort();
                Behavior::Equivocate { group_a: a }
            }
            _ => Behavior::SpamResets,
        };
        let from = if r.gen_bool(0.5) {
            0
        } else {
            r.gen_range(0..=5 * da)
        };
        s.byzantine = vec![coalition(byz, behavior, from)];
    }
    s.delay = random_delay(&mut r, all, gst);
    s.writes = *[WritePolicy::Uniform, WritePolicy::Max, WritePolicy::Min]
        .choose(&mut r)
        .unwrap();
    s.entry_order = *[
        EntryOrder::Submission,
        EntryOrder::Reverse,
        EntryOrder::Seeded,
    ]
    .choose(&mut r)
    .unwrap();
    if r.gen_bool(0.2) {
        s.node = NodeConfig {
            inputs: InputSource::PerNode,
            ..NodeConfig::default()
        };
    }
    s
}

/// Total stake of the coalition relative to all initial and added stake.
pub fn byzantine_share(s: &Schedule) -> (u64, u64) {
    let byz: BTreeSet<NodeId> = s.byzantine_nodes();
    let mut total = 0;
    let mut bad = 0;
    for n in &s.nodes {
        total += n.stake;
        if byz.contains(&n.id) {
            bad += n.stake;
        }
    }
    for e in &s.stake_events {
        if let StakeTx::Stake { node, weight } = &e.tx {
            total += weight;
            if byz.contains(node) {
                bad += weight;
            }
        }
    }
    (bad, total)
}

/// Largest Byzantine share of any committee over the period in which it can
/// certify blocks. The committee fixed by the stake changes up to step `t`
/// serves primary blocks until the next change and stays active Δa after
/// that; a member counts as Byzantine if its coalition acts within that span.
pub fn worst_committee_share(s: &Schedule) -> (u64, u64) {
    let da = s.params.delta_active;
    let mut changes: Vec<Step> = s.stake_events.iter().map(|e| e.at).collect();
    changes.push(0);
    changes.sort();
    changes.dedup();
    let mut worst = (0, 1);
    for (i, &t) in changes.iter().enumerate() {
        let until = changes.get(i + 1).map_or(Step::MAX, |n| n + da);
        let mut members: BTreeMap<NodeId, u64> = s
            .nodes
            .iter()
            .filter(|n| n.stake > 0)
            .map(|n| (n.id, n.stake))
            .collect();
        let mut gone = BTreeSet::new();
        for e in s.stake_events.iter().filter(|e| e.at <= t) {
            match &e.tx {
                StakeTx::Stake { node, weight } if !gone.contains(node) => {
                    *members.entry(*node).or_default() += weight
                }
                StakeTx::Stake { .. } => {}
                StakeTx::Unstake { node } => {
                    members.remove(node);
                    gone.insert(*node);
                }
            }
        }
        let total: u64 = members.values().sum();
        let bad: u64 = members
            .iter()
            .filter(|(n, _)| s.coalition_of(**n).is_some_and(|c| c.from < until))
            .map(|(_, w)| w)
            .sum();
        if total > 0 && bad * worst.1 > worst.0 * total {
            worst = (bad, total);
        }
    }
    worst
}

/// The sweep templates accepted by the command line.
pub fn template(name: &str, seed: u64) -> Option<Schedule> {
    match name {
        "random" => Some(random_adversarial(seed)),
        "validity" => Some(validity_run(seed)),
        "progress" => Some(progress_run(seed)),
        "equivocation7" => Some(equivocation(seed, 7)),
        _ => named(name, seed),
    }
}

/// Sync-window variant used to probe the sensitivity of the deadline rule.
pub fn with_sync_until_expiry(mut s: Schedule) -> Schedule {
    s.node.sync_window = SyncWindow::UntilExpiry;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn committee_shares() {
        // the long-range coalition acts only after its stake is withdrawn
        assert_eq!(worst_committee_share(&long_range(0, true)).0, 0);
        let (bad, total) = worst_committee_share(&equivocation(0, 4));
        assert_eq!((bad, total), (2, 4));
        for name in WITHIN_THRESHOLD {
            let (bad, total) = worst_committee_share(&named(name, 0).unwrap());
            assert!(3 * bad <= total, "{name}: {bad}/{total}");
        }
        let (bad, total) = worst_committee_share(&stale_committee(0));
        assert!(3 * bad > total);
    }

    #[test]
    fn all_named_scenarios_validate() {
        for name in NAMES {
            let s = named(name, 1).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(named("nope", 0).is_none());
    }

    #[test]
    fn random_schedules_respect_the_threshold() {
        for seed in 0..300 {
            let s = random_adversarial(seed);
            s.validate().unwrap();
            let (bad, total) = byzantine_share(&s);
            assert!(3 * bad <= total, "seed {seed}: {bad}/{total}");
            let (bad, total) = worst_committee_share(&s);
            assert!(3 * bad <= total, "seed {seed}: committee {bad}/{total}");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for seed in 0..20 {
            assert_eq!(random_adversarial(seed), random_adversarial(seed));
            assert_eq!(progress_run(seed), progress_run(seed));
        }
    }
}
