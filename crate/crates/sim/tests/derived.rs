//! Simulator outputs cross-checked against independent recomputation.

use std::collections::{BTreeMap, BTreeSet};

use aegis_core::consensus::consensus_validate;
use aegis_core::primary::{EntryKind, RejectReason};
use aegis_core::{Committee, ConsensusId, Hash, NodeId, Step};
use aegis_sim::checks::{self, Property};
use aegis_sim::single::{check_single, run_single, Fault, SingleRun};
use aegis_sim::trace::EntryKindTag;
use aegis_sim::{run, scenarios, Event, Schedule, Sim};

fn run_sim(s: &Schedule) -> Sim {
    let mut sim = Sim::new(s).unwrap();
    for _ in 0..s.horizon() {
        sim.step();
    }
    sim
}

/// Accepted checkpoints re-checked from the stake book and the raw entries:
/// ids match content, the parent matches, the committee fixed at the
/// referenced primary block certified the block while still active, and
/// heights increase. Accepted resets are at least Δa apart from any earlier
/// entry.
#[test]
fn accepted_entries_replay_against_the_contract_rules() {
    for name in ["happy", "churn", "single_checkpointer", "early_reset"] {
        for seed in 0..2 {
            let s = scenarios::named(name, seed).unwrap();
            let sim = run_sim(&s);
            let chain = sim.chain();
            let da = s.params.delta_active;
            let book = chain.stake_book();
            let committee_at = |id: &Hash| -> (Committee, Step) {
                let t0 = chain.time_of(id).unwrap();
                let members: BTreeMap<NodeId, u64> = book
                    .iter()
                    .filter(|(_, r)| {
                        r.staked_at.is_some_and(|t| t <= t0)
                            && r.unstake_ordered_at.is_none_or(|t| t > t0)
                            && r.slashed_at.is_none_or(|t| t > t0)
                    })
                    .map(|(n, r)| (*n, r.weight))
                    .collect();
                (Committee::new(members, *id), t0)
            };
            let mut last_height = 0;
            let mut last_entry: Option<Step> = None;
            let mut checkpoints = 0;
            for e in chain.accepted_entries() {
                match &e.entry.kind {
                    EntryKind::Reset => {
                        assert!(
                            last_entry.is_none_or(|t| e.accepted_at >= t + da),
                            "{name}: reset too soon"
                        );
                    }
                    EntryKind::Checkpoint { block, parent } => {
                        checkpoints += 1;
                        assert_eq!(block.content_hash(), block.id);
                        assert_eq!(block.parent, Some(parent.id));
                        let r = block.reset_ref.or(parent.primary_ref).unwrap();
                        if block.reset_ref.is_some() {
                            assert!(chain.is_reset_block(&r));
                        }
                        let (committee, t0) = committee_at(&r);
                        assert!(e.accepted_at < t0 + da, "{name}: stale committee accepted");
                        let instance = ConsensusId {
                            parent: parent.id,
                            reset: block.reset_ref,
                        };
                        assert!(
                            consensus_validate(block, &instance, &committee),
                            "{name}: certificate"
                        );
                        assert!(block.height > last_height);
                        last_height = block.height;
                    }
                }
                last_entry = Some(e.accepted_at);
            }
            assert!(checkpoints > 5, "{name}: only {checkpoints} checkpoints");
        }
    }
}

#[test]
fn honest_runs_never_start_forensics() {
    for seed in 0..30 {
        let tr = run(&scenarios::validity_run(seed)).unwrap();
        assert!(
            !tr.events
                .iter()
                .any(|e| matches!(e, Event::Evidence { .. })),
            "seed {seed}"
        );
    }
    for name in ["happy", "churn", "tight_timing", "oracle"] {
        let tr = run(&scenarios::named(name, 0).unwrap()).unwrap();
        assert!(
            !tr.events
                .iter()
                .any(|e| matches!(e, Event::Evidence { .. })),
            "{name}"
        );
    }
}

/// The first correct node to hold both conflicting blocks submits evidence
/// no later than Δp after both were logged (or after GST), and the slash
/// lands within Δw of that submission.
#[test]
fn slashing_follows_the_second_observation_within_the_write_bound() {
    for n in [4, 7] {
        for seed in 0..8 {
            let s = scenarios::equivocation(seed, n);
            let tr = run(&s).unwrap();
            let p = &s.params;
            let mut first_logged: BTreeMap<u64, BTreeMap<Hash, Step>> = BTreeMap::new();
            for l in tr.logs().filter(|l| s.is_always_correct(l.node)) {
                first_logged
                    .entry(l.pos)
                    .or_default()
                    .entry(*l.block)
                    .or_insert(l.t);
            }
            let both = first_logged
                .values()
                .filter(|m| m.len() > 1)
                .map(|m| *m.values().max().unwrap())
                .min()
                .expect("no fork");
            let (te, lands) = tr
                .events
                .iter()
                .find_map(|e| match e {
                    Event::Evidence { t, node, lands, .. } if s.is_always_correct(*node) => {
                        Some((*t, *lands))
                    }
                    _ => None,
                })
                .expect("no evidence");
            assert!(
                te <= both.max(p.t_gst) + p.delta_prop,
                "n={n} seed {seed}: evidence at {te}, fork at {both}"
            );
            assert!(lands > te && lands <= te + p.delta_write);
            let slashed = tr.events.iter().any(|e| match e {
                Event::Primary { t, slashes, .. } => {
                    *t == lands && slashes.iter().any(|x| x.result.is_ok())
                }
                _ => false,
            });
            assert!(slashed, "n={n} seed {seed}: no slash at {lands}");
        }
    }
}

#[test]
fn early_resets_are_rejected_and_quiescence_holds() {
    let s = scenarios::early_reset(0);
    let spammer: BTreeSet<NodeId> = s.byzantine_nodes();
    let tr = run(&s).unwrap();
    let mut rejected = 0;
    for e in &tr.events {
        if let Event::Primary { entries, .. } = e {
            for o in entries {
                if o.entry.kind == EntryKindTag::Reset && spammer.contains(&o.submitter) {
                    if let Some(r) = o.rejected {
                        assert_eq!(r, RejectReason::RecentEntry);
                        rejected += 1;
                    }
                }
            }
        }
    }
    assert!(rejected > 100, "{rejected}");
    for p in [
        Property::ResetQuiescence,
        Property::Agreement,
        Property::Progress,
    ] {
        let v = checks::check(&tr, p);
        assert!(v.is_pass(), "{v}");
    }
}

#[test]
fn no_decision_before_gst_when_every_message_is_held() {
    for (byz, fault) in [
        (vec![], Fault::Silent),
        (vec![3], Fault::Silent),
        (vec![0], Fault::Equivocate),
    ] {
        for gst in [30, 75, 120] {
            let spec = SingleRun {
                seed: gst,
                weights: (0..4).map(|i| (NodeId(i), 1)).collect(),
                byzantine: byz.iter().copied().map(NodeId).collect(),
                fault,
                start: 0,
                t_gst: gst,
                delta_prop: 2,
                uniform_input: true,
                hold_until_gst: true,
            };
            let out = run_single(&spec);
            assert!(check_single(&spec, &out).all());
            assert!(
                out.decisions.values().all(|d| d.t >= gst),
                "{byz:?} gst {gst}"
            );
            assert!(out.decisions.values().all(|d| d.t <= spec.deadline()));
        }
    }
}
