use std::collections::BTreeMap;
use std::sync::Arc;

use aegis_core::{genesis, NodeId, Step};
use aegis_sim::checks::{self, Outcome, Property};
use aegis_sim::network::{Network, Payload};
use aegis_sim::schedule::{DelayPolicy, DelayRule};
use aegis_sim::{run, scenarios, Event, Schedule, Sim, Trace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn policy() -> impl Strategy<Value = DelayPolicy> {
    let node = (0u32..6).prop_map(NodeId);
    prop_oneof![
        Just(DelayPolicy::Uniform),
        Just(DelayPolicy::FixedMax),
        prop::collection::vec(node.clone(), 1..3).prop_map(|mut nodes| {
            nodes.sort();
            nodes.dedup();
            DelayPolicy::Targeted { nodes }
        }),
        (1u32..5, 0u64..80).prop_map(|(cut, since)| DelayPolicy::Partition {
            groups: vec![
                (0..cut).map(NodeId).collect(),
                (cut..6).map(NodeId).collect()
            ],
            since,
        }),
        prop::collection::vec((prop::option::of(node), 0u64..60, 1u64..400), 0..4).prop_map(
            |rules| {
                DelayPolicy::Handcrafted {
                    rules: rules
                        .into_iter()
                        .map(|(from, since, delay)| DelayRule {
                            from,
                            to: None,
                            kind: None,
                            since,
                            until: since + 30,
                            delay,
                        })
                        .collect(),
                }
            }
        ),
    ]
}

fn run_twice(s: &Schedule) -> (Trace, Trace) {
    (run(s).unwrap(), run(s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every message arrives, after its send step and no later than
    /// max(sent, GST) + Δp.
    #[test]
    fn delivery_is_reliable_and_bounded(
        policy in policy(),
        gst in 0u64..100,
        dp in 1u64..6,
        seed: u64,
        sends in prop::collection::vec((0u64..150, 0u32..6), 1..40),
    ) {
        let ids: Vec<NodeId> = (0..6).map(NodeId).collect();
        let mut net = Network::new(policy, dp, gst, BTreeMap::new(), ChaCha8Rng::seed_from_u64(seed));
        let block = Payload::Block(Arc::new(genesis().clone()));
        let mut sends = sends;
        sends.sort();
        let mut i = 0;
        let mut got = 0;
        let end = 150 + gst + dp + 1;
        for t in 0..=end {
            for e in net.due(t) {
                prop_assert!(t > e.sent);
                prop_assert!(t <= e.sent.max(gst) + dp, "sent {} delivered {t}", e.sent);
                got += 1;
            }
            while i < sends.len() && sends[i].0 == t {
                net.send(t, NodeId(sends[i].1), &ids, block.clone());
                i += 1;
            }
        }
        prop_assert_eq!(got, sends.len() * ids.len());
        prop_assert_eq!(net.in_flight(), 0);
    }

    /// Schedules survive the TOML round trip unchanged.
    #[test]
    fn schedule_toml_round_trip(seed in 0u64..10_000) {
        for s in [scenarios::random_adversarial(seed), scenarios::progress_run(seed), scenarios::validity_run(seed)] {
            let back: Schedule = toml::from_str(&s.to_toml()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    /// The generated adversaries never exceed a third of any committee.
    #[test]
    fn random_adversaries_stay_within_threshold(seed: u64) {
        let s = scenarios::random_adversarial(seed);
        prop_assert!(s.validate().is_ok());
        let (bad, total) = scenarios::worst_committee_share(&s);
        prop_assert!(3 * bad <= total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A run is a pure function of its schedule, and its trace reads back
    /// to the same events.
    #[test]
    fn runs_are_deterministic(seed in 0u64..100_000) {
        let s = scenarios::random_adversarial(seed);
        let (a, b) = run_twice(&s);
        let bytes = a.to_ndjson();
        prop_assert!(bytes == b.to_ndjson());
        let back = Trace::read_ndjson(&bytes[..]).unwrap();
        prop_assert!(back == a);
    }

    /// Ledgers have no gaps, start after genesis and stay chains; the
    /// primary chain gains one block per step.
    #[test]
    fn ledgers_and_primary_chain_are_well_formed(seed in 0u64..100_000) {
        let s = scenarios::random_adversarial(seed);
        let mut sim = Sim::new(&s).unwrap();
        for _ in 0..s.horizon() {
            sim.step();
        }
        let tip = sim.chain().tip().unwrap();
        prop_assert_eq!(tip.height, s.horizon() - 1);
        prop_assert_eq!(tip.time, s.horizon() - 1);
        let tr = sim.finish();
        let mut tips: BTreeMap<NodeId, (u64, aegis_core::Hash)> = BTreeMap::new();
        let mut last_primary: Option<Step> = None;
        for e in &tr.events {
            match e {
                Event::Log { node, pos, block, parent, .. } => {
                    let (p, id) = tips.get(node).copied().unwrap_or((0, genesis().id));
                    prop_assert_eq!(*pos, p + 1);
                    prop_assert_eq!(*parent, id);
                    tips.insert(*node, (*pos, *block));
                }
                Event::Primary { t, .. } => {
                    prop_assert!(last_primary.is_none_or(|l| l < *t));
                    last_primary = Some(*t);
                }
                _ => {}
            }
        }
    }

    /// Within the threshold every safety property holds, and no correct
    /// node's signature appears on anything it did not sign.
    #[test]
    fn safety_within_threshold(seed in 0u64..100_000) {
        let tr = run(&scenarios::random_adversarial(seed)).unwrap();
        for v in checks::safety_verdicts(&tr) {
            prop_assert!(v.is_ok(), "{}", v);
        }
    }

    /// Failures always come with a witness.
    #[test]
    fn failures_carry_witnesses(seed in 0u64..1000, n in prop::sample::select(vec![4u32, 7])) {
        let tr = run(&scenarios::equivocation(seed, n)).unwrap();
        let v = checks::check(&tr, Property::Agreement);
        prop_assert_eq!(v.outcome, Outcome::Fail);
        prop_assert!(v.witness.len() >= 2);
        prop_assert!(v.witness.iter().all(|w| w.node.is_some() && w.pos.is_some()));
    }
}
