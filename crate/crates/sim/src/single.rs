//! Single-instance runs of the reference consensus, checked for Agreement,
//! Validity and Termination in isolation from the expansion chain.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use aegis_core::consensus::{
    consensus_validate, ConsensusEngine, Recipients, RoundTiming, StepRequest, TendermintEngine,
};
use aegis_core::crypto::SigningKey;
use aegis_core::{genesis, hash, AegisBlock, Committee, ConsensusId, Hash, NodeId, Step, Weight};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::byzantine::{EquivPlan, EquivocatingEngine};
use crate::network::{Network, Payload};
use crate::schedule::DelayPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Silent,
    Equivocate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleRun {
    pub seed: u64,
    pub weights: BTreeMap<NodeId, Weight>,
    pub byzantine: BTreeSet<NodeId>,
    pub fault: Fault,
    /// Step at which round 0 starts.
    pub start: Step,
    pub t_gst: Step,
    pub delta_prop: Step,
    /// Correct nodes all propose the same payload.
    pub uniform_input: bool,
    /// Every message is held until GST, then delivered Δp later.
    #[serde(default)]
    pub hold_until_gst: bool,
}

impl SingleRun {
    /// A random committee of 4 to 10 nodes whose Byzantine weight is below
    /// one third, with GST anywhere in the first 100 steps.
    pub fn random(seed: u64) -> SingleRun {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0004);
        let n = r.gen_range(4..=10u32);
        let weights: BTreeMap<NodeId, Weight> =
            (0..n).map(|i| (NodeId(i), r.gen_range(1..=4))).collect();
        let total: Weight = weights.values().sum();
        let mut order: Vec<NodeId> = weights.keys().copied().collect();
        order.shuffle(&mut r);
        let mut byzantine = BTreeSet::new();
        let mut bad = 0;
        for id in order {
            let w = weights[&id];
            if 3 * (bad + w) < total && r.gen_bool(0.5) {
                byzantine.insert(id);
                bad += w;
            }
        }
        SingleRun {
            seed,
            weights,
            byzantine,
            fault: if r.gen_bool(0.5) {
                Fault::Silent
            } else {
                Fault::Equivocate
            },
            start: r.gen_range(0..20),
            t_gst: r.gen_range(0..100),
            delta_prop: r.gen_range(1..=4),
            uniform_input: r.gen_bool(0.5),
            hold_until_gst: false,
        }
    }

    pub fn timing(&self) -> RoundTiming {
        RoundTiming::for_delta_prop(self.delta_prop)
    }

    /// Steps after max(start, GST) within which every correct node decides:
    /// at most one faulty leader per Byzantine node before a correct one.
    pub fn delta_consensus(&self) -> Step {
        self.timing().termination_bound(self.byzantine.len() as u64)
    }

    pub fn deadline(&self) -> Step {
        self.start.max(self.t_gst) + self.delta_consensus()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub t: Step,
    pub block: Hash,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleOutcome {
    pub decisions: BTreeMap<NodeId, Decision>,
    /// What each correct node proposes.
    pub inputs: BTreeMap<NodeId, Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SingleVerdict {
    pub agreement: bool,
    pub validity: bool,
    pub termination: bool,
}

impl SingleVerdict {
    pub fn all(&self) -> bool {
        self.agreement && self.validity && self.termination
    }
}

/// Runs the instance until every correct node has decided or two deadlines
/// have passed.
pub fn run_single(spec: &SingleRun) -> SingleOutcome {
    let g = Arc::new(genesis().clone());
    let primary_ref = hash(b"single-instance primary block");
    let committee = Committee::new(spec.weights.clone(), primary_ref);
    let instance = ConsensusId {
        parent: g.id,
        reset: None,
    };
    let timing = spec.timing();
    let ids: Vec<NodeId> = spec.weights.keys().copied().collect();
    let correct: Vec<NodeId> = ids
        .iter()
        .copied()
        .filter(|n| !spec.byzantine.contains(n))
        .collect();

    let plan = Arc::new(EquivPlan {
        coalition: spec.byzantine.clone(),
        group_a: correct.iter().copied().step_by(2).collect(),
    });
    let mut engines: BTreeMap<NodeId, Box<dyn ConsensusEngine>> = BTreeMap::new();
    for &n in &ids {
        let key = SigningKey::new(n);
        let e: Box<dyn ConsensusEngine> = if !spec.byzantine.contains(&n) {
            Box::new(TendermintEngine::new(key, timing))
        } else if spec.fault == Fault::Equivocate {
            Box::new(EquivocatingEngine::new(key, timing, plan.clone()))
        } else {
            continue;
        };
        engines.insert(n, e);
    }
    let inputs: BTreeMap<NodeId, Vec<u8>> = ids
        .iter()
        .map(|n| {
            let p = if spec.uniform_input {
                b"v".to_vec()
            } else {
                format!("v:n{}", n.0).into_bytes()
            };
            (*n, p)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(5);
    let policy = if spec.hold_until_gst {
        DelayPolicy::FixedMax
    } else {
        DelayPolicy::Uniform
    };
    let mut net = Network::new(policy, spec.delta_prop, spec.t_gst, BTreeMap::new(), rng);
    let mut decisions = BTreeMap::new();
    let end = spec.deadline() + spec.delta_consensus();
    let mut t = 0;
    while t <= end && decisions.len() < correct.len() {
        for env in net.due(t) {
            let Some(e) = engines.get_mut(&env.to) else {
                continue;
            };
            match env.payload {
                Payload::Consensus(m) => e.on_message((*m).clone()),
                // a certified block counts as a decision, as for a full node
                Payload::Block(b) => {
                    if !spec.byzantine.contains(&env.to)
                        && consensus_validate(&b, &instance, &committee)
                    {
                        decisions.entry(env.to).or_insert(Decision {
                            t,
                            block: b.id,
                            payload: b.payload.clone(),
                        });
                    }
                }
            }
        }
        if t >= spec.start {
            for (&n, e) in engines.iter_mut() {
                if decisions.contains_key(&n) {
                    continue;
                }
                let input = inputs[&n].clone();
                let propose = || AegisBlock::propose(&g, primary_ref, None, input.clone());
                let accept = |b: &AegisBlock| {
                    b.parent == Some(g.id) && b.content_hash() == b.id && b.height == 1
                };
                let out = e.step(StepRequest {
                    instance,
                    committee: &committee,
                    anchor: spec.start,
                    t,
                    propose: &propose,
                    accept: &accept,
                });
                for o in out.outgoing {
                    let to = match o.to {
                        Recipients::All => ids.clone(),
                        Recipients::Only(v) => v,
                    };
                    net.send(t, n, &to, Payload::Consensus(Arc::new(o.msg)));
                }
                if let Some(b) = out.decided {
                    if let Entry::Vacant(slot) = decisions.entry(n) {
                        slot.insert(Decision {
                            t,
                            block: b.id,
                            payload: b.payload.clone(),
                        });
                        net.send(t, n, &ids, Payload::Block(Arc::new(b)));
                    }
                }
            }
        }
        t += 1;
    }
    let inputs = inputs
        .into_iter()
        .filter(|(n, _)| correct.contains(n))
        .collect();
    SingleOutcome { decisions, inputs }
}

pub fn check_single(spec: &SingleRun, out: &SingleOutcome) -> SingleVerdict {
    let values: BTreeSet<Hash> = out.decisions.values().map(|d| d.block).collect();
    let agreement = values.len() <= 1;
    // only constrained when every node is correct with one input
    let validity = !(spec.byzantine.is_empty() && spec.uniform_input)
        || out.decisions.values().all(|d| d.payload == b"v");
    let deadline = spec.deadline();
    let termination = out
        .inputs
        .keys()
        .all(|n| out.decisions.get(n).is_some_and(|d| d.t <= deadline));
    SingleVerdict {
        agreement,
        validity,
        termination,
    }
}
