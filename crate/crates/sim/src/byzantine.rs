//! Byzantine behaviours. A Byzantine node signs only with its own key;
//! coalitions pool what their members sign.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use aegis_core::consensus::{
    certify, certify_for, ConsensusEngine, ConsensusMessage, Outgoing, Proposal, Recipients,
    RoundTiming, StepOutput, StepRequest, Vote, VoteKind,
};
use aegis_core::crypto::SigningKey;
use aegis_core::primary::{Entry, PrimaryChain};
use aegis_core::{genesis, AegisBlock, Committee, ConsensusId, NodeId, Step};

/// Payload suffix of the second block of an equivocating proposal.
pub const B_SUFFIX: &[u8] = b"/b";

/// Shared plan of an equivocating coalition.
#[derive(Clone, Debug)]
pub struct EquivPlan {
    pub coalition: BTreeSet<NodeId>,
    pub group_a: BTreeSet<NodeId>,
}

impl EquivPlan {
    fn side_a(&self, committee: &Committee) -> Vec<NodeId> {
        committee
            .members()
            .filter(|n| self.group_a.contains(n) || self.coalition.contains(n))
            .collect()
    }

    fn side_b(&self, committee: &Committee) -> Vec<NodeId> {
        committee
            .members()
            .filter(|n| !self.group_a.contains(n) || self.coalition.contains(n))
            .collect()
    }

    fn honest_a(&self, committee: &Committee) -> Vec<NodeId> {
        committee
            .members()
            .filter(|n| self.group_a.contains(n) && !self.coalition.contains(n))
            .collect()
    }

    fn honest_b(&self, committee: &Committee) -> Vec<NodeId> {
        committee
            .members()
            .filter(|n| !self.group_a.contains(n) && !self.coalition.contains(n))
            .collect()
    }
}

fn leader(committee: &Committee, round: u32) -> NodeId {
    committee
        .members()
        .nth(round as usize % committee.len())
        .expect("nonempty committee")
}

/// Never decides. Splits every round led by a coalition member.
pub struct EquivocatingEngine {
    key: SigningKey,
    timing: RoundTiming,
    plan: Arc<EquivPlan>,
    /// Coalition proposals per (instance, round): (A, B).
    pairs: BTreeMap<(ConsensusId, u32), (Option<Arc<AegisBlock>>, Option<Arc<AegisBlock>>)>,
    proposed: BTreeSet<(ConsensusId, u32)>,
    voted: BTreeSet<(ConsensusId, u32)>,
}

impl EquivocatingEngine {
    pub fn new(key: SigningKey, timing: RoundTiming, plan: Arc<EquivPlan>) -> Self {
        EquivocatingEngine {
            key,
            timing,
            plan,
            pairs: BTreeMap::new(),
            proposed: BTreeSet::new(),
            voted: BTreeSet::new(),
        }
    }

    fn record(&mut self, p: &Proposal) {
        if !self.plan.coalition.contains(&p.proposer) || !p.verify() {
            return;
        }
        let slot = self.pairs.entry((p.instance, p.round)).or_default();
        if p.block.payload.ends_with(B_SUFFIX) {
            slot.1.get_or_insert_with(|| p.block.clone());
        } else {
            slot.0.get_or_insert_with(|| p.block.clone());
        }
    }
}

/// Second block of a split proposal: same fields, distinct payload.
pub fn twin(a: &AegisBlock) -> AegisBlock {
    let mut b = a.clone();
    b.payload.extend_from_slice(B_SUFFIX);
    b.cert = None;
    b.id = b.content_hash();
    b
}

impl ConsensusEngine for EquivocatingEngine {
    fn node(&self) -> NodeId {
        self.key.node()
    }

    fn on_message(&mut self, msg: ConsensusMessage) {
        if let ConsensusMessage::Proposal(p) = &msg {
            self.record(p);
        }
    }

    fn step(&mut self, req: StepRequest<'_>) -> StepOutput {
        let mut out = Vec::new();
        let (r, _, _) = self.timing.round_at(req.anchor, req.t);
        let id = req.instance;
        let c = req.committee;
        if leader(c, r) == self.key.node() && self.proposed.insert((id, r)) {
            let a = Arc::new((req.propose)());
            let b = Arc::new(twin(&a));
            for (block, to) in [(a, self.plan.side_a(c)), (b, self.plan.side_b(c))] {
                let p = Proposal::signed(&self.key, id, r, block, None);
                self.record(&p);
                out.push(Outgoing {
                    to: Recipients::Only(to),
                    msg: ConsensusMessage::Proposal(p),
                });
            }
        }
        let ready: Vec<(u32, Arc<AegisBlock>, Arc<AegisBlock>)> = self
            .pairs
            .range((id, 0)..=(id, u32::MAX))
            .filter(|(k, _)| !self.voted.contains(k))
            .filter_map(|((_, rr), (a, b))| Some((*rr, a.clone()?, b.clone()?)))
            .collect();
        for (rr, a, b) in ready {
            self.voted.insert((id, rr));
            for (block, to) in [(a, self.plan.honest_a(c)), (b, self.plan.honest_b(c))] {
                if to.is_empty() {
                    continue;
                }
                for kind in [VoteKind::Prevote, VoteKind::Precommit] {
                    let v = Vote::signed(&self.key, kind, id, rr, Some(block.id));
                    out.push(Outgoing {
                        to: Recipients::Only(to.clone()),
                        msg: ConsensusMessage::Vote(v),
                    });
                }
            }
        }
        StepOutput {
            decided: None,
            outgoing: out,
        }
    }

    fn prune(&mut self, keep: &dyn Fn(&ConsensusId) -> bool) {
        self.pairs.retain(|(id, _), _| keep(id));
    }
}

/// Something a coalition injects outside its members' protocol actions.
#[derive(Clone, Debug)]
pub enum Injection {
    /// Gossip to every node.
    Block {
        from: NodeId,
        block: Arc<AegisBlock>,
    },
    /// Gossip only to nodes that join after `after`.
    BlockToJoiners {
        from: NodeId,
        block: Arc<AegisBlock>,
        after: Step,
    },
    Submit(Entry),
}

fn keys(nodes: &[NodeId]) -> Vec<SigningKey> {
    nodes.iter().map(|n| SigningKey::new(*n)).collect()
}

/// Signers among `nodes` that belong to `committee`, if they form a quorum.
fn quorum_keys(nodes: &[NodeId], committee: &Committee) -> Option<Vec<SigningKey>> {
    let members: Vec<NodeId> = nodes
        .iter()
        .copied()
        .filter(|n| committee.contains(*n))
        .collect();
    committee
        .is_quorum(committee.weight_of_set(&members))
        .then(|| keys(&members))
}

/// Forges blocks for a stale committee's checkpointed block.
pub struct StaleForger {
    nodes: Vec<NodeId>,
    from: Step,
    delta_active: Step,
    /// Forged reset-less block and its checkpointed parent.
    forged: Option<(Arc<AegisBlock>, Arc<AegisBlock>)>,
    relabelled: bool,
    pub forgeries: Vec<Arc<AegisBlock>>,
}

impl StaleForger {
    pub fn new(nodes: Vec<NodeId>, from: Step, delta_active: Step) -> Self {
        StaleForger {
            nodes,
            from,
            delta_active,
            forged: None,
            relabelled: false,
            forgeries: Vec::new(),
        }
    }

    pub fn act(&mut self, t: Step, chain: &PrimaryChain) -> Vec<Injection> {
        let mut out = Vec::new();
        if t < self.from {
            return out;
        }
        let from = self.nodes[0];
        if self.forged.is_none() {
            let Some(x) = chain
                .latest_checkpoint()
                .and_then(|e| e.entry.target())
                .cloned()
            else {
                return out;
            };
            let Some(r) = x.primary_ref else { return out };
            let t0 = chain.time_of(&r).unwrap();
            if t < t0 + self.delta_active || chain.last_entry().is_some_and(|e| e.is_reset()) {
                return out;
            }
            let committee = chain.members(&r).unwrap();
            let Some(k) = quorum_keys(&self.nodes, &committee) else {
                return out;
            };
            let tip = chain.tip().unwrap().id;
            let b = AegisBlock::propose(&x, tip, None, b"stale".to_vec());
            let b = Arc::new(certify(b, r, 0, &k));
            self.forgeries.push(b.clone());
            out.push(Injection::Block {
                from,
                block: b.clone(),
            });
            let parent = x.clone();
            out.push(Injection::Submit(Entry::checkpoint(
                from,
                b.clone(),
                parent,
            )));
            self.forged = Some((b, x));
            return out;
        }
        if self.relabelled {
            return out;
        }
        let Some(reset) = chain.last_entry().filter(|e| e.is_reset()) else {
            return out;
        };
        let (b, x) = self.forged.clone().unwrap();
        let r = reset.primary_block;
        let committee = chain.members(&r).unwrap();
        let Some(k) = quorum_keys(&self.nodes, &committee) else {
            return out;
        };
        self.relabelled = true;

        // The stale certificate presented as the reset committee's.
        let mut relabel = (*b).clone();
        relabel.cert.as_mut().unwrap().committee_ref = r;
        // A block claiming the reset, signed for the reset-less instance.
        let tip = chain.tip().unwrap().id;
        let claim = AegisBlock::propose(&x, tip, Some(r), b"stale".to_vec());
        let claim = certify_for(
            claim,
            ConsensusId {
                parent: x.id,
                reset: None,
            },
            r,
            0,
            &k,
        );
        for f in [relabel, claim] {
            let f = Arc::new(f);
            self.forgeries.push(f.clone());
            out.push(Injection::Block {
                from,
                block: f.clone(),
            });
            out.push(Injection::Submit(Entry::checkpoint(from, f, x.clone())));
        }
        out
    }
}

/// Forges alternative histories with the first reset's committee after
/// that committee has withdrawn.
pub struct LongRangeForger {
    nodes: Vec<NodeId>,
    from: Step,
    length: u64,
    done: bool,
    pub forgeries: Vec<Arc<AegisBlock>>,
}

impl LongRangeForger {
    pub fn new(nodes: Vec<NodeId>, from: Step, length: u64) -> Self {
        LongRangeForger {
            nodes,
            from,
            length: length.max(1),
            done: false,
            forgeries: Vec::new(),
        }
    }

    pub fn act(&mut self, t: Step, chain: &PrimaryChain) -> Vec<Injection> {
        if self.done || t < self.from {
            return Vec::new();
        }
        let Some(first) = chain.accepted_entries().iter().find(|e| e.is_reset()) else {
            return Vec::new();
        };
        let r0 = first.primary_block;
        let committee = chain.members(&r0).unwrap();
        let Some(k) = quorum_keys(&self.nodes, &committee) else {
            return Vec::new();
        };
        self.done = true;
        let from = self.nodes[0];
        let mut blocks = Vec::new();

        // from genesis, every block under the first reset's committee
        let mut parent = Arc::new(genesis().clone());
        for i in 1..=self.length {
            let reset = (i == 1).then_some(r0);
            let b = AegisBlock::propose(&parent, r0, reset, format!("forged:{i}").into_bytes());
            let b = Arc::new(certify(b, r0, 0, &k));
            blocks.push(b.clone());
            parent = b;
        }

        // on the latest checkpoint, claiming the old reset
        if let Some(x) = chain.latest_checkpoint().and_then(|e| e.entry.target()) {
            let tip = chain.tip().unwrap().id;
            let b = AegisBlock::propose(x, tip, Some(r0), b"forged:suffix".to_vec());
            blocks.push(Arc::new(certify(b, r0, 0, &k)));
        }
        self.forgeries.extend(blocks.iter().cloned());
        blocks
            .into_iter()
            .map(|block| Injection::BlockToJoiners {
                from,
                block,
                after: self.from,
            })
            .collect()
    }
}
