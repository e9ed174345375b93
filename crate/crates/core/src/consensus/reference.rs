//! Reference protocol: rotating leader, prevote/precommit with locking,
//! quorum of strictly more than two thirds of the committee weight.
//!
//! Rounds are anchored at an absolute step shared by all nodes, so after GST
//! every correct node is in the same round without round-change messages.
//! Round `r` lasts `min(base * 2^r, cap)` steps. Within a round a node
//! prevotes nil a third of the way in if it has no acceptable proposal and
//! precommits nil two thirds of the way in if it saw no polka.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    ConsensusEngine, ConsensusMessage, Outgoing, Proposal, QuorumCertificate, StepOutput,
    StepRequest, Vote, VoteKind,
};
use crate::crypto::SigningKey;
use crate::types::{AegisBlock, Committee, ConsensusId, Hash, NodeId, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub base: Step,
    pub cap: Step,
}

impl RoundTiming {
    /// Shortest rounds in which a correct leader decides after GST:
    /// proposal, prevotes and precommits each take at most `Δp` steps and
    /// must land before the one-third and two-thirds marks.
    pub fn for_delta_prop(delta_prop: Step) -> Self {
        let base = 3 * (delta_prop + 1);
        RoundTiming {
            base,
            cap: 2 * base,
        }
    }

    pub fn round_len(&self, r: u32) -> Step {
        let shift = r.min(40);
        (self.base << shift).min(self.cap).max(3)
    }

    /// (round, start, length) of the round containing `t`.
    pub fn round_at(&self, anchor: Step, t: Step) -> (u32, Step, Step) {
        let mut r = 0u32;
        let mut start = anchor;
        loop {
            let len = self.round_len(r);
            if t < start + len {
                return (r, start, len);
            }
            if len >= self.cap {
                let k = (t - start) / len;
                return (r + k as u32, start + k * len, len);
            }
            start += len;
            r += 1;
        }
    }

    /// Steps after GST within which an instance decides when at most
    /// `faulty_leaders` consecutive rounds have a faulty leader: one partial
    /// round to realign, the faulty rounds, and one good round.
    pub fn termination_bound(&self, faulty_leaders: u64) -> Step {
        self.cap * (faulty_leaders + 2)
    }
}

#[derive(Default)]
struct Instance {
    committee: Option<Committee>,
    pending: Vec<ConsensusMessage>,
    proposals: BTreeMap<u32, Proposal>,
    blocks: BTreeMap<Hash, Arc<AegisBlock>>,
    /// Keyed by (voter, value): an equivocator counts towards each value.
    votes: BTreeMap<(VoteKind, u32), BTreeMap<(NodeId, Option<Hash>), Vote>>,
    proposed: BTreeSet<u32>,
    prevoted: BTreeSet<u32>,
    precommitted: BTreeSet<u32>,
    locked: Option<(u32, Hash)>,
    valid: Option<(u32, Hash)>,
    accepted: BTreeSet<Hash>,
    decided: Option<AegisBlock>,
}

fn leader(committee: &Committee, round: u32) -> NodeId {
    let n = committee.len();
    committee
        .members()
        .nth(round as usize % n)
        .expect("nonempty committee")
}

impl Instance {
    fn ingest(&mut self, msg: ConsensusMessage) {
        let committee = self
            .committee
            .as_ref()
            .expect("committee set before ingest");
        match msg {
            ConsensusMessage::Proposal(p) => {
                if p.proposer != leader(committee, p.round)
                    || p.block.parent != Some(p.instance.parent)
                    || p.block.reset_ref != p.instance.reset
                    || !p.verify()
                {
                    return;
                }
                self.blocks
                    .entry(p.block.id)
                    .or_insert_with(|| p.block.clone());
                self.proposals.entry(p.round).or_insert(p);
            }
            ConsensusMessage::Vote(v) => {
                if !committee.contains(v.voter) || !v.verify() {
                    return;
                }
                self.votes
                    .entry((v.kind, v.round))
                    .or_default()
                    .entry((v.voter, v.value))
                    .or_insert(v);
            }
        }
    }

    fn tally(&self, kind: VoteKind, round: u32, value: Option<Hash>) -> bool {
        let committee = self.committee.as_ref().unwrap();
        let w = self
            .votes
            .get(&(kind, round))
            .map(|m| {
                m.values()
                    .filter(|v| v.value == value)
                    .map(|v| committee.weight_of(v.voter))
                    .sum()
            })
            .unwrap_or(0);
        committee.is_quorum(w)
    }

    /// Values with a quorum of `kind` votes in `round`.
    fn quorum_values(&self, kind: VoteKind, round: u32) -> Vec<Hash> {
        let Some(m) = self.votes.get(&(kind, round)) else {
            return Vec::new();
        };
        let values: BTreeSet<Hash> = m.values().filter_map(|v| v.value).collect();
        values
            .into_iter()
            .filter(|v| self.tally(kind, round, Some(*v)))
            .collect()
    }

    fn is_acceptable(&mut self, id: Hash, accept: &dyn Fn(&AegisBlock) -> bool) -> bool {
        if self.accepted.contains(&id) {
            return true;
        }
        let ok = self.blocks.get(&id).is_some_and(|b| accept(b));
        if ok {
            self.accepted.insert(id);
        }
        ok
    }
}

/// Reference engine for one node.
pub struct TendermintEngine {
    key: SigningKey,
    timing: RoundTiming,
    instances: BTreeMap<ConsensusId, Instance>,
}

impl TendermintEngine {
    pub fn new(key: SigningKey, timing: RoundTiming) -> Self {
        TendermintEngine {
            key,
            timing,
            instances: BTreeMap::new(),
        }
    }

    pub fn timing(&self) -> RoundTiming {
        self.timing
    }

    /// Current lock of an instance, for tests.
    pub fn locked(&self, instance: &ConsensusId) -> Option<(u32, Hash)> {
        self.instances.get(instance).and_then(|i| i.locked)
    }

    fn vote(
        &self,
        inst: &mut Instance,
        out: &mut Vec<Outgoing>,
        kind: VoteKind,
        instance: ConsensusId,
        round: u32,
        value: Option<Hash>,
    ) {
        let v = Vote::signed(&self.key, kind, instance, round, value);
        inst.ingest(ConsensusMessage::Vote(v.clone()));
        out.push(Outgoing::all(ConsensusMessage::Vote(v)));
    }
}

impl ConsensusEngine for TendermintEngine {
    fn node(&self) -> NodeId {
        self.key.node()
    }

    fn on_message(&mut self, msg: ConsensusMessage) {
        let inst = self.instances.entry(*msg.instance()).or_default();
        if inst.decided.is_none() {
            inst.pending.push(msg);
        }
    }

    fn step(&mut self, req: StepRequest<'_>) -> StepOutput {
        let me = self.key.node();
        let id = req.instance;
        let mut inst = self.instances.remove(&id).unwrap_or_default();
        let mut out = Vec::new();

        if inst.decided.is_none() && !req.committee.is_empty() {
            if inst.committee.is_none() {
                inst.committee = Some(req.committee.clone());
            }
            for m in std::mem::take(&mut inst.pending) {
                inst.ingest(m);
            }
            let (r, start, len) = self.timing.round_at(req.anchor, req.t);
            let committee = inst.committee.clone().unwrap();
            loop {
                let mut changed = false;

                if leader(&committee, r) == me && !inst.proposed.contains(&r) {
                    let reuse = inst
                        .valid
                        .and_then(|(vr, v)| inst.blocks.get(&v).map(|b| (b.clone(), Some(vr))));
                    let (block, pol) = reuse.unwrap_or_else(|| (Arc::new((req.propose)()), None));
                    let p = Proposal::signed(&self.key, id, r, block.clone(), pol);
                    inst.ingest(ConsensusMessage::Proposal(p.clone()));
                    out.push(Outgoing::all(ConsensusMessage::Proposal(p)));
                    // relay the prevotes behind the proposal's lock round
                    if let Some(vr) = pol {
                        let polka: Vec<Vote> = inst.votes[&(VoteKind::Prevote, vr)]
                            .values()
                            .filter(|v| v.value == Some(block.id) && v.voter != me)
                            .cloned()
                            .collect();
                        out.extend(
                            polka
                                .into_iter()
                                .map(|v| Outgoing::all(ConsensusMessage::Vote(v))),
                        );
                    }
                    inst.proposed.insert(r);
                    changed = true;
                }

                if !inst.prevoted.contains(&r) {
                    let mut choice: Option<Option<Hash>> = None;
                    if let Some(p) = inst.proposals.get(&r).cloned() {
                        let v = p.block.id;
                        match p.pol_round {
                            None => {
                                let free = inst.locked.is_none_or(|(_, lv)| lv == v);
                                let ok = free && inst.is_acceptable(v, req.accept);
                                choice = Some(ok.then_some(v));
                            }
                            Some(pr) if pr < r && inst.tally(VoteKind::Prevote, pr, Some(v)) => {
                                let free = inst.locked.is_none_or(|(lr, lv)| lr <= pr || lv == v);
                                let ok = free && inst.is_acceptable(v, req.accept);
                                choice = Some(ok.then_some(v));
                            }
                            Some(pr) if pr >= r => choice = Some(None),
                            Some(_) => {}
                        }
                    }
                    if choice.is_none() && req.t >= start + len / 3 {
                        choice = Some(None);
                    }
                    if let Some(value) = choice {
                        inst.prevoted.insert(r);
                        self.vote(&mut inst, &mut out, VoteKind::Prevote, id, r, value);
                        changed = true;
                    }
                }

                if !inst.precommitted.contains(&r) {
                    let mut choice: Option<Option<Hash>> = None;
                    for v in inst.quorum_values(VoteKind::Prevote, r) {
                        if inst.is_acceptable(v, req.accept) {
                            inst.locked = Some((r, v));
                            inst.valid = Some((r, v));
                            choice = Some(Some(v));
                            break;
                        }
                    }
                    if choice.is_none()
                        && (inst.tally(VoteKind::Prevote, r, None) || req.t >= start + 2 * len / 3)
                    {
                        choice = Some(None);
                    }
                    if let Some(value) = choice {
                        inst.precommitted.insert(r);
                        self.vote(&mut inst, &mut out, VoteKind::Precommit, id, r, value);
                        changed = true;
                    }
                }

                let prevote_rounds: Vec<u32> = inst
                    .votes
                    .keys()
                    .filter(|(k, _)| *k == VoteKind::Prevote)
                    .map(|(_, rr)| *rr)
                    .collect();
                for rr in prevote_rounds {
                    if inst.valid.is_some_and(|(vr, _)| vr >= rr) {
                        continue;
                    }
                    for v in inst.quorum_values(VoteKind::Prevote, rr) {
                        if inst.is_acceptable(v, req.accept) {
                            inst.valid = Some((rr, v));
                            changed = true;
                            break;
                        }
                    }
                }

                let precommit_rounds: Vec<u32> = inst
                    .votes
                    .keys()
                    .filter(|(k, _)| *k == VoteKind::Precommit)
                    .map(|(_, rr)| *rr)
                    .collect();
                for rr in precommit_rounds {
                    for v in inst.quorum_values(VoteKind::Precommit, rr) {
                        let Some(b) = inst.blocks.get(&v) else {
                            continue;
                        };
                        let signatures = inst.votes[&(VoteKind::Precommit, rr)]
                            .values()
                            .filter(|x| x.value == Some(v))
                            .map(|x| (x.voter, x.sig))
                            .collect();
                        let qc = QuorumCertificate {
                            instance: id,
                            committee_ref: committee.defined_at,
                            round: rr,
                            value: v,
                            signatures,
                        };
                        inst.decided = Some((**b).clone().with_cert(qc));
                        break;
                    }
                    if inst.decided.is_some() {
                        break;
                    }
                }
                if inst.decided.is_some() || !changed {
                    break;
                }
            }
            if inst.decided.is_some() {
                // keep only what is needed to answer later queries
                inst.proposals.clear();
                inst.blocks.clear();
                inst.votes.clear();
                inst.pending.clear();
            }
        }

        let decided = inst.decided.clone();
        self.instances.insert(id, inst);
        StepOutput {
            decided,
            outgoing: out,
        }
    }

    fn prune(&mut self, keep: &dyn Fn(&ConsensusId) -> bool) {
        self.instances.retain(|id, _| keep(id));
    }
}
