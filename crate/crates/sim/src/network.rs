//! Reliable, partially synchronous message delivery.

use std::collections::BTreeMap;
use std::sync::Arc;

use aegis_core::consensus::{ConsensusMessage, VoteKind};
use aegis_core::{AegisBlock, NodeId, Step};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::schedule::{DelayPolicy, MsgKind};

#[derive(Clone, Debug)]
pub enum Payload {
    Block(Arc<AegisBlock>),
    Consensus(Arc<ConsensusMessage>),
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::Block(_) => MsgKind::Block,
            Payload::Consensus(m) => match m.as_ref() {
                ConsensusMessage::Proposal(_) => MsgKind::Proposal,
                ConsensusMessage::Vote(v) if v.kind == VoteKind::Prevote => MsgKind::Prevote,
                ConsensusMessage::Vote(_) => MsgKind::Precommit,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub sent: Step,
    pub payload: Payload,
}

pub struct Network {
    policy: DelayPolicy,
    delta_prop: Step,
    t_gst: Step,
    joins: BTreeMap<NodeId, Step>,
    queue: BTreeMap<Step, Vec<Envelope>>,
    rng: ChaCha8Rng,
    sent: u64,
}

impl Network {
    pub fn new(
        policy: DelayPolicy,
        delta_prop: Step,
        t_gst: Step,
        joins: BTreeMap<NodeId, Step>,
        rng: ChaCha8Rng,
    ) -> Self {
        Network {
            policy,
            delta_prop,
            t_gst,
            joins,
            queue: BTreeMap::new(),
            rng,
            sent: 0,
        }
    }

    /// Latest step at which a message sent at `t` may arrive.
    pub fn bound(&self, t: Step) -> Step {
        t.max(self.t_gst) + self.delta_prop
    }

    pub fn sent_count(&self) -> u64 {
        self.sent
    }

    fn delay_for(&mut self, from: NodeId, to: NodeId, kind: MsgKind, t: Step) -> Step {
        let latest = self.bound(t);
        let max = latest - t;
        let d = match &self.policy {
            DelayPolicy::Uniform => self.rng.gen_range(1..=max),
            DelayPolicy::FixedMax => max,
            DelayPolicy::Targeted { nodes } => {
                if nodes.contains(&from) || nodes.contains(&to) {
                    max
                } else {
                    1
                }
            }
            DelayPolicy::Partition { groups, since } => {
                let group = |n: NodeId| groups.iter().position(|g| g.contains(&n));
                let split = match (group(from), group(to)) {
                    (Some(a), Some(b)) => a != b,
                    _ => false,
                };
                if split && t >= *since {
                    max
                } else {
                    1
                }
            }
            DelayPolicy::Handcrafted { rules } => rules
                .iter()
                .find(|r| {
                    r.from.is_none_or(|f| f == from)
                        && r.to.is_none_or(|x| x == to)
                        && r.kind.is_none_or(|k| k == kind)
                        && (r.since..r.until).contains(&t)
                })
                .map(|r| r.delay)
                .unwrap_or(1),
        };
        d.clamp(1, max)
    }

    /// Schedules `payload` from `from` to every node in `to`, including the
    /// sender. Nodes that have not joined yet receive it when they join.
    pub fn send(&mut self, t: Step, from: NodeId, to: &[NodeId], payload: Payload) {
        let kind = payload.kind();
        for &n in to {
            self.sent += 1;
            let at = if n == from {
                t + 1
            } else {
                t + self.delay_for(from, n, kind, t)
            };
            let at = at.max(self.joins.get(&n).copied().unwrap_or(0));
            self.queue.entry(at).or_default().push(Envelope {
                from,
                to: n,
                sent: t,
                payload: payload.clone(),
            });
        }
    }

    /// Messages due at `t`, in sending order.
    pub fn due(&mut self, t: Step) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some((&at, _)) = self.queue.first_key_value() {
            if at > t {
                break;
            }
            out.extend(self.queue.pop_first().unwrap().1);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.values().map(Vec::len).sum()
    }
}
