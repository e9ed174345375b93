//! Scenario description: parameters, participants, network adversary and
//! Byzantine scripts. Everything a run depends on lives here, so a run is a
//! pure function of its schedule.

use std::collections::BTreeSet;
use std::path::Path;

use aegis_core::consensus::RoundTiming;
use aegis_core::node::NodeConfig;
use aegis_core::primary::StakeTx;
use aegis_core::{NodeId, Params, ParamsError, Step, Weight};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Stake placed in primary block 0; zero for nodes that start unstaked.
    #[serde(default = "one")]
    pub stake: Weight,
    /// First step at which the node runs. Messages sent earlier are handed
    /// over at this step.
    #[serde(default)]
    pub join: Step,
}

fn one() -> Weight {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StakeEvent {
    pub at: Step,
    pub tx: StakeTx,
}

/// Kind of network message, for handcrafted delay rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Proposal,
    Prevote,
    Precommit,
    Block,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayRule {
    #[serde(default)]
    pub from: Option<NodeId>,
    #[serde(default)]
    pub to: Option<NodeId>,
    #[serde(default)]
    pub kind: Option<MsgKind>,
    /// Applies to messages sent in `[since, until)`.
    #[serde(default)]
    pub since: Step,
    #[serde(default = "forever")]
    pub until: Step,
    /// Requested delay; clamped to the model's bound.
    pub delay: Step,
}

fn forever() -> Step {
    Step::MAX
}

/// Delivery delays. Every policy is clamped so that a message sent at `t`
/// arrives in `[t + 1, max(t, t_gst) + Δp]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayPolicy {
    /// Uniform in the allowed range.
    Uniform,
    /// Always the latest allowed step.
    FixedMax,
    /// Messages from or to `nodes` take the latest allowed step, others one.
    Targeted { nodes: Vec<NodeId> },
    /// Before GST, messages between different groups take the latest
    /// allowed step; within a group, or from nodes outside every group, one.
    Partition {
        groups: Vec<Vec<NodeId>>,
        #[serde(default)]
        since: Step,
    },
    /// First matching rule wins; unmatched messages take one step.
    Handcrafted { rules: Vec<DelayRule> },
}

/// Delay between submitting a primary transaction and its inclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WritePolicy {
    Uniform,
    Max,
    Min,
}

/// Order of contract entries that land in the same primary block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryOrder {
    Submission,
    Reverse,
    Seeded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsensusKind {
    Reference {
        #[serde(default)]
        timing: Option<RoundTiming>,
    },
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    /// Takes no action at all.
    Silent,
    /// Precommits reach only the coalition and are released to everyone
    /// `hold` steps later; gossiped blocks and entries are delayed likewise.
    Withhold { hold: Step },
    /// As leader, proposes two blocks to two halves of the correct nodes and
    /// votes for each side's block towards that side. Votes nothing in
    /// rounds led by correct nodes.
    Equivocate { group_a: Vec<NodeId> },
    /// Runs the protocol; once the committee of the latest checkpoint is
    /// stale, signs a block on the checkpointed block for the reset-less
    /// instance and gossips it, together with a copy relabelled as the
    /// following reset committee's block. Submits checkpoints of both.
    StaleCommitteeBlock,
    /// After its stake is withdrawn, forges certified chains under the first
    /// reset, one from genesis and one on the latest checkpoint, and gossips
    /// them to nodes that join later.
    LongRangeFork { length: u64 },
    /// Submits a reset every step.
    SpamResets,
}

/// A coalition of nodes sharing one behaviour from `from` on. Before `from`
/// its members run the protocol correctly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub nodes: Vec<NodeId>,
    pub behavior: Behavior,
    #[serde(default)]
    pub from: Step,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub params: Params,
    /// Defaults to 20 Δa.
    #[serde(default)]
    pub horizon: Option<Step>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub stake_events: Vec<StakeEvent>,
    #[serde(default = "uniform_delay")]
    pub delay: DelayPolicy,
    #[serde(default = "uniform_write")]
    pub writes: WritePolicy,
    #[serde(default = "submission_order")]
    pub entry_order: EntryOrder,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
    #[serde(default)]
    pub node: NodeConfig,
    #[serde(default = "reference")]
    pub consensus: ConsensusKind,
}

fn uniform_delay() -> DelayPolicy {
    DelayPolicy::Uniform
}

fn uniform_write() -> WritePolicy {
    WritePolicy::Uniform
}

fn submission_order() -> EntryOrder {
    EntryOrder::Submission
}

fn reference() -> ConsensusKind {
    ConsensusKind::Reference { timing: None }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid parameters: {0}")]
    Params(#[from] ParamsError),
    #[error("no nodes")]
    NoNodes,
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("stake event at step {at} after GST ({gst})")]
    StakeAfterGst { at: Step, gst: Step },
    #[error("node {0} is in more than one Byzantine coalition")]
    OverlappingCoalitions(NodeId),
    #[error("horizon must be positive")]
    EmptyHorizon,
    #[error("cannot read schedule: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse schedule: {0}")]
    Parse(#[from] toml::de::Error),
}

impl Schedule {
    /// `n` equally staked nodes, synchronous network, no adversary.
    pub fn uniform(name: &str, seed: u64, params: Params, n: u32) -> Schedule {
        Schedule {
            name: name.to_string(),
            seed,
            params,
            horizon: None,
            nodes: (0..n)
                .map(|i| NodeSpec {
                    id: NodeId(i),
                    stake: 1,
                    join: 0,
                })
                .collect(),
            stake_events: Vec::new(),
            delay: DelayPolicy::Uniform,
            writes: WritePolicy::Uniform,
            entry_order: EntryOrder::Submission,
            byzantine: Vec::new(),
            node: NodeConfig::default(),
            consensus: reference(),
        }
    }

    pub fn load(path: &Path) -> Result<Schedule, ScheduleError> {
        let text = std::fs::read_to_string(path)?;
        let s: Schedule = toml::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schedules serialize")
    }

    pub fn horizon(&self) -> Step {
        self.horizon.unwrap_or(20 * self.params.delta_active)
    }

    pub fn timing(&self) -> RoundTiming {
        match self.consensus {
            ConsensusKind::Reference { timing: Some(t) } => t,
            _ => RoundTiming::for_delta_prop(self.params.delta_prop),
        }
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn byzantine_nodes(&self) -> BTreeSet<NodeId> {
        self.byzantine
            .iter()
            .flat_map(|b| b.nodes.iter().copied())
            .collect()
    }

    /// Coalition of `node` and the step from which it misbehaves.
    pub fn coalition_of(&self, node: NodeId) -> Option<&ByzantineSpec> {
        self.byzantine.iter().find(|b| b.nodes.contains(&node))
    }

    /// Whether `node` behaves correctly at step `t`.
    pub fn is_correct_at(&self, node: NodeId, t: Step) -> bool {
        self.coalition_of(node).is_none_or(|b| t < b.from)
    }

    /// Whether `node` is correct throughout the run.
    pub fn is_always_correct(&self, node: NodeId) -> bool {
        self.coalition_of(node).is_none()
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        self.params.validate()?;
        if self.nodes.is_empty() {
            return Err(ScheduleError::NoNodes);
        }
        if self.horizon() == 0 {
            return Err(ScheduleError::EmptyHorizon);
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(ScheduleError::DuplicateNode(n.id));
            }
        }
        for e in &self.stake_events {
            if e.at > self.params.t_gst {
                return Err(ScheduleError::StakeAfterGst {
                    at: e.at,
                    gst: self.params.t_gst,
                });
            }
            if !ids.contains(&e.tx.node()) {
                return Err(ScheduleError::UnknownNode(e.tx.node()));
            }
        }
        let mut seen = BTreeSet::new();
        for b in &self.byzantine {
            for n in &b.nodes {
                if !ids.contains(n) {
                    return Err(ScheduleError::UnknownNode(*n));
                }
                if !seen.insert(*n) {
                    return Err(ScheduleError::OverlappingCoalitions(*n));
                }
            }
            if let Behavior::Equivocate { group_a } = &b.behavior {
                if let Some(n) = group_a.iter().find(|n| !ids.contains(n)) {
                    return Err(ScheduleError::UnknownNode(*n));
                }
            }
        }
        let referenced = match &self.delay {
            DelayPolicy::Targeted { nodes } => nodes.clone(),
            DelayPolicy::Partition { groups, .. } => groups.iter().flatten().copied().collect(),
            DelayPolicy::Handcrafted { rules } => rules
                .iter()
                .flat_map(|r| [r.from, r.to])
                .flatten()
                .collect(),
            _ => Vec::new(),
        };
        if let Some(n) = referenced.iter().find(|n| !ids.contains(n)) {
            return Err(ScheduleError::UnknownNode(*n));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut s = Schedule::uniform("t", 7, Params::default(), 4);
        s.delay = DelayPolicy::Partition {
            groups: vec![vec![NodeId(0), NodeId(1)], vec![NodeId(2)]],
            since: 3,
        };
        s.byzantine.push(ByzantineSpec {
            nodes: vec![NodeId(3)],
            behavior: Behavior::Withhold { hold: 5 },
            from: 10,
        });
        s.stake_events.push(StakeEvent {
            at: 0,
            tx: StakeTx::Unstake { node: NodeId(1) },
        });
        let text = s.to_toml();
        let back: Schedule = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn stake_after_gst_rejected() {
        let mut s = Schedule::uniform("t", 0, Params::default(), 4);
        s.stake_events.push(StakeEvent {
            at: 5,
            tx: StakeTx::Unstake { node: NodeId(1) },
        });
        assert!(matches!(
            s.validate(),
            Err(ScheduleError::StakeAfterGst { .. })
        ));
        s.params.t_gst = 5;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn unknown_and_duplicate_nodes_rejected() {
        let mut s = Schedule::uniform("t", 0, Params::default(), 2);
        s.delay = DelayPolicy::Targeted {
            nodes: vec![NodeId(9)],
        };
        assert!(matches!(s.validate(), Err(ScheduleError::UnknownNode(_))));
        s.delay = DelayPolicy::Uniform;
        s.nodes.push(s.nodes[0].clone());
        assert!(matches!(s.validate(), Err(ScheduleError::DuplicateNode(_))));
    }
}
