//! Run traces: one JSON event per line, header first, summary last.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use aegis_core::consensus::VoteKind;
use aegis_core::node::{LogVia, StepNote};
use aegis_core::primary::{RejectReason, SlashError, StakeRecord, StakeTx};
use aegis_core::validation::InvalidReason;
use aegis_core::{hash, ConsensusId, Hash, NodeId, Step};
use serde::{Deserialize, Serialize};

use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertInfo {
    pub instance: ConsensusId,
    pub committee_ref: Hash,
    pub round: u32,
    pub signers: BTreeSet<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKindTag {
    Reset,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub kind: EntryKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Hash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub submitter: NodeId,
    #[serde(flatten)]
    pub entry: EntryInfo,
    /// None when accepted.
    pub rejected: Option<RejectReason>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashInfo {
    pub submitter: NodeId,
    pub result: Result<(BTreeSet<NodeId>, BTreeSet<NodeId>), SlashError>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorKind {
    /// A node signed two values for one (instance, round, kind).
    DoubleVote,
    /// A certificate carries a correct node's signature that the node never
    /// broadcast as a precommit.
    UnsentSignature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    Header {
        schedule: Schedule,
    },
    Log {
        t: Step,
        node: NodeId,
        pos: u64,
        block: Hash,
        parent: Hash,
        payload: String,
        via: LogVia,
        /// Time of the primary block defining the block's committee.
        committee_time: Option<Step>,
        cert: Option<CertInfo>,
    },
    Submit {
        t: Step,
        node: NodeId,
        lands: Step,
        #[serde(flatten)]
        entry: EntryInfo,
    },
    Evidence {
        t: Step,
        node: NodeId,
        lands: Step,
        instance: ConsensusId,
        round: u32,
        culprits: BTreeSet<NodeId>,
    },
    Primary {
        t: Step,
        block: Hash,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        stake: Vec<StakeTx>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        entries: Vec<EntryOutcome>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        slashes: Vec<SlashInfo>,
    },
    Note {
        t: Step,
        node: NodeId,
        note: StepNote,
        ledger: u64,
    },
    Probe {
        t: Step,
        node: NodeId,
        block: Hash,
        height: u64,
        verdict: Result<(), InvalidReason>,
    },
    Monitor {
        t: Step,
        node: NodeId,
        kind: MonitorKind,
        instance: ConsensusId,
        round: u32,
        vote: Option<VoteKind>,
    },
    Final {
        t: Step,
        #[serde(with = "pairs")]
        ledgers: BTreeMap<NodeId, (u64, Hash)>,
        #[serde(with = "pairs")]
        stake: BTreeMap<NodeId, StakeRecord>,
        messages: u64,
    },
}

/// Maps as lists of pairs: integer map keys do not survive the buffering
/// done for internally tagged enums.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        m: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

impl Event {
    pub fn time(&self) -> Option<Step> {
        match self {
            Event::Header { .. } => None,
            Event::Log { t, .. }
            | Event::Submit { t, .. }
            | Event::Evidence { t, .. }
            | Event::Primary { t, .. }
            | Event::Note { t, .. }
            | Event::Probe { t, .. }
            | Event::Monitor { t, .. }
            | Event::Final { t, .. } => Some(*t),
        }
    }
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<Event>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace has no header")]
    NoHeader,
}

impl Trace {
    pub fn schedule(&self) -> &Schedule {
        match self.events.first() {
            Some(Event::Header { schedule }) => schedule,
            _ => panic!("trace without header"),
        }
    }

    pub fn final_state(
        &self,
    ) -> Option<(
        &BTreeMap<NodeId, (u64, Hash)>,
        &BTreeMap<NodeId, StakeRecord>,
    )> {
        self.events.iter().rev().find_map(|e| match e {
            Event::Final { ledgers, stake, .. } => Some((ledgers, stake)),
            _ => None,
        })
    }

    pub fn horizon(&self) -> Step {
        self.schedule().horizon()
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("writing to memory");
        out
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|source| TraceError::Json {
                line: i + 1,
                source,
            })?;
            events.push(e);
        }
        if !matches!(events.first(), Some(Event::Header { .. })) {
            return Err(TraceError::NoHeader);
        }
        Ok(Trace { events })
    }

    pub fn digest(&self) -> Hash {
        hash(&self.to_ndjson())
    }

    /// Log events in order.
    pub fn logs(&self) -> impl Iterator<Item = LogView<'_>> {
        self.events.iter().filter_map(|e| match e {
            Event::Log {
                t,
                node,
                pos,
                block,
                payload,
                committee_time,
                cert,
                ..
            } => Some(LogView {
                t: *t,
                node: *node,
                pos: *pos,
                block,
                payload,
                committee_time: *committee_time,
                cert: cert.as_ref(),
            }),
            _ => None,
        })
    }

    /// Accepted entries as (step, kind, height).
    pub fn accepted_entries(&self) -> Vec<(Step, EntryKindTag, Option<u64>, Option<Hash>)> {
        let mut out = Vec::new();
        for e in &self.events {
            if let Event::Primary { t, entries, .. } = e {
                for o in entries.iter().filter(|o| o.rejected.is_none()) {
                    out.push((*t, o.entry.kind, o.entry.height, o.entry.target));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogView<'a> {
    pub t: Step,
    pub node: NodeId,
    pub pos: u64,
    pub block: &'a Hash,
    pub payload: &'a str,
    pub committee_time: Option<Step>,
    pub cert: Option<&'a CertInfo>,
}

/// Printable form of a payload: UTF-8 when possible, hex otherwise.
pub fn payload_text(p: &[u8]) -> String {
    match std::str::from_utf8(p) {
        Ok(s) if s.chars().all(|c| !c.is_control()) => s.to_string(),
        _ => format!("0x{}", hex::encode(p)),
    }
}
