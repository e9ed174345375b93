//! The event loop. Each step: release held messages, deliver due messages,
//! let coalitions inject, run every node in id order, then append the
//! primary block for the step.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use aegis_core::consensus::{
    extract_evidence, ConsensusMessage, OracleEngine, OracleRegistry, Outgoing, Recipients,
    TendermintEngine, VoteKind,
};
use aegis_core::crypto::SigningKey;
use aegis_core::node::{Action, Node, StepContext, StepNote};
use aegis_core::primary::{EntryVerdict, PrimaryChain, PrimaryTx, StakeTx};
use aegis_core::validation::is_valid;
use aegis_core::{AegisBlock, ConsensusId, Hash, NodeId, Step};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::byzantine::{EquivPlan, EquivocatingEngine, Injection, LongRangeForger, StaleForger};
use crate::network::{Network, Payload};
use crate::schedule::{Behavior, ConsensusKind, EntryOrder, Schedule, ScheduleError, WritePolicy};
use crate::trace::{
    payload_text, CertInfo, EntryInfo, EntryKindTag, EntryOutcome, Event, MonitorKind, SlashInfo,
    Trace,
};

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn entry_info(e: &aegis_core::primary::Entry) -> EntryInfo {
    match e.target() {
        None => EntryInfo {
            kind: EntryKindTag::Reset,
            target: None,
            height: None,
        },
        Some(b) => EntryInfo {
            kind: EntryKindTag::Checkpoint,
            target: Some(b.id),
            height: Some(b.height),
        },
    }
}

fn cert_info(b: &AegisBlock) -> Option<CertInfo> {
    b.cert.as_ref().map(|qc| CertInfo {
        instance: qc.instance,
        committee_ref: qc.committee_ref,
        round: qc.round,
        signers: qc.signers(),
    })
}

enum Held {
    Send(Outgoing),
    Block(Arc<AegisBlock>),
    Tx(PrimaryTx),
}

struct Slot {
    node: Node,
    join: Step,
    inbox_blocks: Vec<Arc<AegisBlock>>,
    inbox_msgs: Vec<ConsensusMessage>,
    last_note: Option<StepNote>,
    swapped: bool,
}

enum Forger {
    Stale(StaleForger),
    LongRange(LongRangeForger),
}

pub struct Sim {
    schedule: Schedule,
    t: Step,
    chain: PrimaryChain,
    slots: BTreeMap<NodeId, Slot>,
    ids: Vec<NodeId>,
    network: Network,
    pending: BTreeMap<Step, Vec<PrimaryTx>>,
    held: BTreeMap<Step, Vec<(NodeId, Held)>>,
    stake_events: BTreeMap<Step, Vec<StakeTx>>,
    forgers: Vec<Forger>,
    write_rng: ChaCha8Rng,
    salt_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    votes: HashMap<(NodeId, ConsensusId, u32, VoteKind), Option<Hash>>,
    double_flagged: HashSet<(NodeId, ConsensusId, u32, VoteKind)>,
    precommits: HashSet<(NodeId, ConsensusId, u32, Hash)>,
    audited: HashSet<Hash>,
    probed: HashSet<(NodeId, Hash)>,
    events: Vec<Event>,
}

impl Sim {
    pub fn new(schedule: &Schedule) -> Result<Sim, ScheduleError> {
        schedule.validate()?;
        let s = schedule.clone();
        let p = &s.params;
        let registry = OracleRegistry::new();
        let timing = s.timing();
        let mut slots = BTreeMap::new();
        for spec in &s.nodes {
            let key = SigningKey::new(spec.id);
            let engine: Box<dyn aegis_core::consensus::ConsensusEngine> = match s.consensus {
                ConsensusKind::Reference { .. } => Box::new(TendermintEngine::new(key, timing)),
                ConsensusKind::Oracle => Box::new(OracleEngine::new(key, registry.clone())),
            };
            slots.insert(
                spec.id,
                Slot {
                    node: Node::new(spec.id, p.clone(), s.node, engine),
                    join: spec.join,
                    inbox_blocks: Vec::new(),
                    inbox_msgs: Vec::new(),
                    last_note: None,
                    swapped: false,
                },
            );
        }
        let joins = s.nodes.iter().map(|n| (n.id, n.join)).collect();
        let network = Network::new(
            s.delay.clone(),
            p.delta_prop,
            p.t_gst,
            joins,
            rng(s.seed, 1),
        );
        let mut stake_events: BTreeMap<Step, Vec<StakeTx>> = BTreeMap::new();
        for n in s.nodes.iter().filter(|n| n.stake > 0) {
            stake_events.entry(0).or_default().push(StakeTx::Stake {
                node: n.id,
                weight: n.stake,
            });
        }
        for e in &s.stake_events {
            stake_events.entry(e.at).or_default().push(e.tx.clone());
        }
        let forgers = s
            .byzantine
            .iter()
            .filter_map(|b| match b.behavior {
                Behavior::StaleCommitteeBlock => Some(Forger::Stale(StaleForger::new(
                    b.nodes.clone(),
                    b.from,
                    p.delta_active,
                ))),
                Behavior::LongRangeFork { length } => Some(Forger::LongRange(
                    LongRangeForger::new(b.nodes.clone(), b.from, length),
                )),
                _ => None,
            })
            .collect();
        let ids = s.node_ids().collect();
        Ok(Sim {
            chain: PrimaryChain::new(p.delta_active),
            t: 0,
            slots,
            ids,
            network,
            pending: BTreeMap::new(),
            held: BTreeMap::new(),
            stake_events,
            forgers,
            write_rng: rng(s.seed, 2),
            salt_rng: rng(s.seed, 3),
            order_rng: rng(s.seed, 4),
            votes: HashMap::new(),
            double_flagged: HashSet::new(),
            precommits: HashSet::new(),
            audited: HashSet::new(),
            probed: HashSet::new(),
            events: vec![Event::Header {
                schedule: s.clone(),
            }],
            schedule: s,
        })
    }

    pub fn now(&self) -> Step {
        self.t
    }

    pub fn chain(&self) -> &PrimaryChain {
        &self.chain
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.slots[&id].node
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn forgeries(&self) -> Vec<Arc<AegisBlock>> {
        self.forgers
            .iter()
            .flat_map(|f| match f {
                Forger::Stale(s) => s.forgeries.clone(),
                Forger::LongRange(l) => l.forgeries.clone(),
            })
            .collect()
    }

    fn byz_behavior(&self, node: NodeId, t: Step) -> Option<(&Behavior, &[NodeId])> {
        self.schedule
            .coalition_of(node)
            .filter(|b| t >= b.from)
            .map(|b| (&b.behavior, b.nodes.as_slice()))
    }

    fn write_delay(&mut self) -> Step {
        let dw = self.schedule.params.delta_write;
        match self.schedule.writes {
            WritePolicy::Uniform => self.write_rng.gen_range(1..=dw),
            WritePolicy::Max => dw,
            WritePolicy::Min => 1,
        }
    }

    fn submit(&mut self, node: NodeId, tx: PrimaryTx) {
        let t = self.t;
        let lands = t + self.write_delay();
        match &tx {
            PrimaryTx::Entry(e) => {
                if let Some(b) = e.target() {
                    self.audit(b);
                }
                self.events.push(Event::Submit {
                    t,
                    node,
                    lands,
                    entry: entry_info(e),
                });
            }
            PrimaryTx::Evidence { evidence, .. } => {
                let culprits = extract_evidence(&evidence.cert_a, &evidence.cert_b)
                    .map(|(_, c)| c)
                    .unwrap_or_default();
                self.events.push(Event::Evidence {
                    t,
                    node,
                    lands,
                    instance: evidence.instance,
                    round: evidence.cert_a.round,
                    culprits,
                });
            }
            PrimaryTx::Stake(_) => {}
        }
        self.pending.entry(lands).or_default().push(tx);
    }

    /// Flags certificate signatures of correct nodes that were never
    /// broadcast as precommits.
    fn audit(&mut self, b: &AegisBlock) {
        if matches!(self.schedule.consensus, ConsensusKind::Oracle) || !self.audited.insert(b.id) {
            return;
        }
        let Some(qc) = &b.cert else { return };
        for n in qc.signatures.keys() {
            if !self.schedule.is_correct_at(*n, self.t) {
                continue;
            }
            if !self
                .precommits
                .contains(&(*n, qc.instance, qc.round, qc.value))
            {
                self.events.push(Event::Monitor {
                    t: self.t,
                    node: *n,
                    kind: MonitorKind::UnsentSignature,
                    instance: qc.instance,
                    round: qc.round,
                    vote: None,
                });
            }
        }
    }

    fn watch(&mut self, msg: &ConsensusMessage) {
        let ConsensusMessage::Vote(v) = msg else {
            return;
        };
        let key = (v.voter, v.instance, v.round, v.kind);
        match self.votes.get(&key) {
            None => {
                self.votes.insert(key, v.value);
            }
            Some(prev) if *prev != v.value => {
                if self.double_flagged.insert(key) {
                    self.events.push(Event::Monitor {
                        t: self.t,
                        node: v.voter,
                        kind: MonitorKind::DoubleVote,
                        instance: v.instance,
                        round: v.round,
                        vote: Some(v.kind),
                    });
                }
            }
            Some(_) => {}
        }
        if let (VoteKind::Precommit, Some(value)) = (v.kind, v.value) {
            self.precommits
                .insert((v.voter, v.instance, v.round, value));
        }
    }

    fn send(&mut self, from: NodeId, o: Outgoing) {
        self.watch(&o.msg);
        let to = match o.to {
            Recipients::All => self.ids.clone(),
            Recipients::Only(v) => v,
        };
        self.network
            .send(self.t, from, &to, Payload::Consensus(Arc::new(o.msg)));
    }

    fn gossip(&mut self, from: NodeId, b: Arc<AegisBlock>, to: Option<Vec<NodeId>>) {
        self.audit(&b);
        let to = to.unwrap_or_else(|| self.ids.clone());
        self.network.send(self.t, from, &to, Payload::Block(b));
    }

    fn apply(&mut self, from: NodeId, action: Action) {
        let t = self.t;
        let withhold = match self.byz_behavior(from, t) {
            Some((Behavior::Withhold { hold }, c)) => Some((*hold, c.to_vec())),
            _ => None,
        };
        if let Some((hold, coalition)) = withhold {
            let at = t + hold.max(1);
            let held = match action {
                Action::Broadcast(o) => {
                    let is_precommit = matches!(&o.msg, ConsensusMessage::Vote(v) if v.kind == VoteKind::Precommit);
                    if !is_precommit {
                        self.send(from, o);
                        return;
                    }
                    self.send(
                        from,
                        Outgoing {
                            to: Recipients::Only(coalition),
                            msg: o.msg.clone(),
                        },
                    );
                    Held::Send(o)
                }
                Action::SendBlock(b) => Held::Block(b),
                Action::SubmitEntry(e) => Held::Tx(PrimaryTx::Entry(e)),
                Action::StartForensics(ev) => Held::Tx(PrimaryTx::Evidence {
                    evidence: ev,
                    submitter: from,
                }),
            };
            self.held.entry(at).or_default().push((from, held));
            return;
        }
        match action {
            Action::SendBlock(b) => self.gossip(from, b, None),
            Action::Broadcast(o) => self.send(from, o),
            Action::SubmitEntry(e) => self.submit(from, PrimaryTx::Entry(e)),
            Action::StartForensics(ev) => self.submit(
                from,
                PrimaryTx::Evidence {
                    evidence: ev,
                    submitter: from,
                },
            ),
        }
    }

    fn release_held(&mut self) {
        let due: Vec<(NodeId, Held)> = self.held.remove(&self.t).unwrap_or_default();
        for (from, h) in due {
            match h {
                Held::Send(o) => self.send(from, o),
                Held::Block(b) => self.gossip(from, b, None),
                Held::Tx(tx) => self.submit(from, tx),
            }
        }
    }

    fn inject(&mut self) {
        let t = self.t;
        let mut out = Vec::new();
        for f in self.forgers.iter_mut() {
            out.extend(match f {
                Forger::Stale(s) => s.act(t, &self.chain),
                Forger::LongRange(l) => l.act(t, &self.chain),
            });
        }
        for i in out {
            match i {
                Injection::Block { from, block } => self.gossip(from, block, None),
                Injection::BlockToJoiners { from, block, after } => {
                    let to: Vec<NodeId> = self
                        .schedule
                        .nodes
                        .iter()
                        .filter(|n| n.join > after)
                        .map(|n| n.id)
                        .collect();
                    if !to.is_empty() {
                        self.gossip(from, block, Some(to));
                    }
                }
                Injection::Submit(e) => {
                    let from = e.submitter;
                    self.submit(from, PrimaryTx::Entry(e));
                }
            }
        }
    }

    fn committee_time(&self, node: &Node, b: &AegisBlock) -> Option<Step> {
        if let Some(r) = b.reset_ref {
            return self.chain.time_of(&r);
        }
        let parent = node.ledger().get(b.height as usize - 1)?;
        parent.primary_ref.and_then(|r| self.chain.time_of(&r))
    }

    fn run_node(&mut self, id: NodeId) {
        let t = self.t;
        let behavior = self
            .byz_behavior(id, t)
            .map(|(b, c)| (b.clone(), c.to_vec()));
        let slot = self.slots.get_mut(&id).unwrap();
        if t < slot.join {
            return;
        }
        let blocks = std::mem::take(&mut slot.inbox_blocks);
        let messages = std::mem::take(&mut slot.inbox_msgs);
        match &behavior {
            Some((Behavior::Silent, _)) => return,
            Some((Behavior::Equivocate { group_a }, coalition)) if !slot.swapped => {
                slot.swapped = true;
                let plan = Arc::new(EquivPlan {
                    coalition: coalition.iter().copied().collect(),
                    group_a: group_a.iter().copied().collect(),
                });
                let engine =
                    EquivocatingEngine::new(SigningKey::new(id), self.schedule.timing(), plan);
                slot.node.set_engine(Box::new(engine));
            }
            _ => {}
        }
        let res = slot.node.step(StepContext {
            t,
            chain: &self.chain,
            blocks,
            messages,
        });
        if res.note != slot.last_note {
            slot.last_note = res.note;
            if let Some(note) = res.note {
                let ledger = slot.node.ledger().len() as u64;
                self.events.push(Event::Note {
                    t,
                    node: id,
                    note,
                    ledger,
                });
            }
        }
        let slot = &self.slots[&id];
        let mut logs = Vec::new();
        for l in &res.logged {
            logs.push(Event::Log {
                t,
                node: id,
                pos: l.pos,
                block: l.block.id,
                parent: l.block.parent.unwrap(),
                payload: payload_text(&l.block.payload),
                via: l.via,
                committee_time: self.committee_time(&slot.node, &l.block),
                cert: cert_info(&l.block),
            });
        }
        self.events.extend(logs);
        for a in res.actions {
            self.apply(id, a);
        }
        if matches!(behavior, Some((Behavior::SpamResets, _))) {
            self.submit(id, PrimaryTx::Entry(aegis_core::primary::Entry::reset(id)));
        }
        self.probe(id);
    }

    /// Records a late joiner's verdict on each long-range forgery it holds.
    fn probe(&mut self, id: NodeId) {
        let slot = &self.slots[&id];
        if slot.join == 0 {
            return;
        }
        let forged: Vec<Arc<AegisBlock>> = self
            .forgers
            .iter()
            .filter_map(|f| match f {
                Forger::LongRange(l) => Some(l.forgeries.iter().cloned()),
                _ => None,
            })
            .flatten()
            .collect();
        for f in forged {
            if self.probed.contains(&(id, f.id)) || !slot.node.store().contains(&f.id) {
                continue;
            }
            let verdict = is_valid(&f, &self.chain, slot.node.store());
            self.probed.insert((id, f.id));
            self.events.push(Event::Probe {
                t: self.t,
                node: id,
                block: f.id,
                height: f.height,
                verdict,
            });
        }
    }

    fn append_primary(&mut self) {
        let t = self.t;
        let mut txs: Vec<PrimaryTx> = self
            .stake_events
            .remove(&t)
            .unwrap_or_default()
            .into_iter()
            .map(PrimaryTx::Stake)
            .collect();
        let due = self.pending.remove(&t).unwrap_or_default();
        let (mut entries, evidence): (Vec<PrimaryTx>, Vec<PrimaryTx>) = due
            .into_iter()
            .partition(|tx| matches!(tx, PrimaryTx::Entry(_)));
        match self.schedule.entry_order {
            EntryOrder::Submission => {}
            EntryOrder::Reverse => entries.reverse(),
            EntryOrder::Seeded => entries.shuffle(&mut self.order_rng),
        }
        txs.extend(evidence);
        txs.extend(entries);
        let mut salt = [0u8; 32];
        self.salt_rng.fill(&mut salt);
        let report = self.chain.append(t, salt, txs);
        if report.stake.is_empty() && report.entries.is_empty() && report.slashes.is_empty() {
            return;
        }
        self.events.push(Event::Primary {
            t,
            block: report.id,
            stake: report
                .stake
                .into_iter()
                .filter(|(_, ok)| *ok)
                .map(|(s, _)| s)
                .collect(),
            entries: report
                .entries
                .iter()
                .map(|(e, v)| EntryOutcome {
                    submitter: e.submitter,
                    entry: entry_info(e),
                    rejected: match v {
                        EntryVerdict::Accepted => None,
                        EntryVerdict::Rejected(r) => Some(*r),
                    },
                })
                .collect(),
            slashes: report
                .slashes
                .into_iter()
                .map(|(submitter, r)| SlashInfo {
                    submitter,
                    result: r.map(|o| (o.culprits, o.penalized)),
                })
                .collect(),
        });
    }

    /// Runs step `now()` and advances the clock.
    pub fn step(&mut self) {
        self.release_held();
        for e in self.network.due(self.t) {
            let slot = self.slots.get_mut(&e.to).unwrap();
            match e.payload {
                Payload::Block(b) => slot.inbox_blocks.push(b),
                Payload::Consensus(m) => slot.inbox_msgs.push((*m).clone()),
            }
        }
        self.inject();
        for id in self.ids.clone() {
            self.run_node(id);
        }
        self.append_primary();
        self.t += 1;
    }

    pub fn finish(mut self) -> Trace {
        let ledgers = self
            .slots
            .iter()
            .map(|(id, s)| {
                let l = s.node.ledger();
                (*id, (l.len() as u64, l.last().unwrap().id))
            })
            .collect();
        self.events.push(Event::Final {
            t: self.t,
            ledgers,
            stake: self.chain.stake_book().clone(),
            messages: self.network.sent_count(),
        });
        Trace {
            events: self.events,
        }
    }

    /// Ledger of every node, for tests.
    pub fn ledgers(&self) -> BTreeMap<NodeId, Vec<Hash>> {
        self.slots
            .iter()
            .map(|(id, s)| (*id, s.node.ledger().iter().map(|b| b.id).collect()))
            .collect()
    }

    pub fn byzantine(&self) -> BTreeSet<NodeId> {
        self.schedule.byzantine_nodes()
    }
}

/// Runs a schedule to its horizon.
pub fn run(schedule: &Schedule) -> Result<Trace, ScheduleError> {
    let mut sim = Sim::new(schedule)?;
    for _ in 0..schedule.horizon() {
        sim.step();
    }
    Ok(sim.finish())
}
