//! Per-node protocol.
//!
//! Each step a node (1) finds the latest checkpoint, or the latest reset and
//! the checkpoint before it, and logs every block up to the checkpointed one;
//! (2) logs certified descendants while their committees are still active;
//! (3) runs consensus on the next block while the committee has enough time
//! left, issues a checkpoint at the deadline and a reset once the committee
//! has expired.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::consensus::{
    extract_evidence, ConsensusEngine, ConsensusMessage, ForensicsEvidence, Outgoing,
    QuorumCertificate, StepRequest,
};
use crate::primary::{Entry, PrimaryChain};
use crate::types::{genesis, AegisBlock, Committee, ConsensusId, Hash, NodeId, Params, Step};
use crate::validation::{proposal_acceptable, BlockStore, Validator};

/// Step the checkpoint deadline is measured from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadlineBase {
    /// `t0`, the time of the block that defines the current committee.
    #[default]
    CommitteeStart,
    /// Time of the primary block carrying the last contract entry.
    LastEntry,
}

/// How long uncheckpointed certified blocks are logged after a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncWindow {
    /// While `t ≤ t0 + Δa − 3Δw`, the checkpoint deadline.
    #[default]
    UntilDeadline,
    /// While `t < t0 + Δa`.
    UntilExpiry,
}

/// Which of a step's inputs reaches the block store first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadOrder {
    /// Gossiped blocks, then blocks carried by new contract entries.
    #[default]
    BlocksFirst,
    PrimaryFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Every node proposes `v:{pos}` at position `pos`.
    #[default]
    Uniform,
    /// Node `i` proposes `v:{pos}:n{i}`.
    PerNode,
}

impl InputSource {
    pub fn value(&self, node: NodeId, pos: u64) -> Vec<u8> {
        match self {
            InputSource::Uniform => format!("v:{pos}").into_bytes(),
            InputSource::PerNode => format!("v:{pos}:n{}", node.0).into_bytes(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    #[serde(default)]
    pub deadline: DeadlineBase,
    #[serde(default)]
    pub sync_window: SyncWindow,
    #[serde(default)]
    pub inputs: InputSource,
    #[serde(default)]
    pub read_order: ReadOrder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Gossip a certified block to every node.
    SendBlock(Arc<AegisBlock>),
    /// A consensus message for the network.
    Broadcast(Outgoing),
    SubmitEntry(Entry),
    StartForensics(ForensicsEvidence),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogVia {
    /// Ancestor of (or equal to) a checkpointed block.
    Checkpoint,
    /// Certified child of the tip, committee still active.
    Sync,
    /// Decided by this node.
    Consensus,
}

#[derive(Clone, Debug)]
pub struct LogRecord {
    pub pos: u64,
    pub block: Arc<AegisBlock>,
    pub via: LogVia,
}

/// How a step ended, for traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepNote {
    ResetIssued,
    ResetPending,
    TooCloseToTimeout,
    MissingAncestor,
    LocalConflict,
    Checkpointed,
    Extending,
    Idle,
}

pub struct StepContext<'a> {
    pub t: Step,
    /// Primary chain up to block `t − 1`.
    pub chain: &'a PrimaryChain,
    pub blocks: Vec<Arc<AegisBlock>>,
    pub messages: Vec<ConsensusMessage>,
}

#[derive(Debug, Default)]
pub struct StepResult {
    pub actions: Vec<Action>,
    pub logged: Vec<LogRecord>,
    pub note: Option<StepNote>,
}

/// Committee context established by the first phase.
struct Epoch {
    committee: Committee,
    t0: Step,
    /// Time of the primary block carrying the last entry.
    last_entry_time: Step,
    /// Reset block, when the last entry is a reset.
    reset: Option<Hash>,
    checkpointed: Arc<AegisBlock>,
}

pub struct Node {
    id: NodeId,
    params: Params,
    config: NodeConfig,
    ledger: Vec<Arc<AegisBlock>>,
    ledger_pos: HashMap<Hash, u64>,
    store: BlockStore,
    validator: Validator,
    engine: Box<dyn ConsensusEngine>,
    last_reset_submit: Option<Step>,
    entries_seen: usize,
    certs: BTreeMap<ConsensusId, BTreeMap<Hash, QuorumCertificate>>,
    reported: BTreeSet<(Hash, Hash)>,
}

impl Node {
    pub fn new(
        id: NodeId,
        params: Params,
        config: NodeConfig,
        engine: Box<dyn ConsensusEngine>,
    ) -> Self {
        let g = Arc::new(genesis().clone());
        let mut ledger_pos = HashMap::new();
        ledger_pos.insert(g.id, 0);
        Node {
            id,
            params,
            config,
            ledger: vec![g],
            ledger_pos,
            store: BlockStore::new(),
            validator: Validator::new(),
            engine,
            last_reset_submit: None,
            entries_seen: 0,
            certs: BTreeMap::new(),
            reported: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn ledger(&self) -> &[Arc<AegisBlock>] {
        &self.ledger
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn config(&self) -> NodeConfig {
        self.config
    }

    pub fn set_engine(&mut self, engine: Box<dyn ConsensusEngine>) {
        self.engine = engine;
    }

    fn log(&mut self, b: Arc<AegisBlock>, via: LogVia, out: &mut StepResult) {
        let pos = self.ledger.len() as u64;
        assert_eq!(b.height, pos, "blocks are logged at their height");
        assert_eq!(
            b.parent,
            Some(self.ledger[pos as usize - 1].id),
            "ledger stays a chain"
        );
        self.ledger_pos.insert(b.id, pos);
        self.ledger.push(b.clone());
        out.logged.push(LogRecord { pos, block: b, via });
    }

    fn observe(&mut self, b: &Arc<AegisBlock>, chain: &PrimaryChain, out: &mut StepResult) {
        let Some(qc) = &b.cert else { return };
        if qc.value != b.id || b.parent != Some(qc.instance.parent) {
            return;
        }
        let known = self
            .certs
            .get(&qc.instance)
            .is_some_and(|m| m.contains_key(&qc.value));
        if known {
            return;
        }
        let Some(committee) = chain.members(&qc.committee_ref) else {
            return;
        };
        if !qc.verify_against(&committee) {
            return;
        }
        let seen = self.certs.entry(qc.instance).or_default();
        for other in seen.values() {
            if let Some((ev, _)) = extract_evidence(other, qc) {
                let key = (ev.cert_a.value, ev.cert_b.value);
                if self.reported.insert(key) {
                    out.actions.push(Action::StartForensics(ev));
                }
            }
        }
        seen.insert(qc.value, qc.clone());
    }

    fn submit_reset(&mut self, t: Step, out: &mut StepResult) {
        let due = self
            .last_reset_submit
            .is_none_or(|last| t >= last + self.params.delta_write);
        if due {
            self.last_reset_submit = Some(t);
            out.actions.push(Action::SubmitEntry(Entry::reset(self.id)));
            out.note = Some(StepNote::ResetIssued);
        } else {
            out.note = Some(StepNote::ResetPending);
        }
    }

    fn read_blocks(
        &mut self,
        blocks: Vec<Arc<AegisBlock>>,
        chain: &PrimaryChain,
        out: &mut StepResult,
    ) {
        for b in blocks {
            if self.store.insert(b.clone()) {
                self.observe(&b, chain, out);
            }
        }
    }

    fn read_entries(&mut self, chain: &PrimaryChain, out: &mut StepResult) {
        let entries = chain.accepted_entries();
        for e in &entries[self.entries_seen..] {
            if let Some(b) = e.entry.target() {
                if let crate::primary::EntryKind::Checkpoint { parent, .. } = &e.entry.kind {
                    self.store.insert(parent.clone());
                }
                self.store.insert(b.clone());
                self.observe(b, chain, out);
            }
        }
        self.entries_seen = entries.len();
    }

    pub fn step(&mut self, ctx: StepContext<'_>) -> StepResult {
        let mut out = StepResult::default();
        let chain = ctx.chain;
        let t = ctx.t;
        let p = self.params.clone();

        match self.config.read_order {
            ReadOrder::BlocksFirst => {
                self.read_blocks(ctx.blocks, chain, &mut out);
                self.read_entries(chain, &mut out);
            }
            ReadOrder::PrimaryFirst => {
                self.read_entries(chain, &mut out);
                self.read_blocks(ctx.blocks, chain, &mut out);
            }
        }
        for m in ctx.messages {
            self.engine.on_message(m);
        }

        let Some(epoch) = self.phase_one(t, chain, &mut out) else {
            return out;
        };
        if !self.sync_to_checkpoint(&epoch, &mut out) {
            return out;
        }

        // Phase 2: the checkpointed block's committee is still active.
        let x = epoch.checkpointed.clone();
        let on_track = self
            .ledger
            .get(x.height as usize)
            .is_some_and(|b| b.id == x.id);
        if !on_track {
            out.note = Some(StepNote::LocalConflict);
        }
        let window_open = match self.config.sync_window {
            SyncWindow::UntilDeadline => t <= p.extension_end(epoch.t0),
            SyncWindow::UntilExpiry => t < epoch.t0 + p.delta_active,
        };
        let mut b = x.clone();
        let mut committee = epoch.committee.clone();
        if on_track && window_open {
            let mut expected_reset = epoch.reset;
            loop {
                let next = b.height + 1;
                let chosen = if (next as usize) < self.ledger.len() {
                    let c = self.ledger[next as usize].clone();
                    let ok = c.parent == Some(b.id)
                        && c.reset_ref == expected_reset
                        && self.validator.is_valid(&c, chain, &self.store);
                    ok.then_some(c)
                } else {
                    let kids: Vec<Hash> = self.store.children(&b.id).copied().collect();
                    let mut pick = None;
                    for id in kids {
                        let c = self.store.get(&id).unwrap().clone();
                        if c.reset_ref == expected_reset
                            && self.validator.is_valid(&c, chain, &self.store)
                        {
                            pick = Some(c);
                            break;
                        }
                    }
                    if let Some(c) = &pick {
                        self.log(c.clone(), LogVia::Sync, &mut out);
                    }
                    pick
                };
                let Some(c) = chosen else { break };
                b = c;
                expected_reset = None;
                match b.primary_ref.and_then(|r| chain.members(&r)) {
                    Some(n) => committee = n,
                    None => break,
                }
            }
        }

        // Phase 3: extend while the committee has enough time left.
        let tip_matches = self.ledger.last().is_some_and(|l| l.id == b.id);
        if t < p.extension_end(epoch.t0) && tip_matches {
            out.note = Some(StepNote::Extending);
            if committee.contains(self.id) {
                let reset = if b.id == x.id { epoch.reset } else { None };
                let instance = ConsensusId {
                    parent: b.id,
                    reset,
                };
                let anchor = match reset {
                    Some(_) => epoch.t0,
                    None => b
                        .primary_ref
                        .and_then(|r| chain.time_of(&r))
                        .unwrap_or(epoch.t0),
                };
                let view_tip = chain.tip().map(|pb| pb.id).expect("nonempty primary chain");
                let input = self.config.inputs.value(self.id, b.height + 1);
                let parent = b.clone();
                let propose = || AegisBlock::propose(&parent, view_tip, reset, input.clone());
                let accept = |c: &AegisBlock| proposal_acceptable(c, &parent, &instance, chain);
                let res = self.engine.step(StepRequest {
                    instance,
                    committee: &committee,
                    anchor,
                    t,
                    propose: &propose,
                    accept: &accept,
                });
                out.actions
                    .extend(res.outgoing.into_iter().map(Action::Broadcast));
                if let Some(d) = res.decided {
                    let d = Arc::new(d);
                    self.store.insert(d.clone());
                    self.observe(&d, chain, &mut out);
                    self.log(d.clone(), LogVia::Consensus, &mut out);
                    out.actions.push(Action::SendBlock(d.clone()));
                    b = d;
                    let len = self.ledger.len() as u64;
                    let pos = &self.ledger_pos;
                    self.engine.prune(&|id: &ConsensusId| {
                        pos.get(&id.parent).is_none_or(|k| k + 1 >= len)
                    });
                }
            }
        }

        let deadline_base = match self.config.deadline {
            DeadlineBase::CommitteeStart => epoch.t0,
            DeadlineBase::LastEntry => epoch.last_entry_time,
        };
        if t == p.extension_end(deadline_base) && b.id != x.id {
            let parent = self.store.get(&b.parent.unwrap()).unwrap().clone();
            out.actions.push(Action::SubmitEntry(Entry::checkpoint(
                self.id,
                b.clone(),
                parent,
            )));
            out.note = Some(StepNote::Checkpointed);
            return out;
        }
        if t > epoch.t0 + p.delta_active {
            self.submit_reset(t, &mut out);
            return out;
        }
        out.note.get_or_insert(StepNote::Idle);
        out
    }

    fn phase_one(&mut self, t: Step, chain: &PrimaryChain, out: &mut StepResult) -> Option<Epoch> {
        let p = &self.params;
        let Some(last) = chain.last_entry() else {
            self.submit_reset(t, out);
            return None;
        };
        if last.is_reset() {
            let tr = last.accepted_at;
            if t + p.delta_write < tr + p.delta_active {
                let checkpointed = match chain.latest_checkpoint() {
                    Some(c) => c.entry.target().unwrap().clone(),
                    None => self.ledger[0].clone(),
                };
                return Some(Epoch {
                    committee: chain.members(&last.primary_block).unwrap(),
                    t0: tr,
                    last_entry_time: tr,
                    reset: Some(last.primary_block),
                    checkpointed,
                });
            }
            if t > tr + p.delta_active {
                self.submit_reset(t, out);
            } else {
                out.note = Some(StepNote::TooCloseToTimeout);
            }
            return None;
        }
        let x = last.entry.target().unwrap().clone();
        let r = x
            .primary_ref
            .expect("checkpointed blocks reference the primary chain");
        Some(Epoch {
            committee: chain.members(&r).unwrap(),
            t0: chain.time_of(&r).unwrap(),
            last_entry_time: last.accepted_at,
            reset: None,
            checkpointed: x,
        })
    }

    /// Logs every ancestor of the checkpointed block above the ledger tip.
    /// Returns false if the step must end here.
    fn sync_to_checkpoint(&mut self, epoch: &Epoch, out: &mut StepResult) -> bool {
        let x = &epoch.checkpointed;
        let len = self.ledger.len() as u64;
        if x.height < len {
            return true;
        }
        let mut path = Vec::with_capacity((x.height - len + 1) as usize);
        let mut cur = x.clone();
        loop {
            path.push(cur.clone());
            if cur.height == len {
                break;
            }
            match cur.parent.and_then(|p| self.store.get(&p)) {
                Some(p) => cur = p.clone(),
                None => {
                    out.note = Some(StepNote::MissingAncestor);
                    return false;
                }
            }
        }
        if cur.parent != Some(self.ledger[len as usize - 1].id) {
            out.note = Some(StepNote::LocalConflict);
            return false;
        }
        for b in path.into_iter().rev() {
            self.log(b, LogVia::Checkpoint, out);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{certify, OracleEngine, OracleRegistry};
    use crate::crypto::SigningKey;
    use crate::primary::{EntryVerdict, PrimaryTx, StakeTx};
    use crate::types::hash;

    fn params() -> Params {
        Params {
            delta_active: 30,
            delta_write: 2,
            delta_prop: 1,
            delta_consensus: 20,
            ..Params::default()
        }
    }

    fn keys(ids: &[u32]) -> Vec<SigningKey> {
        ids.iter().map(|i| SigningKey::new(NodeId(*i))).collect()
    }

    fn node(id: u32, reg: &OracleRegistry) -> Node {
        Node::new(
            NodeId(id),
            params(),
            NodeConfig::default(),
            Box::new(OracleEngine::new(SigningKey::new(NodeId(id)), reg.clone())),
        )
    }

    struct Bench {
        chain: PrimaryChain,
        pending: Vec<PrimaryTx>,
    }

    impl Bench {
        fn new() -> Self {
            let mut chain = PrimaryChain::new(params().delta_active);
            chain.append(
                0,
                [0; 32],
                (0..4)
                    .map(|n| {
                        PrimaryTx::Stake(StakeTx::Stake {
                            node: NodeId(n),
                            weight: 1,
                        })
                    })
                    .collect(),
            );
            Bench {
                chain,
                pending: Vec::new(),
            }
        }

        fn t(&self) -> Step {
            self.chain.len() as Step
        }

        fn close(&mut self) -> Vec<EntryVerdict> {
            let t = self.t();
            let txs = std::mem::take(&mut self.pending);
            let r = self.chain.append(t, hash(&t.to_be_bytes()).0, txs);
            r.entries.into_iter().map(|(_, v)| v).collect()
        }

        fn step(&mut self, n: &mut Node, blocks: Vec<Arc<AegisBlock>>) -> StepResult {
            n.step(StepContext {
                t: self.t(),
                chain: &self.chain,
                blocks,
                messages: vec![],
            })
        }

        fn reset(&mut self) -> Hash {
            self.pending.push(PrimaryTx::Entry(Entry::reset(NodeId(0))));
            let v = self.close();
            assert_eq!(v, vec![EntryVerdict::Accepted]);
            self.chain.tip().unwrap().id
        }

        fn advance_to(&mut self, t: Step) {
            while self.t() < t {
                self.close();
            }
        }
    }

    fn entries(r: &StepResult) -> Vec<&Entry> {
        r.actions
            .iter()
            .filter_map(|a| match a {
                Action::SubmitEntry(e) => Some(e),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fresh_system_issues_reset() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let mut n = node(0, &reg);
        let r = b.step(&mut n, vec![]);
        assert_eq!(entries(&r), vec![&Entry::reset(NodeId(0))]);
        // rate limited until Δw has passed
        let r = b.step(&mut n, vec![]);
        assert!(entries(&r).is_empty());
    }

    #[test]
    fn stale_reset_triggers_new_reset() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let tr = b.t();
        b.reset();
        let mut n = node(0, &reg);
        let p = params();
        // between tr + Δa − Δw and tr + Δa nothing happens
        b.advance_to(tr + p.delta_active - p.delta_write);
        let r = b.step(&mut n, vec![]);
        assert_eq!(r.note, Some(StepNote::TooCloseToTimeout));
        b.advance_to(tr + p.delta_active + 1);
        let r = b.step(&mut n, vec![]);
        assert!(entries(&r).iter().all(|e| e.is_reset()) && entries(&r).len() == 1);
    }

    #[test]
    fn first_block_built_on_genesis_by_reset_committee() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let tr = b.t();
        let reset = b.reset();
        let mut n = node(0, &reg);
        let r = b.step(&mut n, vec![]);
        assert_eq!(r.logged.len(), 1);
        let blk = &n.ledger()[1];
        assert_eq!(blk.parent, Some(genesis().id));
        assert_eq!(blk.reset_ref, Some(reset));
        assert_eq!(blk.payload, b"v:1");
        let qc = blk.cert.as_ref().unwrap();
        assert_eq!(qc.committee_ref, reset);
        assert_eq!(
            qc.instance,
            ConsensusId {
                parent: genesis().id,
                reset: Some(reset)
            }
        );
        assert!(r
            .actions
            .iter()
            .any(|a| matches!(a, Action::SendBlock(x) if x.id == blk.id)));
        let _ = tr;
    }

    #[test]
    fn honest_cycle_checkpoints_at_deadline() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let tr = b.t();
        b.reset();
        let mut nodes: Vec<Node> = (0..4).map(|i| node(i, &reg)).collect();
        let p = params();
        let deadline = p.extension_end(tr);
        let mut submitted = Vec::new();
        while b.t() <= deadline {
            let t = b.t();
            for n in nodes.iter_mut() {
                let r = b.step(n, vec![]);
                for e in entries(&r) {
                    submitted.push((t, e.clone()));
                }
            }
            b.close();
        }
        // one block per step until the deadline, then checkpoints of the tip
        let len = nodes[0].ledger().len() as u64;
        assert_eq!(len - 1, deadline - tr - 1);
        assert!(nodes.iter().all(|n| n.ledger() == nodes[0].ledger()));
        assert_eq!(submitted.len(), 4);
        assert!(submitted
            .iter()
            .all(|(t, e)| *t == deadline && e.target().unwrap().height == len - 1));
        // the checkpoint lands within Δw and is accepted
        b.advance_to(deadline + p.delta_write);
        b.pending.push(PrimaryTx::Entry(submitted[0].1.clone()));
        assert_eq!(b.close(), vec![EntryVerdict::Accepted]);
        // the next committee starts from the checkpointed block's reference
        let x = nodes[0].ledger().last().unwrap().clone();
        let r = b.step(&mut nodes[0], vec![]);
        assert_eq!(r.logged.len(), 1);
        assert_eq!(r.logged[0].block.parent, Some(x.id));
        assert_eq!(r.logged[0].block.reset_ref, None);
    }

    /// Builds a certified chain on genesis under `reset` and returns it.
    fn chain_of(b: &Bench, reset: Hash, n: usize) -> Vec<Arc<AegisBlock>> {
        let mut out = vec![Arc::new(genesis().clone())];
        let r = b.chain.tip().unwrap().id;
        for i in 1..=n {
            let parent = out.last().unwrap().clone();
            let rr = if i == 1 { Some(reset) } else { None };
            let blk = AegisBlock::propose(&parent, r, rr, format!("v:{i}").into_bytes());
            let cref = rr.or(parent.primary_ref).unwrap();
            out.push(Arc::new(certify(blk, cref, 0, &keys(&[0, 1, 2, 3]))));
        }
        out
    }

    fn checkpoint_entry(c: &[Arc<AegisBlock>], h: usize) -> PrimaryTx {
        PrimaryTx::Entry(Entry::checkpoint(NodeId(0), c[h].clone(), c[h - 1].clone()))
    }

    #[test]
    fn sync_to_checkpoint_fills_positions() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        b.close();
        let c = chain_of(&b, reset, 5);
        b.pending.push(checkpoint_entry(&c, 5));
        assert_eq!(b.close(), vec![EntryVerdict::Accepted]);

        // ancestor at height 3 missing: nothing logged
        let mut n = node(9, &reg);
        let r = b.step(&mut n, vec![c[1].clone(), c[2].clone()]);
        assert_eq!(r.note, Some(StepNote::MissingAncestor));
        assert_eq!(n.ledger().len(), 1);

        let r = b.step(&mut n, vec![c[3].clone()]);
        assert!(r.logged.iter().take(5).all(|l| l.via == LogVia::Checkpoint));
        let ids: Vec<Hash> = n.ledger().iter().take(6).map(|x| x.id).collect();
        assert_eq!(ids, c.iter().map(|x| x.id).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_below_ledger_is_a_no_op() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        b.close();
        let c = chain_of(&b, reset, 4);
        let mut n = node(9, &reg);
        // node 9 is not staked; it logs the certified chain by syncing
        let r = b.step(&mut n, c[1..].to_vec());
        assert_eq!(r.logged.len(), 4);
        assert!(r.logged.iter().all(|l| l.via == LogVia::Sync));
        b.pending.push(checkpoint_entry(&c, 2));
        b.close();
        let before: Vec<Hash> = n.ledger().iter().map(|x| x.id).collect();
        let r = b.step(&mut n, vec![]);
        assert!(r.logged.is_empty());
        assert_eq!(before, n.ledger().iter().map(|x| x.id).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_or_mismatched_children_not_logged() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        b.close();
        let g = Arc::new(genesis().clone());
        let tip = b.chain.tip().unwrap().id;
        // under-signed
        let weak = AegisBlock::propose(&g, tip, Some(reset), b"w".to_vec());
        let weak = Arc::new(certify(weak, reset, 0, &keys(&[0, 1])));
        // signed by the reset committee but for the instance without reset
        let stale = AegisBlock::propose(&g, tip, None, b"s".to_vec());
        let stale = Arc::new(certify(stale, reset, 0, &keys(&[0, 1, 2, 3])));
        let mut n = node(9, &reg);
        let r = b.step(&mut n, vec![weak, stale]);
        assert!(r.logged.is_empty());
    }

    #[test]
    fn sync_window_closes_at_deadline() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let tr = b.t();
        let reset = b.reset();
        let c = chain_of(&b, reset, 2);
        let p = params();
        b.advance_to(p.extension_end(tr) + 1);
        let mut n = node(9, &reg);
        let r = b.step(&mut n, c[1..].to_vec());
        assert!(r.logged.is_empty());

        let mut lit = Node::new(
            NodeId(9),
            params(),
            NodeConfig {
                sync_window: SyncWindow::UntilExpiry,
                ..NodeConfig::default()
            },
            Box::new(OracleEngine::new(SigningKey::new(NodeId(9)), reg.clone())),
        );
        let r = b.step(&mut lit, c[1..].to_vec());
        assert_eq!(r.logged.len(), 2);
    }

    #[test]
    fn committee_expiry_triggers_reset() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        b.close();
        let c = chain_of(&b, reset, 1);
        b.pending.push(checkpoint_entry(&c, 1));
        b.close();
        let t0 = b.chain.time_of(&c[1].primary_ref.unwrap()).unwrap();
        let p = params();
        let mut n = node(9, &reg);
        b.advance_to(t0 + p.delta_active);
        let r = b.step(&mut n, vec![]);
        assert!(entries(&r).is_empty());
        b.close();
        let r = b.step(&mut n, vec![]);
        assert_eq!(entries(&r), vec![&Entry::reset(NodeId(9))]);
    }

    #[test]
    fn conflicting_certificates_start_forensics_once() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        b.close();
        let g = Arc::new(genesis().clone());
        let tip = b.chain.tip().unwrap().id;
        let x = Arc::new(certify(
            AegisBlock::propose(&g, tip, Some(reset), b"x".to_vec()),
            reset,
            0,
            &keys(&[0, 2, 3]),
        ));
        let y = Arc::new(certify(
            AegisBlock::propose(&g, tip, Some(reset), b"y".to_vec()),
            reset,
            0,
            &keys(&[1, 2, 3]),
        ));
        let mut n = node(9, &reg);
        let r = b.step(&mut n, vec![x.clone()]);
        assert!(!r
            .actions
            .iter()
            .any(|a| matches!(a, Action::StartForensics(_))));
        let r = b.step(&mut n, vec![y.clone()]);
        let ev: Vec<_> = r
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::StartForensics(e) => Some(e),
                _ => None,
            })
            .collect();
        assert_eq!(ev.len(), 1);
        let (_, culprits) = extract_evidence(&ev[0].cert_a, &ev[0].cert_b).unwrap();
        assert_eq!(culprits, [2, 3].map(NodeId).into_iter().collect());

        // the same conflict arriving through a checkpoint is not reported again
        b.pending.push(PrimaryTx::Entry(Entry::checkpoint(
            NodeId(0),
            y.clone(),
            g.clone(),
        )));
        b.close();
        let r = b.step(&mut n, vec![]);
        assert!(!r
            .actions
            .iter()
            .any(|a| matches!(a, Action::StartForensics(_))));
    }

    #[test]
    fn checkpoint_conflicting_with_own_decision_starts_forensics() {
        let reg = OracleRegistry::new();
        let mut b = Bench::new();
        let reset = b.reset();
        let mut n = node(0, &reg);
        // node 0 is the designated oracle proposer and decides block 1 itself
        let r = b.step(&mut n, vec![]);
        assert_eq!(r.logged.len(), 1);
        let mine = n.ledger()[1].clone();
        b.close();
        let g = Arc::new(genesis().clone());
        let other = AegisBlock::propose(
            &g,
            mine.primary_ref.unwrap(),
            Some(reset),
            b"other".to_vec(),
        );
        let other = Arc::new(certify(other, reset, 0, &keys(&[0, 1, 2, 3])));
        b.pending
            .push(PrimaryTx::Entry(Entry::checkpoint(NodeId(3), other, g)));
        assert_eq!(b.close(), vec![EntryVerdict::Accepted]);
        let r = b.step(&mut n, vec![]);
        assert!(r
            .actions
            .iter()
            .any(|a| matches!(a, Action::StartForensics(_))));
    }
}
