//! The primary ledger: one block per step, the stake book, and the contract
//! that accepts checkpoint and reset entries.
//!
//! Transactions are handed to [`PrimaryChain::append`] already ordered by the
//! caller. Stake transactions take effect first, then forensics evidence, then
//! contract entries in the given order. Everything a node may query refers to
//! blocks that are already appended, so reading the chain while step `t` runs
//! yields exactly blocks `0..t`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::consensus::{consensus_validate, extract_evidence, ForensicsEvidence};
use crate::types::{hash, AegisBlock, Committee, ConsensusId, Hash, NodeId, Step, Weight};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StakeTx {
    Stake { node: NodeId, weight: Weight },
    Unstake { node: NodeId },
}

impl StakeTx {
    pub fn node(&self) -> NodeId {
        match self {
            StakeTx::Stake { node, .. } | StakeTx::Unstake { node } => *node,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    /// `block` is the checkpointed block, `parent` its parent.
    Checkpoint {
        block: Arc<AegisBlock>,
        parent: Arc<AegisBlock>,
    },
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub kind: EntryKind,
    pub submitter: NodeId,
}

impl Entry {
    pub fn reset(submitter: NodeId) -> Self {
        Entry {
            kind: EntryKind::Reset,
            submitter,
        }
    }

    pub fn checkpoint(submitter: NodeId, block: Arc<AegisBlock>, parent: Arc<AegisBlock>) -> Self {
        Entry {
            kind: EntryKind::Checkpoint { block, parent },
            submitter,
        }
    }

    pub fn is_reset(&self) -> bool {
        matches!(self.kind, EntryKind::Reset)
    }

    /// The checkpointed block, if any.
    pub fn target(&self) -> Option<&Arc<AegisBlock>> {
        match &self.kind {
            EntryKind::Checkpoint { block, .. } => Some(block),
            EntryKind::Reset => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimaryTx {
    Stake(StakeTx),
    Entry(Entry),
    Evidence {
        evidence: ForensicsEvidence,
        submitter: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedEntry {
    pub entry: Entry,
    pub accepted_at: Step,
    /// Primary block that carries the entry.
    pub primary_block: Hash,
}

impl AcceptedEntry {
    pub fn is_reset(&self) -> bool {
        self.entry.is_reset()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[error("an entry was accepted within the last Δa steps")]
    RecentEntry,
    #[error("checkpointed block id does not match its content")]
    TargetMismatch,
    #[error("parent entry is not the checkpointed block's parent")]
    ParentMismatch,
    #[error("block's primary reference is not on the primary chain")]
    RefUnknown,
    #[error("reset reference is not on the primary chain")]
    ResetRefUnknown,
    #[error("reset reference names a block without an accepted reset")]
    ResetRefNotReset,
    #[error("parent's primary reference is not on the primary chain")]
    ParentRefUnknown,
    #[error("committee is no longer active")]
    StaleCommittee,
    #[error("certificate does not validate against the committee")]
    ConsensusInvalid,
    #[error("height does not exceed the previous checkpoint")]
    HeightNotIncreasing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum EntryVerdict {
    Accepted,
    Rejected(RejectReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum SlashError {
    #[error("evidence does not show a same-round conflict")]
    NoConflict,
    #[error("certificate committee is not on the primary chain")]
    UnknownCommittee,
    #[error("certificate does not validate")]
    InvalidCertificate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashOutcome {
    pub culprits: BTreeSet<NodeId>,
    pub penalized: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeRecord {
    pub weight: Weight,
    pub staked_at: Option<Step>,
    pub unstake_ordered_at: Option<Step>,
    pub slashed_at: Option<Step>,
}

impl StakeRecord {
    /// Funds can be withdrawn Δa steps after the unstake order.
    pub fn withdrawn_at(&self, delta_active: Step) -> Option<Step> {
        self.unstake_ordered_at.map(|u| u + delta_active)
    }

    fn is_member(&self) -> bool {
        self.weight > 0 && self.unstake_ordered_at.is_none() && self.slashed_at.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct PrimaryBlock {
    pub id: Hash,
    pub height: u64,
    pub time: Step,
    pub salt: [u8; 32],
    pub stake_txs: Vec<StakeTx>,
    pub entries: Vec<AcceptedEntry>,
    pub slashed: Vec<NodeId>,
    members: Arc<BTreeMap<NodeId, Weight>>,
}

impl PrimaryBlock {
    pub fn committee(&self) -> Committee {
        Committee::from_shared(self.members.clone(), self.id)
    }
}

/// What happened to each transaction of one block.
#[derive(Clone, Debug, Default)]
pub struct BlockReport {
    pub id: Hash,
    pub stake: Vec<(StakeTx, bool)>,
    pub entries: Vec<(Entry, EntryVerdict)>,
    pub slashes: Vec<(NodeId, Result<SlashOutcome, SlashError>)>,
}

#[derive(Clone, Debug)]
pub struct PrimaryChain {
    delta_active: Step,
    blocks: Vec<PrimaryBlock>,
    index: HashMap<Hash, usize>,
    stake: BTreeMap<NodeId, StakeRecord>,
    entries: Vec<AcceptedEntry>,
    /// Indices into `entries` of accepted checkpoints.
    checkpoints: Vec<usize>,
    checkpoint_by_height: BTreeMap<u64, Hash>,
    reset_blocks: HashSet<Hash>,
    members: Arc<BTreeMap<NodeId, Weight>>,
}

impl PrimaryChain {
    pub fn new(delta_active: Step) -> Self {
        PrimaryChain {
            delta_active,
            blocks: Vec::new(),
            index: HashMap::new(),
            stake: BTreeMap::new(),
            entries: Vec::new(),
            checkpoints: Vec::new(),
            checkpoint_by_height: BTreeMap::new(),
            reset_blocks: HashSet::new(),
            members: Arc::new(BTreeMap::new()),
        }
    }

    pub fn delta_active(&self) -> Step {
        self.delta_active
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[PrimaryBlock] {
        &self.blocks
    }

    pub fn tip(&self) -> Option<&PrimaryBlock> {
        self.blocks.last()
    }

    pub fn get(&self, id: &Hash) -> Option<&PrimaryBlock> {
        self.index.get(id).map(|i| &self.blocks[*i])
    }

    pub fn contains(&self, id: &Hash) -> bool {
        self.index.contains_key(id)
    }

    pub fn time_of(&self, id: &Hash) -> Option<Step> {
        self.get(id).map(|b| b.time)
    }

    /// `a` descends from `b` (reflexively). The primary chain is linear.
    pub fn descends(&self, a: &Hash, b: &Hash) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(x), Some(y)) => x >= y,
            _ => false,
        }
    }

    /// Committee specified by block `id`: nodes that staked by that block,
    /// had not ordered an unstake and were not slashed.
    pub fn members(&self, id: &Hash) -> Option<Committee> {
        self.get(id).map(|b| b.committee())
    }

    pub fn is_reset_block(&self, id: &Hash) -> bool {
        self.reset_blocks.contains(id)
    }

    pub fn accepted_entries(&self) -> &[AcceptedEntry] {
        &self.entries
    }

    pub fn last_entry(&self) -> Option<&AcceptedEntry> {
        self.entries.last()
    }

    pub fn latest_checkpoint(&self) -> Option<&AcceptedEntry> {
        self.checkpoints.last().map(|i| &self.entries[*i])
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = &AcceptedEntry> {
        self.checkpoints.iter().map(|i| &self.entries[*i])
    }

    /// Checkpointed block at an expansion-chain height, if any.
    pub fn checkpoint_at_height(&self, height: u64) -> Option<Hash> {
        self.checkpoint_by_height.get(&height).copied()
    }

    /// (height, block id) of every checkpoint at or below `height`.
    pub fn checkpoints_upto(&self, height: u64) -> impl Iterator<Item = (u64, Hash)> + '_ {
        self.checkpoint_by_height
            .range(..=height)
            .map(|(h, id)| (*h, *id))
    }

    pub fn stake_record(&self, node: NodeId) -> Option<&StakeRecord> {
        self.stake.get(&node)
    }

    pub fn stake_book(&self) -> &BTreeMap<NodeId, StakeRecord> {
        &self.stake
    }

    /// Appends the block for step `t`.
    pub fn append(&mut self, t: Step, salt: [u8; 32], txs: Vec<PrimaryTx>) -> BlockReport {
        if let Some(last) = self.blocks.last() {
            assert!(t > last.time, "primary time must increase");
        }
        let mut report = BlockReport::default();
        let mut stake_txs = Vec::new();
        let mut evidence = Vec::new();
        let mut entries = Vec::new();
        for tx in txs {
            match tx {
                PrimaryTx::Stake(s) => stake_txs.push(s),
                PrimaryTx::Evidence {
                    evidence: e,
                    submitter,
                } => evidence.push((e, submitter)),
                PrimaryTx::Entry(e) => entries.push(e),
            }
        }

        let mut applied = Vec::new();
        for s in stake_txs {
            let ok = self.apply_stake(&s, t);
            if ok {
                applied.push(s.clone());
            }
            report.stake.push((s, ok));
        }

        let mut slashed = Vec::new();
        for (e, submitter) in evidence {
            let r = self.slash(&e, t);
            if let Ok(o) = &r {
                slashed.extend(o.penalized.iter().copied());
            }
            report.slashes.push((submitter, r));
        }

        let first_new = self.entries.len();
        for e in entries {
            let verdict = self.process_entry(&e, t);
            if verdict == EntryVerdict::Accepted {
                if let Some(b) = e.target() {
                    self.checkpoint_by_height.insert(b.height, b.id);
                    self.checkpoints.push(self.entries.len());
                }
                self.entries.push(AcceptedEntry {
                    entry: e.clone(),
                    accepted_at: t,
                    primary_block: Hash::ZERO,
                });
            }
            report.entries.push((e, verdict));
        }

        let members: BTreeMap<NodeId, Weight> = self
            .stake
            .iter()
            .filter(|(_, r)| r.is_member())
            .map(|(n, r)| (*n, r.weight))
            .collect();
        if *self.members != members {
            self.members = Arc::new(members);
        }

        let height = self.blocks.len() as u64;
        let mut enc = Encoder::new();
        enc.put_tag(b"primary-block/v1");
        enc.put_u64(height);
        enc.put_u64(t);
        enc.put_hash(&Hash(salt));
        enc.put_u32(applied.len() as u32);
        for s in &applied {
            match s {
                StakeTx::Stake { node, weight } => {
                    enc.put_u8(0);
                    enc.put_u32(node.0);
                    enc.put_u64(*weight);
                }
                StakeTx::Unstake { node } => {
                    enc.put_u8(1);
                    enc.put_u32(node.0);
                }
            }
        }
        let new_entries = &mut self.entries[first_new..];
        enc.put_u32(new_entries.len() as u32);
        for a in new_entries.iter() {
            enc.put_u32(a.entry.submitter.0);
            enc.put_opt_hash(a.entry.target().map(|b| &b.id));
        }
        enc.put_u32(slashed.len() as u32);
        for n in &slashed {
            enc.put_u32(n.0);
        }
        let id = hash(enc.as_bytes());
        let mut carried = Vec::new();
        let mut has_reset = false;
        for a in new_entries.iter_mut() {
            a.primary_block = id;
            has_reset |= a.is_reset();
            carried.push(a.clone());
        }
        if has_reset {
            self.reset_blocks.insert(id);
        }
        self.index.insert(id, self.blocks.len());
        self.blocks.push(PrimaryBlock {
            id,
            height,
            time: t,
            salt,
            stake_txs: applied,
            entries: carried,
            slashed,
            members: self.members.clone(),
        });
        report.id = id;
        report
    }

    fn apply_stake(&mut self, s: &StakeTx, t: Step) -> bool {
        match s {
            StakeTx::Stake { node, weight } => {
                let r = self.stake.entry(*node).or_default();
                if r.unstake_ordered_at.is_some() || r.slashed_at.is_some() || *weight == 0 {
                    return false;
                }
                r.weight += weight;
                r.staked_at.get_or_insert(t);
                true
            }
            StakeTx::Unstake { node } => match self.stake.get_mut(node) {
                Some(r)
                    if r.unstake_ordered_at.is_none() && r.slashed_at.is_none() && r.weight > 0 =>
                {
                    r.unstake_ordered_at = Some(t);
                    true
                }
                _ => false,
            },
        }
    }

    /// The contract's decision on one entry at step `t`, against the current
    /// primary chain and the entries accepted so far.
    pub fn process_entry(&self, e: &Entry, t: Step) -> EntryVerdict {
        use EntryVerdict::*;
        use RejectReason::*;
        let (b, parent) = match &e.kind {
            EntryKind::Reset => {
                let recent = self
                    .entries
                    .iter()
                    .rev()
                    .any(|a| a.accepted_at + self.delta_active > t);
                return if recent {
                    Rejected(RecentEntry)
                } else {
                    Accepted
                };
            }
            EntryKind::Checkpoint { block, parent } => (block, parent),
        };
        if b.content_hash() != b.id || parent.content_hash() != parent.id {
            return Rejected(TargetMismatch);
        }
        if b.parent != Some(parent.id) {
            return Rejected(ParentMismatch);
        }
        if !b.primary_ref.is_some_and(|r| self.contains(&r)) {
            return Rejected(RefUnknown);
        }
        let (committee, t0) = match b.reset_ref {
            Some(r) => {
                let Some(rb) = self.get(&r) else {
                    return Rejected(ResetRefUnknown);
                };
                if !self.is_reset_block(&r) {
                    return Rejected(ResetRefNotReset);
                }
                (rb.committee(), rb.time)
            }
            None => {
                let Some(pb) = parent.primary_ref.and_then(|r| self.get(&r)) else {
                    return Rejected(ParentRefUnknown);
                };
                (pb.committee(), pb.time)
            }
        };
        if t >= t0 + self.delta_active {
            return Rejected(StaleCommittee);
        }
        let instance = ConsensusId {
            parent: parent.id,
            reset: b.reset_ref,
        };
        if !consensus_validate(b, &instance, &committee) {
            return Rejected(ConsensusInvalid);
        }
        if let Some(prev) = self.latest_checkpoint() {
            if b.height <= prev.entry.target().unwrap().height {
                return Rejected(HeightNotIncreasing);
            }
        }
        Accepted
    }

    /// Verifies evidence and zeroes the stake of every culprit whose funds
    /// are not yet withdrawn.
    pub fn slash(&mut self, ev: &ForensicsEvidence, t: Step) -> Result<SlashOutcome, SlashError> {
        if ev.cert_a.instance != ev.instance {
            return Err(SlashError::NoConflict);
        }
        let (_, culprits) =
            extract_evidence(&ev.cert_a, &ev.cert_b).ok_or(SlashError::NoConflict)?;
        for qc in [&ev.cert_a, &ev.cert_b] {
            let c = self
                .members(&qc.committee_ref)
                .ok_or(SlashError::UnknownCommittee)?;
            if !qc.verify_against(&c) {
                return Err(SlashError::InvalidCertificate);
            }
        }
        let mut penalized = BTreeSet::new();
        for n in &culprits {
            let Some(r) = self.stake.get_mut(n) else {
                continue;
            };
            let withdrawn = r.withdrawn_at(self.delta_active).is_some_and(|w| t >= w);
            if r.weight > 0 && r.slashed_at.is_none() && !withdrawn {
                r.weight = 0;
                r.slashed_at = Some(t);
                penalized.insert(*n);
            }
        }
        Ok(SlashOutcome {
            culprits,
            penalized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{vote_bytes, QuorumCertificate, VoteKind};
    use crate::crypto::SigningKey;
    use crate::types::genesis;

    const DA: Step = 10;

    fn salt(t: Step) -> [u8; 32] {
        hash(&t.to_be_bytes()).0
    }

    fn stake(n: u32) -> PrimaryTx {
        PrimaryTx::Stake(StakeTx::Stake {
            node: NodeId(n),
            weight: 1,
        })
    }

    fn push(c: &mut PrimaryChain, txs: Vec<PrimaryTx>) -> BlockReport {
        let t = c.len() as Step;
        c.append(t, salt(t), txs)
    }

    fn certify(b: AegisBlock, committee: &Committee, signers: &[u32]) -> AegisBlock {
        let instance = b.instance().unwrap();
        let msg = vote_bytes(VoteKind::Precommit, &instance, 0, Some(&b.id));
        let qc = QuorumCertificate {
            instance,
            committee_ref: committee.defined_at,
            round: 0,
            value: b.id,
            signatures: signers
                .iter()
                .map(|i| (NodeId(*i), SigningKey::new(NodeId(*i)).sign(&msg)))
                .collect(),
        };
        b.with_cert(qc)
    }

    /// Chain with 4 staked nodes at block 0 and a reset in block 1.
    fn setup() -> (PrimaryChain, Hash) {
        let mut c = PrimaryChain::new(DA);
        push(&mut c, (0..4).map(stake).collect());
        let r = push(&mut c, vec![PrimaryTx::Entry(Entry::reset(NodeId(0)))]);
        assert_eq!(r.entries[0].1, EntryVerdict::Accepted);
        (c, r.id)
    }

    fn first_block(c: &PrimaryChain, reset: Hash) -> Arc<AegisBlock> {
        let committee = c.members(&reset).unwrap();
        let b = AegisBlock::propose(genesis(), c.tip().unwrap().id, Some(reset), b"1".to_vec());
        Arc::new(certify(b, &committee, &[0, 1, 2]))
    }

    #[test]
    fn members_follow_stake_lifecycle() {
        let mut c = PrimaryChain::new(DA);
        let b0 = push(&mut c, vec![]).id;
        assert!(c.members(&b0).unwrap().is_empty());
        for _ in 1..3 {
            push(&mut c, vec![]);
        }
        push(&mut c, vec![stake(1)]); // block 3
        push(
            &mut c,
            vec![PrimaryTx::Stake(StakeTx::Unstake { node: NodeId(1) })],
        ); // block 4
        let ids: Vec<Hash> = c.blocks().iter().map(|b| b.id).collect();
        assert!(!c.members(&ids[2]).unwrap().contains(NodeId(1)));
        assert!(c.members(&ids[3]).unwrap().contains(NodeId(1)));
        for _ in 5..=(4 + DA) {
            push(&mut c, vec![]);
        }
        // oracle: unstaked at block 4, so excluded at 4 and at 4 + Δa
        let rec = c.stake_record(NodeId(1)).unwrap();
        assert_eq!(rec.unstake_ordered_at, Some(4));
        assert_eq!(rec.withdrawn_at(DA), Some(4 + DA));
        assert!(!c.members(&c.blocks()[4].id).unwrap().contains(NodeId(1)));
        assert!(!c
            .members(&c.blocks()[(4 + DA) as usize].id)
            .unwrap()
            .contains(NodeId(1)));
    }

    #[test]
    fn view_grows_one_block_per_step() {
        let mut c = PrimaryChain::new(DA);
        for t in 0..20 {
            assert_eq!(c.len() as Step, t);
            push(&mut c, vec![]);
        }
        let times: Vec<Step> = c.blocks().iter().map(|b| b.time).collect();
        assert_eq!(times, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn first_reset_accepted_then_recent_rejected() {
        let (mut c, _) = setup();
        // accepted at 1; another reset at 1 + Δa − 1 is too early, at 1 + Δa fine
        while (c.len() as Step) < DA {
            push(&mut c, vec![]);
        }
        assert_eq!(c.len() as Step, DA);
        let r = push(&mut c, vec![PrimaryTx::Entry(Entry::reset(NodeId(1)))]);
        assert_eq!(
            r.entries[0].1,
            EntryVerdict::Rejected(RejectReason::RecentEntry)
        );
        let r = push(&mut c, vec![PrimaryTx::Entry(Entry::reset(NodeId(1)))]);
        assert_eq!(r.entries[0].1, EntryVerdict::Accepted);
    }

    #[test]
    fn checkpoint_happy_path_and_staleness_boundary() {
        let (mut c, reset) = setup();
        let b = first_block(&c, reset);
        let entry = Entry::checkpoint(NodeId(0), b.clone(), Arc::new(genesis().clone()));
        // reset at time 1: accepted strictly before 1 + Δa
        while (c.len() as Step) < 1 + DA - 1 {
            push(&mut c, vec![]);
        }
        assert_eq!(c.process_entry(&entry, 1 + DA - 1), EntryVerdict::Accepted);
        assert_eq!(
            c.process_entry(&entry, 1 + DA),
            EntryVerdict::Rejected(RejectReason::StaleCommittee)
        );
        let r = push(&mut c, vec![PrimaryTx::Entry(entry.clone())]);
        assert_eq!(r.entries[0].1, EntryVerdict::Accepted);
        assert_eq!(c.checkpoint_at_height(1), Some(b.id));
    }

    #[test]
    fn checkpoint_assert_order() {
        let (mut c, reset) = setup();
        push(&mut c, vec![]);
        let g = Arc::new(genesis().clone());
        let b = first_block(&c, reset);
        let t = c.len() as Step;

        let mut tampered = (*b).clone();
        tampered.payload.push(1);
        let e = Entry::checkpoint(NodeId(0), Arc::new(tampered), g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::TargetMismatch)
        );

        let e = Entry::checkpoint(NodeId(0), b.clone(), b.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::ParentMismatch)
        );

        let committee = c.members(&reset).unwrap();
        let unknown = AegisBlock::propose(genesis(), hash(b"nowhere"), Some(reset), vec![]);
        let unknown = Arc::new(certify(unknown, &committee, &[0, 1, 2]));
        let e = Entry::checkpoint(NodeId(0), unknown, g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::RefUnknown)
        );

        let tip = c.tip().unwrap().id;
        let bad_reset = AegisBlock::propose(genesis(), tip, Some(hash(b"nowhere")), vec![]);
        let e = Entry::checkpoint(NodeId(0), Arc::new(bad_reset), g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::ResetRefUnknown)
        );

        let not_reset = AegisBlock::propose(genesis(), tip, Some(c.blocks()[0].id), vec![]);
        let e = Entry::checkpoint(NodeId(0), Arc::new(not_reset), g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::ResetRefNotReset)
        );

        let no_reset = AegisBlock::propose(genesis(), tip, None, vec![]);
        let e = Entry::checkpoint(NodeId(0), Arc::new(no_reset), g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::ParentRefUnknown)
        );

        let weak = AegisBlock::propose(genesis(), tip, Some(reset), vec![]);
        let weak = Arc::new(certify(weak, &committee, &[0, 1]));
        let e = Entry::checkpoint(NodeId(0), weak, g.clone());
        assert_eq!(
            c.process_entry(&e, t),
            EntryVerdict::Rejected(RejectReason::ConsensusInvalid)
        );
    }

    #[test]
    fn heights_must_increase() {
        let (mut c, reset) = setup();
        let g = Arc::new(genesis().clone());
        let committee = c.members(&reset).unwrap();
        let b1 = first_block(&c, reset);
        // child of b1 by the committee of ref(b1)
        let p_ref = b1.primary_ref.unwrap();
        let pc = c.members(&p_ref).unwrap();
        let b2 = AegisBlock::propose(&b1, c.tip().unwrap().id, None, b"2".to_vec());
        let b2 = Arc::new(certify(b2, &pc, &[1, 2, 3]));
        let r = push(
            &mut c,
            vec![PrimaryTx::Entry(Entry::checkpoint(
                NodeId(0),
                b2.clone(),
                b1.clone(),
            ))],
        );
        assert_eq!(r.entries[0].1, EntryVerdict::Accepted);
        let r = push(
            &mut c,
            vec![PrimaryTx::Entry(Entry::checkpoint(
                NodeId(0),
                b1.clone(),
                g.clone(),
            ))],
        );
        assert_eq!(
            r.entries[0].1,
            EntryVerdict::Rejected(RejectReason::HeightNotIncreasing)
        );
        let _ = committee;
    }

    #[test]
    fn same_block_entry_order_is_decisive() {
        // a checkpoint and a reset in one block: whichever comes first wins
        let (mut base, reset) = setup();
        while (base.len() as Step) < 1 + DA {
            push(&mut base, vec![]);
        }
        let b = first_block(&base, reset);
        let ck = PrimaryTx::Entry(Entry::checkpoint(NodeId(0), b, Arc::new(genesis().clone())));
        let rs = PrimaryTx::Entry(Entry::reset(NodeId(1)));
        // the reset at 1 is exactly Δa old, so a new reset is allowed; the
        // checkpoint is stale either way (t = 1 + Δa)
        let mut c1 = base.clone();
        let r1 = push(&mut c1, vec![ck.clone(), rs.clone()]);
        let mut c2 = base.clone();
        let r2 = push(&mut c2, vec![rs.clone(), ck.clone()]);
        assert_eq!(
            r1.entries[0].1,
            EntryVerdict::Rejected(RejectReason::StaleCommittee)
        );
        assert_eq!(r1.entries[1].1, EntryVerdict::Accepted);
        assert_eq!(r2.entries[0].1, EntryVerdict::Accepted);
        assert_eq!(
            r2.entries[1].1,
            EntryVerdict::Rejected(RejectReason::StaleCommittee)
        );

        // two resets in one block: only the first is accepted
        let mut c3 = base.clone();
        let r3 = push(&mut c3, vec![rs.clone(), rs.clone()]);
        assert_eq!(r3.entries[0].1, EntryVerdict::Accepted);
        assert_eq!(
            r3.entries[1].1,
            EntryVerdict::Rejected(RejectReason::RecentEntry)
        );
    }

    fn conflicting_certs(c: &PrimaryChain, reset: Hash) -> ForensicsEvidence {
        let committee = c.members(&reset).unwrap();
        let tip = c.tip().unwrap().id;
        let x = certify(
            AegisBlock::propose(genesis(), tip, Some(reset), b"x".to_vec()),
            &committee,
            &[0, 2, 3],
        );
        let y = certify(
            AegisBlock::propose(genesis(), tip, Some(reset), b"y".to_vec()),
            &committee,
            &[1, 2, 3],
        );
        extract_evidence(x.cert.as_ref().unwrap(), y.cert.as_ref().unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn slashing_is_idempotent_and_respects_withdrawal() {
        let (mut c, reset) = setup();
        let ev = conflicting_certs(&c, reset);
        // node 3 orders an unstake now and completes withdrawal Δa later
        push(
            &mut c,
            vec![PrimaryTx::Stake(StakeTx::Unstake { node: NodeId(3) })],
        );
        let unstake_t = c.len() as Step - 1;
        while (c.len() as Step) < unstake_t + DA {
            push(&mut c, vec![]);
        }
        let r = push(
            &mut c,
            vec![PrimaryTx::Evidence {
                evidence: ev.clone(),
                submitter: NodeId(0),
            }],
        );
        let out = r.slashes[0].1.clone().unwrap();
        assert_eq!(out.culprits, [2, 3].map(NodeId).into_iter().collect());
        assert_eq!(out.penalized, [NodeId(2)].into_iter().collect());
        assert_eq!(c.stake_record(NodeId(2)).unwrap().weight, 0);
        assert!(!c.tip().unwrap().committee().contains(NodeId(2)));

        let r = push(
            &mut c,
            vec![PrimaryTx::Evidence {
                evidence: ev,
                submitter: NodeId(0),
            }],
        );
        assert!(r.slashes[0].1.as_ref().unwrap().penalized.is_empty());
    }

    #[test]
    fn invalid_evidence_rejected() {
        let (mut c, reset) = setup();
        let mut ev = conflicting_certs(&c, reset);
        ev.cert_b.signatures.remove(&NodeId(1));
        // still intersecting but cert_b is no longer a quorum
        let r = push(
            &mut c,
            vec![PrimaryTx::Evidence {
                evidence: ev,
                submitter: NodeId(0),
            }],
        );
        assert_eq!(r.slashes[0].1, Err(SlashError::InvalidCertificate));
    }
}
