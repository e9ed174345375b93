//! Block validity against the primary chain and a local block store.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::consensus_validate;
use crate::primary::PrimaryChain;
use crate::types::{genesis, AegisBlock, ConsensusId, Hash};

/// Every block a node has received, by id. Insert-only; genesis is present
/// from the start.
#[derive(Clone, Debug)]
pub struct BlockStore {
    blocks: HashMap<Hash, Arc<AegisBlock>>,
    children: HashMap<Hash, BTreeSet<Hash>>,
}

impl Default for BlockStore {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockStore {
    pub fn new() -> Self {
        let g = Arc::new(genesis().clone());
        let mut blocks = HashMap::new();
        blocks.insert(g.id, g);
        BlockStore {
            blocks,
            children: HashMap::new(),
        }
    }

    /// Adds `b`; returns false if a block with this id was already held.
    /// Blocks whose id does not match their content are ignored.
    pub fn insert(&mut self, b: Arc<AegisBlock>) -> bool {
        if self.blocks.contains_key(&b.id) || b.content_hash() != b.id {
            return false;
        }
        if let Some(p) = b.parent {
            self.children.entry(p).or_default().insert(b.id);
        }
        self.blocks.insert(b.id, b);
        true
    }

    pub fn get(&self, id: &Hash) -> Option<&Arc<AegisBlock>> {
        self.blocks.get(id)
    }

    pub fn contains(&self, id: &Hash) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Ids of held blocks whose parent is `parent`, ascending.
    pub fn children(&self, parent: &Hash) -> impl Iterator<Item = &Hash> {
        self.children.get(parent).into_iter().flatten()
    }

    /// The ancestor of `b` at `height` (`b` itself at its own height), if
    /// every block on the way is held.
    pub fn ancestor_at(&self, b: &Arc<AegisBlock>, height: u64) -> Option<Arc<AegisBlock>> {
        if height > b.height {
            return None;
        }
        let mut cur = b.clone();
        while cur.height > height {
            cur = self.blocks.get(&cur.parent?)?.clone();
        }
        Some(cur)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<AegisBlock>> {
        self.blocks.values()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    #[error("id does not match content or height is inconsistent")]
    Malformed,
    #[error("conflicts with a checkpoint")]
    ConflictingCheckpoint,
    #[error("parent not held")]
    ParentMissing,
    #[error("primary reference not on the primary chain")]
    RefUnknown,
    #[error("primary reference precedes the parent's")]
    RefNotDescendant,
    #[error("parent is invalid")]
    ParentInvalid,
    #[error("reset reference not on the primary chain")]
    ResetRefUnknown,
    #[error("reset reference names a block without an accepted reset")]
    ResetRefNotReset,
    #[error("reset reference precedes the parent's primary reference")]
    ResetNotDescendant,
    #[error("no committee for this block")]
    NoCommittee,
    #[error("certificate does not validate")]
    ConsensusInvalid,
}

/// True iff an accepted checkpoint pins a block at height ≤ height(b) that is
/// neither `b` nor an ancestor of `b`. Ancestors that are not held count as
/// conflicting.
pub fn conflicts_with_checkpoint(
    b: &Arc<AegisBlock>,
    chain: &PrimaryChain,
    store: &BlockStore,
) -> bool {
    chain
        .checkpoints_upto(b.height)
        .any(|(h, id)| store.ancestor_at(b, h).is_none_or(|a| a.id != id))
}

/// Checks that come before the recursive parent check. Conflicts are only
/// checked at `b`'s own height; lower heights are covered by the recursion.
fn local_checks<'s>(
    b: &AegisBlock,
    chain: &PrimaryChain,
    store: &'s BlockStore,
    full_conflict: Option<&Arc<AegisBlock>>,
) -> Result<&'s Arc<AegisBlock>, InvalidReason> {
    if b.content_hash() != b.id {
        return Err(InvalidReason::Malformed);
    }
    let conflict = match full_conflict {
        Some(arc) => conflicts_with_checkpoint(arc, chain, store),
        None => chain
            .checkpoint_at_height(b.height)
            .is_some_and(|id| id != b.id),
    };
    if conflict {
        return Err(InvalidReason::ConflictingCheckpoint);
    }
    let parent = b
        .parent
        .and_then(|p| store.get(&p))
        .ok_or(InvalidReason::ParentMissing)?;
    if b.height != parent.height + 1 {
        return Err(InvalidReason::Malformed);
    }
    let r = b.primary_ref.ok_or(InvalidReason::RefUnknown)?;
    if !chain.contains(&r) {
        return Err(InvalidReason::RefUnknown);
    }
    if let Some(pr) = parent.primary_ref {
        if !chain.descends(&r, &pr) {
            return Err(InvalidReason::RefNotDescendant);
        }
    }
    Ok(parent)
}

/// Checks that come after the recursive parent check.
fn committee_checks(
    b: &AegisBlock,
    parent: &AegisBlock,
    chain: &PrimaryChain,
) -> Result<(), InvalidReason> {
    let committee = match b.reset_ref {
        Some(r) => {
            if !chain.contains(&r) {
                return Err(InvalidReason::ResetRefUnknown);
            }
            if !chain.is_reset_block(&r) {
                return Err(InvalidReason::ResetRefNotReset);
            }
            if let Some(pr) = parent.primary_ref {
                if !chain.descends(&r, &pr) {
                    return Err(InvalidReason::ResetNotDescendant);
                }
            }
            chain.members(&r)
        }
        // the committee named by the parent's primary reference
        None => parent.primary_ref.and_then(|pr| chain.members(&pr)),
    }
    .ok_or(InvalidReason::NoCommittee)?;
    let instance = ConsensusId {
        parent: parent.id,
        reset: b.reset_ref,
    };
    if !consensus_validate(b, &instance, &committee) {
        return Err(InvalidReason::ConsensusInvalid);
    }
    Ok(())
}

/// The validity predicate, evaluated literally by recursion with the full
/// conflict check at every level. Returns the first failing check.
pub fn is_valid(
    b: &Arc<AegisBlock>,
    chain: &PrimaryChain,
    store: &BlockStore,
) -> Result<(), InvalidReason> {
    if b.is_genesis() {
        return Ok(());
    }
    let parent = local_checks(b, chain, store, Some(b))?;
    if is_valid(parent, chain, store).is_err() {
        return Err(InvalidReason::ParentInvalid);
    }
    committee_checks(b, parent, chain)
}

/// Whether a proposed child of `parent` for `instance` is structurally
/// acceptable: the checks [`is_valid`] would apply to it, minus the
/// certificate it does not have yet.
pub fn proposal_acceptable(
    p: &AegisBlock,
    parent: &AegisBlock,
    instance: &ConsensusId,
    chain: &PrimaryChain,
) -> bool {
    let after_parent_ref = |r: &Hash| parent.primary_ref.is_none_or(|pr| chain.descends(r, &pr));
    p.content_hash() == p.id
        && p.parent == Some(parent.id)
        && instance.parent == parent.id
        && p.reset_ref == instance.reset
        && p.height == parent.height + 1
        && p.primary_ref
            .is_some_and(|r| chain.contains(&r) && after_parent_ref(&r))
        && instance
            .reset
            .is_none_or(|r| chain.is_reset_block(&r) && after_parent_ref(&r))
        && chain
            .checkpoint_at_height(p.height)
            .is_none_or(|id| id == p.id)
}

/// Memoizing evaluator of [`is_valid`].
///
/// Only positive answers are cached, keyed by the number of accepted
/// checkpoints: a new checkpoint is the only change to the primary chain that
/// can turn a valid block invalid. Evaluation walks up to the nearest cached
/// or genesis ancestor and back down without recursion.
#[derive(Default, Debug, Clone)]
pub struct Validator {
    valid: HashSet<Hash>,
    checkpoints_seen: usize,
}

impl Validator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(
        &mut self,
        b: &Arc<AegisBlock>,
        chain: &PrimaryChain,
        store: &BlockStore,
    ) -> Result<(), InvalidReason> {
        if chain.checkpoint_count() != self.checkpoints_seen {
            self.valid.clear();
            self.checkpoints_seen = chain.checkpoint_count();
        }
        let mut path: Vec<(Arc<AegisBlock>, Arc<AegisBlock>)> = Vec::new();
        let mut cur = b.clone();
        let mut base: Result<(), InvalidReason> = Ok(());
        loop {
            if cur.is_genesis() || self.valid.contains(&cur.id) {
                break;
            }
            match local_checks(&cur, chain, store, None) {
                Ok(parent) => {
                    let parent = parent.clone();
                    path.push((cur, parent.clone()));
                    cur = parent;
                }
                Err(e) => {
                    base = Err(e);
                    break;
                }
            }
        }
        let mut below = base;
        for (blk, parent) in path.iter().rev() {
            below = match below {
                Err(_) => Err(InvalidReason::ParentInvalid),
                Ok(()) => committee_checks(blk, parent, chain),
            };
            if below.is_ok() {
                self.valid.insert(blk.id);
            }
        }
        below
    }

    pub fn is_valid(
        &mut self,
        b: &Arc<AegisBlock>,
        chain: &PrimaryChain,
        store: &BlockStore,
    ) -> bool {
        self.check(b, chain, store).is_ok()
    }
}
