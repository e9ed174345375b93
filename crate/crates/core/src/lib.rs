//! The Aegis expansion-chain protocol.
//!
//! A committee of staked nodes extends an expansion chain by BFT consensus
//! and anchors its progress in a trusted primary chain through checkpoints.
//! When a committee's stake can no longer be held accountable the primary
//! chain accepts a reset, which names a fresh committee.
//!
//! * [`primary`]: the simulated primary ledger and the checkpoint/reset contract.
//! * [`validation`]: the block validity predicate.
//! * [`consensus`]: certificates, forensics and the pluggable consensus engines.
//! * [`node`]: the per-node state machine.

pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod node;
pub mod primary;
pub mod types;
pub mod validation;

pub use types::{
    block_height, genesis, hash, AegisBlock, Committee, ConsensusId, Hash, NodeId, Params,
    ParamsError, Ratio, Step, Weight,
};
