//! Simulated signatures.
//!
//! A signature is a keyed hash of the signer's id and the message. Anyone can
//! recompute it, so unforgeability is a property of the simulator: only the
//! holder of a node's [`SigningKey`] is allowed to call [`SigningKey::sign`],
//! and the simulator audits every certificate it sees against the set of
//! messages each correct node actually signed.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{Hash, NodeId};

const DOMAIN: &[u8] = b"aegis-simsig/v1";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(pub Hash);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig{:?}", self.0)
    }
}

fn compute(node: NodeId, msg: &[u8]) -> Signature {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(node.0.to_be_bytes());
    h.update(msg);
    Signature(Hash(h.finalize().into()))
}

/// Signing capability for one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigningKey {
    node: NodeId,
}

impl SigningKey {
    pub fn new(node: NodeId) -> Self {
        SigningKey { node }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        compute(self.node, msg)
    }
}

pub fn verify(node: NodeId, msg: &[u8], sig: &Signature) -> bool {
    compute(node, msg) == *sig
}

/// Digest identifying a signed message, used by capability audits.
pub fn message_digest(msg: &[u8]) -> Hash {
    crate::types::hash(msg)
}
