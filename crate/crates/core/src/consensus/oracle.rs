//! Instant consensus for testing the node logic in isolation.
//!
//! The lowest-id committee member is the designated proposer. When it steps
//! an instance, its proposal is decided on the spot, certified with
//! precommits from the whole committee, and published in a registry shared
//! by every engine of the run.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::{
    vote_bytes, ConsensusEngine, ConsensusMessage, QuorumCertificate, StepOutput, StepRequest,
    VoteKind,
};
use crate::crypto::SigningKey;
use crate::types::{AegisBlock, ConsensusId, NodeId};

#[derive(Clone, Default)]
pub struct OracleRegistry(Arc<Mutex<BTreeMap<ConsensusId, AegisBlock>>>);

impl OracleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn decided(&self, id: &ConsensusId) -> Option<AegisBlock> {
        self.0.lock().unwrap().get(id).cloned()
    }
}

pub struct OracleEngine {
    key: SigningKey,
    registry: OracleRegistry,
}

impl OracleEngine {
    pub fn new(key: SigningKey, registry: OracleRegistry) -> Self {
        OracleEngine { key, registry }
    }
}

impl ConsensusEngine for OracleEngine {
    fn node(&self) -> NodeId {
        self.key.node()
    }

    fn on_message(&mut self, _msg: ConsensusMessage) {}

    fn step(&mut self, req: StepRequest<'_>) -> StepOutput {
        let mut reg = self.registry.0.lock().unwrap();
        if let Some(b) = reg.get(&req.instance) {
            return StepOutput {
                decided: Some(b.clone()),
                outgoing: Vec::new(),
            };
        }
        if req.committee.members().next() != Some(self.key.node()) {
            return StepOutput::default();
        }
        let b = (req.propose)();
        let msg = vote_bytes(VoteKind::Precommit, &req.instance, 0, Some(&b.id));
        let signatures = req
            .committee
            .members()
            .map(|n| (n, SigningKey::new(n).sign(&msg)))
            .collect();
        let qc = QuorumCertificate {
            instance: req.instance,
            committee_ref: req.committee.defined_at,
            round: 0,
            value: b.id,
            signatures,
        };
        let b = b.with_cert(qc);
        reg.insert(req.instance, b.clone());
        StepOutput {
            decided: Some(b),
            outgoing: Vec::new(),
        }
    }

    fn prune(&mut self, _keep: &dyn Fn(&ConsensusId) -> bool) {}
}
