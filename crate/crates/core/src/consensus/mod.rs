//! Single-instance weighted BFT consensus.
//!
//! A [`ConsensusEngine`] is owned by one node and is stepped once per
//! simulation step for the instance the node currently wants to decide. All
//! communication goes through [`ConsensusMessage`]s that the simulator
//! delivers. Decisions carry a [`QuorumCertificate`] which anyone can check
//! with [`consensus_validate`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::crypto::{verify, Signature, SigningKey};
use crate::types::{AegisBlock, Committee, ConsensusId, Hash, NodeId, Step};

pub mod oracle;
pub mod reference;

pub use oracle::{OracleEngine, OracleRegistry};
pub use reference::{RoundTiming, TendermintEngine};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteKind {
    Prevote,
    Precommit,
}

/// Bytes a voter signs.
pub fn vote_bytes(
    kind: VoteKind,
    instance: &ConsensusId,
    round: u32,
    value: Option<&Hash>,
) -> Vec<u8> {
    let mut e = Encoder::new();
    e.put_tag(match kind {
        VoteKind::Prevote => b"prevote".as_slice(),
        VoteKind::Precommit => b"precommit".as_slice(),
    });
    instance.encode_into(&mut e);
    e.put_u32(round);
    e.put_opt_hash(value);
    e.into_bytes()
}

/// Bytes a proposer signs.
pub fn proposal_bytes(
    instance: &ConsensusId,
    round: u32,
    block: &Hash,
    pol_round: Option<u32>,
) -> Vec<u8> {
    let mut e = Encoder::new();
    e.put_tag(b"proposal");
    instance.encode_into(&mut e);
    e.put_u32(round);
    e.put_hash(block);
    match pol_round {
        None => e.put_u8(0),
        Some(r) => {
            e.put_u8(1);
            e.put_u32(r);
        }
    }
    e.into_bytes()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub kind: VoteKind,
    pub instance: ConsensusId,
    pub round: u32,
    pub value: Option<Hash>,
    pub voter: NodeId,
    pub sig: Signature,
}

impl Vote {
    pub fn signed(
        key: &SigningKey,
        kind: VoteKind,
        instance: ConsensusId,
        round: u32,
        value: Option<Hash>,
    ) -> Vote {
        let sig = key.sign(&vote_bytes(kind, &instance, round, value.as_ref()));
        Vote {
            kind,
            instance,
            round,
            value,
            voter: key.node(),
            sig,
        }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        vote_bytes(self.kind, &self.instance, self.round, self.value.as_ref())
    }

    pub fn verify(&self) -> bool {
        verify(self.voter, &self.signed_bytes(), &self.sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub instance: ConsensusId,
    pub round: u32,
    pub block: Arc<AegisBlock>,
    pub pol_round: Option<u32>,
    pub proposer: NodeId,
    pub sig: Signature,
}

impl Proposal {
    pub fn signed(
        key: &SigningKey,
        instance: ConsensusId,
        round: u32,
        block: Arc<AegisBlock>,
        pol_round: Option<u32>,
    ) -> Proposal {
        let sig = key.sign(&proposal_bytes(&instance, round, &block.id, pol_round));
        Proposal {
            instance,
            round,
            block,
            pol_round,
            proposer: key.node(),
            sig,
        }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        proposal_bytes(&self.instance, self.round, &self.block.id, self.pol_round)
    }

    pub fn verify(&self) -> bool {
        self.block.content_hash() == self.block.id
            && verify(self.proposer, &self.signed_bytes(), &self.sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsensusMessage {
    Proposal(Proposal),
    Vote(Vote),
}

impl ConsensusMessage {
    pub fn instance(&self) -> &ConsensusId {
        match self {
            ConsensusMessage::Proposal(p) => &p.instance,
            ConsensusMessage::Vote(v) => &v.instance,
        }
    }

    pub fn sender(&self) -> NodeId {
        match self {
            ConsensusMessage::Proposal(p) => p.proposer,
            ConsensusMessage::Vote(v) => v.voter,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            ConsensusMessage::Proposal(p) => p.round,
            ConsensusMessage::Vote(v) => v.round,
        }
    }

    /// (signer, signed bytes, signature) for capability audits.
    pub fn signed_parts(&self) -> (NodeId, Vec<u8>, Signature) {
        match self {
            ConsensusMessage::Proposal(p) => (p.proposer, p.signed_bytes(), p.sig),
            ConsensusMessage::Vote(v) => (v.voter, v.signed_bytes(), v.sig),
        }
    }
}

/// Aggregated precommits for one value in one round of one instance.
///
/// `committee_ref` names the primary block whose committee the certificate
/// claims; it is not covered by the signatures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub instance: ConsensusId,
    pub committee_ref: Hash,
    pub round: u32,
    pub value: Hash,
    pub signatures: BTreeMap<NodeId, Signature>,
}

impl QuorumCertificate {
    pub fn signed_bytes(&self) -> Vec<u8> {
        vote_bytes(
            VoteKind::Precommit,
            &self.instance,
            self.round,
            Some(&self.value),
        )
    }

    pub fn signers(&self) -> BTreeSet<NodeId> {
        self.signatures.keys().copied().collect()
    }

    /// Signatures verify, signers are members, signer weight is a quorum.
    pub fn verify_against(&self, committee: &Committee) -> bool {
        if self.committee_ref != committee.defined_at || committee.is_empty() {
            return false;
        }
        let msg = self.signed_bytes();
        let mut weight = 0;
        for (n, s) in &self.signatures {
            if !committee.contains(*n) || !verify(*n, &msg, s) {
                return false;
            }
            weight += committee.weight_of(*n);
        }
        committee.is_quorum(weight)
    }
}

/// True iff `b` carries a certificate for `instance` by `committee` whose
/// value is `b`'s id.
pub fn consensus_validate(b: &AegisBlock, instance: &ConsensusId, committee: &Committee) -> bool {
    match &b.cert {
        None => false,
        Some(qc) => {
            qc.instance == *instance
                && qc.value == b.id
                && b.content_hash() == b.id
                && qc.verify_against(committee)
        }
    }
}

/// Attaches a certificate for round `round` of `b`'s own instance, signed
/// with `keys`. Honest engines never need this; it builds fixtures and lets
/// adversaries sign with the keys they hold.
pub fn certify(b: AegisBlock, committee_ref: Hash, round: u32, keys: &[SigningKey]) -> AegisBlock {
    let instance = b.instance().expect("genesis cannot be certified");
    certify_for(b, instance, committee_ref, round, keys)
}

/// Like [`certify`] but signs an arbitrary instance.
pub fn certify_for(
    b: AegisBlock,
    instance: ConsensusId,
    committee_ref: Hash,
    round: u32,
    keys: &[SigningKey],
) -> AegisBlock {
    let msg = vote_bytes(VoteKind::Precommit, &instance, round, Some(&b.id));
    let signatures = keys.iter().map(|k| (k.node(), k.sign(&msg))).collect();
    let qc = QuorumCertificate {
        instance,
        committee_ref,
        round,
        value: b.id,
        signatures,
    };
    b.with_cert(qc)
}

/// Two certificates for different values of one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForensicsEvidence {
    pub instance: ConsensusId,
    pub cert_a: QuorumCertificate,
    pub cert_b: QuorumCertificate,
}

/// Culprits of a same-round conflict: nodes whose precommit signature
/// appears in both certificates.
///
/// Only same-round pairs are attributed. A correct node may precommit
/// different values in different rounds after its lock is released, so the
/// signer intersection of a cross-round pair can contain correct nodes.
pub fn extract_evidence(
    cert_a: &QuorumCertificate,
    cert_b: &QuorumCertificate,
) -> Option<(ForensicsEvidence, BTreeSet<NodeId>)> {
    if cert_a.instance != cert_b.instance
        || cert_a.value == cert_b.value
        || cert_a.round != cert_b.round
    {
        return None;
    }
    let (msg_a, msg_b) = (cert_a.signed_bytes(), cert_b.signed_bytes());
    let culprits: BTreeSet<NodeId> = cert_a
        .signatures
        .iter()
        .filter(|(n, s)| verify(**n, &msg_a, s))
        .filter_map(|(n, _)| {
            let sb = cert_b.signatures.get(n)?;
            verify(*n, &msg_b, sb).then_some(*n)
        })
        .collect();
    if culprits.is_empty() {
        return None;
    }
    let (cert_a, cert_b) = if cert_a.value <= cert_b.value {
        (cert_a.clone(), cert_b.clone())
    } else {
        (cert_b.clone(), cert_a.clone())
    };
    Some((
        ForensicsEvidence {
            instance: cert_a.instance,
            cert_a,
            cert_b,
        },
        culprits,
    ))
}

/// Where an outgoing message goes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipients {
    All,
    Only(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Recipients,
    pub msg: ConsensusMessage,
}

impl Outgoing {
    pub fn all(msg: ConsensusMessage) -> Self {
        Outgoing {
            to: Recipients::All,
            msg,
        }
    }
}

/// Arguments of one consensus step.
pub struct StepRequest<'a> {
    pub instance: ConsensusId,
    pub committee: &'a Committee,
    /// Absolute step at which round 0 of this instance starts.
    pub anchor: Step,
    pub t: Step,
    /// Builds this node's proposal when it is needed.
    pub propose: &'a dyn Fn() -> AegisBlock,
    /// Whether a proposed block is acceptable to this node.
    pub accept: &'a dyn Fn(&AegisBlock) -> bool,
}

#[derive(Default, Debug)]
pub struct StepOutput {
    pub decided: Option<AegisBlock>,
    pub outgoing: Vec<Outgoing>,
}

/// Per-node consensus process covering any number of instances.
pub trait ConsensusEngine: Send {
    fn node(&self) -> NodeId;

    /// Queues a delivered message. It is processed at the next step of its
    /// instance, once the committee is known.
    fn on_message(&mut self, msg: ConsensusMessage);

    /// Advances `req.instance` to `req.t`; returns a certified block once
    /// decided. Callers must only step instances whose committee contains
    /// this node.
    fn step(&mut self, req: StepRequest<'_>) -> StepOutput;

    /// Drops state of instances for which `keep` is false.
    fn prune(&mut self, keep: &dyn Fn(&ConsensusId) -> bool);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{genesis, hash};

    fn committee(n: u32, weights: &[u64]) -> Committee {
        Committee::new(
            (0..n)
                .map(|i| (NodeId(i), weights.get(i as usize).copied().unwrap_or(1)))
                .collect(),
            hash(b"P"),
        )
    }

    fn block(tag: &[u8]) -> AegisBlock {
        AegisBlock::propose(genesis(), hash(b"P"), Some(hash(b"R")), tag.to_vec())
    }

    fn certify(b: AegisBlock, round: u32, signers: &[u32]) -> AegisBlock {
        let instance = b.instance().unwrap();
        let msg = vote_bytes(VoteKind::Precommit, &instance, round, Some(&b.id));
        let signatures = signers
            .iter()
            .map(|i| (NodeId(*i), SigningKey::new(NodeId(*i)).sign(&msg)))
            .collect();
        let qc = QuorumCertificate {
            instance,
            committee_ref: hash(b"P"),
            round,
            value: b.id,
            signatures,
        };
        b.with_cert(qc)
    }

    #[test]
    fn honest_certificate_validates() {
        let b = certify(block(b"x"), 0, &[0, 1, 2]);
        let c = committee(4, &[]);
        assert!(consensus_validate(&b, &b.instance().unwrap(), &c));
    }

    #[test]
    fn forged_signature_rejected() {
        let mut b = certify(block(b"x"), 0, &[0, 1, 2]);
        let qc = b.cert.as_mut().unwrap();
        let wrong = SigningKey::new(NodeId(3)).sign(b"other");
        qc.signatures.insert(NodeId(1), wrong);
        let c = committee(4, &[]);
        assert!(!consensus_validate(&b, &b.instance().unwrap(), &c));
    }

    #[test]
    fn instance_and_value_bound() {
        let b = certify(block(b"x"), 0, &[0, 1, 2]);
        let c = committee(4, &[]);
        let other = ConsensusId {
            parent: genesis().id,
            reset: None,
        };
        assert!(!consensus_validate(&b, &other, &c));
        let mut t = b.clone();
        t.payload = b"y".to_vec();
        t.id = t.content_hash();
        assert!(!consensus_validate(&t, &t.instance().unwrap(), &c));
    }

    #[test]
    fn exact_threshold_is_not_a_quorum() {
        // oracle: quorum iff 3 * signed > 2 * total, checked over all subsets
        let weights = [3u64, 1, 1, 1, 3];
        let c = committee(5, &weights);
        let total: u64 = weights.iter().sum();
        for mask in 0u32..(1 << 5) {
            let signers: Vec<u32> = (0..5).filter(|i| mask & (1 << i) != 0).collect();
            let w: u64 = signers.iter().map(|i| weights[*i as usize]).sum();
            let b = certify(block(b"x"), 0, &signers);
            let expect = 3 * w > 2 * total;
            assert_eq!(
                consensus_validate(&b, &b.instance().unwrap(), &c),
                expect,
                "{signers:?}"
            );
        }
        // 6 of 9 is exactly two thirds
        let b = certify(block(b"x"), 0, &[0, 4]);
        assert!(!consensus_validate(&b, &b.instance().unwrap(), &c));
    }

    #[test]
    fn non_member_signer_rejected() {
        let b = certify(block(b"x"), 0, &[0, 1, 2, 9]);
        let c = committee(4, &[]);
        assert!(!consensus_validate(&b, &b.instance().unwrap(), &c));
    }

    #[test]
    fn evidence_none_for_identical_or_disjoint() {
        let a = certify(block(b"x"), 0, &[0, 1, 2]);
        let qa = a.cert.clone().unwrap();
        assert!(extract_evidence(&qa, &qa).is_none());
        let other = AegisBlock::propose(genesis(), hash(b"P"), None, b"y".to_vec());
        let other = certify(other, 0, &[0, 1, 2]);
        assert!(extract_evidence(&qa, other.cert.as_ref().unwrap()).is_none());
    }

    #[test]
    fn culprits_are_exactly_double_signers() {
        // 3f+1 = 7, f+1 = 3 double signers; two quorums of 5
        let x = certify(block(b"x"), 2, &[0, 1, 4, 5, 6]);
        let y = certify(block(b"y"), 2, &[2, 3, 4, 5, 6]);
        let (ev, culprits) =
            extract_evidence(x.cert.as_ref().unwrap(), y.cert.as_ref().unwrap()).unwrap();
        // oracle: brute-force intersection of signer sets
        let brute: BTreeSet<NodeId> = (0..7)
            .map(NodeId)
            .filter(|n| {
                x.cert.as_ref().unwrap().signatures.contains_key(n)
                    && y.cert.as_ref().unwrap().signatures.contains_key(n)
            })
            .collect();
        assert_eq!(culprits, brute);
        assert_eq!(culprits, [4, 5, 6].map(NodeId).into_iter().collect());
        assert_eq!(ev.instance, x.instance().unwrap());
        let c = committee(7, &[]);
        // culprit weight exceeds a third of the total
        assert!(3 * c.weight_of_set(culprits.iter()) > c.total_weight);
    }

    #[test]
    fn cross_round_pairs_are_not_attributed() {
        let x = certify(block(b"x"), 1, &[0, 1, 2]);
        let y = certify(block(b"y"), 2, &[1, 2, 3]);
        assert!(extract_evidence(x.cert.as_ref().unwrap(), y.cert.as_ref().unwrap()).is_none());
    }
}
