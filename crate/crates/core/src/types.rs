//! Shared domain types: hashes, node identities, protocol parameters, Aegis
//! blocks, committees and consensus instance identifiers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::Encoder;
use crate::consensus::QuorumCertificate;

/// Simulation time, in steps.
pub type Step = u64;

/// Stake weight in the smallest stake unit.
pub type Weight = u64;

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    pub const ZERO: Hash = Hash([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Hash(out))
    }

    /// First eight hex digits, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Content hash used for every identifier in the system.
pub fn hash(content: &[u8]) -> Hash {
    let digest = Sha256::digest(content);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    Hash(out)
}

/// Opaque node label. Ordering is used for leader rotation and step order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Exact non-negative rational, used for stake thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const TWO_THIRDS: Ratio = Ratio { num: 2, den: 3 };

    /// `part / whole > self`, compared without division.
    pub fn exceeded_by(&self, part: Weight, whole: Weight) -> bool {
        (part as u128) * (self.den as u128) > (whole as u128) * (self.num as u128)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamsError {
    #[error("delta_write must be at least 1")]
    ZeroWrite,
    #[error("delta_prop must be at least 1")]
    ZeroProp,
    #[error("delta_active ({active}) must be at least 3*delta_write + 1 ({need})")]
    ActiveTooShort { active: Step, need: Step },
    #[error("delta_consensus ({consensus}) must be below delta_active - delta_write ({bound})")]
    ConsensusTooSlow { consensus: Step, bound: Step },
    #[error("alpha {0} must lie in [2/3, 1]")]
    Alpha(Ratio),
}

/// Protocol and model timing parameters. `t_gst` is known to the simulator
/// only; nodes never read it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    pub delta_active: Step,
    pub delta_write: Step,
    pub delta_prop: Step,
    pub delta_consensus: Step,
    pub alpha: Ratio,
    pub t_gst: Step,
}

impl Params {
    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.delta_write == 0 {
            return Err(ParamsError::ZeroWrite);
        }
        if self.delta_prop == 0 {
            return Err(ParamsError::ZeroProp);
        }
        let need = 3 * self.delta_write + 1;
        if self.delta_active < need {
            return Err(ParamsError::ActiveTooShort {
                active: self.delta_active,
                need,
            });
        }
        let bound = self.delta_active - self.delta_write;
        if self.delta_consensus >= bound {
            return Err(ParamsError::ConsensusTooSlow {
                consensus: self.delta_consensus,
                bound,
            });
        }
        let a = self.alpha;
        if a.den == 0 || a.num > a.den || 3 * a.num < 2 * a.den {
            return Err(ParamsError::Alpha(a));
        }
        Ok(())
    }

    /// Last step at which a committee starting at `t0` may extend the chain,
    /// plus one: consensus runs only while `t < t0 + Δa − 3Δw`.
    pub fn extension_end(&self, t0: Step) -> Step {
        t0 + self.delta_active - 3 * self.delta_write
    }
}

impl Default for Params {
    fn default() -> Self {
        Params {
            delta_active: 50,
            delta_write: 2,
            delta_prop: 2,
            delta_consensus: 40,
            alpha: Ratio::TWO_THIRDS,
            t_gst: 0,
        }
    }
}

mod payload_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// An expansion-chain block.
///
/// `id` commits to every field except the certificate, which signs `id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AegisBlock {
    pub id: Hash,
    pub parent: Option<Hash>,
    pub primary_ref: Option<Hash>,
    pub reset_ref: Option<Hash>,
    pub height: u64,
    #[serde(with = "payload_hex")]
    pub payload: Vec<u8>,
    pub cert: Option<QuorumCertificate>,
}

impl AegisBlock {
    /// Builds an uncertified child of `parent`.
    pub fn propose(
        parent: &AegisBlock,
        primary_ref: Hash,
        reset_ref: Option<Hash>,
        payload: Vec<u8>,
    ) -> AegisBlock {
        let mut b = AegisBlock {
            id: Hash::ZERO,
            parent: Some(parent.id),
            primary_ref: Some(primary_ref),
            reset_ref,
            height: parent.height + 1,
            payload,
            cert: None,
        };
        b.id = b.content_hash();
        b
    }

    pub fn with_cert(mut self, cert: QuorumCertificate) -> AegisBlock {
        self.cert = Some(cert);
        self
    }

    /// Hash over all fields except `id` and `cert`.
    pub fn content_hash(&self) -> Hash {
        let mut e = Encoder::new();
        e.put_tag(b"aegis-block/v1");
        e.put_opt_hash(self.parent.as_ref());
        e.put_opt_hash(self.primary_ref.as_ref());
        e.put_opt_hash(self.reset_ref.as_ref());
        e.put_u64(self.height);
        e.put_bytes(&self.payload);
        hash(e.as_bytes())
    }

    pub fn is_genesis(&self) -> bool {
        self.parent.is_none() && self.id == genesis().id
    }

    /// The consensus instance this block claims to be decided in.
    pub fn instance(&self) -> Option<ConsensusId> {
        self.parent.map(|p| ConsensusId {
            parent: p,
            reset: self.reset_ref,
        })
    }
}

/// The agreed-upon genesis block (empty payload).
pub fn genesis() -> &'static AegisBlock {
    static GENESIS: OnceLock<AegisBlock> = OnceLock::new();
    GENESIS.get_or_init(|| {
        let mut b = AegisBlock {
            id: Hash::ZERO,
            parent: None,
            primary_ref: None,
            reset_ref: None,
            height: 0,
            payload: Vec::new(),
            cert: None,
        };
        b.id = b.content_hash();
        b
    })
}

/// Number of edges from `b` to genesis.
pub fn block_height(b: &AegisBlock) -> u64 {
    b.height
}

/// A weighted node set fixed by a primary block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committee {
    pub weights: Arc<BTreeMap<NodeId, Weight>>,
    pub defined_at: Hash,
    pub total_weight: Weight,
}

impl Committee {
    pub fn new(weights: BTreeMap<NodeId, Weight>, defined_at: Hash) -> Committee {
        let weights: BTreeMap<_, _> = weights.into_iter().filter(|(_, w)| *w > 0).collect();
        let total_weight = weights.values().sum();
        Committee {
            weights: Arc::new(weights),
            defined_at,
            total_weight,
        }
    }

    pub fn from_shared(weights: Arc<BTreeMap<NodeId, Weight>>, defined_at: Hash) -> Committee {
        let total_weight = weights.values().sum();
        Committee {
            weights,
            defined_at,
            total_weight,
        }
    }

    pub fn weight_of(&self, n: NodeId) -> Weight {
        self.weights.get(&n).copied().unwrap_or(0)
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.weights.contains_key(&n)
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// Members in `NodeId` order.
    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.keys().copied()
    }

    pub fn weight_of_set<'a>(&self, nodes: impl IntoIterator<Item = &'a NodeId>) -> Weight {
        nodes.into_iter().map(|n| self.weight_of(*n)).sum()
    }

    /// Strictly more than two thirds of the total weight.
    pub fn is_quorum(&self, w: Weight) -> bool {
        self.total_weight > 0 && Ratio::TWO_THIRDS.exceeded_by(w, self.total_weight)
    }
}

/// Names one consensus instance: the block being extended and the reset
/// reference the instance was started under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConsensusId {
    pub parent: Hash,
    pub reset: Option<Hash>,
}

impl ConsensusId {
    pub fn encode_into(&self, e: &mut Encoder) {
        e.put_hash(&self.parent);
        e.put_opt_hash(self.reset.as_ref());
    }
}

impl fmt::Display for ConsensusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reset {
            Some(r) => write!(f, "({}, reset {})", self.parent.short(), r.short()),
            None => write!(f, "({}, -)", self.parent.short()),
        }
    }
}
