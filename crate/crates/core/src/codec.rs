//! Canonical binary encoding.
//!
//! Fields are written in declaration order, integers big-endian, byte strings
//! and collections length-prefixed, optional values behind a 0/1 tag. The
//! encoding is injective, so hashing it is a sound content address.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::consensus::QuorumCertificate;
use crate::crypto::Signature;
use crate::types::{AegisBlock, ConsensusId, Hash, NodeId};

#[derive(Default, Debug, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tag(&mut self, tag: &[u8]) {
        self.put_bytes(tag);
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_hash(&mut self, h: &Hash) {
        self.buf.extend_from_slice(&h.0);
    }

    pub fn put_opt_hash(&mut self, h: Option<&Hash>) {
        match h {
            None => self.put_u8(0),
            Some(h) => {
                self.put_u8(1);
                self.put_hash(h);
            }
        }
    }

    pub fn put_bytes(&mut self, b: &[u8]) {
        self.put_u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("invalid option tag {tag} at offset {at}")]
    BadTag { tag: u8, at: usize },
    #[error("block id does not match content")]
    IdMismatch,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn hash(&mut self) -> Result<Hash, DecodeError> {
        Ok(Hash(self.take(32)?.try_into().unwrap()))
    }

    pub fn opt_hash(&mut self) -> Result<Option<Hash>, DecodeError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.hash()?)),
            tag => Err(DecodeError::BadTag { tag, at }),
        }
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

pub fn encode_cert(e: &mut Encoder, qc: &QuorumCertificate) {
    qc.instance.encode_into(e);
    e.put_hash(&qc.committee_ref);
    e.put_u32(qc.round);
    e.put_hash(&qc.value);
    e.put_u32(qc.signatures.len() as u32);
    for (n, s) in &qc.signatures {
        e.put_u32(n.0);
        e.put_hash(&s.0);
    }
}

fn decode_cert(d: &mut Decoder<'_>) -> Result<QuorumCertificate, DecodeError> {
    let instance = ConsensusId {
        parent: d.hash()?,
        reset: d.opt_hash()?,
    };
    let committee_ref = d.hash()?;
    let round = d.u32()?;
    let value = d.hash()?;
    let n = d.u32()?;
    let mut signatures = BTreeMap::new();
    for _ in 0..n {
        let node = NodeId(d.u32()?);
        signatures.insert(node, Signature(d.hash()?));
    }
    Ok(QuorumCertificate {
        instance,
        committee_ref,
        round,
        value,
        signatures,
    })
}

/// Full block encoding, certificate included.
pub fn encode_block(b: &AegisBlock) -> Vec<u8> {
    let mut e = Encoder::new();
    e.put_hash(&b.id);
    e.put_opt_hash(b.parent.as_ref());
    e.put_opt_hash(b.primary_ref.as_ref());
    e.put_opt_hash(b.reset_ref.as_ref());
    e.put_u64(b.height);
    e.put_bytes(&b.payload);
    match &b.cert {
        None => e.put_u8(0),
        Some(qc) => {
            e.put_u8(1);
            encode_cert(&mut e, qc);
        }
    }
    e.into_bytes()
}

/// Inverse of [`encode_block`]; rejects blocks whose id does not match.
pub fn decode_block(buf: &[u8]) -> Result<AegisBlock, DecodeError> {
    let mut d = Decoder::new(buf);
    let id = d.hash()?;
    let parent = d.opt_hash()?;
    let primary_ref = d.opt_hash()?;
    let reset_ref = d.opt_hash()?;
    let height = d.u64()?;
    let payload = d.bytes()?;
    let at = d.pos;
    let cert = match d.u8()? {
        0 => None,
        1 => Some(decode_cert(&mut d)?),
        tag => return Err(DecodeError::BadTag { tag, at }),
    };
    d.finish()?;
    let b = AegisBlock {
        id,
        parent,
        primary_ref,
        reset_ref,
        height,
        payload,
        cert,
    };
    if b.content_hash() != b.id {
        return Err(DecodeError::IdMismatch);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKey;
    use crate::types::{genesis, hash};
    use proptest::prelude::*;

    fn sample(payload: Vec<u8>, reset: Option<Hash>, signers: u32) -> AegisBlock {
        let b = AegisBlock::propose(genesis(), hash(b"p1"), reset, payload);
        let instance = b.instance().unwrap();
        let signatures = (0..signers)
            .map(|i| {
                (
                    NodeId(i),
                    SigningKey::new(NodeId(i)).sign(b.id.0.as_slice()),
                )
            })
            .collect();
        let qc = QuorumCertificate {
            instance,
            committee_ref: hash(b"p1"),
            round: 3,
            value: b.id,
            signatures,
        };
        b.with_cert(qc)
    }

    #[test]
    fn block_round_trip_binary_and_json() {
        let b = sample(b"v:1".to_vec(), Some(hash(b"r")), 4);
        let bin = encode_block(&b);
        let back = decode_block(&bin).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.content_hash(), b.id);

        let json = serde_json::to_string(&b).unwrap();
        let back: AegisBlock = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.content_hash(), b.id);
    }

    #[test]
    fn genesis_round_trip() {
        let g = genesis();
        assert_eq!(&decode_block(&encode_block(g)).unwrap(), g);
    }

    #[test]
    fn tampered_encoding_is_rejected() {
        let b = sample(b"abc".to_vec(), None, 2);
        let mut bin = encode_block(&b);
        // height field starts after id (32) and three optional hashes
        let at = 32 + 33 + 33 + 1;
        bin[at + 7] ^= 1;
        assert_eq!(decode_block(&bin), Err(DecodeError::IdMismatch));
        let bin = encode_block(&b);
        assert!(matches!(
            decode_block(&bin[..bin.len() - 1]),
            Err(DecodeError::Truncated(_))
        ));
        let mut bin = encode_block(&b);
        bin.push(0);
        assert_eq!(decode_block(&bin), Err(DecodeError::Trailing(1)));
    }

    proptest! {
        #[test]
        fn round_trip_any_payload(payload in proptest::collection::vec(any::<u8>(), 0..64),
                                  reset in any::<bool>(), signers in 0u32..8) {
            let b = sample(payload, reset.then(|| hash(b"r")), signers);
            let back = decode_block(&encode_block(&b)).unwrap();
            prop_assert_eq!(back.content_hash(), b.id);
            prop_assert_eq!(back, b);
        }
    }
}
