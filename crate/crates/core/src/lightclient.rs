//! In-enclave header verification against sync committees.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockHeader, CommitteeThreshold, Receipt, SyncCommittee};
use crate::crypto::{verify, Digest, KeyPair, PublicKey};
use crate::merkle::{self, MerklePath};
use crate::types::{ChainId, Tick};
use crate::vault::SignedHeaderRef;

/// Proves that a receipt sits under the `tx_root` of the header at `height`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub tx_id: Digest,
    pub height: u64,
    pub receipt: Receipt,
    pub path: MerklePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightClientParams {
    pub chain_id: ChainId,
    pub committee_size: usize,
    pub rotation_period: Tick,
    pub threshold: CommitteeThreshold,
    pub lag_bound: usize,
}

impl LightClientParams {
    pub fn of(config: &crate::chain::ChainConfig, lag_bound: usize) -> Self {
        LightClientParams {
            chain_id: config.chain_id,
            committee_size: config.committee_size,
            rotation_period: config.committee_rotation_period,
            threshold: config.committee_threshold,
            lag_bound,
        }
    }

    fn epoch_of(&self, height: u64) -> u64 {
        height / self.rotation_period
    }

    pub fn required(&self) -> usize {
        self.threshold.required(self.committee_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum RejectReason {
    #[error("header belongs to another chain")]
    WrongChain,
    #[error("header skips heights")]
    HeightGap,
    #[error("header at or below the verified tip")]
    Stale,
    #[error("parent digest does not link to the verified tip")]
    BadParent,
    #[error("timestamp does not increase")]
    TimestampRegression,
    #[error("no committee known for the header's epoch")]
    UnknownCommittee,
    #[error("signatures come from outside the epoch's committee")]
    WrongCommittee,
    #[error("too few valid committee signatures")]
    InsufficientSignatures,
    #[error("next-committee commitment does not match")]
    CommitmentMismatch,
    #[error("rotation header arrived without the following committee")]
    MissingNextCommittee,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootstrapError {
    #[error("no headers supplied")]
    Empty,
    #[error("more headers than the lag bound")]
    TooManyHeaders,
    #[error("headers are not a parent-linked run at height {0}")]
    Inconsistent(u64),
    #[error("block data does not match tx_root at height {0}")]
    BlockDataMismatch(u64),
    #[error("committee epochs do not match the tip")]
    CommitteeEpoch,
    #[error("tip header rejected: {0}")]
    Tip(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InclusionStatus {
    Included,
    NotIncluded,
    /// The height is not among the verified headers yet.
    UnknownHeight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightClientState {
    params: LightClientParams,
    headers: Vec<BlockHeader>,
    current: SyncCommittee,
    next: SyncCommittee,
}

/// Counts distinct committee members with a valid signature over `digest`.
/// Returns `(valid, from_members)`: the second counts signatures whose
/// signer is a member at all, valid or not.
fn count_signatures(header: &BlockHeader, committee: &SyncCommittee) -> (usize, usize) {
    let digest = header.digest();
    let members: BTreeSet<PublicKey> = committee.validator_keys.iter().copied().collect();
    let mut valid = BTreeSet::new();
    let mut from_members = 0;
    for sig in &header.committee_signatures {
        if !members.contains(&sig.signer) {
            continue;
        }
        from_members += 1;
        if !valid.contains(&sig.signer) && verify(&digest.0, sig, &sig.signer) {
            valid.insert(sig.signer);
        }
    }
    (valid.len(), from_members)
}

fn check_signatures(header: &BlockHeader, committee: &SyncCommittee, required: usize) -> Result<(), RejectReason> {
    let (valid, from_members) = count_signatures(header, committee);
    if valid >= required {
        Ok(())
    } else if from_members == 0 && !header.committee_signatures.is_empty() {
        Err(RejectReason::WrongCommittee)
    } else {
        Err(RejectReason::InsufficientSignatures)
    }
}

impl LightClientState {
    /// Initializes from the latest finalized headers. `block_data`, when
    /// non-empty, holds each header's receipts and is checked against the
    /// tx roots, then dropped. Returns the state and the tip reference
    /// signed with `key`.
    pub fn bootstrap(
        params: LightClientParams,
        headers: &[BlockHeader],
        current: SyncCommittee,
        next: SyncCommittee,
        block_data: &[Vec<Receipt>],
        key: &KeyPair,
    ) -> Result<(LightClientState, SignedHeaderRef), BootstrapError> {
        let tip = headers.last().ok_or(BootstrapError::Empty)?;
        if headers.len() > params.lag_bound.max(1) {
            return Err(BootstrapError::TooManyHeaders);
        }
        for w in headers.windows(2) {
            if w[1].chain_id != params.chain_id
                || w[1].height != w[0].height + 1
                || w[1].parent_digest != w[0].digest()
                || w[1].timestamp <= w[0].timestamp
            {
                return Err(BootstrapError::Inconsistent(w[1].height));
            }
        }
        if tip.chain_id != params.chain_id {
            return Err(BootstrapError::Tip(RejectReason::WrongChain));
        }
        if !block_data.is_empty() {
            if block_data.len() != headers.len() {
                return Err(BootstrapError::BlockDataMismatch(headers[0].height));
            }
            for (h, receipts) in headers.iter().zip(block_data) {
                let leaves: Vec<Digest> = receipts.iter().map(|r| r.leaf()).collect();
                if merkle::root(&leaves) != h.tx_root {
                    return Err(BootstrapError::BlockDataMismatch(h.height));
                }
            }
        }
        let epoch = params.epoch_of(tip.height);
        if current.epoch != epoch || next.epoch != epoch + 1 {
            return Err(BootstrapError::CommitteeEpoch);
        }
        check_signatures(tip, &current, params.required()).map_err(BootstrapError::Tip)?;
        if tip.next_committee_commitment != next.commitment() {
            return Err(BootstrapError::Tip(RejectReason::CommitmentMismatch));
        }
        let d = tip.digest();
        let proof = SignedHeaderRef {
            chain_id: params.chain_id,
            height: tip.height,
            header_digest: d,
            signature: key.sign(&SignedHeaderRef::message(params.chain_id, tip.height, &d)),
        };
        let state = LightClientState { params, headers: headers.to_vec(), current, next };
        Ok((state, proof))
    }

    pub fn params(&self) -> &LightClientParams {
        &self.params
    }

    pub fn tip(&self) -> &BlockHeader {
        self.headers.last().expect("bootstrapped with at least one header")
    }

    pub fn header(&self, height: u64) -> Option<&BlockHeader> {
        let first = self.headers[0].height;
        if height < first {
            return None;
        }
        self.headers.get((height - first) as usize)
    }

    pub fn current_committee(&self) -> &SyncCommittee {
        &self.current
    }

    pub fn next_committee(&self) -> &SyncCommittee {
        &self.next
    }

    /// Epoch for which the client needs the committee after the next one,
    /// if the next header is a rotation header.
    pub fn pending_rotation(&self) -> Option<u64> {
        let next_height = self.tip().height + 1;
        let e = self.params.epoch_of(next_height);
        (e == self.current.epoch + 1).then_some(e + 1)
    }

    /// Verifies and appends `header`. On the first header of a new epoch the
    /// host must also supply the committee of the epoch after it, which must
    /// match the header's commitment.
    pub fn ingest_header(
        &mut self,
        header: &BlockHeader,
        following_committee: Option<&SyncCommittee>,
    ) -> Result<(), RejectReason> {
        let tip = self.tip();
        if header.chain_id != self.params.chain_id {
            return Err(RejectReason::WrongChain);
        }
        if header.height <= tip.height {
            return Err(RejectReason::Stale);
        }
        if header.height != tip.height + 1 {
            return Err(RejectReason::HeightGap);
        }
        if header.parent_digest != tip.digest() {
            return Err(RejectReason::BadParent);
        }
        if header.timestamp <= tip.timestamp {
            return Err(RejectReason::TimestampRegression);
        }
        let epoch = self.params.epoch_of(header.height);
        let rotating = if epoch == self.current.epoch {
            false
        } else if epoch == self.next.epoch {
            true
        } else {
            return Err(RejectReason::UnknownCommittee);
        };
        let committee = if rotating { &self.next } else { &self.current };
        check_signatures(header, committee, self.params.required())?;
        if rotating {
            let following = following_committee.ok_or(RejectReason::MissingNextCommittee)?;
            if following.epoch != epoch + 1 || following.commitment() != header.next_committee_commitment {
                return Err(RejectReason::CommitmentMismatch);
            }
            self.current = std::mem::replace(&mut self.next, following.clone());
        } else if header.next_committee_commitment != self.next.commitment() {
            return Err(RejectReason::CommitmentMismatch);
        }
        self.headers.push(header.clone());
        Ok(())
    }

    pub fn verify_inclusion(&self, proof: &InclusionProof) -> InclusionStatus {
        let Some(header) = self.header(proof.height) else {
            return InclusionStatus::UnknownHeight;
        };
        if proof.receipt.tx_id == proof.tx_id && merkle::fold(proof.receipt.leaf(), &proof.path) == header.tx_root {
            InclusionStatus::Included
        } else {
            InclusionStatus::NotIncluded
        }
    }

    /// Number of headers held.
    pub fn retained_headers(&self) -> usize {
        self.headers.len()
    }

    /// Number of committees held; always the current and the next.
    pub fn retained_committees(&self) -> usize {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Call, Chain, ChainConfig, HeaderTamper};
    use crate::types::Address;

    fn chain() -> Chain {
        let mut cfg = ChainConfig::new(ChainId::TARGET, 1);
        cfg.committee_size = 16;
        cfg.committee_rotation_period = 8;
        Chain::new(cfg).unwrap()
    }

    fn boot(c: &mut Chain, k: usize) -> LightClientState {
        let params = LightClientParams::of(c.config(), k);
        let tip = c.tip().height;
        let start = (tip + 1).saturating_sub(k as u64);
        let headers: Vec<_> = (start..=tip).map(|h| c.header(h).unwrap().clone()).collect();
        let data: Vec<_> = (start..=tip).map(|h| c.receipts(h).to_vec()).collect();
        let e = c.epoch_of(tip);
        let (cur, next) = (c.committee(e), c.committee(e + 1));
        LightClientState::bootstrap(params, &headers, cur, next, &data, &KeyPair::from_seed(b"enclave")).unwrap().0
    }

    fn feed(lc: &mut LightClientState, c: &mut Chain, h: &BlockHeader) -> Result<(), RejectReason> {
        let following = lc.pending_rotation().map(|e| c.committee(e));
        lc.ingest_header(h, following.as_ref())
    }

    #[test]
    fn bootstrap_signature_threshold() {
        let mut c = chain();
        for t in 1..=5 {
            c.advance_tick(t).unwrap();
        }
        let params = LightClientParams::of(c.config(), 8);
        let key = KeyPair::from_seed(b"e");
        let (cur, next) = (c.committee(0), c.committee(1));
        let mut tip = c.tip().clone();
        tip.committee_signatures.truncate(12);
        assert!(LightClientState::bootstrap(params, &[tip.clone()], cur.clone(), next.clone(), &[], &key).is_ok());
        tip.committee_signatures.truncate(10);
        assert_eq!(
            LightClientState::bootstrap(params, &[tip], cur.clone(), next.clone(), &[], &key).err(),
            Some(BootstrapError::Tip(RejectReason::InsufficientSignatures))
        );
        let mut hs: Vec<_> = (1..=5).map(|h| c.header(h).unwrap().clone()).collect();
        hs[2].parent_digest = Digest::ZERO;
        assert_eq!(
            LightClientState::bootstrap(params, &hs, cur, next, &[], &key).err(),
            Some(BootstrapError::Inconsistent(3))
        );
    }

    #[test]
    fn bootstrap_proof_is_signed_tip() {
        let mut c = chain();
        c.advance_tick(1).unwrap();
        let key = KeyPair::from_seed(b"e");
        let params = LightClientParams::of(c.config(), 4);
        let (_, proof) =
            LightClientState::bootstrap(params, &[c.tip().clone()], c.committee(0), c.committee(1), &[], &key).unwrap();
        assert_eq!(proof.header_digest, c.tip().digest());
        assert!(proof.verify(&key.public_key));
        assert!(!proof.verify(&KeyPair::from_seed(b"other").public_key));
    }

    #[test]
    fn follows_rotations_and_rejects_forgeries() {
        let mut c = chain();
        c.advance_tick(1).unwrap();
        let mut lc = boot(&mut c, 4);
        for t in 2..=40 {
            for tamper in HeaderTamper::ALL {
                let forged = c.forge_header(tamper);
                let mut probe = lc.clone();
                assert!(feed(&mut probe, &mut c, &forged).is_err(), "{tamper:?} at {t}");
            }
            let h = c.advance_tick(t).unwrap();
            feed(&mut lc, &mut c, &h).unwrap();
        }
        assert_eq!(lc.current_committee().epoch, 5);
        assert_eq!(lc.retained_headers(), 41);
        assert_eq!(lc.retained_committees(), 2);
    }

    #[test]
    fn old_committee_after_rotation_is_wrong_committee() {
        let mut c = chain();
        for t in 1..=8 {
            c.advance_tick(t).unwrap();
        }
        let mut lc = boot(&mut c, 8);
        for t in 9..=15 {
            let h = c.advance_tick(t).unwrap();
            feed(&mut lc, &mut c, &h).unwrap();
        }
        let forged = c.forge_header(HeaderTamper::StaleCommittee);
        assert_eq!(feed(&mut lc, &mut c, &forged), Err(RejectReason::WrongCommittee));
        let gap = c.forge_header(HeaderTamper::HeightGap);
        assert_eq!(feed(&mut lc, &mut c, &gap), Err(RejectReason::HeightGap));
        let h = c.advance_tick(16).unwrap();
        assert_eq!(lc.ingest_header(&h, None), Err(RejectReason::MissingNextCommittee));
        feed(&mut lc, &mut c, &h).unwrap();
        assert_eq!(feed(&mut lc, &mut c, &h), Err(RejectReason::Stale));
    }

    #[test]
    fn inclusion_outcomes() {
        let mut c = chain();
        let a = Address::named("a");
        c.mint(a, 10);
        c.advance_tick(1).unwrap();
        let mut lc = boot(&mut c, 4);
        let ids: Vec<_> = (0..3).map(|_| c.submit_tx(a, Call::Transfer { to: Address::named("b") }, 1, 1).unwrap()).collect();
        let h = c.advance_tick(2).unwrap();
        let proof = c.inclusion_proof(&ids[1]).unwrap();
        assert_eq!(lc.verify_inclusion(&proof), InclusionStatus::UnknownHeight);
        feed(&mut lc, &mut c, &h).unwrap();
        assert_eq!(lc.verify_inclusion(&proof), InclusionStatus::Included);
        let mut bad = proof.clone();
        bad.path[0].0 .0[5] ^= 0x40;
        assert_eq!(lc.verify_inclusion(&bad), InclusionStatus::NotIncluded);
        let mut swapped = proof;
        swapped.tx_id = ids[0];
        assert_eq!(lc.verify_inclusion(&swapped), InclusionStatus::NotIncluded);
    }
}
