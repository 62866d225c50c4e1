//! Hash time-locked payments for source chains without a contract host.
//!
//! A lock pays its claim address when the hash preimage is presented strictly
//! before the deadline, and refunds the depositor from the deadline onward.
//! Exactly one of the two branches can ever execute.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, Digest};
use crate::encoding::Encoder;
use crate::types::{Address, Amount, Tick};
use crate::vault::{CostMeter, TransferItem};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HtlcError {
    #[error("lock amount must be positive")]
    ZeroAmount,
    #[error("deadline must lie in the future")]
    DeadlineInPast,
    #[error("lock id already exists")]
    DuplicateLock,
    #[error("unknown lock")]
    UnknownLock,
    #[error("lock already settled")]
    AlreadySettled,
    #[error("preimage does not match the hash lock")]
    WrongPreimage,
    #[error("claim window closed at tick {0}")]
    ClaimWindowClosed(Tick),
    #[error("refund not possible before tick {0}")]
    TooEarly(Tick),
}

/// The secret whose hash locks a payment. Kept inside enclaves until reveal.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preimage(pub [u8; 32]);

impl std::fmt::Debug for Preimage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Preimage(..)")
    }
}

impl Preimage {
    pub fn hash_lock(&self) -> Digest {
        hash(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtlcLock {
    pub hash_lock: Digest,
    pub deadline: Tick,
    pub refund_address: Address,
    pub claim_address: Address,
    pub amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockStatus {
    Open,
    Claimed,
    Refunded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call")]
pub enum HtlcCall {
    Lock { lock: HtlcLock },
    Claim { id: Digest, preimage: Preimage },
    Refund { id: Digest },
}

impl HtlcCall {
    /// Claims are deduplicated by the chain like multisig payloads, since
    /// every enclave may submit the same reveal.
    pub fn payload_digest(&self) -> Option<Digest> {
        match self {
            HtlcCall::Claim { id, .. } => {
                let mut enc = Encoder::new("htlc-claim");
                enc.digest(id);
                Some(enc.to_digest())
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HtlcCall::Lock { .. } => "htlc_lock",
            HtlcCall::Claim { .. } => "htlc_claim",
            HtlcCall::Refund { .. } => "htlc_refund",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "fields")]
pub enum HtlcEvent {
    Locked { id: Digest, lock: HtlcLock },
    Claimed { id: Digest, preimage: Preimage },
    Refunded { id: Digest },
}

pub fn lock_id(sender: &Address, lock: &HtlcLock, timestamp: Tick) -> Digest {
    let mut enc = Encoder::new("htlc-lock");
    enc.bytes(&sender.0)
        .digest(&lock.hash_lock)
        .u64(lock.deadline)
        .bytes(&lock.refund_address.0)
        .bytes(&lock.claim_address.0)
        .u64(lock.amount)
        .u64(timestamp);
    enc.to_digest()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtlcBook {
    pub locks: BTreeMap<Digest, (HtlcLock, LockStatus)>,
}

pub struct HtlcOutcome {
    pub events: Vec<HtlcEvent>,
    pub payouts: Vec<(Address, Amount)>,
}

impl HtlcBook {
    /// Amount currently held by open locks.
    pub fn locked(&self) -> u128 {
        self.locks
            .values()
            .filter(|(_, s)| *s == LockStatus::Open)
            .map(|(l, _)| l.amount as u128)
            .sum()
    }

    pub fn execute(
        &mut self,
        call: &HtlcCall,
        sender: Address,
        value: Amount,
        now: Tick,
        meter: &mut CostMeter,
    ) -> Result<HtlcOutcome, HtlcError> {
        match call {
            HtlcCall::Lock { lock } => self.lock(sender, value, lock, now, meter),
            HtlcCall::Claim { id, preimage } => self.claim(id, preimage, now, meter),
            HtlcCall::Refund { id } => self.refund(id, now, meter),
        }
    }

    fn lock(
        &mut self,
        sender: Address,
        value: Amount,
        lock: &HtlcLock,
        now: Tick,
        meter: &mut CostMeter,
    ) -> Result<HtlcOutcome, HtlcError> {
        if value == 0 || value != lock.amount {
            return Err(HtlcError::ZeroAmount);
        }
        if lock.deadline <= now {
            return Err(HtlcError::DeadlineInPast);
        }
        meter.hash_ops += 1;
        let id = lock_id(&sender, lock, now);
        if self.locks.contains_key(&id) {
            return Err(HtlcError::DuplicateLock);
        }
        self.locks.insert(id, (lock.clone(), LockStatus::Open));
        meter.storage_writes += 1;
        Ok(HtlcOutcome { events: vec![HtlcEvent::Locked { id, lock: lock.clone() }], payouts: vec![] })
    }

    /// Claim branch: requires the preimage and `now < deadline`.
    pub fn claim(&mut self, id: &Digest, preimage: &Preimage, now: Tick, meter: &mut CostMeter) -> Result<HtlcOutcome, HtlcError> {
        let (lock, status) = self.locks.get(id).ok_or(HtlcError::UnknownLock)?;
        if *status != LockStatus::Open {
            return Err(HtlcError::AlreadySettled);
        }
        meter.hash_ops += 1;
        if preimage.hash_lock() != lock.hash_lock {
            return Err(HtlcError::WrongPreimage);
        }
        if now >= lock.deadline {
            return Err(HtlcError::ClaimWindowClosed(lock.deadline));
        }
        let payout = (lock.claim_address, lock.amount);
        self.locks.get_mut(id).unwrap().1 = LockStatus::Claimed;
        meter.storage_writes += 1;
        Ok(HtlcOutcome { events: vec![HtlcEvent::Claimed { id: *id, preimage: *preimage }], payouts: vec![payout] })
    }

    /// Refund branch: requires `now >= deadline`.
    pub fn refund(&mut self, id: &Digest, now: Tick, meter: &mut CostMeter) -> Result<HtlcOutcome, HtlcError> {
        let (lock, status) = self.locks.get(id).ok_or(HtlcError::UnknownLock)?;
        if *status != LockStatus::Open {
            return Err(HtlcError::AlreadySettled);
        }
        if now < lock.deadline {
            return Err(HtlcError::TooEarly(lock.deadline));
        }
        let payout = (lock.refund_address, lock.amount);
        self.locks.get_mut(id).unwrap().1 = LockStatus::Refunded;
        meter.storage_writes += 1;
        Ok(HtlcOutcome { events: vec![HtlcEvent::Refunded { id: *id }], payouts: vec![payout] })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtlcRequest {
    pub client: Address,
    pub amount: Amount,
    pub receiver: Address,
    pub nonce: u64,
}

impl HtlcRequest {
    pub fn id(&self) -> Digest {
        let mut enc = Encoder::new("htlc-request");
        enc.bytes(&self.client.0).u64(self.amount).bytes(&self.receiver.0).u64(self.nonce);
        enc.to_digest()
    }
}

/// Builds the lock the client publishes on the source chain and the
/// matching target-chain transfer item. `lock_ref` links the transfer back
/// to the request until the on-chain lock id is known.
pub fn build_pair(
    request: &HtlcRequest,
    preimage: &Preimage,
    deadline: Tick,
    claim_address: Address,
    target_amount: Amount,
) -> (HtlcLock, TransferItem) {
    let lock = HtlcLock {
        hash_lock: preimage.hash_lock(),
        deadline,
        refund_address: request.client,
        claim_address,
        amount: request.amount,
    };
    let item = TransferItem { receiver: request.receiver, amount: target_amount, deposit_id: request.id() };
    (lock, item)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(deadline: Tick) -> (HtlcBook, Digest, Preimage) {
        let secret = Preimage([7u8; 32]);
        let lock = HtlcLock {
            hash_lock: secret.hash_lock(),
            deadline,
            refund_address: Address::named("client"),
            claim_address: Address::named("mercury"),
            amount: 50,
        };
        let mut book = HtlcBook::default();
        let mut m = CostMeter::default();
        let out = book.execute(&HtlcCall::Lock { lock }, Address::named("client"), 50, 0, &mut m).unwrap();
        let HtlcEvent::Locked { id, .. } = out.events[0] else { unreachable!() };
        (book, id, secret)
    }

    #[test]
    fn claim_before_deadline() {
        let (mut book, id, secret) = setup(20);
        let mut m = CostMeter::default();
        let out = book.claim(&id, &secret, 19, &mut m).unwrap();
        assert_eq!(out.payouts, vec![(Address::named("mercury"), 50)]);
        assert_eq!(book.refund(&id, 25, &mut m).err(), Some(HtlcError::AlreadySettled));
    }

    #[test]
    fn deadline_tick_goes_to_refund() {
        let (mut book, id, secret) = setup(20);
        let mut m = CostMeter::default();
        assert_eq!(book.claim(&id, &secret, 20, &mut m).err(), Some(HtlcError::ClaimWindowClosed(20)));
        book.refund(&id, 20, &mut m).unwrap();
        assert_eq!(book.claim(&id, &secret, 20, &mut m).err(), Some(HtlcError::AlreadySettled));
    }

    #[test]
    fn early_refund_and_wrong_preimage_rejected() {
        let (mut book, id, _) = setup(20);
        let mut m = CostMeter::default();
        assert_eq!(book.refund(&id, 19, &mut m).err(), Some(HtlcError::TooEarly(20)));
        assert_eq!(book.claim(&id, &Preimage([8; 32]), 5, &mut m).err(), Some(HtlcError::WrongPreimage));
        assert_eq!(book.locked(), 50);
    }

    #[test]
    fn build_pair_links_lock_and_transfer() {
        let req = HtlcRequest { client: Address::named("c"), amount: 10, receiver: Address::named("r"), nonce: 1 };
        let p = Preimage([1; 32]);
        let (lock, item) = build_pair(&req, &p, 40, Address::named("m"), 25);
        assert_eq!(lock.hash_lock, hash(&[1; 32]));
        assert_eq!(lock.refund_address, req.client);
        assert_eq!(item.deposit_id, req.id());
        assert_eq!(item.amount, 25);
    }
}
