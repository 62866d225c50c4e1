//! The on-chain vault contract: operator registration, deposits, batched
//! transfers, the challenge lifecycle, confirmations and checkpoints.
//!
//! Every operation validates fully before mutating, so an `Err` leaves the
//! state untouched (a revert).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    hash, multisig_verify, verify, AttestationQuote, Digest, MultiSignature, PublicKey, Signature,
};
use crate::encoding::{Encode, Encoder};
use crate::types::{Address, Amount, ChainId, Tick};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    pub storage_writes: u64,
    pub storage_deletes: u64,
    pub sig_verifications: u64,
    pub hash_ops: u64,
}

impl CostMeter {
    pub fn add(&mut self, other: &CostMeter) {
        self.storage_writes += other.storage_writes;
        self.storage_deletes += other.storage_deletes;
        self.sig_verifications += other.sig_verifications;
        self.hash_ops += other.hash_ops;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VaultError {
    #[error("deposit value must be positive")]
    ZeroValue,
    #[error("deposit id already exists in this block")]
    IdCollision,
    #[error("multisig does not meet the operator threshold")]
    ThresholdNotMet,
    #[error("multisig covers a different message")]
    DigestMismatch,
    #[error("payload was already executed")]
    AlreadyExecuted,
    #[error("vault balance {balance} cannot cover {needed}")]
    InsufficientVaultBalance { balance: Amount, needed: Amount },
    #[error("transfer batch expired at tick {0}")]
    BatchExpired(Tick),
    #[error("batch addressed to another chain")]
    WrongChain,
    #[error("unknown deposit")]
    UnknownDeposit,
    #[error("deposit already confirmed")]
    AlreadyConfirmed,
    #[error("deposit already under challenge")]
    AlreadyChallenged,
    #[error("deposit is not under challenge")]
    NotChallenged,
    #[error("challenged value does not match the deposit")]
    ValueMismatch,
    #[error("pledge {given} below required {required}")]
    PledgeTooSmall { given: Amount, required: Amount },
    #[error("response window has not elapsed")]
    WindowNotElapsed,
    #[error("attestation quote rejected")]
    InvalidQuote,
    #[error("block proof is not signed by the registering key")]
    InvalidBlockProof,
    #[error("block proof does not reference one of the latest finalized headers")]
    StaleBlockProof,
    #[error("operator already registered")]
    DuplicateOperator,
    #[error("registration is closed")]
    RegistrationClosed,
    #[error("registration is still open")]
    RegistrationOpen,
    #[error("only the deployer may do this")]
    NotDeployer,
    #[error("no operators registered")]
    NoOperators,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositRecord {
    pub id: Digest,
    pub sender: Address,
    pub value: Amount,
    pub under_challenge: bool,
    pub challenge_started_at: Option<Tick>,
    pub confirmed: bool,
}

pub fn deposit_id(sender: &Address, value: Amount, timestamp: Tick) -> Digest {
    let mut enc = Encoder::new("deposit-id");
    enc.bytes(&sender.0).u64(value).u64(timestamp);
    enc.to_digest()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferItem {
    pub receiver: Address,
    pub amount: Amount,
    pub deposit_id: Digest,
}

impl Encode for TransferItem {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.bytes(&self.receiver.0).u64(self.amount).digest(&self.deposit_id);
    }
}

/// The unsigned part of a transfer batch. Its digest is what operators sign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferBatchBody {
    pub target_chain: ChainId,
    pub transfers: Vec<TransferItem>,
    /// Last block timestamp at which the batch may execute.
    pub valid_until: Tick,
    pub nonce: u64,
}

impl TransferBatchBody {
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::new("transfer-batch");
        enc.u64(self.target_chain.0 as u64)
            .u64(self.nonce)
            .u64(self.valid_until)
            .list(&self.transfers);
        enc.to_digest()
    }

    pub fn total(&self) -> u128 {
        self.transfers.iter().map(|t| t.amount as u128).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferBatch {
    pub body: TransferBatchBody,
    pub multisig: MultiSignature,
}

pub fn confirm_digest(chain: ChainId, ids: &[Digest], nonce: u64) -> Digest {
    let mut enc = Encoder::new("confirm");
    enc.u64(chain.0 as u64).u64(nonce).list(ids);
    enc.to_digest()
}

pub fn challenge_digest(chain: ChainId, id: &Digest) -> Digest {
    let mut enc = Encoder::new("challenge");
    enc.u64(chain.0 as u64).digest(id);
    enc.to_digest()
}

pub fn checkpoint_digest(chain: ChainId, ids: &[Digest], nonce: u64) -> Digest {
    let mut enc = Encoder::new("checkpoint");
    enc.u64(chain.0 as u64).u64(nonce).list(ids);
    enc.to_digest()
}

/// A recent header digest signed by an enclave key, proving the enclave has
/// synchronized with the chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedHeaderRef {
    pub chain_id: ChainId,
    pub height: u64,
    pub header_digest: Digest,
    pub signature: Signature,
}

impl SignedHeaderRef {
    pub fn message(chain_id: ChainId, height: u64, header_digest: &Digest) -> Vec<u8> {
        let mut enc = Encoder::new("header-ref");
        enc.u64(chain_id.0 as u64).u64(height).digest(header_digest);
        enc.finish()
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        verify(&Self::message(self.chain_id, self.height, &self.header_digest), &self.signature, pk)
    }
}

/// Contract call ABI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call")]
pub enum VaultCall {
    Register { quote: AttestationQuote, block_proof: SignedHeaderRef, pk: PublicKey },
    CloseRegistration,
    FundLiquidity,
    Deposit,
    Transfer { batch: TransferBatch },
    Confirm { ids: Vec<Digest>, nonce: u64, multisig: MultiSignature },
    StartChallenge { id: Digest, value: Amount },
    ResolveChallenge { id: Digest },
    RespondChallenge { id: Digest, multisig: MultiSignature },
    UpdateCheckpoint { ids: Vec<Digest>, nonce: u64, multisig: MultiSignature },
}

impl VaultCall {
    pub fn name(&self) -> &'static str {
        match self {
            VaultCall::Register { .. } => "register",
            VaultCall::CloseRegistration => "close_registration",
            VaultCall::FundLiquidity => "fund_liquidity",
            VaultCall::Deposit => "deposit",
            VaultCall::Transfer { .. } => "transfer",
            VaultCall::Confirm { .. } => "confirm",
            VaultCall::StartChallenge { .. } => "start_challenge",
            VaultCall::ResolveChallenge { .. } => "resolve_challenge",
            VaultCall::RespondChallenge { .. } => "respond_challenge",
            VaultCall::UpdateCheckpoint { .. } => "update_checkpoint",
        }
    }

    /// Digest of the operator-signed payload, for multisig-gated calls.
    pub fn payload_digest(&self, chain: ChainId) -> Option<Digest> {
        match self {
            VaultCall::Transfer { batch } => Some(batch.body.digest()),
            VaultCall::Confirm { ids, nonce, .. } => Some(confirm_digest(chain, ids, *nonce)),
            VaultCall::RespondChallenge { id, .. } => Some(challenge_digest(chain, id)),
            VaultCall::UpdateCheckpoint { ids, nonce, .. } => Some(checkpoint_digest(chain, ids, *nonce)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "fields")]
pub enum VaultEvent {
    Registered { pk: PublicKey, at: Tick },
    RegistrationClosed { operators: Vec<PublicKey>, threshold: usize },
    LiquidityAdded { from: Address, amount: Amount },
    Deposit { id: Digest, sender: Address, value: Amount, timestamp: Tick },
    Transfer { deposit_id: Digest, receiver: Address, amount: Amount, batch: Digest, signers: Vec<PublicKey> },
    Confirmed { id: Digest },
    Challenge { id: Digest, challenger: Address, pledge: Amount, started_at: Tick },
    ChallengeVoided { id: Digest, challenger: Address, pledge_refunded: Amount },
    ChallengeResponded { id: Digest, pledge_forfeited: Amount },
    Refunded { id: Digest, sender: Address, value: Amount, pledge_returned: Amount },
    Checkpointed { id: Digest, was_confirmed: bool },
    CheckpointSkipped { id: Digest },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub events: Vec<VaultEvent>,
    pub payouts: Vec<(Address, Amount)>,
}

pub struct CallContext<'a> {
    pub chain_id: ChainId,
    /// Timestamp of the block executing the call.
    pub now: Tick,
    pub sender: Address,
    pub value: Amount,
    /// Digests of the most recent finalized headers, newest last.
    pub recent_headers: &'a [Digest],
    pub meter: &'a mut CostMeter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultConfig {
    pub program_digest: Digest,
    pub manufacturer_root: PublicKey,
    pub deployer: Address,
    /// Block proofs must reference one of this many latest headers.
    pub lag_bound: usize,
    pub tau_w: Tick,
    pub pledge_floor: Amount,
    /// Pledge as basis points of the deposit value.
    pub pledge_bps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultState {
    pub config: VaultConfig,
    pub operators: Vec<(PublicKey, Tick)>,
    pub stakes: BTreeMap<PublicKey, Amount>,
    pub registration_open: bool,
    pub threshold: usize,
    pub deposits: BTreeMap<Digest, DepositRecord>,
    pub balance: Amount,
    pub pledges: BTreeMap<Digest, (Address, Amount)>,
    pub executed: BTreeSet<Digest>,
}

impl VaultState {
    pub fn new(config: VaultConfig) -> Self {
        VaultState {
            config,
            operators: Vec::new(),
            stakes: BTreeMap::new(),
            registration_open: true,
            threshold: 0,
            deposits: BTreeMap::new(),
            balance: 0,
            pledges: BTreeMap::new(),
            executed: BTreeSet::new(),
        }
    }

    pub fn operator_keys(&self) -> Vec<PublicKey> {
        self.operators.iter().map(|(pk, _)| *pk).collect()
    }

    pub fn required_pledge(&self, value: Amount) -> Amount {
        let proportional = (value as u128 * self.config.pledge_bps as u128 / 10_000) as Amount;
        proportional.max(self.config.pledge_floor)
    }

    /// Everything the contract holds: liquid balance, escrowed pledges and stakes.
    pub fn holdings(&self) -> u128 {
        self.balance as u128
            + self.pledges.values().map(|(_, a)| *a as u128).sum::<u128>()
            + self.stakes.values().map(|a| *a as u128).sum::<u128>()
    }

    pub fn state_digest(&self) -> Digest {
        hash(&serde_json::to_vec(self).expect("vault state serializes"))
    }

    pub fn execute(&mut self, call: &VaultCall, ctx: &mut CallContext<'_>) -> Result<Effects, VaultError> {
        match call {
            VaultCall::Register { quote, block_proof, pk } => self.register(ctx, quote, block_proof, *pk),
            VaultCall::CloseRegistration => self.close_registration(ctx),
            VaultCall::FundLiquidity => self.fund_liquidity(ctx),
            VaultCall::Deposit => self.deposit(ctx),
            VaultCall::Transfer { batch } => self.transfer(ctx, batch),
            VaultCall::Confirm { ids, nonce, multisig } => self.confirm(ctx, ids, *nonce, multisig),
            VaultCall::StartChallenge { id, value } => self.start_challenge(ctx, id, *value),
            VaultCall::ResolveChallenge { id } => self.resolve_challenge(ctx, id),
            VaultCall::RespondChallenge { id, multisig } => self.respond_challenge(ctx, id, multisig),
            VaultCall::UpdateCheckpoint { ids, nonce, multisig } => self.update_checkpoint(ctx, ids, *nonce, multisig),
        }
    }

    fn check_multisig(
        &self,
        ctx: &mut CallContext<'_>,
        expected: Digest,
        ms: &MultiSignature,
    ) -> Result<(), VaultError> {
        if self.registration_open {
            return Err(VaultError::RegistrationOpen);
        }
        ctx.meter.hash_ops += 1;
        if ms.message_digest != expected {
            return Err(VaultError::DigestMismatch);
        }
        if self.executed.contains(&expected) {
            return Err(VaultError::AlreadyExecuted);
        }
        ctx.meter.sig_verifications += 1;
        if !multisig_verify(ms, &self.operator_keys(), self.threshold) {
            return Err(VaultError::ThresholdNotMet);
        }
        Ok(())
    }

    fn mark_executed(&mut self, ctx: &mut CallContext<'_>, digest: Digest) {
        self.executed.insert(digest);
        ctx.meter.storage_writes += 1;
    }

    pub fn register(
        &mut self,
        ctx: &mut CallContext<'_>,
        quote: &AttestationQuote,
        block_proof: &SignedHeaderRef,
        pk: PublicKey,
    ) -> Result<Effects, VaultError> {
        if !self.registration_open {
            return Err(VaultError::RegistrationClosed);
        }
        ctx.meter.sig_verifications += 2;
        if !quote.verify(&self.config.manufacturer_root)
            || quote.program_digest != self.config.program_digest
            || quote.enclave_public_key != pk
        {
            return Err(VaultError::InvalidQuote);
        }
        if block_proof.chain_id != ctx.chain_id || !block_proof.verify(&pk) {
            return Err(VaultError::InvalidBlockProof);
        }
        let window = ctx.recent_headers.len().min(self.config.lag_bound);
        let recent = &ctx.recent_headers[ctx.recent_headers.len() - window..];
        if !recent.contains(&block_proof.header_digest) {
            return Err(VaultError::StaleBlockProof);
        }
        if self.operators.iter().any(|(k, _)| *k == pk) {
            return Err(VaultError::DuplicateOperator);
        }
        self.operators.push((pk, ctx.now));
        if ctx.value > 0 {
            self.stakes.insert(pk, ctx.value);
        }
        ctx.meter.storage_writes += 1;
        Ok(Effects { events: vec![VaultEvent::Registered { pk, at: ctx.now }], payouts: vec![] })
    }

    pub fn close_registration(&mut self, ctx: &mut CallContext<'_>) -> Result<Effects, VaultError> {
        if ctx.sender != self.config.deployer {
            return Err(VaultError::NotDeployer);
        }
        if !self.registration_open {
            return Err(VaultError::RegistrationClosed);
        }
        if self.operators.is_empty() {
            return Err(VaultError::NoOperators);
        }
        self.registration_open = false;
        // n = 2f + 1 operators need f + 1 signatures.
        self.threshold = self.operators.len() / 2 + 1;
        ctx.meter.storage_writes += 2;
        Ok(Effects {
            events: vec![VaultEvent::RegistrationClosed { operators: self.operator_keys(), threshold: self.threshold }],
            payouts: vec![],
        })
    }

    pub fn fund_liquidity(&mut self, ctx: &mut CallContext<'_>) -> Result<Effects, VaultError> {
        if ctx.value == 0 {
            return Err(VaultError::ZeroValue);
        }
        self.balance += ctx.value;
        ctx.meter.storage_writes += 1;
        Ok(Effects {
            events: vec![VaultEvent::LiquidityAdded { from: ctx.sender, amount: ctx.value }],
            payouts: vec![],
        })
    }

    pub fn deposit(&mut self, ctx: &mut CallContext<'_>) -> Result<Effects, VaultError> {
        if ctx.value == 0 {
            return Err(VaultError::ZeroValue);
        }
        ctx.meter.hash_ops += 1;
        let id = deposit_id(&ctx.sender, ctx.value, ctx.now);
        if self.deposits.contains_key(&id) {
            return Err(VaultError::IdCollision);
        }
        self.deposits.insert(
            id,
            DepositRecord {
                id,
                sender: ctx.sender,
                value: ctx.value,
                under_challenge: false,
                challenge_started_at: None,
                confirmed: false,
            },
        );
        self.balance += ctx.value;
        ctx.meter.storage_writes += 2;
        Ok(Effects {
            events: vec![VaultEvent::Deposit { id, sender: ctx.sender, value: ctx.value, timestamp: ctx.now }],
            payouts: vec![],
        })
    }

    pub fn transfer(&mut self, ctx: &mut CallContext<'_>, batch: &TransferBatch) -> Result<Effects, VaultError> {
        if batch.body.target_chain != ctx.chain_id {
            return Err(VaultError::WrongChain);
        }
        let digest = batch.body.digest();
        self.check_multisig(ctx, digest, &batch.multisig)?;
        if ctx.now > batch.body.valid_until {
            return Err(VaultError::BatchExpired(batch.body.valid_until));
        }
        let total = batch.body.total();
        if total > self.balance as u128 {
            return Err(VaultError::InsufficientVaultBalance { balance: self.balance, needed: total as Amount });
        }
        self.balance -= total as Amount;
        ctx.meter.storage_writes += 1;
        self.mark_executed(ctx, digest);
        let signers = batch.multisig.signers();
        let mut effects = Effects::default();
        for item in &batch.body.transfers {
            ctx.meter.storage_writes += 1;
            effects.payouts.push((item.receiver, item.amount));
            effects.events.push(VaultEvent::Transfer {
                deposit_id: item.deposit_id,
                receiver: item.receiver,
                amount: item.amount,
                batch: digest,
                signers: signers.clone(),
            });
        }
        Ok(effects)
    }

    pub fn confirm(
        &mut self,
        ctx: &mut CallContext<'_>,
        ids: &[Digest],
        nonce: u64,
        ms: &MultiSignature,
    ) -> Result<Effects, VaultError> {
        let digest = confirm_digest(ctx.chain_id, ids, nonce);
        self.check_multisig(ctx, digest, ms)?;
        self.mark_executed(ctx, digest);
        let mut effects = Effects::default();
        for id in ids {
            let Some(rec) = self.deposits.get_mut(id) else { continue };
            if rec.confirmed {
                continue;
            }
            rec.confirmed = true;
            ctx.meter.storage_writes += 1;
            if rec.under_challenge {
                // Confirmation wins the race; the challenger acted in good faith.
                rec.under_challenge = false;
                rec.challenge_started_at = None;
                if let Some((challenger, pledge)) = self.pledges.remove(id) {
                    ctx.meter.storage_deletes += 1;
                    effects.payouts.push((challenger, pledge));
                    effects.events.push(VaultEvent::ChallengeVoided { id: *id, challenger, pledge_refunded: pledge });
                }
            }
            effects.events.push(VaultEvent::Confirmed { id: *id });
        }
        Ok(effects)
    }

    pub fn start_challenge(
        &mut self,
        ctx: &mut CallContext<'_>,
        id: &Digest,
        value: Amount,
    ) -> Result<Effects, VaultError> {
        let rec = self.deposits.get(id).ok_or(VaultError::UnknownDeposit)?;
        let required = self.required_pledge(rec.value);
        if ctx.value < required {
            return Err(VaultError::PledgeTooSmall { given: ctx.value, required });
        }
        if value != rec.value {
            return Err(VaultError::ValueMismatch);
        }
        if rec.confirmed {
            return Err(VaultError::AlreadyConfirmed);
        }
        if rec.under_challenge {
            return Err(VaultError::AlreadyChallenged);
        }
        let rec = self.deposits.get_mut(id).unwrap();
        rec.under_challenge = true;
        rec.challenge_started_at = Some(ctx.now);
        self.pledges.insert(*id, (ctx.sender, ctx.value));
        ctx.meter.storage_writes += 2;
        Ok(Effects {
            events: vec![VaultEvent::Challenge { id: *id, challenger: ctx.sender, pledge: ctx.value, started_at: ctx.now }],
            payouts: vec![],
        })
    }

    pub fn resolve_challenge(&mut self, ctx: &mut CallContext<'_>, id: &Digest) -> Result<Effects, VaultError> {
        let rec = self.deposits.get(id).ok_or(VaultError::UnknownDeposit)?;
        if !rec.under_challenge {
            return Err(VaultError::NotChallenged);
        }
        let started = rec.challenge_started_at.expect("challenged record has a start tick");
        if ctx.now.saturating_sub(started) <= self.config.tau_w {
            return Err(VaultError::WindowNotElapsed);
        }
        let rec = self.deposits.remove(id).unwrap();
        let (challenger, pledge) = self.pledges.remove(id).expect("challenged record has a pledge");
        self.balance -= rec.value;
        ctx.meter.storage_deletes += 2;
        ctx.meter.storage_writes += 1;
        Ok(Effects {
            events: vec![VaultEvent::Refunded { id: *id, sender: rec.sender, value: rec.value, pledge_returned: pledge }],
            payouts: vec![(rec.sender, rec.value), (challenger, pledge)],
        })
    }

    pub fn respond_challenge(
        &mut self,
        ctx: &mut CallContext<'_>,
        id: &Digest,
        ms: &MultiSignature,
    ) -> Result<Effects, VaultError> {
        let digest = challenge_digest(ctx.chain_id, id);
        self.check_multisig(ctx, digest, ms)?;
        let rec = self.deposits.get(id).ok_or(VaultError::UnknownDeposit)?;
        if !rec.under_challenge {
            return Err(VaultError::NotChallenged);
        }
        self.deposits.remove(id);
        let (_, pledge) = self.pledges.remove(id).expect("challenged record has a pledge");
        self.balance += pledge;
        self.mark_executed(ctx, digest);
        ctx.meter.storage_deletes += 2;
        ctx.meter.storage_writes += 1;
        Ok(Effects {
            events: vec![VaultEvent::ChallengeResponded { id: *id, pledge_forfeited: pledge }],
            payouts: vec![],
        })
    }

    pub fn update_checkpoint(
        &mut self,
        ctx: &mut CallContext<'_>,
        ids: &[Digest],
        nonce: u64,
        ms: &MultiSignature,
    ) -> Result<Effects, VaultError> {
        let digest = checkpoint_digest(ctx.chain_id, ids, nonce);
        self.check_multisig(ctx, digest, ms)?;
        self.mark_executed(ctx, digest);
        let mut effects = Effects::default();
        for id in ids {
            match self.deposits.get(id) {
                Some(rec) if rec.under_challenge => effects.events.push(VaultEvent::CheckpointSkipped { id: *id }),
                Some(rec) => {
                    let was_confirmed = rec.confirmed;
                    self.deposits.remove(id);
                    ctx.meter.storage_deletes += 1;
                    effects.events.push(VaultEvent::Checkpointed { id: *id, was_confirmed });
                }
                None => {}
            }
        }
        Ok(effects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPair, Manufacturer};

    struct Fixture {
        vault: VaultState,
        keys: Vec<KeyPair>,
        recent: Vec<Digest>,
        meter: CostMeter,
    }

    const CHAIN: ChainId = ChainId::SOURCE;

    impl Fixture {
        fn new(n: usize) -> Self {
            let maker = Manufacturer::new(b"test");
            let prog = hash(b"prog");
            let deployer = Address::named("deployer");
            let mut f = Fixture {
                vault: VaultState::new(VaultConfig {
                    program_digest: prog,
                    manufacturer_root: maker.root_public_key(),
                    deployer,
                    lag_bound: 4,
                    tau_w: 10,
                    pledge_floor: 5,
                    pledge_bps: 100,
                }),
                keys: (0..n).map(|i| KeyPair::from_seed(format!("op{i}").as_bytes())).collect(),
                recent: (0..10u64).map(|h| hash(&h.to_le_bytes())).collect(),
                meter: CostMeter::default(),
            };
            for (i, kp) in f.keys.clone().iter().enumerate() {
                let quote = maker.attest(crate::crypto::EnclaveId(i as u64), prog, kp.public_key);
                let proof = f.proof(kp, 9);
                f.call(Address::named("host"), 0, 0, &VaultCall::Register { quote, block_proof: proof, pk: kp.public_key })
                    .unwrap();
            }
            f.call(deployer, 0, 0, &VaultCall::CloseRegistration).unwrap();
            f.call(Address::named("lp"), 1_000_000, 0, &VaultCall::FundLiquidity).unwrap();
            f
        }

        fn proof(&self, kp: &KeyPair, height: usize) -> SignedHeaderRef {
            let d = self.recent[height];
            SignedHeaderRef {
                chain_id: CHAIN,
                height: height as u64,
                header_digest: d,
                signature: kp.sign(&SignedHeaderRef::message(CHAIN, height as u64, &d)),
            }
        }

        fn call(&mut self, sender: Address, value: Amount, now: Tick, call: &VaultCall) -> Result<Effects, VaultError> {
            self.meter = CostMeter::default();
            let mut ctx = CallContext {
                chain_id: CHAIN,
                now,
                sender,
                value,
                recent_headers: &self.recent,
                meter: &mut self.meter,
            };
            self.vault.execute(call, &mut ctx)
        }

        fn sign(&self, digest: Digest, signers: &[usize]) -> MultiSignature {
            MultiSignature::new(digest, self.vault.threshold, signers.iter().map(|&i| self.keys[i].sign(&digest.0)))
        }

        fn deposit(&mut self, who: &str, v: Amount, now: Tick) -> Digest {
            let e = self.call(Address::named(who), v, now, &VaultCall::Deposit).unwrap();
            match &e.events[0] {
                VaultEvent::Deposit { id, .. } => *id,
                _ => unreachable!(),
            }
        }

        fn challenge(&mut self, id: Digest, v: Amount, now: Tick) -> Result<Effects, VaultError> {
            let recorded = self.vault.deposits.get(&id).map_or(v, |r| r.value);
            let pledge = self.vault.required_pledge(recorded);
            self.call(Address::named("challenger"), pledge, now, &VaultCall::StartChallenge { id, value: v })
        }
    }

    #[test]
    fn threshold_is_majority() {
        for n in [1usize, 3, 5, 7] {
            let f = Fixture::new(n);
            assert_eq!(f.vault.threshold, n / 2 + 1);
        }
    }

    #[test]
    fn deposit_id_and_guards() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 1, 10);
        assert_eq!(id, deposit_id(&Address::named("alice"), 1, 10));
        assert!(!f.vault.deposits[&id].under_challenge);
        assert_eq!(f.call(Address::named("alice"), 0, 10, &VaultCall::Deposit), Err(VaultError::ZeroValue));
        assert_eq!(f.call(Address::named("alice"), 1, 10, &VaultCall::Deposit), Err(VaultError::IdCollision));
        let later = f.deposit("alice", 1, 11);
        assert_ne!(id, later);
    }

    #[test]
    fn registration_guards() {
        let maker = Manufacturer::new(b"test");
        let mut f = Fixture::new(3);
        f.vault.registration_open = true;
        let kp = KeyPair::from_seed(b"late");
        let quote = maker.attest(crate::crypto::EnclaveId(9), f.vault.config.program_digest, kp.public_key);
        // k = 4: heights 6..=9 are acceptable, 5 is one too old.
        let stale = f.proof(&kp, 5);
        let r = f.call(Address::named("h"), 0, 0, &VaultCall::Register { quote: quote.clone(), block_proof: stale, pk: kp.public_key });
        assert_eq!(r, Err(VaultError::StaleBlockProof));
        let bad_quote = maker.attest(crate::crypto::EnclaveId(9), hash(b"wrong prog"), kp.public_key);
        let proof = f.proof(&kp, 6);
        let r = f.call(Address::named("h"), 0, 0, &VaultCall::Register { quote: bad_quote, block_proof: proof.clone(), pk: kp.public_key });
        assert_eq!(r, Err(VaultError::InvalidQuote));
        f.call(Address::named("h"), 0, 0, &VaultCall::Register { quote: quote.clone(), block_proof: proof.clone(), pk: kp.public_key })
            .unwrap();
        let r = f.call(Address::named("h"), 0, 0, &VaultCall::Register { quote, block_proof: proof, pk: kp.public_key });
        assert_eq!(r, Err(VaultError::DuplicateOperator));
    }

    #[test]
    fn transfer_batch_meters_one_verification() {
        let mut f = Fixture::new(3);
        let body = TransferBatchBody {
            target_chain: CHAIN,
            transfers: (0..20)
                .map(|i| TransferItem { receiver: Address::named(&format!("r{i}")), amount: 10, deposit_id: hash(&[i]) })
                .collect(),
            valid_until: 100,
            nonce: 1,
        };
        let batch = TransferBatch { multisig: f.sign(body.digest(), &[0, 2]), body: body.clone() };
        let e = f.call(Address::named("host"), 0, 5, &VaultCall::Transfer { batch }).unwrap();
        assert_eq!(e.payouts.len(), 20);
        assert_eq!(f.meter.sig_verifications, 1);
        assert_eq!(f.meter.storage_writes, 20 + 2);

        let below = TransferBatch { multisig: f.sign(body.digest(), &[1]), body: TransferBatchBody { nonce: 2, ..body.clone() } };
        let below = TransferBatch { multisig: f.sign(below.body.digest(), &[1]), ..below };
        assert_eq!(f.call(Address::named("host"), 0, 5, &VaultCall::Transfer { batch: below }), Err(VaultError::ThresholdNotMet));
    }

    #[test]
    fn transfer_over_balance_reverts_atomically() {
        let mut f = Fixture::new(3);
        let body = TransferBatchBody {
            target_chain: CHAIN,
            transfers: vec![
                TransferItem { receiver: Address::named("a"), amount: 600_000, deposit_id: hash(b"1") },
                TransferItem { receiver: Address::named("b"), amount: 600_000, deposit_id: hash(b"2") },
            ],
            valid_until: 100,
            nonce: 1,
        };
        let batch = TransferBatch { multisig: f.sign(body.digest(), &[0, 1]), body };
        let before = f.vault.clone();
        assert!(matches!(
            f.call(Address::named("h"), 0, 1, &VaultCall::Transfer { batch }),
            Err(VaultError::InsufficientVaultBalance { .. })
        ));
        assert_eq!(f.vault, before);
    }

    #[test]
    fn expired_batch_reverts() {
        let mut f = Fixture::new(3);
        let body = TransferBatchBody {
            target_chain: CHAIN,
            transfers: vec![TransferItem { receiver: Address::named("a"), amount: 1, deposit_id: hash(b"1") }],
            valid_until: 10,
            nonce: 1,
        };
        let batch = TransferBatch { multisig: f.sign(body.digest(), &[0, 1]), body };
        assert_eq!(
            f.call(Address::named("h"), 0, 11, &VaultCall::Transfer { batch: batch.clone() }),
            Err(VaultError::BatchExpired(10))
        );
        f.call(Address::named("h"), 0, 10, &VaultCall::Transfer { batch }).unwrap();
    }

    #[test]
    fn confirmed_deposit_cannot_be_challenged() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 100, 1);
        let ms = f.sign(confirm_digest(CHAIN, &[id], 1), &[0, 1]);
        f.call(Address::named("h"), 0, 2, &VaultCall::Confirm { ids: vec![id], nonce: 1, multisig: ms }).unwrap();
        assert_eq!(f.challenge(id, 100, 3), Err(VaultError::AlreadyConfirmed));

        let id2 = f.deposit("bob", 100, 1);
        let weak = f.sign(confirm_digest(CHAIN, &[id2], 2), &[0]);
        assert_eq!(
            f.call(Address::named("h"), 0, 2, &VaultCall::Confirm { ids: vec![id2], nonce: 2, multisig: weak }),
            Err(VaultError::ThresholdNotMet)
        );
    }

    #[test]
    fn confirm_voids_active_challenge_and_refunds_pledge() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 1000, 1);
        f.challenge(id, 1000, 2).unwrap();
        let ms = f.sign(confirm_digest(CHAIN, &[id, hash(b"unknown")], 7), &[1, 2]);
        let e = f
            .call(Address::named("h"), 0, 3, &VaultCall::Confirm { ids: vec![id, hash(b"unknown")], nonce: 7, multisig: ms })
            .unwrap();
        assert_eq!(e.payouts, vec![(Address::named("challenger"), 10)]);
        let rec = &f.vault.deposits[&id];
        assert!(rec.confirmed && !rec.under_challenge);
        assert!(f.vault.pledges.is_empty());
    }

    #[test]
    fn challenge_guards() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 1000, 1);
        assert!(matches!(
            f.call(Address::named("c"), 9, 2, &VaultCall::StartChallenge { id, value: 1000 }),
            Err(VaultError::PledgeTooSmall { given: 9, required: 10 })
        ));
        assert_eq!(f.challenge(id, 999, 2), Err(VaultError::ValueMismatch));
        let e = f.challenge(id, 1000, 2).unwrap();
        assert!(matches!(e.events[0], VaultEvent::Challenge { started_at: 2, .. }));
        assert_eq!(f.challenge(id, 1000, 3), Err(VaultError::AlreadyChallenged));
    }

    #[test]
    fn resolve_uses_strict_window() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 1000, 1);
        f.challenge(id, 1000, 5).unwrap();
        // tau_w = 10
        assert_eq!(f.call(Address::named("x"), 0, 14, &VaultCall::ResolveChallenge { id }), Err(VaultError::WindowNotElapsed));
        assert_eq!(f.call(Address::named("x"), 0, 15, &VaultCall::ResolveChallenge { id }), Err(VaultError::WindowNotElapsed));
        let e = f.call(Address::named("x"), 0, 16, &VaultCall::ResolveChallenge { id }).unwrap();
        assert_eq!(e.payouts, vec![(Address::named("alice"), 1000), (Address::named("challenger"), 10)]);
        assert!(f.vault.deposits.is_empty());
        let other = f.deposit("bob", 5, 20);
        assert_eq!(f.call(Address::named("x"), 0, 40, &VaultCall::ResolveChallenge { id: other }), Err(VaultError::NotChallenged));
    }

    #[test]
    fn respond_forfeits_pledge() {
        let mut f = Fixture::new(3);
        let id = f.deposit("alice", 1000, 1);
        f.challenge(id, 1000, 2).unwrap();
        let balance = f.vault.balance;
        let weak = f.sign(challenge_digest(CHAIN, &id), &[2]);
        assert_eq!(
            f.call(Address::named("h"), 0, 3, &VaultCall::RespondChallenge { id, multisig: weak }),
            Err(VaultError::ThresholdNotMet)
        );
        let ms = f.sign(challenge_digest(CHAIN, &id), &[0, 2]);
        f.call(Address::named("h"), 0, 3, &VaultCall::RespondChallenge { id, multisig: ms.clone() }).unwrap();
        assert_eq!(f.vault.balance, balance + 10);
        assert!(!f.vault.deposits.contains_key(&id));
        assert_eq!(f.call(Address::named("c"), 0, 30, &VaultCall::ResolveChallenge { id }), Err(VaultError::UnknownDeposit));
    }

    #[test]
    fn checkpoint_skips_challenged_ids() {
        let mut f = Fixture::new(3);
        let ids: Vec<_> = (0..5).map(|i| f.deposit(&format!("c{i}"), 100, 1)).collect();
        f.challenge(ids[2], 100, 2).unwrap();
        let ms = f.sign(checkpoint_digest(CHAIN, &ids, 1), &[0, 1]);
        f.call(Address::named("h"), 0, 3, &VaultCall::UpdateCheckpoint { ids: ids.clone(), nonce: 1, multisig: ms }).unwrap();
        assert_eq!(f.meter.storage_deletes, 4);
        assert_eq!(f.meter.sig_verifications, 1);
        assert_eq!(f.vault.deposits.keys().copied().collect::<Vec<_>>(), vec![ids[2]]);
        assert_eq!(f.challenge(ids[0], 100, 4), Err(VaultError::UnknownDeposit));

        let empty = f.sign(checkpoint_digest(CHAIN, &[], 2), &[0, 1]);
        f.call(Address::named("h"), 0, 3, &VaultCall::UpdateCheckpoint { ids: vec![], nonce: 2, multisig: empty }).unwrap();
    }

    #[test]
    fn replayed_payload_rejected() {
        let mut f = Fixture::new(3);
        let ms = f.sign(checkpoint_digest(CHAIN, &[], 1), &[0, 1]);
        let call = VaultCall::UpdateCheckpoint { ids: vec![], nonce: 1, multisig: ms };
        f.call(Address::named("h"), 0, 3, &call).unwrap();
        assert_eq!(f.call(Address::named("h"), 0, 4, &call), Err(VaultError::AlreadyExecuted));
    }
}
