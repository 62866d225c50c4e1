//! Simulated trusted execution and the exchange program it runs.
//!
//! A [`Tee`] installs programs and runs them on host-supplied inputs. The
//! host decides what reaches the enclave and what leaves it (see
//! [`HostFilter`]) and may suspend it, but it cannot read enclave keys or
//! alter enclave logic. An installed [`Enclave`] is a sequential reactor:
//! each [`EnclaveInput`] yields a list of [`EnclaveOutput`]s that depend only
//! on the enclave state and the input.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::{FeeShare, Pool};
use crate::chain::{BlockHeader, Call, ChainMode, Event, Receipt, SyncCommittee};
use crate::consensus::{
    batch_transfers, LogEntry, Payload, RaftConfig, RaftEnvelope, RaftNode, SignatureShareSet, TransferIntent,
};
use crate::crypto::{hash, AttestationQuote, Digest, EnclaveId, KeyPair, Manufacturer, MultiSignature, PublicKey, Signature};
use crate::encoding::Encoder;
use crate::htlc::{build_pair, HtlcCall, HtlcEvent, HtlcLock, HtlcRequest, Preimage};
use crate::lightclient::{InclusionProof, InclusionStatus, LightClientParams, LightClientState};
use crate::merkle;
use crate::types::{Address, Amount, ChainId, Tick};
use crate::vault::{
    challenge_digest, checkpoint_digest, confirm_digest, SignedHeaderRef, TransferBatch, TransferBatchBody, TransferItem,
    VaultCall, VaultEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageClass {
    ClientRequest,
    Raft,
    ChainHeader,
    ChainEvent,
    ChainSubmission,
    ClientResponse,
}

impl MessageClass {
    pub const ALL: [MessageClass; 6] = [
        MessageClass::ClientRequest,
        MessageClass::Raft,
        MessageClass::ChainHeader,
        MessageClass::ChainEvent,
        MessageClass::ChainSubmission,
        MessageClass::ClientResponse,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostAction {
    Deliver,
    Drop,
    Delay(Tick),
    /// Deliver, then deliver again this many extra times.
    Replay(u32),
}

/// What a possibly malicious operator does to its enclave's traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostFilter {
    policies: BTreeMap<MessageClass, HostAction>,
    pub available: bool,
}

impl Default for HostFilter {
    fn default() -> Self {
        HostFilter { policies: BTreeMap::new(), available: true }
    }
}

impl HostFilter {
    pub fn action(&self, class: MessageClass) -> HostAction {
        self.policies.get(&class).copied().unwrap_or(HostAction::Deliver)
    }

    pub fn set(&mut self, class: MessageClass, action: HostAction) {
        if action == HostAction::Deliver {
            self.policies.remove(&class);
        } else {
            self.policies.insert(class, action);
        }
    }

    pub fn set_all(&mut self, action: HostAction) {
        for c in MessageClass::ALL {
            self.set(c, action);
        }
    }

    pub fn is_honest(&self) -> bool {
        self.available && self.policies.is_empty()
    }
}

/// Parameters of the exchange program. Their digest is the program digest
/// that attestation binds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramConfig {
    pub source_chain: ChainId,
    pub target_chain: ChainId,
    pub source_mode: ChainMode,
    pub fee_per_tx: Amount,
    pub fee_share: FeeShare,
    /// Initial liquidity: (provider, source amount, target amount).
    pub liquidity: Vec<(Address, Amount, Amount)>,
    pub tau_w: Tick,
    /// Transfers must execute this long before a refund could first happen.
    pub confirm_margin: Tick,
    /// Transfers per on-chain batch.
    pub max_batch: usize,
    /// Intents the leader takes into consensus per tick.
    pub raft_batch_size: usize,
    /// Ticks the leader waits to fill a batch.
    pub batch_wait: Tick,
    pub checkpoint_batch_size: usize,
    /// Ticks after which a partial checkpoint is proposed; 0 disables.
    pub checkpoint_period: Tick,
    /// Ticks a request may wait for its deposit block to be verified.
    pub park_ticks: Tick,
    pub resubmit_after: Tick,
    /// Reverted executions of one decision before the enclave gives up on it.
    pub max_reverts: u32,
    pub share_rebroadcast: Tick,
    pub htlc_timeout: Tick,
    pub htlc_margin: Tick,
    pub htlc_claim_address: Address,
    pub raft: RaftConfig,
    pub lag_bound: usize,
    pub target_finality: Tick,
    /// Ticks from proposal to a submitted transfer in the fault-free case.
    pub exec_slack: Tick,
}

impl ProgramConfig {
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::new("exchange-program");
        enc.bytes(&serde_json::to_vec(self).expect("program serializes"));
        enc.to_digest()
    }

    pub fn initial_pool(&self) -> Pool {
        let mut pool = Pool::new(self.fee_share, self.fee_per_tx);
        for (lp, x, y) in &self.liquidity {
            pool.add_liquidity(*lp, *x, *y).expect("initial liquidity is in ratio");
        }
        pool
    }
}

/// A client's signed request to exchange a finalized deposit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub deposit_id: Digest,
    pub sender: Address,
    pub value: Amount,
    pub target_chain: ChainId,
    pub receiver: Address,
    pub client_key: PublicKey,
    pub signature: Signature,
}

impl ExchangeRequest {
    fn signing_bytes(
        deposit_id: &Digest,
        sender: &Address,
        value: Amount,
        target_chain: ChainId,
        receiver: &Address,
    ) -> Vec<u8> {
        let mut enc = Encoder::new("exchange-request");
        enc.digest(deposit_id).bytes(&sender.0).u64(value).u64(target_chain.0 as u64).bytes(&receiver.0);
        enc.finish()
    }

    pub fn new(
        deposit_id: Digest,
        value: Amount,
        target_chain: ChainId,
        receiver: Address,
        client: &KeyPair,
    ) -> Self {
        let sender = Address::of_key(&client.public_key);
        let signature = client.sign(&Self::signing_bytes(&deposit_id, &sender, value, target_chain, &receiver));
        ExchangeRequest { deposit_id, sender, value, target_chain, receiver, client_key: client.public_key, signature }
    }

    pub fn verify(&self) -> bool {
        Address::of_key(&self.client_key) == self.sender
            && crate::crypto::verify(
                &Self::signing_bytes(&self.deposit_id, &self.sender, self.value, self.target_chain, &self.receiver),
                &self.signature,
                &self.client_key,
            )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedHtlcRequest {
    pub request: HtlcRequest,
    pub client_key: PublicKey,
    pub signature: Signature,
}

impl SignedHtlcRequest {
    pub fn new(request: HtlcRequest, client: &KeyPair) -> Self {
        let signature = client.sign(&request.id().0);
        SignedHtlcRequest { request, client_key: client.public_key, signature }
    }

    pub fn verify(&self) -> bool {
        Address::of_key(&self.client_key) == self.request.client
            && crate::crypto::verify(&self.request.id().0, &self.signature, &self.client_key)
    }
}

/// One operator's signature over a committed decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareMessage {
    pub index: u64,
    pub chain: ChainId,
    pub digest: Digest,
    pub share: Signature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum RequestRejection {
    #[error("request signature invalid")]
    BadSignature,
    #[error("request targets an unsupported chain")]
    WrongTarget,
    #[error("deposit already used by a request")]
    Duplicate,
    #[error("no inclusion proof supplied")]
    NoProof,
    #[error("deposit not included in the claimed block")]
    NotIncluded,
    #[error("request does not match the on-chain deposit")]
    Mismatch,
    #[error("deposit does not cover the fee")]
    TooSmall,
    #[error("deposit block not verified in time")]
    ParkTimeout,
    #[error("deposit too old to transfer safely")]
    Expired,
    #[error("pool cannot price the deposit")]
    Unpriceable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientResponse {
    Accepted { deposit_id: Digest },
    Rejected { deposit_id: Digest, reason: RequestRejection },
    HtlcTerms { request_id: Digest, lock: HtlcLock },
    Completed { deposit_id: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EnclaveInput {
    Tick,
    ClientRequest { request: ExchangeRequest, proof: Option<InclusionProof> },
    HtlcRequest { request: SignedHtlcRequest },
    Raft { envelope: RaftEnvelope },
    Share { share: ShareMessage },
    Header { chain: ChainId, header: BlockHeader, following: Option<SyncCommittee> },
    Block { chain: ChainId, height: u64, receipts: Vec<Receipt> },
}

impl EnclaveInput {
    pub fn class(&self) -> Option<MessageClass> {
        match self {
            EnclaveInput::Tick => None,
            EnclaveInput::ClientRequest { .. } | EnclaveInput::HtlcRequest { .. } => Some(MessageClass::ClientRequest),
            EnclaveInput::Raft { .. } | EnclaveInput::Share { .. } => Some(MessageClass::Raft),
            EnclaveInput::Header { .. } => Some(MessageClass::ChainHeader),
            EnclaveInput::Block { .. } => Some(MessageClass::ChainEvent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EnclaveOutput {
    Raft { envelope: RaftEnvelope },
    /// Broadcast to every peer.
    Share { share: ShareMessage },
    Submit { chain: ChainId, call: Call },
    ClientResponse { client: Address, response: ClientResponse },
}

impl EnclaveOutput {
    pub fn class(&self) -> MessageClass {
        match self {
            EnclaveOutput::Raft { .. } | EnclaveOutput::Share { .. } => MessageClass::Raft,
            EnclaveOutput::Submit { .. } => MessageClass::ChainSubmission,
            EnclaveOutput::ClientResponse { .. } => MessageClass::ClientResponse,
        }
    }
}

/// A protocol action that needs an operator multisig.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Decision {
    Transfer { body: TransferBatchBody },
    Confirm { ids: Vec<Digest>, nonce: u64 },
    Respond { id: Digest },
    Checkpoint { ids: Vec<Digest>, nonce: u64 },
    HtlcTransfer { request: HtlcRequest, lock: HtlcLock, body: TransferBatchBody },
}

impl Decision {
    pub fn chain(&self, program: &ProgramConfig) -> ChainId {
        match self {
            Decision::Transfer { body } | Decision::HtlcTransfer { body, .. } => body.target_chain,
            _ => program.source_chain,
        }
    }

    pub fn digest(&self, program: &ProgramConfig) -> Digest {
        let s = program.source_chain;
        match self {
            Decision::Transfer { body } | Decision::HtlcTransfer { body, .. } => body.digest(),
            Decision::Confirm { ids, nonce } => confirm_digest(s, ids, *nonce),
            Decision::Respond { id } => challenge_digest(s, id),
            Decision::Checkpoint { ids, nonce } => checkpoint_digest(s, ids, *nonce),
        }
    }

    pub fn call(&self, multisig: MultiSignature) -> Call {
        Call::Vault(match self {
            Decision::Transfer { body } | Decision::HtlcTransfer { body, .. } => {
                VaultCall::Transfer { batch: TransferBatch { body: body.clone(), multisig } }
            }
            Decision::Confirm { ids, nonce } => VaultCall::Confirm { ids: ids.clone(), nonce: *nonce, multisig },
            Decision::Respond { id } => VaultCall::RespondChallenge { id: *id, multisig },
            Decision::Checkpoint { ids, nonce } => VaultCall::UpdateCheckpoint { ids: ids.clone(), nonce: *nonce, multisig },
        })
    }
}

/// State every enclave derives from the committed log alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeState {
    pub pool: Pool,
    /// Deposit id to the log index of the batch that carries it.
    pub batched: BTreeMap<Digest, u64>,
    pub confirm_decided: BTreeSet<Digest>,
    pub responded: BTreeSet<Digest>,
    pub checkpointed: BTreeSet<Digest>,
    pub htlc_requests: BTreeSet<Digest>,
}

impl ExchangeState {
    pub fn new(program: &ProgramConfig) -> Self {
        ExchangeState {
            pool: program.initial_pool(),
            batched: BTreeMap::new(),
            confirm_decided: BTreeSet::new(),
            responded: BTreeSet::new(),
            checkpointed: BTreeSet::new(),
            htlc_requests: BTreeSet::new(),
        }
    }

    /// Applies one committed entry. Items already decided elsewhere in the
    /// log and trades whose quote no longer holds are dropped, so the
    /// resulting decision may be smaller than the proposal.
    pub fn apply(
        &mut self,
        entry: &LogEntry,
        program: &ProgramConfig,
        hash_lock: &dyn Fn(&HtlcRequest) -> Preimage,
    ) -> Option<Decision> {
        match &entry.payload {
            Payload::Noop => None,
            Payload::Transfers { target_chain, intents } => {
                let mut items = Vec::new();
                let mut valid_until = Tick::MAX;
                for it in intents {
                    if self.batched.contains_key(&it.deposit_id) {
                        continue;
                    }
                    if self.pool.apply_quoted(it.input, it.amount).is_err() {
                        continue;
                    }
                    self.batched.insert(it.deposit_id, entry.index);
                    valid_until = valid_until.min(transfer_deadline(program, it.deposit_timestamp));
                    items.push(TransferItem { receiver: it.receiver, amount: it.amount, deposit_id: it.deposit_id });
                }
                (!items.is_empty()).then(|| Decision::Transfer {
                    body: TransferBatchBody { target_chain: *target_chain, transfers: items, valid_until, nonce: entry.index },
                })
            }
            Payload::Confirm { ids } => {
                let ids: Vec<Digest> = ids.iter().filter(|id| self.confirm_decided.insert(**id)).copied().collect();
                (!ids.is_empty()).then_some(Decision::Confirm { ids, nonce: entry.index })
            }
            Payload::ChallengeResponse { id } => self.responded.insert(*id).then_some(Decision::Respond { id: *id }),
            Payload::Checkpoint { ids } => {
                let ids: Vec<Digest> = ids.iter().filter(|id| self.checkpointed.insert(**id)).copied().collect();
                (!ids.is_empty()).then_some(Decision::Checkpoint { ids, nonce: entry.index })
            }
            Payload::HtlcPair { request, input, amount, deadline } => {
                let rid = request.id();
                if self.htlc_requests.contains(&rid) || self.pool.apply_quoted(*input, *amount).is_err() {
                    return None;
                }
                self.htlc_requests.insert(rid);
                let (lock, item) = build_pair(request, &hash_lock(request), *deadline, program.htlc_claim_address, *amount);
                let body = TransferBatchBody {
                    target_chain: program.target_chain,
                    transfers: vec![item],
                    valid_until: deadline.saturating_sub(program.htlc_margin),
                    nonce: entry.index,
                };
                Some(Decision::HtlcTransfer { request: request.clone(), lock, body })
            }
        }
    }
}

/// Last tick at which the transfer for a deposit made at `deposit_timestamp`
/// may execute.
pub fn transfer_deadline(program: &ProgramConfig, deposit_timestamp: Tick) -> Tick {
    (deposit_timestamp + program.tau_w).saturating_sub(program.confirm_margin)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PendingRequest {
    deposit_id: Digest,
    value: Amount,
    timestamp: Tick,
    receiver: Address,
    target_chain: ChainId,
    client: Address,
    accepted_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Parked {
    request: ExchangeRequest,
    proof: InclusionProof,
    since: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DecisionState {
    decision: Decision,
    chain: ChainId,
    digest: Digest,
    shares: SignatureShareSet,
    own_share: Option<Signature>,
    last_share_broadcast: Tick,
    last_submit: Option<Tick>,
}

/// Facts the enclave has verified from finalized blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observations {
    pub deposits: BTreeMap<Digest, (Address, Amount, Tick)>,
    /// Deposit (or HTLC request) id to the height of its finalized transfer.
    pub transfers_final: BTreeMap<Digest, u64>,
    pub active_challenges: BTreeMap<Digest, Tick>,
    pub confirmed: BTreeSet<Digest>,
    /// Deposits removed from the source vault.
    pub closed: BTreeSet<Digest>,
    pub settled_payloads: BTreeSet<Digest>,
    pub reverted_payloads: BTreeMap<Digest, u32>,
    pub locks: BTreeMap<Digest, HtlcLock>,
    pub locks_settled: BTreeSet<Digest>,
    pub chain_time: BTreeMap<ChainId, Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub operators: Vec<PublicKey>,
    pub threshold: usize,
}

#[derive(Debug, Clone)]
pub struct Enclave {
    eid: EnclaveId,
    program: ProgramConfig,
    program_digest: Digest,
    keys: BTreeMap<ChainId, KeyPair>,
    group_secret: [u8; 32],
    light_clients: BTreeMap<ChainId, LightClientState>,
    processed: BTreeMap<ChainId, u64>,
    membership: BTreeMap<ChainId, Membership>,
    raft: Option<RaftNode>,
    state: ExchangeState,
    mempool: Vec<PendingRequest>,
    htlc_mempool: Vec<HtlcRequest>,
    parked: Vec<Parked>,
    seen_requests: BTreeMap<Digest, Address>,
    obs: Observations,
    decisions: BTreeMap<u64, DecisionState>,
    early_shares: BTreeMap<u64, Vec<ShareMessage>>,
    claims: BTreeMap<Digest, Tick>,
    /// Hash lock to the committed HTLC request it belongs to.
    htlc_terms: BTreeMap<Digest, HtlcRequest>,
    /// Deposit ids this enclave put into transfer intents as leader.
    intents_created: Vec<Digest>,
    last_checkpoint: Tick,
    last_tick: Tick,
    completed_notified: BTreeSet<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("light client bootstrap failed on {0:?}: {1}")]
    Bootstrap(ChainId, crate::lightclient::BootstrapError),
    #[error("no key for chain {0:?}")]
    NoKey(ChainId),
}

impl Enclave {
    fn new(eid: EnclaveId, program: ProgramConfig, platform_seed: &[u8], group_secret: [u8; 32]) -> Self {
        let mut keys = BTreeMap::new();
        let chains = [program.source_chain, program.target_chain];
        for chain in chains {
            let mut enc = Encoder::new("enclave-key");
            enc.bytes(platform_seed).u64(eid.0).u64(chain.0 as u64);
            keys.insert(chain, KeyPair::from_seed(enc.as_bytes()));
        }
        Enclave {
            eid,
            program_digest: program.digest(),
            state: ExchangeState::new(&program),
            program,
            keys,
            group_secret,
            light_clients: BTreeMap::new(),
            processed: BTreeMap::new(),
            membership: BTreeMap::new(),
            raft: None,
            mempool: Vec::new(),
            htlc_mempool: Vec::new(),
            parked: Vec::new(),
            seen_requests: BTreeMap::new(),
            obs: Observations::default(),
            decisions: BTreeMap::new(),
            early_shares: BTreeMap::new(),
            claims: BTreeMap::new(),
            htlc_terms: BTreeMap::new(),
            intents_created: Vec::new(),
            last_checkpoint: 0,
            last_tick: 0,
            completed_notified: BTreeSet::new(),
        }
    }

    pub fn eid(&self) -> EnclaveId {
        self.eid
    }

    pub fn program(&self) -> &ProgramConfig {
        &self.program
    }

    pub fn program_digest(&self) -> Digest {
        self.program_digest
    }

    pub fn public_key(&self, chain: ChainId) -> Option<PublicKey> {
        self.keys.get(&chain).map(|k| k.public_key)
    }

    /// Canonical encodings of every secret the enclave holds, for leak scans.
    pub fn secret_fingerprints(&self) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = self.keys.values().map(|k| k.secret_key().canonical_bytes().to_vec()).collect();
        out.push(self.group_secret.to_vec());
        out
    }

    pub fn light_client(&self, chain: ChainId) -> Option<&LightClientState> {
        self.light_clients.get(&chain)
    }

    /// Height up to which block data has been processed.
    pub fn processed_height(&self, chain: ChainId) -> u64 {
        self.processed.get(&chain).copied().unwrap_or(0)
    }

    pub fn raft(&self) -> Option<&RaftNode> {
        self.raft.as_ref()
    }

    pub fn state(&self) -> &ExchangeState {
        &self.state
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn membership(&self, chain: ChainId) -> Option<&Membership> {
        self.membership.get(&chain)
    }

    pub fn intents_created(&self) -> &[Digest] {
        &self.intents_created
    }

    pub fn pending_requests(&self) -> usize {
        self.mempool.len() + self.parked.len() + self.htlc_mempool.len()
    }

    /// Synchronizes with `chain` from its latest finalized headers and
    /// returns the signed tip reference used for registration.
    pub fn bootstrap(
        &mut self,
        params: LightClientParams,
        headers: &[BlockHeader],
        current: SyncCommittee,
        next: SyncCommittee,
        block_data: &[Vec<Receipt>],
    ) -> Result<SignedHeaderRef, EnclaveError> {
        let chain = params.chain_id;
        let key = self.keys.get(&chain).ok_or(EnclaveError::NoKey(chain))?;
        let (lc, proof) = LightClientState::bootstrap(params, headers, current, next, block_data, key)
            .map_err(|e| EnclaveError::Bootstrap(chain, e))?;
        self.processed.insert(chain, lc.tip().height);
        self.obs.chain_time.insert(chain, lc.tip().timestamp);
        self.light_clients.insert(chain, lc);
        Ok(proof)
    }

    fn preimage(&self, request: &HtlcRequest) -> Preimage {
        let mut enc = Encoder::new("htlc-preimage");
        enc.bytes(&self.group_secret).digest(&request.id());
        Preimage(enc.to_digest().0)
    }

    fn raft_key(&self) -> &KeyPair {
        &self.keys[&self.program.target_chain]
    }

    /// Processes one input.
    pub fn step(&mut self, input: EnclaveInput, now: Tick) -> Vec<EnclaveOutput> {
        let mut out = Vec::new();
        match input {
            EnclaveInput::Tick => self.on_tick(now, &mut out),
            EnclaveInput::ClientRequest { request, proof } => self.handle_request(request, proof, now, &mut out),
            EnclaveInput::HtlcRequest { request } => self.handle_htlc_request(request, &mut out),
            EnclaveInput::Raft { envelope } => self.on_raft(envelope, now, &mut out),
            EnclaveInput::Share { share } => self.on_share(share),
            EnclaveInput::Header { chain, header, following } => {
                if let Some(lc) = self.light_clients.get_mut(&chain) {
                    if lc.ingest_header(&header, following.as_ref()).is_ok() {
                        self.obs.chain_time.insert(chain, header.timestamp);
                    }
                }
            }
            EnclaveInput::Block { chain, height, receipts } => self.on_block(chain, height, receipts, now, &mut out),
        }
        self.drain_committed(now, &mut out);
        out
    }

    fn on_tick(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        if now > self.last_tick + 1 {
            // Suspended in between: give the current leader a chance first.
            if let Some(r) = self.raft.as_mut() {
                r.reset_election_timer(now);
            }
        }
        self.last_tick = now;
        if let Some(r) = self.raft.as_mut() {
            let msgs = r.tick(now);
            self.send_raft(msgs, out);
        }
        self.retry_parked(now, out);
        self.drain_committed(now, out);
        self.lead(now, out);
        self.drive_decisions(now, out);
        self.drive_claims(now, out);
    }

    fn send_raft(&self, msgs: Vec<(usize, crate::consensus::RaftMessage)>, out: &mut Vec<EnclaveOutput>) {
        let Some(r) = self.raft.as_ref() else { return };
        for (to, m) in msgs {
            out.push(EnclaveOutput::Raft { envelope: RaftEnvelope::seal(r.me(), to, m, self.raft_key()) });
        }
    }

    fn on_raft(&mut self, env: RaftEnvelope, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let Some(members) = self.membership.get(&self.program.target_chain) else { return };
        let Some(r) = self.raft.as_mut() else { return };
        if env.to != r.me() || env.from >= members.operators.len() || !env.verify(&members.operators[env.from]) {
            return;
        }
        let msgs = r.handle(env.from, env.message, now);
        self.send_raft(msgs, out);
    }

    fn on_share(&mut self, msg: ShareMessage) {
        let Some(members) = self.membership.get(&msg.chain) else { return };
        match self.decisions.get_mut(&msg.index) {
            Some(ds) if ds.digest == msg.digest && ds.chain == msg.chain => {
                ds.shares.add(msg.share, &members.operators);
            }
            Some(_) => {}
            None => {
                let applied = self.raft.as_ref().map_or(0, |r| r.last_applied());
                if msg.index > applied {
                    let buf = self.early_shares.entry(msg.index).or_default();
                    if buf.len() < 4 * members.operators.len() && !buf.contains(&msg) {
                        buf.push(msg);
                    }
                }
            }
        }
    }

    /// Verifies a client's exchange request against the finalized deposit.
    pub fn handle_request(
        &mut self,
        request: ExchangeRequest,
        proof: Option<InclusionProof>,
        now: Tick,
        out: &mut Vec<EnclaveOutput>,
    ) {
        let id = request.deposit_id;
        let reject = |out: &mut Vec<EnclaveOutput>, reason| {
            out.push(EnclaveOutput::ClientResponse {
                client: request.sender,
                response: ClientResponse::Rejected { deposit_id: id, reason },
            })
        };
        if !request.verify() {
            return reject(out, RequestRejection::BadSignature);
        }
        if request.target_chain != self.program.target_chain || self.program.source_mode != ChainMode::Contract {
            return reject(out, RequestRejection::WrongTarget);
        }
        if self.seen_requests.contains_key(&id)
            || self.state.batched.contains_key(&id)
            || self.parked.iter().any(|p| p.request.deposit_id == id)
        {
            return reject(out, RequestRejection::Duplicate);
        }
        let Some(proof) = proof else {
            return reject(out, RequestRejection::NoProof);
        };
        self.verify_deposit(request, proof, now, now, out);
    }

    fn verify_deposit(
        &mut self,
        request: ExchangeRequest,
        proof: InclusionProof,
        since: Tick,
        now: Tick,
        out: &mut Vec<EnclaveOutput>,
    ) {
        let id = request.deposit_id;
        let respond = |out: &mut Vec<EnclaveOutput>, response| {
            out.push(EnclaveOutput::ClientResponse { client: request.sender, response })
        };
        let lc = &self.light_clients[&self.program.source_chain];
        match lc.verify_inclusion(&proof) {
            InclusionStatus::UnknownHeight => {
                if now >= since + self.program.park_ticks {
                    return respond(out, ClientResponse::Rejected { deposit_id: id, reason: RequestRejection::ParkTimeout });
                }
                self.parked.push(Parked { request, proof, since });
                return;
            }
            InclusionStatus::NotIncluded => {
                return respond(out, ClientResponse::Rejected { deposit_id: id, reason: RequestRejection::NotIncluded })
            }
            InclusionStatus::Included => {}
        }
        let receipt = &proof.receipt;
        let timestamp = lc.header(proof.height).expect("included height is known").timestamp;
        let matches = receipt.succeeded()
            && receipt.sender == request.sender
            && receipt.events.iter().any(|e| {
                matches!(e, Event::Vault(VaultEvent::Deposit { id: eid, sender, value, timestamp: ts })
                    if *eid == id && *sender == request.sender && *value == request.value && *ts == timestamp)
            });
        if !matches {
            return respond(out, ClientResponse::Rejected { deposit_id: id, reason: RequestRejection::Mismatch });
        }
        if request.value <= self.program.fee_per_tx {
            return respond(out, ClientResponse::Rejected { deposit_id: id, reason: RequestRejection::TooSmall });
        }
        self.seen_requests.insert(id, request.sender);
        self.mempool.push(PendingRequest {
            deposit_id: id,
            value: request.value,
            timestamp,
            receiver: request.receiver,
            target_chain: request.target_chain,
            client: request.sender,
            accepted_at: now,
        });
        respond(out, ClientResponse::Accepted { deposit_id: id });
    }

    fn retry_parked(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        for p in std::mem::take(&mut self.parked) {
            self.verify_deposit(p.request, p.proof, p.since, now, out);
        }
    }

    fn handle_htlc_request(&mut self, signed: SignedHtlcRequest, out: &mut Vec<EnclaveOutput>) {
        let rid = signed.request.id();
        let reject = |out: &mut Vec<EnclaveOutput>, reason| {
            out.push(EnclaveOutput::ClientResponse {
                client: signed.request.client,
                response: ClientResponse::Rejected { deposit_id: rid, reason },
            })
        };
        if !signed.verify() {
            return reject(out, RequestRejection::BadSignature);
        }
        if self.program.source_mode != ChainMode::ScriptOnly {
            return reject(out, RequestRejection::WrongTarget);
        }
        if self.seen_requests.contains_key(&rid) || self.state.htlc_requests.contains(&rid) {
            return reject(out, RequestRejection::Duplicate);
        }
        if signed.request.amount <= self.program.fee_per_tx {
            return reject(out, RequestRejection::TooSmall);
        }
        self.seen_requests.insert(rid, signed.request.client);
        self.htlc_mempool.push(signed.request);
    }

    fn on_block(&mut self, chain: ChainId, height: u64, receipts: Vec<Receipt>, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let Some(lc) = self.light_clients.get(&chain) else { return };
        if height != self.processed_height(chain) + 1 {
            return;
        }
        let Some(header) = lc.header(height) else { return };
        let leaves: Vec<Digest> = receipts.iter().map(|r| r.leaf()).collect();
        if merkle::root(&leaves) != header.tx_root {
            return;
        }
        let timestamp = header.timestamp;
        self.processed.insert(chain, height);
        for r in &receipts {
            if !r.succeeded() {
                if let Some(d) = r.payload_digest {
                    *self.obs.reverted_payloads.entry(d).or_default() += 1;
                }
                continue;
            }
            if let Some(d) = r.payload_digest {
                self.obs.settled_payloads.insert(d);
            }
            for ev in &r.events {
                self.observe(chain, height, timestamp, ev, now, out);
            }
        }
    }

    fn observe(&mut self, chain: ChainId, height: u64, _ts: Tick, ev: &Event, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let source = chain == self.program.source_chain;
        match ev {
            Event::Vault(VaultEvent::RegistrationClosed { operators, threshold }) => {
                self.membership.insert(chain, Membership { operators: operators.clone(), threshold: *threshold });
                if chain == self.program.target_chain && self.raft.is_none() {
                    let me = self.raft_key().public_key;
                    if let Some(idx) = operators.iter().position(|k| *k == me) {
                        self.raft = Some(RaftNode::new(idx, operators.len(), self.program.raft, now));
                    }
                }
            }
            Event::Vault(VaultEvent::Deposit { id, sender, value, timestamp }) if source => {
                self.obs.deposits.insert(*id, (*sender, *value, *timestamp));
            }
            Event::Vault(VaultEvent::Challenge { id, started_at, .. }) if source => {
                self.obs.active_challenges.insert(*id, *started_at);
            }
            Event::Vault(VaultEvent::ChallengeVoided { id, .. }) if source => {
                self.obs.active_challenges.remove(id);
            }
            Event::Vault(VaultEvent::Confirmed { id }) if source => {
                self.obs.active_challenges.remove(id);
                self.obs.confirmed.insert(*id);
            }
            Event::Vault(
                VaultEvent::ChallengeResponded { id, .. }
                | VaultEvent::Refunded { id, .. }
                | VaultEvent::Checkpointed { id, .. },
            ) if source => {
                self.obs.active_challenges.remove(id);
                self.obs.closed.insert(*id);
            }
            Event::Vault(VaultEvent::Transfer { deposit_id, .. }) if chain == self.program.target_chain => {
                self.obs.transfers_final.insert(*deposit_id, height);
                if let Some(client) = self.seen_requests.get(deposit_id) {
                    if self.completed_notified.insert(*deposit_id) {
                        out.push(EnclaveOutput::ClientResponse {
                            client: *client,
                            response: ClientResponse::Completed { deposit_id: *deposit_id },
                        });
                    }
                }
            }
            Event::Htlc(HtlcEvent::Locked { id, lock }) if source => {
                self.obs.locks.insert(*id, lock.clone());
            }
            Event::Htlc(HtlcEvent::Claimed { id, .. } | HtlcEvent::Refunded { id }) if source => {
                self.obs.locks_settled.insert(*id);
            }
            _ => {}
        }
    }

    fn drain_committed(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let Some(r) = self.raft.as_mut() else { return };
        let entries = r.take_committed();
        if entries.is_empty() {
            return;
        }
        for entry in entries {
            let me = &*self;
            let lock_fn = |req: &HtlcRequest| me.preimage(req);
            let mut state = self.state.clone();
            let decision = state.apply(&entry, &self.program, &lock_fn);
            self.state = state;
            if let Payload::HtlcPair { request, .. } = &entry.payload {
                if let Some(Decision::HtlcTransfer { lock, .. }) = &decision {
                    self.htlc_terms.insert(lock.hash_lock, request.clone());
                    out.push(EnclaveOutput::ClientResponse {
                        client: request.client,
                        response: ClientResponse::HtlcTerms { request_id: request.id(), lock: lock.clone() },
                    });
                }
            }
            if let Some(decision) = decision {
                let chain = decision.chain(&self.program);
                let digest = decision.digest(&self.program);
                let mut ds = DecisionState {
                    decision,
                    chain,
                    digest,
                    shares: SignatureShareSet::new(entry.index, digest),
                    own_share: None,
                    last_share_broadcast: 0,
                    last_submit: None,
                };
                if let (Some(buf), Some(m)) = (self.early_shares.remove(&entry.index), self.membership.get(&chain)) {
                    for s in buf {
                        if s.digest == digest && s.chain == chain {
                            ds.shares.add(s.share, &m.operators);
                        }
                    }
                }
                self.decisions.insert(entry.index, ds);
            }
        }
        let batched = &self.state.batched;
        self.mempool.retain(|p| !batched.contains_key(&p.deposit_id));
        let htlc = &self.state.htlc_requests;
        self.htlc_mempool.retain(|r| !htlc.contains(&r.id()));
        self.early_shares.retain(|&i, _| i > self.raft.as_ref().map_or(0, |r| r.last_applied()));
        self.drive_decisions(now, out);
    }

    fn decision_ready(&self, ds: &DecisionState) -> bool {
        match &ds.decision {
            Decision::HtlcTransfer { lock, .. } => self.obs.locks.values().any(|l| l == lock),
            _ => true,
        }
    }

    fn drive_decisions(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let indices: Vec<u64> = self.decisions.keys().copied().collect();
        for index in indices {
            let ready = self.decision_ready(&self.decisions[&index]);
            let ds = &self.decisions[&index];
            let reverts = self.obs.reverted_payloads.get(&ds.digest).copied().unwrap_or(0);
            if self.obs.settled_payloads.contains(&ds.digest) || reverts >= self.program.max_reverts {
                self.decisions.remove(&index);
                continue;
            }
            if !ready {
                continue;
            }
            let Some(members) = self.membership.get(&ds.chain).cloned() else { continue };
            let key = &self.keys[&ds.chain];
            let ds = self.decisions.get_mut(&index).unwrap();
            if ds.own_share.is_none() {
                let sig = key.sign(&ds.digest.0);
                ds.own_share = Some(sig);
                ds.shares.add(sig, &members.operators);
            }
            if now >= ds.last_share_broadcast + self.program.share_rebroadcast || ds.last_share_broadcast == 0 {
                ds.last_share_broadcast = now.max(1);
                out.push(EnclaveOutput::Share {
                    share: ShareMessage { index, chain: ds.chain, digest: ds.digest, share: ds.own_share.unwrap() },
                });
            }
            let due = ds.last_submit.is_none_or(|t| now >= t + self.program.resubmit_after);
            if due {
                if let Some(ms) = ds.shares.assemble(&members.operators, members.threshold) {
                    ds.last_submit = Some(now);
                    out.push(EnclaveOutput::Submit { chain: ds.chain, call: ds.decision.call(ms) });
                }
            }
        }
    }

    fn drive_claims(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        if self.program.source_mode != ChainMode::ScriptOnly {
            return;
        }
        let source_time = self.obs.chain_time.get(&self.program.source_chain).copied().unwrap_or(0);
        let mut claims = Vec::new();
        for (lock_id, lock) in &self.obs.locks {
            if self.obs.locks_settled.contains(lock_id) || source_time >= lock.deadline {
                continue;
            }
            let Some(request) = self.htlc_request_for(lock) else { continue };
            if !self.obs.transfers_final.contains_key(&request.id()) {
                continue;
            }
            if self.claims.get(lock_id).is_some_and(|&t| now < t + self.program.resubmit_after) {
                continue;
            }
            claims.push((*lock_id, self.preimage(&request)));
        }
        for (lock_id, preimage) in claims {
            self.claims.insert(lock_id, now);
            out.push(EnclaveOutput::Submit {
                chain: self.program.source_chain,
                call: Call::Htlc(HtlcCall::Claim { id: lock_id, preimage }),
            });
        }
    }

    /// The committed HTLC request whose terms produced `lock`, if any.
    fn htlc_request_for(&self, lock: &HtlcLock) -> Option<HtlcRequest> {
        self.htlc_terms.get(&lock.hash_lock).cloned()
    }

    fn lead(&mut self, now: Tick, out: &mut Vec<EnclaveOutput>) {
        let Some(r) = self.raft.as_ref() else { return };
        if !r.is_leader() {
            return;
        }
        let uncommitted: Vec<LogEntry> = r.uncommitted().to_vec();
        let lock_fn = |req: &HtlcRequest| self.preimage(req);
        let mut projected = self.state.clone();
        for e in &uncommitted {
            projected.apply(e, &self.program, &lock_fn);
        }
        let mut proposals: Vec<Payload> = Vec::new();

        // Transfers for verified deposits.
        let fresh: Vec<&PendingRequest> =
            self.mempool.iter().filter(|p| !projected.batched.contains_key(&p.deposit_id)).collect();
        let full = fresh.len() >= self.program.max_batch;
        let waited = fresh.first().is_some_and(|p| now >= p.accepted_at + self.program.batch_wait);
        let mut dropped = Vec::new();
        if full || waited {
            let mut intents = Vec::new();
            for p in fresh.into_iter().take(self.program.raft_batch_size) {
                let earliest_exec = now + self.program.exec_slack + self.program.target_finality;
                if earliest_exec > transfer_deadline(&self.program, p.timestamp) {
                    dropped.push((p.deposit_id, p.client, RequestRejection::Expired));
                    continue;
                }
                let input = p.value - self.program.fee_per_tx;
                let Ok(amount) = projected.pool.quote(input) else {
                    dropped.push((p.deposit_id, p.client, RequestRejection::Unpriceable));
                    continue;
                };
                projected.pool.apply_quoted(input, amount).expect("fresh quote applies");
                projected.batched.insert(p.deposit_id, 0);
                intents.push(TransferIntent {
                    deposit_id: p.deposit_id,
                    target_chain: p.target_chain,
                    amount,
                    receiver: p.receiver,
                    source_value: p.value,
                    input,
                    deposit_timestamp: p.timestamp,
                });
            }
            for (chain, batch) in batch_transfers(&intents, self.program.max_batch) {
                proposals.push(Payload::Transfers { target_chain: chain, intents: batch });
            }
            self.intents_created.extend(intents.iter().map(|i| i.deposit_id));
        }
        for (id, client, reason) in dropped {
            self.mempool.retain(|p| p.deposit_id != id);
            out.push(EnclaveOutput::ClientResponse { client, response: ClientResponse::Rejected { deposit_id: id, reason } });
        }

        if self.program.source_mode == ChainMode::Contract {
            let done = |id: &Digest| self.obs.transfers_final.contains_key(id) && self.state.batched.contains_key(id);
            let open = |id: &Digest| !self.obs.closed.contains(id);
            let confirm: Vec<Digest> = self
                .state
                .batched
                .keys()
                .filter(|id| done(id) && open(id) && !self.obs.confirmed.contains(*id))
                .filter(|id| !projected.confirm_decided.contains(*id))
                .copied()
                .collect();
            if !confirm.is_empty() {
                proposals.push(Payload::Confirm { ids: confirm });
            }
            for id in self.obs.active_challenges.keys() {
                if done(id) && !projected.responded.contains(id) {
                    proposals.push(Payload::ChallengeResponse { id: *id });
                }
            }
            if self.program.checkpoint_batch_size > 0 {
                let eligible: Vec<Digest> = self
                    .state
                    .batched
                    .keys()
                    .filter(|id| done(id) && open(id) && !self.obs.active_challenges.contains_key(*id))
                    .filter(|id| !projected.checkpointed.contains(*id))
                    .copied()
                    .collect();
                let size = self.program.checkpoint_batch_size;
                for chunk in eligible.chunks(size) {
                    let period_due = self.program.checkpoint_period > 0
                        && now >= self.last_checkpoint + self.program.checkpoint_period;
                    if chunk.len() == size || period_due {
                        proposals.push(Payload::Checkpoint { ids: chunk.to_vec() });
                        self.last_checkpoint = now;
                    }
                }
            }
        }

        let requests: Vec<HtlcRequest> = self.htlc_mempool.clone();
        for req in requests {
            let rid = req.id();
            if projected.htlc_requests.contains(&rid) {
                continue;
            }
            let input = req.amount - self.program.fee_per_tx;
            let Ok(amount) = projected.pool.quote(input) else { continue };
            projected.pool.apply_quoted(input, amount).expect("fresh quote applies");
            projected.htlc_requests.insert(rid);
            self.intents_created.push(rid);
            proposals.push(Payload::HtlcPair {
                request: req,
                input,
                amount,
                deadline: now + self.program.htlc_timeout,
            });
        }

        if proposals.is_empty() {
            return;
        }
        let r = self.raft.as_mut().unwrap();
        for p in proposals {
            r.propose(p);
        }
        let msgs = r.broadcast(now);
        self.send_raft(msgs, out);
        self.drain_committed(now, out);
    }
}

/// Output of one enclave activation, endorsed by the enclave key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resumed {
    pub outputs: Vec<EnclaveOutput>,
    pub endorsement: Signature,
}

impl Resumed {
    pub fn digest(outputs: &[EnclaveOutput]) -> Digest {
        hash(&serde_json::to_vec(outputs).expect("outputs serialize"))
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        crate::crypto::verify(&Self::digest(&self.outputs).0, &self.endorsement, pk)
    }
}

/// A trusted execution platform owned by one operator host.
#[derive(Debug, Clone)]
pub struct Tee {
    manufacturer: Manufacturer,
    platform_seed: Vec<u8>,
    enclaves: BTreeMap<EnclaveId, Enclave>,
    suspended: bool,
}

impl Tee {
    pub fn new(manufacturer: Manufacturer, platform_seed: &[u8]) -> Self {
        Tee { manufacturer, platform_seed: platform_seed.to_vec(), enclaves: BTreeMap::new(), suspended: false }
    }

    pub fn install(&mut self, eid: EnclaveId, program: ProgramConfig) -> EnclaveId {
        // Every enclave running the same program unseals the same group
        // secret; hosts never see it.
        let mut enc = Encoder::new("sealed-group-secret");
        enc.digest(&self.manufacturer.sealing_key()).digest(&program.digest());
        let secret = enc.to_digest().0;
        self.enclaves.insert(eid, Enclave::new(eid, program, &self.platform_seed, secret));
        eid
    }

    pub fn quote(&self, eid: EnclaveId, chain: ChainId) -> Option<AttestationQuote> {
        let e = self.enclaves.get(&eid)?;
        Some(self.manufacturer.attest(eid, e.program_digest, e.public_key(chain)?))
    }

    pub fn suspend(&mut self) {
        self.suspended = true;
    }

    pub fn unsuspend(&mut self) {
        self.suspended = false;
    }

    pub fn is_suspended(&self) -> bool {
        self.suspended
    }

    /// Runs the enclave on one input. A suspended platform produces nothing.
    pub fn resume(&mut self, eid: EnclaveId, input: EnclaveInput, now: Tick) -> Option<Resumed> {
        if self.suspended {
            return None;
        }
        let e = self.enclaves.get_mut(&eid)?;
        let outputs = e.step(input, now);
        let endorsement = e.raft_key().sign(&Resumed::digest(&outputs).0);
        Some(Resumed { outputs, endorsement })
    }

    pub fn enclave(&self, eid: EnclaveId) -> Option<&Enclave> {
        self.enclaves.get(&eid)
    }

    /// Setup-phase access for light-client bootstrap.
    pub fn enclave_mut(&mut self, eid: EnclaveId) -> Option<&mut Enclave> {
        self.enclaves.get_mut(&eid)
    }
}
