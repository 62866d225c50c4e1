//! Simulated blockchains with logical-tick time, deterministic finality and
//! sync committees that sign every finalized header.
//!
//! One block finalizes per tick (empty blocks included). A transaction
//! submitted at tick `t` lands in the block finalized at `t + delta`.
//! Contract calls run against the vault (or the HTLC book on script-only
//! chains) with `block.timestamp` equal to the finalizing tick.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, Digest, KeyPair, PublicKey, Signature};
use crate::encoding::{Encode, Encoder};
use crate::htlc::{HtlcBook, HtlcCall, HtlcEvent};
use crate::lightclient::InclusionProof;
use crate::merkle;
use crate::types::{Address, Amount, ChainId, Tick};
use crate::vault::{CallContext, CostMeter, VaultCall, VaultConfig, VaultEvent, VaultState};

/// Number of recent header digests contracts may read.
pub const RECENT_HEADER_WINDOW: usize = 256;

/// A fraction in `(1/2, 1]` of the committee that must sign a header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitteeThreshold {
    pub num: u64,
    pub den: u64,
}

impl CommitteeThreshold {
    pub const TWO_THIRDS: CommitteeThreshold = CommitteeThreshold { num: 2, den: 3 };

    pub fn is_valid(&self) -> bool {
        self.den > 0 && self.num <= self.den && 2 * self.num > self.den
    }

    /// `ceil(num * size / den)`
    pub fn required(&self, committee_size: usize) -> usize {
        let n = self.num as u128 * committee_size as u128;
        n.div_ceil(self.den as u128) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Full contract host; vault and HTLC calls accepted.
    Contract,
    /// Only plain transfers and HTLC calls.
    ScriptOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub chain_id: ChainId,
    pub finality_delay: Tick,
    pub committee_size: usize,
    pub committee_rotation_period: Tick,
    pub committee_threshold: CommitteeThreshold,
    pub mode: ChainMode,
    /// Seed for committee key derivation.
    pub seed: u64,
}

impl ChainConfig {
    pub fn new(chain_id: ChainId, finality_delay: Tick) -> Self {
        ChainConfig {
            chain_id,
            finality_delay,
            committee_size: 16,
            committee_rotation_period: 64,
            committee_threshold: CommitteeThreshold::TWO_THIRDS,
            mode: ChainMode::Contract,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.finality_delay < 1 {
            return Err(ChainError::InvalidConfig("finality delay must be at least 1"));
        }
        if self.committee_size < 1 {
            return Err(ChainError::InvalidConfig("committee size must be at least 1"));
        }
        if self.committee_rotation_period < 1 {
            return Err(ChainError::InvalidConfig("rotation period must be at least 1"));
        }
        if !self.committee_threshold.is_valid() {
            return Err(ChainError::InvalidConfig("committee threshold must lie in (1/2, 1]"));
        }
        Ok(())
    }

    pub fn epoch_of(&self, height: u64) -> u64 {
        height / self.committee_rotation_period
    }

    pub fn required_signatures(&self) -> usize {
        self.committee_threshold.required(self.committee_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncCommittee {
    pub epoch: u64,
    pub validator_keys: Vec<PublicKey>,
}

impl SyncCommittee {
    pub fn commitment(&self) -> Digest {
        let mut enc = Encoder::new("sync-committee");
        enc.u64(self.epoch).list(&self.validator_keys);
        enc.to_digest()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub chain_id: ChainId,
    pub height: u64,
    pub parent_digest: Digest,
    pub state_digest: Digest,
    pub tx_root: Digest,
    pub timestamp: Tick,
    pub committee_signatures: Vec<Signature>,
    pub next_committee_commitment: Digest,
}

impl BlockHeader {
    /// Digest of every field except the committee signatures. This is both
    /// what the committee signs and the header's identity.
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::new("block-header");
        enc.u64(self.chain_id.0 as u64)
            .u64(self.height)
            .digest(&self.parent_digest)
            .digest(&self.state_digest)
            .digest(&self.tx_root)
            .u64(self.timestamp)
            .digest(&self.next_committee_commitment);
        enc.to_digest()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Call {
    Transfer { to: Address },
    Vault(VaultCall),
    Htlc(HtlcCall),
}

impl Call {
    pub fn name(&self) -> &'static str {
        match self {
            Call::Transfer { .. } => "transfer_plain",
            Call::Vault(c) => c.name(),
            Call::Htlc(c) => c.name(),
        }
    }

    /// Digest that identifies a call submitted by several parties at once.
    pub fn payload_digest(&self, chain: ChainId) -> Option<Digest> {
        match self {
            Call::Transfer { .. } => None,
            Call::Vault(c) => c.payload_digest(chain),
            Call::Htlc(c) => c.payload_digest(),
        }
    }

    fn is_payable(&self) -> bool {
        matches!(
            self,
            Call::Transfer { .. }
                | Call::Vault(
                    VaultCall::Deposit
                        | VaultCall::StartChallenge { .. }
                        | VaultCall::FundLiquidity
                        | VaultCall::Register { .. }
                )
                | Call::Htlc(HtlcCall::Lock { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTx {
    pub id: Digest,
    pub sender: Address,
    pub call: Call,
    pub value: Amount,
    pub submitted_at: Tick,
    pub finalized_at: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Event {
    Vault(VaultEvent),
    Htlc(HtlcEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Success,
    Reverted(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: Digest,
    pub sender: Address,
    pub call: String,
    pub status: TxStatus,
    pub payload_digest: Option<Digest>,
    pub events: Vec<Event>,
    pub cost: CostMeter,
}

impl Receipt {
    pub fn succeeded(&self) -> bool {
        self.status == TxStatus::Success
    }

    /// Merkle leaf committed under the header's `tx_root`.
    pub fn leaf(&self) -> Digest {
        self.digest()
    }
}

impl Encode for Receipt {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.str("receipt")
            .digest(&self.tx_id)
            .bytes(&self.sender.0)
            .str(&self.call)
            .bytes(&serde_json::to_vec(&self.status).expect("status serializes"))
            .bool(self.payload_digest.is_some())
            .digest(&self.payload_digest.unwrap_or_default())
            .bytes(&serde_json::to_vec(&self.events).expect("events serialize"));
    }
}

/// One exported event line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub chain_id: ChainId,
    pub height: u64,
    pub tx_id: Digest,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("invalid chain config: {0}")]
    InvalidConfig(&'static str),
    #[error("sender balance {balance} below {needed}")]
    InsufficientBalance { balance: Amount, needed: Amount },
    #[error("call {0} is not supported on this chain")]
    CallNotSupported(&'static str),
    #[error("call {0} does not accept value")]
    NotPayable(&'static str),
    #[error("payload already submitted")]
    DuplicatePayload,
    #[error("timestamp {now} does not advance past {tip}")]
    TimeNotAdvancing { now: Tick, tip: Tick },
}

/// Adversarial header mutations accepted by [`Chain::forge_header`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderTamper {
    BadParent,
    InsufficientSignatures,
    InvalidSignatures,
    FabricatedCommittee,
    StaleCommittee,
    WrongCommitment,
    HeightGap,
    TimestampRegression,
    DuplicateSigners,
    TamperedTxRoot,
}

impl HeaderTamper {
    pub const ALL: [HeaderTamper; 10] = [
        HeaderTamper::BadParent,
        HeaderTamper::InsufficientSignatures,
        HeaderTamper::InvalidSignatures,
        HeaderTamper::FabricatedCommittee,
        HeaderTamper::StaleCommittee,
        HeaderTamper::WrongCommitment,
        HeaderTamper::HeightGap,
        HeaderTamper::TimestampRegression,
        HeaderTamper::DuplicateSigners,
        HeaderTamper::TamperedTxRoot,
    ];
}

#[derive(Debug, Clone)]
pub struct Chain {
    config: ChainConfig,
    balances: BTreeMap<Address, Amount>,
    vault: Option<VaultState>,
    htlc: HtlcBook,
    mempool: VecDeque<ChainTx>,
    pending_outflow: BTreeMap<Address, Amount>,
    nonces: BTreeMap<Address, u64>,
    headers: Vec<BlockHeader>,
    blocks: Vec<Vec<ChainTx>>,
    receipts: Vec<Vec<Receipt>>,
    tx_index: BTreeMap<Digest, (u64, usize)>,
    events: Vec<EventRecord>,
    committees: BTreeMap<u64, Vec<KeyPair>>,
    seen_payloads: BTreeSet<Digest>,
    minted: u128,
    costs: BTreeMap<String, (u64, CostMeter)>,
}

impl Chain {
    pub fn new(config: ChainConfig) -> Result<Self, ChainError> {
        config.validate()?;
        let mut chain = Chain {
            config,
            balances: BTreeMap::new(),
            vault: None,
            htlc: HtlcBook::default(),
            mempool: VecDeque::new(),
            pending_outflow: BTreeMap::new(),
            nonces: BTreeMap::new(),
            headers: Vec::new(),
            blocks: Vec::new(),
            receipts: Vec::new(),
            tx_index: BTreeMap::new(),
            events: Vec::new(),
            committees: BTreeMap::new(),
            seen_payloads: BTreeSet::new(),
            minted: 0,
            costs: BTreeMap::new(),
        };
        let genesis = chain.seal(0, Digest::ZERO, merkle::empty_root(), 0);
        chain.headers.push(genesis);
        chain.blocks.push(Vec::new());
        chain.receipts.push(Vec::new());
        Ok(chain)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn id(&self) -> ChainId {
        self.config.chain_id
    }

    pub fn deploy_vault(&mut self, config: VaultConfig) {
        assert_eq!(self.config.mode, ChainMode::Contract, "script-only chains host no vault");
        self.vault = Some(VaultState::new(config));
    }

    pub fn vault(&self) -> Option<&VaultState> {
        self.vault.as_ref()
    }

    pub fn htlc(&self) -> &HtlcBook {
        &self.htlc
    }

    /// Scenario setup only: creates new funds.
    pub fn mint(&mut self, to: Address, amount: Amount) {
        *self.balances.entry(to).or_default() += amount;
        self.minted += amount as u128;
    }

    pub fn balance(&self, who: &Address) -> Amount {
        self.balances.get(who).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<Address, Amount> {
        &self.balances
    }

    pub fn minted(&self) -> u128 {
        self.minted
    }

    /// Sum of accounts, vault holdings and open HTLC locks. Equals
    /// [`Chain::minted`] at all times.
    pub fn total_supply(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum::<u128>()
            + self.vault.as_ref().map_or(0, |v| v.holdings())
            + self.htlc.locked()
    }

    pub fn tip(&self) -> &BlockHeader {
        self.headers.last().expect("genesis exists")
    }

    pub fn header(&self, height: u64) -> Option<&BlockHeader> {
        self.headers.get(height as usize)
    }

    pub fn headers(&self) -> &[BlockHeader] {
        &self.headers
    }

    pub fn receipts(&self, height: u64) -> &[Receipt] {
        self.receipts.get(height as usize).map_or(&[], |r| r.as_slice())
    }

    pub fn block_txs(&self, height: u64) -> &[ChainTx] {
        self.blocks.get(height as usize).map_or(&[], |b| b.as_slice())
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn epoch_of(&self, height: u64) -> u64 {
        self.config.epoch_of(height)
    }

    fn committee_keys(&mut self, epoch: u64) -> &[KeyPair] {
        let (seed, chain, size) = (self.config.seed, self.config.chain_id, self.config.committee_size);
        self.committees.entry(epoch).or_insert_with(|| {
            (0..size)
                .map(|i| {
                    let mut enc = Encoder::new("validator");
                    enc.u64(seed).u64(chain.0 as u64).u64(epoch).u64(i as u64);
                    KeyPair::from_seed(enc.as_bytes())
                })
                .collect()
        })
    }

    pub fn committee(&mut self, epoch: u64) -> SyncCommittee {
        let keys = self.committee_keys(epoch).iter().map(|k| k.public_key).collect();
        SyncCommittee { epoch, validator_keys: keys }
    }

    fn state_digest(&self) -> Digest {
        let mut enc = Encoder::new("chain-state");
        enc.bytes(&serde_json::to_vec(&self.balances).expect("balances serialize"))
            .digest(&self.vault.as_ref().map(|v| v.state_digest()).unwrap_or_default())
            .bytes(&serde_json::to_vec(&self.htlc).expect("htlc serializes"));
        enc.to_digest()
    }

    fn seal(&mut self, height: u64, parent: Digest, tx_root: Digest, timestamp: Tick) -> BlockHeader {
        let epoch = self.epoch_of(height);
        let next_commitment = self.committee(epoch + 1).commitment();
        let mut header = BlockHeader {
            chain_id: self.config.chain_id,
            height,
            parent_digest: parent,
            state_digest: self.state_digest(),
            tx_root,
            timestamp,
            committee_signatures: Vec::new(),
            next_committee_commitment: next_commitment,
        };
        let d = header.digest();
        header.committee_signatures = self.committee_keys(epoch).iter().map(|k| k.sign(&d.0)).collect();
        header
    }

    /// Digests of the latest finalized headers, newest last.
    pub fn recent_digests(&self, n: usize) -> Vec<Digest> {
        let start = self.headers.len().saturating_sub(n);
        self.headers[start..].iter().map(|h| h.digest()).collect()
    }

    pub fn submit_tx(&mut self, sender: Address, call: Call, value: Amount, now: Tick) -> Result<Digest, ChainError> {
        match (&call, self.config.mode) {
            (Call::Vault(_), ChainMode::ScriptOnly) => return Err(ChainError::CallNotSupported(call.name())),
            (Call::Vault(_), ChainMode::Contract) if self.vault.is_none() => {
                return Err(ChainError::CallNotSupported(call.name()))
            }
            _ => {}
        }
        if value > 0 && !call.is_payable() {
            return Err(ChainError::NotPayable(call.name()));
        }
        let reserved = self.pending_outflow.get(&sender).copied().unwrap_or(0);
        let balance = self.balance(&sender);
        if balance < reserved.saturating_add(value) {
            return Err(ChainError::InsufficientBalance { balance: balance - reserved.min(balance), needed: value });
        }
        if let Some(d) = call.payload_digest(self.config.chain_id) {
            if !self.seen_payloads.insert(d) {
                return Err(ChainError::DuplicatePayload);
            }
        }
        let nonce = self.nonces.entry(sender).or_default();
        *nonce += 1;
        let mut enc = Encoder::new("chain-tx");
        enc.u64(self.config.chain_id.0 as u64)
            .bytes(&sender.0)
            .u64(*nonce)
            .u64(now)
            .u64(value)
            .bytes(&serde_json::to_vec(&call).expect("call serializes"));
        let id = enc.to_digest();
        *self.pending_outflow.entry(sender).or_default() += value;
        self.mempool.push_back(ChainTx { id, sender, call, value, submitted_at: now, finalized_at: None });
        Ok(id)
    }

    /// Finalizes the next block at `now`, including every mempool transaction
    /// whose finality delay has elapsed, in FIFO order.
    pub fn advance_tick(&mut self, now: Tick) -> Result<BlockHeader, ChainError> {
        let tip = self.tip().clone();
        if now <= tip.timestamp {
            return Err(ChainError::TimeNotAdvancing { now, tip: tip.timestamp });
        }
        let height = tip.height + 1;
        let mut txs = Vec::new();
        while let Some(front) = self.mempool.front() {
            if front.submitted_at + self.config.finality_delay > now {
                break;
            }
            let mut tx = self.mempool.pop_front().unwrap();
            tx.finalized_at = Some(now);
            txs.push(tx);
        }
        let recent = self.recent_digests(RECENT_HEADER_WINDOW);
        let mut receipts = Vec::with_capacity(txs.len());
        for tx in &txs {
            let out = self.pending_outflow.get_mut(&tx.sender).expect("reserved at submission");
            *out -= tx.value;
            let receipt = self.execute(tx, now, &recent);
            let entry = self.costs.entry(receipt.call.clone()).or_default();
            entry.0 += 1;
            entry.1.add(&receipt.cost);
            receipts.push(receipt);
        }
        let leaves: Vec<Digest> = receipts.iter().map(|r| r.leaf()).collect();
        let header = self.seal(height, tip.digest(), merkle::root(&leaves), now);
        for (i, r) in receipts.iter().enumerate() {
            self.tx_index.insert(r.tx_id, (height, i));
            for ev in &r.events {
                self.events.push(EventRecord {
                    chain_id: self.config.chain_id,
                    height,
                    tx_id: r.tx_id,
                    event: ev.clone(),
                });
            }
        }
        self.headers.push(header.clone());
        self.blocks.push(txs);
        self.receipts.push(receipts);
        Ok(header)
    }

    fn execute(&mut self, tx: &ChainTx, now: Tick, recent: &[Digest]) -> Receipt {
        let mut meter = CostMeter::default();
        let chain_id = self.config.chain_id;
        let mut receipt = Receipt {
            tx_id: tx.id,
            sender: tx.sender,
            call: tx.call.name().to_string(),
            status: TxStatus::Success,
            payload_digest: None,
            events: Vec::new(),
            cost: CostMeter::default(),
        };
        if self.balance(&tx.sender) < tx.value {
            receipt.status = TxStatus::Reverted("insufficient balance".into());
            return receipt;
        }
        receipt.payload_digest = tx.call.payload_digest(chain_id);
        let outcome: Result<(Vec<Event>, Vec<(Address, Amount)>), String> = match &tx.call {
            Call::Transfer { to } => Ok((vec![], vec![(*to, tx.value)])),
            Call::Vault(call) => {
                let vault = self.vault.as_mut().expect("checked at submission");
                let mut ctx = CallContext {
                    chain_id,
                    now,
                    sender: tx.sender,
                    value: tx.value,
                    recent_headers: recent,
                    meter: &mut meter,
                };
                vault
                    .execute(call, &mut ctx)
                    .map(|e| (e.events.into_iter().map(Event::Vault).collect(), e.payouts))
                    .map_err(|e| e.to_string())
            }
            Call::Htlc(call) => self
                .htlc
                .execute(call, tx.sender, tx.value, now, &mut meter)
                .map(|o| (o.events.into_iter().map(Event::Htlc).collect(), o.payouts))
                .map_err(|e| e.to_string()),
        };
        match outcome {
            Ok((events, payouts)) => {
                if tx.value > 0 {
                    *self.balances.get_mut(&tx.sender).expect("balance checked") -= tx.value;
                }
                for (to, amount) in payouts {
                    *self.balances.entry(to).or_default() += amount;
                }
                receipt.events = events;
            }
            Err(reason) => {
                // A reverted payload may be resubmitted with a valid multisig.
                if let Some(d) = &receipt.payload_digest {
                    self.seen_payloads.remove(d);
                }
                receipt.status = TxStatus::Reverted(reason)
            }
        }
        receipt.cost = meter;
        receipt
    }

    /// Events finalized at `from_height` or later. Empty when `from_height`
    /// is beyond the tip.
    pub fn read_event_log(&self, from_height: u64) -> Vec<EventRecord> {
        let start = self.events.partition_point(|e| e.height < from_height);
        self.events[start..].to_vec()
    }

    pub fn event_log(&self) -> &[EventRecord] {
        &self.events
    }

    /// Line-delimited JSON export of the event log.
    pub fn export_events(&self, from_height: u64) -> String {
        let mut out = String::new();
        for e in self.read_event_log(from_height) {
            out.push_str(&serde_json::to_string(&e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn receipt(&self, tx_id: &Digest) -> Option<(u64, &Receipt)> {
        let &(h, i) = self.tx_index.get(tx_id)?;
        Some((h, &self.receipts[h as usize][i]))
    }

    pub fn inclusion_proof(&self, tx_id: &Digest) -> Option<InclusionProof> {
        let &(height, index) = self.tx_index.get(tx_id)?;
        let receipts = &self.receipts[height as usize];
        let leaves: Vec<Digest> = receipts.iter().map(|r| r.leaf()).collect();
        Some(InclusionProof {
            tx_id: *tx_id,
            height,
            receipt: receipts[index].clone(),
            path: merkle::path(&leaves, index)?,
        })
    }

    /// Per call kind: number of executed calls and summed cost.
    pub fn costs(&self) -> &BTreeMap<String, (u64, CostMeter)> {
        &self.costs
    }

    /// Adversary API: a header for the next height that fails at least one
    /// light-client check. Chain state is not modified.
    pub fn forge_header(&mut self, tamper: HeaderTamper) -> BlockHeader {
        let tip = self.tip().clone();
        let height = tip.height + 1;
        let epoch = self.epoch_of(height);
        let mut h = BlockHeader {
            chain_id: self.config.chain_id,
            height,
            parent_digest: tip.digest(),
            state_digest: self.state_digest(),
            tx_root: merkle::empty_root(),
            timestamp: tip.timestamp + 1,
            committee_signatures: Vec::new(),
            next_committee_commitment: self.committee(epoch + 1).commitment(),
        };
        let honest_sign = |chain: &mut Chain, h: &BlockHeader, epoch: u64| -> Vec<Signature> {
            let d = h.digest();
            chain.committee_keys(epoch).iter().map(|k| k.sign(&d.0)).collect()
        };
        let fabricated = |h: &BlockHeader, n: usize| -> Vec<Signature> {
            let d = h.digest();
            (0..n)
                .map(|i| KeyPair::from_seed(format!("fabricated-{i}").as_bytes()).sign(&d.0))
                .collect()
        };
        let required = self.config.required_signatures();
        match tamper {
            HeaderTamper::BadParent => {
                h.parent_digest = hash(b"not the parent");
                h.committee_signatures = honest_sign(self, &h, epoch);
            }
            HeaderTamper::InsufficientSignatures => {
                let mut sigs = honest_sign(self, &h, epoch);
                sigs.truncate(required.saturating_sub(1));
                h.committee_signatures = sigs;
            }
            HeaderTamper::InvalidSignatures => {
                let other = hash(b"other message");
                h.committee_signatures = self.committee_keys(epoch).iter().map(|k| k.sign(&other.0)).collect();
            }
            HeaderTamper::FabricatedCommittee => {
                let fake = SyncCommittee {
                    epoch: epoch + 1,
                    validator_keys: (0..self.config.committee_size)
                        .map(|i| KeyPair::from_seed(format!("fabricated-next-{i}").as_bytes()).public_key)
                        .collect(),
                };
                h.next_committee_commitment = fake.commitment();
                h.committee_signatures = fabricated(&h, self.config.committee_size);
            }
            HeaderTamper::StaleCommittee => {
                let sigs = if epoch > 0 { honest_sign(self, &h, epoch - 1) } else { fabricated(&h, self.config.committee_size) };
                h.committee_signatures = sigs;
            }
            HeaderTamper::WrongCommitment => {
                h.next_committee_commitment = hash(b"bogus committee");
                h.committee_signatures = honest_sign(self, &h, epoch);
            }
            HeaderTamper::HeightGap => {
                h.height += 1;
                h.timestamp += 1;
                let e = self.epoch_of(h.height);
                h.next_committee_commitment = self.committee(e + 1).commitment();
                h.committee_signatures = honest_sign(self, &h, e);
            }
            HeaderTamper::TimestampRegression => {
                h.timestamp = tip.timestamp;
                h.committee_signatures = honest_sign(self, &h, epoch);
            }
            HeaderTamper::DuplicateSigners => {
                let d = h.digest();
                let one = self.committee_keys(epoch)[0].sign(&d.0);
                let mut sigs: Vec<Signature> =
                    self.committee_keys(epoch).iter().take(required.saturating_sub(1)).map(|k| k.sign(&d.0)).collect();
                while sigs.len() < self.config.committee_size {
                    sigs.push(one);
                }
                h.committee_signatures = sigs;
            }
            HeaderTamper::TamperedTxRoot => {
                h.committee_signatures = honest_sign(self, &h, epoch);
                h.tx_root = hash(b"injected transactions");
            }
        }
        h
    }

    /// Every finalized header: parent-linked, monotone timestamps, and
    /// enough distinct valid committee signatures. Returns the first bad height.
    pub fn audit_headers(&mut self) -> Result<(), u64> {
        let required = self.config.required_signatures();
        for i in 0..self.headers.len() {
            let h = self.headers[i].clone();
            if i > 0 {
                let p = &self.headers[i - 1];
                if h.parent_digest != p.digest() || h.timestamp <= p.timestamp || h.height != p.height + 1 {
                    return Err(h.height);
                }
            }
            let committee = self.committee(self.epoch_of(h.height));
            let d = h.digest();
            let valid: BTreeSet<PublicKey> = h
                .committee_signatures
                .iter()
                .filter(|s| committee.validator_keys.contains(&s.signer) && crate::crypto::verify(&d.0, s, &s.signer))
                .map(|s| s.signer)
                .collect();
            if valid.len() < required {
                return Err(h.height);
            }
        }
        Ok(())
    }
}
