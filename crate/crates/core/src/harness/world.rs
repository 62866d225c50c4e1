//! The deterministic scheduler. One [`World`] owns both chains, every
//! operator host with its TEE, and every client, and advances them one tick
//! at a time in a fixed order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::report::{
    CallCost, ConsensusReport, DepositOutcome, DepositReport, PropertyVerdict, RewardReport, RunReport, SwapOutcome,
    SwapReport,
};
use super::scenario::{
    setup_ticks, ClientAction, FaultKind, FaultTarget, Scenario, ScenarioError, BOOTSTRAP_HEADERS,
};
use crate::amm::{Pool, RewardLedger};
use crate::chain::{Call, Chain, ChainError, ChainMode, Event};
use crate::consensus::Payload;
use crate::crypto::{Digest, EnclaveId, KeyPair, Manufacturer, PublicKey};
use crate::enclave::{
    ClientResponse, EnclaveInput, EnclaveOutput, ExchangeRequest, HostAction, HostFilter, MessageClass, ProgramConfig,
    RequestRejection, SignedHtlcRequest, Tee,
};
use crate::htlc::{HtlcCall, HtlcEvent, HtlcLock, HtlcRequest};
use crate::lightclient::LightClientParams;
use crate::types::{Address, Amount, ChainId, Tick};
use crate::vault::{VaultCall, VaultConfig, VaultEvent};

/// A client resends an unacknowledged request after this many network
/// delays plus two ticks.
const RESEND_AFTER_E: Tick = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
struct Delivery {
    to: usize,
    input: EnclaveInput,
    /// Already held back or duplicated by the recipient's host.
    filtered: bool,
}

struct Host {
    address: Address,
    tee: Tee,
    eid: EnclaveId,
    filter: HostFilter,
    pending_submits: Vec<(Tick, ChainId, Call)>,
}

#[derive(Debug, Clone, Default)]
struct ClientDeposit {
    value: Amount,
    tx: Digest,
    id: Option<Digest>,
    timestamp: Option<Tick>,
    failed: bool,
    requested_at: Option<Tick>,
    last_sent: Tick,
    acknowledged: bool,
    challenge_submitted: bool,
    resolve_submitted: bool,
}

#[derive(Debug, Clone)]
struct ClientSwap {
    request: HtlcRequest,
    sent_at: Tick,
    lock: Option<HtlcLock>,
    lock_submitted: bool,
    refund_submitted: bool,
}

struct Client {
    name: String,
    keys: KeyPair,
    address: Address,
    auto_challenge: bool,
    script: VecDeque<(Tick, ClientAction)>,
    awake_at: Tick,
    deposits: Vec<ClientDeposit>,
    swaps: Vec<ClientSwap>,
    inbox: Vec<ClientResponse>,
}

impl Client {
    fn awake(&self, now: Tick) -> bool {
        now >= self.awake_at
    }
}

/// What the source and target event logs say about each deposit and lock.
#[derive(Debug, Clone, Default)]
struct Tracker {
    deposits: BTreeMap<Digest, TrackedDeposit>,
    transfers: BTreeMap<Digest, Vec<(Amount, Vec<PublicKey>)>>,
    locks: BTreeMap<Digest, TrackedLock>,
    /// Successful receipts per (chain, payload digest).
    payload_successes: BTreeMap<(ChainId, Digest), u32>,
    scanned: BTreeMap<ChainId, u64>,
}

#[derive(Debug, Clone, Default)]
struct TrackedDeposit {
    sender: Address,
    value: Amount,
    timestamp: Tick,
    confirmed: bool,
    refunded_at: Option<Tick>,
    challenged_at: Option<Tick>,
}

#[derive(Debug, Clone)]
struct TrackedLock {
    lock: HtlcLock,
    claimed_at: Option<Tick>,
    refunded_at: Option<Tick>,
}

pub struct World {
    scenario: Scenario,
    program: ProgramConfig,
    source: Chain,
    target: Chain,
    hosts: Vec<Host>,
    clients: Vec<Client>,
    now: Tick,
    start: Tick,
    faults: VecDeque<(Tick, FaultTarget, FaultKind)>,
    last_leader_target: Option<usize>,
    inbox: BTreeMap<Tick, Vec<Delivery>>,
    client_inbox: BTreeMap<Tick, Vec<(usize, ClientResponse)>>,
    tracker: Tracker,
    secret_patterns: Vec<String>,
    aborted: Option<String>,
    quiescent: bool,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<World, RunError> {
        scenario.validate()?;
        let program = scenario.program();
        let manufacturer = Manufacturer::new(&scenario.seed.to_le_bytes());
        let map_chain = |e: ChainError| RunError::Setup(e.to_string());
        let mut source = Chain::new(scenario.chain_config(ChainId::SOURCE)).map_err(map_chain)?;
        let mut target = Chain::new(scenario.chain_config(ChainId::TARGET)).map_err(map_chain)?;
        let vault_config = VaultConfig {
            program_digest: program.digest(),
            manufacturer_root: manufacturer.root_public_key(),
            deployer: Scenario::deployer_address(),
            lag_bound: BOOTSTRAP_HEADERS,
            tau_w: program.tau_w,
            pledge_floor: scenario.exchange.pledge_floor,
            pledge_bps: scenario.exchange.pledge_bps,
        };
        if source.config().mode == ChainMode::Contract {
            source.deploy_vault(vault_config.clone());
        }
        target.deploy_vault(vault_config);

        let lp = Scenario::lp_address();
        source.mint(lp, scenario.exchange.liquidity_source);
        target.mint(lp, scenario.exchange.liquidity_target);

        let hosts = (0..scenario.operators)
            .map(|i| {
                let mut tee = Tee::new(manufacturer.clone(), format!("platform-{}-{i}", scenario.seed).as_bytes());
                let eid = tee.install(EnclaveId(i as u64), program.clone());
                Host {
                    address: Address::named(&format!("host-{i}")),
                    tee,
                    eid,
                    filter: HostFilter::default(),
                    pending_submits: Vec::new(),
                }
            })
            .collect();

        let mut clients = Vec::new();
        for (i, spec) in scenario.clients.iter().enumerate() {
            let keys = KeyPair::from_seed(format!("client-{}-{i}-{}", scenario.seed, spec.name).as_bytes());
            let address = Address::of_key(&keys.public_key);
            source.mint(address, spec.balance);
            let script = scenario.script.iter().filter(|s| s.client == i).map(|s| (s.tick, s.action.clone())).collect();
            clients.push(Client {
                name: spec.name.clone(),
                keys,
                address,
                auto_challenge: spec.auto_challenge,
                script,
                awake_at: 0,
                deposits: Vec::new(),
                swaps: Vec::new(),
                inbox: Vec::new(),
            });
        }
        let mut faults: Vec<_> = scenario.faults.iter().map(|f| (f.tick, f.target, f.kind)).collect();
        faults.sort_by_key(|f| f.0);

        let mut world = World {
            start: setup_ticks(scenario.timing.delta_s, scenario.timing.delta_t),
            scenario,
            program,
            source,
            target,
            hosts,
            clients,
            now: 0,
            faults: faults.into(),
            last_leader_target: None,
            inbox: BTreeMap::new(),
            client_inbox: BTreeMap::new(),
            tracker: Tracker::default(),
            secret_patterns: Vec::new(),
            aborted: None,
            quiescent: false,
        };
        world.setup()?;
        for h in &world.hosts {
            let e = h.tee.enclave(h.eid).expect("installed");
            for secret in e.secret_fingerprints() {
                world.secret_patterns.push(hex::encode(&secret));
                if secret.len() == 8 {
                    let v = u64::from_le_bytes(secret.try_into().unwrap());
                    world.secret_patterns.push(v.to_string());
                }
            }
        }
        Ok(world)
    }

    /// Genesis blocks, light-client bootstrap, registration and funding.
    fn setup(&mut self) -> Result<(), RunError> {
        let k = BOOTSTRAP_HEADERS as u64;
        for t in 1..=k {
            self.advance_chains(t);
        }
        self.now = k;
        let lp = Scenario::lp_address();
        for chain_id in [ChainId::SOURCE, ChainId::TARGET] {
            let contract = self.chain(chain_id).config().mode == ChainMode::Contract;
            let params = LightClientParams::of(self.chain(chain_id).config(), BOOTSTRAP_HEADERS);
            let chain = self.chain_mut(chain_id);
            let tip = chain.tip().height;
            let headers: Vec<_> = ((tip + 1 - k)..=tip).map(|h| chain.header(h).unwrap().clone()).collect();
            let blocks: Vec<_> = ((tip + 1 - k)..=tip).map(|h| chain.receipts(h).to_vec()).collect();
            let epoch = chain.epoch_of(tip);
            let (current, next) = (chain.committee(epoch), chain.committee(epoch + 1));
            let mut registrations = Vec::new();
            for h in self.hosts.iter_mut() {
                let enclave = h.tee.enclave_mut(h.eid).expect("installed");
                let proof = enclave
                    .bootstrap(params, &headers, current.clone(), next.clone(), &blocks)
                    .map_err(|e| RunError::Setup(e.to_string()))?;
                let pk = enclave.public_key(chain_id).expect("key per chain");
                let quote = h.tee.quote(h.eid, chain_id).expect("installed");
                registrations.push((h.address, VaultCall::Register { quote, block_proof: proof, pk }));
            }
            if !contract {
                continue;
            }
            let now = self.now;
            let chain = self.chain_mut(chain_id);
            for (addr, call) in registrations {
                chain.submit_tx(addr, Call::Vault(call), 0, now).map_err(|e| RunError::Setup(e.to_string()))?;
            }
            chain
                .submit_tx(Scenario::deployer_address(), Call::Vault(VaultCall::CloseRegistration), 0, now)
                .map_err(|e| RunError::Setup(e.to_string()))?;
            let liquidity = chain.balance(&lp);
            chain
                .submit_tx(lp, Call::Vault(VaultCall::FundLiquidity), liquidity, now)
                .map_err(|e| RunError::Setup(e.to_string()))?;
        }
        Ok(())
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn program(&self) -> &ProgramConfig {
        &self.program
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// First tick at which clients may act.
    pub fn start_tick(&self) -> Tick {
        self.start
    }

    pub fn source(&self) -> &Chain {
        &self.source
    }

    pub fn target(&self) -> &Chain {
        &self.target
    }

    pub fn chain(&self, id: ChainId) -> &Chain {
        if id == ChainId::SOURCE {
            &self.source
        } else {
            &self.target
        }
    }

    pub fn chain_mut(&mut self, id: ChainId) -> &mut Chain {
        if id == ChainId::SOURCE {
            &mut self.source
        } else {
            &mut self.target
        }
    }

    pub fn tee(&self, operator: usize) -> &Tee {
        &self.hosts[operator].tee
    }

    pub fn enclave(&self, operator: usize) -> &crate::enclave::Enclave {
        let h = &self.hosts[operator];
        h.tee.enclave(h.eid).expect("installed")
    }

    pub fn host_filter_mut(&mut self, operator: usize) -> &mut HostFilter {
        &mut self.hosts[operator].filter
    }

    pub fn client_address(&self, client: usize) -> Address {
        self.clients[client].address
    }

    pub fn is_quiescent(&self) -> bool {
        self.quiescent
    }

    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    /// The operator currently leading consensus, if any.
    pub fn leader(&self) -> Option<usize> {
        (0..self.hosts.len())
            .filter(|&i| !self.hosts[i].tee.is_suspended())
            .filter_map(|i| self.enclave(i).raft().filter(|r| r.is_leader()).map(|r| (r.term(), i)))
            .max()
            .map(|(_, i)| i)
    }

    fn advance_chains(&mut self, t: Tick) {
        self.source.advance_tick(t).expect("time advances");
        self.target.advance_tick(t).expect("time advances");
    }

    /// Runs until quiescence, an aborted invariant, or the horizon.
    pub fn run(mut self) -> RunReport {
        self.run_to_end();
        self.report()
    }

    pub fn run_to_end(&mut self) {
        while self.now < self.scenario.max_ticks && !self.quiescent && self.aborted.is_none() {
            self.step();
        }
    }

    /// Both chains' event logs as JSON lines, source first.
    pub fn export_events(&self) -> String {
        self.source.export_events(0) + &self.target.export_events(0)
    }

    /// Advances one tick.
    pub fn step(&mut self) {
        let t = self.now + 1;
        self.now = t;
        self.apply_faults(t);
        self.advance_chains(t);
        self.scan_chains();
        self.step_clients(t);
        for i in 0..self.hosts.len() {
            self.step_host(i, t);
        }
        if self.scenario.audit {
            self.audit(t);
        }
        self.quiescent = self.check_quiescent(t);
    }

    fn apply_faults(&mut self, t: Tick) {
        while self.faults.front().is_some_and(|f| f.0 <= t) {
            let (_, target, kind) = self.faults.pop_front().unwrap();
            let targets: Vec<usize> = match (target, kind) {
                (FaultTarget::Operator(i), _) => vec![i],
                (FaultTarget::All, _) => (0..self.hosts.len()).collect(),
                (FaultTarget::Leader, FaultKind::Resume) => self.last_leader_target.into_iter().collect(),
                (FaultTarget::Leader, _) => {
                    let i = self.leader().unwrap_or(0);
                    self.last_leader_target = Some(i);
                    vec![i]
                }
            };
            for i in targets {
                let h = &mut self.hosts[i];
                match kind {
                    FaultKind::Suspend => {
                        h.tee.suspend();
                        h.filter.available = false;
                    }
                    FaultKind::Resume => {
                        h.tee.unsuspend();
                        h.filter.available = true;
                    }
                    FaultKind::Filter { class: Some(c), action } => h.filter.set(c, action),
                    FaultKind::Filter { class: None, action } => h.filter.set_all(action),
                }
            }
        }
    }

    fn scan_chains(&mut self) {
        for chain_id in [ChainId::SOURCE, ChainId::TARGET] {
            let from = self.tracker.scanned.get(&chain_id).map_or(0, |h| h + 1);
            let chain = if chain_id == ChainId::SOURCE { &self.source } else { &self.target };
            let tip = chain.tip().height;
            let mut successes = Vec::new();
            for h in from..=tip {
                let ts = chain.header(h).unwrap().timestamp;
                for r in chain.receipts(h) {
                    if let (true, Some(d)) = (r.succeeded(), r.payload_digest) {
                        successes.push((chain_id, d));
                    }
                    if !r.succeeded() {
                        continue;
                    }
                    for ev in &r.events {
                        track_event(&mut self.tracker, chain_id, ts, ev);
                    }
                }
            }
            for key in successes {
                *self.tracker.payload_successes.entry(key).or_default() += 1;
            }
            self.tracker.scanned.insert(chain_id, tip);
        }
    }

    fn send_to_hosts(&mut self, at: Tick, input: EnclaveInput) {
        for to in 0..self.hosts.len() {
            self.inbox.entry(at).or_default().push(Delivery { to, input: input.clone(), filtered: false });
        }
    }

    fn step_clients(&mut self, t: Tick) {
        let de = self.scenario.timing.delta_e;
        let ds = self.scenario.timing.delta_s;
        let tau_c = self.scenario.timing.tau_c();
        let tau_w = self.scenario.timing.tau_w();
        if let Some(msgs) = self.client_inbox.remove(&t) {
            for (c, resp) in msgs {
                if self.clients[c].awake(t) {
                    self.clients[c].inbox.push(resp);
                }
            }
        }
        for c in 0..self.clients.len() {
            if !self.clients[c].awake(t) {
                continue;
            }
            // Scripted actions.
            while self.clients[c].script.front().is_some_and(|s| s.0 <= t) && self.clients[c].awake(t) {
                let (_, action) = self.clients[c].script.pop_front().unwrap();
                self.client_action(c, action, t);
            }
            if !self.clients[c].awake(t) {
                continue;
            }
            let addr = self.clients[c].address;
            let inbox = std::mem::take(&mut self.clients[c].inbox);
            for resp in inbox {
                let client = &mut self.clients[c];
                match resp {
                    ClientResponse::Accepted { deposit_id }
                    | ClientResponse::Completed { deposit_id }
                    | ClientResponse::Rejected { deposit_id, reason: RequestRejection::Duplicate } => {
                        if let Some(d) = client.deposits.iter_mut().find(|d| d.id == Some(deposit_id)) {
                            d.acknowledged = true;
                        }
                    }
                    ClientResponse::Rejected { .. } => {}
                    ClientResponse::HtlcTerms { request_id, lock } => {
                        if let Some(s) = client.swaps.iter_mut().find(|s| s.request.id() == request_id) {
                            let ok = lock.amount == s.request.amount
                                && lock.refund_address == addr
                                && lock.claim_address == Scenario::htlc_claim_address();
                            if ok && s.lock.is_none() {
                                s.lock = Some(lock);
                            }
                        }
                    }
                }
            }
            // Deposit lifecycle.
            for k in 0..self.clients[c].deposits.len() {
                let d = self.clients[c].deposits[k].clone();
                if d.failed {
                    continue;
                }
                let id = match d.id {
                    Some(id) => id,
                    None => {
                        let Some((_, r)) = self.source.receipt(&d.tx) else { continue };
                        let found = r.events.iter().find_map(|e| match e {
                            Event::Vault(VaultEvent::Deposit { id, timestamp, .. }) => Some((*id, *timestamp)),
                            _ => None,
                        });
                        let entry = &mut self.clients[c].deposits[k];
                        let Some((id, ts)) = found else {
                            entry.failed = true;
                            continue;
                        };
                        entry.id = Some(id);
                        entry.timestamp = Some(ts);
                        id
                    }
                };
                let resend = d.requested_at.is_some_and(|first| {
                    !d.acknowledged && t < first + tau_c && t >= d.last_sent + RESEND_AFTER_E * de + 2
                });
                if d.requested_at.is_none() || resend {
                    let request = ExchangeRequest::new(id, d.value, ChainId::TARGET, addr, &self.clients[c].keys);
                    let proof = self.source.inclusion_proof(&d.tx);
                    self.send_to_hosts(t + de, EnclaveInput::ClientRequest { request, proof });
                    let entry = &mut self.clients[c].deposits[k];
                    entry.requested_at.get_or_insert(t);
                    entry.last_sent = t;
                    continue;
                }
                if !self.clients[c].auto_challenge {
                    continue;
                }
                let record = self.source.vault().and_then(|v| v.deposits.get(&id)).cloned();
                let Some(record) = record else { continue };
                let transferred = self.tracker.transfers.contains_key(&id);
                if !d.challenge_submitted
                    && !record.confirmed
                    && !record.under_challenge
                    && !transferred
                    && t >= d.requested_at.unwrap() + tau_c
                {
                    self.submit_challenge(c, k, id, t);
                }
                if let (false, true, Some(started)) = (d.resolve_submitted, record.under_challenge, record.challenge_started_at)
                {
                    // Executes exactly when the window has elapsed.
                    if t + ds > started + tau_w {
                        let call = Call::Vault(VaultCall::ResolveChallenge { id });
                        if self.source.submit_tx(addr, call, 0, t).is_ok() {
                            self.clients[c].deposits[k].resolve_submitted = true;
                        }
                    }
                }
            }
            // HTLC lifecycle.
            for k in 0..self.clients[c].swaps.len() {
                let s = self.clients[c].swaps[k].clone();
                let Some(lock) = s.lock else { continue };
                if !s.lock_submitted {
                    if t + ds < lock.deadline {
                        let call = Call::Htlc(HtlcCall::Lock { lock: lock.clone() });
                        if self.source.submit_tx(addr, call, lock.amount, t).is_ok() {
                            self.clients[c].swaps[k].lock_submitted = true;
                        }
                    }
                    continue;
                }
                if !s.refund_submitted && t + ds >= lock.deadline {
                    let open = self.tracker.locks.iter().find(|(_, l)| l.lock == lock && l.claimed_at.is_none() && l.refunded_at.is_none());
                    if let Some((id, _)) = open {
                        let call = Call::Htlc(HtlcCall::Refund { id: *id });
                        if self.source.submit_tx(addr, call, 0, t).is_ok() {
                            self.clients[c].swaps[k].refund_submitted = true;
                        }
                    }
                }
            }
        }
    }

    fn submit_challenge(&mut self, c: usize, k: usize, id: Digest, t: Tick) {
        let addr = self.clients[c].address;
        let value = self.clients[c].deposits[k].value;
        let Some(vault) = self.source.vault() else { return };
        let pledge = vault.required_pledge(value);
        let call = Call::Vault(VaultCall::StartChallenge { id, value });
        if self.source.submit_tx(addr, call, pledge, t).is_ok() {
            self.clients[c].deposits[k].challenge_submitted = true;
        }
    }

    fn client_action(&mut self, c: usize, action: ClientAction, t: Tick) {
        let addr = self.clients[c].address;
        match action {
            ClientAction::Deposit { value } => {
                if let Ok(tx) = self.source.submit_tx(addr, Call::Vault(VaultCall::Deposit), value, t) {
                    self.clients[c].deposits.push(ClientDeposit { value, tx, ..ClientDeposit::default() });
                }
            }
            ClientAction::Sleep { ticks } => self.clients[c].awake_at = t + ticks,
            ClientAction::Challenge => {
                let last = self.clients[c].deposits.iter().rposition(|d| d.id.is_some());
                if let Some(k) = last {
                    let id = self.clients[c].deposits[k].id.unwrap();
                    self.submit_challenge(c, k, id, t);
                }
            }
            ClientAction::Resolve => {
                let last = self.clients[c].deposits.iter().rev().find_map(|d| d.id);
                if let Some(id) = last {
                    let _ = self.source.submit_tx(addr, Call::Vault(VaultCall::ResolveChallenge { id }), 0, t);
                }
            }
            ClientAction::HtlcSwap { amount } => {
                let nonce = self.clients[c].swaps.len() as u64;
                let request = HtlcRequest { client: addr, amount, receiver: addr, nonce };
                let signed = SignedHtlcRequest::new(request.clone(), &self.clients[c].keys);
                self.send_to_hosts(t + self.scenario.timing.delta_e, EnclaveInput::HtlcRequest { request: signed });
                self.clients[c].swaps.push(ClientSwap {
                    request,
                    sent_at: t,
                    lock: None,
                    lock_submitted: false,
                    refund_submitted: false,
                });
            }
        }
    }

    fn step_host(&mut self, i: usize, t: Tick) {
        let de = self.scenario.timing.delta_e;
        // Delayed submissions.
        let due: Vec<_> = {
            let h = &mut self.hosts[i];
            let (due, later) = std::mem::take(&mut h.pending_submits).into_iter().partition(|p| p.0 <= t);
            h.pending_submits = later;
            due
        };
        let address = self.hosts[i].address;
        for (_, chain, call) in due {
            let _ = self.chain_mut(chain).submit_tx(address, call, 0, t);
        }

        let mut inputs = Vec::new();
        let mut deliveries = Vec::new();
        if let Some(list) = self.inbox.get_mut(&t) {
            let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(list).into_iter().partition(|d| d.to == i);
            *list = rest;
            deliveries = mine;
        }
        for d in deliveries {
            let class = d.input.class().expect("network inputs have a class");
            match (self.hosts[i].filter.action(class), d.filtered) {
                (HostAction::Drop, _) => {}
                (HostAction::Delay(k), false) if k > 0 => {
                    self.inbox.entry(t + k).or_default().push(Delivery { filtered: true, ..d });
                }
                (HostAction::Replay(k), false) => {
                    for _ in 0..=k {
                        inputs.push(d.input.clone());
                    }
                }
                _ => inputs.push(d.input),
            }
        }
        inputs.extend(self.chain_feed(i, t));
        inputs.push(EnclaveInput::Tick);

        let eid = self.hosts[i].eid;
        let mut outputs = Vec::new();
        for input in inputs {
            if let Some(resumed) = self.hosts[i].tee.resume(eid, input, t) {
                outputs.extend(resumed.outputs);
            }
        }
        if self.scenario.audit && !outputs.is_empty() {
            let text = serde_json::to_string(&outputs).expect("outputs serialize");
            if let Some(p) = self.secret_patterns.iter().find(|p| text.contains(p.as_str())) {
                self.abort(t, "key_confinement", format!("operator {i} emitted secret material {p}"));
            }
        }
        for out in outputs {
            let (extra, copies) = match self.hosts[i].filter.action(out.class()) {
                HostAction::Drop => continue,
                HostAction::Delay(k) => (k, 1),
                HostAction::Replay(k) => (0, k as usize + 1),
                HostAction::Deliver => (0, 1),
            };
            for _ in 0..copies {
                self.route(i, out.clone(), t, extra, de);
            }
        }
    }

    fn route(&mut self, from: usize, out: EnclaveOutput, t: Tick, extra: Tick, de: Tick) {
        match out {
            EnclaveOutput::Raft { envelope } => {
                let to = envelope.to;
                if to < self.hosts.len() {
                    let input = EnclaveInput::Raft { envelope };
                    self.inbox.entry(t + de + extra).or_default().push(Delivery { to, input, filtered: false });
                }
            }
            EnclaveOutput::Share { share } => {
                for to in (0..self.hosts.len()).filter(|&j| j != from) {
                    let input = EnclaveInput::Share { share: share.clone() };
                    self.inbox.entry(t + de + extra).or_default().push(Delivery { to, input, filtered: false });
                }
            }
            EnclaveOutput::Submit { chain, call } => {
                if extra == 0 {
                    let address = self.hosts[from].address;
                    let _ = self.chain_mut(chain).submit_tx(address, call, 0, t);
                } else {
                    self.hosts[from].pending_submits.push((t + extra, chain, call));
                }
            }
            EnclaveOutput::ClientResponse { client, response } => {
                if let Some(c) = self.clients.iter().position(|c| c.address == client) {
                    self.client_inbox.entry(t + de + extra).or_default().push((c, response));
                }
            }
        }
    }

    /// New headers and block data for the enclave, subject to the host's
    /// chain filters.
    fn chain_feed(&mut self, i: usize, t: Tick) -> Vec<EnclaveInput> {
        let mut inputs = Vec::new();
        let filter = self.hosts[i].filter.clone();
        let h = &self.hosts[i];
        let Some(enclave) = h.tee.enclave(h.eid) else { return inputs };
        if h.tee.is_suspended() {
            return inputs;
        }
        for chain_id in [ChainId::SOURCE, ChainId::TARGET] {
            let Some(lc) = enclave.light_client(chain_id) else { continue };
            let lc_tip = lc.tip().height;
            let processed = enclave.processed_height(chain_id);
            let chain = if chain_id == ChainId::SOURCE { &mut self.source } else { &mut self.target };
            let visible = |action: HostAction, ts: Tick| match action {
                HostAction::Drop => false,
                HostAction::Delay(k) => ts + k <= t,
                _ => true,
            };
            let header_action = filter.action(MessageClass::ChainHeader);
            let mut fed_tip = lc_tip;
            for height in lc_tip + 1..=chain.tip().height {
                let header = chain.header(height).unwrap().clone();
                if !visible(header_action, header.timestamp) {
                    break;
                }
                let following = chain.committee(chain.epoch_of(height) + 1);
                let copies = if let HostAction::Replay(k) = header_action { k + 1 } else { 1 };
                for _ in 0..copies {
                    inputs.push(EnclaveInput::Header { chain: chain_id, header: header.clone(), following: Some(following.clone()) });
                }
                fed_tip = height;
            }
            let event_action = filter.action(MessageClass::ChainEvent);
            for height in processed + 1..=fed_tip {
                let ts = chain.header(height).unwrap().timestamp;
                if !visible(event_action, ts) {
                    break;
                }
                inputs.push(EnclaveInput::Block { chain: chain_id, height, receipts: chain.receipts(height).to_vec() });
            }
        }
        inputs
    }

    fn abort(&mut self, t: Tick, property: &str, detail: String) {
        if self.aborted.is_none() {
            self.aborted = Some(format!("{property} violated at tick {t}: {detail}"));
        }
    }

    /// Per-tick invariant checks.
    fn audit(&mut self, t: Tick) {
        let unbalanced = [&self.source, &self.target].into_iter().find(|c| c.total_supply() != c.minted());
        if let Some(chain) = unbalanced {
            let detail = format!("{} supply {} != minted {}", chain.id(), chain.total_supply(), chain.minted());
            return self.abort(t, "conservation", detail);
        }
        if let Some(detail) = log_divergence(self) {
            return self.abort(t, "log_safety", detail);
        }
        if let Some(((chain, d), n)) = self.tracker.payload_successes.iter().find(|(_, &n)| n > 1) {
            let detail = format!("payload {} executed {n} times on {chain}", &d.to_hex()[..16]);
            return self.abort(t, "replay_guard", detail);
        }
        for (id, dep) in &self.tracker.deposits {
            if dep.refunded_at.is_some() && self.tracker.transfers.contains_key(id) {
                let detail = format!("deposit {} refunded with a finalized transfer", &id.to_hex()[..16]);
                return self.abort(t, "atomicity", detail);
            }
        }
    }

    fn check_quiescent(&self, t: Tick) -> bool {
        if t < self.start {
            return false;
        }
        let tau_w = self.scenario.timing.tau_w();
        for c in &self.clients {
            if !c.script.is_empty() || !c.awake(t) {
                return false;
            }
            for d in &c.deposits {
                if d.failed {
                    continue;
                }
                let Some(id) = d.id else { return false };
                if outcome_of(&self.tracker, &id) == DepositOutcome::PendingAtHorizon {
                    return false;
                }
                if t < d.timestamp.unwrap_or(0) + tau_w {
                    return false;
                }
            }
            for s in &c.swaps {
                if swap_outcome(&self.tracker, s, t, &self.program) == SwapOutcome::PendingAtHorizon {
                    return false;
                }
            }
        }
        self.source.mempool_len() == 0 && self.target.mempool_len() == 0
    }

    pub fn report(&self) -> RunReport {
        let t = self.now;
        let mut client_of: BTreeMap<Address, String> = BTreeMap::new();
        for c in &self.clients {
            client_of.insert(c.address, c.name.clone());
        }
        let mut deposits = Vec::new();
        for (id, dep) in &self.tracker.deposits {
            let Some(client) = client_of.get(&dep.sender) else { continue };
            let transfers = self.tracker.transfers.get(id);
            deposits.push(DepositReport {
                id: *id,
                client: client.clone(),
                value: dep.value,
                deposited_at: dep.timestamp,
                outcome: outcome_of(&self.tracker, id),
                transfers: transfers.map_or(0, |v| v.len()),
                transfer_amount: transfers.and_then(|v| v.first()).map(|x| x.0),
                challenged_at: dep.challenged_at,
                refunded_at: dep.refunded_at,
            });
        }
        let mut swaps = Vec::new();
        for c in &self.clients {
            for s in &c.swaps {
                let rid = s.request.id();
                let tracked = s.lock.as_ref().and_then(|l| self.tracker.locks.iter().find(|(_, t)| &t.lock == l));
                swaps.push(SwapReport {
                    request_id: rid,
                    client: c.name.clone(),
                    amount: s.request.amount,
                    lock_id: tracked.map(|(id, _)| *id),
                    deadline: s.lock.as_ref().map(|l| l.deadline),
                    claimed_at: tracked.and_then(|(_, l)| l.claimed_at),
                    refunded_at: tracked.and_then(|(_, l)| l.refunded_at),
                    transfers: self.tracker.transfers.get(&rid).map_or(0, |v| v.len()),
                    outcome: swap_outcome(&self.tracker, s, t, &self.program),
                });
            }
        }
        let mut costs = BTreeMap::new();
        for chain in [&self.source, &self.target] {
            let per_call: BTreeMap<String, CallCost> = chain
                .costs()
                .iter()
                .map(|(name, (calls, meter))| (name.clone(), CallCost { calls: *calls, meter: *meter }))
                .collect();
            costs.insert(chain.id(), per_call);
        }
        let transfer_items = self.tracker.transfers.values().map(|v| v.len() as u64).sum();

        let mut consensus = ConsensusReport::default();
        for i in 0..self.hosts.len() {
            if let Some(r) = self.enclave(i).raft() {
                let m = r.metrics();
                consensus.elections_started += m.elections_started;
                consensus.terms_won += m.terms_won;
                consensus.entries_committed = consensus.entries_committed.max(r.commit_index());
                consensus.final_term = consensus.final_term.max(r.term());
            }
        }

        let pool = self.program.initial_pool();
        let mut ledger = RewardLedger::default();
        let mut fees = 0;
        for records in self.tracker.transfers.values() {
            for (_, signers) in records {
                ledger.distribute(self.program.fee_per_tx, &pool.lp_shares, signers, self.program.fee_share);
                fees += self.program.fee_per_tx;
            }
        }
        let rewards = RewardReport {
            fees,
            to_lps: ledger.lp_accrued.clone(),
            to_operators: ledger.operator_accrued.clone(),
            dust: ledger.dust,
        };

        let properties = self.properties(&deposits, &swaps);
        let threshold = self.source.vault().or(self.target.vault()).map_or(0, |v| v.threshold);
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            operators: self.scenario.operators,
            threshold,
            ticks: t,
            quiescent: self.quiescent,
            deposits,
            swaps,
            costs,
            transfer_items,
            consensus,
            rewards,
            properties,
            aborted: self.aborted.clone(),
        }
    }

    fn properties(&self, deposits: &[DepositReport], swaps: &[SwapReport]) -> Vec<PropertyVerdict> {
        let short = |d: &Digest| d.to_hex()[..16].to_string();
        let mut out = Vec::new();

        let atomicity: Vec<String> = deposits
            .iter()
            .filter(|d| !d.outcome.is_legal() || d.transfers > 1)
            .map(|d| format!("{} is {:?} with {} transfers", short(&d.id), d.outcome, d.transfers))
            .collect();
        out.push(PropertyVerdict::new("atomicity", atomicity));

        let mut seen = BTreeSet::new();
        let dupes: Vec<String> = deposits.iter().filter(|d| !seen.insert(d.id)).map(|d| short(&d.id)).collect();
        let mut missing = Vec::new();
        for c in &self.clients {
            for d in c.deposits.iter().filter_map(|d| d.id) {
                if !seen.contains(&d) {
                    missing.push(format!("{} not reported", short(&d)));
                }
            }
        }
        out.push(PropertyVerdict::new("every_deposit_once", dupes.into_iter().chain(missing).collect()));

        // Independent replay of the committed log against a fresh pool.
        let expected = expected_amounts(self);
        let mut paid_out = Vec::new();
        for d in deposits.iter().filter(|d| d.outcome == DepositOutcome::Confirmed) {
            match (expected.get(&d.id), d.transfer_amount) {
                (Some(e), Some(a)) if *e == a => {}
                (e, a) => paid_out.push(format!("{}: expected {:?}, transferred {:?}", short(&d.id), e, a)),
            }
        }
        out.push(PropertyVerdict::new("confirmed_implies_transfer", paid_out));

        let swap_ids: BTreeSet<Digest> = swaps.iter().map(|s| s.request_id).collect();
        let mut orphans = Vec::new();
        for id in self.tracker.transfers.keys() {
            if swap_ids.contains(id) {
                continue;
            }
            match self.tracker.deposits.get(id) {
                None => orphans.push(format!("transfer for unknown deposit {}", short(id))),
                Some(dep) if dep.refunded_at.is_some() => orphans.push(format!("transfer for refunded deposit {}", short(id))),
                Some(_) => {}
            }
        }
        out.push(PropertyVerdict::new("transfer_implies_deposit", orphans));

        let htlc: Vec<String> = swaps
            .iter()
            .filter(|s| !s.outcome.is_legal() || (s.claimed_at.is_some() && s.refunded_at.is_some()))
            .map(|s| format!("swap {} is {:?}", short(&s.request_id), s.outcome))
            .collect();
        out.push(PropertyVerdict::new("htlc_exclusivity", htlc));

        let conservation: Vec<String> = [&self.source, &self.target]
            .iter()
            .filter(|c| c.total_supply() != c.minted())
            .map(|c| format!("{} supply {} != minted {}", c.id(), c.total_supply(), c.minted()))
            .collect();
        out.push(PropertyVerdict::new("conservation", conservation));

        out.push(PropertyVerdict::new("log_safety", log_divergence(self).into_iter().collect()));

        let replay: Vec<String> = self
            .tracker
            .payload_successes
            .iter()
            .filter(|(_, &n)| n > 1)
            .map(|((c, d), n)| format!("{} executed {n} times on {c}", short(d)))
            .collect();
        out.push(PropertyVerdict::new("replay_guard", replay));

        let leaked = match &self.aborted {
            Some(reason) if reason.starts_with("key_confinement") => vec![reason.clone()],
            _ => vec![],
        };
        out.push(PropertyVerdict::new("key_confinement", leaked));
        out
    }
}

fn track_event(tracker: &mut Tracker, chain: ChainId, ts: Tick, ev: &Event) {
    match (chain, ev) {
        (ChainId::SOURCE, Event::Vault(v)) => match v {
            VaultEvent::Deposit { id, sender, value, timestamp } => {
                tracker.deposits.insert(
                    *id,
                    TrackedDeposit { sender: *sender, value: *value, timestamp: *timestamp, ..TrackedDeposit::default() },
                );
            }
            VaultEvent::Confirmed { id } | VaultEvent::Checkpointed { id, .. } | VaultEvent::ChallengeResponded { id, .. } => {
                if let Some(d) = tracker.deposits.get_mut(id) {
                    d.confirmed = true;
                }
            }
            VaultEvent::Challenge { id, started_at, .. } => {
                if let Some(d) = tracker.deposits.get_mut(id) {
                    d.challenged_at.get_or_insert(*started_at);
                }
            }
            VaultEvent::Refunded { id, .. } => {
                if let Some(d) = tracker.deposits.get_mut(id) {
                    d.refunded_at = Some(ts);
                }
            }
            _ => {}
        },
        (ChainId::SOURCE, Event::Htlc(h)) => match h {
            HtlcEvent::Locked { id, lock } => {
                tracker.locks.insert(*id, TrackedLock { lock: lock.clone(), claimed_at: None, refunded_at: None });
            }
            HtlcEvent::Claimed { id, .. } => {
                if let Some(l) = tracker.locks.get_mut(id) {
                    l.claimed_at = Some(ts);
                }
            }
            HtlcEvent::Refunded { id } => {
                if let Some(l) = tracker.locks.get_mut(id) {
                    l.refunded_at = Some(ts);
                }
            }
        },
        (ChainId::TARGET, Event::Vault(VaultEvent::Transfer { deposit_id, amount, signers, .. })) => {
            tracker.transfers.entry(*deposit_id).or_default().push((*amount, signers.clone()));
        }
        _ => {}
    }
}

fn outcome_of(tracker: &Tracker, id: &Digest) -> DepositOutcome {
    let dep = &tracker.deposits[id];
    let transferred = tracker.transfers.contains_key(id);
    match (dep.confirmed, dep.refunded_at.is_some(), transferred) {
        (_, true, true) => DepositOutcome::RefundedWithTransfer,
        (_, true, false) => DepositOutcome::Refunded,
        (true, false, true) => DepositOutcome::Confirmed,
        (true, false, false) => DepositOutcome::ConfirmedWithoutTransfer,
        (false, false, _) => DepositOutcome::PendingAtHorizon,
    }
}

fn swap_outcome(tracker: &Tracker, s: &ClientSwap, now: Tick, program: &ProgramConfig) -> SwapOutcome {
    let transferred = tracker.transfers.contains_key(&s.request.id());
    let tracked = s.lock.as_ref().and_then(|l| tracker.locks.values().find(|t| &t.lock == l));
    match tracked {
        Some(l) => match (l.claimed_at.is_some(), l.refunded_at.is_some(), transferred) {
            (true, false, true) => SwapOutcome::Claimed,
            (true, _, false) => SwapOutcome::ClaimedWithoutTransfer,
            (false, true, false) => SwapOutcome::Refunded,
            (_, true, true) => SwapOutcome::RefundedAfterTransfer,
            (false, false, _) => SwapOutcome::PendingAtHorizon,
        },
        None if transferred => SwapOutcome::PendingAtHorizon,
        // Terms can arrive until the request would have expired.
        None if now <= s.sent_at + program.htlc_timeout => SwapOutcome::PendingAtHorizon,
        None => SwapOutcome::NotStarted,
    }
}

/// First disagreement between committed logs, if any.
fn log_divergence(world: &World) -> Option<String> {
    let logs: Vec<&[crate::consensus::LogEntry]> =
        (0..world.hosts.len()).filter_map(|i| world.enclave(i).raft().map(|r| r.committed())).collect();
    let longest = logs.iter().max_by_key(|l| l.len())?;
    for (i, log) in logs.iter().enumerate() {
        if let Some(pos) = log.iter().zip(longest.iter()).position(|(a, b)| a.digest() != b.digest()) {
            return Some(format!("operator {i} diverges at index {}", pos + 1));
        }
    }
    None
}

/// `AMM.exchange(value - F)` for every deposit and swap the committed log
/// accepted, recomputed from the on-chain deposit values.
fn expected_amounts(world: &World) -> BTreeMap<Digest, Amount> {
    let mut out = BTreeMap::new();
    let log = (0..world.hosts.len())
        .filter_map(|i| world.enclave(i).raft().map(|r| r.committed().to_vec()))
        .max_by_key(|l| l.len())
        .unwrap_or_default();
    let fee = world.program.fee_per_tx;
    let mut pool: Pool = world.program.initial_pool();
    let swap_values: BTreeMap<Digest, Amount> =
        world.clients.iter().flat_map(|c| c.swaps.iter().map(|s| (s.request.id(), s.request.amount))).collect();
    for entry in &log {
        let items: Vec<(Digest, Amount, Amount)> = match &entry.payload {
            Payload::Transfers { intents, .. } => intents.iter().map(|i| (i.deposit_id, i.input, i.amount)).collect(),
            Payload::HtlcPair { request, input, amount, .. } => vec![(request.id(), *input, *amount)],
            _ => continue,
        };
        for (id, input, quoted) in items {
            if out.contains_key(&id) || pool.quote(input) != Ok(quoted) {
                continue;
            }
            let value = world.tracker.deposits.get(&id).map(|d| d.value).or(swap_values.get(&id).copied());
            let Some(value) = value else { continue };
            if value < fee || value - fee != input {
                continue;
            }
            if let Ok(y) = pool.exchange(value - fee) {
                out.insert(id, y);
            }
        }
    }
    out
}

/// Runs a scenario to completion.
pub fn run(scenario: Scenario) -> Result<RunReport, RunError> {
    Ok(World::new(scenario)?.run())
}
