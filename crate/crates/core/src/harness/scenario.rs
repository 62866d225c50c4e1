//! Scenario files: timing, chains, operators, clients and scripted faults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::FeeShare;
use crate::chain::{ChainConfig, ChainMode, CommitteeThreshold};
use crate::consensus::RaftConfig;
use crate::enclave::{HostAction, MessageClass, ProgramConfig};
use crate::types::{Address, Amount, ChainId, Tick};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("operator count {0} is not odd and positive")]
    OperatorCount(usize),
    #[error("tau_c = {tau_c} is below 2*delta_s + 2*delta_e + delta_t = {bound}")]
    TauC { tau_c: Tick, bound: Tick },
    #[error("tau_w = {tau_w} does not exceed 2*delta_s + delta_e = {bound}")]
    TauW { tau_w: Tick, bound: Tick },
    #[error("delays must be at least one tick")]
    ZeroDelay,
    #[error("script refers to unknown client {0}")]
    UnknownClient(usize),
    #[error("fault refers to unknown operator {0}")]
    UnknownOperator(usize),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub delta_s: Tick,
    pub delta_t: Tick,
    pub delta_e: Tick,
    /// Defaults to `2*delta_s + 2*delta_e + delta_t` plus consensus slack.
    pub tau_c: Option<Tick>,
    /// Defaults to `10 * (2*delta_s + delta_e)`.
    pub tau_w: Option<Tick>,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { delta_s: 2, delta_t: 2, delta_e: 1, tau_c: None, tau_w: None }
    }
}

impl Timing {
    pub fn tau_c_bound(&self) -> Tick {
        2 * self.delta_s + 2 * self.delta_e + self.delta_t
    }

    pub fn tau_w_bound(&self) -> Tick {
        2 * self.delta_s + self.delta_e
    }

    pub fn tau_c(&self) -> Tick {
        self.tau_c.unwrap_or(self.tau_c_bound() + CONSENSUS_SLACK)
    }

    pub fn tau_w(&self) -> Tick {
        self.tau_w.unwrap_or(10 * self.tau_w_bound())
    }
}

/// Ticks a client allows for leader batching, replication and share
/// collection on top of the network and finality delays.
pub const CONSENSUS_SLACK: Tick = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub committee_size: usize,
    pub rotation_period: Tick,
    pub mode: ChainMode,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection { committee_size: 16, rotation_period: 64, mode: ChainMode::Contract }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exchange {
    pub fee_per_tx: Amount,
    pub fee_share_num: u64,
    pub fee_share_den: u64,
    pub liquidity_source: Amount,
    pub liquidity_target: Amount,
    /// Transfers per on-chain batch.
    pub max_batch: usize,
    /// Intents the leader takes into one consensus round.
    pub raft_batch_size: usize,
    pub batch_wait: Tick,
    pub checkpoint_batch_size: usize,
    pub checkpoint_period: Tick,
    pub pledge_floor: Amount,
    pub pledge_bps: u64,
}

impl Default for Exchange {
    fn default() -> Self {
        Exchange {
            fee_per_tx: 10,
            fee_share_num: 1,
            fee_share_den: 2,
            liquidity_source: 1_000_000,
            liquidity_target: 2_000_000,
            max_batch: 10,
            raft_batch_size: 100,
            batch_wait: 1,
            checkpoint_batch_size: 20,
            checkpoint_period: 40,
            pledge_floor: 5,
            pledge_bps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    #[serde(default = "default_client_balance")]
    pub balance: Amount,
    /// Challenge and resolve on its own when the transfer does not appear.
    #[serde(default = "default_true")]
    pub auto_challenge: bool,
}

fn default_client_balance() -> Amount {
    100_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ClientAction {
    Deposit { value: Amount },
    /// Go silent for this many ticks.
    Sleep { ticks: Tick },
    /// Challenge the client's latest deposit now.
    Challenge,
    /// Resolve the client's latest challenge now.
    Resolve,
    /// Start an HTLC exchange against a script-only source chain.
    HtlcSwap { amount: Amount },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub tick: Tick,
    pub client: usize,
    #[serde(flatten)]
    pub action: ClientAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Operator(usize),
    /// Whichever operator leads consensus when the fault fires.
    Leader,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Suspend,
    Resume,
    /// Apply `action` to `class`, or to every class when absent.
    Filter { class: Option<MessageClass>, action: HostAction },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStep {
    pub tick: Tick,
    pub target: FaultTarget,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub operators: usize,
    pub max_ticks: Tick,
    /// Check cross-module invariants every tick.
    pub audit: bool,
    pub timing: Timing,
    pub source: ChainSection,
    pub target: ChainSection,
    pub exchange: Exchange,
    pub clients: Vec<ClientSpec>,
    pub script: Vec<ScriptStep>,
    pub faults: Vec<FaultStep>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 1,
            operators: 3,
            max_ticks: 400,
            audit: true,
            timing: Timing::default(),
            source: ChainSection::default(),
            target: ChainSection::default(),
            exchange: Exchange::default(),
            clients: Vec::new(),
            script: Vec::new(),
            faults: Vec::new(),
        }
    }
}

/// Tick by which setup (bootstrap, registration, funding) is finished and
/// consensus has had time to elect a leader.
pub const fn setup_ticks(delta_s: Tick, delta_t: Tick) -> Tick {
    let d = if delta_s > delta_t { delta_s } else { delta_t };
    BOOTSTRAP_HEADERS as Tick + 2 * d + 20
}

/// Headers an enclave receives at bootstrap; also the registration lag bound.
pub const BOOTSTRAP_HEADERS: usize = 8;

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.operators == 0 || self.operators % 2 == 0 {
            return Err(ScenarioError::OperatorCount(self.operators));
        }
        let t = &self.timing;
        if t.delta_s == 0 || t.delta_t == 0 || t.delta_e == 0 {
            return Err(ScenarioError::ZeroDelay);
        }
        if t.tau_c() < t.tau_c_bound() {
            return Err(ScenarioError::TauC { tau_c: t.tau_c(), bound: t.tau_c_bound() });
        }
        if t.tau_w() <= t.tau_w_bound() {
            return Err(ScenarioError::TauW { tau_w: t.tau_w(), bound: t.tau_w_bound() });
        }
        for step in &self.script {
            if step.client >= self.clients.len() {
                return Err(ScenarioError::UnknownClient(step.client));
            }
        }
        for f in &self.faults {
            if let FaultTarget::Operator(i) = f.target {
                if i >= self.operators {
                    return Err(ScenarioError::UnknownOperator(i));
                }
            }
        }
        let e = &self.exchange;
        FeeShare::new(e.fee_share_num, e.fee_share_den).map_err(|err| ScenarioError::Invalid(err.to_string()))?;
        if e.max_batch == 0 || e.raft_batch_size == 0 {
            return Err(ScenarioError::Invalid("batch sizes must be positive".into()));
        }
        if e.liquidity_source == 0 || e.liquidity_target == 0 {
            return Err(ScenarioError::Invalid("initial liquidity must be positive".into()));
        }
        if self.target.mode != ChainMode::Contract {
            return Err(ScenarioError::Invalid("the target chain must support contracts".into()));
        }
        self.chain_config(ChainId::SOURCE).validate().map_err(|err| ScenarioError::Invalid(err.to_string()))?;
        self.chain_config(ChainId::TARGET).validate().map_err(|err| ScenarioError::Invalid(err.to_string()))?;
        Ok(())
    }

    pub fn f(&self) -> usize {
        self.operators / 2
    }

    pub fn chain_config(&self, chain: ChainId) -> ChainConfig {
        let (section, delay) = if chain == ChainId::SOURCE {
            (&self.source, self.timing.delta_s)
        } else {
            (&self.target, self.timing.delta_t)
        };
        ChainConfig {
            chain_id: chain,
            finality_delay: delay,
            committee_size: section.committee_size,
            committee_rotation_period: section.rotation_period,
            committee_threshold: CommitteeThreshold::TWO_THIRDS,
            mode: section.mode,
            seed: self.seed ^ (chain.0 as u64) << 32,
        }
    }

    pub fn lp_address() -> Address {
        Address::named("liquidity-provider")
    }

    pub fn deployer_address() -> Address {
        Address::named("deployer")
    }

    pub fn htlc_claim_address() -> Address {
        Address::named("exchange-htlc-claims")
    }

    pub fn program(&self) -> ProgramConfig {
        let t = &self.timing;
        let e = &self.exchange;
        let tau_w = t.tau_w();
        ProgramConfig {
            source_chain: ChainId::SOURCE,
            target_chain: ChainId::TARGET,
            source_mode: self.source.mode,
            fee_per_tx: e.fee_per_tx,
            fee_share: FeeShare::new(e.fee_share_num, e.fee_share_den).expect("validated"),
            liquidity: vec![(Self::lp_address(), e.liquidity_source, e.liquidity_target)],
            tau_w,
            confirm_margin: tau_w / 2,
            max_batch: e.max_batch,
            raft_batch_size: e.raft_batch_size,
            batch_wait: e.batch_wait,
            checkpoint_batch_size: e.checkpoint_batch_size,
            checkpoint_period: e.checkpoint_period,
            park_ticks: 2 * t.delta_s,
            resubmit_after: t.delta_s.max(t.delta_t) + 2 * t.delta_e + 2,
            max_reverts: 3,
            share_rebroadcast: 4 * t.delta_e + 2,
            htlc_timeout: t.tau_c() + tau_w,
            htlc_margin: 2 * t.delta_s + 2 * t.delta_e + 2,
            htlc_claim_address: Self::htlc_claim_address(),
            raft: RaftConfig::default(),
            lag_bound: BOOTSTRAP_HEADERS,
            target_finality: t.delta_t,
            exec_slack: 3 * t.delta_e + 2,
        }
    }

    /// A scenario with `clients` clients that each deposit once, spaced two
    /// ticks apart after setup.
    pub fn simple(name: &str, operators: usize, deposits: usize) -> Scenario {
        let mut s = Scenario { name: name.into(), operators, ..Scenario::default() };
        let start = setup_ticks(s.timing.delta_s, s.timing.delta_t);
        for i in 0..deposits {
            s.clients.push(ClientSpec { name: format!("client{i}"), balance: 100_000, auto_challenge: true });
            s.script.push(ScriptStep { tick: start + 2 * i as Tick, client: i, action: ClientAction::Deposit { value: 1_000 } });
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut s = Scenario::simple("rt", 3, 2);
        s.faults.push(FaultStep {
            tick: 50,
            target: FaultTarget::Operator(1),
            kind: FaultKind::Filter { class: Some(MessageClass::Raft), action: HostAction::Delay(3) },
        });
        s.faults.push(FaultStep { tick: 60, target: FaultTarget::All, kind: FaultKind::Suspend });
        let text = s.to_toml();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn parses_hand_written_file() {
        let text = r#"
name = "hand"
seed = 9
operators = 5

[timing]
delta_s = 3
delta_e = 1

[[clients]]
name = "alice"

[[script]]
tick = 40
client = 0
action = "deposit"
value = 500

[[script]]
tick = 41
client = 0
action = "sleep"
ticks = 30

[[faults]]
tick = 45
target = "leader"
kind = "suspend"

[[faults]]
tick = 50
target = { operator = 2 }
kind = "filter"
class = "chain_event"
action = "drop"
"#;
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s.operators, 5);
        assert_eq!(s.timing.delta_s, 3);
        assert_eq!(s.timing.delta_t, 2);
        assert_eq!(s.script[1].action, ClientAction::Sleep { ticks: 30 });
        assert_eq!(s.faults[0].target, FaultTarget::Leader);
        assert_eq!(
            s.faults[1].kind,
            FaultKind::Filter { class: Some(MessageClass::ChainEvent), action: HostAction::Drop }
        );
    }

    #[test]
    fn timing_defaults_and_bounds() {
        let t = Timing::default();
        assert_eq!(t.tau_w(), 10 * (2 * 2 + 1));
        assert!(t.tau_c() >= 2 * 2 + 2 + 2);
        let mut s = Scenario::simple("bad", 4, 0);
        assert!(matches!(s.validate(), Err(ScenarioError::OperatorCount(4))));
        s.operators = 3;
        s.timing.tau_c = Some(3);
        assert!(matches!(s.validate(), Err(ScenarioError::TauC { .. })));
        s.timing.tau_c = None;
        s.timing.tau_w = Some(5);
        assert!(matches!(s.validate(), Err(ScenarioError::TauW { .. })));
    }
}
