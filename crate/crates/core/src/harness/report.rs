//! Run reports: per-deposit outcomes, metered costs, consensus metrics and
//! property verdicts, as JSON lines or a table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, PublicKey};
use crate::types::{Address, Amount, ChainId, Tick};
use crate::vault::CostMeter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepositOutcome {
    /// Confirmed or consumed on the source chain, transfer finalized.
    Confirmed,
    /// Refunded on the source chain, no transfer.
    Refunded,
    PendingAtHorizon,
    /// Refunded although a transfer was finalized.
    RefundedWithTransfer,
    /// Confirmed although no transfer was finalized.
    ConfirmedWithoutTransfer,
}

impl DepositOutcome {
    pub fn is_legal(self) -> bool {
        matches!(self, DepositOutcome::Confirmed | DepositOutcome::Refunded | DepositOutcome::PendingAtHorizon)
    }

    pub fn is_terminal(self) -> bool {
        self != DepositOutcome::PendingAtHorizon
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositReport {
    pub id: Digest,
    pub client: String,
    pub value: Amount,
    pub deposited_at: Tick,
    pub outcome: DepositOutcome,
    pub transfers: usize,
    pub transfer_amount: Option<Amount>,
    pub challenged_at: Option<Tick>,
    pub refunded_at: Option<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapOutcome {
    /// The lock was claimed and the target transfer finalized.
    Claimed,
    /// The lock was refunded and no transfer happened.
    Refunded,
    /// No lock was ever placed.
    NotStarted,
    PendingAtHorizon,
    /// Refunded after the target transfer finalized: no enclave revealed the
    /// preimage before the deadline. The client keeps both legs and the
    /// exchange bears the loss; both lock rules still hold.
    RefundedAfterTransfer,
    ClaimedWithoutTransfer,
}

impl SwapOutcome {
    pub fn is_legal(self) -> bool {
        matches!(
            self,
            SwapOutcome::Claimed
                | SwapOutcome::Refunded
                | SwapOutcome::NotStarted
                | SwapOutcome::PendingAtHorizon
                | SwapOutcome::RefundedAfterTransfer
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapReport {
    pub request_id: Digest,
    pub client: String,
    pub amount: Amount,
    pub lock_id: Option<Digest>,
    pub deadline: Option<Tick>,
    pub claimed_at: Option<Tick>,
    pub refunded_at: Option<Tick>,
    pub transfers: usize,
    pub outcome: SwapOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCost {
    pub calls: u64,
    pub meter: CostMeter,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub entries_committed: u64,
    pub elections_started: u64,
    pub terms_won: u64,
    pub final_term: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardReport {
    pub fees: Amount,
    pub to_lps: BTreeMap<Address, Amount>,
    pub to_operators: BTreeMap<PublicKey, Amount>,
    pub dust: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyVerdict {
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyVerdict {
    pub fn new(property: &str, failures: Vec<String>) -> Self {
        PropertyVerdict {
            property: property.into(),
            passed: failures.is_empty(),
            detail: if failures.is_empty() { "ok".into() } else { failures.join("; ") },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub operators: usize,
    pub threshold: usize,
    pub ticks: Tick,
    pub quiescent: bool,
    pub deposits: Vec<DepositReport>,
    pub swaps: Vec<SwapReport>,
    pub costs: BTreeMap<ChainId, BTreeMap<String, CallCost>>,
    /// Transfer items finalized on the target chain.
    pub transfer_items: u64,
    pub consensus: ConsensusReport,
    pub rewards: RewardReport,
    pub properties: Vec<PropertyVerdict>,
    /// Set when a per-tick invariant check stopped the run early.
    pub aborted: Option<String>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Deposit(&'a DepositReport),
    Swap(&'a SwapReport),
    Cost { chain: ChainId, call: &'a str, calls: u64, meter: &'a CostMeter },
    Property(&'a PropertyVerdict),
    Summary {
        scenario: &'a str,
        seed: u64,
        operators: usize,
        threshold: usize,
        ticks: Tick,
        quiescent: bool,
        confirmed: usize,
        refunded: usize,
        pending: usize,
        violations: usize,
        transfer_items: u64,
        consensus: &'a ConsensusReport,
        rewards: &'a RewardReport,
        aborted: &'a Option<String>,
    },
}

impl RunReport {
    pub fn count(&self, outcome: DepositOutcome) -> usize {
        self.deposits.iter().filter(|d| d.outcome == outcome).count()
    }

    pub fn passed(&self) -> bool {
        self.aborted.is_none() && self.properties.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&PropertyVerdict> {
        self.properties.iter().filter(|p| !p.passed).collect()
    }

    pub fn property(&self, name: &str) -> Option<&PropertyVerdict> {
        self.properties.iter().find(|p| p.property == name)
    }

    pub fn call_cost(&self, chain: ChainId, call: &str) -> CallCost {
        self.costs.get(&chain).and_then(|c| c.get(call)).cloned().unwrap_or_default()
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |line: Line<'_>| {
            out.push_str(&serde_json::to_string(&line).expect("report line serializes"));
            out.push('\n');
        };
        for d in &self.deposits {
            push(Line::Deposit(d));
        }
        for s in &self.swaps {
            push(Line::Swap(s));
        }
        for (chain, calls) in &self.costs {
            for (call, cost) in calls {
                push(Line::Cost { chain: *chain, call, calls: cost.calls, meter: &cost.meter });
            }
        }
        for p in &self.properties {
            push(Line::Property(p));
        }
        push(Line::Summary {
            scenario: &self.scenario,
            seed: self.seed,
            operators: self.operators,
            threshold: self.threshold,
            ticks: self.ticks,
            quiescent: self.quiescent,
            confirmed: self.count(DepositOutcome::Confirmed),
            refunded: self.count(DepositOutcome::Refunded),
            pending: self.count(DepositOutcome::PendingAtHorizon),
            violations: self.deposits.iter().filter(|d| !d.outcome.is_legal()).count(),
            transfer_items: self.transfer_items,
            consensus: &self.consensus,
            rewards: &self.rewards,
            aborted: &self.aborted,
        });
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} (seed {}, n={}, m={}): {} ticks, {}",
            self.scenario,
            self.seed,
            self.operators,
            self.threshold,
            self.ticks,
            if self.quiescent { "quiescent" } else { "horizon reached" }
        );
        if let Some(reason) = &self.aborted {
            let _ = writeln!(out, "ABORTED: {reason}");
        }
        let _ = writeln!(out, "{:<18} {:<10} {:>8} {:>9} {:>20} {:>10}", "deposit", "client", "value", "at", "outcome", "received");
        for d in &self.deposits {
            let _ = writeln!(
                out,
                "{:<18} {:<10} {:>8} {:>9} {:>20} {:>10}",
                &d.id.to_hex()[..16],
                d.client,
                d.value,
                d.deposited_at,
                format!("{:?}", d.outcome),
                d.transfer_amount.map_or("-".into(), |a| a.to_string())
            );
        }
        for s in &self.swaps {
            let _ = writeln!(
                out,
                "swap {:<13} {:<10} {:>8} {:>9} {:>20}",
                &s.request_id.to_hex()[..13],
                s.client,
                s.amount,
                s.deadline.map_or("-".into(), |d| d.to_string()),
                format!("{:?}", s.outcome)
            );
        }
        let _ = writeln!(out, "{:<8} {:<20} {:>6} {:>8} {:>8} {:>8} {:>8}", "chain", "call", "calls", "sigs", "writes", "deletes", "hashes");
        for (chain, calls) in &self.costs {
            for (call, c) in calls {
                let _ = writeln!(
                    out,
                    "{:<8} {:<20} {:>6} {:>8} {:>8} {:>8} {:>8}",
                    chain.to_string(),
                    call,
                    c.calls,
                    c.meter.sig_verifications,
                    c.meter.storage_writes,
                    c.meter.storage_deletes,
                    c.meter.hash_ops
                );
            }
        }
        let _ = writeln!(
            out,
            "consensus: {} entries committed, {} elections, {} terms won, final term {}",
            self.consensus.entries_committed,
            self.consensus.elections_started,
            self.consensus.terms_won,
            self.consensus.final_term
        );
        let _ = writeln!(
            out,
            "rewards: fees {}, to LPs {}, to operators {}, dust {}",
            self.rewards.fees,
            self.rewards.to_lps.values().sum::<Amount>(),
            self.rewards.to_operators.values().sum::<Amount>(),
            self.rewards.dust
        );
        for p in &self.properties {
            let _ = writeln!(out, "[{}] {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.property, p.detail);
        }
        out
    }
}
