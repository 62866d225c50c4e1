//! Named scenarios used by `check` and by the tests.

use super::faultgen::{randomized, FaultBudget};
use super::scenario::{
    setup_ticks, ChainSection, ClientAction, ClientSpec, FaultKind, FaultStep, FaultTarget, Scenario, ScriptStep,
};
use crate::chain::ChainMode;
use crate::types::Tick;

fn start(s: &Scenario) -> Tick {
    setup_ticks(s.timing.delta_s, s.timing.delta_t)
}

/// One client, one deposit, no faults.
pub fn happy_path() -> Scenario {
    Scenario::simple("happy-path", 3, 1)
}

/// Every operator suspended from before the deposit until the end.
pub fn all_suspended() -> Scenario {
    let mut s = Scenario::simple("all-suspended", 3, 1);
    let t = start(&s);
    s.faults.push(FaultStep { tick: t - 1, target: FaultTarget::All, kind: FaultKind::Suspend });
    s
}

/// `f` of `n` operators crashed for the whole run.
pub fn f_crashed(operators: usize, deposits: usize) -> Scenario {
    let mut s = Scenario::simple(&format!("f-crashed-n{operators}"), operators, deposits);
    let t = start(&s);
    for i in 0..s.f() {
        s.faults.push(FaultStep { tick: t - 1, target: FaultTarget::Operator(i), kind: FaultKind::Suspend });
    }
    s
}

/// The client goes silent for `gap` ticks right after sending its request.
pub fn offline_client(gap: Tick, operators_down: bool) -> Scenario {
    let mut s = Scenario::simple(&format!("offline-{gap}{}", if operators_down { "-down" } else { "" }), 3, 1);
    let t = start(&s);
    if gap > 0 {
        let after_request = t + s.timing.delta_s + 1;
        s.script.push(ScriptStep { tick: after_request, client: 0, action: ClientAction::Sleep { ticks: gap } });
    }
    if operators_down {
        s.faults.push(FaultStep { tick: t - 1, target: FaultTarget::All, kind: FaultKind::Suspend });
    }
    s.max_ticks = t + gap + 4 * (s.timing.tau_c() + s.timing.tau_w()) + 100;
    s
}

/// `deposits` clients depositing in the same tick, so the leader sees them
/// all at once.
pub fn simultaneous(name: &str, operators: usize, deposits: usize) -> Scenario {
    let mut s = Scenario { name: name.into(), operators, ..Scenario::default() };
    let t = start(&s);
    s.source.committee_size = 4;
    s.target.committee_size = 4;
    s.exchange.batch_wait = 2;
    s.exchange.checkpoint_period = 0;
    for i in 0..deposits {
        s.clients.push(ClientSpec { name: format!("c{i}"), balance: 10_000, auto_challenge: true });
        s.script.push(ScriptStep { tick: t, client: i, action: ClientAction::Deposit { value: 1_000 } });
    }
    s.max_ticks = t + 2 * s.timing.tau_w() + 200;
    s
}

/// Template for the on-chain batch length sweep: 100 transfers at once.
pub fn amortization() -> Scenario {
    let mut s = simultaneous("amortization", 3, 100);
    s.exchange.raft_batch_size = 100;
    s.exchange.checkpoint_batch_size = 0;
    s
}

/// Twenty deposits with checkpoints of twenty and no periodic flush.
pub fn checkpoint() -> Scenario {
    let mut s = simultaneous("checkpoint", 3, 20);
    s.exchange.checkpoint_batch_size = 20;
    s
}

/// HTLC exchange from a script-only source chain.
pub fn htlc_swap(operators_down_after: Option<Tick>) -> Scenario {
    let mut s = Scenario {
        name: format!("htlc{}", operators_down_after.map_or(String::new(), |d| format!("-down-{d}"))),
        source: ChainSection { mode: ChainMode::ScriptOnly, ..ChainSection::default() },
        ..Scenario::default()
    };
    let t = start(&s);
    s.clients.push(ClientSpec { name: "swapper".into(), balance: 100_000, auto_challenge: true });
    s.script.push(ScriptStep { tick: t, client: 0, action: ClientAction::HtlcSwap { amount: 1_000 } });
    if let Some(d) = operators_down_after {
        s.faults.push(FaultStep { tick: t + d, target: FaultTarget::All, kind: FaultKind::Suspend });
    }
    s.max_ticks = t + 4 * (s.timing.tau_c() + s.timing.tau_w()) + 100;
    s
}

/// Scenario `seed` of the randomized atomicity suite.
pub fn randomized_seed(seed: u64) -> Scenario {
    let n = [3, 5, 7][(seed % 3) as usize];
    randomized(seed, n, FaultBudget::default())
}

/// Every named scenario with its expectation, for `check`.
pub fn named() -> Vec<Scenario> {
    let mut out = vec![happy_path(), all_suspended(), f_crashed(3, 3), f_crashed(5, 3), checkpoint(), htlc_swap(None)];
    let s = Scenario::default();
    let (tau_c, tau_w) = (s.timing.tau_c(), s.timing.tau_w());
    for gap in [0, tau_c, tau_c + tau_w, 10 * (tau_c + tau_w)] {
        out.push(offline_client(gap, false));
        out.push(offline_client(gap, true));
    }
    out
}
