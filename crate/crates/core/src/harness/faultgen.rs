//! Seeded generation of randomized scenarios and fault schedules.
//!
//! The generator is versioned: `faultgen-v1` must keep producing the same
//! scenario for the same seed, so a failing seed stays reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{
    setup_ticks, ChainSection, ClientAction, ClientSpec, FaultKind, FaultStep, FaultTarget, Scenario, ScriptStep,
    Timing,
};
use crate::enclave::{HostAction, MessageClass};
use crate::types::Tick;

pub const GENERATOR: &str = "faultgen-v1";

/// Knobs for the generator. Fault windows never overlap, and a total outage
/// lasts at most a quarter of the challenge window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultBudget {
    pub max_windows: usize,
    /// Offline gaps are drawn up to this multiple of `tau_c + tau_w`.
    pub max_offline_factor: u64,
}

impl Default for FaultBudget {
    fn default() -> Self {
        FaultBudget { max_windows: 4, max_offline_factor: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WindowKind {
    LeaderCrash,
    TotalOutage,
    EventWithholding,
    HeaderWithholding,
    MessageDelay,
    Replay,
    SubmissionDrop,
    RequestDrop,
}

const WINDOW_KINDS: [WindowKind; 8] = [
    WindowKind::LeaderCrash,
    WindowKind::TotalOutage,
    WindowKind::EventWithholding,
    WindowKind::HeaderWithholding,
    WindowKind::MessageDelay,
    WindowKind::Replay,
    WindowKind::SubmissionDrop,
    WindowKind::RequestDrop,
];

fn rng_for(seed: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..8 + GENERATOR.len()].copy_from_slice(GENERATOR.as_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// A randomized scenario for `seed` with `operators` operators.
pub fn randomized(seed: u64, operators: usize, budget: FaultBudget) -> Scenario {
    let mut rng = rng_for(seed);
    let timing = Timing {
        delta_s: rng.gen_range(1..=3),
        delta_t: rng.gen_range(1..=3),
        delta_e: rng.gen_range(1..=2),
        tau_c: None,
        tau_w: None,
    };
    let (tau_c, tau_w) = (timing.tau_c(), timing.tau_w());
    let start = setup_ticks(timing.delta_s, timing.delta_t);
    let mut s = Scenario {
        name: format!("{GENERATOR}/{seed}/n{operators}"),
        seed,
        operators,
        timing,
        source: ChainSection { committee_size: 8, rotation_period: 32, ..ChainSection::default() },
        target: ChainSection { committee_size: 8, rotation_period: 32, ..ChainSection::default() },
        ..Scenario::default()
    };
    s.exchange.checkpoint_batch_size = rng.gen_range(2..=6);
    s.exchange.checkpoint_period = rng.gen_range(10..=40);
    s.exchange.max_batch = rng.gen_range(1..=5);

    let clients = rng.gen_range(1..=3);
    let mut last_activity = start;
    let mut longest_sleep = 0;
    for c in 0..clients {
        s.clients.push(ClientSpec { name: format!("client{c}"), balance: 50_000, auto_challenge: true });
        let deposits = rng.gen_range(1..=3);
        let mut t = start + rng.gen_range(0..10);
        for _ in 0..deposits {
            s.script.push(ScriptStep { tick: t, client: c, action: ClientAction::Deposit { value: rng.gen_range(200..=5_000) } });
            if rng.gen_bool(0.3) {
                let gaps = [0, tau_c, tau_c + tau_w, budget.max_offline_factor * (tau_c + tau_w)];
                let ticks = *gaps.choose(&mut rng).unwrap();
                if ticks > 0 {
                    s.script.push(ScriptStep { tick: t + 1, client: c, action: ClientAction::Sleep { ticks } });
                    longest_sleep = longest_sleep.max(ticks);
                    t += 1;
                }
            }
            t += rng.gen_range(1..=15);
        }
        last_activity = last_activity.max(t);
    }
    s.script.sort_by_key(|step| step.tick);

    let mut t = start + rng.gen_range(0..10);
    let fault_end = last_activity + tau_c + tau_w;
    let mut crashed = 0;
    for _ in 0..rng.gen_range(0..=budget.max_windows) {
        if t >= fault_end {
            break;
        }
        let kind = *WINDOW_KINDS.choose(&mut rng).unwrap();
        let op = rng.gen_range(0..operators);
        let len: Tick = match kind {
            WindowKind::TotalOutage => rng.gen_range(1..=tau_w / 4),
            _ => rng.gen_range(3..=tau_w / 2),
        };
        let filter = |class, action| FaultKind::Filter { class: Some(class), action };
        let (target, on, off) = match kind {
            WindowKind::LeaderCrash => {
                // Up to f operators may stay down for good.
                let permanent = crashed < s.f() && rng.gen_bool(0.5);
                s.faults.push(FaultStep { tick: t, target: FaultTarget::Leader, kind: FaultKind::Suspend });
                if permanent {
                    crashed += 1;
                } else {
                    s.faults.push(FaultStep { tick: t + len, target: FaultTarget::Leader, kind: FaultKind::Resume });
                }
                t += len + rng.gen_range(5..=20);
                continue;
            }
            WindowKind::TotalOutage => (FaultTarget::All, FaultKind::Suspend, FaultKind::Resume),
            WindowKind::EventWithholding => (
                FaultTarget::Operator(op),
                filter(MessageClass::ChainEvent, HostAction::Drop),
                filter(MessageClass::ChainEvent, HostAction::Deliver),
            ),
            WindowKind::HeaderWithholding => (
                FaultTarget::Operator(op),
                filter(MessageClass::ChainHeader, HostAction::Delay(rng.gen_range(1..=4))),
                filter(MessageClass::ChainHeader, HostAction::Deliver),
            ),
            WindowKind::MessageDelay => (
                FaultTarget::Operator(op),
                filter(MessageClass::Raft, HostAction::Delay(rng.gen_range(1..=4))),
                filter(MessageClass::Raft, HostAction::Deliver),
            ),
            WindowKind::Replay => {
                let class = *[MessageClass::Raft, MessageClass::ClientRequest, MessageClass::ChainSubmission]
                    .choose(&mut rng)
                    .unwrap();
                (
                    FaultTarget::Operator(op),
                    filter(class, HostAction::Replay(rng.gen_range(1..=2))),
                    filter(class, HostAction::Deliver),
                )
            }
            WindowKind::SubmissionDrop => (
                FaultTarget::Operator(op),
                filter(MessageClass::ChainSubmission, HostAction::Drop),
                filter(MessageClass::ChainSubmission, HostAction::Deliver),
            ),
            WindowKind::RequestDrop => (
                FaultTarget::Operator(op),
                filter(MessageClass::ClientRequest, HostAction::Drop),
                filter(MessageClass::ClientRequest, HostAction::Deliver),
            ),
        };
        s.faults.push(FaultStep { tick: t, target, kind: on });
        s.faults.push(FaultStep { tick: t + len, target, kind: off });
        t += len + rng.gen_range(5..=20);
    }

    let horizon = last_activity.max(t) + longest_sleep + 2 * (tau_c + tau_w) + 80;
    s.max_ticks = horizon;
    s
}
