//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails. Tolerances are the constants below.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rayon::prelude::*;

use common::{max_faulty, VaultFixture, CHAIN};
use mercury_core::amm::{lp_reward, operator_reward, quote, FeeShare, Pool, RewardLedger};
use mercury_core::chain::{Call, Chain, ChainConfig, ChainMode, Event, HeaderTamper, TxStatus};
use mercury_core::crypto::{hash, KeyPair, PublicKey};
use mercury_core::enclave::{HostAction, MessageClass};
use mercury_core::harness::scenario::{FaultKind, FaultTarget};
use mercury_core::harness::{run, suite, sweep, Axis, DepositOutcome, RunReport, Scenario, SwapOutcome, World};
use mercury_core::htlc::{lock_id, HtlcCall, HtlcEvent, HtlcLock, Preimage};
use mercury_core::lightclient::{InclusionStatus, LightClientParams, LightClientState};
use mercury_core::types::{Address, ChainId, Tick};
use mercury_core::vault::{checkpoint_digest, confirm_digest, TransferBatch, TransferBatchBody, TransferItem, VaultCall};

/// Criterion 1: seeds 1..=500, wall-clock limit for the whole suite.
const ATOMICITY_SEEDS: u64 = 500;
const ATOMICITY_TIME_LIMIT: Duration = Duration::from_secs(300);
/// Criterion 4: batch lengths swept.
const BATCH_LENGTHS: [u64; 5] = [1, 10, 20, 50, 100];
/// Criterion 5: checkpoint size.
const CHECKPOINT_SIZE: usize = 20;
/// Criterion 6: run length and rotation count.
const LC_BLOCKS: u64 = 200;
const LC_ROTATION_PERIOD: u64 = 60;
const LC_ROTATIONS: u64 = 3;
/// Criterion 7: proptest cases, bounds and oracle tolerance in smallest units.
const AMM_CASES: u32 = 10_000;
const AMM_MAX_RESERVE: u64 = 1_000_000_000_000;
const AMM_ORACLE_TOLERANCE: i128 = 1;
/// Criterion 8: random reward cases.
const REWARD_CASES: u32 = 1_000;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn ok(detail: impl Into<String>) -> Self {
        Verdict { passed: true, detail: detail.into() }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Verdict { passed: false, detail: detail.into() }
    }

    fn from_failures(failures: Vec<String>, ok: impl Into<String>) -> Self {
        if failures.is_empty() {
            Verdict::ok(ok)
        } else {
            let n = failures.len();
            let shown: Vec<_> = failures.into_iter().take(5).collect();
            Verdict::fail(format!("{n} failures: {}", shown.join("; ")))
        }
    }
}

fn atomicity_suite() -> Verdict {
    let started = Instant::now();
    let scenarios: Vec<Scenario> = (1..=ATOMICITY_SEEDS).map(suite::randomized_seed).collect();
    let mut classes = BTreeSet::new();
    for s in &scenarios {
        for f in &s.faults {
            match (f.target, f.kind) {
                (FaultTarget::Leader, FaultKind::Suspend) => classes.insert("leader_crash"),
                (FaultTarget::All, FaultKind::Suspend) => classes.insert("total_unavailability"),
                (_, FaultKind::Filter { class: Some(MessageClass::ChainEvent), action: HostAction::Drop }) => {
                    classes.insert("event_withholding")
                }
                (_, FaultKind::Filter { action: HostAction::Delay(_), .. }) => classes.insert("delay"),
                (_, FaultKind::Filter { action: HostAction::Replay(_), .. }) => classes.insert("replay"),
                _ => false,
            };
        }
    }
    let sizes: BTreeSet<usize> = scenarios.iter().map(|s| s.operators).collect();
    let reports: Vec<Result<RunReport, String>> =
        scenarios.into_par_iter().map(|s| run(s).map_err(|e| e.to_string())).collect();
    let elapsed = started.elapsed();

    let mut failures = Vec::new();
    let (mut deposits, mut confirmed, mut refunded) = (0, 0, 0);
    for r in &reports {
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                failures.push(e.clone());
                continue;
            }
        };
        for p in r.failures() {
            failures.push(format!("{}: {} {}", r.scenario, p.property, p.detail));
        }
        for d in &r.deposits {
            deposits += 1;
            match d.outcome {
                DepositOutcome::Confirmed => confirmed += 1,
                DepositOutcome::Refunded => refunded += 1,
                other => failures.push(format!("{}: deposit {} ended {other:?}", r.scenario, d.id)),
            }
        }
    }
    for class in ["leader_crash", "total_unavailability", "event_withholding", "delay", "replay"] {
        if !classes.contains(class) {
            failures.push(format!("fault class {class} never generated"));
        }
    }
    if sizes != BTreeSet::from([3, 5, 7]) {
        failures.push(format!("operator counts {sizes:?}"));
    }
    if elapsed > ATOMICITY_TIME_LIMIT {
        failures.push(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), ATOMICITY_TIME_LIMIT.as_secs()));
    }
    Verdict::from_failures(
        failures,
        format!(
            "{} scenarios, {deposits} deposits ({confirmed} confirmed, {refunded} refunded), 0 violations, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn offline_clients() -> Verdict {
    let timing = Scenario::default().timing;
    let (tau_c, tau_w) = (timing.tau_c(), timing.tau_w());
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for gap in [0, tau_c, tau_c + tau_w, 10 * (tau_c + tau_w)] {
        for down in [false, true] {
            let r = match run(suite::offline_client(gap, down)) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(e.to_string());
                    continue;
                }
            };
            for p in r.failures() {
                failures.push(format!("{}: {} {}", r.scenario, p.property, p.detail));
            }
            for d in &r.deposits {
                if !(d.outcome.is_legal() && d.outcome.is_terminal()) {
                    failures.push(format!("{}: {:?}", r.scenario, d.outcome));
                }
                seen.push(format!("{}={:?}", r.scenario, d.outcome));
            }
        }
    }
    Verdict::from_failures(failures, seen.join(", "))
}

fn threshold_enforcement() -> Verdict {
    let mut failures = Vec::new();
    let mut checked = 0;
    for n in [3usize, 5, 7] {
        let base = VaultFixture::new(n);
        let f = max_faulty(n);
        let deposit_ids: Vec<_> = {
            let mut fx = VaultFixture::new(n);
            (0..(1u64 << n)).map(|m| fx.deposit(&format!("c{m}"), 100, 1)).collect()
        };
        for mask in 0u64..(1 << n) {
            let signers: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let expect_ok = signers.len() > f;

            let mut fx = VaultFixture { vault: base.vault.clone(), keys: base.keys.clone(), recent: base.recent.clone(), meter: Default::default() };
            let body = TransferBatchBody {
                target_chain: CHAIN,
                transfers: vec![TransferItem { receiver: Address::named("r"), amount: 1, deposit_id: hash(&mask.to_le_bytes()) }],
                valid_until: 100,
                nonce: mask,
            };
            let batch = TransferBatch { multisig: fx.sign(body.digest(), &signers), body };
            let transfer_ok = fx.call(Address::named("host"), 0, 5, &VaultCall::Transfer { batch }).is_ok();

            let mut fx = VaultFixture { vault: base.vault.clone(), keys: base.keys.clone(), recent: base.recent.clone(), meter: Default::default() };
            let id = fx.deposit("alice", 100, 1);
            let ids = vec![id];
            let ms = fx.sign(confirm_digest(CHAIN, &ids, mask), &signers);
            let confirm_ok = fx.call(Address::named("host"), 0, 2, &VaultCall::Confirm { ids: ids.clone(), nonce: mask, multisig: ms }).is_ok();
            let ms = fx.sign(checkpoint_digest(CHAIN, &deposit_ids[..1], mask), &signers);
            let checkpoint_ok = fx
                .call(Address::named("host"), 0, 3, &VaultCall::UpdateCheckpoint { ids: deposit_ids[..1].to_vec(), nonce: mask, multisig: ms })
                .is_ok();

            for (call, ok) in [("transfer", transfer_ok), ("confirm", confirm_ok), ("update_checkpoint", checkpoint_ok)] {
                checked += 1;
                if ok != expect_ok {
                    failures.push(format!("n={n} signers={signers:?} {call}: executed={ok}"));
                }
            }
        }
    }
    Verdict::from_failures(failures, format!("{checked} signer-subset calls over n in {{3,5,7}}"))
}

fn amortization() -> Verdict {
    let result = match sweep(&suite::amortization(), Axis::BatchLength, &BATCH_LENGTHS) {
        Ok(r) => r,
        Err(e) => return Verdict::fail(e.to_string()),
    };
    let rows = result.rows();
    let mut failures = Vec::new();
    let mut ratios = Vec::new();
    for ((len, report), row) in result.reports.iter().zip(&rows) {
        if !report.passed() {
            failures.push(format!("batch {len}: run failed"));
        }
        if row.items == 0 {
            failures.push(format!("batch {len}: no items"));
            continue;
        }
        let per_tx = Ratio::new(row.sig_verifications, row.items);
        if per_tx != Ratio::new(1, *len) {
            failures.push(format!("batch {len}: {per_tx} verifications per transaction"));
        }
        ratios.push(format!("{len}:{per_tx}"));
    }
    // writes = a * items + b * batches with the same a, b for every row.
    let (r0, r1) = (&rows[0], &rows[rows.len() - 1]);
    let det = r0.items as i128 * r1.batches as i128 - r1.items as i128 * r0.batches as i128;
    let mut fit = String::new();
    if det == 0 {
        failures.push("degenerate rows".into());
    } else {
        let a = Ratio::new(
            r0.storage_writes as i128 * r1.batches as i128 - r1.storage_writes as i128 * r0.batches as i128,
            det,
        );
        let b = Ratio::new(
            r0.items as i128 * r1.storage_writes as i128 - r1.items as i128 * r0.storage_writes as i128,
            det,
        );
        for row in &rows {
            let predicted = a * Ratio::from_integer(row.items as i128) + b * Ratio::from_integer(row.batches as i128);
            if predicted != Ratio::from_integer(row.storage_writes as i128) {
                failures.push(format!("batch {}: {} writes, model predicts {predicted}", row.value, row.storage_writes));
            }
        }
        if !a.is_integer() || !b.is_integer() {
            failures.push(format!("non-integer write constants {a}, {b}"));
        }
        fit = format!("writes = {a}/item + {b}/batch");
    }
    Verdict::from_failures(failures, format!("verifications per tx {}; {fit}", ratios.join(" ")))
}

fn checkpoints() -> Verdict {
    let mut world = match World::new(suite::checkpoint()) {
        Ok(w) => w,
        Err(e) => return Verdict::fail(e.to_string()),
    };
    world.run_to_end();
    let mut failures = Vec::new();
    let report = world.report();
    if !report.passed() {
        failures.push("run failed".to_string());
    }
    let source = world.source();
    let mut per_tx: BTreeMap<_, usize> = BTreeMap::new();
    let mut deleted = Vec::new();
    for h in 0..=source.tip().height {
        for r in source.receipts(h) {
            if r.call != "update_checkpoint" || !r.succeeded() {
                continue;
            }
            if r.cost.sig_verifications != 1 {
                failures.push(format!("checkpoint at {h}: {} verifications", r.cost.sig_verifications));
            }
            if r.cost.storage_deletes != CHECKPOINT_SIZE as u64 {
                failures.push(format!("checkpoint at {h}: {} deletes", r.cost.storage_deletes));
            }
            for e in &r.events {
                if let Event::Vault(mercury_core::vault::VaultEvent::Checkpointed { id, .. }) = e {
                    *per_tx.entry(r.tx_id).or_default() += 1;
                    deleted.push(*id);
                }
            }
        }
    }
    if per_tx.is_empty() {
        failures.push("no checkpoint executed".into());
    }
    for (tx, n) in &per_tx {
        if *n != CHECKPOINT_SIZE {
            failures.push(format!("checkpoint {tx} removed {n} ids"));
        }
    }

    // Challenge every deleted id; each must revert.
    let challenger = Address::named("late-challenger");
    world.chain_mut(ChainId::SOURCE).mint(challenger, 1_000_000);
    let value = report.deposits.iter().map(|d| (d.id, d.value)).collect::<BTreeMap<_, _>>();
    let mut submitted = Vec::new();
    let now = world.now();
    for id in &deleted {
        let v = value.get(id).copied().unwrap_or(1);
        let call = Call::Vault(VaultCall::StartChallenge { id: *id, value: v });
        let pledge = world.source().vault().map_or(v, |vault| vault.required_pledge(v));
        match world.chain_mut(ChainId::SOURCE).submit_tx(challenger, call, pledge, now) {
            Ok(tx) => submitted.push(tx),
            Err(e) => failures.push(format!("challenge submission failed: {e}")),
        }
    }
    for _ in 0..=world.scenario().timing.delta_s + 1 {
        world.step();
    }
    let mut reverted = 0;
    for tx in &submitted {
        match world.source().receipt(tx) {
            Some((_, r)) if matches!(r.status, TxStatus::Reverted(_)) => reverted += 1,
            Some(_) => failures.push(format!("challenge {tx} executed on a deleted id")),
            None => failures.push(format!("challenge {tx} not finalized")),
        }
    }
    Verdict::from_failures(
        failures,
        format!("{} checkpoints of {CHECKPOINT_SIZE} ids, 1 verification each; {reverted} challenges on deleted ids reverted", per_tx.len()),
    )
}

fn light_client() -> Verdict {
    let mut cfg = ChainConfig::new(ChainId::SOURCE, 1);
    cfg.committee_size = 16;
    cfg.committee_rotation_period = LC_ROTATION_PERIOD;
    let mut chain = Chain::new(cfg.clone()).expect("chain");
    let mut other = Chain::new(ChainConfig { chain_id: ChainId::TARGET, ..cfg }).expect("chain");
    let alice = Address::named("alice");
    chain.mint(alice, 1_000_000);

    chain.advance_tick(1).expect("tick");
    other.advance_tick(1).expect("tick");
    let params = LightClientParams::of(chain.config(), 8);
    let tip = chain.tip().clone();
    let (cur, next) = (chain.committee(0), chain.committee(1));
    let data = vec![chain.receipts(1).to_vec()];
    let mut lc = match LightClientState::bootstrap(params, &[tip], cur, next, &data, &KeyPair::from_seed(b"lc")) {
        Ok((lc, _)) => lc,
        Err(e) => return Verdict::fail(format!("bootstrap: {e}")),
    };

    let (mut false_accepts, mut false_rejects, mut forged, mut honest) = (0, 0, 0, 0);
    let mut details = Vec::new();
    let mut start_epoch = lc.current_committee().epoch;
    let mut rotations = 0;
    for t in 2..=LC_BLOCKS {
        let mut forgeries: Vec<(String, _)> = HeaderTamper::ALL.iter().map(|k| (format!("{k:?}"), chain.forge_header(*k))).collect();
        forgeries.push(("WrongChain".into(), other.tip().clone()));
        if let Some(old) = lc.header(lc.tip().height) {
            forgeries.push(("Replay".into(), old.clone()));
        }
        for (name, h) in forgeries {
            forged += 1;
            let mut probe = lc.clone();
            let following = probe.pending_rotation().map(|e| chain.committee(e));
            if probe.ingest_header(&h, following.as_ref()).is_ok() {
                false_accepts += 1;
                details.push(format!("accepted {name} at {t}"));
            }
        }
        let tx = chain.submit_tx(alice, Call::Transfer { to: Address::named(&format!("b{t}")) }, 1, t - 1).ok();
        let h = chain.advance_tick(t).expect("tick");
        other.advance_tick(t).expect("tick");
        honest += 1;
        let following = lc.pending_rotation().map(|e| chain.committee(e));
        if let Err(e) = lc.ingest_header(&h, following.as_ref()) {
            false_rejects += 1;
            details.push(format!("rejected honest header {t}: {e}"));
            break;
        }
        if lc.current_committee().epoch != start_epoch {
            rotations += 1;
            start_epoch = lc.current_committee().epoch;
        }
        if let Some(proof) = tx.and_then(|id| chain.inclusion_proof(&id)) {
            honest += 1;
            if lc.verify_inclusion(&proof) != InclusionStatus::Included {
                false_rejects += 1;
                details.push(format!("rejected genuine inclusion at {t}"));
            }
            let mut bad = proof.clone();
            bad.receipt.status = TxStatus::Reverted("forged".into());
            forged += 1;
            if lc.verify_inclusion(&bad) == InclusionStatus::Included {
                false_accepts += 1;
                details.push(format!("accepted forged receipt at {t}"));
            }
        }
    }
    if rotations != LC_ROTATIONS {
        details.push(format!("{rotations} rotations observed"));
    }
    let summary = format!(
        "{} blocks, {rotations} rotations, {forged} forgeries, {honest} honest items: {false_accepts} false accepts, {false_rejects} false rejects",
        lc.tip().height
    );
    if false_accepts == 0 && false_rejects == 0 && rotations == LC_ROTATIONS && lc.tip().height == LC_BLOCKS {
        Verdict::ok(summary)
    } else {
        Verdict::fail(format!("{summary}; {}", details.into_iter().take(5).collect::<Vec<_>>().join("; ")))
    }
}

fn amm_properties() -> Verdict {
    let mut runner = TestRunner::new(Config { cases: AMM_CASES, failure_persistence: None, ..Config::default() });
    let strategy = (2..=AMM_MAX_RESERVE, 1..=AMM_MAX_RESERVE, 0.0f64..=1.0, 0.0f64..=1.0);
    let result = runner.run(&strategy, |(x, y, f1, f2)| {
        let max_trade = x / 2;
        let dx = 1 + ((max_trade - 1) as f64 * f1) as u64;
        let dx2 = 1 + ((max_trade - 1) as f64 * f2) as u64;
        let (small, large) = (dx.min(dx2), dx.max(dx2));

        let exact = Ratio::new(y as i128 * small as i128, x as i128 + small as i128);
        match quote(x, y, small) {
            Ok(out) => {
                let diff = Ratio::from_integer(out as i128) - exact;
                let err = if diff < Ratio::from_integer(0) { -diff } else { diff };
                prop_assert!(err <= Ratio::from_integer(AMM_ORACLE_TOLERANCE), "oracle gap {err} for {x} {y} {small}");
                prop_assert!(out < y);
                let out_large = quote(x, y, large).expect("larger trade prices");
                prop_assert!(out_large >= out, "not monotone");

                let mut pool = Pool::new(FeeShare::new(1, 2).unwrap(), 0);
                pool.reserve_x = x;
                pool.reserve_y = y;
                pool.invariant_k = pool.product();
                let k = pool.product();
                let got = pool.exchange(small).expect("exchange");
                prop_assert_eq!(got, out);
                prop_assert!(pool.product() >= k, "product fell");
                if let Ok(back) = pool.exchange_reverse(got) {
                    prop_assert!(back <= small, "round trip gained {} > {}", back, small);
                }
            }
            Err(_) => {
                prop_assert!(exact < Ratio::from_integer(1), "rejected a trade worth {exact}");
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => Verdict::ok(format!(
            "{AMM_CASES} cases, reserves <= {AMM_MAX_RESERVE}, trades <= reserve/2, oracle within {AMM_ORACLE_TOLERANCE}"
        )),
        Err(e) => Verdict::fail(e.to_string()),
    }
}

fn rewards() -> Verdict {
    let mut runner = TestRunner::new(Config { cases: REWARD_CASES, failure_persistence: None, ..Config::default() });
    let strategy = (
        1u64..=1_000_000_000,
        prop::collection::vec(1u64..=1_000_000_000, 1..6),
        1usize..=7,
        1u64..=1000,
        0.0f64..=1.0,
    );
    let result = runner.run(&strategy, |(fee, shares, m, den, frac)| {
        let num = (den as f64 * frac) as u64;
        let r = FeeShare::new(num, den).unwrap();
        let lps: BTreeMap<Address, u64> =
            shares.iter().enumerate().map(|(i, s)| (Address::named(&format!("lp{i}")), *s)).collect();
        let signers: Vec<PublicKey> = (0..m).map(|i| PublicKey(i as u64 + 1)).collect();
        let mut ledger = RewardLedger::default();
        let d = ledger.distribute(fee, &lps, &signers, r);
        let paid = d.to_lps + d.to_operators;
        prop_assert!(paid <= fee, "overpaid");
        let payees = (lps.len() + m) as u64;
        prop_assert!(fee - paid < payees, "deficit {} with {} payees", fee - paid, payees);
        prop_assert_eq!(d.dust, fee - paid);

        let rf = Ratio::new(num as i128, den as i128);
        let total: u64 = lps.values().sum();
        for (lp, s) in &lps {
            let exact = Ratio::from_integer(fee as i128) * rf * Ratio::new(*s as i128, total as i128);
            prop_assert_eq!(ledger.lp_accrued.get(lp).copied().unwrap_or(0) as i128, exact.floor().to_integer());
        }
        let exact_op = Ratio::from_integer(fee as i128) * (Ratio::from_integer(1) - rf) / Ratio::from_integer(m as i128);
        prop_assert_eq!(operator_reward(fee, m, r) as i128, exact_op.floor().to_integer());

        // Closed forms with a fee the share divides exactly.
        let f = fee - fee % den + den;
        let sole = lp_reward(f, 7, 7, r) as i128;
        let one = operator_reward(f, 1, r) as i128;
        prop_assert_eq!(Ratio::from_integer(sole), Ratio::from_integer(f as i128) * rf);
        prop_assert_eq!(Ratio::from_integer(one), Ratio::from_integer(f as i128) * (Ratio::from_integer(1) - rf));
        Ok(())
    });
    match result {
        Ok(()) => Verdict::ok(format!("{REWARD_CASES} cases: sum <= F, deficit < payees, sole LP = F*r, m=1 gives F*(1-r)")),
        Err(e) => Verdict::fail(e.to_string()),
    }
}

/// One lock on a script-only chain; the claim executes at `deadline + offset`
/// and refunds are attempted every tick around the deadline. Returns
/// (claimed, refunded).
fn htlc_boundary(offset: i64) -> (bool, bool) {
    let mut cfg = ChainConfig::new(ChainId::SOURCE, 1);
    cfg.mode = ChainMode::ScriptOnly;
    let mut chain = Chain::new(cfg).expect("chain");
    let alice = Address::named("alice");
    chain.mint(alice, 1_000);
    let preimage = Preimage([7; 32]);
    let deadline: Tick = 20;
    let lock = HtlcLock {
        hash_lock: preimage.hash_lock(),
        deadline,
        refund_address: alice,
        claim_address: Address::named("exchange"),
        amount: 100,
    };
    chain.submit_tx(alice, Call::Htlc(HtlcCall::Lock { lock: lock.clone() }), 100, 1).expect("lock");
    chain.advance_tick(1).expect("tick");
    chain.advance_tick(2).expect("tick");
    let id = lock_id(&alice, &lock, 2);
    let claim_exec = (deadline as i64 + offset) as Tick;
    for t in 3..=deadline + 3 {
        // Submissions at t - 1 execute at t.
        if t == claim_exec {
            chain.submit_tx(Address::named("enclave"), Call::Htlc(HtlcCall::Claim { id, preimage }), 0, t - 1).expect("claim");
        }
        if t + 1 >= deadline {
            let _ = chain.submit_tx(alice, Call::Htlc(HtlcCall::Refund { id }), 0, t - 1);
        }
        chain.advance_tick(t).expect("tick");
    }
    let mut claimed = 0;
    let mut refunded = 0;
    for r in chain.event_log() {
        match &r.event {
            Event::Htlc(HtlcEvent::Claimed { .. }) => claimed += 1,
            Event::Htlc(HtlcEvent::Refunded { .. }) => refunded += 1,
            _ => {}
        }
    }
    assert!(claimed <= 1 && refunded <= 1);
    (claimed == 1, refunded == 1)
}

fn htlc() -> Verdict {
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    for (offset, expect_claim) in [(-1i64, true), (0, false), (1, false)] {
        let (claimed, refunded) = htlc_boundary(offset);
        if claimed == refunded {
            failures.push(format!("reveal at T{offset:+}: claimed={claimed} refunded={refunded}"));
        }
        if claimed != expect_claim {
            failures.push(format!("reveal at T{offset:+}: claimed={claimed}"));
        }
        notes.push(format!("T{offset:+}:{}", if claimed { "claim" } else { "refund" }));
    }
    let mut outcomes = BTreeMap::new();
    let mut downs = vec![None];
    downs.extend((0..=60).step_by(3).map(Some));
    for down in downs {
        let r = match run(suite::htlc_swap(down)) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        for p in r.failures() {
            failures.push(format!("{}: {} {}", r.scenario, p.property, p.detail));
        }
        for s in &r.swaps {
            *outcomes.entry(format!("{:?}", s.outcome)).or_insert(0) += 1;
            let branches = s.claimed_at.is_some() as u8 + s.refunded_at.is_some() as u8;
            let ok = match s.outcome {
                SwapOutcome::Claimed => branches == 1 && s.claimed_at.is_some() && s.transfers == 1,
                SwapOutcome::Refunded => branches == 1 && s.refunded_at.is_some() && s.transfers == 0,
                SwapOutcome::RefundedAfterTransfer => branches == 1 && s.refunded_at.is_some() && s.transfers == 1,
                SwapOutcome::NotStarted => branches == 0 && s.transfers == 0,
                _ => false,
            };
            if !ok {
                failures.push(format!("{}: {:?} branches={branches} transfers={}", r.scenario, s.outcome, s.transfers));
            }
        }
    }
    if !outcomes.contains_key("Claimed") || !outcomes.contains_key("Refunded") {
        failures.push(format!("outcomes not exercised: {outcomes:?}"));
    }
    Verdict::from_failures(failures, format!("{}; enclave-down sweep {outcomes:?}", notes.join(" ")))
}

fn determinism() -> Verdict {
    let mut failures = Vec::new();
    let mut scenarios = suite::named();
    scenarios.extend((1..=20).map(suite::randomized_seed));
    let count = scenarios.len();
    for s in scenarios {
        let name = s.name.clone();
        match (run(s.clone()), run(s)) {
            (Ok(a), Ok(b)) if a.to_json_lines() == b.to_json_lines() && a.to_table() == b.to_table() => {}
            _ => failures.push(format!("{name} differs between runs")),
        }
    }

    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/happy_path.toml");
    let dir = std::env::temp_dir().join(format!("acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let report = dir.join(format!("report{i}.jsonl"));
        let events = dir.join(format!("events{i}.jsonl"));
        let status = Command::new(env!("CARGO_BIN_EXE_mercury-sim"))
            .args(["--format", "json-lines", "--report"])
            .arg(&report)
            .arg("run")
            .arg(scenario)
            .arg("--events")
            .arg(&events)
            .output()
            .expect("cli runs");
        if !status.status.success() {
            failures.push(format!("cli exit {:?}", status.status.code()));
        }
        outputs.push((std::fs::read(&report).unwrap_or_default(), std::fs::read(&events).unwrap_or_default()));
    }
    let _ = std::fs::remove_dir_all(&dir);
    if outputs[0] != outputs[1] || outputs[0].0.is_empty() {
        failures.push("cli reports differ or are empty".into());
    }
    Verdict::from_failures(failures, format!("{count} scenarios and the CLI report/event files byte-identical across two runs"))
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Verdict); 10] = [
        (1, "atomicity under randomized faults", atomicity_suite),
        (2, "offline clients", offline_clients),
        (3, "threshold enforcement", threshold_enforcement),
        (4, "multisig amortization", amortization),
        (5, "checkpoints", checkpoints),
        (6, "light client", light_client),
        (7, "AMM exchange", amm_properties),
        (8, "reward split", rewards),
        (9, "HTLC exclusivity", htlc),
        (10, "determinism", determinism),
    ];
    let only: Option<u8> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut all = true;
    for (n, name, check) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        all &= verdict.passed;
        println!(
            "[{}] criterion {n:>2} {name}: {} ({:.1}s)",
            if verdict.passed { "PASS" } else { "FAIL" },
            verdict.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
