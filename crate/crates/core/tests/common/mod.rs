//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use mercury_core::crypto::{hash, Digest, EnclaveId, KeyPair, Manufacturer, MultiSignature};
use mercury_core::types::{Address, Amount, ChainId, Tick};
use mercury_core::vault::{
    CallContext, CostMeter, Effects, SignedHeaderRef, VaultCall, VaultConfig, VaultError, VaultEvent, VaultState,
};

pub const CHAIN: ChainId = ChainId::SOURCE;

/// A vault with `n` registered operators and registration closed, driven
/// directly through `VaultState::execute`.
pub struct VaultFixture {
    pub vault: VaultState,
    pub keys: Vec<KeyPair>,
    pub recent: Vec<Digest>,
    pub meter: CostMeter,
}

impl VaultFixture {
    pub fn new(n: usize) -> Self {
        let maker = Manufacturer::new(b"fixture");
        let prog = hash(b"fixture-program");
        let deployer = Address::named("deployer");
        let mut f = VaultFixture {
            vault: VaultState::new(VaultConfig {
                program_digest: prog,
                manufacturer_root: maker.root_public_key(),
                deployer,
                lag_bound: 4,
                tau_w: 10,
                pledge_floor: 5,
                pledge_bps: 100,
            }),
            keys: (0..n).map(|i| KeyPair::from_seed(format!("fixture-op{i}").as_bytes())).collect(),
            recent: (0..10u64).map(|h| hash(&h.to_le_bytes())).collect(),
            meter: CostMeter::default(),
        };
        for (i, kp) in f.keys.clone().iter().enumerate() {
            let quote = maker.attest(EnclaveId(i as u64), prog, kp.public_key);
            let d = f.recent[9];
            let block_proof = SignedHeaderRef {
                chain_id: CHAIN,
                height: 9,
                header_digest: d,
                signature: kp.sign(&SignedHeaderRef::message(CHAIN, 9, &d)),
            };
            f.call(Address::named("host"), 0, 0, &VaultCall::Register { quote, block_proof, pk: kp.public_key })
                .expect("registration");
        }
        f.call(deployer, 0, 0, &VaultCall::CloseRegistration).expect("close");
        f.call(Address::named("lp"), 1_000_000_000, 0, &VaultCall::FundLiquidity).expect("fund");
        f
    }

    pub fn call(&mut self, sender: Address, value: Amount, now: Tick, call: &VaultCall) -> Result<Effects, VaultError> {
        self.meter = CostMeter::default();
        let mut ctx = CallContext { chain_id: CHAIN, now, sender, value, recent_headers: &self.recent, meter: &mut self.meter };
        self.vault.execute(call, &mut ctx)
    }

    pub fn sign(&self, digest: Digest, signers: &[usize]) -> MultiSignature {
        MultiSignature::new(digest, self.vault.threshold, signers.iter().map(|&i| self.keys[i].sign(&digest.0)))
    }

    pub fn deposit(&mut self, who: &str, value: Amount, now: Tick) -> Digest {
        let e = self.call(Address::named(who), value, now, &VaultCall::Deposit).expect("deposit");
        match &e.events[0] {
            VaultEvent::Deposit { id, .. } => *id,
            other => panic!("unexpected event {other:?}"),
        }
    }
}

/// Largest tolerated crash count for `n` operators.
pub fn max_faulty(n: usize) -> usize {
    (n - 1) / 2
}
