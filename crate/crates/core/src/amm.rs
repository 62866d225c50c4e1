//! Constant-product pricing and fee distribution.
//!
//! `reserve_x` holds the source-chain currency and `reserve_y` the
//! target-chain currency. All arithmetic is on unsigned integers with
//! flooring division, so rounding always favors the pool.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::PublicKey;
use crate::types::{Address, Amount};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AmmError {
    #[error("trade input must be positive")]
    ZeroInput,
    #[error("pool has no liquidity")]
    EmptyPool,
    #[error("output rounds down to zero")]
    DustOutput,
    #[error("trade would drain the pool")]
    DrainsPool,
    #[error("quoted output {quoted} exceeds what the pool can pay ({available})")]
    StaleQuote { quoted: Amount, available: Amount },
    #[error("contribution ({x}, {y}) is off the reserve ratio")]
    OffRatio { x: Amount, y: Amount },
    #[error("fee share must satisfy 0 <= num <= den, den > 0")]
    BadFeeShare,
}

/// A rational fraction in `[0, 1]`, written `num/den`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct FeeShare {
    num: u64,
    den: u64,
}

impl FeeShare {
    pub fn new(num: u64, den: u64) -> Result<Self, AmmError> {
        if den == 0 || num > den {
            return Err(AmmError::BadFeeShare);
        }
        Ok(FeeShare { num, den })
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn complement(&self) -> FeeShare {
        FeeShare { num: self.den - self.num, den: self.den }
    }
}

impl fmt::Debug for FeeShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl fmt::Display for FeeShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for FeeShare {
    type Err = AmmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s.split_once('/').ok_or(AmmError::BadFeeShare)?;
        let num = n.trim().parse().map_err(|_| AmmError::BadFeeShare)?;
        let den = d.trim().parse().map_err(|_| AmmError::BadFeeShare)?;
        FeeShare::new(num, den)
    }
}

impl Serialize for FeeShare {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeeShare {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Output of a constant-product trade: `floor(out_reserve * dx / (in_reserve + dx))`,
/// which is `floor(Y - k/(X+x))` with `k = X*Y`.
pub fn quote(in_reserve: Amount, out_reserve: Amount, dx: Amount) -> Result<Amount, AmmError> {
    if dx == 0 {
        return Err(AmmError::ZeroInput);
    }
    if in_reserve == 0 || out_reserve == 0 {
        return Err(AmmError::EmptyPool);
    }
    let y = (out_reserve as u128 * dx as u128) / (in_reserve as u128 + dx as u128);
    let y = y as Amount;
    if y == 0 {
        return Err(AmmError::DustOutput);
    }
    if y >= out_reserve {
        return Err(AmmError::DrainsPool);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub reserve_x: Amount,
    pub reserve_y: Amount,
    /// Product recorded at the last liquidity change; trades never push the
    /// live product below it.
    pub invariant_k: u128,
    pub lp_shares: BTreeMap<Address, u64>,
    pub fee_share: FeeShare,
    pub fee_per_tx: Amount,
}

impl Pool {
    pub fn new(fee_share: FeeShare, fee_per_tx: Amount) -> Self {
        Pool {
            reserve_x: 0,
            reserve_y: 0,
            invariant_k: 0,
            lp_shares: BTreeMap::new(),
            fee_share,
            fee_per_tx,
        }
    }

    pub fn product(&self) -> u128 {
        self.reserve_x as u128 * self.reserve_y as u128
    }

    pub fn total_shares(&self) -> u64 {
        self.lp_shares.values().sum()
    }

    /// Price of `x` source units without touching the reserves.
    pub fn quote(&self, x: Amount) -> Result<Amount, AmmError> {
        quote(self.reserve_x, self.reserve_y, x)
    }

    /// Sells `x` of the source currency for target currency.
    pub fn exchange(&mut self, x: Amount) -> Result<Amount, AmmError> {
        let y = self.quote(x)?;
        self.reserve_x += x;
        self.reserve_y -= y;
        Ok(y)
    }

    /// Sells `y` of the target currency back for source currency.
    pub fn exchange_reverse(&mut self, y: Amount) -> Result<Amount, AmmError> {
        let x = quote(self.reserve_y, self.reserve_x, y)?;
        self.reserve_y += y;
        self.reserve_x -= x;
        Ok(x)
    }

    /// Applies a trade priced earlier. Accepted only if `y` is still exactly
    /// the live price of `x`.
    pub fn apply_quoted(&mut self, x: Amount, y: Amount) -> Result<(), AmmError> {
        let available = self.quote(x)?;
        if y != available {
            return Err(AmmError::StaleQuote { quoted: y, available });
        }
        self.reserve_x += x;
        self.reserve_y -= y;
        Ok(())
    }

    /// Adds liquidity in the current reserve ratio (within one smallest unit)
    /// and returns minted shares. The first LP receives shares equal to its
    /// source-side contribution.
    pub fn add_liquidity(&mut self, lp: Address, x: Amount, y: Amount) -> Result<u64, AmmError> {
        if x == 0 || y == 0 {
            return Err(AmmError::ZeroInput);
        }
        let total = self.total_shares();
        let minted = if total == 0 || self.reserve_x == 0 {
            x
        } else {
            let lhs = y as u128 * self.reserve_x as u128;
            let rhs = x as u128 * self.reserve_y as u128;
            if lhs.abs_diff(rhs) > self.reserve_x as u128 {
                return Err(AmmError::OffRatio { x, y });
            }
            ((x as u128 * total as u128) / self.reserve_x as u128) as u64
        };
        self.reserve_x += x;
        self.reserve_y += y;
        self.invariant_k = self.product();
        *self.lp_shares.entry(lp).or_default() += minted;
        Ok(minted)
    }
}

/// LP reward `floor(F * r * L / T)`. No rewards when there is no liquidity.
pub fn lp_reward(fee: Amount, lp_liquidity: u64, total_liquidity: u64, r: FeeShare) -> Amount {
    if total_liquidity == 0 {
        return 0;
    }
    let num = fee as u128 * r.num as u128 * lp_liquidity as u128;
    let den = r.den as u128 * total_liquidity as u128;
    (num / den) as Amount
}

/// Per-signer operator reward `floor(F * (1 - r) / m)`.
pub fn operator_reward(fee: Amount, signers: usize, r: FeeShare) -> Amount {
    assert!(signers >= 1, "operator reward needs at least one signer");
    let c = r.complement();
    let num = fee as u128 * c.num as u128;
    let den = c.den as u128 * signers as u128;
    (num / den) as Amount
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardLedger {
    pub lp_accrued: BTreeMap<Address, Amount>,
    pub operator_accrued: BTreeMap<PublicKey, Amount>,
    /// Rounding remainder kept by the vault.
    pub dust: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distribution {
    pub to_lps: Amount,
    pub to_operators: Amount,
    pub dust: Amount,
}

impl RewardLedger {
    /// Splits one transaction fee between LPs (pro rata on shares) and the
    /// operators whose signatures formed the final multisig.
    pub fn distribute(
        &mut self,
        fee: Amount,
        lp_shares: &BTreeMap<Address, u64>,
        signers: &[PublicKey],
        r: FeeShare,
    ) -> Distribution {
        let total: u64 = lp_shares.values().sum();
        let mut to_lps = 0;
        for (lp, &shares) in lp_shares {
            let pay = lp_reward(fee, shares, total, r);
            if pay > 0 {
                *self.lp_accrued.entry(*lp).or_default() += pay;
            }
            to_lps += pay;
        }
        let mut to_operators = 0;
        if !signers.is_empty() {
            let each = operator_reward(fee, signers.len(), r);
            for pk in signers {
                *self.operator_accrued.entry(*pk).or_default() += each;
                to_operators += each;
            }
        }
        let dust = fee - to_lps - to_operators;
        self.dust += dust;
        Distribution { to_lps, to_operators, dust }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(num: u64, den: u64) -> FeeShare {
        FeeShare::new(num, den).unwrap()
    }

    fn pool(x: Amount, y: Amount) -> Pool {
        let mut p = Pool::new(r(3, 10), 0);
        p.add_liquidity(Address::named("lp0"), x, y).unwrap();
        p
    }

    #[test]
    fn exchange_thousand_pool() {
        let mut p = pool(1000, 1000);
        assert_eq!(p.exchange(100).unwrap(), 90);
        assert_eq!((p.reserve_x, p.reserve_y), (1100, 910));
        assert!(p.product() >= 1_000_000);
    }

    #[test]
    fn exchange_shallow_pool_halves_rate() {
        let mut p = pool(1, 2500);
        assert_eq!(p.exchange(1).unwrap(), 1250);
    }

    #[test]
    fn zero_and_dust_trades_rejected() {
        let mut p = pool(1000, 1000);
        assert_eq!(p.exchange(0), Err(AmmError::ZeroInput));
        let mut thin = pool(1_000_000, 10);
        assert_eq!(thin.exchange(1), Err(AmmError::DustOutput));
        assert_eq!(thin.reserve_x, 1_000_000);
    }

    #[test]
    fn stale_quote_rejected() {
        let mut p = pool(1000, 1000);
        assert!(matches!(p.apply_quoted(100, 91), Err(AmmError::StaleQuote { .. })));
        assert!(matches!(p.apply_quoted(100, 80), Err(AmmError::StaleQuote { .. })));
        p.apply_quoted(100, 90).unwrap();
        assert!(matches!(p.apply_quoted(100, 90), Err(AmmError::StaleQuote { .. })));
        assert!(p.product() >= 1_000_000);
    }

    #[test]
    fn lp_reward_examples() {
        assert_eq!(lp_reward(100, 50, 50, r(3, 10)), 30);
        assert_eq!(lp_reward(100, 25, 50, r(3, 10)), 15);
        assert_eq!(lp_reward(100, 25, 50, r(0, 10)), 0);
        assert_eq!(lp_reward(100, 0, 0, r(3, 10)), 0);
    }

    #[test]
    fn operator_reward_examples() {
        assert_eq!(operator_reward(100, 1, r(0, 1)), 100);
        assert_eq!(operator_reward(100, 2, r(3, 10)), 35);
        assert_eq!(operator_reward(100, 3, r(3, 10)), 23);
    }

    #[test]
    fn ledger_keeps_dust() {
        let mut ledger = RewardLedger::default();
        let mut lps = BTreeMap::new();
        lps.insert(Address::named("a"), 10);
        let signers: Vec<_> = (0..3).map(|i| crate::crypto::KeyPair::from_seed(&[i]).public_key).collect();
        let d = ledger.distribute(100, &lps, &signers, r(3, 10));
        assert_eq!(d, Distribution { to_lps: 30, to_operators: 69, dust: 1 });
        assert_eq!(ledger.dust, 1);
    }

    #[test]
    fn liquidity_minting() {
        let mut p = Pool::new(r(3, 10), 0);
        assert_eq!(p.add_liquidity(Address::named("a"), 1000, 1000).unwrap(), 1000);
        assert_eq!(p.invariant_k, 1_000_000);
        assert_eq!(p.add_liquidity(Address::named("b"), 500, 500).unwrap(), 500);
        assert_eq!(
            p.add_liquidity(Address::named("c"), 500, 400),
            Err(AmmError::OffRatio { x: 500, y: 400 })
        );
        assert_eq!(p.total_shares(), 1500);
    }

    #[test]
    fn fee_share_parsing() {
        assert_eq!("3/10".parse::<FeeShare>().unwrap(), r(3, 10));
        assert!("11/10".parse::<FeeShare>().is_err());
        assert!("1/0".parse::<FeeShare>().is_err());
        assert!("abc".parse::<FeeShare>().is_err());
    }
}
