//! Liquid wallet balances and the burn sink.
//!
//! Stakes, lease escrow, compute balances and pending reward pools live with
//! their owners (stake table, market leases, chain state); the chain sums all
//! of them to check supply conservation.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::{ParticipantId, Tokens};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{who} holds {available} but {needed} is required")]
pub struct InsufficientFunds {
    pub who: ParticipantId,
    pub available: Tokens,
    pub needed: Tokens,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Ledger {
    balances: BTreeMap<ParticipantId, Tokens>,
    burned: Tokens,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn balance(&self, who: &ParticipantId) -> Tokens {
        self.balances.get(who).copied().unwrap_or_default()
    }

    pub fn balances(&self) -> &BTreeMap<ParticipantId, Tokens> {
        &self.balances
    }

    pub fn credit(&mut self, who: &ParticipantId, amount: Tokens) {
        let slot = self.balances.entry(who.clone()).or_default();
        *slot += amount;
    }

    pub fn debit(&mut self, who: &ParticipantId, amount: Tokens) -> Result<(), InsufficientFunds> {
        let available = self.balance(who);
        let rest = available.checked_sub(amount).ok_or_else(|| InsufficientFunds {
            who: who.clone(),
            available,
            needed: amount,
        })?;
        self.balances.insert(who.clone(), rest);
        Ok(())
    }

    pub fn burn(&mut self, amount: Tokens) {
        self.burned += amount;
    }

    pub fn burned(&self) -> Tokens {
        self.burned
    }

    /// Sum of wallet balances (burned tokens excluded).
    pub fn liquid_total(&self) -> Tokens {
        self.balances.values().copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn credit_debit_burn() {
        let a = ParticipantId::new("a");
        let mut l = Ledger::new();
        l.credit(&a, Tokens(10));
        l.debit(&a, Tokens(4)).unwrap();
        assert_eq!(l.balance(&a), Tokens(6));
        let err = l.debit(&a, Tokens(7)).unwrap_err();
        assert_eq!(err.available, Tokens(6));
        assert_eq!(l.balance(&a), Tokens(6));
        l.burn(Tokens(3));
        assert_eq!(l.burned(), Tokens(3));
        assert_eq!(l.liquid_total(), Tokens(6));
        assert_eq!(l.balance(&ParticipantId::new("z")), Tokens(0));
    }
}
