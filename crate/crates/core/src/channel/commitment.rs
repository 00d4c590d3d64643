use crate::crypto::{Address, HashLock};
use crate::ledger::{Transaction, TxInput, TxOutput};
use crate::script::{Continuation, Ptlc, Script, Witness};

use super::{ChannelError, ChannelState, Side, Terms};

/// An unsigned commitment transaction for one owner at one revision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitmentTemplate {
    pub owner: Side,
    pub revision: u64,
    pub tx: Transaction,
}

impl CommitmentTemplate {
    pub fn outputs(&self) -> &[TxOutput] {
        &self.tx.outputs
    }
}

/// Commitment outputs for `owner`, in order: A's balance, B's balance, bets,
/// conditional payments. Zero balances are left out.
///
/// The owner's own balance and every bet sit behind an htlc on `lock`, so the
/// counterparty can take them with the owner's revealed secret. The
/// counterparty's balance is paid out directly.
pub fn commitment_outputs(
    terms: &Terms,
    owner: Side,
    party_a: Address,
    party_b: Address,
    lock: HashLock,
    delay: crate::script::RelativeDelay,
) -> Result<Vec<TxOutput>, ChannelError> {
    let addr = |side| match side {
        Side::A => party_a,
        Side::B => party_b,
    };
    let owner_addr = addr(owner);
    let other_addr = addr(owner.other());
    let mut outputs = Vec::new();
    for side in [Side::A, Side::B] {
        let amount = terms.balance(side);
        if amount.is_zero() {
            continue;
        }
        let script = if side == owner {
            Script::htlc(lock, other_addr, delay, Continuation::PayToAddr(owner_addr))
        } else {
            Script::PayToAddr(addr(side))
        };
        outputs.push(TxOutput { amount, script });
    }
    for bet in &terms.bets {
        let ptlc = Ptlc::new(
            bet.prop,
            bet.backer,
            bet.onchain_timeout(delay),
            bet.doubter,
        )
        .map_err(|_| ChannelError::InvalidBet("zero timeout"))?;
        outputs.push(TxOutput {
            amount: bet.pot(),
            script: Script::htlc(lock, other_addr, delay, Continuation::Ptlc(ptlc)),
        });
    }
    for payment in &terms.payments {
        outputs.push(TxOutput {
            amount: payment.amount,
            script: Script::htlc(
                payment.lock,
                payment.payee,
                payment.delay,
                Continuation::PayToAddr(payment.payer),
            ),
        });
    }
    Ok(outputs)
}

impl ChannelState {
    /// The unsigned commitment of `owner` at `revision`, as this party sees it.
    pub fn build_commitment(
        &self,
        owner: Side,
        revision: u64,
    ) -> Result<CommitmentTemplate, ChannelError> {
        let terms = self
            .terms_at(revision)
            .ok_or(ChannelError::StaleRevision(revision))?;
        let lock = self.hash_for(owner, revision)?;
        let funding = self
            .funding_outpoint()
            .ok_or_else(|| ChannelError::WrongStatus(self.status().label()))?;
        let params = self.params();
        let outputs = commitment_outputs(
            terms,
            owner,
            params.party_a,
            params.party_b,
            lock,
            params.csv_delay,
        )?;
        Ok(CommitmentTemplate {
            owner,
            revision,
            tx: Transaction {
                inputs: vec![TxInput {
                    outpoint: funding,
                    witness: Witness::Sig2Witness { a: None, b: None },
                }],
                outputs,
            },
        })
    }

    /// My commitment at `revision` carrying both signatures, ready to publish.
    pub fn signed_commitment(&self, revision: u64) -> Result<Transaction, ChannelError> {
        let their_sig = *self
            .their_sigs
            .get(&revision)
            .ok_or(ChannelError::MissingCounterpartySig(revision))?;
        let mut template = self.build_commitment(self.side(), revision)?;
        let my_sig = crate::crypto::sign(self.key(), &template.tx.txid());
        let (a, b) = match self.side() {
            Side::A => (my_sig, their_sig),
            Side::B => (their_sig, my_sig),
        };
        template.tx.inputs[0].witness = Witness::Sig2Witness {
            a: Some(a),
            b: Some(b),
        };
        Ok(template.tx)
    }
}
