//! Going on chain: unilateral close, punishing revoked commitments, and
//! claiming commitment outputs once their conditions hold.

use std::collections::BTreeMap;

use crate::amount::Amount;
use crate::crypto::{sign, HashLock, PrivKey, Secret};
use crate::ledger::{ChainState, LedgerError, OutPoint, Transaction, TxInput, TxOutput};
use crate::script::{Continuation, Htlc, Ptlc, Script, Witness};

use super::{ChannelError, ChannelState, ChannelStatus};

/// Signs every input of `tx` with `key`, wrapping the signature per input.
fn sign_inputs(
    key: &PrivKey,
    mut tx: Transaction,
    wrap: &[fn(crate::crypto::Sig) -> Witness],
) -> Transaction {
    let sig = sign(key, &tx.digest());
    for (input, w) in tx.inputs.iter_mut().zip(wrap) {
        input.witness = w(sig);
    }
    tx
}

fn placeholder() -> Witness {
    Witness::Sig2Witness { a: None, b: None }
}

fn ptlc_witness(
    p: &Ptlc,
    key: &PrivKey,
    chain: &ChainState,
) -> Option<fn(crate::crypto::Sig) -> Witness> {
    let me = key.address();
    if p.prover == me && chain.is_proven(&p.prop) {
        Some(Witness::ProvenBranch)
    } else if p.refundee == me && chain.height() >= p.timeout.0 {
        Some(Witness::TimeoutBranch)
    } else {
        None
    }
}

/// A transaction moving `outpoint` to `key`'s address, if a spend path is
/// open to `key` right now. Preimages for htlc locks come from `preimage_for`.
/// Competing spends are not checked here: the caller submits and the ledger
/// rejects the later of two conflicting claims.
pub fn claim_output(
    key: &PrivKey,
    chain: &ChainState,
    outpoint: OutPoint,
    preimage_for: &dyn Fn(&HashLock) -> Option<Secret>,
) -> Option<Transaction> {
    let utxo = chain.utxo(&outpoint)?;
    let me = key.address();
    let mut tx = Transaction {
        inputs: vec![TxInput {
            outpoint,
            witness: placeholder(),
        }],
        outputs: vec![TxOutput {
            amount: utxo.output.amount,
            script: Script::PayToAddr(me),
        }],
    };
    let sig = sign_later(&tx, key);
    let witness = match &utxo.output.script {
        Script::PayToAddr(_) | Script::Multisig2(..) => return None,
        Script::Htlc(Htlc {
            lock,
            claimant,
            delay,
            inner,
        }) => {
            let preimage = if *claimant == me {
                preimage_for(lock)
            } else {
                None
            };
            if let Some(secret) = preimage {
                Witness::SecretBranch { secret, sig: sig() }
            } else if chain.confirmations(&outpoint)? >= delay.blocks() {
                match inner {
                    Continuation::PayToAddr(a) if *a == me => {
                        Witness::delay(Witness::SigWitness(sig()))
                    }
                    Continuation::PayToAddr(_) => return None,
                    Continuation::Ptlc(p) => Witness::delay(ptlc_witness(p, key, chain)?(sig())),
                }
            } else {
                return None;
            }
        }
        Script::Ptlc(p) => ptlc_witness(p, key, chain)?(sig()),
    };
    tx.inputs[0].witness = witness;
    Some(tx)
}

/// Defers signing until a spend path has been chosen.
fn sign_later<'a>(tx: &Transaction, key: &'a PrivKey) -> impl Fn() -> crate::crypto::Sig + 'a {
    let digest = tx.digest();
    move || sign(key, &digest)
}

impl ChannelState {
    /// Publishes my latest commitment that carries the counterparty's signature.
    pub fn close_unilateral(&mut self) -> Result<Transaction, ChannelError> {
        let revision = self
            .latest_signed_revision()
            .ok_or(ChannelError::MissingCounterpartySig(self.revision()))?;
        self.publish_revision(revision)
    }

    /// Publishes my commitment at any revision I hold a signature for,
    /// including revoked ones.
    pub fn publish_revision(&mut self, revision: u64) -> Result<Transaction, ChannelError> {
        let tx = self.signed_commitment(revision)?;
        self.set_status(ChannelStatus::ClosedUnilateral {
            by: self.side(),
            revision,
        });
        Ok(tx)
    }

    /// Sweeps every output of a revoked counterparty commitment that is
    /// locked with the revealed secret.
    pub fn sweep_revoked(&self, commitment: &Transaction) -> Result<Transaction, ChannelError> {
        let (owner, revision) = self
            .identify_commitment(&commitment.txid())
            .filter(|(owner, _)| *owner != self.side())
            .ok_or(ChannelError::NotCounterpartyCommitment)?;
        debug_assert_ne!(owner, self.side());
        let secret = *self
            .revealed_secret(revision)
            .ok_or(ChannelError::NoRevealedSecret)?;
        let lock = secret.hash();
        let me = self.my_address();
        let txid = commitment.txid();
        let mut inputs = Vec::new();
        let mut total = Amount::ZERO;
        for (index, output) in commitment.outputs.iter().enumerate() {
            if let Script::Htlc(h) = &output.script {
                if h.lock == lock && h.claimant == me {
                    inputs.push(TxInput {
                        outpoint: OutPoint::new(txid, index as u32),
                        witness: placeholder(),
                    });
                    total = total.checked_add(output.amount)?;
                }
            }
        }
        if inputs.is_empty() {
            return Err(ChannelError::NothingToClaim);
        }
        let tx = Transaction {
            inputs,
            outputs: vec![TxOutput {
                amount: total,
                script: Script::PayToAddr(me),
            }],
        };
        let sig = sign(self.key(), &tx.digest());
        let mut tx = tx;
        for input in &mut tx.inputs {
            input.witness = Witness::SecretBranch { secret, sig };
        }
        Ok(tx)
    }

    /// The penalty transaction for `commitment` if it is a revoked
    /// counterparty commitment; `None` for anything else, including the
    /// counterparty's current commitment and a revoked one that locks
    /// nothing for me to sweep.
    pub fn punish(&self, commitment: &Transaction) -> Result<Option<Transaction>, ChannelError> {
        match self.sweep_revoked(commitment) {
            Ok(tx) => Ok(Some(tx)),
            Err(
                ChannelError::NoRevealedSecret
                | ChannelError::NotCounterpartyCommitment
                | ChannelError::NothingToClaim,
            ) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Claims the bet output at `outpoint` in my role: through the proven
    /// branch as backer, through the timeout branch as doubter. The spend is
    /// checked against the chain and script failures are returned as errors.
    pub fn claim_bet_onchain(
        &self,
        chain: &ChainState,
        outpoint: OutPoint,
    ) -> Result<Transaction, ChannelError> {
        let utxo = chain
            .utxo(&outpoint)
            .ok_or(LedgerError::UnknownOutpoint(outpoint))?;
        let me = self.my_address();
        let (ptlc, delayed) = match &utxo.output.script {
            Script::Htlc(Htlc {
                inner: Continuation::Ptlc(p),
                ..
            }) => (p, true),
            Script::Ptlc(p) => (p, false),
            _ => return Err(ChannelError::NoSuchBet),
        };
        let proven = if ptlc.prover == me {
            true
        } else if ptlc.refundee == me {
            false
        } else {
            return Err(ChannelError::NoSuchBet);
        };
        let wrap: fn(crate::crypto::Sig) -> Witness = match (delayed, proven) {
            (true, true) => |s| Witness::delay(Witness::ProvenBranch(s)),
            (true, false) => |s| Witness::delay(Witness::TimeoutBranch(s)),
            (false, true) => Witness::ProvenBranch,
            (false, false) => Witness::TimeoutBranch,
        };
        let tx = Transaction {
            inputs: vec![TxInput {
                outpoint,
                witness: placeholder(),
            }],
            outputs: vec![TxOutput {
                amount: utxo.output.amount,
                script: Script::PayToAddr(me),
            }],
        };
        let tx = sign_inputs(self.key(), tx, &[wrap]);
        match chain.validate_tx(&tx) {
            Ok(()) => Ok(tx),
            Err(e) => Err(e
                .eval_error()
                .map(ChannelError::Eval)
                .unwrap_or(ChannelError::Ledger(e))),
        }
    }

    /// Claim transactions for every output of the closing commitment that I
    /// can take right now. `preimages` supplies payment preimages I know.
    pub fn claimable(
        &self,
        chain: &ChainState,
        preimages: &BTreeMap<HashLock, Secret>,
    ) -> Vec<Transaction> {
        let Some(txid) = self.closed_by() else {
            return Vec::new();
        };
        let Some(confirmed) = chain.confirmed_tx(&txid) else {
            return Vec::new();
        };
        let lookup = |lock: &HashLock| {
            preimages.get(lock).copied().or_else(|| {
                (1..=self.revision() + 1)
                    .filter_map(|r| self.revealed_secret(r))
                    .find(|s| s.hash() == *lock)
                    .copied()
            })
        };
        (0..confirmed.tx.outputs.len())
            .filter_map(|i| claim_output(self.key(), chain, OutPoint::new(txid, i as u32), &lookup))
            .collect()
    }
}
