//! Drives both parties of a channel directly, without a message layer.

use std::fmt;

use rand::RngCore;

use crate::amount::Amount;
use crate::crypto::{Address, PrivKey};
use crate::ledger::{ChainState, Transaction, TxId};

use super::{select_inputs, Bet, Change, ChannelError, ChannelParams, ChannelState, Side};

/// One step of the update handshake, recorded in the order it happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Propose { by: Side, revision: u64 },
    Accept { by: Side, revision: u64 },
    CommitSig { by: Side, revision: u64 },
    Revoke { by: Side, revision: u64 },
    Bump { by: Side, revision: u64 },
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, by, revision) = match self {
            Step::Propose { by, revision } => ("propose", by, revision),
            Step::Accept { by, revision } => ("accept", by, revision),
            Step::CommitSig { by, revision } => ("commit-sig", by, revision),
            Step::Revoke { by, revision } => ("revoke", by, revision),
            Step::Bump { by, revision } => ("bump", by, revision),
        };
        write!(f, "{name}({by},{revision})")
    }
}

pub struct OpenedChannel {
    pub a: ChannelState,
    pub b: ChannelState,
    pub funding_txid: TxId,
}

/// Opens a channel: exchanges first hashes and commitment signatures, then
/// signs and submits the funding transaction. Confirming it is up to the
/// caller (advance the chain, then `confirm_funding` on both states).
pub fn open_channel<R: RngCore + ?Sized>(
    chain: &mut ChainState,
    params: ChannelParams,
    key_a: PrivKey,
    key_b: PrivKey,
    rng: &mut R,
) -> Result<OpenedChannel, ChannelError> {
    let inputs_a = select_inputs(chain, &params.party_a, params.contrib_a)?;
    let inputs_b = select_inputs(chain, &params.party_b, params.contrib_b)?;
    let (mut a, offer) = ChannelState::initiate(params, key_a, inputs_a, rng)?;
    let (mut b, accept) = ChannelState::respond(&offer, key_b, inputs_b, rng)?;
    a.receive_open_accept(&accept)?;
    let (r, sig) = b.sign_counterparty_commitment()?;
    a.receive_commitment_sig(r, sig)?;
    let (r, sig) = a.sign_counterparty_commitment()?;
    b.receive_commitment_sig(r, sig)?;
    let mut witnesses = a.sign_funding()?;
    witnesses.extend(b.sign_funding()?);
    let funding = a.assemble_funding(&witnesses)?;
    let funding_txid = chain.submit_tx(funding)?;
    Ok(OpenedChannel { a, b, funding_txid })
}

fn split<'x>(
    a: &'x mut ChannelState,
    b: &'x mut ChannelState,
    first: Side,
) -> (&'x mut ChannelState, &'x mut ChannelState) {
    match first {
        Side::A => (a, b),
        Side::B => (b, a),
    }
}

/// Runs one full update with `proposer` going first. On failure before any
/// signature was exchanged the staged update is rolled back on both sides.
pub fn run_update<R: RngCore + ?Sized>(
    a: &mut ChannelState,
    b: &mut ChannelState,
    proposer: Side,
    change: Change,
    height: u64,
    rng: &mut R,
) -> Result<Vec<Step>, ChannelError> {
    let (p, q) = split(a, b, proposer);
    let next = p.revision() + 1;
    let (ps, qs) = (p.side(), q.side());
    let mut steps = Vec::new();

    let hash_p = p.propose(change.clone(), height, rng)?;
    steps.push(Step::Propose {
        by: ps,
        revision: next,
    });
    let hash_q = match q.accept(change, hash_p, height, rng) {
        Ok(h) => h,
        Err(e) => {
            p.cancel_pending()?;
            return Err(e);
        }
    };
    p.receive_accept(hash_q)?;
    steps.push(Step::Accept {
        by: qs,
        revision: next,
    });

    let (r, sig) = q.sign_counterparty_commitment()?;
    p.receive_commitment_sig(r, sig)?;
    steps.push(Step::CommitSig {
        by: qs,
        revision: r,
    });
    let (r, sig) = p.sign_counterparty_commitment()?;
    q.receive_commitment_sig(r, sig)?;
    steps.push(Step::CommitSig {
        by: ps,
        revision: r,
    });

    let (m, secret) = p.revoke_previous()?;
    q.receive_revocation(m, secret)?;
    steps.push(Step::Revoke {
        by: ps,
        revision: m,
    });
    let (m, secret) = q.revoke_previous()?;
    p.receive_revocation(m, secret)?;
    steps.push(Step::Revoke {
        by: qs,
        revision: m,
    });

    for s in [p, q] {
        if !s.complete_update()? {
            return Err(ChannelError::NoPendingUpdate);
        }
        steps.push(Step::Bump {
            by: s.side(),
            revision: next,
        });
    }
    Ok(steps)
}

fn side_of(state: &ChannelState, addr: &Address) -> Result<Side, ChannelError> {
    state
        .params()
        .side_of(addr)
        .ok_or(ChannelError::InvalidBet("party not in channel"))
}

/// Moves balances to `(new_a, new_b)`. The side whose balance falls proposes.
pub fn update_balance<R: RngCore + ?Sized>(
    a: &mut ChannelState,
    b: &mut ChannelState,
    new_a: Amount,
    new_b: Amount,
    height: u64,
    rng: &mut R,
) -> Result<Vec<Step>, ChannelError> {
    let proposer = if new_b < b.terms().balance_b {
        Side::B
    } else {
        Side::A
    };
    run_update(
        a,
        b,
        proposer,
        Change::SetBalances {
            balance_a: new_a,
            balance_b: new_b,
        },
        height,
        rng,
    )
}

/// Locks both stakes into a new bet. The doubter proposes.
pub fn add_bet<R: RngCore + ?Sized>(
    a: &mut ChannelState,
    b: &mut ChannelState,
    bet: Bet,
    height: u64,
    rng: &mut R,
) -> Result<Vec<Step>, ChannelError> {
    let proposer = side_of(a, &bet.doubter)?;
    run_update(a, b, proposer, Change::AddBet(bet), height, rng)
}

/// Releases a bet's pot to `winner`. The loser proposes.
pub fn settle_bet<R: RngCore + ?Sized>(
    a: &mut ChannelState,
    b: &mut ChannelState,
    bet: Bet,
    winner: Address,
    height: u64,
    rng: &mut R,
) -> Result<Vec<Step>, ChannelError> {
    let proposer = side_of(a, &winner)?.other();
    run_update(
        a,
        b,
        proposer,
        Change::SettleBet { bet, winner },
        height,
        rng,
    )
}

/// Both parties sign the closing transaction; the caller submits it.
pub fn close_cooperative(
    a: &mut ChannelState,
    b: &mut ChannelState,
) -> Result<Transaction, ChannelError> {
    a.closing_tx()?;
    let sig_b = b.sign_close()?;
    a.complete_close(sig_b)
}
