use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::amount::Amount;
use crate::channel::{
    select_inputs, Bet, Change, ChannelError, ChannelParams, ChannelState, ChannelStatus, Side,
};
use crate::crypto::{keygen, Address, HashLock, PrivKey, PropositionId, Secret};
use crate::ledger::{ChainState, LedgerError, OutPoint, Transaction};
use crate::market::probability_line;
use crate::script::{RelativeDelay, Witness};

use super::{verify_proof, Envelope, LogEntry, LogLevel, Message, Policy, PolicyKind, ProofOracle};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActorConfig {
    pub name: String,
    pub faucet: Amount,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelConfig {
    pub id: String,
    pub a: String,
    pub b: String,
    pub contrib_a: Amount,
    pub contrib_b: Amount,
    pub csv_delay: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropConfig {
    pub label: String,
    pub provable: bool,
    /// Height from which each named actor holds a proof.
    pub available: BTreeMap<String, u64>,
}

/// A multi-hop payment: `path` lists the actors from sender to receiver and
/// `channels[i]` joins `path[i]` and `path[i + 1]`. Hop `i` carries `amounts[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutePlan {
    pub path: Vec<String>,
    pub channels: Vec<String>,
    pub amounts: Vec<Amount>,
    pub delays: Vec<RelativeDelay>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("unknown actor {0}")]
    UnknownActor(String),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("unknown proposition {0}")]
    UnknownProp(String),
    #[error("channel {0} is not open for {1}")]
    NotOpen(String, String),
    #[error("channel {channel}: {error}")]
    Channel {
        channel: String,
        error: ChannelError,
    },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
struct DropRule {
    kind: String,
    from: Option<String>,
    remaining: u64,
}

#[derive(Clone, Debug)]
struct Actor {
    name: String,
    key: PrivKey,
    addr: Address,
    policy: Policy,
    faucet: Amount,
    channels: BTreeMap<String, ChannelState>,
    next_seq: u64,
    last_seq: BTreeMap<String, u64>,
    /// Propositions this actor holds a valid proof of, from any source.
    proofs: BTreeSet<PropositionId>,
    /// Proofs received from a counterparty, per channel.
    received: BTreeSet<(String, PropositionId)>,
    /// Height at which a proof was revealed on a channel.
    revealed: BTreeMap<(String, PropositionId), u64>,
    preimages: BTreeMap<HashLock, Secret>,
    queued: VecDeque<Queued>,
    stalled_since: BTreeMap<String, u64>,
    timeout_requested: Vec<(String, Bet)>,
    payment_seen: BTreeMap<(String, HashLock), u64>,
    fail_requested: BTreeSet<(String, HashLock)>,
    cheated: bool,
    submitted: BTreeSet<OutPoint>,
}

/// Deterministic scheduler for a set of actors sharing one chain.
/// A change waiting for its channel to go idle. A balance move remembers the
/// balances it was computed from and is replayed as a transfer.
#[derive(Clone, Debug)]
struct Queued {
    channel: String,
    change: Change,
    base: Option<(Amount, Amount)>,
}

impl Queued {
    fn new(channel: &str, change: Change) -> Queued {
        Queued {
            channel: channel.to_string(),
            change,
            base: None,
        }
    }

    /// The change to propose against `terms`, or `None` when a replayed
    /// transfer no longer fits.
    fn rebase(self, terms: &crate::channel::Terms) -> Option<Change> {
        match (self.change, self.base) {
            (
                Change::SetBalances {
                    balance_a,
                    balance_b,
                },
                Some((base_a, base_b)),
            ) => {
                let shift = |now: Amount, new: Amount, base: Amount| {
                    let atoms = now.atoms() as i128 + new.delta(base);
                    u64::try_from(atoms).ok().map(Amount::from_atoms)
                };
                Some(Change::SetBalances {
                    balance_a: shift(terms.balance_a, balance_a, base_a)?,
                    balance_b: shift(terms.balance_b, balance_b, base_b)?,
                })
            }
            (change, _) => Some(change),
        }
    }
}

pub struct Harness {
    chain: ChainState,
    actors: BTreeMap<String, Actor>,
    names: BTreeMap<Address, String>,
    channels: BTreeMap<String, ChannelConfig>,
    props: BTreeMap<String, PropConfig>,
    oracle: ProofOracle,
    inboxes: BTreeMap<String, VecDeque<Envelope>>,
    rng: ChaCha20Rng,
    drops: Vec<DropRule>,
    silenced: BTreeMap<String, u64>,
    tainted: BTreeSet<String>,
    log: Vec<LogEntry>,
    routes: BTreeMap<HashLock, RoutePlan>,
    public_preimages: BTreeMap<HashLock, Secret>,
    market_lines: Vec<String>,
    max_deadline: u64,
}

const QUIET_STEP_LIMIT: usize = 100_000;

fn ch_err(channel: &str) -> impl Fn(ChannelError) -> HarnessError + '_ {
    move |error| HarnessError::Channel {
        channel: channel.to_string(),
        error,
    }
}

impl Harness {
    pub fn new(
        seed: u64,
        actors: &[ActorConfig],
        channels: &[ChannelConfig],
        props: &[PropConfig],
    ) -> Result<Self, HarnessError> {
        let mut h = Harness {
            chain: ChainState::new(),
            actors: BTreeMap::new(),
            names: BTreeMap::new(),
            channels: BTreeMap::new(),
            props: BTreeMap::new(),
            oracle: ProofOracle::default(),
            inboxes: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            drops: Vec::new(),
            silenced: BTreeMap::new(),
            tainted: BTreeSet::new(),
            log: Vec::new(),
            routes: BTreeMap::new(),
            public_preimages: BTreeMap::new(),
            market_lines: Vec::new(),
            max_deadline: 0,
        };
        for cfg in actors {
            if h.actors.contains_key(&cfg.name) {
                return Err(HarnessError::Invalid(format!(
                    "duplicate actor {}",
                    cfg.name
                )));
            }
            let (key, addr) = keygen(cfg.name.as_bytes());
            h.names.insert(addr, cfg.name.clone());
            if !cfg.faucet.is_zero() {
                h.chain.faucet(addr, cfg.faucet)?;
            }
            h.actors.insert(
                cfg.name.clone(),
                Actor {
                    name: cfg.name.clone(),
                    key,
                    addr,
                    policy: cfg.policy,
                    faucet: cfg.faucet,
                    channels: BTreeMap::new(),
                    next_seq: 1,
                    last_seq: BTreeMap::new(),
                    proofs: BTreeSet::new(),
                    received: BTreeSet::new(),
                    revealed: BTreeMap::new(),
                    preimages: BTreeMap::new(),
                    queued: VecDeque::new(),
                    stalled_since: BTreeMap::new(),
                    timeout_requested: Vec::new(),
                    payment_seen: BTreeMap::new(),
                    fail_requested: BTreeSet::new(),
                    cheated: false,
                    submitted: BTreeSet::new(),
                },
            );
            h.inboxes.insert(cfg.name.clone(), VecDeque::new());
            if matches!(
                cfg.policy.kind,
                PolicyKind::Cheater { .. } | PolicyKind::Withholder
            ) {
                h.tainted.insert(cfg.name.clone());
            }
        }
        for cfg in channels {
            for party in [&cfg.a, &cfg.b] {
                if !h.actors.contains_key(party) {
                    return Err(HarnessError::UnknownActor(party.clone()));
                }
            }
            if cfg.a == cfg.b {
                return Err(HarnessError::Invalid(format!(
                    "channel {} joins {} to itself",
                    cfg.id, cfg.a
                )));
            }
            RelativeDelay::new(cfg.csv_delay)
                .map_err(|e| HarnessError::Invalid(format!("channel {}: {e}", cfg.id)))?;
            if h.channels.insert(cfg.id.clone(), cfg.clone()).is_some() {
                return Err(HarnessError::Invalid(format!(
                    "duplicate channel {}",
                    cfg.id
                )));
            }
        }
        for cfg in props {
            for actor in cfg.available.keys() {
                if !h.actors.contains_key(actor) {
                    return Err(HarnessError::UnknownActor(actor.clone()));
                }
            }
            h.oracle.insert(&cfg.label, cfg.provable);
            h.props.insert(cfg.label.clone(), cfg.clone());
        }
        Ok(h)
    }

    pub fn chain(&self) -> &ChainState {
        &self.chain
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn oracle(&self) -> &ProofOracle {
        &self.oracle
    }

    pub fn market_lines(&self) -> &[String] {
        &self.market_lines
    }

    pub fn actor_names(&self) -> impl Iterator<Item = &String> {
        self.actors.keys()
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = &String> {
        self.channels.keys()
    }

    pub fn channel_config(&self, id: &str) -> Option<&ChannelConfig> {
        self.channels.get(id)
    }

    pub fn address(&self, actor: &str) -> Result<Address, HarnessError> {
        self.names
            .iter()
            .find(|(_, n)| *n == actor)
            .map(|(a, _)| *a)
            .ok_or_else(|| HarnessError::UnknownActor(actor.to_string()))
    }

    pub fn name_of(&self, addr: &Address) -> String {
        self.names
            .get(addr)
            .cloned()
            .unwrap_or_else(|| addr.short())
    }

    pub fn prop_id(&self, label: &str) -> Result<PropositionId, HarnessError> {
        self.props
            .contains_key(label)
            .then(|| PropositionId::from_label(label))
            .ok_or_else(|| HarnessError::UnknownProp(label.to_string()))
    }

    pub fn prop_label(&self, prop: &PropositionId) -> String {
        self.oracle
            .label(prop)
            .map(str::to_string)
            .unwrap_or_else(|| prop.short())
    }

    pub fn holdings(&self, actor: &str) -> Result<Amount, HarnessError> {
        Ok(self.chain.holdings(&self.address(actor)?))
    }

    pub fn channel_state(&self, actor: &str, channel: &str) -> Option<&ChannelState> {
        self.actors.get(actor)?.channels.get(channel)
    }

    pub fn policy(&self, actor: &str) -> Option<Policy> {
        self.actors.get(actor).map(|a| a.policy)
    }

    pub fn faucet(&self, actor: &str) -> Option<Amount> {
        self.actors.get(actor).map(|a| a.faucet)
    }

    pub fn is_tainted(&self, actor: &str) -> bool {
        self.tainted.contains(actor)
    }

    fn height(&self) -> u64 {
        self.chain.height()
    }

    fn emit(&mut self, level: LogLevel, actor: &str, event: &str, detail: Vec<(&str, String)>) {
        let entry = LogEntry {
            step: self.log.len() as u64 + 1,
            height: self.chain.height(),
            actor: actor.to_string(),
            event: event.to_string(),
            level,
            detail: detail
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        self.log.push(entry);
    }

    fn counterparty(&self, channel: &str, actor: &str) -> Option<String> {
        let cfg = self.channels.get(channel)?;
        if cfg.a == actor {
            Some(cfg.b.clone())
        } else if cfg.b == actor {
            Some(cfg.a.clone())
        } else {
            None
        }
    }

    fn is_silenced(&self, actor: &str) -> bool {
        self.silenced
            .get(actor)
            .is_some_and(|until| self.chain.height() < *until)
    }

    fn take_actor(&mut self, name: &str) -> Result<Actor, HarnessError> {
        self.actors
            .remove(name)
            .ok_or_else(|| HarnessError::UnknownActor(name.to_string()))
    }

    fn send(&mut self, actor: &mut Actor, channel: &str, msg: Message) {
        let Some(to) = self.counterparty(channel, &actor.name) else {
            return;
        };
        let seq = actor.next_seq;
        actor.next_seq += 1;
        self.emit(
            LogLevel::Debug,
            &actor.name,
            "send",
            vec![
                ("to", to.clone()),
                ("channel", channel.to_string()),
                ("msg", msg.kind().to_string()),
                ("seq", seq.to_string()),
            ],
        );
        let env = Envelope {
            seq,
            from: actor.name.clone(),
            to: to.clone(),
            channel: channel.to_string(),
            msg,
        };
        self.inboxes.entry(to).or_default().push_back(env);
    }

    fn describe_outputs(&self, tx: &Transaction) -> String {
        let parts: Vec<String> = tx
            .outputs
            .iter()
            .map(|o| {
                let script = o
                    .script
                    .describe(&|a| self.name_of(a), &|p| self.prop_label(p));
                format!("{} {}", o.amount, script)
            })
            .collect();
        format!("[{}]", parts.join(" | "))
    }

    /// Delivers the next message, chosen by the seeded RNG among actors with
    /// non-empty inboxes. Returns the log entries this produced.
    pub fn step(&mut self) -> Vec<LogEntry> {
        let before = self.log.len();
        let ready: Vec<String> = self
            .inboxes
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(n, _)| n.clone())
            .collect();
        if ready.is_empty() {
            return Vec::new();
        }
        let pick = ready[self.rng.gen_range(0..ready.len())].clone();
        let env = self
            .inboxes
            .get_mut(&pick)
            .and_then(VecDeque::pop_front)
            .expect("non-empty inbox");
        self.deliver(env);
        self.log[before..].to_vec()
    }

    pub fn is_quiet(&self) -> bool {
        self.inboxes.values().all(VecDeque::is_empty)
    }

    /// Delivers messages until every inbox is empty.
    pub fn run_until_quiet(&mut self) {
        let mut steps = 0;
        while !self.is_quiet() {
            self.step();
            steps += 1;
            if steps >= QUIET_STEP_LIMIT {
                self.emit(LogLevel::Warn, "harness", "quiet-limit", vec![]);
                for q in self.inboxes.values_mut() {
                    q.clear();
                }
                break;
            }
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let detail = |extra: Vec<(&'static str, String)>| {
            let mut d = vec![
                ("from", env.from.clone()),
                ("channel", env.channel.clone()),
                ("msg", env.msg.kind().to_string()),
            ];
            d.extend(extra);
            d
        };
        if let Some(rule) = self.drops.iter_mut().find(|r| {
            r.remaining > 0
                && r.kind == env.msg.kind()
                && r.from.as_ref().is_none_or(|f| *f == env.from)
        }) {
            rule.remaining -= 1;
            self.emit(
                LogLevel::Warn,
                &env.to,
                "drop",
                detail(vec![("reason", "fault".into())]),
            );
            return;
        }
        if self.is_silenced(&env.to) {
            self.emit(
                LogLevel::Warn,
                &env.to,
                "drop",
                detail(vec![("reason", "offline".into())]),
            );
            return;
        }
        if self.counterparty(&env.channel, &env.to).as_deref() != Some(env.from.as_str()) {
            self.emit(
                LogLevel::Warn,
                &env.to,
                "reject",
                detail(vec![("reason", "not-counterparty".into())]),
            );
            return;
        }
        let Ok(mut actor) = self.take_actor(&env.to) else {
            return;
        };
        let last = actor.last_seq.get(&env.from).copied().unwrap_or(0);
        if env.seq <= last {
            self.actors.insert(actor.name.clone(), actor);
            self.emit(
                LogLevel::Warn,
                &env.to,
                "reject",
                detail(vec![("reason", "sequence".into())]),
            );
            return;
        }
        actor.last_seq.insert(env.from.clone(), env.seq);
        self.emit(
            LogLevel::Debug,
            &env.to,
            "recv",
            detail(vec![("seq", env.seq.to_string())]),
        );
        if let Err(e) = self.handle(&mut actor, &env) {
            self.emit(
                LogLevel::Warn,
                &env.to,
                "error",
                detail(vec![("error", e.to_string())]),
            );
        }
        self.actors.insert(actor.name.clone(), actor);
    }

    fn state_mut<'a>(
        actor: &'a mut Actor,
        channel: &str,
    ) -> Result<&'a mut ChannelState, HarnessError> {
        let name = actor.name.clone();
        actor
            .channels
            .get_mut(channel)
            .ok_or(HarnessError::NotOpen(channel.to_string(), name))
    }

    fn handle(&mut self, actor: &mut Actor, env: &Envelope) -> Result<(), HarnessError> {
        let ch = env.channel.as_str();
        let err = ch_err(ch);
        if let Some((change, hash)) = env.msg.as_proposal() {
            return self.handle_proposal(actor, ch, change, hash);
        }
        if let Some(hash) = env.msg.as_ack() {
            return Self::state_mut(actor, ch)?
                .receive_accept(hash)
                .map_err(err);
        }
        match &env.msg {
            Message::OpenReq { offer } => {
                if actor.channels.contains_key(ch) {
                    return Err(HarnessError::Invalid(format!(
                        "channel {ch} already exists"
                    )));
                }
                let expected = self.params_for(ch)?;
                if offer.params != expected {
                    return Err(HarnessError::Invalid(
                        "open parameters do not match the channel".into(),
                    ));
                }
                let inputs = select_inputs(&self.chain, &actor.addr, offer.params.contrib_b)
                    .map_err(&err)?;
                let (mut state, accept) =
                    ChannelState::respond(offer, actor.key.clone(), inputs, &mut self.rng)
                        .map_err(&err)?;
                let (revision, sig) = state.sign_counterparty_commitment().map_err(&err)?;
                actor.channels.insert(ch.to_string(), state);
                self.send(
                    actor,
                    ch,
                    Message::OpenAck {
                        accept: accept.clone(),
                    },
                );
                self.send(actor, ch, Message::CommitSig { revision, sig });
            }
            Message::OpenAck { accept } => {
                Self::state_mut(actor, ch)?
                    .receive_open_accept(accept)
                    .map_err(err)?;
            }
            Message::CommitSig { revision, sig } => {
                let state = Self::state_mut(actor, ch)?;
                state
                    .receive_commitment_sig(*revision, *sig)
                    .map_err(&err)?;
                let own = state
                    .build_commitment(state.side(), *revision)
                    .map_err(&err)?;
                let mut replies = Vec::new();
                if state.has_pending_update() {
                    if !state.has_signed_counterparty(*revision) {
                        let (r, s) = state.sign_counterparty_commitment().map_err(&err)?;
                        replies.push(Message::CommitSig {
                            revision: r,
                            sig: s,
                        });
                    }
                    let (m, secret) = state.revoke_previous().map_err(&err)?;
                    replies.push(Message::RevokeAck {
                        revision: m,
                        secret,
                    });
                } else if *revision == 1 && !state.has_signed_counterparty(1) {
                    let (r, s) = state.sign_counterparty_commitment().map_err(&err)?;
                    replies.push(Message::CommitSig {
                        revision: r,
                        sig: s,
                    });
                    let witnesses = state.sign_funding().map_err(&err)?;
                    replies.push(Message::FundingSigs { witnesses });
                }
                let outputs = self.describe_outputs(&own.tx);
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "commitment",
                    vec![
                        ("channel", ch.to_string()),
                        ("revision", revision.to_string()),
                        ("outputs", outputs),
                    ],
                );
                for msg in replies {
                    self.send(actor, ch, msg);
                }
            }
            Message::FundingSigs { witnesses } => {
                let state = Self::state_mut(actor, ch)?;
                let mut all = witnesses.clone();
                all.extend(state.sign_funding().map_err(&err)?);
                let tx = state.assemble_funding(&all).map_err(&err)?;
                let txid = self.chain.submit_tx(tx)?;
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "funding-submitted",
                    vec![("channel", ch.to_string()), ("txid", txid.short())],
                );
            }
            Message::RevokeAck { revision, secret } => {
                Self::state_mut(actor, ch)?
                    .receive_revocation(*revision, *secret)
                    .map_err(&err)?;
                self.try_complete(actor, ch)?;
            }
            Message::Reject { reason } => {
                let state = Self::state_mut(actor, ch)?;
                let mine = state
                    .pending_change()
                    .is_some_and(|(_, p)| p == state.side());
                if mine && !state.has_signed_counterparty(state.revision() + 1) {
                    state.cancel_pending().map_err(&err)?;
                }
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "rejected",
                    vec![("channel", ch.to_string()), ("reason", reason.clone())],
                );
            }
            Message::ProofReveal { blob } => {
                let label = self.prop_label(&blob.prop);
                if !verify_proof(blob, &self.oracle) {
                    self.emit(
                        LogLevel::Warn,
                        &actor.name,
                        "invalid-proof",
                        vec![("channel", ch.to_string()), ("prop", label)],
                    );
                    return Ok(());
                }
                actor.proofs.insert(blob.prop);
                actor.received.insert((ch.to_string(), blob.prop));
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "proof-received",
                    vec![("channel", ch.to_string()), ("prop", label.clone())],
                );
                if actor.policy.kind == PolicyKind::PublicRevealer {
                    self.register(actor, blob.prop, "public");
                }
                self.policy_channel(actor, ch);
            }
            Message::CloseReq {
                balance_a,
                balance_b,
            } => {
                let state = Self::state_mut(actor, ch)?;
                let terms = state.terms();
                let result = if (terms.balance_a, terms.balance_b) != (*balance_a, *balance_b) {
                    Err(ChannelError::BalanceMismatch)
                } else {
                    state.sign_close()
                };
                match result {
                    Ok(sig) => self.send(actor, ch, Message::CloseSig { sig }),
                    Err(e) => self.send(
                        actor,
                        ch,
                        Message::Reject {
                            reason: e.to_string(),
                        },
                    ),
                }
            }
            Message::CloseSig { sig } => {
                let tx = Self::state_mut(actor, ch)?
                    .complete_close(*sig)
                    .map_err(&err)?;
                let txid = self.chain.submit_tx(tx)?;
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "close-submitted",
                    vec![
                        ("channel", ch.to_string()),
                        ("mode", "cooperative".into()),
                        ("txid", txid.short()),
                    ],
                );
            }
            _ => unreachable!("proposals and acks handled above"),
        }
        Ok(())
    }

    fn handle_proposal(
        &mut self,
        actor: &mut Actor,
        ch: &str,
        change: Change,
        hash: HashLock,
    ) -> Result<(), HarnessError> {
        let err = ch_err(ch);
        let state = Self::state_mut(actor, ch)?;
        if state.has_pending_update() {
            let own = state
                .pending_change()
                .map(|(c, p)| (c.clone(), p == state.side()));
            match own {
                Some((_, true)) if state.side() == Side::A => {
                    self.emit(
                        LogLevel::Info,
                        &actor.name,
                        "ignore-concurrent",
                        vec![("channel", ch.to_string())],
                    );
                    return Ok(());
                }
                Some((mine, true)) if !state.has_signed_counterparty(state.revision() + 1) => {
                    state.cancel_pending().map_err(&err)?;
                    let base = (state.terms().balance_a, state.terms().balance_b);
                    actor.queued.push_front(Queued {
                        base: Some(base),
                        ..Queued::new(ch, mine)
                    });
                    self.emit(
                        LogLevel::Info,
                        &actor.name,
                        "yield",
                        vec![("channel", ch.to_string())],
                    );
                }
                _ => {
                    return Err(HarnessError::Channel {
                        channel: ch.to_string(),
                        error: ChannelError::HandshakeInProgress,
                    })
                }
            }
        }
        if let Err(reason) = self.acceptable(actor, ch, &change) {
            self.emit(
                LogLevel::Info,
                &actor.name,
                "refuse",
                vec![
                    ("channel", ch.to_string()),
                    ("change", change.kind().into()),
                    ("reason", reason.clone()),
                ],
            );
            self.send(actor, ch, Message::Reject { reason });
            return Ok(());
        }
        let height = self.height();
        let state = Self::state_mut(actor, ch)?;
        let my_hash = match state.accept(change.clone(), hash, height, &mut self.rng) {
            Ok(h) => h,
            Err(e) => {
                self.send(
                    actor,
                    ch,
                    Message::Reject {
                        reason: e.to_string(),
                    },
                );
                return Ok(());
            }
        };
        let (revision, sig) = state.sign_counterparty_commitment().map_err(&err)?;
        if let Change::FulfillPayment { lock, preimage } = &change {
            actor.preimages.insert(*lock, *preimage);
        }
        self.send(actor, ch, Message::ack(&change, my_hash));
        self.send(actor, ch, Message::CommitSig { revision, sig });
        Ok(())
    }

    /// Policy check on a counterparty proposal.
    fn acceptable(&self, actor: &Actor, ch: &str, change: &Change) -> Result<(), String> {
        let state = actor.channels.get(ch).ok_or("no channel")?;
        let me = actor.addr;
        let side = state.side();
        let height = self.height();
        match change {
            Change::SetBalances {
                balance_a,
                balance_b,
            } => {
                let new = if side == Side::A {
                    *balance_a
                } else {
                    *balance_b
                };
                if new < state.terms().balance(side) {
                    return Err("balance would decrease".into());
                }
            }
            Change::AddBet(_) => {}
            Change::SettleBet { bet, winner } => {
                if *winner == me {
                    return Ok(());
                }
                if *winner == bet.backer {
                    let convinced = match actor.policy.kind {
                        PolicyKind::Withholder => {
                            actor.received.contains(&(ch.to_string(), bet.prop))
                                || self.chain.is_proven(&bet.prop)
                        }
                        _ => self.knows_proof(actor, &bet.prop),
                    };
                    if !convinced {
                        return Err("no proof seen".into());
                    }
                } else {
                    if height < bet.deadline.0 {
                        return Err("deadline not reached".into());
                    }
                    if self.knows_proof(actor, &bet.prop) {
                        return Err("proof held".into());
                    }
                }
            }
            Change::AddPayment(p) => {
                if p.payee != me {
                    return Err("not the payee".into());
                }
            }
            Change::FulfillPayment { .. } => {}
            Change::FailPayment { lock } => {
                let payment = state
                    .terms()
                    .payments
                    .iter()
                    .find(|p| p.lock == *lock)
                    .ok_or("unknown payment")?;
                if payment.payee == me {
                    if actor.preimages.contains_key(lock)
                        || self.public_preimages.contains_key(lock)
                    {
                        return Err("preimage known".into());
                    }
                    if self.downstream_unresolved(actor, ch, lock) {
                        return Err("downstream unresolved".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn downstream_unresolved(&self, actor: &Actor, ch: &str, lock: &HashLock) -> bool {
        let Some(plan) = self.routes.get(lock) else {
            return false;
        };
        let Some(i) = plan.channels.iter().position(|c| c == ch) else {
            return false;
        };
        let Some(next) = plan.channels.get(i + 1) else {
            return false;
        };
        actor.channels.get(next).is_some_and(|s| {
            s.terms().payments.iter().any(|p| p.lock == *lock)
                || s.pending_terms()
                    .is_some_and(|t| t.payments.iter().any(|p| p.lock == *lock))
                || actor.queued.iter().any(|q| q.channel == *next)
        })
    }

    fn knows_proof(&self, actor: &Actor, prop: &PropositionId) -> bool {
        actor.proofs.contains(prop) || self.chain.is_proven(prop)
    }

    fn try_complete(&mut self, actor: &mut Actor, ch: &str) -> Result<(), HarnessError> {
        let err = ch_err(ch);
        let state = Self::state_mut(actor, ch)?;
        let Some((change, proposer)) = state.pending_change().map(|(c, p)| (c.clone(), p)) else {
            return Ok(());
        };
        let previous = state.terms().clone();
        if !state.complete_update().map_err(&err)? {
            return Ok(());
        }
        let terms = state.terms().clone();
        let revision = state.revision();
        let by_me = proposer == state.side();
        self.emit(
            LogLevel::Info,
            &actor.name,
            "revision",
            vec![
                ("channel", ch.to_string()),
                ("revision", revision.to_string()),
                ("change", change.kind().into()),
                ("balance_a", terms.balance_a.to_string()),
                ("balance_b", terms.balance_b.to_string()),
                ("bets", terms.bets.len().to_string()),
                ("payments", terms.payments.len().to_string()),
            ],
        );
        let me = actor.addr;
        match &change {
            Change::AddBet(bet) if by_me => {
                let line = probability_line(&self.prop_label(&bet.prop), bet);
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "bet-added",
                    vec![("channel", ch.to_string()), ("line", line.clone())],
                );
                self.market_lines.push(line);
                self.max_deadline = self.max_deadline.max(bet.deadline.0);
            }
            Change::AddPayment(p) if p.payee == me => {
                if let Some(plan) = self.routes.get(&p.lock).cloned() {
                    let i = plan.channels.iter().position(|c| c == ch).unwrap_or(0);
                    if i + 1 == plan.channels.len() {
                        if let Some(preimage) = actor.preimages.get(&p.lock) {
                            actor.queued.push_back(Queued::new(
                                ch,
                                Change::FulfillPayment {
                                    lock: p.lock,
                                    preimage: *preimage,
                                },
                            ));
                        }
                    } else {
                        let next = &plan.channels[i + 1];
                        let payee = self.address(&plan.path[i + 2])?;
                        actor.queued.push_back(Queued::new(
                            next,
                            Change::AddPayment(crate::channel::ConditionalPayment {
                                lock: p.lock,
                                amount: plan.amounts[i + 1],
                                payer: me,
                                payee,
                                delay: plan.delays[i + 1],
                            }),
                        ));
                    }
                }
            }
            Change::FulfillPayment { lock, preimage } => {
                let payer = previous
                    .payments
                    .iter()
                    .find(|p| p.lock == *lock)
                    .map(|p| p.payer);
                if payer == Some(me) {
                    actor.preimages.insert(*lock, *preimage);
                    self.queue_upstream(
                        actor,
                        ch,
                        Change::FulfillPayment {
                            lock: *lock,
                            preimage: *preimage,
                        },
                    );
                }
            }
            Change::FailPayment { lock } => {
                let payer = previous
                    .payments
                    .iter()
                    .find(|p| p.lock == *lock)
                    .map(|p| p.payer);
                if payer == Some(me) {
                    self.queue_upstream(actor, ch, Change::FailPayment { lock: *lock });
                }
            }
            _ => {}
        }
        self.drain_queue(actor);
        Ok(())
    }

    fn queue_upstream(&mut self, actor: &mut Actor, ch: &str, change: Change) {
        let lock = match &change {
            Change::FulfillPayment { lock, .. } | Change::FailPayment { lock } => *lock,
            _ => return,
        };
        let Some(plan) = self.routes.get(&lock) else {
            return;
        };
        let Some(i) = plan.channels.iter().position(|c| c == ch) else {
            return;
        };
        if i > 0 {
            actor
                .queued
                .push_back(Queued::new(&plan.channels[i - 1], change));
        }
    }

    /// Proposes queued changes on channels that are idle.
    fn drain_queue(&mut self, actor: &mut Actor) {
        let mut i = 0;
        while i < actor.queued.len() {
            let ch = &actor.queued[i].channel;
            let status = actor.channels.get(ch).map(|s| s.status());
            if status.is_none_or(|s| s.is_closed() || s == ChannelStatus::ClosingCooperative) {
                let q = actor.queued.remove(i).expect("index in range");
                self.emit(
                    LogLevel::Info,
                    &actor.name,
                    "queue-dropped",
                    vec![
                        ("channel", q.channel),
                        ("change", q.change.kind().to_string()),
                    ],
                );
                continue;
            }
            let idle = actor
                .channels
                .get(ch)
                .is_some_and(|s| s.status() == ChannelStatus::Open && !s.has_pending_update());
            if idle {
                let q = actor.queued.remove(i).expect("index in range");
                let ch = q.channel.clone();
                let kind = q.change.kind();
                let state = &actor.channels[&ch];
                let height = self.height();
                let change = q
                    .rebase(state.terms())
                    .filter(|c| state.terms().apply(c, state.params(), height).is_ok());
                let Some(change) = change else {
                    self.emit(
                        LogLevel::Info,
                        &actor.name,
                        "queue-dropped",
                        vec![("channel", ch), ("change", kind.to_string())],
                    );
                    continue;
                };
                if let Err(e) = self.propose_now(actor, &ch, change) {
                    self.emit(
                        LogLevel::Warn,
                        &actor.name,
                        "error",
                        vec![("channel", ch), ("error", e.to_string())],
                    );
                }
            } else {
                i += 1;
            }
        }
    }

    fn propose_now(
        &mut self,
        actor: &mut Actor,
        ch: &str,
        change: Change,
    ) -> Result<(), HarnessError> {
        let height = self.height();
        let state = Self::state_mut(actor, ch)?;
        let hash = state
            .propose(change.clone(), height, &mut self.rng)
            .map_err(ch_err(ch))?;
        self.emit(
            LogLevel::Info,
            &actor.name,
            "propose",
            vec![
                ("channel", ch.to_string()),
                ("change", change.kind().into()),
            ],
        );
        self.send(actor, ch, Message::proposal(change, hash));
        Ok(())
    }

    fn register(&mut self, actor: &Actor, prop: PropositionId, why: &str) {
        if self.chain.is_proven(&prop) || self.oracle.proof(&prop).is_none() {
            return;
        }
        let queued = self.chain.has_pending()
            && self.log.iter().rev().take(64).any(|e| {
                e.event == "register-proof"
                    && e.height == self.chain.height()
                    && e.detail
                        .iter()
                        .any(|(k, v)| k == "prop" && *v == self.prop_label(&prop))
            });
        if queued {
            return;
        }
        self.chain.register_proof(prop);
        let label = self.prop_label(&prop);
        self.emit(
            LogLevel::Info,
            &actor.name,
            "register-proof",
            vec![("prop", label), ("reason", why.to_string())],
        );
    }

    fn params_for(&self, ch: &str) -> Result<ChannelParams, HarnessError> {
        let cfg = self
            .channels
            .get(ch)
            .ok_or_else(|| HarnessError::UnknownChannel(ch.to_string()))?;
        let delay =
            RelativeDelay::new(cfg.csv_delay).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        ChannelParams::new(
            self.address(&cfg.a)?,
            self.address(&cfg.b)?,
            cfg.contrib_a,
            cfg.contrib_b,
            delay,
        )
        .map_err(ch_err(ch))
    }

    // ---- per-block passes ----

    /// Advances one block and lets every awake actor react.
    pub fn advance_block(&mut self) {
        let confirmed = self.chain.advance_blocks(1).expect("one block");
        self.emit(
            LogLevel::Info,
            "chain",
            "block",
            vec![("txs", confirmed.len().to_string())],
        );
        for txid in &confirmed {
            let tx = self
                .chain
                .confirmed_tx(txid)
                .expect("just confirmed")
                .tx
                .clone();
            for input in &tx.inputs {
                if let Witness::SecretBranch { secret, .. } = &input.witness {
                    self.public_preimages.insert(secret.hash(), *secret);
                }
            }
            self.emit(
                LogLevel::Debug,
                "chain",
                "confirm",
                vec![("txid", txid.short())],
            );
        }
        let woken: Vec<String> = self
            .silenced
            .iter()
            .filter(|(_, u)| self.chain.height() >= **u)
            .map(|(n, _)| n.clone())
            .collect();
        for name in woken {
            self.silenced.remove(&name);
            self.emit(LogLevel::Warn, &name, "wake", vec![]);
        }
        let names: Vec<String> = self.actors.keys().cloned().collect();
        for a in self.actors.values_mut() {
            a.submitted.clear();
        }
        for name in &names {
            if !self.is_silenced(name) {
                self.watch_pass(name);
            }
        }
        self.policy_all();
        for name in &names {
            if !self.is_silenced(name) {
                self.enforce_pass(name);
            }
        }
        self.run_until_quiet();
    }

    pub fn advance(&mut self, blocks: u64) {
        for _ in 0..blocks {
            self.advance_block();
        }
    }

    fn watch_pass(&mut self, name: &str) {
        let Ok(mut actor) = self.take_actor(name) else {
            return;
        };
        let ids: Vec<String> = actor.channels.keys().cloned().collect();
        for ch in ids {
            let state = actor.channels.get_mut(&ch).expect("listed");
            if state.confirm_funding(&self.chain) {
                self.emit(
                    LogLevel::Info,
                    name,
                    "channel-open",
                    vec![("channel", ch.clone())],
                );
                continue;
            }
            let Some(funding) = state.funding_outpoint() else {
                continue;
            };
            if state.closed_by().is_some() {
                continue;
            }
            let Some(txid) = self.chain.spender_of(&funding) else {
                continue;
            };
            let tx = self
                .chain
                .confirmed_tx(&txid)
                .expect("spender confirmed")
                .tx
                .clone();
            let seen = state.observe_close(&tx);
            let status = state.status();
            let detail = vec![
                ("channel", ch.clone()),
                ("status", status.label()),
                ("txid", txid.short()),
            ];
            self.emit(LogLevel::Info, name, "channel-closed", detail);
            if let (Some(_), ChannelStatus::Breached { .. }) = (seen, status) {
                let state = actor.channels.get(&ch).expect("listed");
                match state.punish(&tx) {
                    Ok(Some(penalty)) => {
                        let inputs: Vec<OutPoint> =
                            penalty.inputs.iter().map(|i| i.outpoint).collect();
                        let total = penalty.output_total().unwrap_or_default();
                        match self.chain.submit_tx(penalty) {
                            Ok(_) => {
                                actor.submitted.extend(inputs);
                                self.emit(
                                    LogLevel::Warn,
                                    name,
                                    "punish",
                                    vec![("channel", ch.clone()), ("amount", total.to_string())],
                                );
                            }
                            Err(e) => self.emit(
                                LogLevel::Warn,
                                name,
                                "punish-failed",
                                vec![("channel", ch.clone()), ("error", e.to_string())],
                            ),
                        }
                    }
                    Ok(None) => {}
                    Err(e) => self.emit(
                        LogLevel::Warn,
                        name,
                        "punish-failed",
                        vec![("channel", ch.clone()), ("error", e.to_string())],
                    ),
                }
            }
        }
        self.actors.insert(name.to_string(), actor);
    }

    /// Runs every awake actor's policy, then lets the network settle.
    pub fn policy_all(&mut self) {
        let names: Vec<String> = self.actors.keys().cloned().collect();
        for name in &names {
            if self.is_silenced(name) {
                continue;
            }
            let Ok(mut actor) = self.take_actor(name) else {
                continue;
            };
            self.policy_actor(&mut actor);
            self.actors.insert(name.clone(), actor);
        }
        self.run_until_quiet();
    }

    fn policy_actor(&mut self, actor: &mut Actor) {
        let height = self.height();
        let found: Vec<(String, PropositionId)> = self
            .props
            .values()
            .filter(|p| p.provable && p.available.get(&actor.name).is_some_and(|h| *h <= height))
            .map(|p| (p.label.clone(), PropositionId::from_label(&p.label)))
            .filter(|(_, id)| !actor.proofs.contains(id))
            .collect();
        for (label, id) in found {
            actor.proofs.insert(id);
            self.emit(
                LogLevel::Info,
                &actor.name,
                "proof-obtained",
                vec![("prop", label)],
            );
        }
        if let PolicyKind::Cheater { revision, at } = actor.policy.kind {
            if !actor.cheated && height >= at {
                actor.cheated = true;
                let target = actor
                    .channels
                    .iter()
                    .find(|(_, s)| s.holds_counterparty_sig(revision) && !s.status().is_closed())
                    .map(|(c, _)| c.clone());
                if let Some(ch) = target {
                    if let Err(e) = self.publish_from(actor, &ch, revision) {
                        self.emit(
                            LogLevel::Warn,
                            &actor.name,
                            "error",
                            vec![("channel", ch), ("error", e.to_string())],
                        );
                    }
                }
            }
        }
        self.drain_queue(actor);
        let ids: Vec<String> = actor.channels.keys().cloned().collect();
        for ch in ids {
            self.policy_channel(actor, &ch);
        }
    }

    /// Off-chain reactions on one channel: reveal proofs, concede or claim
    /// bets, resolve payments. At most one proposal per call.
    fn policy_channel(&mut self, actor: &mut Actor, ch: &str) {
        let Some(state) = actor.channels.get(ch) else {
            return;
        };
        if state.status() != ChannelStatus::Open {
            return;
        }
        let height = self.height();
        let me = actor.addr;
        let terms = state.terms().clone();
        let idle = !state.has_pending_update();
        for bet in &terms.bets {
            let prop = bet.prop;
            if bet.backer == me && self.knows_proof(actor, &prop) {
                let reveals = actor.policy.kind != PolicyKind::Withholder || actor.policy.reveal;
                if reveals && !actor.revealed.contains_key(&(ch.to_string(), prop)) {
                    actor.revealed.insert((ch.to_string(), prop), height);
                    if let Some(blob) = self.oracle.proof(&prop) {
                        self.emit(
                            LogLevel::Info,
                            &actor.name,
                            "reveal",
                            vec![
                                ("channel", ch.to_string()),
                                ("prop", self.prop_label(&prop)),
                            ],
                        );
                        self.send(actor, ch, Message::ProofReveal { blob });
                    }
                }
            }
            if bet.doubter != me || !idle {
                continue;
            }
            let proven_in_time = self
                .chain
                .proven_height(&prop)
                .is_some_and(|h| h <= bet.deadline.0);
            let concede = match actor.policy.kind {
                PolicyKind::Withholder => {
                    actor.received.contains(&(ch.to_string(), prop)) || proven_in_time
                }
                _ => {
                    self.knows_proof(actor, &prop)
                        && (height < bet.deadline.0
                            || actor.policy.window_concede
                            || proven_in_time)
                }
            };
            let change = if concede {
                Some(Change::SettleBet {
                    bet: bet.clone(),
                    winner: bet.backer,
                })
            } else if height >= bet.deadline.0
                && !actor
                    .timeout_requested
                    .contains(&(ch.to_string(), bet.clone()))
            {
                actor.timeout_requested.push((ch.to_string(), bet.clone()));
                Some(Change::SettleBet {
                    bet: bet.clone(),
                    winner: me,
                })
            } else {
                None
            };
            if let Some(change) = change {
                if let Err(e) = self.propose_now(actor, ch, change) {
                    self.emit(
                        LogLevel::Warn,
                        &actor.name,
                        "error",
                        vec![("channel", ch.to_string()), ("error", e.to_string())],
                    );
                }
                return;
            }
        }
        if !idle {
            return;
        }
        for p in &terms.payments {
            let key = (ch.to_string(), p.lock);
            let preimage = actor
                .preimages
                .get(&p.lock)
                .or_else(|| self.public_preimages.get(&p.lock))
                .copied();
            let change = if let (true, Some(preimage)) = (p.payee == me, preimage) {
                Some(Change::FulfillPayment {
                    lock: p.lock,
                    preimage,
                })
            } else if p.payer == me {
                let seen = *actor.payment_seen.entry(key.clone()).or_insert(height);
                (height >= seen + 2 * actor.policy.patience && actor.fail_requested.insert(key))
                    .then_some(Change::FailPayment { lock: p.lock })
            } else {
                None
            };
            if let Some(change) = change {
                if let Err(e) = self.propose_now(actor, ch, change) {
                    self.emit(
                        LogLevel::Warn,
                        &actor.name,
                        "error",
                        vec![("channel", ch.to_string()), ("error", e.to_string())],
                    );
                }
                return;
            }
        }
    }

    /// On-chain reactions: unilateral closes when the counterparty stalls or
    /// a deadline requires it, proof registration, and output claims.
    fn enforce_pass(&mut self, name: &str) {
        let Ok(mut actor) = self.take_actor(name) else {
            return;
        };
        let height = self.height();
        let me = actor.addr;
        let patience = actor.policy.patience;
        let ids: Vec<String> = actor.channels.keys().cloned().collect();
        for ch in ids {
            let state = actor.channels.get(&ch).expect("listed");
            let status = state.status();
            if matches!(
                status,
                ChannelStatus::Open | ChannelStatus::ClosingCooperative
            ) {
                let stuck =
                    state.has_pending_update() || status == ChannelStatus::ClosingCooperative;
                let since = if stuck {
                    Some(*actor.stalled_since.entry(ch.clone()).or_insert(height))
                } else {
                    actor.stalled_since.remove(&ch);
                    None
                };
                let mut reason = since.filter(|s| height >= s + patience).map(|_| "stalled");
                let mut bets: Vec<Bet> = state.terms().bets.clone();
                if let Some(t) = state.pending_terms() {
                    bets.extend(t.bets.iter().cloned());
                }
                for bet in &bets {
                    let t = bet.deadline.0;
                    if bet.backer == me && self.knows_proof(&actor, &bet.prop) {
                        let revealed_at = actor.revealed.get(&(ch.clone(), bet.prop)).copied();
                        if height + 1 + actor.policy.margin >= t {
                            reason = reason.or(Some("bet-deadline"));
                        } else if revealed_at.is_some_and(|r| height >= r + patience) {
                            reason = reason.or(Some("unresponsive"));
                        }
                    }
                    if bet.doubter == me && height >= t + patience {
                        reason = reason.or(Some("bet-timeout"));
                    }
                    if height >= t + 2 * patience {
                        reason = reason.or(Some("bet-expired"));
                    }
                }
                for p in &state.terms().payments {
                    let seen = actor.payment_seen.get(&(ch.clone(), p.lock)).copied();
                    if p.payer == me && seen.is_some_and(|s| height >= s + 4 * patience) {
                        reason = reason.or(Some("payment-timeout"));
                    }
                }
                if let Some(reason) = reason {
                    let state = actor.channels.get_mut(&ch).expect("listed");
                    match state.close_unilateral() {
                        Ok(tx) => {
                            let revision = match state.status() {
                                ChannelStatus::ClosedUnilateral { revision, .. } => revision,
                                _ => 0,
                            };
                            match self.chain.submit_tx(tx) {
                                Ok(txid) => self.emit(
                                    LogLevel::Info,
                                    name,
                                    "close-submitted",
                                    vec![
                                        ("channel", ch.clone()),
                                        ("mode", "unilateral".into()),
                                        ("revision", revision.to_string()),
                                        ("reason", reason.into()),
                                        ("txid", txid.short()),
                                    ],
                                ),
                                Err(e) => self.emit(
                                    LogLevel::Warn,
                                    name,
                                    "close-rejected",
                                    vec![("channel", ch.clone()), ("error", e.to_string())],
                                ),
                            }
                        }
                        Err(e) => self.emit(
                            LogLevel::Warn,
                            name,
                            "error",
                            vec![("channel", ch.clone()), ("error", e.to_string())],
                        ),
                    }
                }
            }
            let state = actor.channels.get(&ch).expect("listed");
            if !state.status().is_closed() {
                continue;
            }
            let mut bets: Vec<Bet> = state.terms().bets.clone();
            if let Some(t) = state.pending_terms() {
                bets.extend(t.bets.iter().cloned());
            }
            for bet in bets {
                if bet.backer == me && self.knows_proof(&actor, &bet.prop) {
                    self.register(&actor, bet.prop, "claim");
                }
            }
            let mut preimages = actor.preimages.clone();
            preimages.extend(self.public_preimages.iter().map(|(k, v)| (*k, *v)));
            let claims = actor
                .channels
                .get(&ch)
                .expect("listed")
                .claimable(&self.chain, &preimages);
            for claim in claims {
                let op = claim.inputs[0].outpoint;
                if actor.submitted.contains(&op) {
                    continue;
                }
                let amount = claim.output_total().unwrap_or_default();
                let branch = witness_branch(&claim.inputs[0].witness);
                match self.chain.submit_tx(claim) {
                    Ok(_) => {
                        actor.submitted.insert(op);
                        self.emit(
                            LogLevel::Info,
                            name,
                            "claim",
                            vec![
                                ("channel", ch.clone()),
                                ("outpoint", op.to_string()),
                                ("amount", amount.to_string()),
                                ("branch", branch.into()),
                            ],
                        );
                    }
                    Err(e) => self.emit(
                        LogLevel::Warn,
                        name,
                        "claim-rejected",
                        vec![
                            ("channel", ch.clone()),
                            ("outpoint", op.to_string()),
                            ("branch", branch.into()),
                            ("error", e.to_string()),
                        ],
                    ),
                }
            }
        }
        self.actors.insert(name.to_string(), actor);
    }

    fn publish_from(
        &mut self,
        actor: &mut Actor,
        ch: &str,
        revision: u64,
    ) -> Result<(), HarnessError> {
        let state = Self::state_mut(actor, ch)?;
        let tx = state.publish_revision(revision).map_err(ch_err(ch))?;
        let revoked = revision < state.revision();
        let txid = self.chain.submit_tx(tx)?;
        self.emit(
            LogLevel::Warn,
            &actor.name,
            "publish-revision",
            vec![
                ("channel", ch.to_string()),
                ("revision", revision.to_string()),
                ("revoked", revoked.to_string()),
                ("txid", txid.short()),
            ],
        );
        Ok(())
    }

    // ---- directives ----

    /// Opens `ch`: runs the open handshake, then mines the funding block.
    pub fn open(&mut self, ch: &str) -> Result<(), HarnessError> {
        let params = self.params_for(ch)?;
        let cfg = self.channels[ch].clone();
        let mut actor = self.take_actor(&cfg.a)?;
        let result = (|| {
            if actor.channels.contains_key(ch) {
                return Err(HarnessError::Invalid(format!(
                    "channel {ch} already opened"
                )));
            }
            let inputs =
                select_inputs(&self.chain, &actor.addr, params.contrib_a).map_err(ch_err(ch))?;
            let (state, offer) =
                ChannelState::initiate(params, actor.key.clone(), inputs, &mut self.rng)
                    .map_err(ch_err(ch))?;
            actor.channels.insert(ch.to_string(), state);
            self.emit(
                LogLevel::Info,
                &actor.name,
                "open",
                vec![("channel", ch.to_string()), ("with", cfg.b.clone())],
            );
            self.send(&mut actor, ch, Message::OpenReq { offer });
            Ok(())
        })();
        self.actors.insert(cfg.a.clone(), actor);
        result?;
        self.run_until_quiet();
        self.advance_block();
        Ok(())
    }

    /// Has `actor` propose `change` on `ch`, then lets the network settle.
    pub fn propose(&mut self, ch: &str, actor: &str, change: Change) -> Result<(), HarnessError> {
        let mut a = self.take_actor(actor)?;
        let result = self.propose_now(&mut a, ch, change);
        self.actors.insert(actor.to_string(), a);
        result?;
        self.policy_all();
        Ok(())
    }

    pub fn pay(&mut self, ch: &str, from: &str, amount: Amount) -> Result<(), HarnessError> {
        let state = self
            .channel_state(from, ch)
            .ok_or_else(|| HarnessError::NotOpen(ch.to_string(), from.to_string()))?;
        let side = state.side();
        let terms = state.terms();
        let mine = terms
            .balance(side)
            .checked_sub(amount)
            .map_err(|_| ch_err(ch)(ChannelError::InsufficientBalance))?;
        let theirs = terms
            .balance(side.other())
            .checked_add(amount)
            .map_err(|e| ch_err(ch)(e.into()))?;
        let (balance_a, balance_b) = if side == Side::A {
            (mine, theirs)
        } else {
            (theirs, mine)
        };
        self.propose(
            ch,
            from,
            Change::SetBalances {
                balance_a,
                balance_b,
            },
        )
    }

    pub fn bet(&mut self, ch: &str, bet: Bet) -> Result<(), HarnessError> {
        let doubter = self.name_of(&bet.doubter);
        self.propose(ch, &doubter, Change::AddBet(bet))
    }

    /// Cooperative settlement of the active bet on `prop`, proposed by the loser.
    pub fn settle(&mut self, ch: &str, prop: &str, winner: &str) -> Result<(), HarnessError> {
        let prop = self.prop_id(prop)?;
        let winner_addr = self.address(winner)?;
        let loser = self
            .counterparty(ch, winner)
            .ok_or_else(|| HarnessError::NotOpen(ch.to_string(), winner.to_string()))?;
        let state = self
            .channel_state(&loser, ch)
            .ok_or_else(|| HarnessError::NotOpen(ch.to_string(), loser.clone()))?;
        let bet = state
            .terms()
            .bets
            .iter()
            .find(|b| b.prop == prop)
            .cloned()
            .ok_or_else(|| ch_err(ch)(ChannelError::NoSuchBet))?;
        self.propose(
            ch,
            &loser,
            Change::SettleBet {
                bet,
                winner: winner_addr,
            },
        )
    }

    pub fn close_cooperative(&mut self, ch: &str, by: &str) -> Result<(), HarnessError> {
        let mut actor = self.take_actor(by)?;
        let result = (|| {
            let state = Self::state_mut(&mut actor, ch)?;
            state.sign_close().map_err(ch_err(ch))?;
            let terms = state.terms();
            let msg = Message::CloseReq {
                balance_a: terms.balance_a,
                balance_b: terms.balance_b,
            };
            self.emit(
                LogLevel::Info,
                by,
                "close-request",
                vec![("channel", ch.to_string())],
            );
            self.send(&mut actor, ch, msg);
            Ok::<(), HarnessError>(())
        })();
        self.actors.insert(by.to_string(), actor);
        result?;
        self.run_until_quiet();
        Ok(())
    }

    pub fn close_unilateral(&mut self, ch: &str, by: &str) -> Result<(), HarnessError> {
        let mut actor = self.take_actor(by)?;
        let result = (|| {
            let state = Self::state_mut(&mut actor, ch)?;
            let tx = state.close_unilateral().map_err(ch_err(ch))?;
            let revision = match state.status() {
                ChannelStatus::ClosedUnilateral { revision, .. } => revision,
                _ => 0,
            };
            let txid = self.chain.submit_tx(tx)?;
            self.emit(
                LogLevel::Info,
                by,
                "close-submitted",
                vec![
                    ("channel", ch.to_string()),
                    ("mode", "unilateral".into()),
                    ("revision", revision.to_string()),
                    ("reason", "directive".into()),
                    ("txid", txid.short()),
                ],
            );
            let bets = state.terms().bets.clone();
            Ok(bets)
        })();
        let outcome = result.map(|bets| {
            for bet in bets {
                if bet.backer == actor.addr && self.knows_proof(&actor, &bet.prop) {
                    self.register(&actor, bet.prop, "claim");
                }
            }
        });
        self.actors.insert(by.to_string(), actor);
        outcome
    }

    /// Gives `actor` a proof of `prop` now.
    pub fn reveal(&mut self, actor: &str, prop: &str) -> Result<(), HarnessError> {
        let id = self.prop_id(prop)?;
        if !self.oracle.is_provable(&id) {
            return Err(HarnessError::Invalid(format!(
                "proposition {prop} has no proof"
            )));
        }
        let a = self
            .actors
            .get_mut(actor)
            .ok_or_else(|| HarnessError::UnknownActor(actor.to_string()))?;
        a.proofs.insert(id);
        self.emit(
            LogLevel::Info,
            actor,
            "proof-obtained",
            vec![("prop", prop.to_string())],
        );
        self.policy_all();
        Ok(())
    }

    /// Registers a proof of `prop` on chain on behalf of `actor`.
    pub fn publish_proof(&mut self, actor: &str, prop: &str) -> Result<(), HarnessError> {
        let id = self.prop_id(prop)?;
        let a = self
            .actors
            .get(actor)
            .cloned()
            .ok_or_else(|| HarnessError::UnknownActor(actor.to_string()))?;
        if !self.knows_proof(&a, &id) {
            return Err(HarnessError::Invalid(format!(
                "{actor} holds no proof of {prop}"
            )));
        }
        self.register(&a, id, "directive");
        Ok(())
    }

    pub fn fault_drop(
        &mut self,
        kind: &str,
        from: Option<&str>,
        count: u64,
    ) -> Result<(), HarnessError> {
        if let Some(f) = from {
            self.address(f)?;
        }
        self.drops.push(DropRule {
            kind: kind.to_string(),
            from: from.map(str::to_string),
            remaining: count,
        });
        self.emit(
            LogLevel::Warn,
            "harness",
            "fault",
            vec![
                ("kind", "drop".into()),
                ("msg", kind.into()),
                ("from", from.unwrap_or("*").into()),
                ("count", count.to_string()),
            ],
        );
        Ok(())
    }

    /// Takes `actor` offline for `blocks` blocks, or until woken if `None`.
    pub fn silence(&mut self, actor: &str, blocks: Option<u64>) -> Result<(), HarnessError> {
        self.address(actor)?;
        let until = blocks.map_or(u64::MAX, |b| self.height() + b);
        self.silenced.insert(actor.to_string(), until);
        self.tainted.insert(actor.to_string());
        let shown = blocks.map_or("*".to_string(), |b| b.to_string());
        self.emit(
            LogLevel::Warn,
            "harness",
            "fault",
            vec![
                ("kind", "silence".into()),
                ("actor", actor.into()),
                ("blocks", shown),
            ],
        );
        Ok(())
    }

    pub fn wake(&mut self, actor: &str) -> Result<(), HarnessError> {
        self.address(actor)?;
        if self.silenced.remove(actor).is_some() {
            self.emit(LogLevel::Warn, actor, "wake", vec![]);
        }
        self.policy_all();
        Ok(())
    }

    /// Makes `actor` publish its commitment at `revision`, revoked or not.
    pub fn publish_revoked(
        &mut self,
        actor: &str,
        ch: &str,
        revision: u64,
    ) -> Result<(), HarnessError> {
        self.tainted.insert(actor.to_string());
        let mut a = self.take_actor(actor)?;
        let result = self.publish_from(&mut a, ch, revision);
        self.actors.insert(actor.to_string(), a);
        result
    }

    pub fn withhold(&mut self, actor: &str) -> Result<(), HarnessError> {
        let a = self
            .actors
            .get_mut(actor)
            .ok_or_else(|| HarnessError::UnknownActor(actor.to_string()))?;
        a.policy.kind = PolicyKind::Withholder;
        self.tainted.insert(actor.to_string());
        self.emit(
            LogLevel::Warn,
            "harness",
            "fault",
            vec![("kind", "withhold".into()), ("actor", actor.into())],
        );
        Ok(())
    }

    /// Starts a routed payment. The receiver learns the preimage; the sender
    /// proposes the first hop and the rest follows from the actors' policies.
    pub fn start_route(&mut self, plan: RoutePlan) -> Result<HashLock, HarnessError> {
        let preimage = Secret::random(&mut self.rng);
        let lock = preimage.hash();
        let receiver = plan
            .path
            .last()
            .cloned()
            .ok_or_else(|| HarnessError::Invalid("empty route".into()))?;
        self.actors
            .get_mut(&receiver)
            .ok_or_else(|| HarnessError::UnknownActor(receiver.clone()))?
            .preimages
            .insert(lock, preimage);
        let first = crate::channel::ConditionalPayment {
            lock,
            amount: plan.amounts[0],
            payer: self.address(&plan.path[0])?,
            payee: self.address(&plan.path[1])?,
            delay: plan.delays[0],
        };
        let hops = plan.channels.join(">");
        self.emit(
            LogLevel::Info,
            &plan.path[0],
            "route",
            vec![("hops", hops), ("lock", lock.short())],
        );
        let sender = plan.path[0].clone();
        let ch = plan.channels[0].clone();
        self.routes.insert(lock, plan);
        self.propose(&ch, &sender, Change::AddPayment(first))?;
        Ok(lock)
    }

    /// Records a probability report line.
    pub fn note_market(&mut self, actor: &str, event: &str, line: String) {
        self.emit(LogLevel::Info, actor, event, vec![("line", line.clone())]);
        self.market_lines.push(line);
    }

    pub fn note_deadline(&mut self, deadline: u64) {
        self.max_deadline = self.max_deadline.max(deadline);
    }

    pub fn note(&mut self, level: LogLevel, actor: &str, event: &str, detail: Vec<(&str, String)>) {
        self.emit(level, actor, event, detail);
    }

    fn settled(&self) -> bool {
        let channels_closed = self.actors.values().all(|a| {
            a.channels.values().all(|s| {
                let funded = s
                    .funding_outpoint()
                    .is_some_and(|op| self.chain.confirmed_tx(&op.txid).is_some());
                !funded || s.closed_by().is_some()
            })
        });
        channels_closed
            && self.chain.locked_total().is_zero()
            && !self.chain.has_pending()
            && self.is_quiet()
    }

    /// Lifts every fault, closes idle channels cooperatively and advances
    /// blocks until all value is back in plain outputs or a bound is hit.
    pub fn finish(&mut self) {
        self.emit(LogLevel::Info, "harness", "finish", vec![]);
        let silenced: Vec<String> = self.silenced.keys().cloned().collect();
        self.silenced.clear();
        for name in silenced {
            self.emit(LogLevel::Warn, &name, "wake", vec![]);
        }
        self.drops.clear();
        let max_csv = self
            .channels
            .values()
            .map(|c| c.csv_delay)
            .max()
            .unwrap_or(1);
        let max_patience = self
            .actors
            .values()
            .map(|a| a.policy.patience)
            .max()
            .unwrap_or(1);
        let hops = self
            .routes
            .values()
            .map(|r| r.channels.len() as u64)
            .max()
            .unwrap_or(1);
        let limit = self.height().max(self.max_deadline)
            + (hops + 4) * max_csv * 2
            + 40 * max_patience
            + 200;
        loop {
            self.close_idle();
            if self.settled() {
                break;
            }
            if self.height() >= limit {
                self.emit(LogLevel::Warn, "harness", "finish-limit", vec![]);
                break;
            }
            self.advance_block();
        }
        self.emit(LogLevel::Info, "harness", "finished", vec![]);
    }

    fn close_idle(&mut self) {
        let ids: Vec<String> = self.channels.keys().cloned().collect();
        for ch in ids {
            let cfg = self.channels[&ch].clone();
            let idle = |name: &str| {
                self.channel_state(name, &ch).is_some_and(|s| {
                    s.status() == ChannelStatus::Open
                        && !s.has_pending_update()
                        && s.terms().is_quiet()
                })
            };
            if idle(&cfg.a)
                && idle(&cfg.b)
                && [&cfg.a, &cfg.b]
                    .iter()
                    .all(|n| self.actors[*n].queued.iter().all(|q| q.channel != ch))
            {
                if let Err(e) = self.close_cooperative(&ch, &cfg.a) {
                    self.emit(
                        LogLevel::Warn,
                        &cfg.a,
                        "error",
                        vec![("channel", ch.clone()), ("error", e.to_string())],
                    );
                }
            }
        }
    }

    // ---- checks ----

    /// Holdings equal minted value, nothing burned, nothing left locked.
    pub fn check_conservation(&self) -> Result<(), String> {
        let held: Amount = self
            .actors
            .values()
            .map(|a| self.chain.holdings(&a.addr))
            .sum();
        let minted: Amount = self.actors.values().map(|a| a.faucet).sum();
        if !self.chain.burned().is_zero() {
            return Err(format!("{} burned", self.chain.burned()));
        }
        if !self.chain.locked_total().is_zero() {
            return Err(format!("{} still locked", self.chain.locked_total()));
        }
        if held != minted {
            return Err(format!("holdings {held} != faucet total {minted}"));
        }
        Ok(())
    }

    /// Every revision of every channel state adds up to capacity and the
    /// revocation bookkeeping is consistent.
    pub fn check_capacity(&self) -> Result<(), String> {
        for a in self.actors.values() {
            for (ch, s) in &a.channels {
                s.check_invariants()
                    .map_err(|e| format!("{}/{ch}: {e}", a.name))?;
            }
        }
        Ok(())
    }

    /// Lower bound on what an honest actor must hold at the end: its faucet
    /// minus funded contributions, plus for each channel the least it could
    /// be held to, over every revision either side may still publish,
    /// counting bets by how the proposition actually turned out.
    pub fn honest_bound(&self, actor: &str) -> Option<Amount> {
        let a = self.actors.get(actor)?;
        let mut bound = a.faucet.atoms() as i128;
        for s in a.channels.values() {
            let funded = s
                .funding_outpoint()
                .is_some_and(|op| self.chain.confirmed_tx(&op.txid).is_some());
            if !funded {
                continue;
            }
            bound -= s.params().contribution(s.side()).atoms() as i128;
            let worth = |r: &u64| -> i128 {
                let Some(terms) = s.terms_at(*r) else {
                    return 0;
                };
                let mut v = terms.balance(s.side()).atoms() as i128;
                for bet in &terms.bets {
                    let proven = self.chain.proven_height(&bet.prop);
                    let won = (bet.backer == a.addr && proven.is_some_and(|h| h < bet.deadline.0))
                        || (bet.doubter == a.addr && proven.is_none());
                    if won {
                        v += bet.pot().atoms() as i128;
                    }
                }
                v
            };
            bound += s
                .publishable_revisions()
                .iter()
                .map(worth)
                .min()
                .unwrap_or(0);
        }
        Some(Amount::from_atoms(bound.max(0) as u64))
    }

    /// Honest, untainted actors end with at least their bound.
    pub fn check_honest_safety(&self) -> Result<(), String> {
        for (name, a) in &self.actors {
            if !a.policy.kind.is_honest() || self.tainted.contains(name) {
                continue;
            }
            let bound = self.honest_bound(name).expect("actor exists");
            let held = self.chain.holdings(&a.addr);
            if held < bound {
                return Err(format!("{name} holds {held}, bound {bound}"));
            }
        }
        Ok(())
    }

    /// Named invariant checks for the report.
    pub fn checks(&self) -> Vec<(&'static str, Result<(), String>)> {
        vec![
            ("conservation", self.check_conservation()),
            ("ledger-replay", self.chain.replay_check()),
            ("capacity", self.check_capacity()),
            ("honest-safety", self.check_honest_safety()),
        ]
    }
}

fn witness_branch(w: &Witness) -> &'static str {
    match w {
        Witness::SecretBranch { .. } => "secret",
        Witness::DelayBranch(inner) => match **inner {
            Witness::ProvenBranch(_) => "delay-proven",
            Witness::TimeoutBranch(_) => "delay-timeout",
            _ => "delay",
        },
        Witness::ProvenBranch(_) => "proven",
        Witness::TimeoutBranch(_) => "timeout",
        _ => "other",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::AbsoluteHeight;

    fn bars(n: u64) -> Amount {
        Amount::from_bars(n)
    }

    fn pair(seed: u64, props: &[PropConfig]) -> Harness {
        let actor = |name: &str| ActorConfig {
            name: name.into(),
            faucet: bars(100),
            policy: Policy::default(),
        };
        let ch = ChannelConfig {
            id: "ab".into(),
            a: "alice".into(),
            b: "bob".into(),
            contrib_a: bars(100),
            contrib_b: bars(100),
            csv_delay: 6,
        };
        let mut h = Harness::new(seed, &[actor("alice"), actor("bob")], &[ch], props).unwrap();
        h.open("ab").unwrap();
        h
    }

    fn bet(h: &Harness, deadline: u64) -> Bet {
        Bet {
            prop: PropositionId::from_label("P"),
            doubter_stake: bars(50),
            backer_stake: bars(10),
            deadline: AbsoluteHeight(deadline),
            backer: h.address("bob").unwrap(),
            doubter: h.address("alice").unwrap(),
        }
    }

    fn provable() -> Vec<PropConfig> {
        vec![PropConfig {
            label: "P".into(),
            provable: true,
            available: BTreeMap::new(),
        }]
    }

    fn all_pass(h: &Harness) {
        for (name, r) in h.checks() {
            assert!(r.is_ok(), "{name}: {r:?}");
        }
    }

    #[test]
    fn yielded_payment_replays_as_transfer() {
        let terms = |a, b| crate::channel::Terms {
            balance_a: bars(a),
            balance_b: bars(b),
            bets: Vec::new(),
            payments: Vec::new(),
        };
        let pay = Queued {
            base: Some((bars(0), bars(11))),
            ..Queued::new(
                "ab",
                Change::SetBalances {
                    balance_a: bars(3),
                    balance_b: bars(8),
                },
            )
        };
        assert_eq!(
            pay.clone().rebase(&terms(0, 47)),
            Some(Change::SetBalances {
                balance_a: bars(3),
                balance_b: bars(44),
            })
        );
        assert_eq!(pay.rebase(&terms(45, 2)), None);
    }

    #[test]
    fn open_reaches_both_sides() {
        let h = pair(1, &[]);
        for who in ["alice", "bob"] {
            assert_eq!(
                h.channel_state(who, "ab").unwrap().status(),
                ChannelStatus::Open
            );
        }
        assert_eq!(h.chain().locked_total(), bars(200));
    }

    #[test]
    fn dropped_revocation_leaves_two_publishable_revisions() {
        let mut h = pair(2, &[]);
        h.fault_drop("RevokeAck", Some("alice"), 1).unwrap();
        h.pay("ab", "alice", bars(10)).unwrap();
        let alice = h.channel_state("alice", "ab").unwrap();
        let bob = h.channel_state("bob", "ab").unwrap();
        assert_eq!(alice.revision(), 2);
        assert!(bob.has_pending_update());
        assert_eq!(bob.publishable_revisions(), BTreeSet::from([1, 2]));

        h.advance(4);
        let closed = h.log().iter().any(|e| {
            e.actor == "bob"
                && e.event == "close-submitted"
                && e.detail.contains(&("reason".into(), "stalled".into()))
        });
        assert!(closed);
        h.finish();
        all_pass(&h);
        assert_eq!(h.holdings("alice").unwrap(), bars(90));
        assert_eq!(h.holdings("bob").unwrap(), bars(110));
    }

    #[test]
    fn silent_doubter_pushes_backer_on_chain() {
        let mut h = pair(3, &provable());
        let b = bet(&h, 100);
        h.bet("ab", b).unwrap();
        h.silence("alice", None).unwrap();
        h.reveal("bob", "P").unwrap();
        h.advance(3);
        let reason = h
            .log()
            .iter()
            .find(|e| e.actor == "bob" && e.event == "close-submitted")
            .and_then(|e| {
                e.detail
                    .iter()
                    .find(|(k, _)| k == "reason")
                    .map(|(_, v)| v.clone())
            });
        assert_eq!(reason.as_deref(), Some("unresponsive"));
        h.finish();
        all_pass(&h);
        assert_eq!(h.holdings("bob").unwrap(), bars(150));
        assert_eq!(h.holdings("alice").unwrap(), bars(50));
    }

    #[test]
    fn stale_sequence_numbers_are_rejected() {
        let mut h = pair(4, &[]);
        let replay = Envelope {
            seq: 1,
            from: "alice".into(),
            to: "bob".into(),
            channel: "ab".into(),
            msg: Message::Reject {
                reason: "replayed".into(),
            },
        };
        h.inboxes.get_mut("bob").unwrap().push_back(replay);
        h.run_until_quiet();
        let last = h.log().last().unwrap();
        assert_eq!(last.event, "reject");
        assert!(last.detail.contains(&("reason".into(), "sequence".into())));
    }

    #[test]
    fn messages_from_outsiders_are_rejected() {
        let mut h = pair(5, &[]);
        let forged = Envelope {
            seq: 99,
            from: "mallory".into(),
            to: "bob".into(),
            channel: "ab".into(),
            msg: Message::Reject { reason: "x".into() },
        };
        h.inboxes.get_mut("bob").unwrap().push_back(forged);
        h.run_until_quiet();
        assert!(h
            .log()
            .last()
            .unwrap()
            .detail
            .contains(&("reason".into(), "not-counterparty".into())));
    }

    #[test]
    fn same_seed_same_log() {
        let run = |seed| {
            let mut h = pair(seed, &provable());
            let b = bet(&h, 20);
            h.bet("ab", b).unwrap();
            h.pay("ab", "bob", bars(5)).unwrap();
            h.advance(25);
            h.finish();
            h.log().iter().map(|e| e.to_string()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }
}
