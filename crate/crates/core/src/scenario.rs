//! Scenario files: parsing, validation, the directive runner and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::amount::{format_delta, Amount};
use crate::channel::{Bet, DEFAULT_CSV_DELAY};
use crate::market::{self, BetOffer, Hop, Route};
use crate::peer::{
    ActorConfig, ChannelConfig, Harness, HarnessError, LogEntry, LogLevel, Policy, PolicyKind,
    PropConfig,
};
use crate::script::AbsoluteHeight;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),
    #[error("cannot read {path}: {error}")]
    Io { path: String, error: String },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseMode {
    Cooperative,
    Unilateral,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the next `count` messages of `kind`, optionally only from `from`.
    Drop {
        kind: String,
        from: Option<String>,
        count: u64,
    },
    /// Takes an actor offline, for `blocks` blocks or until woken.
    Silence {
        actor: String,
        blocks: Option<u64>,
    },
    Wake {
        actor: String,
    },
    /// The actor publishes its commitment at `revision`, revoked or not.
    PublishRevoked {
        actor: String,
        channel: String,
        revision: u64,
    },
    /// The actor switches to the withholding policy.
    Withhold {
        actor: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Directive {
    Open {
        channel: String,
    },
    Pay {
        channel: String,
        from: String,
        amount: Amount,
    },
    Bet {
        channel: String,
        doubter: String,
        backer: String,
        doubter_stake: Amount,
        backer_stake: Amount,
        prop: String,
        deadline: u64,
    },
    Reveal {
        actor: String,
        prop: String,
    },
    PublishProof {
        actor: String,
        prop: String,
    },
    Settle {
        channel: String,
        prop: String,
        winner: String,
    },
    Close {
        channel: String,
        mode: CloseMode,
        by: String,
    },
    Advance(u64),
    Fault(Fault),
    Route {
        path: Vec<String>,
        amount: Amount,
        fees: Vec<Amount>,
        step: u64,
    },
    Hedge {
        upstream: String,
        downstream: String,
        middle: String,
        prop: String,
        deadline: Option<u64>,
    },
    Offer {
        actor: String,
        prop: String,
        deadline: u64,
        doubter_stake: Amount,
    },
    Counter {
        actor: String,
        backer_stake: Amount,
    },
    TakeBest,
}

const MESSAGE_KINDS: &[&str] = &[
    "OpenReq",
    "OpenAck",
    "FundingSigs",
    "CommitSig",
    "RevokeAck",
    "UpdateReq",
    "UpdateAck",
    "BetPropose",
    "BetAccept",
    "SettleReq",
    "SettleAck",
    "Reject",
    "ProofReveal",
    "CloseReq",
    "CloseSig",
];

fn join_amounts(v: &[Amount]) -> String {
    v.iter()
        .map(Amount::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Open { channel } => write!(f, "open {channel}"),
            Directive::Pay { channel, from, amount } => write!(f, "pay {channel} {from} {amount}"),
            Directive::Bet { channel, doubter, backer, doubter_stake, backer_stake, prop, deadline } => write!(
                f,
                "bet {channel} doubter={doubter} backer={backer} stakes={doubter_stake}/{backer_stake} prop={prop} deadline={deadline}"
            ),
            Directive::Reveal { actor, prop } => write!(f, "reveal {actor} {prop}"),
            Directive::PublishProof { actor, prop } => write!(f, "publish-proof {actor} {prop}"),
            Directive::Settle { channel, prop, winner } => write!(f, "settle {channel} prop={prop} winner={winner}"),
            Directive::Close { channel, mode, by } => {
                let mode = match mode {
                    CloseMode::Cooperative => "cooperative",
                    CloseMode::Unilateral => "unilateral",
                };
                write!(f, "close {channel} mode={mode} by={by}")
            }
            Directive::Advance(k) => write!(f, "advance {k}"),
            Directive::Fault(fault) => match fault {
                Fault::Drop { kind, from, count } => {
                    write!(f, "fault drop {kind}")?;
                    if let Some(from) = from {
                        write!(f, " from={from}")?;
                    }
                    write!(f, " count={count}")
                }
                Fault::Silence { actor, blocks: Some(b) } => write!(f, "fault silence {actor} blocks={b}"),
                Fault::Silence { actor, blocks: None } => write!(f, "fault silence {actor}"),
                Fault::Wake { actor } => write!(f, "fault wake {actor}"),
                Fault::PublishRevoked { actor, channel, revision } => {
                    write!(f, "fault publish-revoked {actor} {channel} revision={revision}")
                }
                Fault::Withhold { actor } => write!(f, "fault withhold {actor}"),
            },
            Directive::Route { path, amount, fees, step } => {
                write!(f, "route {} amount={amount} fees={} step={step}", path.join(","), join_amounts(fees))
            }
            Directive::Hedge { upstream, downstream, middle, prop, deadline } => {
                write!(f, "hedge {upstream} {downstream} middle={middle} prop={prop}")?;
                if let Some(d) = deadline {
                    write!(f, " deadline={d}")?;
                }
                Ok(())
            }
            Directive::Offer { actor, prop, deadline, doubter_stake } => {
                write!(f, "offer {actor} prop={prop} deadline={deadline} doubter={doubter_stake}")
            }
            Directive::Counter { actor, backer_stake } => write!(f, "counter {actor} backer={backer_stake}"),
            Directive::TakeBest => write!(f, "take-best"),
        }
    }
}

struct Args<'a> {
    line: &'a str,
    positional: Vec<&'a str>,
    named: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn new(line: &'a str, tokens: &[&'a str]) -> Result<Self, ScenarioError> {
        let mut positional = Vec::new();
        let mut named = BTreeMap::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) => {
                    if named.insert(k, v).is_some() {
                        return Err(ScenarioError::Parse(format!(
                            "{line:?}: repeated argument {k}"
                        )));
                    }
                }
                None => positional.push(*t),
            }
        }
        Ok(Args {
            line,
            positional,
            named,
        })
    }

    fn err(&self, msg: &str) -> ScenarioError {
        ScenarioError::Parse(format!("{:?}: {msg}", self.line))
    }

    fn pos(&self, i: usize, what: &str) -> Result<String, ScenarioError> {
        self.positional
            .get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| self.err(&format!("missing {what}")))
    }

    fn key(&self, k: &str) -> Result<String, ScenarioError> {
        self.named
            .get(k)
            .map(|s| s.to_string())
            .ok_or_else(|| self.err(&format!("missing {k}=")))
    }

    fn opt(&self, k: &str) -> Option<String> {
        self.named.get(k).map(|s| s.to_string())
    }

    fn num(&self, s: &str) -> Result<u64, ScenarioError> {
        s.parse()
            .map_err(|_| self.err(&format!("bad number {s:?}")))
    }

    fn amount(&self, s: &str) -> Result<Amount, ScenarioError> {
        s.parse()
            .map_err(|_| self.err(&format!("bad amount {s:?}")))
    }

    fn expect(&self, positional: usize, keys: &[&str]) -> Result<(), ScenarioError> {
        if self.positional.len() != positional {
            return Err(self.err(&format!("expected {positional} positional arguments")));
        }
        if let Some(k) = self.named.keys().find(|k| !keys.contains(k)) {
            return Err(self.err(&format!("unexpected argument {k}=")));
        }
        Ok(())
    }
}

impl std::str::FromStr for Directive {
    type Err = ScenarioError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (&verb, rest) = tokens
            .split_first()
            .ok_or_else(|| ScenarioError::Parse("empty directive".into()))?;
        let a = Args::new(line, rest)?;
        let d = match verb {
            "open" => {
                a.expect(1, &[])?;
                Directive::Open {
                    channel: a.pos(0, "channel")?,
                }
            }
            "pay" => {
                a.expect(3, &[])?;
                Directive::Pay {
                    channel: a.pos(0, "channel")?,
                    from: a.pos(1, "payer")?,
                    amount: a.amount(&a.pos(2, "amount")?)?,
                }
            }
            "bet" => {
                a.expect(1, &["doubter", "backer", "stakes", "prop", "deadline"])?;
                let stakes = a.key("stakes")?;
                let (d, k) = stakes
                    .split_once('/')
                    .ok_or_else(|| a.err("stakes must be doubter/backer"))?;
                Directive::Bet {
                    channel: a.pos(0, "channel")?,
                    doubter: a.key("doubter")?,
                    backer: a.key("backer")?,
                    doubter_stake: a.amount(d)?,
                    backer_stake: a.amount(k)?,
                    prop: a.key("prop")?,
                    deadline: a.num(&a.key("deadline")?)?,
                }
            }
            "reveal" | "publish-proof" => {
                a.expect(2, &[])?;
                let (actor, prop) = (a.pos(0, "actor")?, a.pos(1, "proposition")?);
                if verb == "reveal" {
                    Directive::Reveal { actor, prop }
                } else {
                    Directive::PublishProof { actor, prop }
                }
            }
            "settle" => {
                a.expect(1, &["prop", "winner"])?;
                Directive::Settle {
                    channel: a.pos(0, "channel")?,
                    prop: a.key("prop")?,
                    winner: a.key("winner")?,
                }
            }
            "close" => {
                a.expect(1, &["mode", "by"])?;
                let mode = match a.key("mode")?.as_str() {
                    "cooperative" => CloseMode::Cooperative,
                    "unilateral" => CloseMode::Unilateral,
                    other => return Err(a.err(&format!("unknown close mode {other:?}"))),
                };
                Directive::Close {
                    channel: a.pos(0, "channel")?,
                    mode,
                    by: a.key("by")?,
                }
            }
            "advance" => {
                a.expect(1, &[])?;
                Directive::Advance(a.num(&a.pos(0, "block count")?)?)
            }
            "fault" => {
                let kind = a.pos(0, "fault kind")?;
                let fault = match kind.as_str() {
                    "drop" => {
                        a.expect(2, &["from", "count"])?;
                        let count = a.opt("count").map(|c| a.num(&c)).transpose()?.unwrap_or(1);
                        Fault::Drop {
                            kind: a.pos(1, "message kind")?,
                            from: a.opt("from"),
                            count,
                        }
                    }
                    "silence" => {
                        a.expect(2, &["blocks"])?;
                        let blocks = a.opt("blocks").map(|b| a.num(&b)).transpose()?;
                        Fault::Silence {
                            actor: a.pos(1, "actor")?,
                            blocks,
                        }
                    }
                    "wake" => {
                        a.expect(2, &[])?;
                        Fault::Wake {
                            actor: a.pos(1, "actor")?,
                        }
                    }
                    "publish-revoked" => {
                        a.expect(3, &["revision"])?;
                        Fault::PublishRevoked {
                            actor: a.pos(1, "actor")?,
                            channel: a.pos(2, "channel")?,
                            revision: a.num(&a.key("revision")?)?,
                        }
                    }
                    "withhold" => {
                        a.expect(2, &[])?;
                        Fault::Withhold {
                            actor: a.pos(1, "actor")?,
                        }
                    }
                    other => return Err(a.err(&format!("unknown fault {other:?}"))),
                };
                Directive::Fault(fault)
            }
            "route" => {
                a.expect(1, &["amount", "fees", "step"])?;
                let path: Vec<String> = a.pos(0, "path")?.split(',').map(str::to_string).collect();
                let fees = match a.opt("fees") {
                    Some(f) if !f.is_empty() => f
                        .split(',')
                        .map(|x| a.amount(x))
                        .collect::<Result<Vec<_>, _>>()?,
                    _ => Vec::new(),
                };
                let step = a.opt("step").map(|s| a.num(&s)).transpose()?.unwrap_or(4);
                Directive::Route {
                    path,
                    amount: a.amount(&a.key("amount")?)?,
                    fees,
                    step,
                }
            }
            "hedge" => {
                a.expect(2, &["middle", "prop", "deadline"])?;
                Directive::Hedge {
                    upstream: a.pos(0, "upstream channel")?,
                    downstream: a.pos(1, "downstream channel")?,
                    middle: a.key("middle")?,
                    prop: a.key("prop")?,
                    deadline: a.opt("deadline").map(|d| a.num(&d)).transpose()?,
                }
            }
            "offer" => {
                a.expect(1, &["prop", "deadline", "doubter"])?;
                Directive::Offer {
                    actor: a.pos(0, "actor")?,
                    prop: a.key("prop")?,
                    deadline: a.num(&a.key("deadline")?)?,
                    doubter_stake: a.amount(&a.key("doubter")?)?,
                }
            }
            "counter" => {
                a.expect(1, &["backer"])?;
                Directive::Counter {
                    actor: a.pos(0, "actor")?,
                    backer_stake: a.amount(&a.key("backer")?)?,
                }
            }
            "take-best" => {
                a.expect(0, &[])?;
                Directive::TakeBest
            }
            other => return Err(ScenarioError::Parse(format!("unknown directive {other:?}"))),
        };
        Ok(d)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AmountValue {
    Int(u64),
    Text(String),
}

impl AmountValue {
    fn parse(&self, what: &str) -> Result<Amount, ScenarioError> {
        match self {
            AmountValue::Int(n) => n
                .to_string()
                .parse()
                .map_err(|e| invalid(format!("{what}: {e}"))),
            AmountValue::Text(s) => s.parse().map_err(|e| invalid(format!("{what}: {e}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorEntry {
    name: String,
    faucet: AmountValue,
    #[serde(default)]
    policy: Option<String>,
    patience: Option<u64>,
    margin: Option<u64>,
    window_concede: Option<bool>,
    reveal: Option<bool>,
    revision: Option<u64>,
    at: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelEntry {
    id: String,
    a: String,
    b: String,
    contrib_a: AmountValue,
    contrib_b: AmountValue,
    csv_delay: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PropEntry {
    label: String,
    provable: bool,
    #[serde(default)]
    available: BTreeMap<String, u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    summary: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    script: Vec<String>,
    #[serde(default)]
    actor: Vec<ActorEntry>,
    #[serde(default)]
    channel: Vec<ChannelEntry>,
    #[serde(default)]
    prop: Vec<PropEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub summary: String,
    pub seed: u64,
    pub actors: Vec<ActorConfig>,
    pub channels: Vec<ChannelConfig>,
    pub props: Vec<PropConfig>,
    pub script: Vec<Directive>,
}

fn parse_policy(e: &ActorEntry) -> Result<Policy, ScenarioError> {
    let name = e.policy.as_deref().unwrap_or("honest");
    let kind = match name {
        "honest" => PolicyKind::Honest,
        "cheater" => PolicyKind::Cheater {
            revision: e
                .revision
                .ok_or_else(|| invalid(format!("actor {}: cheater needs revision", e.name)))?,
            at: e
                .at
                .ok_or_else(|| invalid(format!("actor {}: cheater needs at", e.name)))?,
        },
        "withholder" | "withholding-middleman" => PolicyKind::Withholder,
        "public-revealer" | "publicly-revealing-doubter" => PolicyKind::PublicRevealer,
        other => {
            return Err(invalid(format!(
                "actor {}: unknown policy {other:?}",
                e.name
            )))
        }
    };
    if kind.name() != "cheater" && (e.revision.is_some() || e.at.is_some()) {
        return Err(invalid(format!(
            "actor {}: revision/at only apply to cheaters",
            e.name
        )));
    }
    let d = Policy::default();
    let policy = Policy {
        kind,
        patience: e.patience.unwrap_or(d.patience),
        margin: e.margin.unwrap_or(d.margin),
        window_concede: e.window_concede.unwrap_or(d.window_concede),
        reveal: e.reveal.unwrap_or(d.reveal),
    };
    if policy.patience == 0 {
        return Err(invalid(format!(
            "actor {}: patience must be positive",
            e.name
        )));
    }
    Ok(policy)
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.message().to_string()))?;
        let mut actors = Vec::new();
        for e in &file.actor {
            actors.push(ActorConfig {
                name: e.name.clone(),
                faucet: e.faucet.parse(&e.name)?,
                policy: parse_policy(e)?,
            });
        }
        let mut channels = Vec::new();
        for c in &file.channel {
            channels.push(ChannelConfig {
                id: c.id.clone(),
                a: c.a.clone(),
                b: c.b.clone(),
                contrib_a: c.contrib_a.parse(&c.id)?,
                contrib_b: c.contrib_b.parse(&c.id)?,
                csv_delay: c.csv_delay.unwrap_or(DEFAULT_CSV_DELAY),
            });
        }
        let props = file
            .prop
            .iter()
            .map(|p| PropConfig {
                label: p.label.clone(),
                provable: p.provable,
                available: p.available.clone(),
            })
            .collect();
        let script = file
            .script
            .iter()
            .map(|l| l.parse())
            .collect::<Result<Vec<Directive>, _>>()?;
        let scenario = Scenario {
            name: file.name,
            summary: file.summary,
            seed: file.seed,
            actors,
            channels,
            props,
            script,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Checks that every reference resolves and channel directives come after
    /// the channel is opened.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut actors = BTreeSet::new();
        for a in &self.actors {
            if !actors.insert(a.name.as_str()) {
                return Err(invalid(format!("duplicate actor {}", a.name)));
            }
        }
        let mut channels = BTreeMap::new();
        for c in &self.channels {
            for p in [&c.a, &c.b] {
                if !actors.contains(p.as_str()) {
                    return Err(invalid(format!("channel {}: unknown actor {p}", c.id)));
                }
            }
            if c.a == c.b {
                return Err(invalid(format!("channel {}: both ends are {}", c.id, c.a)));
            }
            if c.csv_delay == 0 {
                return Err(invalid(format!(
                    "channel {}: csv_delay must be positive",
                    c.id
                )));
            }
            if c.contrib_a
                .checked_add(c.contrib_b)
                .map_or(true, Amount::is_zero)
            {
                return Err(invalid(format!("channel {}: no capacity", c.id)));
            }
            if channels.insert(c.id.as_str(), c).is_some() {
                return Err(invalid(format!("duplicate channel {}", c.id)));
            }
        }
        let mut props = BTreeSet::new();
        for p in &self.props {
            if !props.insert(p.label.as_str()) {
                return Err(invalid(format!("duplicate proposition {}", p.label)));
            }
            if let Some(a) = p.available.keys().find(|a| !actors.contains(a.as_str())) {
                return Err(invalid(format!(
                    "proposition {}: unknown actor {a}",
                    p.label
                )));
            }
        }
        let actor = |n: &str, d: &Directive| {
            if actors.contains(n) {
                Ok(())
            } else {
                Err(invalid(format!("{d}: unknown actor {n}")))
            }
        };
        let prop = |n: &str, d: &Directive| {
            if props.contains(n) {
                Ok(())
            } else {
                Err(invalid(format!("{d}: unknown proposition {n}")))
            }
        };
        let mut opened = BTreeSet::new();
        let mut offer_open = false;
        let mut counters = 0;
        let used = |ch: &str, d: &Directive, opened: &BTreeSet<String>| {
            if !channels.contains_key(ch) {
                Err(invalid(format!("{d}: unknown channel {ch}")))
            } else if !opened.contains(ch) {
                Err(invalid(format!("{d}: channel {ch} used before open")))
            } else {
                Ok(())
            }
        };
        let party = |ch: &str, n: &str, d: &Directive| {
            let c = channels[ch];
            if c.a == n || c.b == n {
                Ok(())
            } else {
                Err(invalid(format!("{d}: {n} is not a party to {ch}")))
            }
        };
        for d in &self.script {
            match d {
                Directive::Open { channel } => {
                    if !channels.contains_key(channel.as_str()) {
                        return Err(invalid(format!("{d}: unknown channel {channel}")));
                    }
                    if !opened.insert(channel.clone()) {
                        return Err(invalid(format!("{d}: channel opened twice")));
                    }
                }
                Directive::Pay {
                    channel,
                    from,
                    amount,
                } => {
                    used(channel, d, &opened)?;
                    party(channel, from, d)?;
                    if amount.is_zero() {
                        return Err(invalid(format!("{d}: zero payment")));
                    }
                }
                Directive::Bet {
                    channel,
                    doubter,
                    backer,
                    doubter_stake,
                    backer_stake,
                    prop: p,
                    deadline,
                } => {
                    used(channel, d, &opened)?;
                    party(channel, doubter, d)?;
                    party(channel, backer, d)?;
                    prop(p, d)?;
                    if doubter == backer {
                        return Err(invalid(format!("{d}: doubter and backer must differ")));
                    }
                    if doubter_stake
                        .checked_add(*backer_stake)
                        .map_or(true, Amount::is_zero)
                        || *deadline == 0
                    {
                        return Err(invalid(format!("{d}: empty pot or zero deadline")));
                    }
                }
                Directive::Reveal { actor: a, prop: p }
                | Directive::PublishProof { actor: a, prop: p } => {
                    actor(a, d)?;
                    prop(p, d)?;
                }
                Directive::Settle {
                    channel,
                    prop: p,
                    winner,
                } => {
                    used(channel, d, &opened)?;
                    party(channel, winner, d)?;
                    prop(p, d)?;
                }
                Directive::Close { channel, by, .. } => {
                    used(channel, d, &opened)?;
                    party(channel, by, d)?;
                }
                Directive::Advance(_) => {}
                Directive::Fault(f) => match f {
                    Fault::Drop { kind, from, count } => {
                        if !MESSAGE_KINDS.contains(&kind.as_str()) {
                            return Err(invalid(format!("{d}: unknown message kind {kind}")));
                        }
                        if let Some(f) = from {
                            actor(f, d)?;
                        }
                        if *count == 0 {
                            return Err(invalid(format!("{d}: count must be positive")));
                        }
                    }
                    Fault::Silence { actor: a, .. }
                    | Fault::Wake { actor: a }
                    | Fault::Withhold { actor: a } => actor(a, d)?,
                    Fault::PublishRevoked {
                        actor: a,
                        channel,
                        revision,
                    } => {
                        used(channel, d, &opened)?;
                        party(channel, a, d)?;
                        if *revision == 0 {
                            return Err(invalid(format!("{d}: revisions start at 1")));
                        }
                    }
                },
                Directive::Route {
                    path,
                    amount,
                    fees,
                    step,
                } => {
                    if path.len() < 2 {
                        return Err(invalid(format!("{d}: a route needs two actors")));
                    }
                    for a in path {
                        actor(a, d)?;
                    }
                    if fees.len() != path.len() - 2 {
                        return Err(invalid(format!("{d}: one fee per intermediary")));
                    }
                    if amount.is_zero() || *step == 0 {
                        return Err(invalid(format!("{d}: zero amount or step")));
                    }
                    for w in path.windows(2) {
                        let ch =
                            channel_between(&self.channels, &w[0], &w[1]).ok_or_else(|| {
                                invalid(format!("{d}: no channel between {} and {}", w[0], w[1]))
                            })?;
                        used(&ch, d, &opened)?;
                    }
                }
                Directive::Hedge {
                    upstream,
                    downstream,
                    middle,
                    prop: p,
                    ..
                } => {
                    used(upstream, d, &opened)?;
                    used(downstream, d, &opened)?;
                    party(upstream, middle, d)?;
                    party(downstream, middle, d)?;
                    prop(p, d)?;
                }
                Directive::Offer {
                    actor: a,
                    prop: p,
                    deadline,
                    doubter_stake,
                } => {
                    actor(a, d)?;
                    prop(p, d)?;
                    if *deadline == 0 || doubter_stake.is_zero() {
                        return Err(invalid(format!("{d}: zero deadline or stake")));
                    }
                    offer_open = true;
                    counters = 0;
                }
                Directive::Counter {
                    actor: a,
                    backer_stake,
                } => {
                    actor(a, d)?;
                    if !offer_open {
                        return Err(invalid(format!("{d}: no open offer")));
                    }
                    if backer_stake.is_zero() {
                        return Err(invalid(format!("{d}: zero stake")));
                    }
                    counters += 1;
                }
                Directive::TakeBest => {
                    if !offer_open || counters == 0 {
                        return Err(invalid(format!("{d}: no counteroffers")));
                    }
                    offer_open = false;
                }
            }
        }
        Ok(())
    }
}

fn channel_between(channels: &[ChannelConfig], x: &str, y: &str) -> Option<String> {
    channels
        .iter()
        .find(|c| (c.a == x && c.b == y) || (c.a == y && c.b == x))
        .map(|c| c.id.clone())
}

/// Outcome of a scenario run.
#[derive(Clone, Debug)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub height: u64,
    /// Final holdings and change from the faucet amount, per actor.
    pub holdings: Vec<(String, Amount, i128)>,
    /// Final status of each channel as each party sees it.
    pub channels: Vec<(String, Vec<(String, String)>)>,
    pub market: Vec<String>,
    pub checks: Vec<(String, Result<(), String>)>,
    pub directive_errors: Vec<String>,
    pub log: Vec<LogEntry>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, r)| r.is_ok())
    }

    pub fn holding(&self, actor: &str) -> Option<Amount> {
        self.holdings
            .iter()
            .find(|(n, _, _)| n == actor)
            .map(|(_, a, _)| *a)
    }

    pub fn delta(&self, actor: &str) -> Option<i128> {
        self.holdings
            .iter()
            .find(|(n, _, _)| n == actor)
            .map(|(_, _, d)| *d)
    }

    /// The event log at `level` and above, one entry per line.
    pub fn render_log(&self, level: LogLevel) -> String {
        self.log
            .iter()
            .filter(|e| e.level >= level)
            .map(|e| format!("{e}\n"))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario: {}\nseed: {}\nheight: {}\nholdings:\n",
            self.name, self.seed, self.height
        );
        for (name, amount, delta) in &self.holdings {
            out += &format!("  {name} {amount} ({})\n", format_delta(*delta));
        }
        out += "channels:\n";
        for (id, views) in &self.channels {
            let views: Vec<String> = views.iter().map(|(a, s)| format!("{a}={s}")).collect();
            out += &format!("  {id} {}\n", views.join(" "));
        }
        if !self.market.is_empty() {
            out += "market:\n";
            for line in &self.market {
                out += &format!("  {line}\n");
            }
        }
        out += "checks:\n";
        for (name, r) in &self.checks {
            match r {
                Ok(()) => out += &format!("  {name} pass\n"),
                Err(e) => out += &format!("  {name} FAIL {e}\n"),
            }
        }
        out += &format!("directive errors: {}\n", self.directive_errors.len());
        for e in &self.directive_errors {
            out += &format!("  {e}\n");
        }
        out += &format!("result: {}\n", if self.passed() { "pass" } else { "fail" });
        out
    }
}

struct OfferBook {
    doubter: String,
    prop: String,
    deadline: u64,
    stake: Amount,
    counters: Vec<(String, BetOffer)>,
}

/// Executes a scenario's directives against a harness.
pub struct Runner {
    harness: Harness,
    scenario: Scenario,
    seed: u64,
    book: Option<OfferBook>,
    errors: Vec<String>,
}

impl Runner {
    pub fn new(scenario: &Scenario, seed: Option<u64>) -> Result<Runner, ScenarioError> {
        scenario.validate()?;
        let seed = seed.unwrap_or(scenario.seed);
        let harness = Harness::new(seed, &scenario.actors, &scenario.channels, &scenario.props)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(Runner {
            harness,
            scenario: scenario.clone(),
            seed,
            book: None,
            errors: Vec::new(),
        })
    }

    pub fn harness(&self) -> &Harness {
        &self.harness
    }

    pub fn harness_mut(&mut self) -> &mut Harness {
        &mut self.harness
    }

    /// Runs one directive. Failures are logged and recorded, not fatal.
    pub fn apply(&mut self, d: &Directive) {
        self.harness.note(
            LogLevel::Info,
            "script",
            "directive",
            vec![("text", d.to_string())],
        );
        if let Err(e) = self.execute(d) {
            let msg = format!("{d}: {e}");
            self.harness.note(
                LogLevel::Warn,
                "script",
                "directive-failed",
                vec![("text", d.to_string()), ("error", e.to_string())],
            );
            self.errors.push(msg);
        }
    }

    fn execute(&mut self, d: &Directive) -> Result<(), HarnessError> {
        let h = &mut self.harness;
        match d {
            Directive::Open { channel } => h.open(channel),
            Directive::Pay {
                channel,
                from,
                amount,
            } => h.pay(channel, from, *amount),
            Directive::Bet {
                channel,
                doubter,
                backer,
                doubter_stake,
                backer_stake,
                prop,
                deadline,
            } => {
                let bet = Bet {
                    prop: h.prop_id(prop)?,
                    doubter_stake: *doubter_stake,
                    backer_stake: *backer_stake,
                    deadline: AbsoluteHeight(*deadline),
                    backer: h.address(backer)?,
                    doubter: h.address(doubter)?,
                };
                h.note_deadline(*deadline);
                h.bet(channel, bet)
            }
            Directive::Reveal { actor, prop } => h.reveal(actor, prop),
            Directive::PublishProof { actor, prop } => h.publish_proof(actor, prop),
            Directive::Settle {
                channel,
                prop,
                winner,
            } => h.settle(channel, prop, winner),
            Directive::Close {
                channel,
                mode: CloseMode::Cooperative,
                by,
            } => h.close_cooperative(channel, by),
            Directive::Close {
                channel,
                mode: CloseMode::Unilateral,
                by,
            } => h.close_unilateral(channel, by),
            Directive::Advance(k) => {
                h.advance(*k);
                Ok(())
            }
            Directive::Fault(f) => match f {
                Fault::Drop { kind, from, count } => h.fault_drop(kind, from.as_deref(), *count),
                Fault::Silence { actor, blocks } => h.silence(actor, *blocks),
                Fault::Wake { actor } => h.wake(actor),
                Fault::PublishRevoked {
                    actor,
                    channel,
                    revision,
                } => h.publish_revoked(actor, channel, *revision),
                Fault::Withhold { actor } => h.withhold(actor),
            },
            Directive::Route {
                path,
                amount,
                fees,
                step,
            } => self.route(path, *amount, fees, *step),
            Directive::Hedge {
                upstream,
                downstream,
                middle,
                prop,
                deadline,
            } => self.hedge(upstream, downstream, middle, prop, *deadline),
            Directive::Offer {
                actor,
                prop,
                deadline,
                doubter_stake,
            } => {
                h.prop_id(prop)?;
                h.note(
                    LogLevel::Info,
                    actor,
                    "offer",
                    vec![
                        ("prop", prop.clone()),
                        ("deadline", deadline.to_string()),
                        ("doubter", doubter_stake.to_string()),
                    ],
                );
                self.book = Some(OfferBook {
                    doubter: actor.clone(),
                    prop: prop.clone(),
                    deadline: *deadline,
                    stake: *doubter_stake,
                    counters: Vec::new(),
                });
                Ok(())
            }
            Directive::Counter {
                actor,
                backer_stake,
            } => {
                let book = self
                    .book
                    .as_mut()
                    .ok_or_else(|| HarnessError::Invalid("no open offer".into()))?;
                let offer = BetOffer {
                    prop: h.prop_id(&book.prop)?,
                    deadline: AbsoluteHeight(book.deadline),
                    offered_backer_stake: *backer_stake,
                    doubter_stake: book.stake,
                    offerer: h.address(actor)?,
                };
                let p = market::implied_probability(book.stake, *backer_stake)
                    .map_err(|e| HarnessError::Invalid(e.to_string()))?;
                let line = format!(
                    "prop={} deadline={} doubter={} backer={} p={}",
                    book.prop,
                    book.deadline,
                    book.stake,
                    backer_stake,
                    market::render_probability(&p)
                );
                h.note_market(actor, "counteroffer", line);
                book.counters.push((actor.clone(), offer));
                Ok(())
            }
            Directive::TakeBest => {
                let book = self
                    .book
                    .take()
                    .ok_or_else(|| HarnessError::Invalid("no open offer".into()))?;
                let offers: Vec<BetOffer> = book.counters.iter().map(|(_, o)| o.clone()).collect();
                let best = market::select_best_counteroffer(&offers)
                    .map_err(|e| HarnessError::Invalid(e.to_string()))?;
                let backer = book
                    .counters
                    .iter()
                    .find(|(_, o)| o == best)
                    .map(|(n, _)| n.clone())
                    .expect("selected from list");
                h.note(
                    LogLevel::Info,
                    &book.doubter,
                    "take-best",
                    vec![
                        ("backer", backer.clone()),
                        ("stake", best.offered_backer_stake.to_string()),
                    ],
                );
                let channel = channel_between(&self.scenario.channels, &book.doubter, &backer)
                    .ok_or_else(|| {
                        HarnessError::Invalid(format!(
                            "no channel between {} and {backer}",
                            book.doubter
                        ))
                    })?;
                let bet = Bet {
                    prop: best.prop,
                    doubter_stake: best.doubter_stake,
                    backer_stake: best.offered_backer_stake,
                    deadline: best.deadline,
                    backer: best.offerer,
                    doubter: h.address(&book.doubter)?,
                };
                h.note_deadline(book.deadline);
                h.bet(&channel, bet)
            }
        }
    }

    fn route(
        &mut self,
        path: &[String],
        amount: Amount,
        fees: &[Amount],
        step: u64,
    ) -> Result<(), HarnessError> {
        let mut hops = Vec::new();
        for (i, w) in path.windows(2).enumerate() {
            let channel =
                channel_between(&self.scenario.channels, &w[0], &w[1]).ok_or_else(|| {
                    HarnessError::Invalid(format!("no channel between {} and {}", w[0], w[1]))
                })?;
            let fee = fees.get(i).copied().unwrap_or(Amount::ZERO);
            hops.push(Hop {
                channel,
                from: w[0].clone(),
                to: w[1].clone(),
                fee,
            });
        }
        let route = Route { hops };
        let h = &self.harness;
        let liquidity = |hop: &Hop| {
            h.channel_state(&hop.from, &hop.channel)
                .map_or(Amount::ZERO, |s| s.terms().balance(s.side()))
        };
        let deltas = market::route_payment(&route, amount, &liquidity)
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let summary: Vec<String> = deltas
            .iter()
            .map(|(n, d)| format!("{n}:{}", format_delta(*d)))
            .collect();
        let plan = route
            .plan(amount, step)
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        self.harness.note(
            LogLevel::Info,
            &path[0],
            "route-plan",
            vec![("deltas", summary.join(" "))],
        );
        self.harness.start_route(plan).map(|_| ())
    }

    fn hedge(
        &mut self,
        upstream: &str,
        downstream: &str,
        middle: &str,
        prop: &str,
        deadline: Option<u64>,
    ) -> Result<(), HarnessError> {
        let h = &self.harness;
        let prop_id = h.prop_id(prop)?;
        let middle_addr = h.address(middle)?;
        let up_state = h
            .channel_state(middle, upstream)
            .ok_or_else(|| HarnessError::NotOpen(upstream.into(), middle.into()))?;
        let bet = up_state
            .terms()
            .bets
            .iter()
            .find(|b| b.prop == prop_id)
            .cloned()
            .ok_or_else(|| HarnessError::Invalid(format!("no bet on {prop} in {upstream}")))?;
        let down_state = h
            .channel_state(middle, downstream)
            .ok_or_else(|| HarnessError::NotOpen(downstream.into(), middle.into()))?;
        let counterparty = down_state.their_address();
        let available = down_state.terms().balance(down_state.side());
        let deadline = AbsoluteHeight(deadline.unwrap_or(bet.deadline.0));
        let hedged = market::hedge_bet(
            (upstream, &bet),
            middle_addr,
            downstream,
            counterparty,
            deadline,
            available,
        )
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let role = if hedged.downstream.1.doubter == middle_addr {
            "doubter"
        } else {
            "backer"
        };
        self.harness.note(
            LogLevel::Info,
            middle,
            "hedge",
            vec![
                ("upstream", upstream.to_string()),
                ("downstream", downstream.to_string()),
                ("role", role.into()),
            ],
        );
        self.harness.bet(downstream, hedged.downstream.1)
    }

    /// Lifts faults, winds everything down and builds the report.
    pub fn finish(mut self) -> Report {
        self.harness.finish();
        let h = &self.harness;
        let holdings = self
            .scenario
            .actors
            .iter()
            .map(|a| {
                let held = h.holdings(&a.name).expect("configured actor");
                (a.name.clone(), held, held.delta(a.faucet))
            })
            .collect();
        let channels = self
            .scenario
            .channels
            .iter()
            .map(|c| {
                let view = |n: &str| {
                    h.channel_state(n, &c.id)
                        .map_or("unopened".to_string(), |s| s.status().label())
                };
                (
                    c.id.clone(),
                    vec![(c.a.clone(), view(&c.a)), (c.b.clone(), view(&c.b))],
                )
            })
            .collect();
        Report {
            name: self.scenario.name.clone(),
            seed: self.seed,
            height: h.chain().height(),
            holdings,
            channels,
            market: h.market_lines().to_vec(),
            checks: h
                .checks()
                .into_iter()
                .map(|(n, r)| (n.to_string(), r))
                .collect(),
            directive_errors: self.errors,
            log: h.log().to_vec(),
        }
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, seed: Option<u64>) -> Result<Report, ScenarioError> {
    let mut runner = Runner::new(scenario, seed)?;
    for d in &scenario.script {
        runner.apply(d);
    }
    Ok(runner.finish())
}

macro_rules! builtin {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!("../scenarios/", $name, ".toml")),
        )
    };
}

/// The built-in scenario corpus as (name, document) pairs.
pub const BUILTINS: &[(&str, &str)] = &[
    builtin!("open-close"),
    builtin!("pay-update"),
    builtin!("bet-settle-cooperative"),
    builtin!("bet-timeout"),
    builtin!("bet-onchain-backer"),
    builtin!("bet-onchain-doubter"),
    builtin!("race-window"),
    builtin!("breach-punish"),
    builtin!("htlc-race"),
    builtin!("route-payment"),
    builtin!("three-party-hedge-noproof"),
    builtin!("three-party-hedge-proof"),
    builtin!("middleman-withhold"),
    builtin!("probability-report"),
];

pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    let (_, text) = BUILTINS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::UnknownBuiltin(name.to_string()))?;
    Scenario::parse(text)
}

/// Loads `builtin:<name>` or a scenario file path.
pub fn load(source: &str) -> Result<Scenario, ScenarioError> {
    match source.strip_prefix("builtin:") {
        Some(name) => builtin(name),
        None => {
            let text = std::fs::read_to_string(source).map_err(|e| ScenarioError::Io {
                path: source.to_string(),
                error: e.to_string(),
            })?;
            Scenario::parse(&text)
        }
    }
}
