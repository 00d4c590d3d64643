//! Multi-hop routing, hedged bets and the stake arithmetic of a betting
//! market. Everything here is pure planning; the harness carries it out.

use std::collections::BTreeMap;

use num_rational::Ratio;
use thiserror::Error;

use crate::amount::Amount;
use crate::channel::Bet;
use crate::crypto::{Address, PropositionId};
use crate::peer::{verify_proof, ProofBlob, ProofOracle, RoutePlan};
use crate::script::{AbsoluteHeight, RelativeDelay};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarketError {
    #[error("hop {0} lacks liquidity")]
    InsufficientLiquidity(usize),
    #[error("route is broken")]
    RouteBroken,
    #[error("hedge deadline differs from the bet it covers")]
    DeadlineMismatch,
    #[error("insufficient balance for the mirrored stake")]
    InsufficientBalance,
    #[error("the hedging actor is not a party to the bet")]
    NotAParty,
    #[error("both stakes are zero")]
    ZeroStakes,
    #[error("no offers")]
    NoOffers,
    #[error("offers are for different bets")]
    MixedOffers,
    #[error("amount overflow")]
    Overflow,
}

/// One channel of a route. `fee` is kept by `to` when it forwards; the last
/// hop's fee must be zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hop {
    pub channel: String,
    pub from: String,
    pub to: String,
    pub fee: Amount,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub hops: Vec<Hop>,
}

impl Route {
    /// Checks the shape: non-empty, adjacent hops share an actor, no fee at
    /// the receiver, no actor sending to itself.
    pub fn validate(&self) -> Result<(), MarketError> {
        let last = self.hops.last().ok_or(MarketError::RouteBroken)?;
        if !last.fee.is_zero() {
            return Err(MarketError::RouteBroken);
        }
        if self.hops.iter().any(|h| h.from == h.to) {
            return Err(MarketError::RouteBroken);
        }
        if self.hops.windows(2).any(|w| w[0].to != w[1].from) {
            return Err(MarketError::RouteBroken);
        }
        Ok(())
    }

    /// What hop `i` carries: the amount plus every fee from `i` onward.
    pub fn hop_amounts(&self, amount: Amount) -> Result<Vec<Amount>, MarketError> {
        let mut carried = amount;
        let mut out = vec![Amount::ZERO; self.hops.len()];
        for (i, hop) in self.hops.iter().enumerate().rev() {
            carried = carried
                .checked_add(hop.fee)
                .map_err(|_| MarketError::Overflow)?;
            out[i] = carried;
        }
        Ok(out)
    }

    /// The actors along the route, sender first.
    pub fn path(&self) -> Vec<String> {
        let mut path: Vec<String> = self.hops.iter().map(|h| h.from.clone()).collect();
        path.extend(self.hops.last().map(|h| h.to.clone()));
        path
    }

    /// The harness plan for this route. Refund delays shrink by `step`
    /// blocks per hop toward the receiver, so every intermediary can reclaim
    /// upstream after its downstream payment has timed out.
    pub fn plan(&self, amount: Amount, step: u64) -> Result<RoutePlan, MarketError> {
        self.validate()?;
        let n = self.hops.len() as u64;
        let delays = (0..n)
            .map(|i| {
                RelativeDelay::new(step.max(1) * (n - i)).map_err(|_| MarketError::RouteBroken)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RoutePlan {
            path: self.path(),
            channels: self.hops.iter().map(|h| h.channel.clone()).collect(),
            amounts: self.hop_amounts(amount)?,
            delays,
        })
    }
}

/// Balance deltas, in atoms, of a payment routed along `route`.
/// `liquidity(hop)` is the sender's spendable balance on that hop.
pub fn route_payment(
    route: &Route,
    amount: Amount,
    liquidity: &dyn Fn(&Hop) -> Amount,
) -> Result<BTreeMap<String, i128>, MarketError> {
    route.validate()?;
    if amount.is_zero() {
        return Err(MarketError::RouteBroken);
    }
    let carried = route.hop_amounts(amount)?;
    for (i, hop) in route.hops.iter().enumerate() {
        if liquidity(hop) < carried[i] {
            return Err(MarketError::InsufficientLiquidity(i));
        }
    }
    let mut deltas = BTreeMap::new();
    for (hop, value) in route.hops.iter().zip(&carried) {
        *deltas.entry(hop.from.clone()).or_insert(0) -= value.atoms() as i128;
        *deltas.entry(hop.to.clone()).or_insert(0) += value.atoms() as i128;
    }
    Ok(deltas)
}

/// A bet and its mirror on a second channel, held by the same middle actor
/// in opposite roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HedgedBet {
    pub upstream: (String, Bet),
    pub downstream: (String, Bet),
    pub middle: Address,
}

/// Mirrors `upstream` onto `downstream_channel` against `counterparty`,
/// with the middle actor's role flipped and the stakes unchanged.
/// `available` is the middle actor's balance on the downstream channel.
pub fn hedge_bet(
    upstream: (&str, &Bet),
    middle: Address,
    downstream_channel: &str,
    counterparty: Address,
    deadline: AbsoluteHeight,
    available: Amount,
) -> Result<HedgedBet, MarketError> {
    let (up_channel, bet) = upstream;
    if deadline != bet.deadline {
        return Err(MarketError::DeadlineMismatch);
    }
    let (backer, doubter, middle_stake) = if bet.backer == middle {
        (counterparty, middle, bet.doubter_stake)
    } else if bet.doubter == middle {
        (middle, counterparty, bet.backer_stake)
    } else {
        return Err(MarketError::NotAParty);
    };
    if available < middle_stake {
        return Err(MarketError::InsufficientBalance);
    }
    let mirrored = Bet {
        backer,
        doubter,
        ..bet.clone()
    };
    Ok(HedgedBet {
        upstream: (up_channel.to_string(), bet.clone()),
        downstream: (downstream_channel.to_string(), mirrored),
        middle,
    })
}

/// Net position, in atoms, of `who` across a set of bets for either outcome.
pub fn bet_outcome(bets: &[&Bet], who: &Address, proven: bool) -> i128 {
    bets.iter()
        .map(|b| {
            let won = if proven {
                b.backer == *who
            } else {
                b.doubter == *who
            };
            let stake = b.stake_of(who).atoms() as i128;
            if won {
                b.pot().atoms() as i128 - stake
            } else if b.backer == *who || b.doubter == *who {
                -stake
            } else {
                0
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProofAction {
    /// `from` sends the proof to its counterparty on `channel`.
    Reveal { channel: String, from: Address },
    /// The bet on `channel` settles to `winner`.
    Settle { channel: String, winner: Address },
}

/// How a proof held by `holder` travels through a hedged pair. Backers
/// reveal to collect, which hands the proof to their doubter. A middle actor
/// that learns the proof concedes its doubter leg unless it withholds. A
/// pure doubter has nothing to gain and does nothing.
pub fn propagate_proof(
    hedged: &HedgedBet,
    blob: &ProofBlob,
    oracle: &ProofOracle,
    holder: Address,
    withholds: &dyn Fn(&Address) -> bool,
) -> Vec<ProofAction> {
    let prop = hedged.upstream.1.prop;
    if blob.prop != prop || !verify_proof(blob, oracle) {
        return Vec::new();
    }
    let legs = [&hedged.downstream, &hedged.upstream];
    let mut knows = vec![holder];
    let mut settled = [false; 2];
    let mut actions = Vec::new();
    loop {
        let mut progress = false;
        for (i, (channel, bet)) in legs.iter().enumerate() {
            if settled[i] {
                continue;
            }
            if knows.contains(&bet.backer) {
                actions.push(ProofAction::Reveal {
                    channel: channel.clone(),
                    from: bet.backer,
                });
                actions.push(ProofAction::Settle {
                    channel: channel.clone(),
                    winner: bet.backer,
                });
                knows.push(bet.doubter);
            } else if knows.contains(&bet.doubter)
                && bet.doubter == hedged.middle
                && !withholds(&bet.doubter)
            {
                actions.push(ProofAction::Settle {
                    channel: channel.clone(),
                    winner: bet.backer,
                });
            } else {
                continue;
            }
            settled[i] = true;
            progress = true;
        }
        if !progress {
            return actions;
        }
    }
}

/// The chance of a proof by the deadline implied by the stakes:
/// `backer / (backer + doubter)`.
pub fn implied_probability(
    doubter_stake: Amount,
    backer_stake: Amount,
) -> Result<Ratio<u64>, MarketError> {
    let total = doubter_stake
        .checked_add(backer_stake)
        .map_err(|_| MarketError::Overflow)?;
    if total.is_zero() {
        return Err(MarketError::ZeroStakes);
    }
    Ok(Ratio::new(backer_stake.atoms(), total.atoms()))
}

/// Four decimal places, rounding half up.
pub fn render_probability(p: &Ratio<u64>) -> String {
    let (num, den) = (*p.numer() as u128, *p.denom() as u128);
    let scaled = (num * 20_000 + den) / (2 * den);
    format!("{}.{:04}", scaled / 10_000, scaled % 10_000)
}

/// The probability report line for a bet.
pub fn probability_line(prop_label: &str, bet: &Bet) -> String {
    let p = implied_probability(bet.doubter_stake, bet.backer_stake)
        .map(|p| render_probability(&p))
        .unwrap_or_else(|_| "n/a".to_string());
    format!(
        "prop={prop_label} deadline={} doubter={} backer={} p={p}",
        bet.deadline.0, bet.doubter_stake, bet.backer_stake
    )
}

/// A backer's offer to take the other side of a proposed bet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BetOffer {
    pub prop: PropositionId,
    pub deadline: AbsoluteHeight,
    pub offered_backer_stake: Amount,
    pub doubter_stake: Amount,
    pub offerer: Address,
}

/// The offer with the largest backer stake; the earliest wins a tie.
pub fn select_best_counteroffer(offers: &[BetOffer]) -> Result<&BetOffer, MarketError> {
    let first = offers.first().ok_or(MarketError::NoOffers)?;
    if offers.iter().any(|o| {
        (o.prop, o.deadline, o.doubter_stake) != (first.prop, first.deadline, first.doubter_stake)
    }) {
        return Err(MarketError::MixedOffers);
    }
    if offers.iter().any(|o| o.offered_backer_stake.is_zero()) {
        return Err(MarketError::ZeroStakes);
    }
    Ok(offers.iter().fold(first, |best, o| {
        if o.offered_backer_stake > best.offered_backer_stake {
            o
        } else {
            best
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use proptest::prelude::*;

    fn bars(n: u64) -> Amount {
        Amount::from_bars(n)
    }

    fn addr(name: &str) -> Address {
        keygen(name.as_bytes()).1
    }

    fn hop(channel: &str, from: &str, to: &str, fee: Amount) -> Hop {
        Hop {
            channel: channel.into(),
            from: from.into(),
            to: to.into(),
            fee,
        }
    }

    fn two_hop(fee: Amount) -> Route {
        Route {
            hops: vec![
                hop("ab", "alice", "bob", fee),
                hop("bc", "bob", "charlie", Amount::ZERO),
            ],
        }
    }

    fn upstream_bet(deadline: u64) -> Bet {
        Bet {
            prop: PropositionId::from_label("P"),
            doubter_stake: bars(50),
            backer_stake: bars(10),
            deadline: AbsoluteHeight(deadline),
            backer: addr("bob"),
            doubter: addr("alice"),
        }
    }

    #[test]
    fn one_bar_and_one_atom() {
        let deltas =
            route_payment(&two_hop(Amount::from_atoms(1)), bars(1), &|_| bars(100)).unwrap();
        let one = bars(1).atoms() as i128;
        assert_eq!(deltas["alice"], -one - 1);
        assert_eq!(deltas["bob"], 1);
        assert_eq!(deltas["charlie"], one);
    }

    #[test]
    fn liquidity_and_shape_errors() {
        let route = two_hop(Amount::from_atoms(1));
        let err = route_payment(&route, bars(1), &|h| {
            if h.channel == "bc" {
                bars(0)
            } else {
                bars(5)
            }
        });
        assert_eq!(err, Err(MarketError::InsufficientLiquidity(1)));
        let err = route_payment(&route, bars(1), &|_| bars(1));
        assert_eq!(err, Err(MarketError::InsufficientLiquidity(0)));

        let broken = Route {
            hops: vec![
                hop("ab", "alice", "bob", Amount::ZERO),
                hop("cd", "carol", "dave", Amount::ZERO),
            ],
        };
        assert_eq!(
            route_payment(&broken, bars(1), &|_| bars(9)),
            Err(MarketError::RouteBroken)
        );
        let fee_at_end = Route {
            hops: vec![hop("ab", "alice", "bob", bars(1))],
        };
        assert_eq!(fee_at_end.validate(), Err(MarketError::RouteBroken));
        assert_eq!(
            Route { hops: vec![] }.validate(),
            Err(MarketError::RouteBroken)
        );
    }

    #[test]
    fn plan_delays_shrink_downstream() {
        let plan = two_hop(Amount::from_atoms(1)).plan(bars(1), 4).unwrap();
        assert_eq!(plan.path, vec!["alice", "bob", "charlie"]);
        assert_eq!(
            plan.amounts,
            vec![Amount::from_atoms(bars(1).atoms() + 1), bars(1)]
        );
        assert_eq!(
            plan.delays.iter().map(|d| d.blocks()).collect::<Vec<_>>(),
            vec![8, 4]
        );
    }

    #[test]
    fn hedge_mirrors_roles_and_neutralizes_the_middle() {
        let up = upstream_bet(30);
        let h = hedge_bet(
            ("ab", &up),
            addr("bob"),
            "bc",
            addr("charlie"),
            AbsoluteHeight(30),
            bars(100),
        )
        .unwrap();
        let down = &h.downstream.1;
        assert_eq!((down.doubter, down.backer), (addr("bob"), addr("charlie")));
        assert_eq!(
            (down.doubter_stake, down.backer_stake),
            (bars(50), bars(10))
        );

        let bets = [&h.upstream.1, &h.downstream.1];
        let b = |n| bars(n).atoms() as i128;
        assert_eq!(bet_outcome(&bets, &addr("alice"), false), b(10));
        assert_eq!(bet_outcome(&bets, &addr("bob"), false), 0);
        assert_eq!(bet_outcome(&bets, &addr("charlie"), false), -b(10));
        assert_eq!(bet_outcome(&bets, &addr("alice"), true), -b(50));
        assert_eq!(bet_outcome(&bets, &addr("bob"), true), 0);
        assert_eq!(bet_outcome(&bets, &addr("charlie"), true), b(50));
    }

    #[test]
    fn hedge_errors() {
        let up = upstream_bet(30);
        let mismatch = hedge_bet(
            ("ab", &up),
            addr("bob"),
            "bc",
            addr("charlie"),
            AbsoluteHeight(31),
            bars(100),
        );
        assert_eq!(mismatch, Err(MarketError::DeadlineMismatch));
        let poor = hedge_bet(
            ("ab", &up),
            addr("bob"),
            "bc",
            addr("charlie"),
            AbsoluteHeight(30),
            bars(49),
        );
        assert_eq!(poor, Err(MarketError::InsufficientBalance));
        let stranger = hedge_bet(
            ("ab", &up),
            addr("dave"),
            "bc",
            addr("charlie"),
            AbsoluteHeight(30),
            bars(100),
        );
        assert_eq!(stranger, Err(MarketError::NotAParty));
    }

    fn hedged() -> (HedgedBet, ProofOracle) {
        let mut oracle = ProofOracle::default();
        oracle.insert("P", true);
        let up = upstream_bet(30);
        let h = hedge_bet(
            ("ab", &up),
            addr("bob"),
            "bc",
            addr("charlie"),
            AbsoluteHeight(30),
            bars(100),
        )
        .unwrap();
        (h, oracle)
    }

    #[test]
    fn proof_flows_from_backer_end() {
        let (h, oracle) = hedged();
        let blob = oracle.proof(&PropositionId::from_label("P")).unwrap();
        let acts = propagate_proof(&h, &blob, &oracle, addr("charlie"), &|_| false);
        assert_eq!(
            acts,
            vec![
                ProofAction::Reveal {
                    channel: "bc".into(),
                    from: addr("charlie")
                },
                ProofAction::Settle {
                    channel: "bc".into(),
                    winner: addr("charlie")
                },
                ProofAction::Reveal {
                    channel: "ab".into(),
                    from: addr("bob")
                },
                ProofAction::Settle {
                    channel: "ab".into(),
                    winner: addr("bob")
                },
            ]
        );
    }

    #[test]
    fn withholding_middle_settles_only_upstream() {
        let (h, oracle) = hedged();
        let blob = oracle.proof(&PropositionId::from_label("P")).unwrap();
        let bob = addr("bob");
        let acts = propagate_proof(&h, &blob, &oracle, bob, &|a| *a == bob);
        assert_eq!(
            acts,
            vec![
                ProofAction::Reveal {
                    channel: "ab".into(),
                    from: bob
                },
                ProofAction::Settle {
                    channel: "ab".into(),
                    winner: bob
                },
            ]
        );
        let honest = propagate_proof(&h, &blob, &oracle, bob, &|_| false);
        assert!(honest.contains(&ProofAction::Settle {
            channel: "bc".into(),
            winner: addr("charlie")
        }));
    }

    #[test]
    fn pure_doubter_and_bad_blobs_do_nothing() {
        let (h, oracle) = hedged();
        let blob = oracle.proof(&PropositionId::from_label("P")).unwrap();
        assert!(propagate_proof(&h, &blob, &oracle, addr("alice"), &|_| false).is_empty());
        let mut bad = blob.clone();
        bad.payload[3] ^= 0x40;
        assert!(propagate_proof(&h, &bad, &oracle, addr("charlie"), &|_| false).is_empty());
    }

    #[test]
    fn probabilities() {
        let p = implied_probability(bars(50), bars(10)).unwrap();
        assert_eq!(p, Ratio::new(1, 6));
        assert_eq!(render_probability(&p), "0.1667");
        assert_eq!(
            render_probability(&implied_probability(bars(50), bars(50)).unwrap()),
            "0.5000"
        );
        assert_eq!(
            render_probability(&implied_probability(bars(7), bars(0)).unwrap()),
            "0.0000"
        );
        assert_eq!(render_probability(&Ratio::new(1, 1)), "1.0000");
        assert_eq!(render_probability(&Ratio::new(1, 20_000)), "0.0001");
        assert_eq!(render_probability(&Ratio::new(1, 20_001)), "0.0000");
        assert_eq!(
            implied_probability(Amount::ZERO, Amount::ZERO),
            Err(MarketError::ZeroStakes)
        );
    }

    #[test]
    fn report_line() {
        let line = probability_line("P", &upstream_bet(30));
        assert_eq!(line, "prop=P deadline=30 doubter=50 backer=10 p=0.1667");
    }

    fn offer(stake: u64, who: &str) -> BetOffer {
        BetOffer {
            prop: PropositionId::from_label("P"),
            deadline: AbsoluteHeight(30),
            offered_backer_stake: bars(stake),
            doubter_stake: bars(50),
            offerer: addr(who),
        }
    }

    #[test]
    fn best_counteroffer() {
        let offers = [offer(10, "bob"), offer(50, "charlie")];
        assert_eq!(
            select_best_counteroffer(&offers).unwrap().offerer,
            addr("charlie")
        );
        assert_eq!(
            select_best_counteroffer(&offers[..1]).unwrap().offerer,
            addr("bob")
        );
        let tied = [offer(20, "bob"), offer(20, "charlie")];
        assert_eq!(
            select_best_counteroffer(&tied).unwrap().offerer,
            addr("bob")
        );
        assert_eq!(select_best_counteroffer(&[]), Err(MarketError::NoOffers));
        let mut other = offer(30, "dave");
        other.deadline = AbsoluteHeight(31);
        assert_eq!(
            select_best_counteroffer(&[offer(10, "bob"), other]),
            Err(MarketError::MixedOffers)
        );
    }

    proptest! {
        #[test]
        fn probability_bounded_and_monotone(d in 1u64..1_000_000, k in 1u64..1_000_000) {
            let p = implied_probability(Amount::from_atoms(d), Amount::from_atoms(k)).unwrap();
            prop_assert!(p >= Ratio::from_integer(0) && p <= Ratio::from_integer(1));
            let more_backer = implied_probability(Amount::from_atoms(d), Amount::from_atoms(k + 1)).unwrap();
            let more_doubter = implied_probability(Amount::from_atoms(d + 1), Amount::from_atoms(k)).unwrap();
            prop_assert!(more_backer > p);
            prop_assert!(more_doubter < p);
        }

        #[test]
        fn counteroffer_choice_survives_scaling(stakes in prop::collection::vec(1u64..10_000, 1..12), scale in 1u64..1_000) {
            let offers: Vec<BetOffer> = stakes.iter().enumerate().map(|(i, s)| BetOffer {
                offered_backer_stake: Amount::from_atoms(*s),
                offerer: addr(&format!("o{i}")),
                ..offer(1, "x")
            }).collect();
            let scaled: Vec<BetOffer> = offers.iter().map(|o| BetOffer {
                offered_backer_stake: Amount::from_atoms(o.offered_backer_stake.atoms() * scale),
                doubter_stake: Amount::from_atoms(o.doubter_stake.atoms() * scale),
                ..o.clone()
            }).collect();
            let a = select_best_counteroffer(&offers).unwrap().offerer;
            let b = select_best_counteroffer(&scaled).unwrap().offerer;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn hedge_is_neutral(d in 1u64..10_000, k in 1u64..10_000, middle_backs in any::<bool>(), proven in any::<bool>()) {
            let mut up = upstream_bet(40);
            up.doubter_stake = Amount::from_atoms(d);
            up.backer_stake = Amount::from_atoms(k);
            let middle = if middle_backs { up.backer } else { up.doubter };
            let h = hedge_bet(("ab", &up), middle, "bc", addr("charlie"), up.deadline, Amount::from_atoms(20_000)).unwrap();
            let bets = [&h.upstream.1, &h.downstream.1];
            prop_assert_eq!(bet_outcome(&bets, &middle, proven), 0);
            let others: i128 = [up.backer, up.doubter, addr("charlie")].iter()
                .filter(|a| **a != middle)
                .map(|a| bet_outcome(&bets, a, proven))
                .sum();
            prop_assert_eq!(others, 0);
        }

        #[test]
        fn routing_conserves(amount in 1u64..1_000_000, fees in prop::collection::vec(0u64..1_000, 0..5)) {
            let mut hops: Vec<Hop> = fees.iter().enumerate()
                .map(|(i, f)| hop(&format!("c{i}"), &format!("n{i}"), &format!("n{}", i + 1), Amount::from_atoms(*f)))
                .collect();
            let n = hops.len();
            hops.push(hop("last", &format!("n{n}"), "end", Amount::ZERO));
            let route = Route { hops };
            let deltas = route_payment(&route, Amount::from_atoms(amount), &|_| Amount::from_atoms(u64::MAX / 2)).unwrap();
            prop_assert_eq!(deltas.values().sum::<i128>(), 0);
            prop_assert_eq!(deltas["end"], amount as i128);
            for (i, f) in fees.iter().enumerate() {
                prop_assert_eq!(deltas[&format!("n{}", i + 1)], *f as i128);
            }
        }
    }
}
