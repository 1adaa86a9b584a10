//! Reference schedulers: interference-blind greedy beam selection and the
//! exact optimum by exhaustive enumeration.

use rayon::prelude::*;

use crate::channel::{EffectiveGains, SimConfig};
use crate::error::{Error, Result};
use crate::problem::{selection_wsr, BinarySelection, PairState};

/// Largest option count [`exhaustive_search`] accepts by default.
pub const DEFAULT_BUDGET: u128 = 100_000_000;

/// Mixed-radix counter over per-pair choices. Digit 0 (pair 0) varies
/// fastest; value 0 is inactive and `1 + r * nt + t` is beam pair `(r, t)`.
#[derive(Clone, Debug)]
pub struct OptionIterator {
    nr: usize,
    nt: usize,
    digits: Vec<usize>,
    done: bool,
}

impl OptionIterator {
    pub fn new(n: usize, nr: usize, nt: usize) -> Self {
        Self {
            nr,
            nt,
            digits: vec![0; n],
            done: nr * nt == 0,
        }
    }

    pub fn radix(&self) -> usize {
        self.nr * self.nt + 1
    }

    /// `(nr nt + 1)^n`, or `None` on overflow.
    pub fn count(n: usize, nr: usize, nt: usize) -> Option<u128> {
        let radix = (nr * nt + 1) as u128;
        (0..n).try_fold(1u128, |acc, _| acc.checked_mul(radix))
    }
}

fn digit_state(v: usize, nt: usize) -> PairState {
    if v == 0 {
        PairState::Inactive
    } else {
        PairState::Active {
            rx: (v - 1) / nt,
            tx: (v - 1) % nt,
        }
    }
}

fn advance(digits: &mut [usize], radix: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

impl Iterator for OptionIterator {
    type Item = BinarySelection;

    fn next(&mut self) -> Option<BinarySelection> {
        if self.done {
            return None;
        }
        let out = BinarySelection(self.digits.iter().map(|&v| digit_state(v, self.nt)).collect());
        let radix = self.radix();
        self.done = !advance(&mut self.digits, radix);
        Some(out)
    }
}

/// Every pair on the beam pair with the strongest direct gain, ties to the
/// lowest receive beam, then the lowest transmit beam.
pub fn greedy_nosched(gains: &EffectiveGains) -> BinarySelection {
    BinarySelection(
        (0..gains.n())
            .map(|m| {
                let (mut rx, mut tx, mut best) = (0, 0, f64::NEG_INFINITY);
                for r in 0..gains.nr() {
                    for (t, &g) in gains.row(m, r, m).iter().enumerate() {
                        if g > best {
                            (rx, tx, best) = (r, t, g);
                        }
                    }
                }
                PairState::Active { rx, tx }
            })
            .collect(),
    )
}

/// Rate of the schedule encoded by `digits`; same arithmetic and summation
/// order as [`selection_wsr`], so results are bit-identical. `signal[m][v]`
/// caches the direct received power of option `v` at pair `m`.
fn digits_wsr(gains: &EffectiveGains, config: &SimConfig, signal: &[Vec<f64>], digits: &[usize]) -> f64 {
    let nt = gains.nt();
    let p = config.tx_power;
    let mut total = 0.0;
    for (m, &v) in digits.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let rx = (v - 1) / nt;
        let mut interf = 0.0;
        for (n, &u) in digits.iter().enumerate() {
            if n != m && u != 0 {
                interf += gains.get(m, rx, n, (u - 1) % nt);
            }
        }
        total += config.weights[m] * ((signal[m][v] / (p * interf + config.noise_power)).ln_1p() / std::f64::consts::LN_2);
    }
    total
}

/// Exact maximizer of the weighted sum rate over all `(nr nt + 1)^n`
/// schedules, refusing instances with more than `budget` options. Among
/// equal rates the first schedule in enumeration order wins.
pub fn exhaustive_search_with_budget(
    gains: &EffectiveGains,
    config: &SimConfig,
    budget: u128,
) -> Result<(BinarySelection, f64)> {
    let (n, nr, nt) = (gains.n(), gains.nr(), gains.nt());
    if config.weights.len() != n {
        return Err(Error::invalid(format!(
            "config has {} pair weights for a {n}-pair instance",
            config.weights.len()
        )));
    }
    let options = OptionIterator::count(n, nr, nt).unwrap_or(u128::MAX);
    if options > budget {
        return Err(Error::TooLarge { options, budget });
    }
    if n == 0 {
        return Ok((BinarySelection(Vec::new()), 0.0));
    }
    let radix = nr * nt + 1;
    let signal: Vec<Vec<f64>> = (0..n)
        .map(|m| {
            std::iter::once(0.0)
                .chain((0..nr * nt).map(|v| config.tx_power * gains.get(m, v / nt, m, v % nt)))
                .collect()
        })
        .collect();

    // Split on the slowest digit; each block is a contiguous run of the
    // enumeration, so keeping the first block maximum preserves the order.
    let best = (0..radix)
        .into_par_iter()
        .map(|top| {
            let mut digits = vec![0usize; n];
            digits[n - 1] = top;
            let mut best = (f64::NEG_INFINITY, digits.clone());
            loop {
                let wsr = digits_wsr(gains, config, &signal, &digits);
                if wsr > best.0 {
                    best = (wsr, digits.clone());
                }
                if !advance(&mut digits[..n - 1], radix) {
                    break;
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .expect("at least one block");

    let selection = BinarySelection(best.1.iter().map(|&v| digit_state(v, nt)).collect());
    let wsr = selection_wsr(gains, &selection, config);
    Ok((selection, wsr))
}

/// [`exhaustive_search_with_budget`] with [`DEFAULT_BUDGET`].
pub fn exhaustive_search(gains: &EffectiveGains, config: &SimConfig) -> Result<(BinarySelection, f64)> {
    exhaustive_search_with_budget(gains, config, DEFAULT_BUDGET)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Codebook;
    use crate::rng::RngState;
    use crate::sample::Sample;
    use std::collections::HashSet;

    fn instance(n: usize, nt: usize, nr: usize, seed: u64) -> (SimConfig, EffectiveGains) {
        let config = SimConfig::new(n, nt, nr, 2, 10.0, (2.0, 6.0), 10.0).unwrap();
        let mut rng = RngState::seed_from(seed, 0);
        let s = Sample::generate(&config, &Codebook::dft(nt, nr), &mut rng).unwrap();
        (config, s.gains)
    }

    /// Choose the active subset first, then a beam pair for each member.
    fn subset_oracle(gains: &EffectiveGains, config: &SimConfig) -> (BinarySelection, f64) {
        let (n, nr, nt) = (gains.n(), gains.nr(), gains.nt());
        let mut best: Option<(BinarySelection, f64)> = None;
        for mask in 0u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|m| mask & (1 << m) != 0).collect();
            let mut choice = vec![(0usize, 0usize); members.len()];
            loop {
                let mut sel = BinarySelection::all_inactive(n);
                for (k, &m) in members.iter().enumerate() {
                    sel.0[m] = PairState::Active {
                        rx: choice[k].0,
                        tx: choice[k].1,
                    };
                }
                let wsr = selection_wsr(gains, &sel, config);
                if best.as_ref().map_or(true, |b| wsr > b.1) {
                    best = Some((sel, wsr));
                }
                // next beam assignment
                let mut k = 0;
                loop {
                    if k == choice.len() {
                        break;
                    }
                    choice[k].1 += 1;
                    if choice[k].1 == nt {
                        choice[k].1 = 0;
                        choice[k].0 += 1;
                        if choice[k].0 == nr {
                            choice[k].0 = 0;
                            k += 1;
                            continue;
                        }
                    }
                    break;
                }
                if k == choice.len() {
                    break;
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn iterator_visits_every_schedule_once() {
        for (n, nr, nt) in [(1, 1, 1), (2, 2, 2), (3, 1, 2), (2, 3, 1)] {
            let all: Vec<_> = OptionIterator::new(n, nr, nt).collect();
            let unique: HashSet<_> = all.iter().cloned().collect();
            let expected = OptionIterator::count(n, nr, nt).unwrap() as usize;
            assert_eq!(all.len(), expected);
            assert_eq!(unique.len(), expected);
        }
        assert_eq!(OptionIterator::count(2, 2, 2), Some(25));
    }

    #[test]
    fn greedy_single_pair_takes_global_max() {
        let (_, gains) = instance(1, 4, 4, 1);
        let sel = greedy_nosched(&gains);
        let PairState::Active { rx, tx } = sel.0[0] else { panic!() };
        let best = gains.as_slice().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(gains.get(0, rx, 0, tx), best);
    }

    #[test]
    fn greedy_prefers_lowest_index_on_ties() {
        let gains = EffectiveGains::from_fn(1, 2, 2, |_, r, _, t| if r + t >= 1 { 1.0 } else { 0.5 }).unwrap();
        assert_eq!(greedy_nosched(&gains).0[0], PairState::Active { rx: 0, tx: 1 });
    }

    #[test]
    fn greedy_activates_everyone_and_ignores_cross_gains() {
        let (_, gains) = instance(4, 2, 2, 2);
        let sel = greedy_nosched(&gains);
        assert_eq!(sel.active_count(), 4);
        let perturbed =
            EffectiveGains::from_fn(4, 2, 2, |m, r, n, l| if m == n { gains.get(m, r, n, l) } else { 99.0 * (r + l) as f64 })
                .unwrap();
        assert_eq!(greedy_nosched(&perturbed), sel);
    }

    #[test]
    fn single_pair_optimum_is_noise_limited_rate() {
        let (config, gains) = instance(1, 4, 2, 3);
        let (sel, wsr) = exhaustive_search(&gains, &config).unwrap();
        assert_eq!(sel, greedy_nosched(&gains));
        let best = gains.as_slice().iter().cloned().fold(f64::MIN, f64::max);
        let expected = (1.0 + config.tx_power * best / config.noise_power).log2();
        assert!((wsr - expected).abs() < 1e-12);
    }

    #[test]
    fn decoupled_pairs_all_active() {
        let (config, gains) = instance(3, 2, 2, 4);
        let gains = EffectiveGains::from_fn(3, 2, 2, |m, r, n, l| if m == n { gains.get(m, r, n, l) } else { 0.0 }).unwrap();
        let (sel, _) = exhaustive_search(&gains, &config).unwrap();
        assert_eq!(sel, greedy_nosched(&gains));
    }

    #[test]
    fn matches_subset_oracle() {
        for seed in 0..20 {
            let (config, gains) = instance(3, 2, 2, 100 + seed);
            let (sel, wsr) = exhaustive_search(&gains, &config).unwrap();
            let (osel, owsr) = subset_oracle(&gains, &config);
            assert_eq!(wsr, owsr);
            assert_eq!(sel, osel);
        }
    }

    #[test]
    fn optimum_dominates_enumerated_schedules() {
        let (config, gains) = instance(2, 2, 2, 5);
        let (_, best) = exhaustive_search(&gains, &config).unwrap();
        for sel in OptionIterator::new(2, 2, 2) {
            assert!(selection_wsr(&gains, &sel, &config) <= best);
        }
    }

    #[test]
    fn budget_refusal_names_count() {
        let (config, gains) = instance(3, 2, 2, 6);
        match exhaustive_search_with_budget(&gains, &config, 100) {
            Err(Error::TooLarge { options, budget }) => assert_eq!((options, budget), (125, 100)),
            other => panic!("{other:?}"),
        }
    }
}
