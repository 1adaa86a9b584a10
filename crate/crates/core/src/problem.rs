//! Rates, the weighted-sum-rate objective, constraint residuals, the partial
//! Lagrangian used as the training loss, and rounding of continuous beam
//! policies to feasible schedules.
//!
//! A policy holds two selection matrices: `phi` (`n x nr`, receive beams) and
//! `psi` (`n x nt`, transmit beams). A feasible schedule has binary entries,
//! at most one selected beam per row, and a receive row that is active
//! exactly when the matching transmit row is.

use std::f64::consts::LN_2;

use crate::channel::{EffectiveGains, SimConfig};
use crate::error::{Error, Result};

/// Continuous receive/transmit beam selection matrices, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamPolicy {
    n: usize,
    nr: usize,
    nt: usize,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

impl BeamPolicy {
    /// Every entry set to `value`.
    pub fn filled(n: usize, nr: usize, nt: usize, value: f64) -> Self {
        Self {
            n,
            nr,
            nt,
            phi: vec![value; n * nr],
            psi: vec![value; n * nt],
        }
    }

    pub fn zeros(n: usize, nr: usize, nt: usize) -> Self {
        Self::filled(n, nr, nt, 0.0)
    }

    pub fn from_raw(n: usize, nr: usize, nt: usize, phi: Vec<f64>, psi: Vec<f64>) -> Result<Self> {
        if phi.len() != n * nr || psi.len() != n * nt {
            return Err(Error::invalid(format!(
                "policy shapes {}/{} do not match n={n}, nr={nr}, nt={nt}",
                phi.len(),
                psi.len()
            )));
        }
        if phi.iter().chain(&psi).any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("policy entries must lie in [0, 1]"));
        }
        Ok(Self { n, nr, nt, phi, psi })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    #[inline]
    pub fn phi(&self, m: usize, r: usize) -> f64 {
        self.phi[m * self.nr + r]
    }

    #[inline]
    pub fn psi(&self, n: usize, l: usize) -> f64 {
        self.psi[n * self.nt + l]
    }

    pub fn phi_row(&self, m: usize) -> &[f64] {
        &self.phi[m * self.nr..(m + 1) * self.nr]
    }

    pub fn psi_row(&self, n: usize) -> &[f64] {
        &self.psi[n * self.nt..(n + 1) * self.nt]
    }

    pub fn phi_row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.phi[m * self.nr..(m + 1) * self.nr]
    }

    pub fn psi_row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.psi[n * self.nt..(n + 1) * self.nt]
    }

    pub fn phi_slice(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi_slice(&self) -> &[f64] {
        &self.psi
    }

    /// Relabels pairs: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.n, self.nr, self.nt);
        for (i, &src) in perm.iter().enumerate() {
            out.phi_row_mut(i).copy_from_slice(self.phi_row(src));
            out.psi_row_mut(i).copy_from_slice(self.psi_row(src));
        }
        out
    }
}

/// State of one pair in a feasible schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairState {
    Inactive,
    Active { rx: usize, tx: usize },
}

/// Feasible schedule: one state per pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinarySelection(pub Vec<PairState>);

impl BinarySelection {
    pub fn all_inactive(n: usize) -> Self {
        Self(vec![PairState::Inactive; n])
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn active_count(&self) -> usize {
        self.0
            .iter()
            .filter(|s| matches!(s, PairState::Active { .. }))
            .count()
    }
}

/// Nonnegative multipliers of the partial Lagrangian.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMultipliers {
    /// `n x nt`, binary-ness of transmit entries.
    pub lambda: Vec<f64>,
    /// `n x nr`, binary-ness of receive entries.
    pub mu: Vec<f64>,
    /// Transmit row sums.
    pub nu: Vec<f64>,
    /// Receive row sums.
    pub xi: Vec<f64>,
    /// Transmit/receive activation coupling.
    pub rho_dual: Vec<f64>,
}

impl DualMultipliers {
    pub fn zeros(n: usize, nr: usize, nt: usize) -> Self {
        Self {
            lambda: vec![0.0; n * nt],
            mu: vec![0.0; n * nr],
            nu: vec![0.0; n],
            xi: vec![0.0; n],
            rho_dual: vec![0.0; n],
        }
    }

    fn all(&self) -> impl Iterator<Item = &f64> {
        self.lambda
            .iter()
            .chain(&self.mu)
            .chain(&self.nu)
            .chain(&self.xi)
            .chain(&self.rho_dual)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.all().all(|x| *x >= 0.0)
    }

    /// Euclidean norms of `(lambda, mu, nu, xi, rho_dual)`.
    pub fn norms(&self) -> [f64; 5] {
        let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [
            l2(&self.lambda),
            l2(&self.mu),
            l2(&self.nu),
            l2(&self.xi),
            l2(&self.rho_dual),
        ]
    }
}

/// Per-constraint residuals of a continuous policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ViolationReport {
    /// `psi - psi^2`, `n x nt`.
    pub binary_tx: Vec<f64>,
    /// `phi - phi^2`, `n x nr`.
    pub binary_rx: Vec<f64>,
    /// `max(0, sum_t psi[m][t] - 1)`.
    pub row_tx: Vec<f64>,
    /// `max(0, sum_r phi[m][r] - 1)`.
    pub row_rx: Vec<f64>,
    /// `|sum_t psi[m][t] - sum_r phi[m][r]|`.
    pub coupling: Vec<f64>,
}

impl ViolationReport {
    pub fn zeros(n: usize, nr: usize, nt: usize) -> Self {
        Self {
            binary_tx: vec![0.0; n * nt],
            binary_rx: vec![0.0; n * nr],
            row_tx: vec![0.0; n],
            row_rx: vec![0.0; n],
            coupling: vec![0.0; n],
        }
    }

    /// Element-wise accumulation, used for epoch sums.
    pub fn accumulate(&mut self, other: &ViolationReport) {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.binary_tx, &other.binary_tx);
        add(&mut self.binary_rx, &other.binary_rx);
        add(&mut self.row_tx, &other.row_tx);
        add(&mut self.row_rx, &other.row_rx);
        add(&mut self.coupling, &other.coupling);
    }

    /// Mean of each field, in the order
    /// `(binary_tx, binary_rx, row_tx, row_rx, coupling)`.
    pub fn means(&self) -> [f64; 5] {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        [
            mean(&self.binary_tx),
            mean(&self.binary_rx),
            mean(&self.row_tx),
            mean(&self.row_rx),
            mean(&self.coupling),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.binary_tx
            .iter()
            .chain(&self.binary_rx)
            .chain(&self.row_tx)
            .chain(&self.row_rx)
            .chain(&self.coupling)
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

/// Total interference power seen by beam `r` of receiver `m`, before the
/// receive-selection factor.
fn interference(gains: &EffectiveGains, policy: &BeamPolicy, power: f64, m: usize, r: usize) -> f64 {
    let mut acc = 0.0;
    for n in (0..policy.n()).filter(|&n| n != m) {
        let row = gains.row(m, r, n);
        acc += row
            .iter()
            .zip(policy.psi_row(n))
            .map(|(g, s)| g * s)
            .sum::<f64>();
    }
    power * acc
}

fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / LN_2
}

/// Achievable rate (bits/s/Hz) of pair `m` on receive beam `r` and transmit
/// beam `t`. Accepts continuous policies.
pub fn pair_rate(gains: &EffectiveGains, policy: &BeamPolicy, config: &SimConfig, m: usize, r: usize, t: usize) -> f64 {
    let p = config.tx_power;
    let phi = policy.phi(m, r);
    let signal = phi * policy.psi(m, t) * p * gains.get(m, r, m, t);
    let denom = phi * interference(gains, policy, p, m, r) + config.noise_power;
    log2_1p(signal / denom)
}

pub fn weighted_sum_rate(gains: &EffectiveGains, policy: &BeamPolicy, config: &SimConfig) -> f64 {
    let p = config.tx_power;
    let mut total = 0.0;
    for m in 0..policy.n() {
        let w = config.weights[m];
        for r in 0..policy.nr() {
            let phi = policy.phi(m, r);
            if phi == 0.0 {
                continue;
            }
            let denom = phi * interference(gains, policy, p, m, r) + config.noise_power;
            let direct = gains.row(m, r, m);
            for (t, &psi) in policy.psi_row(m).iter().enumerate() {
                total += w * log2_1p(phi * psi * p * direct[t] / denom);
            }
        }
    }
    total
}

/// Weighted sum rate of a feasible schedule; only active pairs contribute and
/// only active transmitters interfere.
pub fn selection_wsr(gains: &EffectiveGains, selection: &BinarySelection, config: &SimConfig) -> f64 {
    let p = config.tx_power;
    let states = &selection.0;
    let mut total = 0.0;
    for (m, state) in states.iter().enumerate() {
        if let PairState::Active { rx, tx } = *state {
            let mut interf = 0.0;
            for (n, other) in states.iter().enumerate() {
                if let (true, PairState::Active { tx: l, .. }) = (n != m, *other) {
                    interf += gains.get(m, rx, n, l);
                }
            }
            let sinr = p * gains.get(m, rx, m, tx) / (p * interf + config.noise_power);
            total += config.weights[m] * log2_1p(sinr);
        }
    }
    total
}

pub fn violations(policy: &BeamPolicy) -> ViolationReport {
    let (n, nr, nt) = (policy.n(), policy.nr(), policy.nt());
    let mut rep = ViolationReport::zeros(n, nr, nt);
    for (v, x) in rep.binary_tx.iter_mut().zip(policy.psi_slice()) {
        *v = x - x * x;
    }
    for (v, x) in rep.binary_rx.iter_mut().zip(policy.phi_slice()) {
        *v = x - x * x;
    }
    for m in 0..n {
        let tx_sum: f64 = policy.psi_row(m).iter().sum();
        let rx_sum: f64 = policy.phi_row(m).iter().sum();
        rep.row_tx[m] = (tx_sum - 1.0).max(0.0);
        rep.row_rx[m] = (rx_sum - 1.0).max(0.0);
        rep.coupling[m] = (tx_sum - rx_sum).abs();
    }
    rep
}

fn penalty(policy: &BeamPolicy, duals: &DualMultipliers) -> f64 {
    let v = violations(policy);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&duals.lambda, &v.binary_tx)
        + dot(&duals.mu, &v.binary_rx)
        + dot(&duals.nu, &v.row_tx)
        + dot(&duals.xi, &v.row_rx)
        + dot(&duals.rho_dual, &v.coupling)
}

/// `-WSR` plus the multiplier-weighted constraint residuals.
pub fn lagrangian_loss(gains: &EffectiveGains, policy: &BeamPolicy, duals: &DualMultipliers, config: &SimConfig) -> f64 {
    -weighted_sum_rate(gains, policy, config) + penalty(policy, duals)
}

/// Loss with its gradient with respect to `phi` and `psi`.
#[derive(Clone, Debug)]
pub struct PolicyGradient {
    pub loss: f64,
    pub d_phi: Vec<f64>,
    pub d_psi: Vec<f64>,
}

/// Value and gradient of [`lagrangian_loss`]. Kinks follow fixed
/// conventions: the row penalty has zero slope at zero excess and the
/// coupling term uses `sign(0) = 0`.
pub fn lagrangian_loss_grad(
    gains: &EffectiveGains,
    policy: &BeamPolicy,
    duals: &DualMultipliers,
    config: &SimConfig,
) -> PolicyGradient {
    let (n, nr, nt) = (policy.n(), policy.nr(), policy.nt());
    let p = config.tx_power;
    let sigma2 = config.noise_power;
    let mut d_phi = vec![0.0; n * nr];
    let mut d_psi = vec![0.0; n * nt];
    let mut wsr = 0.0;
    let mut d_signal = vec![0.0; nt];

    for m in 0..n {
        let w = config.weights[m];
        for r in 0..nr {
            let phi = policy.phi(m, r);
            let interf = interference(gains, policy, p, m, r);
            let denom = phi * interf + sigma2;
            let direct = gains.row(m, r, m);
            // d WSR / d denom, accumulated over transmit beams
            let mut d_denom = 0.0;
            for t in 0..nt {
                let psi = policy.psi(m, t);
                let signal = phi * psi * p * direct[t];
                wsr += w * log2_1p(signal / denom);
                d_signal[t] = w / (LN_2 * (denom + signal));
                d_denom -= w * signal / (LN_2 * denom * (denom + signal));
            }
            let mut g_phi = d_denom * interf;
            for t in 0..nt {
                g_phi += d_signal[t] * policy.psi(m, t) * p * direct[t];
                d_psi[m * nt + t] -= d_signal[t] * phi * p * direct[t];
            }
            d_phi[m * nr + r] -= g_phi;
            if d_denom != 0.0 && phi != 0.0 {
                let scale = d_denom * phi * p;
                for k in (0..n).filter(|&k| k != m) {
                    for (l, g) in gains.row(m, r, k).iter().enumerate() {
                        d_psi[k * nt + l] -= scale * g;
                    }
                }
            }
        }
    }

    for (i, x) in policy.psi_slice().iter().enumerate() {
        d_psi[i] += duals.lambda[i] * (1.0 - 2.0 * x);
    }
    for (i, x) in policy.phi_slice().iter().enumerate() {
        d_phi[i] += duals.mu[i] * (1.0 - 2.0 * x);
    }
    for m in 0..n {
        let tx_sum: f64 = policy.psi_row(m).iter().sum();
        let rx_sum: f64 = policy.phi_row(m).iter().sum();
        let mut g_tx = 0.0;
        let mut g_rx = 0.0;
        if tx_sum - 1.0 > 0.0 {
            g_tx += duals.nu[m];
        }
        if rx_sum - 1.0 > 0.0 {
            g_rx += duals.xi[m];
        }
        let diff = tx_sum - rx_sum;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        g_tx += duals.rho_dual[m] * sign;
        g_rx -= duals.rho_dual[m] * sign;
        d_psi[m * nt..(m + 1) * nt].iter_mut().for_each(|g| *g += g_tx);
        d_phi[m * nr..(m + 1) * nr].iter_mut().for_each(|g| *g += g_rx);
    }

    PolicyGradient {
        loss: -wsr + penalty(policy, duals),
        d_phi,
        d_psi,
    }
}

/// Lowest index among the maxima of `row`.
fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Rounds a continuous policy to a feasible schedule. Pair `m` is active on
/// the row maxima `(r*, t*)` iff both selected entries reach `threshold`.
pub fn round_policy(policy: &BeamPolicy, threshold: f64) -> BinarySelection {
    BinarySelection(
        (0..policy.n())
            .map(|m| {
                let rx = argmax_lowest(policy.phi_row(m));
                let tx = argmax_lowest(policy.psi_row(m));
                if policy.phi(m, rx).min(policy.psi(m, tx)) >= threshold {
                    PairState::Active { rx, tx }
                } else {
                    PairState::Inactive
                }
            })
            .collect(),
    )
}

/// One-hot rows for active pairs, zero rows otherwise.
pub fn selection_to_policy(selection: &BinarySelection, nr: usize, nt: usize) -> Result<BeamPolicy> {
    let n = selection.n();
    let mut policy = BeamPolicy::zeros(n, nr, nt);
    for (m, state) in selection.0.iter().enumerate() {
        if let PairState::Active { rx, tx } = *state {
            if rx >= nr || tx >= nt {
                return Err(Error::invalid(format!(
                    "pair {m}: beam ({rx}, {tx}) outside {nr} x {nt} codebooks"
                )));
            }
            policy.phi_row_mut(m)[rx] = 1.0;
            policy.psi_row_mut(m)[tx] = 1.0;
        }
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn config(n: usize, snr_db: f64) -> SimConfig {
        SimConfig::new(n, 2, 2, 2, 5.0, (4.0, 5.0), snr_db).unwrap()
    }

    fn random_gains(n: usize, nr: usize, nt: usize, rng: &mut RngState) -> EffectiveGains {
        EffectiveGains::from_fn(n, nr, nt, |_, _, _, _| rng.next_uniform()).unwrap()
    }

    fn random_policy(n: usize, nr: usize, nt: usize, rng: &mut RngState) -> BeamPolicy {
        let phi = (0..n * nr).map(|_| rng.next_uniform()).collect();
        let psi = (0..n * nt).map(|_| rng.next_uniform()).collect();
        BeamPolicy::from_raw(n, nr, nt, phi, psi).unwrap()
    }

    fn random_duals(n: usize, nr: usize, nt: usize, rng: &mut RngState) -> DualMultipliers {
        let mut d = DualMultipliers::zeros(n, nr, nt);
        for v in [&mut d.lambda, &mut d.mu, &mut d.nu, &mut d.xi, &mut d.rho_dual] {
            v.iter_mut().for_each(|x| *x = rng.next_uniform() * 3.0);
        }
        d
    }

    #[test]
    fn zero_receive_selection_gives_zero_rate() {
        let mut rng = RngState::seed_from(1, 0);
        let g = random_gains(2, 2, 2, &mut rng);
        let mut pol = BeamPolicy::filled(2, 2, 2, 1.0);
        pol.phi_row_mut(0)[1] = 0.0;
        assert_eq!(pair_rate(&g, &pol, &config(2, 10.0), 0, 1, 0), 0.0);
    }

    #[test]
    fn single_pair_rate_is_snr_formula() {
        let cfg = config(1, 10.0);
        let g = EffectiveGains::from_raw(1, 2, 2, vec![0.3, 0.7, 0.2, 0.1]).unwrap();
        let pol = BeamPolicy::filled(1, 2, 2, 1.0);
        let expected = (1.0 + cfg.tx_power * 0.7 / cfg.noise_power).log2();
        assert!((pair_rate(&g, &pol, &cfg, 0, 0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn two_pair_rate_matches_scalar_sinr() {
        let cfg = config(2, 10.0);
        let mut rng = RngState::seed_from(2, 0);
        let g = random_gains(2, 2, 2, &mut rng);
        let sel = BinarySelection(vec![
            PairState::Active { rx: 1, tx: 0 },
            PairState::Active { rx: 0, tx: 1 },
        ]);
        let pol = selection_to_policy(&sel, 2, 2).unwrap();
        let p = cfg.tx_power;
        let sinr0 = p * g.get(0, 1, 0, 0) / (p * g.get(0, 1, 1, 1) + 1.0);
        let sinr1 = p * g.get(1, 0, 1, 1) / (p * g.get(1, 0, 0, 0) + 1.0);
        assert!((pair_rate(&g, &pol, &cfg, 0, 1, 0) - (1.0 + sinr0).log2()).abs() < 1e-12);
        assert!((pair_rate(&g, &pol, &cfg, 1, 0, 1) - (1.0 + sinr1).log2()).abs() < 1e-12);
        let wsr = weighted_sum_rate(&g, &pol, &cfg);
        assert!((wsr - (1.0 + sinr0).log2() - (1.0 + sinr1).log2()).abs() < 1e-12);
        assert!((selection_wsr(&g, &sel, &cfg) - wsr).abs() < 1e-12);
    }

    #[test]
    fn wsr_degenerate_inputs() {
        let mut rng = RngState::seed_from(3, 0);
        let g = random_gains(3, 2, 2, &mut rng);
        let mut cfg = config(3, 10.0);
        assert_eq!(weighted_sum_rate(&g, &BeamPolicy::zeros(3, 2, 2), &cfg), 0.0);
        cfg.weights = vec![0.0; 3];
        assert_eq!(weighted_sum_rate(&g, &BeamPolicy::filled(3, 2, 2, 0.6), &cfg), 0.0);
    }

    #[test]
    fn violation_arithmetic() {
        let sel = BinarySelection(vec![PairState::Active { rx: 1, tx: 0 }, PairState::Inactive]);
        let v = violations(&selection_to_policy(&sel, 2, 2).unwrap());
        assert_eq!(v.max_abs(), 0.0);

        let pol = BeamPolicy::from_raw(1, 2, 2, vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let v = violations(&pol);
        assert_eq!(v.binary_rx, vec![0.25, 0.25]);
        assert_eq!(v.row_rx, vec![0.0]);

        let pol = BeamPolicy::from_raw(1, 2, 2, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(violations(&pol).coupling, vec![1.0]);
    }

    #[test]
    fn loss_at_feasible_point_ignores_duals() {
        let cfg = config(2, 10.0);
        let mut rng = RngState::seed_from(4, 0);
        let g = random_gains(2, 2, 2, &mut rng);
        let sel = BinarySelection(vec![PairState::Active { rx: 0, tx: 1 }, PairState::Inactive]);
        let pol = selection_to_policy(&sel, 2, 2).unwrap();
        let wsr = weighted_sum_rate(&g, &pol, &cfg);
        let duals = random_duals(2, 2, 2, &mut rng);
        assert_eq!(lagrangian_loss(&g, &pol, &duals, &cfg), -wsr);
        assert_eq!(lagrangian_loss(&g, &pol, &DualMultipliers::zeros(2, 2, 2), &cfg), -wsr);
    }

    #[test]
    fn loss_bounds_negative_wsr_from_above() {
        let cfg = config(3, 10.0);
        let mut rng = RngState::seed_from(5, 0);
        for _ in 0..100 {
            let g = random_gains(3, 2, 2, &mut rng);
            let pol = random_policy(3, 2, 2, &mut rng);
            let duals = random_duals(3, 2, 2, &mut rng);
            assert!(lagrangian_loss(&g, &pol, &duals, &cfg) >= -weighted_sum_rate(&g, &pol, &cfg));
        }
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let cfg = config(3, 10.0);
        let mut rng = RngState::seed_from(6, 0);
        let g = random_gains(3, 2, 2, &mut rng);
        let pol = random_policy(3, 2, 2, &mut rng);
        let duals = random_duals(3, 2, 2, &mut rng);
        let grad = lagrangian_loss_grad(&g, &pol, &duals, &cfg);
        assert!((grad.loss - lagrangian_loss(&g, &pol, &duals, &cfg)).abs() < 1e-12);
        let h = 1e-6;
        let eval = |phi: Vec<f64>, psi: Vec<f64>| {
            let p = BeamPolicy::from_raw(3, 2, 2, phi, psi).unwrap();
            lagrangian_loss(&g, &p, &duals, &cfg)
        };
        for i in 0..6 {
            let mut up = pol.phi_slice().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let num = (eval(up, pol.psi_slice().to_vec()) - eval(dn, pol.psi_slice().to_vec())) / (2.0 * h);
            assert!((num - grad.d_phi[i]).abs() < 1e-6, "phi {i}: {num} vs {}", grad.d_phi[i]);
            let mut up = pol.psi_slice().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let num = (eval(pol.phi_slice().to_vec(), up) - eval(pol.phi_slice().to_vec(), dn)) / (2.0 * h);
            assert!((num - grad.d_psi[i]).abs() < 1e-6, "psi {i}: {num} vs {}", grad.d_psi[i]);
        }
    }

    #[test]
    fn rounding_rules() {
        let pol = BeamPolicy::from_raw(1, 2, 2, vec![0.9, 0.1], vec![0.2, 0.8]).unwrap();
        assert_eq!(round_policy(&pol, 0.5).0, vec![PairState::Active { rx: 0, tx: 1 }]);
        let pol = BeamPolicy::from_raw(1, 2, 2, vec![0.9, 0.1], vec![0.3, 0.2]).unwrap();
        assert_eq!(round_policy(&pol, 0.5).0, vec![PairState::Inactive]);
        let pol = BeamPolicy::from_raw(1, 2, 2, vec![0.7, 0.7], vec![0.7, 0.1]).unwrap();
        assert_eq!(round_policy(&pol, 0.5).0, vec![PairState::Active { rx: 0, tx: 0 }]);
    }

    #[test]
    fn selection_policy_conversion() {
        let sel = BinarySelection(vec![PairState::Inactive, PairState::Active { rx: 1, tx: 0 }]);
        let pol = selection_to_policy(&sel, 2, 2).unwrap();
        assert_eq!(pol.phi_row(0), &[0.0, 0.0]);
        assert_eq!(pol.psi_row(0), &[0.0, 0.0]);
        assert_eq!(pol.phi_row(1), &[0.0, 1.0]);
        assert_eq!(pol.psi_row(1), &[1.0, 0.0]);
        let bad = BinarySelection(vec![PairState::Active { rx: 2, tx: 0 }]);
        assert!(selection_to_policy(&bad, 2, 2).is_err());
    }

    #[test]
    fn selection_round_trip() {
        let mut rng = RngState::seed_from(7, 0);
        for _ in 0..100 {
            let n = 1 + rng.next_index(5);
            let (nr, nt) = (1 + rng.next_index(4), 1 + rng.next_index(4));
            let sel = BinarySelection(
                (0..n)
                    .map(|_| {
                        if rng.next_uniform() < 0.3 {
                            PairState::Inactive
                        } else {
                            PairState::Active {
                                rx: rng.next_index(nr),
                                tx: rng.next_index(nt),
                            }
                        }
                    })
                    .collect(),
            );
            let pol = selection_to_policy(&sel, nr, nt).unwrap();
            assert_eq!(round_policy(&pol, 0.5), sel);
            assert_eq!(violations(&pol).max_abs(), 0.0);
        }
    }
}
