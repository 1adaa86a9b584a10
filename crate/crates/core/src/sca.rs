//! Successive convex approximation baseline.
//!
//! The binary-ness penalties are written as differences of convex functions
//! and the rate as `f - q` over the lifted variables `w[m][n][r][l]` standing
//! for `phi[m][r] * psi[n][l]`. At each inner step the concave parts (`-h1`,
//! `-h2`, `-q`) are replaced by their tangent planes at the current point and
//! the lifted products are relaxed to their McCormick envelopes, which yields
//! a convex subproblem. The outer loop raises the two penalty weights until
//! the selections stop moving.
//!
//! Subproblems are solved by an augmented Lagrangian on the linear
//! constraints with box-projected gradient steps.

use std::f64::consts::LN_2;
use std::io::Write;
use std::path::Path;

use crate::channel::{EffectiveGains, SimConfig};
use crate::error::{Error, Result};
use crate::problem::{round_policy, selection_to_policy, selection_wsr, BeamPolicy, BinarySelection, PairState};

/// Iterate of the method.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaState {
    pub n: usize,
    pub nr: usize,
    pub nt: usize,
    /// `n x nr`.
    pub phi: Vec<f64>,
    /// `n x nt`.
    pub psi: Vec<f64>,
    /// Lifted products, index `((m * n + k) * nr + r) * nt + l`.
    pub w_bar: Vec<f64>,
    /// Transmit penalty weight.
    pub theta: f64,
    /// Receive penalty weight.
    pub delta: f64,
    pub inner_iter: usize,
    pub outer_iter: usize,
    /// Surrogate value at the last subproblem solution.
    pub surrogate: f64,
}

impl ScaState {
    #[inline]
    pub fn w_index(&self, m: usize, k: usize, r: usize, l: usize) -> usize {
        ((m * self.n + k) * self.nr + r) * self.nt + l
    }

    pub fn policy(&self) -> Result<BeamPolicy> {
        let clamp = |v: &[f64]| v.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        BeamPolicy::from_raw(self.n, self.nr, self.nt, clamp(&self.phi), clamp(&self.psi))
    }

    /// Mean of `|x - x^2|` over all selection entries.
    pub fn mean_binary_gap(&self) -> f64 {
        let all = self.phi.iter().chain(&self.psi);
        all.clone().map(|x| (x - x * x).abs()).sum::<f64>() / all.count().max(1) as f64
    }

    /// Largest violation of the row, coupling and McCormick constraints.
    pub fn max_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in 0..self.n {
            let tx: f64 = self.psi[m * self.nt..(m + 1) * self.nt].iter().sum();
            let rx: f64 = self.phi[m * self.nr..(m + 1) * self.nr].iter().sum();
            worst = worst.max(tx - 1.0).max(rx - 1.0).max((tx - rx).abs());
        }
        for x in self.phi.iter().chain(&self.psi).chain(&self.w_bar) {
            worst = worst.max(-x).max(x - 1.0);
        }
        worst.max(self.max_mccormick_residual())
    }

    /// Largest of `psi + phi - 1 - w`, `w - psi`, `w - phi`, `-w`.
    pub fn max_mccormick_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in 0..self.n {
            for k in 0..self.n {
                for r in 0..self.nr {
                    let f = self.phi[m * self.nr + r];
                    for l in 0..self.nt {
                        let s = self.psi[k * self.nt + l];
                        let w = self.w_bar[self.w_index(m, k, r, l)];
                        worst = worst.max(s + f - 1.0 - w).max(w - s).max(w - f).max(-w);
                    }
                }
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaConfig {
    /// Penalty weight step.
    pub step: f64,
    /// Relative-change tolerance of both loops.
    pub tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Augmented-Lagrangian rounds per subproblem.
    pub al_max_rounds: usize,
    /// Projected-gradient steps per round.
    pub pg_max_iter: usize,
    /// Exit threshold on the projected-gradient norm, relative to the
    /// largest objective gradient entry at the subproblem's starting point
    /// (floored at 1).
    pub pg_tolerance: f64,
    /// Exit threshold on the largest constraint violation.
    pub feas_tolerance: f64,
    /// Initial penalty parameter of the augmented Lagrangian.
    pub al_penalty: f64,
    /// Threshold used to round the final policy.
    pub round_threshold: f64,
    /// After each weight update, move to the schedule of
    /// [`insertion_rounding`] when its penalized objective is lower than the
    /// current one.
    pub rounding_moves: bool,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            tolerance: 1e-5,
            max_outer: 200,
            max_inner: 100,
            al_max_rounds: 60,
            pg_max_iter: 3000,
            pg_tolerance: 1e-4,
            feas_tolerance: 1e-6,
            al_penalty: 10.0,
            round_threshold: 0.5,
            rounding_moves: true,
        }
    }
}

impl ScaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.step,
            self.tolerance,
            self.pg_tolerance,
            self.feas_tolerance,
            self.al_penalty,
        ];
        if positive.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::invalid("step, tolerances and penalty must be positive"));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.al_max_rounds == 0 || self.pg_max_iter == 0 {
            return Err(Error::invalid("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

/// One active pair on beams `(0, 0)`, everything else off, zero weights.
pub fn init_state(n: usize, nr: usize, nt: usize) -> Result<ScaState> {
    if n == 0 || nr == 0 || nt == 0 {
        return Err(Error::invalid("n, nr and nt must all be at least 1"));
    }
    let mut phi = vec![0.0; n * nr];
    let mut psi = vec![0.0; n * nt];
    let mut w_bar = vec![0.0; n * n * nr * nt];
    phi[0] = 1.0;
    psi[0] = 1.0;
    w_bar[0] = 1.0;
    Ok(ScaState {
        n,
        nr,
        nt,
        phi,
        psi,
        w_bar,
        theta: 0.0,
        delta: 0.0,
        inner_iter: 0,
        outer_iter: 0,
        surrogate: 0.0,
    })
}

/// Convex pieces of the two binary-ness penalties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcTerms {
    pub g1: f64,
    pub h1: f64,
    pub g2: f64,
    pub h2: f64,
}

fn dc_pair(x: &[f64], weight: f64) -> (f64, f64) {
    let s: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    (weight * s + weight * s * s, weight * sq + weight * s * s)
}

/// `g1 = theta (S + S^2)`, `h1 = theta (sum psi^2 + S^2)` with `S = sum psi`,
/// and the same with `phi`, `delta` for `g2`, `h2`.
pub fn dc_terms(phi: &[f64], psi: &[f64], theta: f64, delta: f64) -> DcTerms {
    let (g1, h1) = dc_pair(psi, theta);
    let (g2, h2) = dc_pair(phi, delta);
    DcTerms { g1, h1, g2, h2 }
}

/// Tangent planes of the concave parts at an expansion point.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogates {
    psi0: Vec<f64>,
    phi0: Vec<f64>,
    w0: Vec<f64>,
    h1_0: f64,
    h2_0: f64,
    /// Slope of the `h1` plane in each `psi` entry.
    h1_slope: Vec<f64>,
    h2_slope: Vec<f64>,
    /// `q[m][r]` at the anchor, index `m * nr + r`.
    q0: Vec<f64>,
    /// `1 / (ln 2 * (interference + noise))` at the anchor.
    q_scale: Vec<f64>,
}

/// Interference-plus-noise seen on beam `r` of receiver `m` under `w`.
fn interference_noise(gains: &EffectiveGains, sim: &SimConfig, s: &ScaState, w: &[f64], m: usize, r: usize) -> f64 {
    let mut acc = 0.0;
    for k in (0..s.n).filter(|&k| k != m) {
        let base = s.w_index(m, k, r, 0);
        acc += gains
            .row(m, r, k)
            .iter()
            .zip(&w[base..base + s.nt])
            .map(|(g, x)| g * x)
            .sum::<f64>();
    }
    sim.tx_power * acc + sim.noise_power
}

fn plane_slope(x: &[f64], weight: f64) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    x.iter().map(|v| 2.0 * weight * (v + s)).collect()
}

/// Tangent planes of `h1`, `h2` and every `q[m][r][t]` at `state`. `q` does
/// not depend on `t`, so one plane per `(m, r)` is stored.
pub fn taylor_surrogates(state: &ScaState, gains: &EffectiveGains, sim: &SimConfig) -> Surrogates {
    let dc = dc_terms(&state.phi, &state.psi, state.theta, state.delta);
    let mut q0 = Vec::with_capacity(state.n * state.nr);
    let mut q_scale = Vec::with_capacity(state.n * state.nr);
    for m in 0..state.n {
        for r in 0..state.nr {
            let a = interference_noise(gains, sim, state, &state.w_bar, m, r);
            q0.push(a.log2());
            q_scale.push(1.0 / (LN_2 * a));
        }
    }
    Surrogates {
        psi0: state.psi.clone(),
        phi0: state.phi.clone(),
        w0: state.w_bar.clone(),
        h1_0: dc.h1,
        h2_0: dc.h2,
        h1_slope: plane_slope(&state.psi, state.theta),
        h2_slope: plane_slope(&state.phi, state.delta),
        q0,
        q_scale,
    }
}

fn plane(value: f64, slope: &[f64], anchor: &[f64], x: &[f64]) -> f64 {
    value + slope.iter().zip(x.iter().zip(anchor)).map(|(c, (v, a))| c * (v - a)).sum::<f64>()
}

impl Surrogates {
    pub fn h1_bar(&self, psi: &[f64]) -> f64 {
        plane(self.h1_0, &self.h1_slope, &self.psi0, psi)
    }

    pub fn h2_bar(&self, phi: &[f64]) -> f64 {
        plane(self.h2_0, &self.h2_slope, &self.phi0, phi)
    }

    /// Upper plane of `q[m][r][t]` (any `t`) evaluated at `w`.
    pub fn q_bar(&self, gains: &EffectiveGains, sim: &SimConfig, s: &ScaState, w: &[f64], m: usize, r: usize) -> f64 {
        let mut acc = 0.0;
        for k in (0..s.n).filter(|&k| k != m) {
            let base = s.w_index(m, k, r, 0);
            for (l, g) in gains.row(m, r, k).iter().enumerate() {
                acc += sim.tx_power * g * (w[base + l] - self.w0[base + l]);
            }
        }
        self.q0[m * s.nr + r] + acc * self.q_scale[m * s.nr + r]
    }
}

/// `q[m][r][t]` at `w`, the log of interference plus noise.
pub fn q_value(gains: &EffectiveGains, sim: &SimConfig, s: &ScaState, w: &[f64], m: usize, r: usize) -> f64 {
    interference_noise(gains, sim, s, w, m, r).log2()
}

/// `f[m][r][t]` at `w`: log of interference, noise and the lifted signal.
fn f_value(gains: &EffectiveGains, sim: &SimConfig, s: &ScaState, w: &[f64], a: f64, m: usize, r: usize, t: usize) -> f64 {
    (a + sim.tx_power * gains.get(m, r, m, t) * w[s.w_index(m, m, r, t)]).log2()
}

fn rate_part(gains: &EffectiveGains, sim: &SimConfig, s: &ScaState, w: &[f64], surr: Option<&Surrogates>) -> f64 {
    let mut total = 0.0;
    for m in 0..s.n {
        let wm = sim.weights[m];
        for r in 0..s.nr {
            let a = interference_noise(gains, sim, s, w, m, r);
            let q = match surr {
                Some(sg) => sg.q_bar(gains, sim, s, w, m, r),
                None => a.log2(),
            };
            for t in 0..s.nt {
                total -= wm * (f_value(gains, sim, s, w, a, m, r, t) - q);
            }
        }
    }
    total
}

/// Penalized objective with the lifted rates, no approximation:
/// `-sum w (f - q) + g1 - h1 + g2 - h2`.
pub fn true_objective(state: &ScaState, gains: &EffectiveGains, sim: &SimConfig) -> f64 {
    let dc = dc_terms(&state.phi, &state.psi, state.theta, state.delta);
    rate_part(gains, sim, state, &state.w_bar, None) + dc.g1 - dc.h1 + dc.g2 - dc.h2
}

/// Convex majorizer `-sum w (f - q_bar) + g1 - h1_bar + g2 - h2_bar`
/// evaluated at `state`.
pub fn surrogate_objective(state: &ScaState, surr: &Surrogates, gains: &EffectiveGains, sim: &SimConfig) -> f64 {
    let dc = dc_terms(&state.phi, &state.psi, state.theta, state.delta);
    rate_part(gains, sim, state, &state.w_bar, Some(surr)) + dc.g1 - surr.h1_bar(&state.psi) + dc.g2
        - surr.h2_bar(&state.phi)
}

/// Flat variable vector `[psi, phi, w]` and the evaluation of the
/// subproblem on it.
struct Subproblem<'a> {
    gains: &'a EffectiveGains,
    sim: &'a SimConfig,
    surr: &'a Surrogates,
    shape: ScaState,
    n_psi: usize,
    n_phi: usize,
}

impl Subproblem<'_> {
    fn split<'v>(&self, x: &'v [f64]) -> (&'v [f64], &'v [f64], &'v [f64]) {
        let (psi, rest) = x.split_at(self.n_psi);
        let (phi, w) = rest.split_at(self.n_phi);
        (psi, phi, w)
    }

    fn state_from(&self, x: &[f64]) -> ScaState {
        let (psi, phi, w) = self.split(x);
        ScaState {
            psi: psi.to_vec(),
            phi: phi.to_vec(),
            w_bar: w.to_vec(),
            ..self.shape.clone()
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        surrogate_objective(&self.state_from(x), self.surr, self.gains, self.sim)
    }

    fn objective_grad(&self, x: &[f64], grad: &mut [f64]) {
        let s = &self.shape;
        let (psi, phi, w) = self.split(x);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (g_psi, rest) = grad.split_at_mut(self.n_psi);
        let (g_phi, g_w) = rest.split_at_mut(self.n_phi);
        let p = self.sim.tx_power;

        for m in 0..s.n {
            let wm = self.sim.weights[m];
            for r in 0..s.nr {
                let a = interference_noise(self.gains, self.sim, s, w, m, r);
                let q_coef = wm * s.nt as f64 * self.surr.q_scale[m * s.nr + r];
                let mut inv_sum = 0.0;
                for t in 0..s.nt {
                    let direct = p * self.gains.get(m, r, m, t);
                    let b = a + direct * w[s.w_index(m, m, r, t)];
                    inv_sum += 1.0 / b;
                    g_w[s.w_index(m, m, r, t)] -= wm * direct / (LN_2 * b);
                }
                for k in (0..s.n).filter(|&k| k != m) {
                    let base = s.w_index(m, k, r, 0);
                    for (l, g) in self.gains.row(m, r, k).iter().enumerate() {
                        g_w[base + l] += p * g * (q_coef - wm * inv_sum / LN_2);
                    }
                }
            }
        }
        let lin = |x: &[f64], weight: f64, slope: &[f64], out: &mut [f64]| {
            let sum: f64 = x.iter().sum();
            for (o, c) in out.iter_mut().zip(slope) {
                *o += weight + 2.0 * weight * sum - c;
            }
        };
        lin(psi, s.theta, &self.surr.h1_slope, g_psi);
        lin(phi, s.delta, &self.surr.h2_slope, g_phi);
    }

    /// Linear constraints as `(inequalities <= 0, equalities = 0)`; each
    /// entry lists its sparse coefficients and constant.
    fn constraints(&self) -> (Vec<LinCon>, Vec<LinCon>) {
        let s = &self.shape;
        let psi_at = |k: usize, l: usize| k * s.nt + l;
        let phi_at = |m: usize, r: usize| self.n_psi + m * s.nr + r;
        let w_at = |m: usize, k: usize, r: usize, l: usize| self.n_psi + self.n_phi + s.w_index(m, k, r, l);
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        for m in 0..s.n {
            ineq.push(LinCon {
                terms: (0..s.nt).map(|l| (psi_at(m, l), 1.0)).collect(),
                constant: -1.0,
            });
            ineq.push(LinCon {
                terms: (0..s.nr).map(|r| (phi_at(m, r), 1.0)).collect(),
                constant: -1.0,
            });
            eq.push(LinCon {
                terms: (0..s.nt)
                    .map(|l| (psi_at(m, l), 1.0))
                    .chain((0..s.nr).map(|r| (phi_at(m, r), -1.0)))
                    .collect(),
                constant: 0.0,
            });
        }
        for m in 0..s.n {
            for k in 0..s.n {
                for r in 0..s.nr {
                    for l in 0..s.nt {
                        let (w, ps, ph) = (w_at(m, k, r, l), psi_at(k, l), phi_at(m, r));
                        ineq.push(LinCon {
                            terms: vec![(ps, 1.0), (ph, 1.0), (w, -1.0)],
                            constant: -1.0,
                        });
                        ineq.push(LinCon {
                            terms: vec![(w, 1.0), (ps, -1.0)],
                            constant: 0.0,
                        });
                        ineq.push(LinCon {
                            terms: vec![(w, 1.0), (ph, -1.0)],
                            constant: 0.0,
                        });
                    }
                }
            }
        }
        (ineq, eq)
    }
}

struct LinCon {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl LinCon {
    fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

struct AugLag<'a> {
    sub: &'a Subproblem<'a>,
    ineq: &'a [LinCon],
    eq: &'a [LinCon],
    y: Vec<f64>,
    z: Vec<f64>,
    rho: f64,
}

impl AugLag<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.sub.objective(x);
        for (c, &y) in self.ineq.iter().zip(&self.y) {
            let t = (y + self.rho * c.eval(x)).max(0.0);
            v += (t * t - y * y) / (2.0 * self.rho);
        }
        for (c, &z) in self.eq.iter().zip(&self.z) {
            let h = c.eval(x);
            v += z * h + 0.5 * self.rho * h * h;
        }
        v
    }

    fn grad(&self, x: &[f64], g: &mut [f64]) {
        self.sub.objective_grad(x, g);
        for (c, &y) in self.ineq.iter().zip(&self.y) {
            let t = (y + self.rho * c.eval(x)).max(0.0);
            if t > 0.0 {
                c.terms.iter().for_each(|&(i, a)| g[i] += t * a);
            }
        }
        for (c, &z) in self.eq.iter().zip(&self.z) {
            let t = z + self.rho * c.eval(x);
            c.terms.iter().for_each(|&(i, a)| g[i] += t * a);
        }
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let a = self.ineq.iter().map(|c| c.eval(x).max(0.0)).fold(0.0, f64::max);
        let b = self.eq.iter().map(|c| c.eval(x).abs()).fold(0.0, f64::max);
        a.max(b)
    }
}

/// Infinity norm of `P(x - g) - x`.
fn pg_norm(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(v, d)| ((v - d).clamp(0.0, 1.0) - v).abs())
        .fold(0.0, f64::max)
}

/// Spectral projected gradient with Armijo backtracking on the box. Returns
/// the final projected-gradient norm and whether the line search ran out of
/// precision before reaching `tol`.
fn minimize_box(al: &AugLag, x: &mut Vec<f64>, max_iter: usize, tol: f64) -> (f64, bool) {
    let len = x.len();
    let mut g = vec![0.0; len];
    al.grad(x, &mut g);
    let mut fx = al.value(x);
    let mut alpha = 1.0 / g.iter().fold(1e-12f64, |a, v| a.max(v.abs()));
    let mut trial = vec![0.0; len];
    let mut g_new = vec![0.0; len];
    for _ in 0..max_iter {
        if pg_norm(x, &g) <= tol {
            break;
        }
        let mut step = alpha;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..len {
                trial[i] = (x[i] - step * g[i]).clamp(0.0, 1.0);
            }
            let decrease: f64 = (0..len).map(|i| g[i] * (trial[i] - x[i])).sum();
            let f_trial = al.value(&trial);
            if f_trial <= fx + 1e-4 * decrease {
                fx = f_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (pg_norm(x, &g), true);
        }
        al.grad(&trial, &mut g_new);
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..len {
            let s = trial[i] - x[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { step * 2.0 };
        std::mem::swap(x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
    }
    (pg_norm(x, &g), false)
}

/// Moves every lifted product into its McCormick interval
/// `[max(0, psi + phi - 1), min(psi, phi)]`.
fn clamp_lifted(s: &mut ScaState) {
    for m in 0..s.n {
        for k in 0..s.n {
            for r in 0..s.nr {
                let f = s.phi[m * s.nr + r];
                for l in 0..s.nt {
                    let p = s.psi[k * s.nt + l];
                    let i = s.w_index(m, k, r, l);
                    let lo = (p + f - 1.0).max(0.0);
                    s.w_bar[i] = s.w_bar[i].max(lo).min(p.min(f));
                }
            }
        }
    }
}

/// Approximately minimizes the surrogate built at `state` over the convex
/// feasible set. Never returns a point with a larger surrogate value than
/// `state` itself.
pub fn solve_subproblem(
    state: &ScaState,
    surr: &Surrogates,
    gains: &EffectiveGains,
    sim: &SimConfig,
    config: &ScaConfig,
) -> Result<ScaState> {
    let sub = Subproblem {
        gains,
        sim,
        surr,
        shape: state.clone(),
        n_psi: state.psi.len(),
        n_phi: state.phi.len(),
    };
    let (ineq, eq) = sub.constraints();
    let mut al = AugLag {
        sub: &sub,
        ineq: &ineq,
        eq: &eq,
        y: vec![0.0; ineq.len()],
        z: vec![0.0; eq.len()],
        rho: config.al_penalty,
    };
    let mut x: Vec<f64> = state.psi.iter().chain(&state.phi).chain(&state.w_bar).cloned().collect();
    let mut viol = al.max_violation(&x);
    let mut pg = f64::INFINITY;
    let mut g0 = vec![0.0; x.len()];
    sub.objective_grad(&x, &mut g0);
    let pg_tol = config.pg_tolerance * g0.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for _ in 0..config.al_max_rounds {
        let (norm, stalled) = minimize_box(&al, &mut x, config.pg_max_iter, pg_tol);
        pg = norm;
        let new_viol = al.max_violation(&x);
        for (c, y) in ineq.iter().zip(al.y.iter_mut()) {
            *y = (*y + al.rho * c.eval(&x)).max(0.0);
        }
        for (c, z) in eq.iter().zip(al.z.iter_mut()) {
            *z += al.rho * c.eval(&x);
        }
        if new_viol > config.feas_tolerance && new_viol > 0.25 * viol {
            al.rho = (al.rho * 10.0).min(1e12);
        }
        viol = new_viol;
        if viol <= config.feas_tolerance && (pg <= pg_tol || stalled) {
            break;
        }
    }

    let mut out = sub.state_from(&x);
    clamp_lifted(&mut out);
    let viol = out.max_violation();
    if viol > config.feas_tolerance {
        return Err(Error::NonConvergence {
            iterations: config.al_max_rounds,
            max_violation: viol,
            grad_norm: pg,
        });
    }
    let before = surrogate_objective(state, surr, gains, sim);
    let after = surrogate_objective(&out, surr, gains, sim);
    if after > before {
        return Ok(state.clone());
    }
    Ok(out)
}

/// One row of the iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub outer: usize,
    pub inner: usize,
    /// Surrogate value after the subproblem.
    pub surrogate: f64,
    /// Objective value of the current outer iteration.
    pub eta: f64,
    pub theta: f64,
    pub delta: f64,
    pub max_violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaTrace {
    pub rows: Vec<TraceRow>,
}

impl ScaTrace {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "outer,inner,surrogate,eta,theta,delta,max_violation")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.outer, r.inner, r.surrogate, r.eta, r.theta, r.delta, r.max_violation
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut file).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))
    }
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct ScaOutcome {
    pub selection: BinarySelection,
    /// Last continuous iterate.
    pub state: ScaState,
    pub trace: ScaTrace,
}

/// Schedule read off a continuous iterate: pairs are visited by decreasing
/// activation mass `min(max phi row, max psi row)`, ties to the lower index,
/// and each is switched on at its row maxima when that raises the rate.
pub fn insertion_rounding(state: &ScaState, gains: &EffectiveGains, sim: &SimConfig) -> Result<BinarySelection> {
    let policy = state.policy()?;
    let argmax = |row: &[f64]| -> usize {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = i;
            }
        }
        best
    };
    let mut order: Vec<(usize, f64, usize, usize)> = (0..state.n)
        .map(|m| {
            let (rx, tx) = (argmax(policy.phi_row(m)), argmax(policy.psi_row(m)));
            (m, policy.phi(m, rx).min(policy.psi(m, tx)), rx, tx)
        })
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selection = BinarySelection::all_inactive(state.n);
    let mut rate = 0.0;
    for (m, mass, rx, tx) in order {
        if mass <= 0.0 {
            continue;
        }
        let mut trial = selection.clone();
        trial.0[m] = PairState::Active { rx, tx };
        let trial_rate = selection_wsr(gains, &trial, sim);
        if trial_rate > rate {
            selection = trial;
            rate = trial_rate;
        }
    }
    Ok(selection)
}

/// Binary point of `selection`, with exact lifted products and the weights
/// and counters of `state`.
fn binary_state(state: &ScaState, selection: &BinarySelection) -> Result<ScaState> {
    let p = selection_to_policy(selection, state.nr, state.nt)?;
    let mut out = ScaState {
        phi: p.phi_slice().to_vec(),
        psi: p.psi_slice().to_vec(),
        ..state.clone()
    };
    for m in 0..out.n {
        for k in 0..out.n {
            for r in 0..out.nr {
                for l in 0..out.nt {
                    let i = out.w_index(m, k, r, l);
                    out.w_bar[i] = out.phi[m * out.nr + r] * out.psi[k * out.nt + l];
                }
            }
        }
    }
    Ok(out)
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Runs both loops from [`init_state`] and rounds the final iterate.
pub fn run(gains: &EffectiveGains, sim: &SimConfig, config: &ScaConfig) -> Result<ScaOutcome> {
    config.validate()?;
    if sim.weights.len() != gains.n() {
        return Err(Error::invalid(format!(
            "config has {} pair weights for a {}-pair instance",
            sim.weights.len(),
            gains.n()
        )));
    }
    let mut state = init_state(gains.n(), gains.nr(), gains.nt())?;
    let mut trace = ScaTrace::default();
    let mut eta = true_objective(&state, gains, sim);
    state.surrogate = eta;

    for outer in 0..config.max_outer {
        state.outer_iter = outer;
        let mut prev = state.surrogate;
        for _ in 0..config.max_inner {
            let surr = taylor_surrogates(&state, gains, sim);
            let next = solve_subproblem(&state, &surr, gains, sim, config)?;
            let value = surrogate_objective(&next, &surr, gains, sim);
            state = ScaState {
                inner_iter: state.inner_iter + 1,
                surrogate: value,
                ..next
            };
            trace.rows.push(TraceRow {
                outer,
                inner: state.inner_iter,
                surrogate: value,
                eta,
                theta: state.theta,
                delta: state.delta,
                max_violation: state.max_violation(),
            });
            let done = relative_change(value, prev) <= config.tolerance;
            prev = value;
            if done {
                break;
            }
        }
        state.theta += config.step * state.psi.iter().map(|x| x * (1.0 - x)).sum::<f64>();
        state.delta += config.step * state.phi.iter().map(|x| x * (1.0 - x)).sum::<f64>();
        let mut new_eta = true_objective(&state, gains, sim);
        if config.rounding_moves {
            let rounded = binary_state(&state, &insertion_rounding(&state, gains, sim)?)?;
            let value = true_objective(&rounded, gains, sim);
            if value < new_eta {
                state = rounded;
                new_eta = value;
            }
        }
        let done = relative_change(new_eta, eta) <= config.tolerance;
        eta = new_eta;
        state.surrogate = eta;
        if done {
            break;
        }
    }
    let selection = round_policy(&state.policy()?, config.round_threshold);
    Ok(ScaOutcome { selection, state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::exhaustive_search;
    use crate::channel::Codebook;
    use crate::problem::violations;
    use crate::rng::RngState;
    use crate::sample::Sample;

    fn instance(n: usize, nt: usize, nr: usize, seed: u64) -> (SimConfig, EffectiveGains) {
        let sim = SimConfig::new(n, nt, nr, 2, 5.0, (4.0, 5.0), 0.0).unwrap();
        let mut rng = RngState::seed_from(seed, 0);
        let s = Sample::generate(&sim, &Codebook::dft(nt, nr), &mut rng).unwrap();
        (sim, s.gains)
    }

    /// Feasible point: row sums equal per pair, lifted values inside their
    /// McCormick intervals.
    fn random_feasible(n: usize, nr: usize, nt: usize, rng: &mut RngState) -> ScaState {
        let mut s = init_state(n, nr, nt).unwrap();
        for m in 0..n {
            let total = rng.next_uniform();
            let mut row = |len: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..len).map(|_| rng.next_uniform() + 1e-3).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|x| total * x / sum).collect()
            };
            let tx = row(nt);
            let rx = row(nr);
            s.psi[m * nt..(m + 1) * nt].copy_from_slice(&tx);
            s.phi[m * nr..(m + 1) * nr].copy_from_slice(&rx);
        }
        for m in 0..n {
            for k in 0..n {
                for r in 0..nr {
                    for l in 0..nt {
                        let (f, p) = (s.phi[m * nr + r], s.psi[k * nt + l]);
                        let lo = (f + p - 1.0).max(0.0);
                        let i = s.w_index(m, k, r, l);
                        s.w_bar[i] = lo + (f.min(p) - lo) * rng.next_uniform();
                    }
                }
            }
        }
        s.theta = rng.uniform_in(0.0, 2.0);
        s.delta = rng.uniform_in(0.0, 2.0);
        s
    }

    #[test]
    fn initial_point_is_one_hot_and_feasible() {
        let s = init_state(3, 2, 4).unwrap();
        assert_eq!((s.theta, s.delta), (0.0, 0.0));
        assert_eq!(s.max_violation(), 0.0);
        let p = s.policy().unwrap();
        let v = violations(&p);
        assert_eq!(v.max_abs(), 0.0);
        assert!(init_state(0, 1, 1).is_err());
    }

    #[test]
    fn initial_objective_is_single_pair_rate() {
        let (sim, gains) = instance(3, 2, 2, 1);
        let s = init_state(3, 2, 2).unwrap();
        let surr = taylor_surrogates(&s, &gains, &sim);
        let expected = -(1.0 + sim.tx_power * gains.get(0, 0, 0, 0) / sim.noise_power).log2();
        assert!((surrogate_objective(&s, &surr, &gains, &sim) - expected).abs() < 1e-12);
        assert!((true_objective(&s, &gains, &sim) - expected).abs() < 1e-12);
    }

    #[test]
    fn dc_difference_is_binary_gap() {
        let binary = [0.0, 1.0, 1.0, 0.0];
        let d = dc_terms(&binary, &binary, 3.0, 2.0);
        assert!((d.g1 - d.h1).abs() < 1e-12 && (d.g2 - d.h2).abs() < 1e-12);
        let d = dc_terms(&[0.0], &[0.5, 0.0], 0.0, 1.0);
        assert_eq!(d.g1 - d.h1, 0.0);
        let d = dc_terms(&[0.0], &[0.5, 0.0], 1.0, 0.0);
        assert!((d.g1 - d.h1 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn surrogates_anchor_and_bound() {
        let (sim, gains) = instance(3, 2, 2, 2);
        let mut rng = RngState::seed_from(2, 5);
        for _ in 0..20 {
            let anchor = random_feasible(3, 2, 2, &mut rng);
            let surr = taylor_surrogates(&anchor, &gains, &sim);
            let dc = dc_terms(&anchor.phi, &anchor.psi, anchor.theta, anchor.delta);
            assert!((surr.h1_bar(&anchor.psi) - dc.h1).abs() < 1e-12);
            assert!((surr.h2_bar(&anchor.phi) - dc.h2).abs() < 1e-12);
            let (s, t) = (surrogate_objective(&anchor, &surr, &gains, &sim), true_objective(&anchor, &gains, &sim));
            assert!((s - t).abs() <= 1e-12 * t.abs().max(1.0));
            for _ in 0..50 {
                let mut probe = random_feasible(3, 2, 2, &mut rng);
                probe.theta = anchor.theta;
                probe.delta = anchor.delta;
                let dc = dc_terms(&probe.phi, &probe.psi, probe.theta, probe.delta);
                assert!(surr.h1_bar(&probe.psi) <= dc.h1 + 1e-10);
                assert!(surr.h2_bar(&probe.phi) <= dc.h2 + 1e-10);
                for m in 0..3 {
                    for r in 0..2 {
                        let q = q_value(&gains, &sim, &probe, &probe.w_bar, m, r);
                        assert!(surr.q_bar(&gains, &sim, &probe, &probe.w_bar, m, r) >= q - 1e-10);
                    }
                }
                let s = surrogate_objective(&probe, &surr, &gains, &sim);
                assert!(s >= true_objective(&probe, &gains, &sim) - 1e-10);
            }
        }
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let (sim, gains) = instance(2, 2, 2, 3);
        let mut rng = RngState::seed_from(3, 1);
        let anchor = random_feasible(2, 2, 2, &mut rng);
        let point = random_feasible(2, 2, 2, &mut rng);
        let surr = taylor_surrogates(&anchor, &gains, &sim);
        let sub = Subproblem {
            gains: &gains,
            sim: &sim,
            surr: &surr,
            shape: ScaState {
                theta: anchor.theta,
                delta: anchor.delta,
                ..point.clone()
            },
            n_psi: 4,
            n_phi: 4,
        };
        let x: Vec<f64> = point.psi.iter().chain(&point.phi).chain(&point.w_bar).cloned().collect();
        let mut g = vec![0.0; x.len()];
        sub.objective_grad(&x, &mut g);
        for i in 0..x.len() {
            let h = 1e-6;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let num = (sub.objective(&up) - sub.objective(&down)) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(1.0), "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn single_link_turns_fully_on() {
        let gains = EffectiveGains::from_fn(1, 1, 1, |_, _, _, _| 0.8).unwrap();
        let sim = SimConfig::new(1, 1, 1, 2, 5.0, (1.0, 2.0), 10.0).unwrap();
        let mut s = init_state(1, 1, 1).unwrap();
        s.psi[0] = 0.3;
        s.phi[0] = 0.3;
        s.w_bar[0] = 0.1;
        let surr = taylor_surrogates(&s, &gains, &sim);
        let out = solve_subproblem(&s, &surr, &gains, &sim, &ScaConfig::default()).unwrap();
        for v in [out.psi[0], out.phi[0], out.w_bar[0]] {
            assert!((v - 1.0).abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn optimal_input_is_returned() {
        let gains = EffectiveGains::from_fn(1, 1, 1, |_, _, _, _| 0.8).unwrap();
        let sim = SimConfig::new(1, 1, 1, 2, 5.0, (1.0, 2.0), 10.0).unwrap();
        let s = init_state(1, 1, 1).unwrap();
        let surr = taylor_surrogates(&s, &gains, &sim);
        let out = solve_subproblem(&s, &surr, &gains, &sim, &ScaConfig::default()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn subproblem_exit_is_feasible() {
        for seed in 0..5 {
            let (sim, gains) = instance(2, 2, 2, 10 + seed);
            let mut rng = RngState::seed_from(seed, 3);
            let s = random_feasible(2, 2, 2, &mut rng);
            let surr = taylor_surrogates(&s, &gains, &sim);
            let out = solve_subproblem(&s, &surr, &gains, &sim, &ScaConfig::default()).unwrap();
            assert!(out.max_mccormick_residual() <= 1e-6);
            assert!(out.max_violation() <= 1e-6);
            assert!(surrogate_objective(&out, &surr, &gains, &sim) <= surrogate_objective(&s, &surr, &gains, &sim));
        }
    }

    #[test]
    fn run_is_monotone_and_ends_binary() {
        let (sim, gains) = instance(2, 2, 2, 20);
        let out = run(&gains, &sim, &ScaConfig::default()).unwrap();
        let mut last: Option<(usize, f64)> = None;
        for row in &out.trace.rows {
            if let Some((outer, v)) = last {
                if outer == row.outer {
                    assert!(row.surrogate <= v + 1e-9 * v.abs().max(1.0));
                }
            }
            last = Some((row.outer, row.surrogate));
        }
        let thetas: Vec<f64> = out.trace.rows.iter().map(|r| r.theta).collect();
        assert!(thetas.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.state.mean_binary_gap() <= 1e-3, "{}", out.state.mean_binary_gap());
        let p = selection_to_policy(&out.selection, 2, 2).unwrap();
        assert_eq!(violations(&p).max_abs(), 0.0);
    }

    #[test]
    fn dominant_interference_keeps_one_link() {
        let gains = EffectiveGains::from_fn(2, 2, 2, |m, r, n, l| {
            if m == n {
                if r == 1 && l == 1 {
                    1.0
                } else {
                    0.05
                }
            } else {
                50.0
            }
        })
        .unwrap();
        let sim = SimConfig::new(2, 2, 2, 2, 5.0, (1.0, 2.0), 10.0).unwrap();
        let (best, _) = exhaustive_search(&gains, &sim).unwrap();
        assert_eq!(best.active_count(), 1);
        let out = run(&gains, &sim, &ScaConfig::default()).unwrap();
        assert_eq!(out.selection.active_count(), 1);
        assert!(selection_wsr(&gains, &out.selection, &sim) > 0.0);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (sim, gains) = instance(2, 2, 2, 21);
        let out = run(&gains, &sim, &ScaConfig::default()).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("outer,inner,surrogate,eta,theta,delta,max_violation\n"));
        assert_eq!(text.lines().count(), out.trace.rows.len() + 1);
    }
}
