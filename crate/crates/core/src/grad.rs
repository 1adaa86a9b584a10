//! Exact gradients of the training loss with respect to every model
//! parameter, the optimizer steps, and a central-difference checker.
//!
//! The loss of one sample is the partial Lagrangian evaluated at the policy
//! the model produces from the default starting policy; a batch loss is the
//! plain sum over its samples.

use rayon::prelude::*;

use crate::channel::SimConfig;
use crate::error::{Error, Result};
use crate::gblinks::{self, Fingerprint, ModelParams};
use crate::problem::{lagrangian_loss, lagrangian_loss_grad, BeamPolicy, DualMultipliers};
use crate::rng::RngState;
use crate::sample::Sample;

/// Samples per partial sum in reproducible mode. Fixed so the reduction tree
/// does not depend on the thread count.
const REPRO_CHUNK: usize = 4;

/// Result of a batch evaluation.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub loss: f64,
    pub grads: ModelParams,
    /// Continuous output policy of each sample, in batch order.
    pub policies: Vec<BeamPolicy>,
}

fn check_sample(params: &ModelParams, sample: &Sample, duals: &DualMultipliers, config: &SimConfig) -> Result<()> {
    let spec = params.spec();
    let n = sample.n();
    if sample.gains.nt() != spec.nt || sample.gains.nr() != spec.nr {
        return Err(Error::invalid(format!(
            "sample has nt={}, nr={} but model expects nt={}, nr={}",
            sample.gains.nt(),
            sample.gains.nr(),
            spec.nt,
            spec.nr
        )));
    }
    if config.weights.len() != n {
        return Err(Error::invalid(format!(
            "config has {} pair weights for a {n}-pair sample",
            config.weights.len()
        )));
    }
    if duals.nu.len() != n || duals.lambda.len() != n * spec.nt || duals.mu.len() != n * spec.nr {
        return Err(Error::invalid("multiplier shapes do not match the sample"));
    }
    Ok(())
}

/// Adds the gradient of one sample's loss into `grads`; returns the loss and
/// the output policy.
pub fn accumulate_sample(
    params: &ModelParams,
    sample: &Sample,
    duals: &DualMultipliers,
    config: &SimConfig,
    grads: &mut ModelParams,
) -> Result<(f64, BeamPolicy)> {
    check_sample(params, sample, duals, config)?;
    let spec = params.spec();
    let init = gblinks::default_init(sample.n(), spec.nr, spec.nt);
    let (policy, trace) = gblinks::forward_traced(params, &sample.features, &init, None)?;
    let pg = lagrangian_loss_grad(&sample.gains, &policy, duals, config);
    gblinks::backward(params, &trace, &pg.d_phi, &pg.d_psi, grads);
    Ok((pg.loss, policy))
}

fn accumulate_run(
    params: &ModelParams,
    samples: &[Sample],
    duals: &DualMultipliers,
    config: &SimConfig,
) -> Result<(f64, ModelParams, Vec<BeamPolicy>)> {
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut policies = Vec::with_capacity(samples.len());
    for s in samples {
        let (l, p) = accumulate_sample(params, s, duals, config, &mut grads)?;
        loss += l;
        policies.push(p);
    }
    Ok((loss, grads, policies))
}

/// Summed loss and its exact gradient over `batch`.
///
/// Samples are processed concurrently. With `reproducible` set the partial
/// sums are formed over fixed-size runs of consecutive samples and combined
/// in sample order, so the result is bit-identical for any thread count.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[Sample],
    duals: &DualMultipliers,
    config: &SimConfig,
    reproducible: bool,
) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let chunk = if reproducible {
        REPRO_CHUNK
    } else {
        batch.len().div_ceil(rayon::current_num_threads()).max(1)
    };
    let partials = batch
        .par_chunks(chunk)
        .map(|run| accumulate_run(params, run, duals, config))
        .collect::<Result<Vec<_>>>()?;
    let mut parts = partials.into_iter();
    let (mut loss, mut grads, mut policies) = parts.next().expect("batch is nonempty");
    for (l, g, p) in parts {
        loss += l;
        grads.add_assign(&g);
        policies.extend(p);
    }
    Ok(BatchGrad { loss, grads, policies })
}

/// Loss of one sample together with the kink pattern of its evaluation.
pub fn loss_fingerprint(
    params: &ModelParams,
    sample: &Sample,
    duals: &DualMultipliers,
    config: &SimConfig,
) -> Result<(f64, u64)> {
    check_sample(params, sample, duals, config)?;
    let spec = params.spec();
    let init = gblinks::default_init(sample.n(), spec.nr, spec.nt);
    let mut fp = Fingerprint::default();
    let (policy, _) = gblinks::forward_traced(params, &sample.features, &init, Some(&mut fp))?;
    for m in 0..policy.n() {
        let tx: f64 = policy.psi_row(m).iter().sum();
        let rx: f64 = policy.phi_row(m).iter().sum();
        fp.mix((tx > 1.0) as u64 | ((rx > 1.0) as u64) << 1 | ((tx > rx) as u64) << 2 | ((tx < rx) as u64) << 3);
    }
    Ok((lagrangian_loss(&sample.gains, &policy, duals, config), fp.value()))
}

/// Optimizer used for the primal updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient step, kept for ablations.
    Sgd,
}

/// Moment estimates of the Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update with learning rate `zeta`.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, zeta: f64) -> Result<()> {
    if params.spec() != grads.spec() || state.m.len() != params.len() {
        return Err(Error::invalid("parameter, gradient and optimizer shapes differ"));
    }
    if !(zeta > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {zeta}")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((x, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *x -= zeta * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}

/// `params -= zeta * grads`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, zeta: f64) -> Result<()> {
    if params.spec() != grads.spec() {
        return Err(Error::invalid("parameter and gradient shapes differ"));
    }
    if !(zeta > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {zeta}")));
    }
    params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .for_each(|(x, g)| *x -= zeta * g);
    Ok(())
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters drawn but dropped because a `±h` move crossed a kink.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `eval`, where
/// `eval(i, delta)` returns the loss with parameter `i` shifted by `delta`
/// and a fingerprint of the kinks met on the way. A parameter is dropped
/// when either shifted evaluation lands in a different smooth piece than the
/// unshifted one. Parameters are drawn without replacement until `count`
/// have been compared or all have been tried.
pub fn finite_diff_check_with<F>(analytic: &[f64], mut eval: F, h: f64, count: usize, rng: &mut RngState) -> Result<FdReport>
where
    F: FnMut(usize, f64) -> Result<(f64, u64)>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let (_, base_fp) = eval(0, 0.0)?;
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    let mut report = FdReport {
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut total = 0.0;
    for k in 0..order.len() {
        if report.checked == count {
            break;
        }
        let j = k + rng.next_index(order.len() - k);
        order.swap(k, j);
        let i = order[k];
        let (up, fp_up) = eval(i, h)?;
        let (down, fp_down) = eval(i, -h)?;
        if fp_up != base_fp || fp_down != base_fp {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(err);
        total += err;
        report.checked += 1;
    }
    if report.checked > 0 {
        report.mean_rel_err = total / report.checked as f64;
    }
    Ok(report)
}

/// Finite-difference check of [`loss_and_grad`] on a single sample.
pub fn finite_diff_check(
    params: &ModelParams,
    sample: &Sample,
    duals: &DualMultipliers,
    config: &SimConfig,
    h: f64,
    count: usize,
    rng: &mut RngState,
) -> Result<FdReport> {
    let mut grads = params.zeros_like();
    accumulate_sample(params, sample, duals, config, &mut grads)?;
    let mut work = params.clone();
    finite_diff_check_with(
        grads.as_slice(),
        |i, delta| {
            let orig = work.as_slice()[i];
            work.as_mut_slice()[i] = orig + delta;
            let out = loss_fingerprint(&work, sample, duals, config);
            work.as_mut_slice()[i] = orig;
            out
        },
        h,
        count,
        rng,
    )
}
