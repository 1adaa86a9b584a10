//! Primal-dual training: minibatch optimizer steps on the network weights
//! with the multipliers frozen for the epoch, then one subgradient ascent step
//! on the multipliers from the residuals summed over the epoch.

use std::io::Write;
use std::path::Path;

use crate::channel::SimConfig;
use crate::error::{Error, Result};
use crate::grad::{adam_step, loss_and_grad, sgd_step, AdamState, Optimizer};
use crate::gblinks::ModelParams;
use crate::problem::{round_policy, selection_wsr, violations, DualMultipliers, ViolationReport};
use crate::rng::RngState;
use crate::sample::Sample;

/// Stream id reserved for the shuffling generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the primal optimizer.
    pub zeta: f64,
    /// Multiplier steps, in the order `(lambda, mu, nu, xi, rho_dual)`.
    pub dual_steps: [f64; 5],
    pub seed: u64,
    pub reproducible: bool,
    /// Reshuffle the sample order every epoch. Off by default: batches are
    /// runs of consecutive samples.
    pub shuffle: bool,
    pub optimizer: Optimizer,
    /// Threshold used when rounding policies for the reported rate.
    pub round_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 20,
            zeta: 1e-3,
            dual_steps: [1e-6; 5],
            seed: 0,
            reproducible: true,
            shuffle: false,
            optimizer: Optimizer::Adam,
            round_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.zeta)));
        }
        if self.dual_steps.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("multiplier steps must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-epoch training curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss.
    pub loss: Vec<f64>,
    /// Mean rate of the rounded policies.
    pub wsr: Vec<f64>,
    /// Mean raw residual of each constraint family, per entry and sample.
    pub violation: Vec<[f64; 5]>,
    /// Multiplier norms after the epoch's ascent step.
    pub dual_norms: Vec<[f64; 5]>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "epoch,loss,wsr,viol_binary_tx,viol_binary_rx,viol_row_tx,viol_row_rx,viol_coupling,\
             norm_lambda,norm_mu,norm_nu,norm_xi,norm_rho"
        )?;
        for e in 0..self.epochs() {
            write!(out, "{},{},{}", e, self.loss[e], self.wsr[e])?;
            for v in self.violation[e].iter().chain(&self.dual_norms[e]) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut file).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))
    }
}

/// One ascent step: every multiplier moves by its step times its summed
/// residual.
pub fn dual_update(duals: &DualMultipliers, accumulated: &ViolationReport, steps: &[f64; 5]) -> Result<DualMultipliers> {
    if !duals.is_nonnegative() {
        return Err(Error::invalid("multipliers must be nonnegative"));
    }
    let shapes_match = duals.lambda.len() == accumulated.binary_tx.len()
        && duals.mu.len() == accumulated.binary_rx.len()
        && duals.nu.len() == accumulated.row_tx.len()
        && duals.xi.len() == accumulated.row_rx.len()
        && duals.rho_dual.len() == accumulated.coupling.len();
    if !shapes_match {
        return Err(Error::invalid("multiplier and residual shapes differ"));
    }
    let step = |d: &[f64], a: &[f64], s: f64| -> Vec<f64> { d.iter().zip(a).map(|(x, g)| (x + s * g).max(0.0)).collect() };
    Ok(DualMultipliers {
        lambda: step(&duals.lambda, &accumulated.binary_tx, steps[0]),
        mu: step(&duals.mu, &accumulated.binary_rx, steps[1]),
        nu: step(&duals.nu, &accumulated.row_tx, steps[2]),
        xi: step(&duals.xi, &accumulated.row_rx, steps[3]),
        rho_dual: step(&duals.rho_dual, &accumulated.coupling, steps[4]),
    })
}

/// Trains `model` on `dataset`; also returns the final multipliers.
pub fn train_with_duals(
    dataset: &[Sample],
    model: ModelParams,
    sim: &SimConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainReport, &DualMultipliers),
) -> Result<(ModelParams, TrainReport, DualMultipliers)> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::invalid("empty dataset"))?;
    let (n, nr, nt) = (first.n(), first.gains.nr(), first.gains.nt());
    let spec = model.spec();
    if spec.nt != nt || spec.nr != nr {
        return Err(Error::invalid(format!(
            "model expects nt={}, nr={} but the data has nt={nt}, nr={nr}",
            spec.nt, spec.nr
        )));
    }
    if dataset.iter().any(|s| s.n() != n || s.gains.nt() != nt || s.gains.nr() != nr) {
        return Err(Error::invalid("samples in a dataset must share dimensions"));
    }

    let mut params = model;
    let mut duals = DualMultipliers::zeros(n, nr, nt);
    let mut adam = AdamState::new(&params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffler = RngState::seed_from(config.seed, SHUFFLE_STREAM);
    let count = dataset.len() as f64;

    for epoch in 0..config.epochs {
        if config.shuffle {
            for k in (1..order.len()).rev() {
                order.swap(k, shuffler.next_index(k + 1));
            }
        }
        let mut acc = ViolationReport::zeros(n, nr, nt);
        let mut loss = 0.0;
        let mut wsr = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let out = loss_and_grad(&params, &batch, &duals, sim, config.reproducible)?;
            match config.optimizer {
                Optimizer::Adam => adam_step(&mut params, &out.grads, &mut adam, config.zeta)?,
                Optimizer::Sgd => sgd_step(&mut params, &out.grads, config.zeta)?,
            }
            loss += out.loss;
            for (sample, policy) in batch.iter().zip(&out.policies) {
                acc.accumulate(&violations(policy));
                wsr += selection_wsr(&sample.gains, &round_policy(policy, config.round_threshold), sim);
            }
        }
        duals = dual_update(&duals, &acc, &config.dual_steps)?;
        report.loss.push(loss / count);
        report.wsr.push(wsr / count);
        report.violation.push(acc.means().map(|v| v / count));
        report.dual_norms.push(duals.norms());
        on_epoch(epoch, &report, &duals);
    }
    Ok((params, report, duals))
}

/// Runs the configured number of epochs and returns the trained model with
/// its curves. Multipliers start at zero.
pub fn train(dataset: &[Sample], model: ModelParams, sim: &SimConfig, config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let (params, report, _) = train_with_duals(dataset, model, sim, config, |_, _, _| {})?;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Codebook;
    use crate::gblinks::ModelSpec;
    use crate::grad::loss_fingerprint;
    use crate::problem::weighted_sum_rate;

    fn data(seed: u64, count: usize) -> (SimConfig, Vec<Sample>, ModelParams) {
        let sim = SimConfig::new(3, 2, 2, 2, 10.0, (2.0, 5.0), 5.0).unwrap();
        let codebook = Codebook::dft(2, 2);
        let mut rng = RngState::seed_from(seed, 0);
        let samples = (0..count).map(|_| Sample::generate(&sim, &codebook, &mut rng).unwrap()).collect();
        let spec = ModelSpec::with_hidden(2, 2, 2, &[12], 6).unwrap();
        let params = ModelParams::init(spec, &mut RngState::seed_from(seed, 1)).unwrap();
        (sim, samples, params)
    }

    #[test]
    fn zero_residual_keeps_multipliers() {
        let mut d = DualMultipliers::zeros(2, 2, 2);
        d.nu[1] = 0.7;
        let out = dual_update(&d, &ViolationReport::zeros(2, 2, 2), &[1e-6; 5]).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn single_half_entry_step() {
        let policy = crate::problem::BeamPolicy::from_raw(1, 1, 1, vec![0.0], vec![0.5]).unwrap();
        let out = dual_update(&DualMultipliers::zeros(1, 1, 1), &violations(&policy), &[1e-6; 5]).unwrap();
        assert!((out.lambda[0] - 2.5e-7).abs() < 1e-22);
    }

    #[test]
    fn negative_multipliers_rejected() {
        let mut d = DualMultipliers::zeros(1, 1, 1);
        d.xi[0] = -1.0;
        assert!(dual_update(&d, &ViolationReport::zeros(1, 1, 1), &[1e-6; 5]).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (sim, samples, params) = data(1, 4);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, report) = train(&samples, params.clone(), &sim, &cfg).unwrap();
        assert_eq!(out, params);
        assert_eq!(report.epochs(), 0);
    }

    #[test]
    fn zero_dual_steps_train_on_negative_rate() {
        let (sim, samples, params) = data(2, 6);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            dual_steps: [0.0; 5],
            ..TrainConfig::default()
        };
        let (_, report, duals) = train_with_duals(&samples, params.clone(), &sim, &cfg, |_, _, d| {
            assert!(d.norms().iter().all(|&x| x == 0.0));
        })
        .unwrap();
        assert!(duals.norms().iter().all(|&x| x == 0.0));
        // with zero multipliers the loss is -WSR of the raw policy
        let zero = DualMultipliers::zeros(3, 2, 2);
        let s = &samples[0];
        let init = crate::gblinks::default_init(3, 2, 2);
        let policy = crate::gblinks::forward(&params, &s.features, &init).unwrap();
        let (l, _) = loss_fingerprint(&params, s, &zero, &sim).unwrap();
        assert_eq!(l, -weighted_sum_rate(&s.gains, &policy, &sim));
        assert_eq!(report.epochs(), 3);
    }

    #[test]
    fn multipliers_nonnegative_and_nondecreasing() {
        let (sim, samples, params) = data(3, 10);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 3,
            dual_steps: [0.05; 5],
            ..TrainConfig::default()
        };
        let mut prev = DualMultipliers::zeros(3, 2, 2);
        train_with_duals(&samples, params, &sim, &cfg, |_, _, d| {
            assert!(d.is_nonnegative());
            let pairs = [
                (&prev.lambda, &d.lambda),
                (&prev.mu, &d.mu),
                (&prev.nu, &d.nu),
                (&prev.xi, &d.xi),
                (&prev.rho_dual, &d.rho_dual),
            ];
            for (a, b) in pairs {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| y >= x));
            }
            prev = d.clone();
        })
        .unwrap();
    }

    #[test]
    fn reproducible_runs_agree() {
        let (sim, samples, params) = data(4, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            shuffle: true,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&samples, params.clone(), &sim, &cfg).unwrap();
        let b = train(&samples, params, &sim, &cfg).unwrap();
        assert_eq!(a, b);
        let mut csv = Vec::new();
        a.1.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn mismatched_model_rejected() {
        let (sim, samples, _) = data(5, 2);
        let spec = ModelSpec::with_hidden(4, 4, 1, &[4], 2).unwrap();
        let params = ModelParams::zeros(spec).unwrap();
        assert!(train(&samples, params, &sim, &TrainConfig::default()).is_err());
        let (_, _, params) = data(5, 2);
        assert!(train(&[], params, &sim, &TrainConfig::default()).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let (sim, samples, params) = data(6, 2);
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                zeta: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&samples, params.clone(), &sim, &cfg).is_err());
        }
    }
}
