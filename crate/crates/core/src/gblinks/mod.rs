//! Graph-neural scheduler.
//!
//! Each graph layer reads the previous beam policy and produces a new one
//! for every vertex at once:
//!
//! * **aggregate**: for every neighbor `n != m`, the message network maps
//!   `(kappa[n][n], kappa[m][n], kappa[n][m], phi[m,:], psi[m,:])` to a
//!   width-`f` message; the element-wise max and mean over neighbors are
//!   concatenated into a width-`2f` summary.
//! * **combine**: the transmit network maps `(summary, kappa[m][m],
//!   psi[m,:])` to the new transmit row and the receive network maps
//!   `(summary, kappa[m][m], phi[m,:])` to the new receive row, both clamped
//!   to `[0, 1]`.
//!
//! Per layer and per vertex the cost is `(N - 1)` message-network passes plus
//! one pass of each update network, so a forward pass is linear in `K` and
//! quadratic in `N`.

mod mlp;
pub mod params;

pub use params::{MlpKind, MlpSpec, ModelParams, ModelSpec, OutputActivation};

use crate::error::{Error, Result};
use crate::graph::GraphFeatures;
use crate::problem::BeamPolicy;
use mlp::MlpTrace;

/// Box projection `max(0, min(u, 1))`.
#[inline]
pub fn project(u: f64) -> f64 {
    u.min(1.0).max(0.0)
}

/// Starting policy: every entry at the box midpoint.
pub fn default_init(n: usize, nr: usize, nt: usize) -> BeamPolicy {
    BeamPolicy::filled(n, nr, nt, 0.5)
}

/// Running hash of every kink decision taken by a forward pass (ReLU signs,
/// projection regions, max-reduction winners). Two parameter settings with
/// equal fingerprints lie in the same smooth piece of the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(0xCBF2_9CE4_8422_2325)
    }
}

impl Fingerprint {
    #[inline]
    pub fn mix(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(29);
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

fn check_dims(params: &ModelParams, features: &GraphFeatures, policy: &BeamPolicy) -> Result<()> {
    let spec = params.spec();
    if features.nt() != spec.nt || features.nr() != spec.nr {
        return Err(Error::invalid(format!(
            "features built for nt={}, nr={} but model expects nt={}, nr={}",
            features.nt(),
            features.nr(),
            spec.nt,
            spec.nr
        )));
    }
    if policy.n() != features.n() || policy.nt() != spec.nt || policy.nr() != spec.nr {
        return Err(Error::invalid("policy shape does not match features"));
    }
    Ok(())
}

fn message_input(features: &GraphFeatures, prev: &BeamPolicy, m: usize, n: usize) -> Vec<f64> {
    let d = features.dim();
    let mut x = Vec::with_capacity(3 * d + prev.nr() + prev.nt());
    x.extend_from_slice(features.get(n, n));
    x.extend_from_slice(features.get(m, n));
    x.extend_from_slice(features.get(n, m));
    x.extend_from_slice(prev.phi_row(m));
    x.extend_from_slice(prev.psi_row(m));
    x
}

fn update_input(agg: &[f64], features: &GraphFeatures, own_row: &[f64], m: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(agg.len() + features.dim() + own_row.len());
    x.extend_from_slice(agg);
    x.extend_from_slice(features.get(m, m));
    x.extend_from_slice(own_row);
    x
}

#[derive(Clone, Debug, Default)]
struct VertexTrace {
    messages: Vec<MlpTrace>,
    /// Index into `messages` of the winner of each max slot.
    argmax: Vec<usize>,
    tx: MlpTrace,
    rx: MlpTrace,
}

/// Recorded forward pass of the whole model.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    layers: Vec<Vec<VertexTrace>>,
}

fn aggregate_impl(
    params: &ModelParams,
    layer: usize,
    features: &GraphFeatures,
    prev: &BeamPolicy,
    m: usize,
    mut trace: Option<&mut VertexTrace>,
    mut fp: Option<&mut Fingerprint>,
) -> Vec<f64> {
    let f = params.spec().f;
    let slots = params.slots(layer, MlpKind::Aggregate);
    let n_total = features.n();
    let mut max = vec![0.0; f];
    let mut sum = vec![0.0; f];
    let mut argmax = vec![0usize; f];
    let mut count = 0usize;
    for n in (0..n_total).filter(|&n| n != m) {
        let mut msg_trace = trace.as_ref().map(|_| MlpTrace::default());
        let msg = mlp::forward(
            params.as_slice(),
            slots,
            OutputActivation::Relu,
            message_input(features, prev, m, n),
            msg_trace.as_mut(),
            fp.as_deref_mut(),
        );
        for e in 0..f {
            if count == 0 || msg[e] > max[e] {
                max[e] = msg[e];
                argmax[e] = count;
            }
            sum[e] += msg[e];
        }
        if let (Some(t), Some(mt)) = (trace.as_deref_mut(), msg_trace) {
            t.messages.push(mt);
        }
        count += 1;
    }
    if let Some(fp) = fp {
        argmax.iter().for_each(|&a| fp.mix(a as u64));
    }
    if let Some(t) = trace {
        t.argmax = argmax;
    }
    let mut agg = max;
    if count > 0 {
        agg.extend(sum.iter().map(|s| s / count as f64));
    } else {
        agg.resize(2 * f, 0.0);
    }
    agg
}

/// Neighbor summary of vertex `m` in graph layer `layer`: element-wise max
/// then mean of the messages from all other vertices. A single-vertex graph
/// yields zeros.
pub fn aggregate(
    params: &ModelParams,
    layer: usize,
    features: &GraphFeatures,
    prev: &BeamPolicy,
    m: usize,
) -> Result<Vec<f64>> {
    check_dims(params, features, prev)?;
    check_index(params, layer, features, m)?;
    Ok(aggregate_impl(params, layer, features, prev, m, None, None))
}

fn check_index(params: &ModelParams, layer: usize, features: &GraphFeatures, m: usize) -> Result<()> {
    if layer >= params.spec().k || m >= features.n() {
        return Err(Error::invalid(format!(
            "layer {layer} / vertex {m} out of range (k={}, n={})",
            params.spec().k,
            features.n()
        )));
    }
    Ok(())
}

fn combine_impl(
    params: &ModelParams,
    layer: usize,
    agg: &[f64],
    features: &GraphFeatures,
    prev: &BeamPolicy,
    m: usize,
    trace: Option<&mut VertexTrace>,
    mut fp: Option<&mut Fingerprint>,
) -> (Vec<f64>, Vec<f64>) {
    let (tx_trace, rx_trace) = match trace {
        Some(t) => (Some(&mut t.tx), Some(&mut t.rx)),
        None => (None, None),
    };
    let tx = mlp::forward(
        params.as_slice(),
        params.slots(layer, MlpKind::Transmit),
        OutputActivation::Project,
        update_input(agg, features, prev.psi_row(m), m),
        tx_trace,
        fp.as_deref_mut(),
    );
    let rx = mlp::forward(
        params.as_slice(),
        params.slots(layer, MlpKind::Receive),
        OutputActivation::Project,
        update_input(agg, features, prev.phi_row(m), m),
        rx_trace,
        fp,
    );
    (tx, rx)
}

/// New `(transmit row, receive row)` of vertex `m` from its neighbor summary.
pub fn combine(
    params: &ModelParams,
    layer: usize,
    agg: &[f64],
    features: &GraphFeatures,
    prev: &BeamPolicy,
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(params, features, prev)?;
    check_index(params, layer, features, m)?;
    if agg.len() != 2 * params.spec().f {
        return Err(Error::invalid(format!(
            "summary has width {}, expected {}",
            agg.len(),
            2 * params.spec().f
        )));
    }
    Ok(combine_impl(params, layer, agg, features, prev, m, None, None))
}

fn run(
    params: &ModelParams,
    features: &GraphFeatures,
    init: &BeamPolicy,
    mut trace: Option<&mut ForwardTrace>,
    mut fp: Option<&mut Fingerprint>,
) -> BeamPolicy {
    let n = features.n();
    let mut policy = init.clone();
    for layer in 0..params.spec().k {
        let mut next = policy.clone();
        let mut layer_trace = Vec::new();
        for m in 0..n {
            let mut vt = trace.as_ref().map(|_| VertexTrace::default());
            let agg = aggregate_impl(params, layer, features, &policy, m, vt.as_mut(), fp.as_deref_mut());
            let (tx, rx) = combine_impl(params, layer, &agg, features, &policy, m, vt.as_mut(), fp.as_deref_mut());
            next.psi_row_mut(m).copy_from_slice(&tx);
            next.phi_row_mut(m).copy_from_slice(&rx);
            if let Some(vt) = vt {
                layer_trace.push(vt);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(layer_trace);
        }
        policy = next;
    }
    policy
}

/// `K` synchronous rounds of aggregate + combine starting from `init`.
pub fn forward(params: &ModelParams, features: &GraphFeatures, init: &BeamPolicy) -> Result<BeamPolicy> {
    check_dims(params, features, init)?;
    Ok(run(params, features, init, None, None))
}

/// Forward pass that also records what the reverse sweep needs.
pub fn forward_traced(
    params: &ModelParams,
    features: &GraphFeatures,
    init: &BeamPolicy,
    fp: Option<&mut Fingerprint>,
) -> Result<(BeamPolicy, ForwardTrace)> {
    check_dims(params, features, init)?;
    let mut trace = ForwardTrace::default();
    let policy = run(params, features, init, Some(&mut trace), fp);
    Ok((policy, trace))
}

/// Reverse sweep: given the loss gradient with respect to the final
/// `(phi, psi)`, accumulates the gradient of every parameter into `grads`.
///
/// Max slots route their gradient to the lowest-index neighbor achieving the
/// maximum.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_phi: &[f64],
    d_psi: &[f64],
    grads: &mut ModelParams,
) {
    let spec = params.spec();
    let (nr, nt, f) = (spec.nr, spec.nt, spec.f);
    let d = nr * nt;
    let data = params.as_slice();
    let mut d_phi = d_phi.to_vec();
    let mut d_psi = d_psi.to_vec();
    for layer in (0..trace.layers.len()).rev() {
        let need_prev = layer > 0;
        let vertices = &trace.layers[layer];
        let mut prev_phi = vec![0.0; d_phi.len()];
        let mut prev_psi = vec![0.0; d_psi.len()];
        for (m, vt) in vertices.iter().enumerate() {
            let mut d_agg = vec![0.0; 2 * f];
            let d_tx = mlp::backward(
                data,
                params.slots(layer, MlpKind::Transmit),
                OutputActivation::Project,
                &vt.tx,
                &d_psi[m * nt..(m + 1) * nt],
                grads.as_mut_slice(),
                true,
            )
            .expect("input gradient requested");
            d_agg.iter_mut().zip(&d_tx).for_each(|(a, b)| *a += b);
            if need_prev {
                prev_psi[m * nt..(m + 1) * nt]
                    .iter_mut()
                    .zip(&d_tx[2 * f + d..])
                    .for_each(|(a, b)| *a += b);
            }
            let d_rx = mlp::backward(
                data,
                params.slots(layer, MlpKind::Receive),
                OutputActivation::Project,
                &vt.rx,
                &d_phi[m * nr..(m + 1) * nr],
                grads.as_mut_slice(),
                true,
            )
            .expect("input gradient requested");
            d_agg.iter_mut().zip(&d_rx).for_each(|(a, b)| *a += b);
            if need_prev {
                prev_phi[m * nr..(m + 1) * nr]
                    .iter_mut()
                    .zip(&d_rx[2 * f + d..])
                    .for_each(|(a, b)| *a += b);
            }

            let count = vt.messages.len();
            if count == 0 {
                continue;
            }
            let mean_share: Vec<f64> = d_agg[f..].iter().map(|g| g / count as f64).collect();
            for (j, msg) in vt.messages.iter().enumerate() {
                let mut d_msg = mean_share.clone();
                for e in 0..f {
                    if vt.argmax[e] == j {
                        d_msg[e] += d_agg[e];
                    }
                }
                if d_msg.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let d_in = mlp::backward(
                    data,
                    params.slots(layer, MlpKind::Aggregate),
                    OutputActivation::Relu,
                    msg,
                    &d_msg,
                    grads.as_mut_slice(),
                    need_prev,
                );
                if let Some(d_in) = d_in {
                    prev_phi[m * nr..(m + 1) * nr]
                        .iter_mut()
                        .zip(&d_in[3 * d..3 * d + nr])
                        .for_each(|(a, b)| *a += b);
                    prev_psi[m * nt..(m + 1) * nt]
                        .iter_mut()
                        .zip(&d_in[3 * d + nr..])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        d_phi = prev_phi;
        d_psi = prev_psi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::round_policy;
    use crate::rng::RngState;

    fn random_features(n: usize, nr: usize, nt: usize, rng: &mut RngState) -> GraphFeatures {
        let raw = (0..n * n * nr * nt).map(|_| rng.next_uniform()).collect();
        GraphFeatures::from_raw(n, nr, nt, raw).unwrap()
    }

    fn small_model(k: usize, seed: u64) -> ModelParams {
        let spec = ModelSpec::with_hidden(3, 2, k, &[16, 12], 8).unwrap();
        ModelParams::init(spec, &mut RngState::seed_from(seed, 0)).unwrap()
    }

    #[test]
    fn projection_clamps() {
        assert_eq!(project(-0.3), 0.0);
        assert_eq!(project(0.4), 0.4);
        assert_eq!(project(1.7), 1.0);
    }

    #[test]
    fn zero_model_outputs() {
        let spec = ModelSpec::with_hidden(3, 2, 1, &[16, 12], 8).unwrap();
        let params = ModelParams::zeros(spec).unwrap();
        let mut rng = RngState::seed_from(1, 0);
        let feats = random_features(4, 2, 3, &mut rng);
        let init = default_init(4, 2, 3);
        let agg = aggregate(&params, 0, &feats, &init, 1).unwrap();
        assert!(agg.iter().all(|&x| x == 0.0));
        let (tx, rx) = combine(&params, 0, &agg, &feats, &init, 1).unwrap();
        assert!(tx.iter().chain(&rx).all(|&x| x == 0.0));
        let out = forward(&params, &feats, &init).unwrap();
        assert!(out.phi_slice().iter().chain(out.psi_slice()).all(|&x| x == 0.0));
        assert_eq!(round_policy(&out, 0.5).active_count(), 0);
    }

    #[test]
    fn single_neighbor_max_equals_mean() {
        let params = small_model(1, 2);
        let mut rng = RngState::seed_from(2, 0);
        let feats = random_features(2, 2, 3, &mut rng);
        let agg = aggregate(&params, 0, &feats, &default_init(2, 2, 3), 0).unwrap();
        assert_eq!(agg[..8], agg[8..]);
    }

    #[test]
    fn lone_vertex_gets_zero_summary() {
        let params = small_model(1, 3);
        let mut rng = RngState::seed_from(3, 0);
        let feats = random_features(1, 2, 3, &mut rng);
        let agg = aggregate(&params, 0, &feats, &default_init(1, 2, 3), 0).unwrap();
        assert_eq!(agg, vec![0.0; 16]);
        let out = forward(&params, &feats, &default_init(1, 2, 3)).unwrap();
        assert_eq!(out.n(), 1);
    }

    #[test]
    fn saturated_pre_activation_projects_to_one() {
        let spec = ModelSpec::with_hidden(1, 1, 1, &[1], 1).unwrap();
        let mut params = ModelParams::zeros(spec).unwrap();
        let bias = params.slots(0, MlpKind::Transmit).last().unwrap().b_offset;
        params.as_mut_slice()[bias] = 2.0;
        let feats = GraphFeatures::from_raw(1, 1, 1, vec![0.3]).unwrap();
        let out = forward(&params, &feats, &default_init(1, 1, 1)).unwrap();
        assert_eq!(out.psi(0, 0), 1.0);
        assert_eq!(out.phi(0, 0), 0.0);
    }

    #[test]
    fn outputs_stay_in_box() {
        let mut rng = RngState::seed_from(4, 0);
        let spec = ModelSpec::with_hidden(3, 2, 2, &[6], 4).unwrap();
        for trial in 0..1000 {
            let mut params = ModelParams::zeros(spec.clone()).unwrap();
            let scale = 1.0 + (trial % 7) as f64;
            params
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = scale * (2.0 * rng.next_uniform() - 1.0));
            let feats = random_features(3, 2, 3, &mut rng);
            let out = forward(&params, &feats, &default_init(3, 2, 3)).unwrap();
            assert!(out.phi_slice().iter().chain(out.psi_slice()).all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn one_layer_forward_is_one_round() {
        let params = small_model(1, 5);
        let mut rng = RngState::seed_from(5, 0);
        let feats = random_features(3, 2, 3, &mut rng);
        let init = default_init(3, 2, 3);
        let out = forward(&params, &feats, &init).unwrap();
        for m in 0..3 {
            let agg = aggregate(&params, 0, &feats, &init, m).unwrap();
            let (tx, rx) = combine(&params, 0, &agg, &feats, &init, m).unwrap();
            assert_eq!(out.psi_row(m), tx.as_slice());
            assert_eq!(out.phi_row(m), rx.as_slice());
        }
    }

    #[test]
    fn summary_ignores_neighbor_order() {
        let params = small_model(1, 6);
        let mut rng = RngState::seed_from(6, 0);
        let feats = random_features(4, 2, 3, &mut rng);
        let init = default_init(4, 2, 3);
        // relabel the neighbors of vertex 0 while keeping 0 in place
        let perm = [0, 3, 1, 2];
        let a = aggregate(&params, 0, &feats, &init, 0).unwrap();
        let b = aggregate(&params, 0, &feats.permuted(&perm), &init.permuted(&perm), 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let params = small_model(2, 7);
        let mut rng = RngState::seed_from(7, 0);
        let feats = random_features(5, 2, 3, &mut rng);
        let init = default_init(5, 2, 3);
        let perm = [3, 0, 4, 1, 2];
        let a = forward(&params, &feats.permuted(&perm), &init).unwrap();
        let b = forward(&params, &feats, &init).unwrap().permuted(&perm);
        for (x, y) in a.phi_slice().iter().chain(a.psi_slice()).zip(b.phi_slice().iter().chain(b.psi_slice())) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn traced_forward_matches_plain() {
        let params = small_model(2, 8);
        let mut rng = RngState::seed_from(8, 0);
        let feats = random_features(3, 2, 3, &mut rng);
        let init = default_init(3, 2, 3);
        let plain = forward(&params, &feats, &init).unwrap();
        let mut fp = Fingerprint::default();
        let (traced, _) = forward_traced(&params, &feats, &init, Some(&mut fp)).unwrap();
        assert_eq!(plain, traced);
        assert_ne!(fp, Fingerprint::default());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let params = small_model(1, 9);
        let mut rng = RngState::seed_from(9, 0);
        let feats = random_features(3, 3, 3, &mut rng);
        assert!(forward(&params, &feats, &default_init(3, 3, 3)).is_err());
    }
}
