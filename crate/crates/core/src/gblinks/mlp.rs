//! Dense-layer kernels with a recorded forward pass and its reverse sweep.

use super::params::{DenseSlot, OutputActivation};
use super::{project, Fingerprint};

/// Activations recorded by a forward pass, enough to replay it backwards.
#[derive(Clone, Debug, Default)]
pub(crate) struct MlpTrace {
    /// Input of each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each dense layer.
    pre: Vec<Vec<f64>>,
}

fn dense(data: &[f64], slot: &DenseSlot, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), slot.n_in);
    let w = &data[slot.w_offset..slot.b_offset];
    let b = &data[slot.b_offset..slot.b_offset + slot.n_out];
    w.chunks_exact(slot.n_in)
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn mix_relu_pattern(fp: &mut Fingerprint, pre: &[f64]) {
    for chunk in pre.chunks(64) {
        let bits = chunk
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &x)| acc | (((x > 0.0) as u64) << i));
        fp.mix(bits);
    }
}

/// Runs the network; records a trace and kink pattern when asked.
pub(crate) fn forward(
    data: &[f64],
    slots: &[DenseSlot],
    output: OutputActivation,
    input: Vec<f64>,
    trace: Option<&mut MlpTrace>,
    mut fp: Option<&mut Fingerprint>,
) -> Vec<f64> {
    let last = slots.len() - 1;
    let mut x = input;
    let mut inputs = Vec::new();
    let mut pres = Vec::new();
    let recording = trace.is_some();
    for (i, slot) in slots.iter().enumerate() {
        let pre = dense(data, slot, &x);
        let mut act = pre.clone();
        if i < last || output == OutputActivation::Relu {
            relu_in_place(&mut act);
            if let Some(fp) = fp.as_deref_mut() {
                mix_relu_pattern(fp, &pre);
            }
        } else if output == OutputActivation::Project {
            act.iter_mut().for_each(|u| *u = project(*u));
            if let Some(fp) = fp.as_deref_mut() {
                for &u in &pre {
                    fp.mix(if u <= 0.0 { 0 } else if u >= 1.0 { 2 } else { 1 });
                }
            }
        }
        if recording {
            inputs.push(std::mem::replace(&mut x, act));
            pres.push(pre);
        } else {
            x = act;
        }
    }
    if let Some(t) = trace {
        t.inputs = inputs;
        t.pre = pres;
    }
    x
}

/// Accumulates parameter gradients into `grads` (same layout as `data`) and
/// returns the gradient with respect to the network input when `need_input`.
///
/// Kink conventions: ReLU'(0) = 0; the projection has zero slope at and
/// outside the box boundary.
pub(crate) fn backward(
    data: &[f64],
    slots: &[DenseSlot],
    output: OutputActivation,
    trace: &MlpTrace,
    d_out: &[f64],
    grads: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let last = slots.len() - 1;
    let mut delta: Vec<f64> = match output {
        OutputActivation::Relu => d_out
            .iter()
            .zip(&trace.pre[last])
            .map(|(g, &u)| if u > 0.0 { *g } else { 0.0 })
            .collect(),
        OutputActivation::Project => d_out
            .iter()
            .zip(&trace.pre[last])
            .map(|(g, &u)| if u > 0.0 && u < 1.0 { *g } else { 0.0 })
            .collect(),
        OutputActivation::Identity => d_out.to_vec(),
    };
    for i in (0..slots.len()).rev() {
        let slot = &slots[i];
        let x = &trace.inputs[i];
        let (gw, rest) = grads[slot.w_offset..].split_at_mut(slot.b_offset - slot.w_offset);
        let gb = &mut rest[..slot.n_out];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            gw[o * slot.n_in..(o + 1) * slot.n_in]
                .iter_mut()
                .zip(x)
                .for_each(|(g, xi)| *g += d * xi);
        }
        if i == 0 && !need_input {
            return None;
        }
        let w = &data[slot.w_offset..slot.b_offset];
        let mut d_in = vec![0.0; slot.n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            d_in.iter_mut()
                .zip(&w[o * slot.n_in..(o + 1) * slot.n_in])
                .for_each(|(g, wi)| *g += d * wi);
        }
        if i == 0 {
            return Some(d_in);
        }
        delta = d_in
            .iter()
            .zip(&trace.pre[i - 1])
            .map(|(g, &u)| if u > 0.0 { *g } else { 0.0 })
            .collect();
    }
    unreachable!("loop returns at the first layer")
}
