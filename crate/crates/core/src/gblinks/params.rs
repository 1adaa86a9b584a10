//! Model dimensions, the flat parameter layout and the model file format.
//!
//! All trainable values live in one contiguous `Vec<f64>`. For every graph
//! layer `k` the three networks follow in the order (aggregation, transmit,
//! receive); inside a network each dense layer stores its `out x in` weight
//! matrix row-major, then its bias. The model file writes exactly this
//! vector after a one-line JSON header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Hidden widths used when none are given.
pub const PUBLISHED_HIDDEN: [usize; 3] = [256, 128, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Relu,
    /// Element-wise clamp to `[0, 1]`.
    Project,
    Identity,
}

/// Widths (input first, output last) of one MLP. Hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated: >= 2 widths")
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "{name}: need at least two positive layer widths, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

/// Which of the three networks of a graph layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpKind {
    /// Per-neighbor message network.
    Aggregate,
    /// Transmit-beam update network.
    Transmit,
    /// Receive-beam update network.
    Receive,
}

const KINDS: [MlpKind; 3] = [MlpKind::Aggregate, MlpKind::Transmit, MlpKind::Receive];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub nt: usize,
    pub nr: usize,
    /// Number of stacked graph layers.
    pub k: usize,
    /// Message width.
    pub f: usize,
    pub mlp1: MlpSpec,
    pub mlp_tx: MlpSpec,
    pub mlp_rx: MlpSpec,
}

impl ModelSpec {
    /// Default architecture: hidden widths 256/128/64 in all networks, message
    /// width 64.
    pub fn published(nt: usize, nr: usize, k: usize) -> Result<Self> {
        Self::with_hidden(nt, nr, k, &PUBLISHED_HIDDEN[..2], PUBLISHED_HIDDEN[2])
    }

    /// Custom architecture. The aggregation network has hidden widths
    /// `hidden` and output `f`; the update networks have hidden widths
    /// `hidden ++ [f]`.
    pub fn with_hidden(nt: usize, nr: usize, k: usize, hidden: &[usize], f: usize) -> Result<Self> {
        if nt == 0 || nr == 0 || k == 0 || f == 0 {
            return Err(Error::invalid("nt, nr, k and f must all be at least 1"));
        }
        let d = nt * nr;
        let chain = |input: usize, tail: &[usize]| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.extend_from_slice(tail);
            w
        };
        let spec = Self {
            nt,
            nr,
            k,
            f,
            mlp1: MlpSpec {
                widths: chain(3 * d + nr + nt, &[f]),
                output: OutputActivation::Relu,
            },
            mlp_tx: MlpSpec {
                widths: chain(2 * f + d + nt, &[f, nt]),
                output: OutputActivation::Project,
            },
            mlp_rx: MlpSpec {
                widths: chain(2 * f + d + nr, &[f, nr]),
                output: OutputActivation::Project,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp1.validate("mlp1")?;
        self.mlp_tx.validate("mlp_tx")?;
        self.mlp_rx.validate("mlp_rx")?;
        let d = self.nt * self.nr;
        let checks = [
            (self.mlp1.input_width(), 3 * d + self.nr + self.nt, "mlp1 input"),
            (self.mlp1.output_width(), self.f, "mlp1 output"),
            (self.mlp_tx.input_width(), 2 * self.f + d + self.nt, "mlp_tx input"),
            (self.mlp_tx.output_width(), self.nt, "mlp_tx output"),
            (self.mlp_rx.input_width(), 2 * self.f + d + self.nr, "mlp_rx input"),
            (self.mlp_rx.output_width(), self.nr, "mlp_rx output"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::invalid(format!("{what} width is {got}, expected {want}")));
            }
        }
        if self.mlp1.output != OutputActivation::Relu
            || self.mlp_tx.output != OutputActivation::Project
            || self.mlp_rx.output != OutputActivation::Project
        {
            return Err(Error::invalid("unsupported output activation layout"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(())
    }

    pub fn mlp(&self, kind: MlpKind) -> &MlpSpec {
        match kind {
            MlpKind::Aggregate => &self.mlp1,
            MlpKind::Transmit => &self.mlp_tx,
            MlpKind::Receive => &self.mlp_rx,
        }
    }
}

/// Position of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseSlot {
    pub n_in: usize,
    pub n_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

fn layout(spec: &ModelSpec) -> (Vec<DenseSlot>, usize) {
    let mut slots = Vec::new();
    let mut offset = 0;
    for _ in 0..spec.k {
        for kind in KINDS {
            for pair in spec.mlp(kind).widths.windows(2) {
                let (n_in, n_out) = (pair[0], pair[1]);
                slots.push(DenseSlot {
                    n_in,
                    n_out,
                    w_offset: offset,
                    b_offset: offset + n_in * n_out,
                });
                offset += n_in * n_out + n_out;
            }
        }
    }
    (slots, offset)
}

/// Trainable parameters of every graph layer, stored flat. Gradients use
/// the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    slots: Vec<DenseSlot>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (slots, len) = layout(&spec);
        Ok(Self {
            spec,
            slots,
            data: vec![0.0; len],
        })
    }

    /// Glorot-uniform weights, zero biases; values drawn in storage order.
    pub fn init(spec: ModelSpec, rng: &mut RngState) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        for slot in params.slots.clone() {
            let bound = (6.0 / (slot.n_in + slot.n_out) as f64).sqrt();
            for w in &mut params.data[slot.w_offset..slot.b_offset] {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        Ok(params)
    }

    pub fn from_raw(spec: ModelSpec, data: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if data.len() != params.data.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, architecture needs {}",
                data.len(),
                params.data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        params.data = data;
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            slots: self.slots.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Dense slots of network `kind` in graph layer `layer`.
    pub fn slots(&self, layer: usize, kind: MlpKind) -> &[DenseSlot] {
        let per = |k: MlpKind| self.spec.mlp(k).widths.len() - 1;
        let per_layer: usize = KINDS.iter().map(|&k| per(k)).sum();
        let mut start = layer * per_layer;
        for k in KINDS {
            if k == kind {
                break;
            }
            start += per(k);
        }
        &self.slots[start..start + per(kind)]
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = ModelHeader {
            version: MODEL_FORMAT_VERSION,
            nt: self.spec.nt,
            nr: self.spec.nr,
            k: self.spec.k,
            f: self.spec.f,
            mlp1: self.spec.mlp1.widths.clone(),
            mlp_tx: self.spec.mlp_tx.widths.clone(),
            mlp_rx: self.spec.mlp_rx.widths.clone(),
        };
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            serde_json::to_writer(&mut *out, &header)?;
            out.write_all(b"\n")?;
            for x in &self.data {
                out.write_all(&x.to_le_bytes())?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: ModelHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("bad header: {e}"),
        })?;
        if header.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("unsupported model version {}", header.version),
            });
        }
        let spec = ModelSpec {
            nt: header.nt,
            nr: header.nr,
            k: header.k,
            f: header.f,
            mlp1: MlpSpec {
                widths: header.mlp1,
                output: OutputActivation::Relu,
            },
            mlp_tx: MlpSpec {
                widths: header.mlp_tx,
                output: OutputActivation::Project,
            },
            mlp_rx: MlpSpec {
                widths: header.mlp_rx,
                output: OutputActivation::Project,
            },
        };
        let mut params = Self::zeros(spec).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != params.data.len() * 8 {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "body holds {} bytes, architecture needs {}",
                    bytes.len(),
                    params.data.len() * 8
                ),
            });
        }
        for (x, chunk) in params.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    nt: usize,
    nr: usize,
    k: usize,
    f: usize,
    mlp1: Vec<usize>,
    mlp_tx: Vec<usize>,
    mlp_rx: Vec<usize>,
}
