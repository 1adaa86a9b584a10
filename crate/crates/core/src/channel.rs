//! Scenario geometry, Saleh-Valenzuela mmWave channels, DFT codebooks and
//! the effective beam-pair gain tensor.
//!
//! Draw order is fixed so that a `(master_seed, stream_id)` pair always yields
//! the same scenario:
//!
//! 1. topology: `x, y` for every transmitter in pair order, then `d, beta`
//!    for every receiver in pair order;
//! 2. channels: for each receiver `m`, each transmitter `n`, each path `p`:
//!    complex gain (real part, imaginary part), angle of arrival, angle of
//!    departure.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Relative tolerance used when checking `snr_db = 10 log10(p / sigma^2)`.
const SNR_CONSISTENCY_TOL: f64 = 1e-9;

/// Scenario parameters shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSimConfig")]
pub struct SimConfig {
    /// Number of transmitter/receiver pairs.
    pub n: usize,
    pub nt: usize,
    pub nr: usize,
    /// Propagation paths per link.
    pub np: usize,
    /// Side of the square deployment region, meters.
    pub region_side: f64,
    pub d1: f64,
    pub d2: f64,
    pub snr_db: f64,
    pub noise_power: f64,
    pub tx_power: f64,
    pub weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSimConfig {
    n: usize,
    nt: usize,
    nr: usize,
    #[serde(default = "default_paths")]
    np: usize,
    region_side: f64,
    d1: f64,
    d2: f64,
    snr_db: f64,
    #[serde(default = "default_noise")]
    noise_power: f64,
    #[serde(default)]
    tx_power: Option<f64>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

fn default_paths() -> usize {
    2
}

fn default_noise() -> f64 {
    1.0
}

impl TryFrom<RawSimConfig> for SimConfig {
    type Error = Error;

    fn try_from(raw: RawSimConfig) -> Result<Self> {
        let tx_power = raw
            .tx_power
            .unwrap_or_else(|| raw.noise_power * 10f64.powf(raw.snr_db / 10.0));
        let cfg = SimConfig {
            n: raw.n,
            nt: raw.nt,
            nr: raw.nr,
            np: raw.np,
            region_side: raw.region_side,
            d1: raw.d1,
            d2: raw.d2,
            snr_db: raw.snr_db,
            noise_power: raw.noise_power,
            tx_power,
            weights: raw.weights.unwrap_or_else(|| vec![1.0; raw.n]),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SimConfig {
    /// Unit noise power, `p = 10^(snr_db/10)`, unit weights.
    pub fn new(
        n: usize,
        nt: usize,
        nr: usize,
        np: usize,
        region_side: f64,
        (d1, d2): (f64, f64),
        snr_db: f64,
    ) -> Result<Self> {
        let cfg = SimConfig {
            n,
            nt,
            nr,
            np,
            region_side,
            d1,
            d2,
            snr_db,
            noise_power: 1.0,
            tx_power: 10f64.powf(snr_db / 10.0),
            weights: vec![1.0; n],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.nt == 0 || self.nr == 0 || self.np == 0 {
            return Err(Error::invalid("n, nt, nr and np must all be at least 1"));
        }
        if !(self.d1 > 0.0 && self.d1 <= self.d2) {
            return Err(Error::invalid(format!(
                "pair distance bounds must satisfy 0 < d1 <= d2, got ({}, {})",
                self.d1, self.d2
            )));
        }
        if !(self.region_side > 0.0) {
            return Err(Error::invalid("region_side must be positive"));
        }
        if !(self.noise_power > 0.0 && self.tx_power > 0.0) {
            return Err(Error::invalid("noise_power and tx_power must be positive"));
        }
        let implied = 10.0 * (self.tx_power / self.noise_power).log10();
        if (implied - self.snr_db).abs() > SNR_CONSISTENCY_TOL * self.snr_db.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "snr_db {} disagrees with tx_power/noise_power ({implied} dB)",
                self.snr_db
            )));
        }
        if self.weights.len() != self.n {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                self.n,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// `a b^H` for column vectors `a`, `b`.
    pub fn outer(a: &[Complex64], b: &[Complex64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn add_scaled(&mut self, other: &CMatrix, scale: Complex64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Transmitter/receiver placement and the pairwise distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    pub tx_pos: Vec<[f64; 2]>,
    pub rx_pos: Vec<[f64; 2]>,
    /// `dist[m * n + k]`: distance from transmitter `k` to receiver `m`.
    dist: Vec<f64>,
}

impl NetworkTopology {
    pub fn from_positions(tx_pos: Vec<[f64; 2]>, rx_pos: Vec<[f64; 2]>) -> Result<Self> {
        if tx_pos.len() != rx_pos.len() || tx_pos.is_empty() {
            return Err(Error::invalid("need equally many (>= 1) transmitters and receivers"));
        }
        let n = tx_pos.len();
        let mut dist = Vec::with_capacity(n * n);
        for rx in &rx_pos {
            for tx in &tx_pos {
                dist.push((rx[0] - tx[0]).hypot(rx[1] - tx[1]));
            }
        }
        Ok(Self {
            tx_pos,
            rx_pos,
            dist,
        })
    }

    pub fn n(&self) -> usize {
        self.tx_pos.len()
    }

    /// Distance from transmitter `n` to receiver `m`.
    #[inline]
    pub fn dist(&self, m: usize, n: usize) -> f64 {
        self.dist[m * self.n() + n]
    }
}

/// Receiver position at distance `d` and bearing `beta` from `tx`.
pub fn place_receiver(tx: [f64; 2], d: f64, beta: f64) -> [f64; 2] {
    [tx[0] + d * beta.cos(), tx[1] + d * beta.sin()]
}

/// Transmitters uniform over the region square; each receiver at a uniform
/// distance in `[d1, d2]` and uniform bearing from its transmitter. Receivers
/// are not clipped to the square.
pub fn gen_topology(config: &SimConfig, rng: &mut RngState) -> NetworkTopology {
    let side = config.region_side;
    let tx_pos: Vec<[f64; 2]> = (0..config.n)
        .map(|_| {
            let x = rng.uniform_in(0.0, side);
            let y = rng.uniform_in(0.0, side);
            [x, y]
        })
        .collect();
    let rx_pos = tx_pos
        .iter()
        .map(|&tx| {
            let d = rng.uniform_in(config.d1, config.d2);
            let beta = rng.uniform_in(0.0, TAU);
            place_receiver(tx, d, beta)
        })
        .collect();
    NetworkTopology::from_positions(tx_pos, rx_pos).expect("n >= 1 by validation")
}

/// ULA response `(1/sqrt(n)) [1, e^{j pi sin a}, ..., e^{j (n-1) pi sin a}]`.
pub fn ula_steering(angle: f64, n_ant: usize) -> Vec<Complex64> {
    let norm = 1.0 / (n_ant as f64).sqrt();
    let phase = PI * angle.sin();
    (0..n_ant)
        .map(|k| Complex64::from_polar(norm, k as f64 * phase))
        .collect()
}

/// All `H[m][n]` matrices (each `nr x nt`).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    n: usize,
    h: Vec<CMatrix>,
}

impl ChannelSet {
    pub fn from_matrices(n: usize, h: Vec<CMatrix>) -> Result<Self> {
        if n == 0 || h.len() != n * n {
            return Err(Error::invalid(format!(
                "expected {} channel matrices, got {}",
                n * n,
                h.len()
            )));
        }
        let shape = (h[0].rows(), h[0].cols());
        if h.iter().any(|m| (m.rows(), m.cols()) != shape) {
            return Err(Error::invalid("channel matrices must share one shape"));
        }
        Ok(Self { n, h })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nr(&self) -> usize {
        self.h[0].rows()
    }

    pub fn nt(&self) -> usize {
        self.h[0].cols()
    }

    /// Channel from transmitter `n` to receiver `m`.
    pub fn get(&self, m: usize, n: usize) -> &CMatrix {
        &self.h[m * self.n + n]
    }
}

/// One Saleh-Valenzuela draw with average path loss `rho`:
/// `sqrt(rho nt nr) sum_p alpha_p h_r(tau_p) h_t(psi_p)^H`.
pub fn saleh_valenzuela(rho: f64, nt: usize, nr: usize, np: usize, rng: &mut RngState) -> CMatrix {
    let mut h = CMatrix::zeros(nr, nt);
    let scale = (rho * (nt * nr) as f64).sqrt();
    for _ in 0..np {
        let alpha = rng
            .next_complex_gaussian(1.0)
            .expect("unit variance is positive");
        let aoa = rng.uniform_in(0.0, TAU);
        let aod = rng.uniform_in(0.0, TAU);
        let path = CMatrix::outer(&ula_steering(aoa, nr), &ula_steering(aod, nt));
        h.add_scaled(&path, alpha * scale);
    }
    h
}

/// Channels for every receiver/transmitter combination with path loss
/// `dist^-3`.
pub fn gen_channels(topology: &NetworkTopology, config: &SimConfig, rng: &mut RngState) -> ChannelSet {
    let n = topology.n();
    let mut h = Vec::with_capacity(n * n);
    for m in 0..n {
        for k in 0..n {
            let rho = topology.dist(m, k).powi(-3);
            h.push(saleh_valenzuela(rho, config.nt, config.nr, config.np, rng));
        }
    }
    ChannelSet::from_matrices(n, h).expect("n x n matrices of one shape")
}

/// Square DFT matrix, entry `(a, b) = e^{j 2 pi a b / n} / sqrt(n)`.
pub fn dft_codebook(n_ant: usize) -> CMatrix {
    let norm = 1.0 / (n_ant as f64).sqrt();
    CMatrix::from_fn(n_ant, n_ant, |a, b| {
        // reduce a*b modulo n first so large arrays keep full phase precision
        let k = (a * b) % n_ant;
        Complex64::from_polar(norm, TAU * k as f64 / n_ant as f64)
    })
}

/// Transmit and receive codebooks; codewords are columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub ut: CMatrix,
    pub vr: CMatrix,
}

impl Codebook {
    pub fn dft(nt: usize, nr: usize) -> Self {
        Self {
            ut: dft_codebook(nt),
            vr: dft_codebook(nr),
        }
    }

    pub fn nt(&self) -> usize {
        self.ut.cols()
    }

    pub fn nr(&self) -> usize {
        self.vr.cols()
    }

    /// `V_r^H H U_t`: entry `(r, l)` is the complex gain from transmit beam
    /// `l` to receive beam `r`.
    pub fn beamspace(&self, h: &CMatrix) -> Result<CMatrix> {
        if h.rows() != self.vr.rows() || h.cols() != self.ut.rows() {
            return Err(Error::invalid(format!(
                "channel is {}x{} but codebooks expect {}x{}",
                h.rows(),
                h.cols(),
                self.vr.rows(),
                self.ut.rows()
            )));
        }
        self.vr.adjoint().matmul(h)?.matmul(&self.ut)
    }
}

/// Power gains `|v_r^H H[m][n] u_l|^2`, stored in `(m, r, n, l)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveGains {
    n: usize,
    nr: usize,
    nt: usize,
    rho: Vec<f64>,
}

impl EffectiveGains {
    pub fn from_raw(n: usize, nr: usize, nt: usize, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != n * nr * n * nt {
            return Err(Error::invalid(format!(
                "gain tensor has {} entries, expected {}",
                rho.len(),
                n * nr * n * nt
            )));
        }
        if rho.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::invalid("gains must be finite and nonnegative"));
        }
        Ok(Self { n, nr, nt, rho })
    }

    /// Builds a gain tensor from a closure over `(m, r, n, l)`.
    pub fn from_fn(n: usize, nr: usize, nt: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut rho = Vec::with_capacity(n * nr * n * nt);
        for m in 0..n {
            for r in 0..nr {
                for k in 0..n {
                    for l in 0..nt {
                        rho.push(f(m, r, k, l));
                    }
                }
            }
        }
        Self::from_raw(n, nr, nt, rho)
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
    fn index(&self, m: usize, r: usize, n: usize, l: usize) -> usize {
        ((m * self.nr + r) * self.n + n) * self.nt + l
    }

    #[inline]
    pub fn get(&self, m: usize, r: usize, n: usize, l: usize) -> f64 {
        self.rho[self.index(m, r, n, l)]
    }

    /// The `nt` gains from every beam of transmitter `n` into beam `r` of
    /// receiver `m`.
    #[inline]
    pub fn row(&self, m: usize, r: usize, n: usize) -> &[f64] {
        let start = self.index(m, r, n, 0);
        &self.rho[start..start + self.nt]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rho
    }

    /// Relabels pairs: the result's pair `i` is this tensor's pair `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.n, self.nr, self.nt, |m, r, k, l| {
            self.get(perm[m], r, perm[k], l)
        })
        .expect("permutation preserves validity")
    }
}

pub fn effective_gains(channels: &ChannelSet, codebook: &Codebook) -> Result<EffectiveGains> {
    let n = channels.n();
    let (nr, nt) = (codebook.nr(), codebook.nt());
    let beams: Vec<CMatrix> = (0..n * n)
        .map(|idx| codebook.beamspace(channels.get(idx / n, idx % n)))
        .collect::<Result<_>>()?;
    EffectiveGains::from_fn(n, nr, nt, |m, r, k, l| beams[m * n + k].get(r, l).norm_sqr())
}
