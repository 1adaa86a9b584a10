//! Feature tensor of the directed complete wireless channel graph.
//!
//! Vertex `i` is communication pair `i`; its feature is the element-wise
//! modulus of the row-major flattened beamspace matrix `V_r^H H[i][i] U_t`.
//! The directed edge `(i, j)` carries the same construction applied to the
//! cross channel `H[i][j]`. Entry `(r, l)` of a beamspace matrix lands at
//! flat index `r * nt + l`.

use crate::channel::{ChannelSet, Codebook};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    n: usize,
    nr: usize,
    nt: usize,
    kappa: Vec<f64>,
}

impl GraphFeatures {
    pub fn from_raw(n: usize, nr: usize, nt: usize, kappa: Vec<f64>) -> Result<Self> {
        if kappa.len() != n * n * nr * nt {
            return Err(Error::invalid(format!(
                "feature tensor has {} entries, expected {}",
                kappa.len(),
                n * n * nr * nt
            )));
        }
        if kappa.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("features must be finite and nonnegative"));
        }
        Ok(Self { n, nr, nt, kappa })
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

    /// Feature width `nt * nr`.
    pub fn dim(&self) -> usize {
        self.nr * self.nt
    }

    /// `kappa[i][j]`: vertex feature when `i == j`, edge feature otherwise.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let start = (i * self.n + j) * d;
        &self.kappa[start..start + d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.kappa
    }

    /// Relabels pairs: the result's `kappa[i][j]` is `kappa[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut kappa = Vec::with_capacity(self.kappa.len());
        for i in 0..self.n {
            for j in 0..self.n {
                kappa.extend_from_slice(self.get(perm[i], perm[j]));
            }
        }
        Self {
            n: self.n,
            nr: self.nr,
            nt: self.nt,
            kappa,
        }
    }
}

pub fn build_features(channels: &ChannelSet, codebook: &Codebook) -> Result<GraphFeatures> {
    let n = channels.n();
    let (nr, nt) = (codebook.nr(), codebook.nt());
    let mut kappa = Vec::with_capacity(n * n * nr * nt);
    for i in 0..n {
        for j in 0..n {
            let beams = codebook.beamspace(channels.get(i, j))?;
            kappa.extend(beams.as_slice().iter().map(|z| z.norm()));
        }
    }
    GraphFeatures::from_raw(n, nr, nt, kappa)
}

#[cfg(test)]
mod tests {
    use num_complex::Complex64;

    use super::*;
    use crate::channel::{effective_gains, gen_channels, gen_topology, CMatrix, SimConfig};
    use crate::rng::RngState;

    fn sample(seed: u64) -> (ChannelSet, Codebook) {
        let cfg = SimConfig::new(3, 4, 2, 2, 5.0, (4.0, 5.0), 10.0).unwrap();
        let mut rng = RngState::seed_from(seed, 0);
        let topo = gen_topology(&cfg, &mut rng);
        (gen_channels(&topo, &cfg, &mut rng), Codebook::dft(4, 2))
    }

    #[test]
    fn zero_channel_gives_zero_edge() {
        let (ch, cb) = sample(1);
        let mut mats: Vec<CMatrix> = (0..9).map(|k| ch.get(k / 3, k % 3).clone()).collect();
        mats[1] = CMatrix::zeros(2, 4);
        let ch = ChannelSet::from_matrices(3, mats).unwrap();
        let f = build_features(&ch, &cb).unwrap();
        assert!(f.get(0, 1).iter().all(|&x| x == 0.0));
        assert!(f.get(1, 0).iter().any(|&x| x > 0.0));
        assert_eq!(f.dim(), 8);
    }

    #[test]
    fn row_major_flattening_of_moduli() {
        // identity codebooks expose H directly
        let eye = |n: usize| {
            CMatrix::from_fn(n, n, |a, b| Complex64::new(if a == b { 1.0 } else { 0.0 }, 0.0))
        };
        let cb = Codebook { ut: eye(3), vr: eye(2) };
        let h = CMatrix::from_fn(2, 3, |r, l| Complex64::new(-(r as f64), (10 * r + l) as f64));
        let ch = ChannelSet::from_matrices(1, vec![h.clone()]).unwrap();
        let f = build_features(&ch, &cb).unwrap();
        let expected: Vec<f64> = (0..2)
            .flat_map(|r| (0..3).map(move |l| (r, l)))
            .map(|(r, l)| h.get(r, l).norm())
            .collect();
        assert_eq!(f.get(0, 0), expected.as_slice());
    }

    #[test]
    fn vertex_features_square_to_direct_gains() {
        let (ch, cb) = sample(5);
        let f = build_features(&ch, &cb).unwrap();
        let g = effective_gains(&ch, &cb).unwrap();
        for i in 0..3 {
            for r in 0..2 {
                for l in 0..4 {
                    let k = f.get(i, i)[r * 4 + l];
                    assert!((k * k - g.get(i, r, i, l)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn relabeling_commutes_with_construction() {
        let (ch, cb) = sample(9);
        let perm = [2, 0, 1];
        let mats = (0..9)
            .map(|k| ch.get(perm[k / 3], perm[k % 3]).clone())
            .collect();
        let relabeled = ChannelSet::from_matrices(3, mats).unwrap();
        let a = build_features(&relabeled, &cb).unwrap();
        let b = build_features(&ch, &cb).unwrap().permuted(&perm);
        assert_eq!(a, b);
    }
}
