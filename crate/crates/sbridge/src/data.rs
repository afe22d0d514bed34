//! Toy target distributions and the Gaussian prior.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape};
use crate::rng::stream_rng;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Isotropic zero-mean Gaussian prior.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PriorSpec {
    pub dim: usize,
    pub variance: f64,
}

impl PriorSpec {
    pub fn new(dim: usize, variance: f64) -> Self {
        assert!(variance > 0.0, "prior variance must be positive");
        Self { dim, variance }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        crate::rng::normal_rows(seed, 0, n, self.dim).mapv(|v| v * self.variance.sqrt())
    }

    pub fn logpdf(&self, x: ArrayView1<f64>) -> f64 {
        let d = self.dim as f64;
        -0.5 * d * (LN_2PI + self.variance.ln())
            - x.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.variance)
    }

    pub fn logpdf_rows(&self, x: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(x.rows().into_iter().map(|r| self.logpdf(r)))
    }

    /// log-density as a (batch, 1) graph node.
    pub fn tape_logpdf(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let d = self.dim as f64;
        let sq = tape.squared_norm_rows(x);
        let scaled = tape.scale(sq, -1.0 / (2.0 * self.variance));
        tape.add_const(scaled, -0.5 * d * (LN_2PI + self.variance.ln()))
    }

    /// Score of the prior, grad_x log p(x) = -x / variance.
    pub fn score(&self, x: &Array2<f64>) -> Array2<f64> {
        x * (-1.0 / self.variance)
    }
}

/// Equal-covariance Gaussian mixture.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl GmmSpec {
    /// The 2D toy target: 8 equal-weight components on a circle of radius 2
    /// with standard deviation 0.1.
    pub fn toy_circle() -> Self {
        let k = 8;
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![2.0 * a.cos(), 2.0 * a.sin()]
            })
            .collect();
        Self {
            means,
            std: 0.1,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn validate(&self) {
        assert!(self.std > 0.0, "component std must be positive");
        let total: f64 = self.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "weights must sum to 1");
        assert_eq!(self.means.len(), self.weights.len());
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        self.validate();
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut rng = stream_rng(seed, i as u64, 0);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut comp = self.weights.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = k;
                    break;
                }
            }
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out[[i, j]] = self.means[comp][j] + self.std * z;
            }
        }
        out
    }

    /// log sum_k w_k N(x; mu_k, std^2 I) via a stable log-sum-exp.
    pub fn logpdf(&self, x: ArrayView1<f64>) -> f64 {
        let d = self.dim() as f64;
        let var = self.std * self.std;
        let norm = -0.5 * d * (LN_2PI + var.ln());
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let sq: f64 = x
                    .iter()
                    .zip(mu.iter())
                    .map(|(xi, mi)| (xi - mi).powi(2))
                    .sum();
                w.ln() + norm - sq / (2.0 * var)
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    pub fn logpdf_rows(&self, x: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(x.rows().into_iter().map(|r| self.logpdf(r)))
    }
}

/// Alternating-cell checkerboard on [-extent, extent]^2.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CheckerboardSpec {
    pub extent: f64,
    /// Cells per axis; must be even so the pattern tiles.
    pub cells_per_axis: usize,
}

impl CheckerboardSpec {
    pub fn toy() -> Self {
        Self {
            extent: 4.0,
            cells_per_axis: 4,
        }
    }

    fn cell_width(&self) -> f64 {
        2.0 * self.extent / self.cells_per_axis as f64
    }

    /// "Black" cells carry the mass: cell indices with even (i + j).
    fn black_cells(&self) -> Vec<(usize, usize)> {
        let n = self.cells_per_axis;
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| (i + j) % 2 == 0)
            .collect()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let w = self.cell_width();
        if x < -self.extent || x > self.extent || y < -self.extent || y > self.extent {
            return false;
        }
        let i = (((x + self.extent) / w) as usize).min(self.cells_per_axis - 1);
        let j = (((y + self.extent) / w) as usize).min(self.cells_per_axis - 1);
        (i + j) % 2 == 0
    }

    /// Membership in the support dilated by `margin` in the sup norm.
    pub fn contains_dilated(&self, x: f64, y: f64, margin: f64) -> bool {
        let w = self.cell_width();
        for (i, j) in self.black_cells() {
            let x0 = -self.extent + i as f64 * w;
            let y0 = -self.extent + j as f64 * w;
            if x >= x0 - margin
                && x <= x0 + w + margin
                && y >= y0 - margin
                && y <= y0 + w + margin
            {
                return true;
            }
        }
        false
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        assert!(self.cells_per_axis % 2 == 0, "cells per axis must be even");
        let black = self.black_cells();
        let w = self.cell_width();
        let mut out = Array2::zeros((n, 2));
        for idx in 0..n {
            let mut rng = stream_rng(seed, idx as u64, 0);
            let (i, j) = black[rng.gen_range(0..black.len())];
            out[[idx, 0]] = -self.extent + (i as f64 + rng.gen::<f64>()) * w;
            out[[idx, 1]] = -self.extent + (j as f64 + rng.gen::<f64>()) * w;
        }
        out
    }
}

/// A named toy target, dispatching sampling over the concrete specs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Gmm(GmmSpec),
    Checkerboard(CheckerboardSpec),
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::Gmm(g) => g.dim(),
            TargetSpec::Checkerboard(_) => 2,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        match self {
            TargetSpec::Gmm(g) => g.sample(n, seed),
            TargetSpec::Checkerboard(c) => c.sample(n, seed),
        }
    }
}
