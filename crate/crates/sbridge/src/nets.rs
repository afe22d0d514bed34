//! Residual fully connected policy networks with sinusoidal time embedding.
//!
//! A policy maps (t, x) to a drift correction in R^d. Both the forward
//! policy Z and the backward policy Zhat use the same architecture: an
//! input block followed by residual blocks, each fed the time embedding
//! concatenated with the running hidden state, where every fully connected
//! layer is followed by a swish activation.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{NodeId, Tape, VectorField};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Sinusoidal time embedding: m/2 sine and m/2 cosine features with
/// geometrically spaced frequencies between 1 and `freq_base`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub freq_base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize, freq_base: f64) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "embedding dimension must be even");
        Self { dim, freq_base }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|k| {
                if half == 1 {
                    1.0
                } else {
                    self.freq_base.powf(k as f64 / (half - 1) as f64)
                }
            })
            .collect()
    }

    pub fn embed(&self, t: f64) -> Array1<f64> {
        let half = self.dim / 2;
        let mut out = Array1::zeros(self.dim);
        for (k, w) in self.frequencies().into_iter().enumerate() {
            out[k] = (w * t).sin();
            out[half + k] = (w * t).cos();
        }
        out
    }
}

/// Architecture hyper-parameters of a policy network.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub dim: usize,
    pub hidden_width: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    pub freq_base: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden_width: 128,
            blocks: 2,
            time_embed_dim: 32,
            freq_base: 1000.0,
        }
    }
}

/// A parameterized vector field (t, x) -> R^d, differentiable w.r.t. both
/// its parameters and x.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub spec: NetworkSpec,
    /// Distinguishes this network's parameter leaves on a shared tape.
    pub tag: usize,
    params: Vec<Array2<f64>>,
}

/// Slots per residual block: two weight matrices and two bias rows.
const BLOCK_SLOTS: usize = 4;

impl PolicyNetwork {
    /// Seeded initialization. Hidden weights are uniform in
    /// +-sqrt(6/(fan_in+fan_out)), biases zero. With `zero_init_output`
    /// the output layer is zeroed so the network maps everything to 0.
    pub fn init(spec: NetworkSpec, tag: usize, seed: u64, zero_init_output: bool) -> Self {
        let (d, w, m) = (spec.dim, spec.hidden_width, spec.time_embed_dim);
        let mut params = Vec::new();
        let mut slot = 0usize;
        let mut dense = |rows: usize, cols: usize, zero: bool| -> (Array2<f64>, Array2<f64>) {
            let weight = if zero {
                Array2::zeros((rows, cols))
            } else {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = stream_rng(seed, tag as u64, slot as u64);
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
            };
            slot += 2;
            (weight, Array2::zeros((1, cols)))
        };
        let (w0, b0) = dense(d + m, w, false);
        params.push(w0);
        params.push(b0);
        for _ in 0..spec.blocks {
            let (w1, b1) = dense(w + m, w, false);
            let (w2, b2) = dense(w, w, false);
            params.push(w1);
            params.push(b1);
            params.push(w2);
            params.push(b2);
        }
        let (wo, bo) = dense(w, d, zero_init_output);
        params.push(wo);
        params.push(bo);
        Self { spec, tag, params }
    }

    pub fn embedding(&self) -> TimeEmbedding {
        TimeEmbedding::new(self.spec.time_embed_dim, self.spec.freq_base)
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Parameters flattened in slot order (row major within a slot).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend(p.iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for p in &mut self.params {
            for v in p.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
    }

    /// Flattens per-slot gradient arrays from a backward pass, in the same
    /// order as [`Self::to_flat`]. Missing adjoints are zero.
    pub fn collect_grad(&self, tape: &Tape, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (slot, p) in self.params.iter().enumerate() {
            let leaf = tape
                .param_leaves()
                .into_iter()
                .find(|&((tag, s), _)| tag == self.tag && s == slot)
                .map(|(_, id)| id);
            match leaf.and_then(|id| grads.get(id)) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat(0.0).take(p.len())),
            }
        }
        out
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass, checked against the input dimension.
    pub fn forward(&self, t: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.eval(t, x))
    }

    fn temb_rows(&self, t: f64, rows: usize) -> Array2<f64> {
        let e = self.embedding().embed(t);
        let mut out = Array2::zeros((rows, e.len()));
        for mut r in out.rows_mut() {
            r.assign(&e);
        }
        out
    }

    fn concat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
        out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(a);
        out.slice_mut(ndarray::s![.., a.ncols()..]).assign(b);
        out
    }
}

fn swish_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(crate::autodiff::swish)
}

fn swish_prime_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        let s = crate::autodiff::sigmoid(v);
        s * (1.0 + v * (1.0 - s))
    })
}

impl VectorField for PolicyNetwork {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn eval(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        let temb = self.temb_rows(t, x.nrows());
        let pre0 = Self::concat(x, &temb).dot(&self.params[0]) + &self.params[1];
        let mut h = swish_arr(&pre0);
        for blk in 0..self.spec.blocks {
            let base = 2 + blk * BLOCK_SLOTS;
            let pre1 = Self::concat(&h, &temb).dot(&self.params[base]) + &self.params[base + 1];
            let u = swish_arr(&pre1);
            h = h + u.dot(&self.params[base + 2]) + &self.params[base + 3];
        }
        let base = 2 + self.spec.blocks * BLOCK_SLOTS;
        h.dot(&self.params[base]) + &self.params[base + 1]
    }

    fn eval_jvp(
        &self,
        t: f64,
        x: &Array2<f64>,
        tangents: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let temb = self.temb_rows(t, x.nrows());
        let tzero = Array2::zeros(temb.dim());

        let pre0 = Self::concat(x, &temb).dot(&self.params[0]) + &self.params[1];
        let dpre0 = swish_prime_arr(&pre0);
        let mut h = swish_arr(&pre0);
        let mut th: Vec<Array2<f64>> = tangents
            .iter()
            .map(|u| &Self::concat(u, &tzero).dot(&self.params[0]) * &dpre0)
            .collect();

        for blk in 0..self.spec.blocks {
            let base = 2 + blk * BLOCK_SLOTS;
            let pre1 = Self::concat(&h, &temb).dot(&self.params[base]) + &self.params[base + 1];
            let dpre1 = swish_prime_arr(&pre1);
            let u = swish_arr(&pre1);
            for tu in th.iter_mut() {
                let tpre = Self::concat(tu, &tzero).dot(&self.params[base]);
                let tact = &tpre * &dpre1;
                *tu = &*tu + &tact.dot(&self.params[base + 2]);
            }
            h = h + u.dot(&self.params[base + 2]) + &self.params[base + 3];
        }
        let base = 2 + self.spec.blocks * BLOCK_SLOTS;
        let out = h.dot(&self.params[base]) + &self.params[base + 1];
        let touts = th.iter().map(|tu| tu.dot(&self.params[base])).collect();
        (out, touts)
    }
}

/// A policy usable by the tape-based losses: a [`VectorField`] that can also
/// emit its forward pass (and tangent passes) as graph nodes.
pub trait Policy: VectorField {
    fn tape_forward(&self, tape: &mut Tape, t: f64, x: NodeId) -> NodeId;

    /// Shared-primal forward with one tangent output per tangent input.
    fn tape_forward_dual(
        &self,
        tape: &mut Tape,
        t: f64,
        x: NodeId,
        tangents: &[NodeId],
    ) -> (NodeId, Vec<NodeId>);
}

impl PolicyNetwork {
    fn tape_temb(&self, tape: &mut Tape, t: f64, rows: usize) -> NodeId {
        tape.constant(self.temb_rows(t, rows))
    }
}

impl Policy for PolicyNetwork {
    fn tape_forward(&self, tape: &mut Tape, t: f64, x: NodeId) -> NodeId {
        let (out, _) = self.tape_forward_dual(tape, t, x, &[]);
        out
    }

    fn tape_forward_dual(
        &self,
        tape: &mut Tape,
        t: f64,
        x: NodeId,
        tangents: &[NodeId],
    ) -> (NodeId, Vec<NodeId>) {
        let rows = tape.value(x).nrows();
        let temb = self.tape_temb(tape, t, rows);
        let tzero = tape.constant(Array2::zeros((rows, self.spec.time_embed_dim)));

        let dense = |tape: &mut Tape, this: &Self, input: NodeId, slot: usize| -> NodeId {
            let w = tape.param(this.tag, slot, &this.params[slot]);
            let b = tape.param(this.tag, slot + 1, &this.params[slot + 1]);
            let mm = tape.matmul(input, w);
            tape.add_row(mm, b)
        };
        // Tangent of a dense layer: t_in . W (bias drops out).
        let dense_tan = |tape: &mut Tape, this: &Self, tin: NodeId, slot: usize| -> NodeId {
            let w = tape.param(this.tag, slot, &this.params[slot]);
            tape.matmul(tin, w)
        };

        let xc = tape.concat_cols(x, temb);
        let pre0 = dense(tape, self, xc, 0);
        let mut h = tape.swish(pre0);
        let dpre0 = if tangents.is_empty() {
            None
        } else {
            Some(tape.swish_grad(pre0))
        };
        let mut th: Vec<NodeId> = tangents
            .iter()
            .map(|&u| {
                let uc = tape.concat_cols(u, tzero);
                let tpre = dense_tan(tape, self, uc, 0);
                tape.mul(tpre, dpre0.unwrap())
            })
            .collect();

        for blk in 0..self.spec.blocks {
            let base = 2 + blk * BLOCK_SLOTS;
            let hc = tape.concat_cols(h, temb);
            let pre1 = dense(tape, self, hc, base);
            let u = tape.swish(pre1);
            let w2 = tape.param(self.tag, base + 2, &self.params[base + 2]);
            let b2 = tape.param(self.tag, base + 3, &self.params[base + 3]);
            let proj = tape.matmul(u, w2);
            let proj = tape.add_row(proj, b2);
            let dpre1 = if th.is_empty() {
                None
            } else {
                Some(tape.swish_grad(pre1))
            };
            for tu in th.iter_mut() {
                let uc = tape.concat_cols(*tu, tzero);
                let tpre = dense_tan(tape, self, uc, base);
                let tact = tape.mul(tpre, dpre1.unwrap());
                let tproj = tape.matmul(tact, w2);
                *tu = tape.add(*tu, tproj);
            }
            h = tape.add(h, proj);
        }
        let base = 2 + self.spec.blocks * BLOCK_SLOTS;
        let out = dense(tape, self, h, base);
        let touts = th
            .iter()
            .map(|&tu| dense_tan(tape, self, tu, base))
            .collect();
        (out, touts)
    }
}

/// The identically-zero policy: reduces the controlled SDE to its base
/// diffusion.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy(pub usize);

impl VectorField for ZeroPolicy {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _t: f64, x: &Array2<f64>) -> Array2<f64> {
        Array2::zeros(x.dim())
    }
    fn eval_jvp(
        &self,
        _t: f64,
        x: &Array2<f64>,
        tangents: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        (
            Array2::zeros(x.dim()),
            tangents.iter().map(|u| Array2::zeros(u.dim())).collect(),
        )
    }
}

impl Policy for ZeroPolicy {
    fn tape_forward(&self, tape: &mut Tape, _t: f64, x: NodeId) -> NodeId {
        let dim = tape.value(x).dim();
        tape.constant(Array2::zeros(dim))
    }
    fn tape_forward_dual(
        &self,
        tape: &mut Tape,
        t: f64,
        x: NodeId,
        tangents: &[NodeId],
    ) -> (NodeId, Vec<NodeId>) {
        let out = self.tape_forward(tape, t, x);
        let touts = tangents
            .iter()
            .map(|&u| {
                let dim = tape.value(u).dim();
                tape.constant(Array2::zeros(dim))
            })
            .collect();
        (out, touts)
    }
}
