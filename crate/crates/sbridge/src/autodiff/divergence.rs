use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

/// A differentiable vector field v(t, x) with matching input/output
/// dimension, evaluated on batches of row vectors.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &Array2<f64>) -> Array2<f64>;

    /// Value together with Jacobian-vector products (dv/dx) u for each
    /// tangent u. Tangents share the primal pass.
    fn eval_jvp(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>])
        -> (Array2<f64>, Vec<Array2<f64>>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMethod {
    Exact,
    Hutchinson,
}

/// How the loss modules estimate the divergence terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// One tangent pass per coordinate; intended for d <= 4.
    Exact,
    /// Rademacher-probe trace estimation.
    Hutchinson { probes: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub method: DivergenceMethod,
    pub probes_used: usize,
    /// Sample standard error; 0 for the exact method.
    pub standard_error: f64,
}

/// Per-row exact divergence of `field` at every point of `x`, via one
/// Jacobian-vector product per coordinate.
pub fn divergence_exact_batch(field: &dyn VectorField, t: f64, x: &Array2<f64>) -> Array1<f64> {
    let d = field.dim();
    let n = x.nrows();
    let tangents: Vec<Array2<f64>> = (0..d)
        .map(|i| {
            let mut e = Array2::zeros((n, d));
            e.column_mut(i).fill(1.0);
            e
        })
        .collect();
    let (_, jvps) = field.eval_jvp(t, x, &tangents);
    let mut div = Array1::zeros(n);
    for (i, jvp) in jvps.iter().enumerate() {
        for r in 0..n {
            div[r] += jvp[[r, i]];
        }
    }
    div
}

/// Exact divergence at a single point.
pub fn divergence_exact(
    field: &dyn VectorField,
    t: f64,
    x: ArrayView1<f64>,
) -> Result<DivergenceEstimate> {
    if x.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x.len(),
        });
    }
    let xb = x.insert_axis(ndarray::Axis(0)).to_owned();
    let div = divergence_exact_batch(field, t, &xb);
    Ok(DivergenceEstimate {
        value: div[0],
        method: DivergenceMethod::Exact,
        probes_used: 0,
        standard_error: 0.0,
    })
}

/// Hutchinson estimate of the divergence at a single point with
/// Rademacher probes: E[eps^T (dv/dx) eps] = tr(dv/dx).
pub fn divergence_hutchinson<R: Rng>(
    field: &dyn VectorField,
    t: f64,
    x: ArrayView1<f64>,
    probes: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate> {
    if probes == 0 {
        return Err(Error::ZeroProbes);
    }
    let d = field.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let xb = x.insert_axis(ndarray::Axis(0)).to_owned();
    let tangents: Vec<Array2<f64>> = (0..probes)
        .map(|_| {
            Array2::from_shape_fn((1, d), |_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        })
        .collect();
    let (_, jvps) = field.eval_jvp(t, &xb, &tangents);
    let estimates: Vec<f64> = tangents
        .iter()
        .zip(&jvps)
        .map(|(eps, jvp)| eps.row(0).dot(&jvp.row(0)))
        .collect();
    let mean = estimates.iter().sum::<f64>() / probes as f64;
    let standard_error = if probes > 1 {
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
        (var / probes as f64).sqrt()
    } else {
        0.0
    };
    Ok(DivergenceEstimate {
        value: mean,
        method: DivergenceMethod::Hutchinson,
        probes_used: probes,
        standard_error,
    })
}

/// A time-independent linear field v(x) = A x. Used by tests and the
/// integration-by-parts diagnostics.
pub struct LinearField {
    pub matrix: Array2<f64>,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn eval(&self, _t: f64, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.matrix.t())
    }

    fn eval_jvp(
        &self,
        t: f64,
        x: &Array2<f64>,
        tangents: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let v = self.eval(t, x);
        let jvps = tangents.iter().map(|u| u.dot(&self.matrix.t())).collect();
        (v, jvps)
    }
}
