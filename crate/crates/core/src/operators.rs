//! Linear measurement operators and the Gaussian measurement model.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcsError, Result};
use crate::rng::standard_normal;

/// Frequencies below this fraction of the peak response are dropped from the
/// circular-convolution pseudoinverse.
pub const CIRCULANT_CUTOFF: f64 = 1e-6;
/// Singular values below this fraction of the largest are treated as zero.
pub const DENSE_CUTOFF: f64 = 1e-10;

/// Operator description as it appears in configuration files. The signal
/// dimension is supplied separately when the operator is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    Mask { keep: Vec<usize> },
    Downsample { block: usize },
    CircConv { kernel: Vec<f64> },
    Dense { rows: Vec<Vec<f64>> },
}

impl OperatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorSpec::Identity => "identity",
            OperatorSpec::Mask { .. } => "mask",
            OperatorSpec::Downsample { .. } => "downsample",
            OperatorSpec::CircConv { .. } => "circ_conv",
            OperatorSpec::Dense { .. } => "dense",
        }
    }

    pub fn build(&self, dim: usize) -> Result<LinearOperator> {
        match self {
            OperatorSpec::Identity => Ok(LinearOperator::identity(dim)),
            OperatorSpec::Mask { keep } => LinearOperator::mask(dim, keep.clone()),
            OperatorSpec::Downsample { block } => LinearOperator::downsample(dim, *block),
            OperatorSpec::CircConv { kernel } => LinearOperator::circular_conv(dim, kernel.clone()),
            OperatorSpec::Dense { rows } => {
                let m = rows.len();
                if m == 0 || rows.iter().any(|r| r.len() != dim) {
                    return Err(DcsError::Config(format!(
                        "dense operator rows must be nonempty with {dim} columns each"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                LinearOperator::dense(DMatrix::from_row_slice(m, dim, &flat))
            }
        }
    }
}

/// Circulant operator stored by the first column of its matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Circulant {
    kernel: Vec<f64>,
    column: Vec<f64>,
    pinv_column: Vec<f64>,
    spectrum: Vec<f64>,
}

impl Circulant {
    fn new(dim: usize, kernel: Vec<f64>) -> Result<Self> {
        if kernel.is_empty() || kernel.len() > dim {
            return Err(DcsError::Config(format!(
                "convolution kernel length {} must be in 1..={dim}",
                kernel.len()
            )));
        }
        if !kernel.iter().all(|k| k.is_finite()) || kernel.iter().all(|k| *k == 0.0) {
            return Err(DcsError::Config("convolution kernel must be finite and nonzero".into()));
        }
        // kernel tap j acts at offset j - center
        let center = kernel.len() / 2;
        let mut column = vec![0.0; dim];
        for (j, k) in kernel.iter().enumerate() {
            column[(j + dim - center) % dim] += k;
        }
        let (re, im) = dft(&column);
        let spectrum: Vec<f64> = re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect();
        let peak = spectrum.iter().copied().fold(0.0, f64::max);
        // inverse eigenvalues 1/lambda = conj(lambda)/|lambda|^2 on retained frequencies
        let mut inv_re = vec![0.0; dim];
        let mut inv_im = vec![0.0; dim];
        for f in 0..dim {
            if spectrum[f] >= CIRCULANT_CUTOFF * peak {
                let m2 = spectrum[f] * spectrum[f];
                inv_re[f] = re[f] / m2;
                inv_im[f] = -im[f] / m2;
            }
        }
        let pinv_column = inverse_dft_real(&inv_re, &inv_im);
        Ok(Self {
            kernel,
            column,
            pinv_column,
            spectrum,
        })
    }

    fn apply_column(col: &[f64], x: &DVector<f64>) -> DVector<f64> {
        let n = col.len();
        DVector::from_fn(n, |i, _| (0..n).map(|m| col[(i + n - m) % n] * x[m]).sum())
    }

    fn adjoint_column(col: &[f64], u: &DVector<f64>) -> DVector<f64> {
        let n = col.len();
        DVector::from_fn(n, |m, _| (0..n).map(|i| col[(i + n - m) % n] * u[i]).sum())
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Magnitudes of the operator's eigenvalues (DFT of the first column).
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Ratio of the largest to the smallest frequency response kept by the
    /// pseudoinverse.
    pub fn retained_condition_number(&self) -> f64 {
        let peak = self.spectrum.iter().copied().fold(0.0, f64::max);
        let floor = self
            .spectrum
            .iter()
            .copied()
            .filter(|m| *m >= CIRCULANT_CUTOFF * peak)
            .fold(f64::INFINITY, f64::min);
        peak / floor
    }
}

fn dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for f in 0..n {
        for (m, v) in x.iter().enumerate() {
            let angle = -2.0 * PI * ((f * m) % n) as f64 / n as f64;
            re[f] += v * angle.cos();
            im[f] += v * angle.sin();
        }
    }
    (re, im)
}

fn inverse_dft_real(re: &[f64], im: &[f64]) -> Vec<f64> {
    let n = re.len();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|f| {
                    let angle = 2.0 * PI * ((f * j) % n) as f64 / n as f64;
                    re[f] * angle.cos() - im[f] * angle.sin()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl DenseOperator {
    fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(DcsError::Config("dense operator must be nonempty".into()));
        }
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(DcsError::Config("dense operator entries must be finite".into()));
        }
        let pinv = truncated_pinv(&matrix, DENSE_CUTOFF);
        Ok(Self { matrix, pinv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// `V S^+ U^T` keeping singular values at or above `rel_cutoff * s_max`.
pub fn truncated_pinv(matrix: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    if matrix.nrows() < matrix.ncols() {
        return truncated_pinv(&matrix.transpose(), rel_cutoff).transpose();
    }
    let (u, s, v) = jacobi_svd(matrix);
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(matrix.ncols(), matrix.nrows());
    for (j, sj) in s.iter().enumerate() {
        if *sj > 0.0 && *sj >= rel_cutoff * s_max {
            pinv += v.column(j) * u.column(j).transpose() / *sj;
        }
    }
    pinv
}

/// One-sided Jacobi SVD of a matrix with at least as many rows as columns:
/// returns `(U, s, V)` with `A = U diag(s) V^T`. Columns of `U` belonging to
/// zero singular values are left as zeros.
fn jacobi_svd(matrix: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = matrix.ncols();
    let mut g = matrix.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = g.column(p).norm_squared();
                let beta = g.column(q).norm_squared();
                let gamma = g.column(p).dot(&g.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut g, &mut v] {
                    for i in 0..m.nrows() {
                        let (a, b) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * a - s * b;
                        m[(i, q)] = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..n).map(|j| g.column(j).norm()).collect();
    for (j, sj) in s.iter().enumerate() {
        if *sj > 0.0 {
            g.column_mut(j).unscale_mut(*sj);
        }
    }
    (g, s, v)
}

/// Linear measurement map `A`.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Identity { dim: usize },
    /// Keeps the listed coordinates, in order.
    Mask { dim: usize, keep: Vec<usize> },
    /// Averages consecutive blocks of `block` coordinates.
    Downsample { dim: usize, block: usize },
    /// Circular convolution with a centered kernel.
    CircularConv(Circulant),
    Dense(DenseOperator),
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity { dim }
    }

    pub fn mask(dim: usize, keep: Vec<usize>) -> Result<Self> {
        if keep.is_empty() {
            return Err(DcsError::Config("mask must keep at least one index".into()));
        }
        let mut seen = vec![false; dim];
        for &i in &keep {
            if i >= dim {
                return Err(DcsError::Config(format!("mask index {i} out of range for dimension {dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DcsError::Config(format!("mask index {i} repeated")));
            }
        }
        Ok(LinearOperator::Mask { dim, keep })
    }

    pub fn downsample(dim: usize, block: usize) -> Result<Self> {
        if block == 0 || !dim.is_multiple_of(block) {
            return Err(DcsError::Config(format!(
                "downsample block {block} must divide dimension {dim}"
            )));
        }
        Ok(LinearOperator::Downsample { dim, block })
    }

    pub fn circular_conv(dim: usize, kernel: Vec<f64>) -> Result<Self> {
        Ok(LinearOperator::CircularConv(Circulant::new(dim, kernel)?))
    }

    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        Ok(LinearOperator::Dense(DenseOperator::new(matrix)?))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LinearOperator::Identity { .. } => "identity",
            LinearOperator::Mask { .. } => "mask",
            LinearOperator::Downsample { .. } => "downsample",
            LinearOperator::CircularConv(_) => "circ_conv",
            LinearOperator::Dense(_) => "dense",
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim }
            | LinearOperator::Mask { dim, .. }
            | LinearOperator::Downsample { dim, .. } => *dim,
            LinearOperator::CircularConv(c) => c.column.len(),
            LinearOperator::Dense(d) => d.matrix.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Mask { keep, .. } => keep.len(),
            LinearOperator::Downsample { dim, block } => dim / block,
            LinearOperator::CircularConv(c) => c.column.len(),
            LinearOperator::Dense(d) => d.matrix.nrows(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("operator apply", self.in_dim(), x.len())?;
        Ok(match self {
            LinearOperator::Identity { .. } => x.clone(),
            LinearOperator::Mask { keep, .. } => DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i])),
            LinearOperator::Downsample { block, .. } => DVector::from_iterator(
                self.out_dim(),
                x.as_slice().chunks(*block).map(|c| c.iter().sum::<f64>() / *block as f64),
            ),
            LinearOperator::CircularConv(c) => Circulant::apply_column(&c.column, x),
            LinearOperator::Dense(d) => &d.matrix * x,
        })
    }

    pub fn adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("operator adjoint", self.out_dim(), u.len())?;
        Ok(match self {
            LinearOperator::Identity { .. } => u.clone(),
            LinearOperator::Mask { dim, keep } => {
                let mut x = DVector::zeros(*dim);
                for (v, &i) in u.iter().zip(keep) {
                    x[i] = *v;
                }
                x
            }
            LinearOperator::Downsample { dim, block } => {
                DVector::from_fn(*dim, |i, _| u[i / block] / *block as f64)
            }
            LinearOperator::CircularConv(c) => Circulant::adjoint_column(&c.column, u),
            LinearOperator::Dense(d) => d.matrix.tr_mul(u),
        })
    }

    /// Moore-Penrose pseudoinverse action `A^+ u`.
    pub fn pinv_apply(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("operator pinv_apply", self.out_dim(), u.len())?;
        Ok(match self {
            LinearOperator::Identity { .. } | LinearOperator::Mask { .. } => self.adjoint(u)?,
            // rows are orthogonal with squared norm 1/b, so A^+ = b A^T
            LinearOperator::Downsample { dim, block } => DVector::from_fn(*dim, |i, _| u[i / block]),
            LinearOperator::CircularConv(c) => Circulant::apply_column(&c.pinv_column, u),
            LinearOperator::Dense(d) => &d.pinv * u,
        })
    }

    /// Explicit `out_dim x in_dim` matrix, built column by column.
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        if let LinearOperator::Dense(d) = self {
            return d.matrix.clone();
        }
        let n = self.in_dim();
        let mut m = DMatrix::zeros(self.out_dim(), n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            m.set_column(j, &self.apply(&e).expect("basis vector has input dimension"));
        }
        m
    }
}

/// Normalized Gaussian kernel with the given standard deviation, truncated at
/// `radius` taps on each side.
pub fn gaussian_kernel(std: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (std * std)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Uniform `len`-tap kernel, the 1-D stand-in for a linear motion blur.
pub fn box_kernel(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

/// A noisy observation `y = A x + sigma_y * eta`.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub y: DVector<f64>,
    pub sigma_y: f64,
    pub op: Arc<LinearOperator>,
}

impl Measurement {
    pub fn new(op: Arc<LinearOperator>, y: DVector<f64>, sigma_y: f64) -> Result<Self> {
        check_dim("measurement", op.out_dim(), y.len())?;
        if !(sigma_y >= 0.0) || !sigma_y.is_finite() {
            return Err(DcsError::Argument(format!("sigma_y must be finite and >= 0, got {sigma_y}")));
        }
        Ok(Self { y, sigma_y, op })
    }
}

pub fn measure(
    op: &Arc<LinearOperator>,
    x0: &DVector<f64>,
    sigma_y: f64,
    rng: &mut impl rand::Rng,
) -> Result<Measurement> {
    let clean = op.apply(x0)?;
    let noise = standard_normal(rng, clean.len());
    Measurement::new(op.clone(), clean + noise * sigma_y, sigma_y)
}
