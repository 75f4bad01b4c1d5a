//! Gaussian-mixture data priors with closed-form diffused scores.
//!
//! Under the variance-preserving forward process a mixture stays a mixture:
//! component `k` moves to mean `sqrt(ab) mu_k` and variance `ab v_k + sigma^2`.
//! That gives exact marginal scores, exact `E[x0 | x_t]`, and (for linear
//! measurements) exact conditional posteriors, which stand in for a trained
//! noise-prediction network.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcsError, Result};
use crate::operators::LinearOperator;
use crate::rng::standard_normal;
use crate::schedule::Schedule;

/// Variance used to represent a point mass without a singular density.
pub const POINT_MASS_VARIANCE: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Something that can report the marginal score of the diffused data
/// distribution, i.e. what a trained network approximates.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    /// `grad log p_t(x_t)`.
    fn score(&self, x_t: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>>;

    /// Noise prediction `-sigma_t * score`.
    fn eps(&self, x_t: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>> {
        let sigma = schedule.sigma(t);
        Ok(self.score(x_t, t, schedule)? * -sigma)
    }
}

/// Posterior-mean estimate `(x_t - sigma_t eps) / sqrt(alpha_bar_t)`.
///
/// At `t = 0` there is no noise and `x_t` is returned unchanged.
pub fn tweedie(
    x_t: &DVector<f64>,
    eps: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
) -> DVector<f64> {
    if t == 0 {
        return x_t.clone();
    }
    (x_t - eps * schedule.sigma(t)) / schedule.alpha_bar(t).sqrt()
}

/// Normalizes log-weights in place into probabilities (log-sum-exp).
pub(crate) fn softmax_in_place(logw: &mut [f64]) {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logw.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logw.iter_mut() {
        *l /= total;
    }
}

fn log_sum_exp(logw: &[f64]) -> f64 {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logw.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn check_finite(x: &DVector<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DcsError::Argument("input vector contains NaN or infinity".into()))
    }
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<DVector<f64>>,
}

/// JSON shape of a [`GmmPrior`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl TryFrom<GmmSpec> for GmmPrior {
    type Error = DcsError;

    fn try_from(spec: GmmSpec) -> Result<Self> {
        GmmPrior::new(
            spec.weights,
            spec.means.into_iter().map(DVector::from_vec).collect(),
            spec.variances.into_iter().map(DVector::from_vec).collect(),
        )
    }
}

impl From<GmmPrior> for GmmSpec {
    fn from(p: GmmPrior) -> Self {
        GmmSpec {
            weights: p.weights,
            means: p.means.iter().map(|m| m.iter().copied().collect()).collect(),
            variances: p.variances.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }
}

impl GmmPrior {
    /// Validates and builds a mixture. Weights within `1e-6` of summing to one
    /// are renormalized exactly.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        variances: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(DcsError::Config("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(DcsError::Config(format!(
                "mixture has {k} weights but {} means and {} variance vectors",
                means.len(),
                variances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(DcsError::Config("mixture dimension must be positive".into()));
        }
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != d || v.len() != d {
                return Err(DcsError::Config(
                    "all mixture means and variances must share one dimension".into(),
                ));
            }
            if !m.iter().all(|x| x.is_finite()) {
                return Err(DcsError::Config("mixture means must be finite".into()));
            }
            if !v.iter().all(|x| *x > 0.0 && x.is_finite()) {
                return Err(DcsError::Config("mixture variances must be positive".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(DcsError::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(DcsError::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![DVector::from_element(d, variance)])
    }

    /// Near-degenerate Gaussian concentrated at `mean`.
    pub fn point_mass(mean: DVector<f64>) -> Result<Self> {
        Self::gaussian(mean, POINT_MASS_VARIANCE)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[DVector<f64>] {
        &self.variances
    }

    /// Mixture of the forward-process marginal `p_t`.
    pub fn marginal(&self, t: usize, schedule: &Schedule) -> Result<GmmPrior> {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let s2 = schedule.sigma(t).powi(2);
        Ok(GmmPrior {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * ab.sqrt()).collect(),
            variances: self.variances.iter().map(|v| v.map(|vi| ab * vi + s2)).collect(),
        })
    }

    fn component_log_densities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| {
                let quad: f64 = x
                    .iter()
                    .zip(m.iter().zip(v.iter()))
                    .map(|(xi, (mi, vi))| (LN_2PI + vi.ln()) + (xi - mi).powi(2) / vi)
                    .sum();
                w.ln() - 0.5 * quad
            })
            .collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("log_density", self.dim(), x.len())?;
        check_finite(x)?;
        Ok(log_sum_exp(&self.component_log_densities(x)))
    }

    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim("responsibilities", self.dim(), x.len())?;
        check_finite(x)?;
        let mut r = self.component_log_densities(x);
        softmax_in_place(&mut r);
        Ok(r)
    }

    /// `grad log p(x)` of this mixture (no diffusion applied).
    pub fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.responsibilities(x)?;
        let mut g = DVector::zeros(self.dim());
        for ((rk, m), v) in r.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..g.len() {
                g[i] -= rk * (x[i] - m[i]) / v[i];
            }
        }
        Ok(g)
    }

    /// Closed-form `E[x0 | x_t]`: responsibilities under the diffused mixture
    /// times each component's Gaussian conditional mean.
    pub fn posterior_mean(
        &self,
        x_t: &DVector<f64>,
        t: usize,
        schedule: &Schedule,
    ) -> Result<DVector<f64>> {
        let marginal = self.marginal(t, schedule)?;
        let r = marginal.responsibilities(x_t)?;
        let a = schedule.alpha_bar(t).sqrt();
        let s2 = schedule.sigma(t).powi(2);
        let mut out = DVector::zeros(self.dim());
        for ((rk, m), v) in r.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..out.len() {
                let gain = v[i] * a / (a * a * v[i] + s2);
                out[i] += rk * (m[i] + gain * (x_t[i] - a * m[i]));
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = standard_normal(rng, self.dim());
        z.component_mul(&self.variances[k].map(f64::sqrt)) + &self.means[k]
    }

    pub fn to_dense(&self) -> DenseGmm {
        DenseGmm {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self
                .variances
                .iter()
                .map(DMatrix::from_diagonal)
                .collect(),
        }
    }

    /// Exact posterior `p(x0 | y)` for `y = A x0 + N(0, sigma_y^2 I)`.
    ///
    /// Each component is conditioned with the Kalman update and reweighted by
    /// its evidence `N(y; A mu, A V A^T + sigma_y^2 I)`.
    pub fn conditional_posterior(
        &self,
        op: &LinearOperator,
        y: &DVector<f64>,
        sigma_y: f64,
    ) -> Result<DenseGmm> {
        self.to_dense().conditional_posterior(op, y, sigma_y)
    }
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn score(&self, x_t: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>> {
        self.marginal(t, schedule)?.grad_log_density(x_t)
    }
}

/// Closed-form `E[x0 | x_t]` for a mixture prior.
pub fn posterior_mean_oracle(
    prior: &GmmPrior,
    x_t: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    prior.posterior_mean(x_t, t, schedule)
}

/// Mixture of full-covariance Gaussians; conditioning on a linear
/// measurement produces these from a diagonal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Rejects factorizations whose pivots span more than 1e12 in the squared
/// scale, i.e. numerically singular covariances.
fn well_conditioned(chol: &Cholesky<f64, Dyn>) -> bool {
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    min > 0.0 && (min / max).powi(2) > 1e-12
}

struct FactoredComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl DenseGmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(DcsError::Config("dense mixture component counts disagree".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) || covs.iter().any(|c| c.shape() != (d, d)) {
            return Err(DcsError::Config("dense mixture shapes disagree".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(DcsError::Config(format!("mixture weights sum to {total}")));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
            means,
            covs,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    pub fn marginal(&self, t: usize, schedule: &Schedule) -> Result<DenseGmm> {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let s2 = schedule.sigma(t).powi(2);
        let d = self.dim();
        Ok(DenseGmm {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * ab.sqrt()).collect(),
            covs: self
                .covs
                .iter()
                .map(|c| c * ab + DMatrix::identity(d, d) * s2)
                .collect(),
        })
    }

    fn factor(&self) -> Result<Vec<FactoredComponent>> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covs))
            .map(|(w, (m, c))| {
                let chol = Cholesky::new(c.clone()).ok_or_else(|| {
                    DcsError::DegeneratePosterior("component covariance is not positive definite".into())
                })?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(FactoredComponent {
                    log_weight: w.ln(),
                    mean: m.clone(),
                    chol,
                    log_det,
                })
            })
            .collect()
    }

    /// Responsibilities and whitened offsets `C_k^{-1} (x - mu_k)`.
    fn assign(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        check_dim("dense mixture input", self.dim(), x.len())?;
        check_finite(x)?;
        let d = self.dim() as f64;
        let mut logw = Vec::with_capacity(self.weights.len());
        let mut solved = Vec::with_capacity(self.weights.len());
        for comp in self.factor()? {
            let diff = x - &comp.mean;
            let sol = comp.chol.solve(&diff);
            logw.push(comp.log_weight - 0.5 * (d * LN_2PI + comp.log_det + diff.dot(&sol)));
            solved.push(sol);
        }
        Ok((logw, solved))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(log_sum_exp(&self.assign(x)?.0))
    }

    pub fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (mut r, solved) = self.assign(x)?;
        softmax_in_place(&mut r);
        Ok(r.iter()
            .zip(&solved)
            .fold(DVector::zeros(self.dim()), |acc, (rk, s)| acc - s * *rk))
    }

    /// Direct mixture expectation of `E[x0 | x_t]`, component by component:
    /// `mu_k + a V_k (a^2 V_k + s^2 I)^{-1} (x_t - a mu_k)`.
    pub fn posterior_mean(
        &self,
        x_t: &DVector<f64>,
        t: usize,
        schedule: &Schedule,
    ) -> Result<DVector<f64>> {
        let marginal = self.marginal(t, schedule)?;
        let (mut r, solved) = marginal.assign(x_t)?;
        softmax_in_place(&mut r);
        let a = schedule.alpha_bar(t).sqrt();
        let mut out = DVector::zeros(self.dim());
        for ((rk, s), (m, c)) in r.iter().zip(&solved).zip(self.means.iter().zip(&self.covs)) {
            out += (m + c * s * a) * *rk;
        }
        Ok(out)
    }

    pub fn conditional_posterior(
        &self,
        op: &LinearOperator,
        y: &DVector<f64>,
        sigma_y: f64,
    ) -> Result<DenseGmm> {
        check_dim("conditional_posterior signal", op.in_dim(), self.dim())?;
        check_dim("conditional_posterior measurement", op.out_dim(), y.len())?;
        if !(sigma_y >= 0.0) {
            return Err(DcsError::Argument(format!("sigma_y must be >= 0, got {sigma_y}")));
        }
        let a = op.dense_matrix();
        let m = op.out_dim();
        let mut logw = Vec::with_capacity(self.weights.len());
        let mut means = Vec::with_capacity(self.weights.len());
        let mut covs = Vec::with_capacity(self.weights.len());
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let av = &a * v;
            let s = &av * a.transpose() + DMatrix::identity(m, m) * sigma_y.powi(2);
            let chol = Cholesky::new(s)
                .filter(well_conditioned)
                .ok_or_else(|| {
                    DcsError::DegeneratePosterior(
                        "measurement covariance A V A^T + sigma_y^2 I is singular".into(),
                    )
                })?;
            let innovation = y - &a * mu;
            let s_inv_innov = chol.solve(&innovation);
            let s_inv_av = chol.solve(&av);
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            logw.push(
                w.ln() - 0.5 * (m as f64 * LN_2PI + log_det + innovation.dot(&s_inv_innov)),
            );
            means.push(mu + av.transpose() * s_inv_innov);
            let cov = v - av.transpose() * s_inv_av;
            covs.push((&cov + cov.transpose()) * 0.5);
        }
        softmax_in_place(&mut logw);
        Ok(DenseGmm {
            weights: logw,
            means,
            covs,
        })
    }
}

impl ScoreModel for DenseGmm {
    fn dim(&self) -> usize {
        DenseGmm::dim(self)
    }

    fn score(&self, x_t: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>> {
        self.marginal(t, schedule)?.grad_log_density(x_t)
    }
}
