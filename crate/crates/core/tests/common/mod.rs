//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use dcs_core::prior::GmmPrior;
use dcs_core::schedule::Schedule;

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// `erfc` from the Maclaurin series of `erf` for small arguments and a
/// Lentz-evaluated continued fraction in the tail.
pub fn erfc_oracle(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_oracle(-x);
    }
    if x < 3.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

pub fn phi_oracle(x: f64) -> f64 {
    0.5 * erfc_oracle(-x / std::f64::consts::SQRT_2)
}

/// Double-double arithmetic: value `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = two_sum(p, e + self.hi * o.lo + self.lo * o.hi);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (hi, lo) = two_sum(s, e + self.lo + o.lo);
        Dd { hi, lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, -o.hi);
        let (hi, lo) = two_sum(s, e + self.lo - o.lo);
        Dd { hi, lo }
    }
}

/// `prod_{i<n} (1 - beta_i)` for the linear ramp, multiplied out in
/// double-double precision.
pub fn linear_ramp_alpha_bar_dd(n: usize, beta_min: f64, beta_max: f64) -> f64 {
    let mut acc = Dd::new(1.0);
    for i in 0..n {
        let frac = Dd::new(i as f64).mul(Dd::new(1.0 / (n - 1) as f64));
        let beta = Dd::new(beta_min).add(Dd::new(beta_max - beta_min).mul(frac));
        acc = acc.mul(Dd::new(1.0).sub(beta));
    }
    acc.hi + acc.lo
}

/// `E[x0 | x_t, y]` for a mixture prior, found by conditioning every prior
/// component jointly on the stacked observation `[x_t; y] = [a I; A] x0 + noise`
/// with noise covariance `diag(s^2 I, sigma_y^2 I)` and reweighting by the
/// stacked evidence.
pub fn stacked_posterior_mean(
    prior: &GmmPrior,
    a_mat: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_y: f64,
    x_t: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
) -> DVector<f64> {
    let d = prior.dim();
    let m = a_mat.nrows();
    let a = schedule.alpha_bar(t).sqrt();
    let s2 = schedule.sigma(t).powi(2);
    let mut h = DMatrix::zeros(d + m, d);
    h.view_mut((0, 0), (d, d)).copy_from(&(DMatrix::<f64>::identity(d, d) * a));
    h.view_mut((d, 0), (m, d)).copy_from(a_mat);
    let mut noise = DMatrix::zeros(d + m, d + m);
    for i in 0..d {
        noise[(i, i)] = s2;
    }
    for i in 0..m {
        noise[(d + i, d + i)] = sigma_y * sigma_y;
    }
    let obs = DVector::from_iterator(d + m, x_t.iter().chain(y.iter()).copied());
    let mut logw = Vec::new();
    let mut means = Vec::new();
    for k in 0..prior.n_components() {
        let v = DMatrix::from_diagonal(&prior.variances()[k]);
        let mu = &prior.means()[k];
        let s = &h * &v * h.transpose() + &noise;
        let s_inv = s.clone().try_inverse().expect("stacked covariance is invertible");
        let innov = &obs - &h * mu;
        let quad = (innov.transpose() * &s_inv * &innov)[(0, 0)];
        let logdet = s.determinant().ln();
        logw.push(prior.weights()[k].ln() - 0.5 * (quad + logdet));
        means.push(mu + &v * h.transpose() * &s_inv * &innov);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    means.iter().zip(&w).fold(DVector::zeros(d), |acc, (mk, wk)| acc + mk * (wk / total))
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Dense matrix of `f` obtained by applying it to every basis vector.
pub fn materialize(n_in: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..n_in)
        .map(|j| {
            let mut e = DVector::zeros(n_in);
            e[j] = 1.0;
            f(&e)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Magnitudes of the length-`n` DFT evaluated term by term.
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, xj) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (f * j % n) as f64 / n as f64;
                re += xj * ang.cos();
                im += xj * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}
