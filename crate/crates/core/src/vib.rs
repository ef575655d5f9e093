//! Stochastic per-layer masks and the information-bottleneck penalty.
//!
//! Each encoder layer `l` owns a mean vector `mu[l]` and a log standard
//! deviation `log_sigma[l]`. A forward pass of the pruned network multiplies
//! layer `l`'s output by `z = mu + eps * sigma`, `eps ~ N(0, I)`, shared by
//! every token position. The penalty on the masks is
//! `sum_l beta[l] * sum_j ln(1 + mu_j^2 / sigma_j^2)`, and
//! `alpha_j = mu_j^2 / sigma_j^2` decides which dimensions survive pruning.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CvibError, Result};
use crate::scalar::Scalar;

/// Mean `N(1, 0.01^2)`, log standard deviation `N(-9, 0.01^2)`.
pub const MU_INIT: (f64, f64) = (1.0, 0.01);
pub const LOG_SIGMA_INIT: (f64, f64) = (-9.0, 0.01);
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MaskParams<F> {
    pub mu: Vec<Array1<F>>,
    pub log_sigma: Vec<Array1<F>>,
    /// Per-layer penalty weight; not trained.
    pub beta: Vec<f64>,
}

impl<F: Scalar> MaskParams<F> {
    pub fn init<R: Rng>(n_layers: usize, dim: usize, beta: &[f64], rng: &mut R) -> Result<Self> {
        if beta.len() != n_layers {
            return Err(CvibError::Config(format!(
                "{} beta values for {} layers",
                beta.len(),
                n_layers
            )));
        }
        let mu_dist = Normal::new(MU_INIT.0, MU_INIT.1).expect("valid normal");
        let ls_dist = Normal::new(LOG_SIGMA_INIT.0, LOG_SIGMA_INIT.1).expect("valid normal");
        let mut mu = Vec::with_capacity(n_layers);
        let mut log_sigma = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            mu.push(Array1::from_shape_simple_fn(dim, || F::of(mu_dist.sample(rng))));
            log_sigma.push(Array1::from_shape_simple_fn(dim, || F::of(ls_dist.sample(rng))));
        }
        Ok(MaskParams {
            mu,
            log_sigma,
            beta: beta.to_vec(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, |m| m.len())
    }

    pub fn sigma(&self, layer: usize) -> Array1<F> {
        self.log_sigma[layer].mapv(|v| v.exp())
    }

    pub fn zeros_like(&self) -> Self {
        MaskParams {
            mu: self.mu.iter().map(|m| Array1::zeros(m.len())).collect(),
            log_sigma: self.log_sigma.iter().map(|m| Array1::zeros(m.len())).collect(),
            beta: self.beta.clone(),
        }
    }

    /// Flat views `mu.0, log_sigma.0, mu.1, ...`.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        for (l, (m, s)) in self.mu.iter().zip(&self.log_sigma).enumerate() {
            out.push((format!("mask.{l}.mu"), m.as_slice().expect("standard layout")));
            out.push((format!("mask.{l}.log_sigma"), s.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out = Vec::new();
        for (l, (m, s)) in self.mu.iter_mut().zip(self.log_sigma.iter_mut()).enumerate() {
            out.push((format!("mask.{l}.mu"), m.as_slice_mut().expect("standard layout")));
            out.push((format!("mask.{l}.log_sigma"), s.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> MaskParams<G> {
        let c = |a: &Array1<F>| a.mapv(|v| G::of(v.as_f64()));
        MaskParams {
            mu: self.mu.iter().map(c).collect(),
            log_sigma: self.log_sigma.iter().map(c).collect(),
            beta: self.beta.clone(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let bad = self
            .mu
            .iter()
            .chain(&self.log_sigma)
            .any(|a| a.iter().any(|v| !v.is_finite()));
        if bad {
            Err(CvibError::NonFinite("mask parameters".into()))
        } else {
            Ok(())
        }
    }
}

/// One sampled mask `z = mu + eps * sigma` and the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector<F> {
    pub layer: usize,
    pub z: Array1<F>,
    pub eps: Array1<F>,
}

impl<F: Scalar> MaskVector<F> {
    /// Mask for a given noise vector; `eps = 0` yields `mu`.
    pub fn from_noise(params: &MaskParams<F>, layer: usize, eps: Array1<F>) -> Self {
        let z = &params.mu[layer] + &(&eps * &params.sigma(layer));
        MaskVector { layer, z, eps }
    }
}

pub fn sample_mask<F: Scalar, R: Rng>(params: &MaskParams<F>, layer: usize, rng: &mut R) -> MaskVector<F> {
    let eps = Array1::from_shape_simple_fn(params.dim(), || {
        F::of(StandardNormal.sample(rng))
    });
    MaskVector::from_noise(params, layer, eps)
}

/// Masks for a whole batch, one `(batch, d)` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks<F> {
    pub z: Vec<Array2<F>>,
    /// Noise used for each row; absent for deterministic masks.
    pub eps: Option<Vec<Array2<F>>>,
}

impl<F: Scalar> BatchMasks<F> {
    /// Draws noise for every layer. With `shared` a single draw per layer is
    /// broadcast over the batch, otherwise each example gets its own.
    pub fn sample<R: Rng>(params: &MaskParams<F>, batch: usize, shared: bool, rng: &mut R) -> Self {
        let mut z = Vec::with_capacity(params.n_layers());
        let mut eps = Vec::with_capacity(params.n_layers());
        for l in 0..params.n_layers() {
            let rows: Vec<MaskVector<F>> = if shared {
                vec![sample_mask(params, l, rng); 1]
            } else {
                (0..batch).map(|_| sample_mask(params, l, rng)).collect()
            };
            let pick = |b: usize| &rows[if shared { 0 } else { b }];
            z.push(stack(batch, |b| pick(b).z.clone()));
            eps.push(stack(batch, |b| pick(b).eps.clone()));
        }
        BatchMasks { z, eps: Some(eps) }
    }

    /// Masks built from fixed noise, one `(batch, d)` matrix per layer.
    pub fn from_noise(params: &MaskParams<F>, eps: Vec<Array2<F>>) -> Self {
        let z = eps
            .iter()
            .enumerate()
            .map(|(l, e)| {
                let mut z = e * &params.sigma(l);
                z += &params.mu[l];
                z
            })
            .collect();
        BatchMasks { z, eps: Some(eps) }
    }

    /// The same deterministic vector per layer for every row.
    pub fn broadcast(vectors: &[Array1<F>], batch: usize) -> Self {
        BatchMasks {
            z: vectors.iter().map(|v| stack(batch, |_| v.clone())).collect(),
            eps: None,
        }
    }

    /// Gradients with respect to `mu` and `log_sigma` given the gradient with
    /// respect to the sampled masks (reparameterization).
    pub fn param_grads(&self, params: &MaskParams<F>, dz: &[Array2<F>]) -> MaskParams<F> {
        let eps = self
            .eps
            .as_ref()
            .expect("mask gradients need the sampling noise");
        let mut out = params.zeros_like();
        for l in 0..params.n_layers() {
            out.mu[l] = dz[l].sum_axis(Axis(0));
            let sigma = params.sigma(l);
            out.log_sigma[l] = (&dz[l] * &eps[l]).sum_axis(Axis(0)) * &sigma;
        }
        out
    }
}

fn stack<F: Scalar>(rows: usize, row: impl Fn(usize) -> Array1<F>) -> Array2<F> {
    let first = row(0);
    let mut out = Array2::zeros((rows, first.len()));
    out.row_mut(0).assign(&first);
    for b in 1..rows {
        out.row_mut(b).assign(&row(b));
    }
    out
}

/// `ln(1 + mu^2 / sigma^2)` evaluated from `mu` and `log sigma` in `f64`.
fn log1p_alpha(mu: f64, log_sigma: f64) -> f64 {
    alpha(mu, log_sigma).ln_1p()
}

fn alpha(mu: f64, log_sigma: f64) -> f64 {
    let r = mu / log_sigma.exp();
    r * r
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlTerms {
    /// `sum_j ln(1 + alpha_j)` per layer, without `beta`.
    pub per_layer: Vec<f64>,
    /// `sum_l beta[l] * per_layer[l]`.
    pub total: f64,
}

/// Closed-form mask penalty. No factor 1/2: this is the training objective.
pub fn kl_closed_form<F: Scalar>(params: &MaskParams<F>) -> Result<KlTerms> {
    params.check_finite()?;
    let per_layer: Vec<f64> = params
        .mu
        .iter()
        .zip(&params.log_sigma)
        .map(|(m, s)| {
            m.iter()
                .zip(s.iter())
                .map(|(&m, &s)| log1p_alpha(m.as_f64(), s.as_f64()))
                .sum()
        })
        .collect();
    let total = per_layer.iter().zip(&params.beta).map(|(t, b)| t * b).sum();
    Ok(KlTerms { per_layer, total })
}

/// Gradient of the beta-weighted closed-form penalty.
pub fn kl_grads<F: Scalar>(params: &MaskParams<F>) -> MaskParams<F> {
    let mut out = params.zeros_like();
    for l in 0..params.n_layers() {
        let beta = params.beta[l];
        for j in 0..params.dim() {
            let m = params.mu[l][j].as_f64();
            let s = params.log_sigma[l][j].as_f64();
            let a = alpha(m, s);
            // d/dmu ln(1 + m^2 e^{-2s}) = 2 m e^{-2s} / (1 + a)
            let inv_var = (-2.0 * s).exp();
            out.mu[l][j] = F::of(beta * 2.0 * m * inv_var / (1.0 + a));
            out.log_sigma[l][j] = F::of(-beta * 2.0 * a / (1.0 + a));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibLoss {
    pub kl_total: f64,
    /// Mean negative log-likelihood of the labels.
    pub nll: f64,
    /// `kl_total + n_layers * nll`.
    pub value: f64,
    /// Number of examples whose true-label probability hit the floor.
    pub clamped: usize,
}

/// `sum_l beta_l sum_j ln(1 + alpha_j^l) - L * mean log q(y | h)`.
pub fn vib_loss<F: Scalar>(
    params: &MaskParams<F>,
    probs: &Array2<F>,
    labels: &[usize],
    floor: f64,
) -> Result<VibLoss> {
    let kl = kl_closed_form(params)?;
    let ce = crate::objective::cross_entropy(probs, labels, floor, crate::objective::Reduction::Mean)?;
    let l = params.n_layers() as f64;
    Ok(VibLoss {
        kl_total: kl.total,
        nll: ce.value,
        value: kl.total + l * ce.value,
        clamped: ce.clamped,
    })
}

pub fn alpha_ratios<F: Scalar>(params: &MaskParams<F>) -> Vec<Array1<f64>> {
    params
        .mu
        .iter()
        .zip(&params.log_sigma)
        .map(|(m, s)| {
            m.iter()
                .zip(s.iter())
                .map(|(&m, &s)| alpha(m.as_f64(), s.as_f64()))
                .collect()
        })
        .collect()
}

/// Which mask dimensions survive: `keep[l][j]` iff `alpha_j^l > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub keep: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl PruneDecision {
    pub fn retained(&self) -> Vec<usize> {
        self.keep
            .iter()
            .map(|k| k.iter().filter(|&&x| x).count())
            .collect()
    }

    pub fn retained_fraction(&self) -> Vec<f64> {
        self.keep
            .iter()
            .zip(self.retained())
            .map(|(k, r)| if k.is_empty() { 0.0 } else { r as f64 / k.len() as f64 })
            .collect()
    }

    /// Inference masks: `mu` with dropped coordinates set to zero.
    pub fn inference_masks<F: Scalar>(&self, params: &MaskParams<F>) -> Vec<Array1<F>> {
        params
            .mu
            .iter()
            .zip(&self.keep)
            .map(|(m, keep)| {
                m.iter()
                    .zip(keep)
                    .map(|(&v, &k)| if k { v } else { F::zero() })
                    .collect()
            })
            .collect()
    }
}

pub fn prune<F: Scalar>(params: &MaskParams<F>, threshold: f64) -> Result<PruneDecision> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(CvibError::Validation(format!(
            "prune threshold {threshold} must be nonnegative"
        )));
    }
    let keep = alpha_ratios(params)
        .iter()
        .map(|a| a.iter().map(|&v| v > threshold).collect())
        .collect();
    Ok(PruneDecision { keep, threshold })
}

/// Result of checking the analytic minimum of the expected Gaussian KL.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlOracleReport {
    /// Analytic optimum `(mu_j^2 + sigma_j^2) * mean(f_j^2)`.
    pub xi_star: Vec<f64>,
    /// Jensen gap `ln mean(f_j^2) - mean(ln f_j^2)`.
    pub psi: Vec<f64>,
    /// Expected KL evaluated at `xi_star`.
    pub at_xi_star: f64,
    /// Expected KL minimized numerically over each `xi_j`.
    pub numeric_infimum: f64,
    /// `1/2 sum_j [ln(1 + mu_j^2/sigma_j^2) + psi_j]`.
    pub closed_form: f64,
    pub relative_error: f64,
}

/// Expected KL between `N(f mu, f^2 sigma^2)` and `N(0, xi)` for one
/// coordinate, averaged over the samples `f2` (squared activations).
fn expected_kl(mu: f64, sigma: f64, f2: &[f64], mean_log_f2: f64, xi: f64) -> f64 {
    let a = mu * mu + sigma * sigma;
    let mean_f2 = f2.iter().sum::<f64>() / f2.len() as f64;
    0.5 * (a * mean_f2 / xi - (sigma * sigma).ln() - mean_log_f2 + xi.ln() - 1.0)
}

/// Golden-section search over `t = ln xi`; the objective `A e^{-t} + t` is convex.
fn minimize_log_xi(f: impl Fn(f64) -> f64, center: f64) -> f64 {
    let (mut lo, mut hi) = (center - 20.0, center + 20.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-10 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.5 * (lo + hi))
}

/// Numeric check of the closed-form KL infimum. `f_samples` is `(samples, d)`
/// holding pre-mask activations of one layer.
pub fn kl_oracle(mu: &[f64], sigma: &[f64], f_samples: &Array2<f64>) -> Result<KlOracleReport> {
    let d = mu.len();
    if sigma.len() != d || f_samples.ncols() != d {
        return Err(CvibError::Shape(format!(
            "mu has {d} entries, sigma {}, samples {}",
            sigma.len(),
            f_samples.ncols()
        )));
    }
    if f_samples.nrows() == 0 {
        return Err(CvibError::Validation("no activation samples".into()));
    }
    if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(CvibError::Validation("sigma must be positive".into()));
    }
    if f_samples.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(CvibError::Validation(
            "activation samples must be finite and nonzero".into(),
        ));
    }
    let mut xi_star = Vec::with_capacity(d);
    let mut psi = Vec::with_capacity(d);
    let (mut at_xi_star, mut numeric_infimum, mut closed_form) = (0.0, 0.0, 0.0);
    for j in 0..d {
        let f2: Vec<f64> = f_samples.column(j).iter().map(|&v| v * v).collect();
        let n = f2.len() as f64;
        let mean_f2 = f2.iter().sum::<f64>() / n;
        let mean_log_f2 = f2.iter().map(|v| v.ln()).sum::<f64>() / n;
        let (m, s) = (mu[j], sigma[j]);
        let xs = (m * m + s * s) * mean_f2;
        let p = mean_f2.ln() - mean_log_f2;
        at_xi_star += expected_kl(m, s, &f2, mean_log_f2, xs);
        numeric_infimum += minimize_log_xi(|t| expected_kl(m, s, &f2, mean_log_f2, t.exp()), xs.ln());
        closed_form += 0.5 * ((m / s).powi(2).ln_1p() + p);
        xi_star.push(xs);
        psi.push(p);
    }
    let scale = closed_form.abs().max(f64::MIN_POSITIVE);
    let relative_error = ((numeric_infimum - closed_form).abs().max((at_xi_star - closed_form).abs())) / scale;
    Ok(KlOracleReport {
        xi_star,
        psi,
        at_xi_star,
        numeric_infimum,
        closed_form,
        relative_error,
    })
}

/// Summary of [`kl_oracle`] over many random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlOracleSuite {
    pub instances: usize,
    pub max_relative_error: f64,
    pub min_psi: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random `(mu, sigma, f)` draws: up to 8 coordinates, `|mu|` in [0.05, 3],
/// `ln sigma` in [-4, 1], 2 to 40 activation samples per coordinate.
pub fn kl_oracle_suite<R: Rng>(instances: usize, tolerance: f64, rng: &mut R) -> Result<KlOracleSuite> {
    let mut max_relative_error: f64 = 0.0;
    let mut min_psi = f64::INFINITY;
    for _ in 0..instances {
        let d = rng.gen_range(1..=8);
        let s = rng.gen_range(2..=40);
        let mu: Vec<f64> = (0..d)
            .map(|_| {
                let m = rng.gen_range(0.05..3.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0f64..1.0).exp()).collect();
        let f = Array2::from_shape_simple_fn((s, d), || {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() < 1e-3 { 1e-3 } else { v }
        });
        let report = kl_oracle(&mu, &sigma, &f)?;
        max_relative_error = max_relative_error.max(report.relative_error);
        min_psi = report.psi.iter().copied().fold(min_psi, f64::min);
    }
    Ok(KlOracleSuite {
        instances,
        max_relative_error,
        min_psi,
        tolerance,
        passed: max_relative_error <= tolerance && min_psi >= 0.0,
    })
}
