//! Cross-entropy, the self-pruning contrastive loss and the two joint
//! objectives used by the alternating optimizer.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{CvibError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Rows whose true-label probability was raised to the floor.
    pub clamped: usize,
}

/// `-log p(y)` over a batch of probability rows, with `p(y)` floored.
pub fn cross_entropy<F: Scalar>(
    probs: &Array2<F>,
    labels: &[usize],
    floor: f64,
    reduction: Reduction,
) -> Result<CrossEntropy> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(CvibError::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let p = row
            .get(y)
            .ok_or_else(|| CvibError::Validation(format!("label {y} out of range")))?
            .as_f64();
        if !p.is_finite() {
            return Err(CvibError::NonFinite("predicted probability".into()));
        }
        let p = if p < floor {
            clamped += 1;
            floor
        } else {
            p
        };
        total -= p.ln();
    }
    let value = match reduction {
        Reduction::Mean => total / labels.len() as f64,
        Reduction::Sum => total,
    };
    Ok(CrossEntropy { value, clamped })
}

/// Mean cross-entropy from logits, with its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_from_logits<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    reduction: Reduction,
) -> (f64, Array2<F>) {
    let log_p = crate::encoder::log_softmax_rows(&logits.view());
    let mut probs = crate::encoder::softmax_rows(&logits.view());
    let scale = match reduction {
        Reduction::Mean => 1.0 / labels.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        total -= log_p[[b, y]].as_f64();
        probs[[b, y]] -= F::one();
    }
    probs.mapv_inplace(|v| v * F::of(scale));
    (total * scale, probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SclConfig {
    pub temperature: f64,
    /// Adds the positive pair to the denominator (standard InfoNCE).
    pub include_positive_in_denominator: bool,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig {
            temperature: 0.05,
            include_positive_in_denominator: false,
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CvibError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn norm<F: Scalar>(v: &ArrayView1<F>) -> f64 {
    v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

pub fn cosine<F: Scalar>(u: &ArrayView1<F>, v: &ArrayView1<F>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CvibError::Shape(format!("lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(CvibError::Validation("zero-norm representation".into()));
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    Ok(dot / (nu * nv))
}

/// `cosine(u, v) / tau`, the logarithm of the similarity.
pub fn log_sim<F: Scalar>(u: &ArrayView1<F>, v: &ArrayView1<F>, tau: f64) -> Result<f64> {
    Ok(cosine(u, v)? / tau)
}

/// `exp(cosine(u, v) / tau)`.
pub fn sim<F: Scalar>(u: &ArrayView1<F>, v: &ArrayView1<F>, tau: f64) -> Result<f64> {
    Ok(log_sim(u, v, tau)?.exp())
}

/// Value and gradients of the contrastive loss.
#[derive(Debug, Clone)]
pub struct SclOutput<F> {
    pub value: f64,
    pub d_orig: Array2<F>,
    pub d_pruned: Array2<F>,
}

/// Self-pruning contrastive loss
/// `-(1/N) sum_i ln[ sim(h_i, g_i) / sum_{j != i} sim(h_i, g_j) ]`
/// where `h` are the original network's representations (rows of `orig`)
/// and `g` the pruned network's. Evaluated in log space.
pub fn scl_loss<F: Scalar>(orig: &Array2<F>, pruned: &Array2<F>, cfg: &SclConfig) -> Result<f64> {
    Ok(scl_loss_with_grads(orig, pruned, cfg)?.value)
}

pub fn scl_loss_with_grads<F: Scalar>(
    orig: &Array2<F>,
    pruned: &Array2<F>,
    cfg: &SclConfig,
) -> Result<SclOutput<F>> {
    cfg.validate()?;
    let n = orig.nrows();
    if pruned.dim() != orig.dim() {
        return Err(CvibError::Shape(format!(
            "original {:?} and pruned {:?} representations differ",
            orig.dim(),
            pruned.dim()
        )));
    }
    if n < 2 {
        return Err(CvibError::Validation(
            "contrastive loss needs at least two examples".into(),
        ));
    }
    let tau = cfg.temperature;
    let to64 = |a: &Array2<F>| a.mapv(|v| v.as_f64());
    let (h, g) = (to64(orig), to64(pruned));
    let unit = |a: &Array2<f64>| -> Result<(Array2<f64>, Array1<f64>)> {
        let norms: Array1<f64> = a.rows().into_iter().map(|r| norm(&r)).collect();
        if norms.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(CvibError::Validation("zero-norm representation".into()));
        }
        let mut u = a.clone();
        for (mut row, &nr) in u.rows_mut().into_iter().zip(norms.iter()) {
            row /= nr;
        }
        Ok((u, norms))
    };
    let (hu, hn) = unit(&h)?;
    let (gu, gn) = unit(&g)?;
    let cos = hu.dot(&gu.t());

    let mut value = 0.0;
    // d loss / d cos
    let mut dcos = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let in_denominator = |j: usize| j != i || cfg.include_positive_in_denominator;
        let max = (0..n)
            .filter(|&j| in_denominator(j))
            .map(|j| cos[[i, j]] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n)
            .filter(|&j| in_denominator(j))
            .map(|j| (cos[[i, j]] / tau - max).exp())
            .sum();
        let lse = z.ln() + max;
        value += lse - cos[[i, i]] / tau;
        for j in (0..n).filter(|&j| in_denominator(j)) {
            dcos[[i, j]] += (cos[[i, j]] / tau - lse).exp() / (n as f64 * tau);
        }
        dcos[[i, i]] -= 1.0 / (n as f64 * tau);
    }
    value /= n as f64;
    if !value.is_finite() {
        return Err(CvibError::NonFinite("contrastive loss".into()));
    }

    let mut dh = Array2::<f64>::zeros(h.dim());
    let mut dg = Array2::<f64>::zeros(g.dim());
    for i in 0..n {
        for j in 0..n {
            let w = dcos[[i, j]];
            if w == 0.0 {
                continue;
            }
            let c = cos[[i, j]];
            // d cos / d h_i = (g^_j - c h^_i) / |h_i|
            let mut row = dh.row_mut(i);
            row.scaled_add(w / hn[i], &gu.row(j));
            row.scaled_add(-w * c / hn[i], &hu.row(i));
            let mut row = dg.row_mut(j);
            row.scaled_add(w / gn[j], &hu.row(i));
            row.scaled_add(-w * c / gn[j], &gu.row(j));
        }
    }
    Ok(SclOutput {
        value,
        d_orig: dh.mapv(F::of),
        d_pruned: dg.mapv(F::of),
    })
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_vib: f64,
    pub l_scl: f64,
    pub l1: f64,
    pub l2: f64,
    pub gamma: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_vib, self.l_scl, self.l1, self.l2]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L1 = l_ce + gamma * l_scl`, `L2 = l_vib + gamma * l_scl`.
pub fn joint_losses(l_ce: f64, l_vib: f64, l_scl: f64, gamma: f64) -> LossBundle {
    LossBundle {
        l_ce,
        l_vib,
        l_scl,
        l1: l_ce + gamma * l_scl,
        l2: l_vib + gamma * l_scl,
        gamma,
    }
}
