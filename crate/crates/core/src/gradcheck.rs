//! Finite-difference verification of every analytic gradient used in
//! training. Runs entirely in `f64`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, CLS, SEP};
use crate::encoder::{backward, forward, Batch, EncoderConfig, EncoderParams};
use crate::error::{CvibError, Result};
use crate::objective::{cross_entropy_from_logits, scl_loss_with_grads, Reduction, SclConfig};
use crate::vib::{kl_closed_form, kl_grads, BatchMasks, MaskParams};

/// Relative errors are `|a - n| / max(|a|, |n|, DENOMINATOR_FLOOR)`.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    /// `|theta|^2 / 2` over every parameter; its gradient is `theta`.
    Quadratic,
    CrossEntropy,
    Kl,
    Scl,
    Vib,
    L1,
    L2,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::Quadratic,
        LossId::CrossEntropy,
        LossId::Kl,
        LossId::Scl,
        LossId::Vib,
        LossId::L1,
        LossId::L2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Quadratic => "quadratic",
            LossId::CrossEntropy => "cross_entropy",
            LossId::Kl => "kl",
            LossId::Scl => "scl",
            LossId::Vib => "vib",
            LossId::L1 => "l1",
            LossId::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossId,
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Largest analytic gradient magnitude on encoder and head weights.
    pub max_abs_network_grad: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub gamma: f64,
    pub temperature: f64,
    pub beta: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Mask means are drawn around this value, log sigma around `log_sigma`.
    pub mu: f64,
    pub log_sigma: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 50,
            batch_size: 4,
            seq_len: 9,
            seed: 17,
            gamma: 0.25,
            temperature: 0.05,
            beta: 1.0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            mu: 1.0,
            log_sigma: -1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers > 2 || self.hidden_dim > 16 {
            return Err(CvibError::Config(
                "gradient probes are limited to 2 layers and width 16".into(),
            ));
        }
        if self.batch_size < 2 || self.seq_len < 5 || self.vocab_size <= SEP + 1 {
            return Err(CvibError::Config("probe batch too small".into()));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(CvibError::Config("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// A frozen point at which gradients are compared: both networks, the mask
/// parameters, one batch and one fixed noise draw.
#[derive(Debug, Clone)]
pub struct Probe {
    pub cfg: EncoderConfig,
    pub original: EncoderParams<f64>,
    pub pruned: EncoderParams<f64>,
    pub masks: MaskParams<f64>,
    pub batch: Batch,
    pub noise: Vec<Array2<f64>>,
    pub scl: SclConfig,
    pub gamma: f64,
}

impl Probe {
    pub fn random(pc: &ProbeConfig) -> Result<Self> {
        pc.validate()?;
        let cfg = EncoderConfig {
            n_layers: pc.n_layers,
            hidden_dim: pc.hidden_dim,
            n_heads: pc.n_heads,
            ffn_dim: pc.ffn_dim,
            max_len: pc.seq_len,
            vocab_size: pc.vocab_size,
            n_classes: 3,
            head_hidden: pc.hidden_dim,
        };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
        let original = EncoderParams::init(&cfg, &mut rng);
        let mut pruned = EncoderParams::init(&cfg, &mut rng);
        // layer-norm gains and biases away from their identity init
        for p in [&mut pruned] {
            for b in p.blocks.iter_mut() {
                b.ln_attn.gain.mapv_inplace(|_| 1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal));
                b.ln_ffn.bias.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let mut masks = MaskParams::init(cfg.n_layers, cfg.hidden_dim, &vec![pc.beta; cfg.n_layers], &mut rng)?;
        for l in 0..cfg.n_layers {
            masks.mu[l].mapv_inplace(|_| pc.mu + 0.3 * rng.sample::<f64, _>(StandardNormal));
            masks.log_sigma[l].mapv_inplace(|_| pc.log_sigma + 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        let first = SEP + 1;
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for b in 0..pc.batch_size {
            // vary lengths so padding is exercised
            let len = pc.seq_len - (b % 2);
            let n = len - 4;
            let mut ids = vec![CLS];
            ids.extend((0..n).map(|_| rng.gen_range(first..pc.vocab_size)));
            ids.push(SEP);
            ids.push(ids[1 + rng.gen_range(0..n)]);
            ids.push(SEP);
            seqs.push(TokenSequence {
                aspect_span: n + 2..n + 3,
                ids,
            });
            labels.push(b % 3);
        }
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = Batch::new(&refs, &labels)?;
        let noise = (0..cfg.n_layers)
            .map(|_| {
                let row: Vec<f64> = (0..cfg.hidden_dim).map(|_| rng.sample(StandardNormal)).collect();
                Array2::from_shape_fn((pc.batch_size, cfg.hidden_dim), |(_, j)| row[j])
            })
            .collect();
        Ok(Probe {
            cfg,
            original,
            pruned,
            masks,
            batch,
            noise,
            scl: SclConfig {
                temperature: pc.temperature,
                include_positive_in_denominator: false,
            },
            gamma: pc.gamma,
        })
    }

    fn segments(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        out.extend(self.original.tensors().into_iter().map(|(n, t)| (format!("original.{n}"), t.len())));
        out.extend(self.pruned.tensors().into_iter().map(|(n, t)| (format!("pruned.{n}"), t.len())));
        out.extend(self.masks.tensors().into_iter().map(|(n, t)| (n, t.len())));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.original.tensors() {
            out.extend_from_slice(t);
        }
        for (_, t) in self.pruned.tensors() {
            out.extend_from_slice(t);
        }
        for (_, t) in self.masks.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        let tensors = self
            .original
            .tensors_mut()
            .into_iter()
            .chain(self.pruned.tensors_mut())
            .chain(self.masks.tensors_mut());
        for (_, t) in tensors {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
    }

    fn flatten_grads(
        original: Option<&EncoderParams<f64>>,
        pruned: Option<&EncoderParams<f64>>,
        masks: Option<&MaskParams<f64>>,
        like: &Probe,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        let zeros_o = like.original.zeros_like();
        let zeros_p = like.pruned.zeros_like();
        let zeros_m = like.masks.zeros_like();
        for (_, t) in original.unwrap_or(&zeros_o).tensors() {
            out.extend_from_slice(t);
        }
        for (_, t) in pruned.unwrap_or(&zeros_p).tensors() {
            out.extend_from_slice(t);
        }
        for (_, t) in masks.unwrap_or(&zeros_m).tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Loss value and its analytic gradient over the flattened parameters.
    pub fn evaluate(&self, loss: LossId) -> Result<(f64, Vec<f64>)> {
        self.evaluate_inner(loss, true)
    }

    /// Loss value only, skipping the backward pass.
    pub fn value(&self, loss: LossId) -> Result<f64> {
        self.evaluate_inner(loss, false).map(|(v, _)| v)
    }

    fn evaluate_inner(&self, loss: LossId, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        match loss {
            LossId::Quadratic => {
                let flat = self.flatten();
                let v = 0.5 * flat.iter().map(|x| x * x).sum::<f64>();
                Ok((v, flat))
            }
            LossId::Kl => {
                let v = kl_closed_form(&self.masks)?.total;
                if !with_grad {
                    return Ok((v, Vec::new()));
                }
                let g = kl_grads(&self.masks);
                Ok((v, Self::flatten_grads(None, None, Some(&g), self)))
            }
            _ => self.evaluate_network(loss, with_grad),
        }
    }

    fn evaluate_network(&self, loss: LossId, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let masks = BatchMasks::from_noise(&self.masks, self.noise.clone());
        let labels = &self.batch.labels;
        let uses_orig = matches!(loss, LossId::CrossEntropy | LossId::Scl | LossId::L1 | LossId::L2);
        let uses_pruned = matches!(loss, LossId::Scl | LossId::Vib | LossId::L1 | LossId::L2);
        let f1 = forward(&self.original, &self.cfg, &self.batch, None, with_grad && uses_orig)?;
        let f2 = forward(&self.pruned, &self.cfg, &self.batch, Some(&masks.z), with_grad && uses_pruned)?;

        let mut value = 0.0;
        let mut dlogits1 = None;
        let mut dlogits2 = None;
        let mut drep1 = None;
        let mut drep2 = None;
        let mut with_kl = false;

        if matches!(loss, LossId::CrossEntropy | LossId::L1) {
            let (v, g) = cross_entropy_from_logits(&f1.logits, labels, Reduction::Mean);
            value += v;
            dlogits1 = Some(g);
        }
        if matches!(loss, LossId::Vib | LossId::L2) {
            let l = self.cfg.n_layers as f64;
            let (nll, g) = cross_entropy_from_logits(&f2.logits, labels, Reduction::Mean);
            value += kl_closed_form(&self.masks)?.total + l * nll;
            dlogits2 = Some(g * l);
            with_kl = true;
        }
        if matches!(loss, LossId::Scl | LossId::L1 | LossId::L2) {
            let w = if loss == LossId::Scl { 1.0 } else { self.gamma };
            let out = scl_loss_with_grads(&f1.rep, &f2.rep, &self.scl)?;
            value += w * out.value;
            drep1 = Some(out.d_orig * w);
            drep2 = Some(out.d_pruned * w);
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }

        let g1 = uses_orig.then(|| {
            backward(&self.original, &self.cfg, &self.batch, &f1, dlogits1.as_ref(), drep1.as_ref()).params
        });
        let (g2, gm) = if uses_pruned {
            let grads = backward(&self.pruned, &self.cfg, &self.batch, &f2, dlogits2.as_ref(), drep2.as_ref());
            let mut gm = masks.param_grads(&self.masks, grads.masks.as_ref().expect("masked pass"));
            if with_kl {
                let k = kl_grads(&self.masks);
                for l in 0..gm.n_layers() {
                    gm.mu[l] += &k.mu[l];
                    gm.log_sigma[l] += &k.log_sigma[l];
                }
            }
            (Some(grads.params), Some(gm))
        } else {
            (None, None)
        };
        Ok((value, Self::flatten_grads(g1.as_ref(), g2.as_ref(), gm.as_ref(), self)))
    }
}

/// Compares an analytic gradient against central differences of `f` at `x`.
/// Returns `(max relative error, worst index, analytic, numeric)`.
pub fn compare_with_differences(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<(f64, usize, f64, f64)> {
    let mut probe = x.to_vec();
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(CvibError::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
        if err > worst.0 || i == 0 {
            worst = (err, i, a, numeric);
        }
    }
    Ok(worst)
}

/// Checks one loss at the probe point. `corrupt` perturbs the analytic
/// gradient at its largest coordinate, as a negative control.
pub fn grad_check(probe: &Probe, loss: LossId, step: f64, tolerance: f64, corrupt: bool) -> Result<GradCheckReport> {
    let (value, mut analytic) = probe.evaluate(loss)?;
    if !value.is_finite() {
        return Err(CvibError::NonFinite(format!("{} at probe point", loss.name())));
    }
    if corrupt {
        let (i, _) = analytic
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        analytic[i] = analytic[i] * 1.1 + 1e-3;
    }
    let x = probe.flatten();
    let scratch = std::cell::RefCell::new(probe.clone());
    let f = |flat: &[f64]| {
        let mut s = scratch.borrow_mut();
        s.set_flat(flat);
        s.value(loss)
    };
    let (err, idx, a, n) = compare_with_differences(f, &x, &analytic, step)?;
    let (worst_tensor, worst_index) = locate(&probe.segments(), idx);
    let n_network = probe.original.n_params() + probe.pruned.n_params();
    let max_abs_network_grad = analytic[..n_network].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(GradCheckReport {
        loss,
        max_relative_error: err,
        worst_tensor,
        worst_index,
        analytic: a,
        numeric: n,
        checked: x.len(),
        max_abs_network_grad,
        tolerance,
        passed: err <= tolerance,
    })
}

fn locate(segments: &[(String, usize)], mut idx: usize) -> (String, usize) {
    for (name, len) in segments {
        if idx < *len {
            return (name.clone(), idx);
        }
        idx -= len;
    }
    ("<out of range>".into(), idx)
}

/// Runs every loss at the default probe point.
pub fn grad_check_all(pc: &ProbeConfig, corrupt: bool) -> Result<Vec<GradCheckReport>> {
    let probe = Probe::random(pc)?;
    LossId::ALL
        .iter()
        .map(|&loss| grad_check(&probe, loss, pc.step, pc.tolerance, corrupt))
        .collect()
}
