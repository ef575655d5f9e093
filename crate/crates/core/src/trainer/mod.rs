//! Alternating optimization of the original network and the self-pruned
//! network.
//!
//! Every batch performs two sub-updates. The original network descends
//! `L1 = CE + gamma * SCL` with the pruned network's representations held
//! constant; the pruned network (encoder, head and mask parameters) descends
//! `L2 = VIB + gamma * SCL` with the original network's representations held
//! constant. The two parameter sets never share storage.

mod adam;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Dataset, TokenSequence, Vocabulary};
use crate::encoder::{backward, forward, Batch, EncoderConfig, EncoderParams, NetworkGrads};
use crate::error::{CvibError, Result};
use crate::objective::{
    cross_entropy_from_logits, joint_losses, scl_loss_with_grads, LossBundle, Reduction, SclConfig,
};
use crate::scalar::Scalar;
use crate::vib::{kl_closed_form, kl_grads, prune, BatchMasks, MaskParams, DEFAULT_PRUNE_THRESHOLD};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{inference_model, Checkpoint, Predictor, CHECKPOINT_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Both networks, VIB masks and the contrastive coupling.
    FullCvib,
    /// Masks replaced by plain dropout, no KL penalty.
    NoVib,
    /// Full model with `gamma = 0`.
    NoScl,
    /// The original network alone trained with cross-entropy.
    Baseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::FullCvib,
        TrainMode::NoVib,
        TrainMode::NoScl,
        TrainMode::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FullCvib => "full_cvib",
            TrainMode::NoVib => "no_vib",
            TrainMode::NoScl => "no_scl",
            TrainMode::Baseline => "baseline",
        }
    }

    pub fn uses_vib(self) -> bool {
        matches!(self, TrainMode::FullCvib | TrainMode::NoScl)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = CvibError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CvibError::Config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder and head learning rate for both networks.
    pub learning_rate: f64,
    pub mask_learning_rate: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub include_positive_in_denominator: bool,
    /// Penalty weight applied to every layer unless `beta_per_layer` is set.
    pub beta: f64,
    pub beta_per_layer: Option<Vec<f64>>,
    pub seed: u64,
    pub mode: TrainMode,
    pub prune_threshold: f64,
    pub adam: AdamConfig,
    /// One noise draw per layer for the whole batch, instead of per example.
    pub shared_noise: bool,
    /// Redraw the noise for the pruned network's own sub-update.
    pub fresh_noise: bool,
    /// Drop probability of the dropout masks used by `no_vib`.
    pub dropout_rate: f64,
    pub reduction: Reduction,
    pub prob_floor: f64,
    /// Evaluate training accuracy after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            mask_learning_rate: 5e-3,
            gamma: 0.25,
            temperature: 0.05,
            include_positive_in_denominator: false,
            beta: 1.0,
            beta_per_layer: None,
            seed: 13,
            mode: TrainMode::FullCvib,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            adam: AdamConfig::default(),
            shared_noise: true,
            fresh_noise: true,
            dropout_rate: 0.1,
            reduction: Reduction::Mean,
            prob_floor: crate::vib::DEFAULT_PROB_FLOOR,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CvibError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("mask_learning_rate", self.mask_learning_rate),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.prune_threshold.is_nan() || self.prune_threshold < 0.0 {
            return bad("prune_threshold must be nonnegative".into());
        }
        let betas = self.beta_per_layer.iter().flatten().chain(std::iter::once(&self.beta));
        if betas.clone().any(|b| !b.is_finite() || *b < 0.0) {
            return bad("beta values must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Contrastive weight actually used by the mode.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            TrainMode::FullCvib | TrainMode::NoVib => self.gamma,
            TrainMode::NoScl | TrainMode::Baseline => 0.0,
        }
    }

    pub fn betas(&self, n_layers: usize) -> Result<Vec<f64>> {
        match &self.beta_per_layer {
            Some(b) if b.len() != n_layers => Err(CvibError::Config(format!(
                "{} per-layer betas for {} layers",
                b.len(),
                n_layers
            ))),
            Some(b) => Ok(b.clone()),
            None => Ok(vec![self.beta; n_layers]),
        }
    }

    pub fn scl(&self) -> SclConfig {
        SclConfig {
            temperature: self.temperature,
            include_positive_in_denominator: self.include_positive_in_denominator,
        }
    }
}

/// Both parameter sets with their optimizer moments and the training RNG.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar = f32> {
    pub encoder: EncoderConfig,
    pub original: EncoderParams<F>,
    pub pruned: EncoderParams<F>,
    pub masks: MaskParams<F>,
    opt_original: Adam,
    opt_pruned: Adam,
    opt_masks: Adam,
    pub step: u64,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl<F: Scalar> PartialEq for TrainState<F> {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.original == other.original
            && self.pruned == other.pruned
            && self.masks == other.masks
            && self.opt_original == other.opt_original
            && self.opt_pruned == other.opt_pruned
            && self.opt_masks == other.opt_masks
            && self.step == other.step
            && self.epoch == other.epoch
            && self.rng == other.rng
    }
}

fn shapes<T>(tensors: Vec<(String, &[T])>) -> Vec<usize> {
    tensors.iter().map(|(_, t)| t.len()).collect()
}

/// Fresh state: the pruned network starts as an exact copy of the original,
/// masks start at `mu ~ N(1, 0.01^2)`, `log sigma ~ N(-9, 0.01^2)`.
pub fn init_training<F: Scalar>(config: &TrainConfig, encoder: &EncoderConfig) -> Result<TrainState<F>> {
    config.validate()?;
    encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let original = EncoderParams::<F>::init(encoder, &mut rng);
    let pruned = original.clone();
    let masks = MaskParams::init(
        encoder.n_layers,
        encoder.hidden_dim,
        &config.betas(encoder.n_layers)?,
        &mut rng,
    )?;
    Ok(TrainState {
        encoder: encoder.clone(),
        opt_original: Adam::new(&shapes(original.tensors())),
        opt_pruned: Adam::new(&shapes(pruned.tensors())),
        opt_masks: Adam::new(&shapes(masks.tensors())),
        original,
        pruned,
        masks,
        step: 0,
        epoch: 0,
        rng,
    })
}

fn grads_finite<F: Scalar>(g: &EncoderParams<F>) -> bool {
    g.all_finite()
}

struct PrunedUpdate<F> {
    grads: NetworkGrads<F>,
    masks: Option<MaskParams<F>>,
}

impl<F: Scalar> TrainState<F> {
    fn dropout_masks(&mut self, batch: usize, rate: f64, shared: bool) -> BatchMasks<F> {
        let d = self.encoder.hidden_dim;
        let keep = 1.0 - rate;
        let scale = F::of(1.0 / keep);
        let draw = |rng: &mut ChaCha8Rng| -> Array1<F> {
            Array1::from_shape_simple_fn(d, || if rng.gen_bool(keep) { scale } else { F::zero() })
        };
        let z = (0..self.encoder.n_layers)
            .map(|_| {
                if shared {
                    let row = draw(&mut self.rng);
                    Array2::from_shape_fn((batch, d), |(_, j)| row[j])
                } else {
                    let rows: Vec<Array1<F>> = (0..batch).map(|_| draw(&mut self.rng)).collect();
                    Array2::from_shape_fn((batch, d), |(b, j)| rows[b][j])
                }
            })
            .collect();
        BatchMasks { z, eps: None }
    }

    fn sample_masks(&mut self, cfg: &TrainConfig, batch: usize) -> BatchMasks<F> {
        if cfg.mode.uses_vib() {
            BatchMasks::sample(&self.masks, batch, cfg.shared_noise, &mut self.rng)
        } else {
            self.dropout_masks(batch, cfg.dropout_rate, cfg.shared_noise)
        }
    }

    fn step_inner(&mut self, batch: &Batch, cfg: &TrainConfig) -> Result<LossBundle> {
        if batch.size() < 2 {
            return Err(CvibError::Validation("a training batch needs at least two examples".into()));
        }
        let labels = &batch.labels;
        let enc = self.encoder.clone();
        let f1 = forward(&self.original, &enc, batch, None, true)?;
        let (l_ce, dlogits1) = cross_entropy_from_logits(&f1.logits, labels, cfg.reduction);

        if cfg.mode == TrainMode::Baseline {
            let losses = joint_losses(l_ce, 0.0, 0.0, 0.0);
            if !losses.is_finite() {
                return Err(CvibError::NonFinite(format!("losses {losses:?}")));
            }
            let g1 = backward(&self.original, &enc, batch, &f1, Some(&dlogits1), None);
            if !grads_finite(&g1.params) {
                return Err(CvibError::NonFinite("original network gradient".into()));
            }
            self.apply(cfg, Some(&g1.params), None);
            return Ok(losses);
        }

        let gamma = cfg.effective_gamma();
        let scl_cfg = cfg.scl();
        let n_layers = F::of(enc.n_layers as f64);
        let vib = cfg.mode.uses_vib();
        let kl = if vib { kl_closed_form(&self.masks)?.total } else { 0.0 };

        // sub-update (a): the original network against constant pruned representations
        let masks_a = self.sample_masks(cfg, batch.size());
        let reuse = !cfg.fresh_noise;
        let f2a = forward(&self.pruned, &enc, batch, Some(&masks_a.z), reuse)?;
        let (nll_a, _) = cross_entropy_from_logits(&f2a.logits, labels, cfg.reduction);
        let scl_a = scl_loss_with_grads(&f1.rep, &f2a.rep, &scl_cfg)?;
        let losses = joint_losses(l_ce, kl + enc.n_layers as f64 * nll_a, scl_a.value, gamma);
        if !losses.is_finite() {
            return Err(CvibError::NonFinite(format!("losses {losses:?}")));
        }
        let drep1 = (gamma > 0.0).then(|| scl_a.d_orig.mapv(|v| v * F::of(gamma)));
        let g1 = backward(&self.original, &enc, batch, &f1, Some(&dlogits1), drep1.as_ref());

        // sub-update (b): the pruned network against constant original representations
        let (masks_b, f2b) = if cfg.fresh_noise {
            let m = self.sample_masks(cfg, batch.size());
            let f = forward(&self.pruned, &enc, batch, Some(&m.z), true)?;
            (m, f)
        } else {
            (masks_a, f2a)
        };
        let (nll_b, mut dlogits2) = cross_entropy_from_logits(&f2b.logits, labels, cfg.reduction);
        dlogits2.mapv_inplace(|v| v * n_layers);
        let drep2 = if gamma > 0.0 {
            let scl_b = scl_loss_with_grads(&f1.rep, &f2b.rep, &scl_cfg)?;
            let l2 = kl + enc.n_layers as f64 * nll_b + gamma * scl_b.value;
            if !l2.is_finite() {
                return Err(CvibError::NonFinite("pruned-network objective".into()));
            }
            Some(scl_b.d_pruned.mapv(|v| v * F::of(gamma)))
        } else {
            None
        };
        let g2 = backward(&self.pruned, &enc, batch, &f2b, Some(&dlogits2), drep2.as_ref());
        let gm = if vib {
            let dz = g2.masks.as_ref().expect("masked forward");
            let mut gm = masks_b.param_grads(&self.masks, dz);
            let k = kl_grads(&self.masks);
            for l in 0..gm.n_layers() {
                gm.mu[l] += &k.mu[l];
                gm.log_sigma[l] += &k.log_sigma[l];
            }
            Some(gm)
        } else {
            None
        };
        let update = PrunedUpdate { grads: g2, masks: gm };
        let masks_finite = update.masks.as_ref().map_or(true, |m| {
            m.mu.iter().chain(&m.log_sigma).all(|a| a.iter().all(|v| v.is_finite()))
        });
        if !grads_finite(&g1.params) || !grads_finite(&update.grads.params) || !masks_finite {
            return Err(CvibError::NonFinite("gradient".into()));
        }
        self.apply(cfg, Some(&g1.params), Some(&update));
        Ok(losses)
    }

    fn apply(&mut self, cfg: &TrainConfig, g1: Option<&EncoderParams<F>>, g2: Option<&PrunedUpdate<F>>) {
        let unzip = |g: &EncoderParams<F>| -> Vec<Vec<F>> {
            g.tensors().into_iter().map(|(_, t)| t.to_vec()).collect()
        };
        if let Some(g) = g1 {
            let grads = unzip(g);
            let params = self.original.tensors_mut().into_iter().map(|(_, t)| t).collect();
            self.opt_original
                .step(&cfg.adam, cfg.learning_rate, params, grads.iter().map(|v| &v[..]).collect());
        }
        if let Some(up) = g2 {
            let grads = unzip(&up.grads.params);
            let params = self.pruned.tensors_mut().into_iter().map(|(_, t)| t).collect();
            self.opt_pruned
                .step(&cfg.adam, cfg.learning_rate, params, grads.iter().map(|v| &v[..]).collect());
            if let Some(gm) = &up.masks {
                let grads: Vec<Vec<F>> = gm.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
                let params = self.masks.tensors_mut().into_iter().map(|(_, t)| t).collect();
                self.opt_masks.step(
                    &cfg.adam,
                    cfg.mask_learning_rate,
                    params,
                    grads.iter().map(|v| &v[..]).collect(),
                );
            }
        }
        self.step += 1;
    }
}

/// One alternating step on a batch. On any non-finite loss or gradient the
/// state, including its RNG, is left untouched and the error is returned.
pub fn train_step<F: Scalar>(state: &mut TrainState<F>, batch: &Batch, cfg: &TrainConfig) -> Result<LossBundle> {
    let rng = state.rng.clone();
    let out = state.step_inner(batch, cfg);
    if out.is_err() {
        state.rng = rng;
    }
    out
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_vib: f64,
    pub l_scl: f64,
    pub l1: f64,
    pub l2: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub retained_fraction_per_layer: Vec<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
    pub vocab: &'a Vocabulary,
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the highest validation accuracy (the final one when
    /// no validation set is given).
    pub best_checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn tokenize_all(dataset: &Dataset, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    dataset.iter().map(|x| tokenize(x, vocab)).collect()
}

fn accuracy(predictor: &Predictor, dataset: &Dataset) -> Result<f64> {
    let pred = predictor.predict(dataset)?;
    let correct = pred.iter().zip(dataset.iter()).filter(|(p, x)| **p == x.label).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Full training run over shuffled mini-batches.
pub fn train(config: &TrainConfig, encoder: &EncoderConfig, data: &TrainData<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    encoder.validate()?;
    if encoder.vocab_size != data.vocab.len() {
        return Err(CvibError::Config(format!(
            "encoder vocab_size {} differs from vocabulary size {}",
            encoder.vocab_size,
            data.vocab.len()
        )));
    }
    if data.train.len() < 2 {
        return Err(CvibError::Validation("training set needs at least two instances".into()));
    }
    let seqs = tokenize_all(data.train, data.vocab)?;
    let labels = data.train.labels();
    let mut state = init_training::<f32>(config, encoder)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 5];
        let mut n_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::new(&refs, &ys)?;
            let losses = train_step(&mut state, &batch, config)?;
            for (s, v) in sums
                .iter_mut()
                .zip([losses.l_ce, losses.l_vib, losses.l_scl, losses.l1, losses.l2])
            {
                *s += v;
            }
            n_steps += 1;
            debug!("epoch {epoch} step {} losses {losses:?}", state.step);
        }
        state.epoch = epoch;
        let checkpoint = Checkpoint::from_state(&state, config, data.vocab);
        let predictor = inference_model(&checkpoint, config.prune_threshold)?;
        let train_acc = if config.eval_train {
            Some(accuracy(&predictor, data.train)?)
        } else {
            None
        };
        let val_acc = data.validation.map(|v| accuracy(&predictor, v)).transpose()?;
        let retained = if config.mode.uses_vib() {
            prune(&state.masks, config.prune_threshold)?.retained_fraction()
        } else {
            vec![1.0; encoder.n_layers]
        };
        let mean = |s: f64| s / n_steps.max(1) as f64;
        let entry = EpochLog {
            epoch,
            l_ce: mean(sums[0]),
            l_vib: mean(sums[1]),
            l_scl: mean(sums[2]),
            l1: mean(sums[3]),
            l2: mean(sums[4]),
            train_acc,
            val_acc,
            retained_fraction_per_layer: retained,
        };
        info!(
            "[{}] epoch {epoch}: l1={:.4} l2={:.4} scl={:.4} train_acc={:?} val_acc={:?} retained={:?}",
            config.mode, entry.l1, entry.l2, entry.l_scl, entry.train_acc, entry.val_acc, entry.retained_fraction_per_layer
        );
        log.push(entry);
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, checkpoint));
        }
    }
    let final_checkpoint = Checkpoint::from_state(&state, config, data.vocab);
    let best_checkpoint = match (data.validation, best) {
        (Some(_), Some((_, c))) => c,
        _ => final_checkpoint.clone(),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (Dataset, Vocabulary, EncoderConfig) {
        let spec = SyntheticSpec {
            train_size: 64,
            iid_test_size: 16,
            ood_test_size: 16,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = Vocabulary::from_datasets([&corpus.train]);
        let enc = EncoderConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            head_hidden: 16,
            vocab_size: vocab.len(),
            ..EncoderConfig::default()
        };
        (corpus.train, vocab, enc)
    }

    fn first_batch(ds: &Dataset, vocab: &Vocabulary, n: usize) -> Batch {
        let seqs = tokenize_all(ds, vocab).unwrap();
        let refs: Vec<&TokenSequence> = seqs.iter().take(n).collect();
        Batch::new(&refs, &ds.labels()[..n]).unwrap()
    }

    #[test]
    fn pruned_network_starts_as_copy() {
        let (_, _, enc) = tiny();
        let s = init_training::<f32>(&TrainConfig::default(), &enc).unwrap();
        assert_eq!(s.original, s.pruned);
        assert_eq!(s.masks.n_layers(), 2);
    }

    #[test]
    fn sub_updates_touch_only_their_own_parameters() {
        let (ds, vocab, enc) = tiny();
        let batch = first_batch(&ds, &vocab, 8);
        let frozen_pruned = TrainConfig {
            learning_rate: 1e-3,
            mask_learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut s = init_training::<f32>(&frozen_pruned, &enc).unwrap();
        let before = s.clone();
        train_step(&mut s, &batch, &frozen_pruned).unwrap();
        assert_ne!(s.original, before.original);
        assert_ne!(s.pruned, before.pruned);
        assert_ne!(s.masks, before.masks);

        // with a zero contrastive weight the two updates are independent, so
        // the original network must follow plain cross-entropy descent
        let ce_only = TrainConfig {
            mode: TrainMode::NoScl,
            ..TrainConfig::default()
        };
        let base = TrainConfig {
            mode: TrainMode::Baseline,
            ..TrainConfig::default()
        };
        let mut a = init_training::<f32>(&ce_only, &enc).unwrap();
        let mut b = init_training::<f32>(&base, &enc).unwrap();
        train_step(&mut a, &batch, &ce_only).unwrap();
        train_step(&mut b, &batch, &base).unwrap();
        assert_eq!(a.original, b.original);
        // the baseline never moves the pruned network or the masks
        assert_eq!(b.pruned, before.pruned);
        assert_eq!(b.masks, before.masks);
    }

    #[test]
    fn losses_satisfy_joint_identities() {
        let (ds, vocab, enc) = tiny();
        let batch = first_batch(&ds, &vocab, 8);
        let cfg = TrainConfig::default();
        let mut s = init_training::<f32>(&cfg, &enc).unwrap();
        let l = train_step(&mut s, &batch, &cfg).unwrap();
        assert!((l.l1 - (l.l_ce + cfg.gamma * l.l_scl)).abs() <= 1e-12 * l.l1.abs().max(1.0));
        assert!((l.l2 - (l.l_vib + cfg.gamma * l.l_scl)).abs() <= 1e-12 * l.l2.abs().max(1.0));
    }

    #[test]
    fn non_finite_step_leaves_state_unchanged() {
        let (ds, vocab, enc) = tiny();
        let batch = first_batch(&ds, &vocab, 8);
        let cfg = TrainConfig::default();
        let mut s = init_training::<f32>(&cfg, &enc).unwrap();
        s.original.head.out.w[[0, 0]] = f32::NAN;
        let before = s.clone();
        let err = train_step(&mut s, &batch, &cfg).unwrap_err();
        assert!(matches!(err, CvibError::NonFinite(_)));
        assert_eq!(s.original.head.out.b, before.original.head.out.b);
        assert_eq!(s.pruned, before.pruned);
        assert_eq!(s.masks, before.masks);
        assert_eq!(s.step, 0);
        assert!(s.rng == before.rng);
    }

    #[test]
    fn training_is_reproducible() {
        let (ds, vocab, enc) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let data = TrainData {
            train: &ds,
            validation: Some(&ds),
            vocab: &vocab,
        };
        let a = train(&cfg, &enc, &data).unwrap();
        let b = train(&cfg, &enc, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
            TrainConfig { temperature: 0.0, ..TrainConfig::default() },
            TrainConfig { gamma: -1.0, ..TrainConfig::default() },
            TrainConfig { beta: f64::NAN, ..TrainConfig::default() },
            TrainConfig { dropout_rate: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(CvibError::Config(_))), "{c:?}");
        }
        assert!("no_vib".parse::<TrainMode>().is_ok());
        assert!("cvib".parse::<TrainMode>().is_err());
        let (_, _, enc) = tiny();
        let c = TrainConfig { beta_per_layer: Some(vec![1.0]), ..TrainConfig::default() };
        assert!(init_training::<f32>(&c, &enc).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (ds, vocab, enc) = tiny();
        let cfg = TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() };
        let out = train(&cfg, &enc, &TrainData { train: &ds, validation: None, vocab: &vocab }).unwrap();
        let text = out.final_checkpoint.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, out.final_checkpoint);
        let p1 = inference_model(&back, 1e-2).unwrap().predict_proba(&ds).unwrap();
        let p2 = inference_model(&out.final_checkpoint, 1e-2).unwrap().predict_proba(&ds).unwrap();
        assert_eq!(p1, p2);
        assert!(Checkpoint::from_json(&text.replace(CHECKPOINT_FORMAT, "other/0")).is_err());
    }
}
