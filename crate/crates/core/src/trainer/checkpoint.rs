//! Serialized training results and the deterministic inference predictor.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{tokenize_all, TrainConfig, TrainMode, TrainState};
use crate::corpus::{Dataset, TokenSequence, Vocabulary};
use crate::encoder::{forward, Batch, EncoderConfig, EncoderParams};
use crate::error::{CvibError, Result};
use crate::vib::{prune, MaskParams, PruneDecision};

pub const CHECKPOINT_FORMAT: &str = "cvib-checkpoint/1";

/// Everything needed to rebuild either network. Parameters are kept in f32;
/// on disk they are widened to f64 so a round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub step: u64,
    pub original: EncoderParams<f32>,
    pub pruned: EncoderParams<f32>,
    pub masks: MaskParams<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    encoder: EncoderConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    epoch: usize,
    step: u64,
    original: EncoderParams<f64>,
    pruned: EncoderParams<f64>,
    masks: MaskParams<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f32>, train: &TrainConfig, vocab: &Vocabulary) -> Self {
        Checkpoint {
            encoder: state.encoder.clone(),
            train: train.clone(),
            vocab: vocab.clone(),
            epoch: state.epoch,
            step: state.step,
            original: state.original.clone(),
            pruned: state.pruned.clone(),
            masks: state.masks.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            original: self.original.cast(),
            pruned: self.pruned.cast(),
            masks: self.masks.cast(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(CvibError::Config(format!(
                "unsupported checkpoint format {:?}",
                file.format
            )));
        }
        file.encoder.validate()?;
        file.original.check_shapes(&file.encoder)?;
        file.pruned.check_shapes(&file.encoder)?;
        if file.masks.n_layers() != file.encoder.n_layers || file.masks.dim() != file.encoder.hidden_dim {
            return Err(CvibError::Shape("mask parameters do not match the encoder".into()));
        }
        Ok(Checkpoint {
            encoder: file.encoder,
            train: file.train,
            vocab: file.vocab,
            epoch: file.epoch,
            step: file.step,
            original: file.original.cast(),
            pruned: file.pruned.cast(),
            masks: file.masks.cast(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| CvibError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CvibError::io(path, e))?;
        Self::from_json(&text)
    }
}

const PREDICT_CHUNK: usize = 128;

/// A frozen classifier with fixed masks. Prediction draws no randomness.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub encoder: EncoderConfig,
    pub params: EncoderParams<f32>,
    pub masks: Option<Vec<Array1<f32>>>,
    pub vocab: Vocabulary,
    pub decision: Option<PruneDecision>,
}

/// The pruned network with masks `mu`, dimensions whose `alpha` is at most
/// `threshold` zeroed. `baseline` checkpoints use the original network and
/// `no_vib` checkpoints use the pruned network without masks.
pub fn inference_model(ckpt: &Checkpoint, threshold: f64) -> Result<Predictor> {
    let (params, masks, decision) = match ckpt.train.mode {
        TrainMode::Baseline => (ckpt.original.clone(), None, None),
        TrainMode::NoVib => (ckpt.pruned.clone(), None, None),
        TrainMode::FullCvib | TrainMode::NoScl => {
            let decision = prune(&ckpt.masks, threshold)?;
            let masks = decision.inference_masks(&ckpt.masks);
            (ckpt.pruned.clone(), Some(masks), Some(decision))
        }
    };
    Ok(Predictor {
        encoder: ckpt.encoder.clone(),
        params,
        masks,
        vocab: ckpt.vocab.clone(),
        decision,
    })
}

impl Predictor {
    pub fn predict_sequences(&self, seqs: &[TokenSequence]) -> Result<Array2<f32>> {
        let c = self.encoder.n_classes;
        let mut out = Array2::zeros((seqs.len(), c));
        for (k, chunk) in seqs.chunks(PREDICT_CHUNK).enumerate() {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let batch = Batch::new(&refs, &vec![0; chunk.len()])?;
            let masks: Option<Vec<Array2<f32>>> = self.masks.as_ref().map(|m| {
                m.iter()
                    .map(|z| Array2::from_shape_fn((chunk.len(), z.len()), |(_, j)| z[j]))
                    .collect()
            });
            let fwd = forward(&self.params, &self.encoder, &batch, masks.as_deref(), false)?;
            let probs = fwd.probs();
            if probs.iter().any(|p| !p.is_finite()) {
                return Err(CvibError::NonFinite("predicted probabilities".into()));
            }
            out.slice_mut(ndarray::s![k * PREDICT_CHUNK..k * PREDICT_CHUNK + chunk.len(), ..])
                .assign(&probs);
        }
        Ok(out)
    }

    /// Class probabilities, one row per instance.
    pub fn predict_proba(&self, dataset: &Dataset) -> Result<Array2<f32>> {
        let seqs = tokenize_all(dataset, &self.vocab)?;
        self.predict_sequences(&seqs)
    }

    /// Arg-max labels; ties go to the lowest class index.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        let probs = self.predict_proba(dataset)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}
