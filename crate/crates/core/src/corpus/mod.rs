//! Labeled aspect-sentiment instances, tokenization, JSONL storage and a
//! synthetic generator with a planted spurious cue.

mod jsonl;
mod synthetic;
mod vocab;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CvibError, Result};

pub use jsonl::{load_jsonl, save_jsonl, JsonlRecord};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, WordPools};
pub use vocab::{Vocabulary, CLS, PAD, SEP, UNK};

pub const DEFAULT_CLASSES: usize = 3;

const LABEL_NAMES: [&str; 3] = ["positive", "negative", "neutral"];

/// String form of a label index. The first three indices carry the usual
/// sentiment names, further classes are written `class<k>`.
pub fn label_name(label: usize) -> String {
    LABEL_NAMES
        .get(label)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{label}"))
}

pub fn parse_label(name: &str) -> Option<usize> {
    if let Some(i) = LABEL_NAMES.iter().position(|n| *n == name) {
        return Some(i);
    }
    name.strip_prefix("class")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k >= LABEL_NAMES.len())
}

/// One labeled example: a context, the aspect inside it and a polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsaInstance {
    pub text: Vec<String>,
    pub aspect: Vec<String>,
    /// Half-open word range of the aspect inside `text`.
    pub aspect_start: usize,
    pub aspect_end: usize,
    pub label: usize,
}

impl AbsaInstance {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.text.is_empty() {
            return Err(CvibError::Validation("empty context".into()));
        }
        if self.aspect.is_empty() {
            return Err(CvibError::Validation("empty aspect".into()));
        }
        if self.aspect_start >= self.aspect_end || self.aspect_end > self.text.len() {
            return Err(CvibError::Validation(format!(
                "aspect range {}..{} outside context of {} words",
                self.aspect_start,
                self.aspect_end,
                self.text.len()
            )));
        }
        if self.label >= n_classes {
            return Err(CvibError::Validation(format!(
                "label {} not below class count {}",
                self.label, n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<AbsaInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<AbsaInstance>) -> Self {
        Dataset { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|x| x.label).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AbsaInstance> {
        self.instances.iter()
    }
}

/// Token ids laid out as `[CLS] context [SEP] aspect [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Positions of the aspect copy in the second segment.
    pub aspect_span: Range<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(instance: &AbsaInstance, vocab: &Vocabulary) -> Result<TokenSequence> {
    if instance.text.is_empty() {
        return Err(CvibError::Validation("empty context".into()));
    }
    if instance.aspect.is_empty() {
        return Err(CvibError::Validation("empty aspect".into()));
    }
    let n = instance.text.len();
    let m = instance.aspect.len();
    let mut ids = Vec::with_capacity(n + m + 3);
    ids.push(CLS);
    ids.extend(instance.text.iter().map(|w| vocab.id(w)));
    ids.push(SEP);
    ids.extend(instance.aspect.iter().map(|w| vocab.id(w)));
    ids.push(SEP);
    Ok(TokenSequence {
        ids,
        aspect_span: n + 2..n + 2 + m,
    })
}

/// Per-class label counts; `counts[k]` is the number of instances with label `k`.
pub fn class_counts(dataset: &Dataset, n_classes: usize) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(CvibError::Validation("empty dataset".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for inst in dataset.iter() {
        let slot = counts.get_mut(inst.label).ok_or_else(|| {
            CvibError::Validation(format!("label {} out of range", inst.label))
        })?;
        *slot += 1;
    }
    Ok(counts)
}
