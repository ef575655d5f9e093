//! Synthetic aspect-sentiment corpus.
//!
//! Every context is a run of filler words with the target aspect followed by
//! a class-signal word, so the label is a deterministic function of the word
//! right after the aspect. Optionally a second aspect with a signal word of a
//! different class is planted elsewhere, which defeats bag-of-words shortcuts.
//! One cue word per class is placed at a free position. In the training and
//! iid splits the cue matches the label with probability `spurious_correlation`;
//! in the ood split the cue class is drawn independently of the label.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AbsaInstance, Dataset, DEFAULT_CLASSES};
use crate::error::{CvibError, Result};

const RESERVED_TOKENS: usize = 4;
const MIN_FILLER: usize = 4;
/// aspect + signal, distractor aspect + signal, cue.
const MIN_CONTEXT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Total vocabulary budget including the four reserved tokens.
    pub vocab_size: usize,
    pub n_classes: usize,
    pub train_size: usize,
    pub iid_test_size: usize,
    pub ood_test_size: usize,
    /// Probability that a training instance carries the cue bound to its label.
    pub spurious_correlation: f64,
    pub class_ratios: Vec<f64>,
    pub seed: u64,
    pub min_context_len: usize,
    pub max_context_len: usize,
    pub aspect_words: usize,
    pub signal_words_per_class: usize,
    /// Probability of planting a second aspect with a conflicting signal word.
    pub distractor_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 120,
            n_classes: DEFAULT_CLASSES,
            train_size: 2000,
            iid_test_size: 500,
            ood_test_size: 500,
            spurious_correlation: 0.95,
            class_ratios: vec![1.0 / 3.0; DEFAULT_CLASSES],
            seed: 7,
            min_context_len: 8,
            max_context_len: 12,
            aspect_words: 8,
            signal_words_per_class: 4,
            distractor_prob: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(CvibError::Config(m));
        if !(0.0..=1.0).contains(&self.spurious_correlation) {
            return cfg(format!(
                "spurious_correlation {} outside [0, 1]",
                self.spurious_correlation
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return cfg(format!("distractor_prob {} outside [0, 1]", self.distractor_prob));
        }
        if self.n_classes < 2 {
            return cfg("at least two classes are required".into());
        }
        if self.train_size == 0 || self.iid_test_size == 0 || self.ood_test_size == 0 {
            return cfg("split sizes must be at least 1".into());
        }
        if self.class_ratios.len() != self.n_classes {
            return cfg(format!(
                "{} class ratios for {} classes",
                self.class_ratios.len(),
                self.n_classes
            ));
        }
        if self.class_ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return cfg("class ratios must be finite and nonnegative".into());
        }
        let total: f64 = self.class_ratios.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return cfg(format!("class ratios sum to {total}, expected 1"));
        }
        if self.min_context_len < MIN_CONTEXT || self.max_context_len < self.min_context_len {
            return cfg(format!(
                "context length range {}..={} invalid (minimum {MIN_CONTEXT})",
                self.min_context_len, self.max_context_len
            ));
        }
        if self.aspect_words < 2 || self.signal_words_per_class < 1 {
            return cfg("need at least 2 aspect words and 1 signal word per class".into());
        }
        let needed = RESERVED_TOKENS
            + self.aspect_words
            + self.n_classes * (self.signal_words_per_class + 1)
            + MIN_FILLER;
        if self.vocab_size < needed {
            return cfg(format!(
                "vocab_size {} too small: signal, cue, aspect and filler words need {needed}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn word_pools(&self) -> WordPools {
        let n_filler = self.vocab_size
            - RESERVED_TOKENS
            - self.aspect_words
            - self.n_classes * (self.signal_words_per_class + 1);
        WordPools {
            aspects: (0..self.aspect_words).map(|k| format!("item{k}")).collect(),
            signals: (0..self.n_classes)
                .map(|c| {
                    (0..self.signal_words_per_class)
                        .map(|k| format!("sig{c}_{k}"))
                        .collect()
                })
                .collect(),
            cues: (0..self.n_classes).map(|c| format!("cue{c}")).collect(),
            fillers: (0..n_filler).map(|k| format!("w{k}")).collect(),
        }
    }
}

/// The word inventory a [`SyntheticSpec`] draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPools {
    pub aspects: Vec<String>,
    /// `signals[c]` are the words that determine class `c`.
    pub signals: Vec<Vec<String>>,
    /// `cues[c]` is the spurious cue bound to class `c`.
    pub cues: Vec<String>,
    pub fillers: Vec<String>,
}

impl WordPools {
    /// Class of the cue word present in `text`, if any.
    pub fn cue_class(&self, text: &[String]) -> Option<usize> {
        text.iter()
            .find_map(|w| self.cues.iter().position(|c| c == w))
    }

    pub fn signal_class(&self, word: &str) -> Option<usize> {
        self.signals
            .iter()
            .position(|pool| pool.iter().any(|s| s == word))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub iid_test: Dataset,
    pub ood_test: Dataset,
    pub pools: WordPools,
}

#[derive(Clone, Copy)]
enum CueMode {
    Bound(f64),
    Independent,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let pools = spec.word_pools();
    let classes = WeightedIndex::new(&spec.class_ratios)
        .map_err(|e| CvibError::Config(format!("class ratios: {e}")))?;
    let rho = spec.spurious_correlation;
    let split = |stream: u64, size: usize, mode: CueMode| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let instances = (0..size)
            .map(|_| {
                let label = classes.sample(&mut rng);
                sample_instance(spec, &pools, label, mode, &mut rng)
            })
            .collect();
        Dataset::new(instances)
    };
    Ok(SyntheticCorpus {
        train: split(1, spec.train_size, CueMode::Bound(rho)),
        iid_test: split(2, spec.iid_test_size, CueMode::Bound(rho)),
        ood_test: split(3, spec.ood_test_size, CueMode::Independent),
        pools,
    })
}

fn other_class<R: Rng>(rng: &mut R, n_classes: usize, not: usize) -> usize {
    let k = rng.gen_range(0..n_classes - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

fn sample_instance<R: Rng>(
    spec: &SyntheticSpec,
    pools: &WordPools,
    label: usize,
    mode: CueMode,
    rng: &mut R,
) -> AbsaInstance {
    let n = rng.gen_range(spec.min_context_len..=spec.max_context_len);
    let mut text: Vec<String> = (0..n)
        .map(|_| pools.fillers.choose(rng).unwrap().clone())
        .collect();
    let mut used = vec![false; n];

    let aspect_idx = rng.gen_range(0..pools.aspects.len());
    let p = rng.gen_range(0..n - 1);
    text[p] = pools.aspects[aspect_idx].clone();
    text[p + 1] = pools.signals[label].choose(rng).unwrap().clone();
    used[p] = true;
    used[p + 1] = true;

    if rng.gen_bool(spec.distractor_prob) {
        let slots: Vec<usize> = (0..n - 1).filter(|&q| !used[q] && !used[q + 1]).collect();
        if let Some(&q) = slots.choose(rng) {
            let mut other = rng.gen_range(0..pools.aspects.len() - 1);
            if other >= aspect_idx {
                other += 1;
            }
            let wrong = other_class(rng, spec.n_classes, label);
            text[q] = pools.aspects[other].clone();
            text[q + 1] = pools.signals[wrong].choose(rng).unwrap().clone();
            used[q] = true;
            used[q + 1] = true;
        }
    }

    let cue = match mode {
        CueMode::Bound(rho) => {
            if rng.gen_bool(rho) {
                label
            } else {
                other_class(rng, spec.n_classes, label)
            }
        }
        CueMode::Independent => rng.gen_range(0..spec.n_classes),
    };
    let free: Vec<usize> = (0..n).filter(|&i| !used[i]).collect();
    let c = *free.choose(rng).expect("context leaves a free slot for the cue");
    text[c] = pools.cues[cue].clone();

    AbsaInstance {
        aspect: vec![text[p].clone()],
        text,
        aspect_start: p,
        aspect_end: p + 1,
        label,
    }
}
