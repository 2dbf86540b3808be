//! Seeded synthetic dialogue corpus with controllable per-modality separability.
//!
//! Each utterance's modality-`m` vector is `centroid(label, m) · separability[m] + N(0, I)`.
//! Centroids are orthonormal per modality (Gram-Schmidt over Gaussian draws), so
//! every pair of classes is equally hard.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conversation::{Conversation, Modality, RawPayloads, Split, Utterance};
use super::features::{FeatureStore, Provenance};
use super::labels::LabelSpace;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Separability {
    pub text: f64,
    pub audio: f64,
    pub video: f64,
}

impl Separability {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }

    pub fn set(&mut self, m: Modality, v: f64) {
        match m {
            Modality::Text => self.text = v,
            Modality::Audio => self.audio = v,
            Modality::Video => self.video = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub n_conversations: SplitCounts,
    /// Inclusive `[min, max]` conversation length.
    pub utterances_per_conversation: [usize; 2],
    pub n_speakers: usize,
    pub label_space: LabelSpace,
    pub separability: Separability,
    pub noise_dim: usize,
    pub seed: u64,
    /// Also emit a short text payload per utterance (for the prompt encoder path).
    #[serde(default)]
    pub with_text: bool,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_conversations: SplitCounts {
                train: 140,
                dev: 30,
                test: 30,
            },
            utterances_per_conversation: [6, 14],
            n_speakers: 2,
            label_space: LabelSpace::iemocap(),
            separability: Separability {
                text: 0.9,
                audio: 0.5,
                video: 0.2,
            },
            noise_dim: 32,
            seed: 7,
            with_text: false,
        }
    }
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let s = self.separability.get(m);
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!(
                    "separability[{m}] = {s} is outside [0, 1]"
                )));
            }
        }
        if self.label_space.len() < 2 {
            return Err(Error::Validation(
                "label space needs at least 2 classes".into(),
            ));
        }
        let [lo, hi] = self.utterances_per_conversation;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!(
                "utterances_per_conversation [{lo}, {hi}] is not a valid non-empty range"
            )));
        }
        if self.n_speakers == 0 {
            return Err(Error::Validation("n_speakers must be positive".into()));
        }
        if self.noise_dim == 0 {
            return Err(Error::Validation("noise_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub stores: BTreeMap<Modality, FeatureStore>,
}

impl SynthCorpus {
    pub fn store(&self, m: Modality) -> &FeatureStore {
        &self.stores[&m]
    }
}

/// Unit-norm class centroids in `R^dim`; orthonormal when `classes <= dim`.
pub fn class_centroids<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

const FILLER_WORDS: usize = 200;
const CUES_PER_CLASS: usize = 4;

fn synth_text<R: Rng + ?Sized>(label: &str, separability: f64, rng: &mut R) -> String {
    let n = rng.random_range(3..=6);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < separability {
                format!("{label}{}", rng.random_range(0..CUES_PER_CLASS))
            } else {
                format!("w{}", rng.random_range(0..FILLER_WORDS))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate_synth_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.label_space.len();
    let d = spec.noise_dim;
    let centroids: BTreeMap<Modality, Vec<Vec<f64>>> = Modality::ALL
        .iter()
        .map(|&m| (m, class_centroids(classes, d, &mut rng)))
        .collect();
    let provenance = Provenance {
        encoder: "synthetic".into(),
        config_hash: spec.digest(),
    };
    let mut stores: BTreeMap<Modality, FeatureStore> = Modality::ALL
        .iter()
        .map(|&m| (m, FeatureStore::new(m, d, provenance.clone())))
        .collect();
    let mut conversations = Vec::new();
    let [lo, hi] = spec.utterances_per_conversation;
    let mut speakers: Vec<u32> = (0..spec.n_speakers as u32).collect();
    for split in Split::ALL {
        for c in 0..spec.n_conversations.get(split) {
            let conv_id = format!("{split}_{c:04}");
            let len = rng.random_range(lo..=hi);
            speakers.shuffle(&mut rng);
            let mut utts = Vec::with_capacity(len);
            for k in 0..len {
                let label = rng.random_range(0..classes);
                let utterance_id = format!("{conv_id}_u{k:02}");
                for m in Modality::ALL {
                    let sep = spec.separability.get(m);
                    let cen = &centroids[&m][label];
                    let v: Vec<f32> = cen
                        .iter()
                        .map(|&c| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (c * sep + z) as f32
                        })
                        .collect();
                    stores
                        .get_mut(&m)
                        .expect("all modalities present")
                        .insert(utterance_id.clone(), v)?;
                }
                let label = spec.label_space.get(label).expect("in range").clone();
                let text = spec
                    .with_text
                    .then(|| synth_text(&label.name, spec.separability.text, &mut rng));
                utts.push(Utterance {
                    utterance_id,
                    speaker_id: speakers[k % speakers.len()],
                    label,
                    payloads: RawPayloads {
                        text,
                        ..RawPayloads::default()
                    },
                });
            }
            conversations.push(Conversation::new(conv_id, split, utts)?);
        }
    }
    Ok(SynthCorpus {
        conversations,
        stores,
    })
}
