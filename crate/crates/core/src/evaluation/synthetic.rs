//! Seeded attribute-world dataset: images are noisy sums of per-attribute
//! prototype vectors, and each dialogue reveals one attribute of its target
//! per round, starting with the coarse category in the caption.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::tokenizer::words;
use crate::encoders::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::evaluation::dialogue::{DialogueRecord, RoundText};
use crate::numerics::matrix::{dot, norm};
use crate::numerics::Matrix;

struct Slot {
    question: &'static str,
    values: &'static [&'static str],
}

const SLOTS: &[Slot] = &[
    Slot {
        question: "what is it",
        values: &["dog", "cat", "car", "boat", "bird", "horse", "train", "chair"],
    },
    Slot {
        question: "what color is it",
        values: &["red", "blue", "green", "yellow", "black", "white"],
    },
    Slot {
        question: "where is it",
        values: &["beach", "street", "kitchen", "forest", "field", "garage"],
    },
    Slot {
        question: "how big is it",
        values: &["tiny", "small", "large", "huge"],
    },
    Slot {
        question: "what time of day",
        values: &["morning", "noon", "dusk", "midnight"],
    },
    Slot {
        question: "how is the weather",
        values: &["sunny", "rainy", "snowy", "foggy"],
    },
    Slot {
        question: "how many are there",
        values: &["one", "two", "three", "four"],
    },
    Slot {
        question: "what is it doing",
        values: &["sitting", "standing", "running", "sleeping"],
    },
    Slot {
        question: "what is it made of",
        values: &["wooden", "metal", "plastic", "stone"],
    },
    Slot {
        question: "what is the view",
        values: &["closeup", "aerial", "sideways", "frontal"],
    },
];

const CAPTIONS: &[&str] = &["a photo of a {}", "there is a {} in the picture", "an image showing a {}"];
const ANSWERS: &[&str] = &["{}", "it is {}", "i think {}"];

/// Largest supported dialogue length (caption plus rounds).
pub const MAX_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub images: usize,
    pub dim: usize,
    /// Pipeline rounds per dialogue, the caption included.
    pub rounds: usize,
    /// Per-coordinate standard deviation of the image noise.
    pub noise: f64,
    /// Prototype weight of the coarse (caption) attribute.
    pub coarse_weight: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            images: 500,
            dim: 32,
            rounds: 5,
            noise: 0.05,
            coarse_weight: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub corpus: EmbeddingCorpus,
    pub dialogues: Vec<DialogueRecord>,
    /// Attribute value index per slot, per image.
    pub attributes: Vec<Vec<usize>>,
    /// Prototype matrix per slot: one unit row per value.
    pub prototypes: Vec<Matrix>,
}

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn fill(template: &str, value: &str) -> String {
    template.replacen("{}", value, 1)
}

pub fn attribute_combinations(rounds: usize) -> usize {
    SLOTS.iter().take(rounds).map(|s| s.values.len()).product()
}

/// Builds the dataset for `seed`. Deterministic in `(seed, config)`.
pub fn gen_synthetic(seed: u64, config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.images < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 images".into()));
    }
    if config.rounds == 0 || config.rounds > MAX_ROUNDS {
        return Err(Error::Config(format!("rounds must be in 1..={MAX_ROUNDS}")));
    }
    if config.dim == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    if !(config.noise >= 0.0 && config.coarse_weight > 0.0) {
        return Err(Error::Config("noise must be non-negative and coarse weight positive".into()));
    }
    let combos = attribute_combinations(config.rounds);
    if config.images > combos {
        return Err(Error::Config(format!(
            "{} images cannot be told apart with {} rounds ({combos} attribute combinations)",
            config.images, config.rounds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = &SLOTS[..config.rounds];
    let prototypes: Vec<Matrix> = slots
        .iter()
        .map(|s| {
            let rows: Vec<Vec<f64>> = s.values.iter().map(|_| unit_normal(&mut rng, config.dim)).collect();
            Matrix::from_rows(&rows).expect("equal row lengths")
        })
        .collect();

    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, combos, config.images).into_vec();
    chosen.sort_unstable();
    let attributes: Vec<Vec<usize>> = chosen
        .iter()
        .map(|&c| {
            let mut rest = c;
            slots
                .iter()
                .map(|s| {
                    let v = rest % s.values.len();
                    rest /= s.values.len();
                    v
                })
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(config.images);
    for (i, attrs) in attributes.iter().enumerate() {
        let mut v = vec![0.0; config.dim];
        for (s, &a) in attrs.iter().enumerate() {
            let w = if s == 0 { config.coarse_weight } else { 1.0 };
            for (o, p) in v.iter_mut().zip(prototypes[s].row(a)) {
                *o += w * p;
            }
        }
        for o in &mut v {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o += config.noise * z;
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        records.push((image_id(i), v, None));
    }
    let labels = attributes
        .iter()
        .map(|attrs| {
            let words: Vec<&str> = attrs.iter().zip(slots).map(|(&a, s)| s.values[a]).collect();
            Some(words.join(", "))
        })
        .collect();
    let corpus = EmbeddingCorpus::new(config.dim, records)?.with_labels(labels)?;
    let mut ds = SyntheticDataset {
        config: config.clone(),
        corpus,
        dialogues: Vec::new(),
        attributes,
        prototypes,
    };
    ds.dialogues = ds.sample_dialogues(&mut rng);
    Ok(ds)
}

pub fn image_id(i: usize) -> String {
    format!("img{i:04}")
}

impl SyntheticDataset {
    /// A fresh phrasing of one dialogue per image, independent of the stored set.
    pub fn resample_dialogues(&self, seed: u64) -> Vec<DialogueRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_dialogues(&mut rng)
    }

    fn sample_dialogues(&self, rng: &mut ChaCha8Rng) -> Vec<DialogueRecord> {
        let slots = &SLOTS[..self.config.rounds];
        self.attributes
            .iter()
            .enumerate()
            .map(|(i, attrs)| {
                let caption = fill(CAPTIONS[rng.random_range(0..CAPTIONS.len())], slots[0].values[attrs[0]]);
                let mut order: Vec<usize> = (1..slots.len()).collect();
                order.shuffle(rng);
                let rounds = order
                    .into_iter()
                    .map(|s| RoundText {
                        q: format!("{}?", slots[s].question),
                        a: fill(ANSWERS[rng.random_range(0..ANSWERS.len())], slots[s].values[attrs[s]]),
                    })
                    .collect();
                DialogueRecord {
                    target_id: image_id(i),
                    caption,
                    rounds,
                }
            })
            .collect()
    }

    /// Attribute values named in `texts`, by slot.
    pub fn attributes_in(&self, texts: &[String]) -> Vec<Option<usize>> {
        let lookup: HashMap<&str, (usize, usize)> = SLOTS[..self.config.rounds]
            .iter()
            .enumerate()
            .flat_map(|(s, slot)| slot.values.iter().enumerate().map(move |(v, w)| (*w, (s, v))))
            .collect();
        let mut found = vec![None; self.config.rounds];
        for t in texts {
            for w in words(t) {
                if let Some(&(s, v)) = lookup.get(w.as_str()) {
                    found[s] = Some(v);
                }
            }
        }
        found
    }

    /// Images whose attributes agree with every named value.
    pub fn matching_images(&self, named: &[Option<usize>]) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&i| {
                named
                    .iter()
                    .zip(&self.attributes[i])
                    .all(|(n, a)| n.is_none_or(|v| v == *a))
            })
            .collect()
    }

    /// Sum of the prototypes of the named values, weighted like the images.
    pub fn reference_query(&self, named: &[Option<usize>]) -> Vec<f64> {
        let mut q = vec![0.0; self.config.dim];
        for (s, v) in named.iter().enumerate() {
            if let Some(v) = v {
                let w = if s == 0 { self.config.coarse_weight } else { 1.0 };
                for (o, p) in q.iter_mut().zip(self.prototypes[s].row(*v)) {
                    *o += w * p;
                }
            }
        }
        q
    }

    /// 1-based rank of `target` under the reference retriever for `texts`.
    pub fn reference_rank(&self, texts: &[String], target: usize) -> usize {
        let q = self.reference_query(&self.attributes_in(texts));
        let qn = norm(&q);
        let score = |i: usize| {
            let e = self.corpus.embedding(i);
            let d = qn * norm(e);
            if d == 0.0 {
                0.0
            } else {
                dot(&q, e) / d
            }
        };
        let st = score(target);
        1 + (0..self.corpus.len())
            .filter(|&i| i != target)
            .filter(|&i| {
                let s = score(i);
                s > st || (s == st && self.corpus.id(i) < self.corpus.id(target))
            })
            .count()
    }
}

/// Every word the generator can emit.
pub fn vocabulary() -> Vec<String> {
    let mut set = HashSet::new();
    let templates = CAPTIONS.iter().chain(ANSWERS).copied();
    let questions = SLOTS.iter().map(|s| s.question);
    for t in templates.chain(questions) {
        set.extend(words(t));
    }
    for s in SLOTS {
        set.extend(s.values.iter().map(|v| v.to_string()));
    }
    let mut v: Vec<String> = set.into_iter().collect();
    v.sort();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenizer::word_id;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            images: 60,
            dim: 16,
            rounds: 4,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic(0, &small()).unwrap();
        let b = gen_synthetic(0, &small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.dialogues, b.dialogues);
        let c = gen_synthetic(1, &small()).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn full_dialogue_names_exactly_its_target() {
        let ds = gen_synthetic(0, &small()).unwrap();
        for (i, d) in ds.dialogues.iter().enumerate() {
            assert_eq!(d.len(), 4);
            let named = ds.attributes_in(&d.texts());
            assert!(named.iter().all(Option::is_some));
            assert_eq!(ds.matching_images(&named), vec![i]);
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let too_many = SyntheticConfig { images: 50, rounds: 1, ..small() };
        assert!(matches!(gen_synthetic(0, &too_many), Err(Error::Config(_))));
        assert!(gen_synthetic(0, &SyntheticConfig { images: 1, ..small() }).is_err());
        assert!(gen_synthetic(0, &SyntheticConfig { rounds: 11, ..small() }).is_err());
    }

    #[test]
    fn vocabulary_has_no_hash_collisions_at_desk_size() {
        let vocab = vocabulary();
        let ids: HashSet<u32> = vocab.iter().map(|w| word_id(w, 1024)).collect();
        assert_eq!(ids.len(), vocab.len());
    }

    #[test]
    fn reference_retriever_is_perfect_at_the_last_round() {
        let ds = gen_synthetic(0, &small()).unwrap();
        for (i, d) in ds.dialogues.iter().enumerate() {
            assert_eq!(ds.reference_rank(&d.texts(), i), 1);
        }
    }
}
