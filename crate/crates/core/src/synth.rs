//! Synthetic NER corpora.
//!
//! Entities of length 1 to 7 are drawn from type-specific vocabularies and
//! placed over a background of O tokens. Interior tokens of longer entities
//! are often drawn from a pool shared by all types, so the type has to be
//! carried from the entity's edges. A few background words also occur
//! inside entities.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AnnotatedSentence, Corpus, Split};
use crate::labels::{EntityLabelSet, SegLabel, Segment, Segmentation, Sentence};
use crate::Result;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    /// Relative weights of entity lengths 1..=7.
    pub length_weights: [f64; 7],
    pub type_vocab: usize,
    pub shared_vocab: usize,
    pub background_vocab: usize,
    /// Probability that an interior token comes from the shared pool.
    pub shared_rate: f64,
    /// Probability that an entity token is a background word.
    pub noise_rate: f64,
    pub min_entities: usize,
    pub max_entities: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 500,
            test: 500,
            seed: 7,
            length_weights: [0.28, 0.24, 0.16, 0.12, 0.10, 0.08, 0.0025],
            type_vocab: 40,
            shared_vocab: 25,
            background_vocab: 300,
            shared_rate: 0.5,
            noise_rate: 0.03,
            min_entities: 1,
            max_entities: 3,
        }
    }
}

pub struct SynthCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

struct Lexicon {
    types: Vec<Vec<String>>,
    shared: Vec<String>,
    background: Vec<String>,
}

fn syllables<R: Rng>(rng: &mut R, n: usize) -> String {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "kr"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    (0..n)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

impl Lexicon {
    fn new<R: Rng>(c: &SynthConfig, types: usize, rng: &mut R) -> Self {
        let mut used = std::collections::HashSet::new();
        let mut fresh = |rng: &mut R, caps: bool| loop {
            let n = rng.gen_range(2..=3);
            let mut w = syllables(rng, n);
            if caps {
                w[..1].make_ascii_uppercase();
            }
            if used.insert(w.to_lowercase()) {
                return w;
            }
        };
        let types = (0..types)
            .map(|_| (0..c.type_vocab).map(|_| fresh(rng, true)).collect())
            .collect();
        let shared = (0..c.shared_vocab).map(|_| fresh(rng, true)).collect();
        let background = (0..c.background_vocab).map(|_| fresh(rng, false)).collect();
        Self {
            types,
            shared,
            background,
        }
    }
}

fn sentence<R: Rng>(c: &SynthConfig, lex: &Lexicon, lengths: &WeightedIndex<f64>, rng: &mut R) -> AnnotatedSentence {
    let k = rng.gen_range(c.min_entities..=c.max_entities);
    let mut tokens = Vec::new();
    let mut segs = Vec::new();
    let background = |tokens: &mut Vec<String>, segs: &mut Vec<Segment>, rng: &mut R, n: usize| {
        for _ in 0..n {
            tokens.push(lex.background.choose(rng).unwrap().clone());
            segs.push(Segment::new(tokens.len(), tokens.len(), SegLabel::Outside));
        }
    };
    for i in 0..k {
        let gap = rng.gen_range(if i == 0 { 0 } else { 1 }..=4);
        background(&mut tokens, &mut segs, rng, gap);
        let t = rng.gen_range(0..lex.types.len());
        let len = lengths.sample(rng) + 1;
        let begin = tokens.len() + 1;
        for j in 0..len {
            let edge = j == 0 || j + 1 == len;
            let pool = if rng.gen_bool(c.noise_rate) {
                &lex.background
            } else if !edge && rng.gen_bool(c.shared_rate) {
                &lex.shared
            } else {
                &lex.types[t]
            };
            tokens.push(pool.choose(rng).unwrap().clone());
        }
        segs.push(Segment::new(begin, tokens.len(), SegLabel::Entity(t)));
    }
    let tail = rng.gen_range(0..=4);
    background(&mut tokens, &mut segs, rng, tail);
    let n = tokens.len();
    AnnotatedSentence {
        sentence: Sentence::new(tokens).expect("at least one entity"),
        gold: Segmentation::new(segs, n).expect("segments tile the sentence"),
    }
}

/// Generates train, dev and test corpora with the CoNLL entity types.
pub fn generate(c: &SynthConfig) -> SynthCorpora {
    let labels = EntityLabelSet::conll();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let lex = Lexicon::new(c, labels.num_types(), &mut rng);
    let lengths = WeightedIndex::new(c.length_weights).expect("positive length weights");
    let mut corpus = |split, count| Corpus {
        split,
        labels: labels.clone(),
        sentences: (0..count).map(|_| sentence(c, &lex, &lengths, &mut rng)).collect(),
    };
    let train = corpus(Split::Train, c.train);
    let dev = corpus(Split::Dev, c.dev);
    let test = corpus(Split::Test, c.test);
    SynthCorpora { train, dev, test }
}

/// Writes `train.txt`, `dev.txt` and `test.txt` into `dir`.
pub fn write(corpora: &SynthCorpora, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, c) in [("train", &corpora.train), ("dev", &corpora.dev), ("test", &corpora.test)] {
        fs::write(dir.join(format!("{name}.txt")), c.to_conll())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_conll, ColumnConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            train: 300,
            dev: 20,
            test: 20,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a.train, b.train);
        let c = generate(&SynthConfig { seed: 8, ..small() });
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn lengths_span_one_to_seven() {
        let c = generate(&SynthConfig::default());
        let mut seen = [0usize; 8];
        for s in &c.train.sentences {
            for e in s.gold.entities() {
                seen[e.len()] += 1;
            }
        }
        assert!(seen[1..=7].iter().all(|&n| n > 0), "{seen:?}");
        assert!(seen[7] < seen[1] / 50);
    }

    #[test]
    fn entities_are_separated() {
        let c = generate(&small());
        for s in &c.train.sentences {
            let segs = s.gold.segments();
            for pair in segs.windows(2) {
                assert!(!(pair[0].label.is_entity() && pair[1].label.is_entity()));
            }
        }
    }

    #[test]
    fn conll_round_trip() {
        let c = generate(&small());
        let cfg = ColumnConfig {
            labels: Some(EntityLabelSet::conll()),
            ..Default::default()
        };
        let back = parse_conll(&c.dev.to_conll(), Path::new("dev"), Split::Dev, &cfg).unwrap();
        assert_eq!(back.sentences, c.dev.sentences);
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        write(&generate(&small()), dir.path()).unwrap();
        for f in ["train.txt", "dev.txt", "test.txt"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
