//! Bundled task generators over a word-level toy vocabulary.
//!
//! Tokenization is one vocabulary id per word, which keeps the generators
//! deterministic and keeps tokenizer behavior out of every experiment. The
//! three singleton pairs (a factual-recall pair, a name-tracking pair, and a
//! random pair) plus the two template distributions all share one builtin
//! vocabulary so any generated prompt runs on the same model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patching::{PromptPair, PromptPairDistribution};

/// Sentence-start marker occupying position 0 of every prompt.
pub const BOS: &str = "<bos>";

/// Default name fill set for the name-tracking distribution.
pub const DEFAULT_NAMES: [&str; 6] =
    ["Michael", "Jessica", "Ashley", "Joshua", "David", "Sarah"];

/// Objects taking the article "a".
pub const A_OBJECTS: [&str; 10] =
    ["boat", "coat", "drum", "horn", "map", "pipe", "screw", "stamp", "tent", "wall"];

/// Objects taking the article "an".
pub const AN_OBJECTS: [&str; 10] = [
    "apple", "ant", "axe", "award", "elephant", "egg", "orange", "oven", "onion", "umbrella",
];

const TEMPLATE_WORDS: [&str; 30] = [
    "When", "and", "went", "to", "the", "bar", ",", "gave", "a", "drink", "I", "want", "one",
    "pear", ".", "Can", "you", "pick", "up", "an", "for", "me", "?", "City", ":", "Barcelona",
    "\n", "Country", "Spain", "Beijing",
];

const EXTRA_WORDS: [&str; 17] = [
    "China",
    "Her",
    "biggest",
    "worry",
    "was",
    "festival",
    "might",
    "suffer",
    "people",
    "think",
    "also",
    "that",
    "there",
    "should",
    "be",
    "same",
    "rules",
];

/// Word-level vocabulary: a fixed id per word.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// The builtin vocabulary covering every bundled template.
    pub fn builtin() -> Self {
        let mut words: Vec<String> = vec![BOS.to_string()];
        words.extend(DEFAULT_NAMES.iter().map(|w| w.to_string()));
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend(A_OBJECTS.iter().map(|w| w.to_string()));
        words.extend(AN_OBJECTS.iter().map(|w| w.to_string()));
        words.extend(EXTRA_WORDS.iter().map(|w| w.to_string()));
        Vocab::new(words).expect("builtin vocabulary has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// Id of a single word; rejects unknown words and anything that would
    /// need more than one token (contains whitespace).
    pub fn id(&self, word: &str) -> Result<usize> {
        if word != "\n" && word.chars().any(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!(
                "{word:?} is not a single vocabulary word"
            )));
        }
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

fn require_distinct(items: &[&str]) -> Result<()> {
    for (i, a) in items.iter().enumerate() {
        if items[i + 1..].contains(a) {
            return Err(Error::InvalidConfig(format!("duplicate fill word {a:?}")));
        }
    }
    Ok(())
}

/// Name-tracking distribution: for every ordered distinct (A, B, C), the
/// clean prompt "When A and B went to the bar, A gave a drink to" completes
/// with B, and the noise prompt replaces the second A with C and completes
/// with A. Six names give 6*5*4 = 120 pairs.
pub fn generate_ioi(vocab: &Vocab, names: &[&str]) -> Result<PromptPairDistribution> {
    if names.len() < 3 {
        return Err(Error::InvalidConfig("need at least 3 names".to_string()));
    }
    require_distinct(names)?;
    let ids: Vec<usize> = names.iter().map(|n| vocab.id(n)).collect::<Result<_>>()?;
    let template = |subj: usize, other: usize, speaker: usize| -> Result<Vec<usize>> {
        let mut toks = vec![vocab.id(BOS)?, vocab.id("When")?];
        toks.push(subj);
        toks.push(vocab.id("and")?);
        toks.push(other);
        toks.extend(vocab.encode(&["went", "to", "the", "bar", ","])?);
        toks.push(speaker);
        toks.extend(vocab.encode(&["gave", "a", "drink", "to"])?);
        Ok(toks)
    };
    let mut pairs = Vec::new();
    for (ai, &a) in ids.iter().enumerate() {
        for (bi, &b) in ids.iter().enumerate() {
            if bi == ai {
                continue;
            }
            for (ci, &c) in ids.iter().enumerate() {
                if ci == ai || ci == bi {
                    continue;
                }
                pairs.push(PromptPair {
                    clean: template(a, b, a)?,
                    noise: template(a, b, c)?,
                    target: b,
                    noise_target: Some(a),
                    weight: None,
                });
            }
        }
    }
    PromptPairDistribution::new(pairs)
}

/// Indefinite-article distribution: a two-shot prefix (one "a" example, one
/// "an" example, in that fixed order) followed by "I want one OBJECT. Can
/// you pick up"; clean objects take "a", noise objects take "an". Ten
/// objects per side give 100 pairs.
pub fn generate_a_an(
    vocab: &Vocab,
    a_objects: &[&str],
    an_objects: &[&str],
) -> Result<PromptPairDistribution> {
    if a_objects.is_empty() || an_objects.is_empty() {
        return Err(Error::InvalidConfig("need at least one object per article".to_string()));
    }
    require_distinct(a_objects)?;
    require_distinct(an_objects)?;
    let shot = |article: &str, object: &str| -> Result<Vec<usize>> {
        let mut toks = vocab.encode(&["I", "want", "one", object, "."])?;
        toks.extend(vocab.encode(&["Can", "you", "pick", "up", article, object, "for", "me", "?"])?);
        Ok(toks)
    };
    let prompt = |object: &str| -> Result<Vec<usize>> {
        let mut toks = vec![vocab.id(BOS)?];
        toks.extend(shot("a", "pear")?);
        toks.extend(shot("an", "orange")?);
        toks.extend(vocab.encode(&["I", "want", "one", object, "."])?);
        toks.extend(vocab.encode(&["Can", "you", "pick", "up"])?);
        Ok(toks)
    };
    let target_a = vocab.id("a")?;
    let target_an = vocab.id("an")?;
    let mut pairs = Vec::new();
    for a_obj in a_objects {
        for an_obj in an_objects {
            pairs.push(PromptPair {
                clean: prompt(a_obj)?,
                noise: prompt(an_obj)?,
                target: target_a,
                noise_target: Some(target_an),
                weight: None,
            });
        }
    }
    PromptPairDistribution::new(pairs)
}

/// Factual-recall singleton pair: city prompt completing with the country.
pub fn city_pp(vocab: &Vocab) -> Result<PromptPairDistribution> {
    let mk = |city: &str| -> Result<Vec<usize>> {
        let mut toks = vec![vocab.id(BOS)?];
        toks.extend(vocab.encode(&["City", ":", city, "\n", "Country", ":"])?);
        Ok(toks)
    };
    PromptPairDistribution::single(PromptPair {
        clean: mk("Barcelona")?,
        noise: mk("Beijing")?,
        target: vocab.id("Spain")?,
        noise_target: Some(vocab.id("China")?),
        weight: None,
    })
}

/// Name-tracking singleton pair (one fixed instance of the template).
pub fn ioi_pp(vocab: &Vocab) -> Result<PromptPairDistribution> {
    let dist = generate_ioi(vocab, &["Michael", "Jessica", "Ashley"])?;
    // Take the (A=Michael, B=Jessica, C=Ashley) instance.
    PromptPairDistribution::single(dist.pair(0).clone())
}

/// Random singleton pair: two length-matched sequences of random vocabulary
/// words under a fixed seed, as an unstructured-control probe.
pub fn rand_pp(vocab: &Vocab, len: usize, seed: u64) -> Result<PromptPairDistribution> {
    if len < 2 {
        return Err(Error::InvalidConfig("random pair length must be >= 2".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bos = vocab.id(BOS)?;
    let mut draw = |n: usize| -> Vec<usize> {
        let mut toks = vec![bos];
        toks.extend((1..n).map(|_| rng.gen_range(1..vocab.len())));
        toks
    };
    let clean = draw(len);
    let noise = draw(len);
    let target = rng.gen_range(1..vocab.len());
    let noise_target = rng.gen_range(1..vocab.len());
    PromptPairDistribution::single(PromptPair {
        clean,
        noise,
        target,
        noise_target: Some(noise_target),
        weight: None,
    })
}
