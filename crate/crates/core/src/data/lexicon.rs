//! Emotion lexicon files: three classes, each carrying a class embedding and
//! a list of fine-grained words with optional embeddings. Words (or classes)
//! without stored vectors get deterministic unit-norm pseudo-embeddings
//! hashed from their text, so one file serves any embedding width.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::{LABEL_NAMES, NUM_CLASSES};
use crate::error::Error;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub word: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconClass {
    /// Lowercase key in the file ("positive", "neutral", "negative").
    pub name: String,
    /// Display form of the class word ("Positive", ...).
    pub class_word: String,
    pub class_embedding: Vec<f64>,
    pub entries: Vec<LexiconEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconSet {
    pub dim: usize,
    /// Fixed order: positive, neutral, negative.
    pub classes: [LexiconClass; NUM_CLASSES],
}

impl LexiconSet {
    pub fn class(&self, label: u8) -> &LexiconClass {
        &self.classes[label as usize]
    }
}

/// Deterministic pseudo-embedding: FNV-1a over the text seeds a ChaCha8
/// stream of uniform entries in (-1, 1), normalized to unit length.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-9, "hash embedding for '{text}' degenerate");
    for x in &mut v {
        *x /= norm;
    }
    v
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileWord {
    word: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileClass {
    #[serde(default)]
    class_embedding: Option<Vec<f64>>,
    lexicons: Vec<FileWord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLexicons {
    positive: FileClass,
    neutral: FileClass,
    negative: FileClass,
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn resolve_embedding(
    path: &Path,
    context: &str,
    stored: Option<Vec<f64>>,
    text: &str,
    dim: usize,
) -> Result<Vec<f64>> {
    match stored {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::validation(
                    path,
                    format!("{context}: embedding width {} != configured {dim}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(path, format!("{context}: non-finite embedding")));
            }
            Ok(v)
        }
        None => Ok(hash_embedding(text, dim)),
    }
}

/// Load and validate a lexicon file at the configured embedding width.
pub fn load_lexicons(path: &Path, dim: usize) -> Result<LexiconSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FileLexicons =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let per_class = [file.positive, file.neutral, file.negative];
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for (name, class) in LABEL_NAMES.iter().zip(per_class) {
        if class.lexicons.is_empty() {
            return Err(Error::validation(
                path,
                format!("class '{name}': at least one lexicon word required"),
            ));
        }
        let mut entries = Vec::with_capacity(class.lexicons.len());
        for w in class.lexicons {
            if entries.iter().any(|e: &LexiconEntry| e.word == w.word) {
                return Err(Error::validation(
                    path,
                    format!("class '{name}': duplicate word '{}'", w.word),
                ));
            }
            let embedding = resolve_embedding(
                path,
                &format!("class '{name}' word '{}'", w.word),
                w.embedding,
                &w.word,
                dim,
            )?;
            entries.push(LexiconEntry { word: w.word, embedding });
        }
        let class_word = capitalize(name);
        let class_embedding = resolve_embedding(
            path,
            &format!("class '{name}' embedding"),
            class.class_embedding,
            name,
            dim,
        )?;
        classes.push(LexiconClass {
            name: name.to_string(),
            class_word,
            class_embedding,
            entries,
        });
    }
    let classes: [LexiconClass; NUM_CLASSES] =
        classes.try_into().map_err(|_| Error::contract("class count"))?;
    Ok(LexiconSet { dim, classes })
}
