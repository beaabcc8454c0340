//! Frozen text encoder: signed feature hashing of word unigrams and bigrams,
//! L2-normalised, with an optional table of externally computed embeddings
//! that takes precedence.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// A frozen text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '.' || c == '\'' || c == '-'))
        .map(|t| t.trim_matches(|c: char| c == '.' || c == '\'' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    external: HashMap<String, TextEmbedding>,
}

impl TextEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            external: HashMap::new(),
        }
    }

    pub fn with_external(dim: usize, external: HashMap<String, TextEmbedding>) -> Result<Self> {
        if let Some((text, e)) = external.iter().find(|(_, e)| e.dim() != dim) {
            return Err(Error::Config(format!(
                "external embedding for {text:?} has length {}, expected {dim}",
                e.dim()
            )));
        }
        Ok(Self { dim, external })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn external_len(&self) -> usize {
        self.external.len()
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::Input("cannot encode an empty string".into()));
        }
        if let Some(e) = self.external.get(text) {
            return Ok(e.clone());
        }
        Ok(self.hashed(text))
    }

    fn hashed(&self, text: &str) -> TextEmbedding {
        let toks = tokens(text);
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &str| {
            let h = fnv1a(feature.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        };
        for t in &toks {
            add(t);
        }
        for pair in toks.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        if toks.is_empty() {
            // Punctuation-only input still maps to a stable direction.
            add(text.trim());
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        TextEmbedding(v)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingLine {
    text: String,
    vector: Vec<f64>,
}

/// Reads `{"text": ..., "vector": [...]}` lines; every vector must have
/// length `dim`.
pub fn load_external_embeddings(path: &Path, dim: usize) -> Result<HashMap<String, TextEmbedding>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EmbeddingLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if entry.vector.len() != dim {
            return Err(Error::Config(format!(
                "{}:{}: embedding for {:?} has length {}, expected {dim}",
                path.display(),
                i + 1,
                entry.text,
                entry.vector.len()
            )));
        }
        if entry.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "{}:{}: non-finite embedding entry",
                path.display(),
                i + 1
            )));
        }
        map.insert(entry.text, TextEmbedding(entry.vector));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let enc = TextEncoder::new(512);
        let a = enc
            .encode("75 years old subject for Alzheimer's Disease diagnosis")
            .unwrap();
        let b = enc
            .encode("75 years old subject for Alzheimer's Disease diagnosis")
            .unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), 512);
    }

    #[test]
    fn different_ages_differ() {
        let enc = TextEncoder::new(512);
        let a = enc.encode("75 years old").unwrap();
        let b = enc.encode("80 years old").unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn empty_text_is_an_input_error() {
        let enc = TextEncoder::new(16);
        assert!(matches!(enc.encode(""), Err(Error::Input(_))));
        assert!(matches!(enc.encode("   "), Err(Error::Input(_))));
        assert!((enc.encode(";;").unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_keeps_decimals_and_apostrophes() {
        assert_eq!(
            tokens("CDR 0.5 dementia level; Alzheimer's."),
            ["cdr", "0.5", "dementia", "level", "alzheimer's"]
        );
    }

    #[test]
    fn external_table_takes_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        fs::write(&path, "{\"text\":\"75 years old\",\"vector\":[0.5,0.25,0.0,2.0]}\n").unwrap();
        let map = load_external_embeddings(&path, 4).unwrap();
        let enc = TextEncoder::with_external(4, map).unwrap();
        assert_eq!(enc.encode("75 years old").unwrap().as_slice(), &[0.5, 0.25, 0.0, 2.0]);
        assert_eq!(
            enc.encode("80 years old").unwrap(),
            TextEncoder::new(4).encode("80 years old").unwrap()
        );
    }

    #[test]
    fn external_vector_of_wrong_length_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        fs::write(&path, "{\"text\":\"x\",\"vector\":[1.0,2.0]}\n").unwrap();
        assert!(matches!(load_external_embeddings(&path, 4), Err(Error::Config(_))));
        let mut map = HashMap::new();
        map.insert("x".to_owned(), TextEmbedding::new(vec![1.0]));
        assert!(matches!(TextEncoder::with_external(4, map), Err(Error::Config(_))));
    }
}
