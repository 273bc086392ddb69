//! Vocabulary construction, whitespace tokenization, step segmentation,
//! and operational/result token extraction from reasoning chains.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Id of the padding token, also used as the end-of-answer marker.
pub const PAD: TokenId = 0;
/// Id of the begin-of-sequence token.
pub const BOS: TokenId = 1;
/// Id of the separator fed between latent reasoning and answer decoding.
pub const ANSWER_SEP: TokenId = 2;
/// Id of the latent-reasoning termination token, rendered `</think>`.
pub const THINK_END: TokenId = 3;

const SPECIAL_SURFACES: [&str; 4] = ["<pad>", "<bos>", "<ans>", "</think>"];

/// Bijective token ↔ id map with four reserved specials at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn push(&mut self, token: &str) {
        if !self.token_to_id.contains_key(token) {
            let id = self.id_to_token.len() as TokenId;
            self.id_to_token.push(token.to_string());
            self.token_to_id.insert(token.to_string(), id);
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = VocabFile {
            tokens: self.id_to_token.clone(),
            specials: SpecialIds::default(),
        };
        let mut bytes = serde_json::to_vec(&file).expect("vocab serializes");
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_slice(&bytes).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        if file.specials != SpecialIds::default() {
            return Err(Error::Checkpoint(format!(
                "unexpected special-token ids in {}",
                path.display()
            )));
        }
        if file.tokens.len() < SPECIAL_SURFACES.len() {
            return Err(Error::Checkpoint("vocabulary too small".into()));
        }
        for (i, s) in SPECIAL_SURFACES.iter().enumerate() {
            if file.tokens[i] != *s {
                return Err(Error::Checkpoint(format!(
                    "special token {i} is {:?}, expected {s:?}",
                    file.tokens[i]
                )));
            }
        }
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for t in &file.tokens {
            v.push(t);
        }
        if v.id_to_token.len() != file.tokens.len() {
            return Err(Error::Checkpoint("duplicate token in vocabulary file".into()));
        }
        Ok(v)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: SpecialIds,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct SpecialIds {
    pad: TokenId,
    bos: TokenId,
    answer_sep: TokenId,
    think_end: TokenId,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SpecialIds {
            pad: PAD,
            bos: BOS,
            answer_sep: ANSWER_SEP,
            think_end: THINK_END,
        }
    }
}

/// Builds a vocabulary from every whitespace-delimited surface token of
/// questions, chain steps (delimiters stripped), and answers, in first
/// appearance order after the specials.
pub fn build_vocab(d: &Dataset) -> Result<Vocabulary> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut v = Vocabulary {
        id_to_token: Vec::new(),
        token_to_id: HashMap::new(),
    };
    for s in SPECIAL_SURFACES {
        v.push(s);
    }
    let add_text = |v: &mut Vocabulary, text: &str| -> Result<()> {
        for tok in text.split_whitespace() {
            if SPECIAL_SURFACES.contains(&tok) {
                return Err(Error::ReservedToken(tok.to_string()));
            }
            v.push(tok);
        }
        Ok(())
    };
    for inst in &d.instances {
        add_text(&mut v, &inst.question)?;
        for step in segment_chain(&inst.chain)? {
            add_text(&mut v, &step)?;
        }
        add_text(&mut v, &inst.answer)?;
    }
    Ok(v)
}

/// Whitespace tokenization against a fixed vocabulary. Empty text maps
/// to an empty sequence; unknown tokens are an error naming the token.
pub fn tokenize(text: &str, v: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|tok| v.id(tok).ok_or_else(|| Error::OutOfVocab(tok.to_string())))
        .collect()
}

/// Inverse of [`tokenize`] for single-spaced text.
pub fn detokenize(ids: &[TokenId], v: &Vocabulary) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        parts.push(
            v.token(id)
                .ok_or_else(|| Error::OutOfVocab(format!("id {id}")))?,
        );
    }
    Ok(parts.join(" "))
}

/// Splits a chain into the interiors of its `<<...>>` segments, in order.
/// Text outside the delimiters is ignored. Errors on unbalanced or nested
/// delimiters and on chains with no segments.
pub fn segment_chain(chain: &str) -> Result<Vec<String>> {
    let mut segments = Vec::new();
    let mut rest = chain;
    loop {
        match (rest.find("<<"), rest.find(">>")) {
            (Some(open), Some(close)) if close < open => {
                return Err(Error::UnbalancedDelimiters(
                    "`>>` before matching `<<`".into(),
                ));
            }
            (None, Some(_)) => {
                return Err(Error::UnbalancedDelimiters("`>>` without `<<`".into()));
            }
            (Some(_), None) => {
                return Err(Error::UnbalancedDelimiters("`<<` without `>>`".into()));
            }
            (None, None) => break,
            (Some(open), Some(close)) => {
                let interior = &rest[open + 2..close];
                if interior.contains("<<") {
                    return Err(Error::NestedDelimiters);
                }
                segments.push(interior.to_string());
                rest = &rest[close + 2..];
            }
        }
    }
    if segments.is_empty() {
        return Err(Error::NoSteps);
    }
    Ok(segments)
}

/// One parsed reasoning step: the operational token set (left of `=`)
/// and the result token sequence (right of `=`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningStep {
    pub raw: String,
    pub operational_ids: BTreeSet<TokenId>,
    pub result_ids: Vec<TokenId>,
    /// 1-based step position within its chain.
    pub index: usize,
}

/// Extracts operational and result tokens from one step interior. The
/// step must contain exactly one `=` token with nonempty sides; `=` is
/// structural and belongs to neither side.
pub fn extract_step_tokens(
    step_text: &str,
    v: &Vocabulary,
    index: usize,
) -> Result<ReasoningStep> {
    let tokens: Vec<&str> = step_text.split_whitespace().collect();
    let eq_positions: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == "=")
        .map(|(i, _)| i)
        .collect();
    if eq_positions.len() != 1 {
        return Err(Error::BadStep {
            step: step_text.to_string(),
            msg: format!("expected exactly one `=`, found {}", eq_positions.len()),
        });
    }
    let eq = eq_positions[0];
    if eq == 0 {
        return Err(Error::BadStep {
            step: step_text.to_string(),
            msg: "no tokens left of `=`".into(),
        });
    }
    if eq + 1 == tokens.len() {
        return Err(Error::BadStep {
            step: step_text.to_string(),
            msg: "no tokens right of `=`".into(),
        });
    }
    let mut operational_ids = BTreeSet::new();
    for tok in &tokens[..eq] {
        operational_ids.insert(v.id(tok).ok_or_else(|| Error::OutOfVocab(tok.to_string()))?);
    }
    let mut result_ids = Vec::new();
    for tok in &tokens[eq + 1..] {
        result_ids.push(v.id(tok).ok_or_else(|| Error::OutOfVocab(tok.to_string()))?);
    }
    Ok(ReasoningStep {
        raw: step_text.to_string(),
        operational_ids,
        result_ids,
        index,
    })
}

/// An instance with tokenized views, ready for prior construction,
/// training, and inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    /// Position of the instance in its source dataset.
    pub index: usize,
    pub question_ids: Vec<TokenId>,
    pub answer_ids: Vec<TokenId>,
    pub steps: Vec<ReasoningStep>,
}

impl EncodedInstance {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

/// Tokenizes one instance and parses its chain into steps.
pub fn encode_instance(inst: &Instance, index: usize, v: &Vocabulary) -> Result<EncodedInstance> {
    let question_ids = tokenize(&inst.question, v)?;
    let answer_ids = tokenize(&inst.answer, v)?;
    if answer_ids.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "instance {index}: answer tokenizes to nothing"
        )));
    }
    let mut steps = Vec::new();
    for (i, text) in segment_chain(&inst.chain)?.iter().enumerate() {
        steps.push(extract_step_tokens(text, v, i + 1).map_err(|e| e.at_step(i + 1))?);
    }
    Ok(EncodedInstance {
        index,
        question_ids,
        answer_ids,
        steps,
    })
}

/// Encodes a whole dataset, keeping dataset order and indices.
pub fn encode_dataset(d: &Dataset, v: &Vocabulary) -> Result<Vec<EncodedInstance>> {
    d.instances
        .iter()
        .enumerate()
        .map(|(i, inst)| encode_instance(inst, i, v))
        .collect()
}
