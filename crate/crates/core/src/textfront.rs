//! Closed-vocabulary word tokenizer and prompt construction with trailing
//! latent-action placeholder tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CareError, Result};
use crate::params::ParamId;
use crate::real::Real;
use crate::tape::{Tape, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const LATENT: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<latent>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, token_to_id }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

impl Vocab {
    /// Specials first, then every corpus word in sorted order.
    pub fn build<S: AsRef<str>>(instructions: &[S]) -> Result<Self> {
        if instructions.is_empty() {
            return Err(CareError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let corpus: BTreeSet<String> = instructions.iter().flat_map(|s| words(s.as_ref())).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(corpus)
            .collect::<Vec<_>>();
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub n_latent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    pub placeholder_positions: Vec<usize>,
}

/// `[BOS] + word ids + n_latent × [LATENT]`.
pub fn tokenize(prompt: &Prompt, vocab: &Vocab) -> Result<TokenizedPrompt> {
    if prompt.n_latent == 0 {
        return Err(CareError::Config("a prompt needs at least one latent placeholder".into()));
    }
    let mut ids = vec![BOS];
    for w in words(&prompt.text) {
        let id = vocab
            .id(&w)
            .ok_or_else(|| CareError::Input(format!("word `{w}` is not in the vocabulary")))?;
        ids.push(id);
    }
    let start = ids.len();
    ids.extend(std::iter::repeat_n(LATENT, prompt.n_latent));
    Ok(TokenizedPrompt {
        placeholder_positions: (start..ids.len()).collect(),
        ids,
    })
}

/// Inverse of [`tokenize`] with specials dropped.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i > LATENT)
        .filter_map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token table plus learned positional table.
#[derive(Debug, Clone, Copy)]
pub struct TextEmbedding {
    pub table: ParamId,
    pub positions: ParamId,
}

pub struct TextFeatures {
    pub embeddings: Var,
    pub placeholder_positions: Vec<usize>,
}

impl TextEmbedding {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, tokens: &TokenizedPrompt) -> Result<TextFeatures> {
        let n_vocab = tape.store().get(self.table).nrows();
        let max_len = tape.store().get(self.positions).nrows();
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= n_vocab) {
            return Err(CareError::Input(format!("token id {bad} outside vocabulary of {n_vocab}")));
        }
        if tokens.ids.len() > max_len {
            return Err(shape_err!("prompt of {} tokens exceeds {max_len}", tokens.ids.len()));
        }
        let idx: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.table);
        let rows = tape.gather_rows(table, &idx)?;
        let pos = tape.param(self.positions);
        let pos = tape.slice_rows(pos, 0, idx.len())?;
        let embeddings = tape.add(rows, pos)?;
        Ok(TextFeatures {
            embeddings,
            placeholder_positions: tokens.placeholder_positions.clone(),
        })
    }
}
