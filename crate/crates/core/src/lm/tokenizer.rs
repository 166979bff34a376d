use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary. Punctuation marks `, : .` at word edges are split
/// off as their own tokens; case is kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

/// Teacher-forcing view of one prompt/response pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// True on response positions and the closing EOS.
    pub mask: Vec<bool>,
}

impl TokenizedSample {
    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

fn is_mark(c: char) -> bool {
    matches!(c, ',' | ':' | '.')
}

/// Splits on whitespace, detaching leading and trailing punctuation marks.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lead: Vec<char> = chunk.chars().take_while(|c| is_mark(*c)).collect();
        let rest = &chunk[lead.len()..];
        let core = rest.trim_end_matches(is_mark);
        let trail = &rest[core.len()..];
        out.extend(lead.iter().map(|c| c.to_string()));
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(trail.chars().map(|c| c.to_string()));
    }
    out
}

impl Tokenizer {
    /// Vocabulary of every token in `texts`, specials first, then sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_tokens).collect();
        Self::from_vocab(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
            .expect("specials are prepended")
    }

    fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Precondition("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Precondition(format!("invalid vocabulary entry {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Precondition(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Words joined by single spaces; special tokens are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.vocab.get(i).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `BOS prompt`, the context for generation.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokenize(prompt)).collect()
    }

    /// `BOS prompt response EOS` shifted by one, with the loss restricted
    /// to the response and EOS.
    pub fn encode_sample(&self, prompt: &str, response: &str) -> TokenizedSample {
        let p = self.encode_prompt(prompt);
        let r = self.tokenize(response);
        let seq: Vec<usize> = p.iter().chain(&r).copied().chain([EOS]).collect();
        let n = seq.len() - 1;
        TokenizedSample {
            inputs: seq[..n].to_vec(),
            targets: seq[1..].to_vec(),
            mask: (0..n).map(|i| i + 1 >= p.len()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.vocab.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab(s.lines().map(str::to_string).collect())
    }
}
