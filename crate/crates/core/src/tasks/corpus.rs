use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numeric::Rng;

const OPEN: [char; 3] = ['(', '[', '{'];
const CLOSE: [char; 3] = [')', ']', '}'];
const ATOMS: [char; 4] = ['a', 'b', 'c', 'd'];

/// Lines of well-nested brackets over three bracket types with letters as
/// leaves, e.g. `(a[bc]){d}`. Deterministic in `seed`.
pub fn nested_paren_corpus(seed: u64, chars: usize) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(chars + 64);
    while out.len() < chars {
        let items = 1 + rng.below(3);
        for _ in 0..items {
            gen_expr(&mut rng, 0, &mut out);
        }
        out.push('\n');
    }
    out.truncate(chars);
    out
}

fn gen_expr(rng: &mut Rng, depth: usize, out: &mut String) {
    if depth >= 4 || rng.uniform() < 0.3 {
        out.push(ATOMS[rng.below(ATOMS.len())]);
        return;
    }
    let kind = rng.below(OPEN.len());
    out.push(OPEN[kind]);
    let children = rng.below(3);
    for _ in 0..children {
        gen_expr(rng, depth + 1, out);
    }
    out.push(CLOSE[kind]);
}

/// Sorted set of characters, one id per char.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Result<Self> {
        let set: BTreeSet<char> = text.chars().collect();
        if set.is_empty() {
            return Err(Error::Empty("corpus has no characters".into()));
        }
        Ok(Self {
            chars: set.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map_err(|_| Error::InvalidArgument(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.chars[i]).collect()
    }
}

/// Tokenized text split into a training prefix and a validation suffix.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: CharVocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl Corpus {
    /// `valid_fraction` of the tokens (at the end) are held out.
    pub fn from_text(text: &str, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::InvalidArgument(format!(
                "valid_fraction {valid_fraction} outside [0, 1)"
            )));
        }
        let vocab = CharVocab::from_text(text)?;
        let ids = vocab.encode(text)?;
        let cut = ids.len() - (ids.len() as f64 * valid_fraction) as usize;
        Ok(Self {
            vocab,
            train: ids[..cut].to_vec(),
            valid: ids[cut..].to_vec(),
        })
    }

    /// `batch` random windows of `len + 1` tokens from the training split.
    pub fn sample_windows(&self, rng: &mut Rng, batch: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        windows_check(&self.train, len)?;
        Ok((0..batch)
            .map(|_| {
                let start = rng.below(self.train.len() - len);
                self.train[start..start + len + 1].to_vec()
            })
            .collect())
    }

    /// Non-overlapping windows covering the validation split, at most `max`.
    pub fn valid_windows(&self, len: usize, max: usize) -> Result<Vec<Vec<usize>>> {
        windows_check(&self.valid, len)?;
        Ok(self
            .valid
            .windows(len + 1)
            .step_by(len)
            .take(max)
            .map(|w| w.to_vec())
            .collect())
    }
}

fn windows_check(tokens: &[usize], len: usize) -> Result<()> {
    if len == 0 || tokens.len() <= len {
        return Err(Error::Empty(format!(
            "need more than {len} tokens for windows, have {}",
            tokens.len()
        )));
    }
    Ok(())
}
