//! Word-level tokenizer and pseudo-word registration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::PairSpec;
use crate::error::{Error, Result};

/// Token prepended to every prompt; keeps attention well-defined for empty prompts.
pub const START_TOKEN: &str = "<|start|>";

/// Vocabulary operations needed to register pseudo-words.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn token_id(&self, word: &str) -> Option<usize>;
    /// Appends a new token and returns its id (always the previous vocabulary size).
    fn add_token(&mut self, word: &str) -> usize;
    /// Tokenizes `text`, prefixed with the start token.
    fn tokenize(&self, text: &str) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

const TOY_WORDS: &str = "\
a an the of on in at with and near from to by top front far close view made \
photo picture image painting style art book background night autumn winter \
summer spring snow beach jungle forest city street desert mountain mount sea \
water river lake sky clouds flowers grass garden room table field park \
watercolor ukiyo-e pixel von gogh comic 3d rendering clay plastic wood metal \
glass stone gold paper eiffel tower fuji \
person man woman child boy girl baby face head hair eye eyes ear ears nose \
mouth lips beard mustache teeth hand hands arm arms leg legs foot feet \
character cartoon anime robot doll toy plush teddy bear statue figure \
dog cat bird horse cow sheep fox rabbit owl lion tiger wolf dragon fish \
tail wing wings horn horns fur feathers scales paw paws beak mane \
house building roof door window castle bridge church temple wall chimney \
car wheel wheels truck bike bicycle boat sail train plane \
chair cup mug handle bag strap shoe shoes sneaker sole hat cap helmet crown \
mask glasses shirt collar sleeve dress skirt jacket coat scarf \
bottle lid lamp shade clock watch vase pot bowl cake topping fruit apple \
stem leaf leaves tree flower petal guitar neck pattern stripes logo";

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        vocab.add_token(START_TOKEN);
        for w in words {
            let w = w.into();
            if vocab.token_id(&w).is_none() {
                vocab.add_token(&w);
            }
        }
        vocab
    }

    /// Built-in vocabulary of the toy backbone; covers the evaluation prompt suite.
    pub fn toy() -> Self {
        Vocabulary::new(TOY_WORDS.split_whitespace())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

fn is_pseudo(word: &str) -> bool {
    word.len() > 2 && word.starts_with('<') && word.ends_with('>')
}

/// Splits text into word-level pieces; pseudo-words keep their case and brackets.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let w = raw.trim_matches(|c: char| matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"'));
            if w.is_empty() {
                None
            } else if is_pseudo(w) {
                Some(w.to_string())
            } else {
                Some(w.to_lowercase())
            }
        })
        .collect()
}

impl Tokenizer for Vocabulary {
    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn token_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    fn add_token(&mut self, word: &str) -> usize {
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![0];
        for w in split_words(text) {
            let id = self
                .token_id(&w)
                .ok_or_else(|| Error::Tokenizer(format!("unresolvable token `{w}` in prompt `{text}`")))?;
            ids.push(id);
        }
        Ok(ids)
    }
}

/// One pseudo-word bound to a fresh token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBinding {
    pub sample_index: usize,
    pub pseudo_word: String,
    pub token_id: usize,
    /// First token of the category label; its embedding seeds the new one.
    pub init_token_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBindings(pub Vec<TokenBinding>);

impl TokenBindings {
    pub fn iter(&self) -> impl Iterator<Item = &TokenBinding> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn for_sample(&self, sample_index: usize) -> Option<&TokenBinding> {
        self.0.iter().find(|b| b.sample_index == sample_index)
    }

    /// Row in the pseudo-embedding table for `token_id`.
    pub fn row_of(&self, token_id: usize) -> Option<usize> {
        self.0.iter().position(|b| b.token_id == token_id)
    }
}

/// Adds one token per sample's pseudo-word, in sample order.
pub fn register_pseudo_words<T: Tokenizer + ?Sized>(
    pair: &PairSpec,
    tokenizer: &mut T,
) -> Result<TokenBindings> {
    let mut seen = std::collections::HashSet::new();
    for s in &pair.samples {
        if !seen.insert(s.pseudo_word.as_str()) {
            return Err(Error::Tokenizer(format!("duplicate pseudo-word `{}`", s.pseudo_word)));
        }
        if tokenizer.token_id(&s.pseudo_word).is_some() {
            return Err(Error::Tokenizer(format!(
                "pseudo-word `{}` collides with an existing vocabulary token",
                s.pseudo_word
            )));
        }
    }
    let mut bindings = Vec::with_capacity(pair.samples.len());
    for s in &pair.samples {
        let label_tokens = tokenizer.tokenize(&s.category_label)?;
        let init_token_id = *label_tokens.get(1).ok_or_else(|| {
            Error::Tokenizer(format!("category label `{}` has no tokens", s.category_label))
        })?;
        let token_id = tokenizer.add_token(&s.pseudo_word);
        bindings.push(TokenBinding {
            sample_index: s.index,
            pseudo_word: s.pseudo_word.clone(),
            token_id,
            init_token_id,
        });
    }
    Ok(TokenBindings(bindings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_pair;

    #[test]
    fn new_token_is_appended() {
        let mut vocab = Vocabulary::new(["roof", "tower"]);
        let before = vocab.vocab_size();
        let mut pair = synthetic_pair(8, 1, 0);
        pair.samples[0].category_label = "tower".into();
        pair.samples[0].pseudo_word = "<tower>".into();
        pair.samples[1].category_label = "roof".into();
        pair.samples[1].pseudo_word = "<roof>".into();
        let b = register_pseudo_words(&pair, &mut vocab).unwrap();
        assert_eq!(b.0[0].token_id, before);
        assert_eq!(b.0[1].token_id, before + 1);
        assert_eq!(b.0[1].init_token_id, vocab.token_id("roof").unwrap());
    }

    #[test]
    fn duplicate_pseudo_word_is_rejected() {
        let mut vocab = Vocabulary::toy();
        let mut pair = synthetic_pair(8, 1, 0);
        pair.samples[1].pseudo_word = pair.samples[0].pseudo_word.clone();
        assert!(register_pseudo_words(&pair, &mut vocab).is_err());
    }

    #[test]
    fn collision_with_vocabulary_is_rejected() {
        let mut vocab = Vocabulary::toy();
        vocab.add_token("<toy>");
        let pair = synthetic_pair(8, 1, 0);
        let err = register_pseudo_words(&pair, &mut vocab).unwrap_err();
        assert!(err.to_string().contains("collides"));
    }

    #[test]
    fn tokenize_keeps_pseudo_words_and_strips_punctuation() {
        let mut vocab = Vocabulary::toy();
        let id = vocab.add_token("<Tower>");
        let ids = vocab.tokenize("A photo of <Tower>, at night").unwrap();
        assert_eq!(ids[0], 0);
        assert_eq!(ids[4], id);
        assert_eq!(ids.len(), 7);
        assert!(vocab.tokenize("a photo of zebracorn").is_err());
    }

    #[test]
    fn prompt_suite_words_resolve() {
        let vocab = Vocabulary::toy();
        for line in include_str!("../data/prompts.txt").lines() {
            let text = line.replace("<placeholder>", "tower with roof");
            vocab.tokenize(&text).unwrap();
        }
    }
}
