//! Closed word-level vocabulary and whitespace tokenizer.

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Words used by caption templates.
const TEMPLATE_WORDS: [&str; 12] = [
    "a", "photo", "of", "the", "picture", "an", "image", "this", "is", "small", "large", "blurry",
];

/// Class names, assigned to synthetic classes in order.
pub const CLASS_NAMES: [&str; 52] = [
    "dog", "cat", "bird", "fish", "horse", "sheep", "cow", "deer", "frog", "snake", "lizard",
    "turtle", "rabbit", "mouse", "bear", "wolf", "fox", "lion", "tiger", "zebra", "camel", "goat",
    "pig", "duck", "owl", "eagle", "crab", "shark", "whale", "seal", "otter", "beaver", "tree",
    "flower", "leaf", "rock", "cloud", "river", "mountain", "lake", "road", "bridge", "house",
    "tower", "boat", "car", "truck", "train", "plane", "bicycle", "clock", "lamp",
];

/// The hand-crafted zero-shot prompt.
pub const CLASS_TEMPLATE: &str = "a photo of a {}";

/// Caption templates seen during contrastive pretraining.
pub const PRETRAIN_TEMPLATES: [&str; 7] = [
    "a photo of a {}",
    "a picture of the {}",
    "an image of a {}",
    "this is a {}",
    "a small {}",
    "a large {}",
    "a blurry photo of the {}",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words = TEMPLATE_WORDS
            .iter()
            .chain(CLASS_NAMES.iter())
            .map(|w| w.to_string())
            .collect();
        Self { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::input(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Tokens of `template` with `{}` replaced by `class_name`.
    pub fn fill_template(&self, template: &str, class_name: &str) -> Result<Vec<TokenId>> {
        self.id(class_name)?;
        self.tokenize(&template.replace("{}", class_name))
    }

    /// Tokens of "a photo of a [CLS]".
    pub fn embed_template(&self, class_name: &str) -> Result<Vec<TokenId>> {
        self.fill_template(CLASS_TEMPLATE, class_name)
    }

    /// Template tokens that precede the class name.
    pub fn template_prefix(&self) -> Result<Vec<TokenId>> {
        let prefix = CLASS_TEMPLATE.split("{}").next().unwrap_or_default();
        self.tokenize(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_closed_and_sized() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 64);
        let mut words: Vec<_> = (0..v.len()).map(|i| v.word(i).unwrap()).collect();
        words.sort_unstable();
        words.dedup();
        assert_eq!(words.len(), 64, "duplicate vocabulary words");
    }

    #[test]
    fn template_for_dog() {
        let v = Vocabulary::default();
        let ids = v.embed_template("dog").unwrap();
        let words: Vec<_> = ids.iter().map(|&i| v.word(i).unwrap()).collect();
        assert_eq!(words, ["a", "photo", "of", "a", "dog"]);
    }

    #[test]
    fn templates_differ_only_at_class_position() {
        let v = Vocabulary::default();
        let a = v.embed_template("cat").unwrap();
        let b = v.embed_template("whale").unwrap();
        assert_eq!(a.len(), b.len());
        let diffs: Vec<_> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diffs, vec![a.len() - 1]);
        assert_eq!(v.template_prefix().unwrap(), a[..4].to_vec());
    }

    #[test]
    fn unknown_class_is_an_input_error() {
        let v = Vocabulary::default();
        assert!(matches!(v.embed_template("unicorn"), Err(Error::Input(_))));
        for t in PRETRAIN_TEMPLATES {
            v.fill_template(t, "dog").unwrap();
        }
    }
}
