use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Token ↔ id mapping. Ids 0..4 are always `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;

    /// Specials followed by `words` in first-seen order, without duplicates.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::from(Vec::new());
        for w in words {
            if !vocab.index.contains_key(w) {
                vocab.index.insert(w.to_string(), vocab.tokens.len());
                vocab.tokens.push(w.to_string());
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unknown words map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().filter(|t| ![PAD, UNK, CLS, SEP].contains(&t.as_str())));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocab::build(["good", "bad", "good"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id(PAD), Vocab::PAD_ID);
        assert_eq!(v.id(SEP), Vocab::SEP_ID);
        assert_eq!(v.id("good"), 4);
        assert_eq!(v.id("never-seen"), Vocab::UNK_ID);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["a", "b"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["[PAD]","[UNK]","[CLS]","[SEP]","a","b"]"#);
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
