use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::qtype::normalize_question;

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token to row mapping; row 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorted vocabulary of every normalized token in `questions`.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = questions
            .into_iter()
            .flat_map(normalize_question)
            .filter(|w| w != UNKNOWN_TOKEN)
            .collect();
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(words);
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(mut tokens: Vec<String>) -> Self {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            tokens.retain(|t| t != UNKNOWN_TOKEN);
            tokens.insert(0, UNKNOWN_TOKEN.to_string());
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
