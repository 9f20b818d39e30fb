//! Keyword-based question typing.
//!
//! Questions are tokenized (lowercase, punctuation removed, whitespace split)
//! and matched token-exactly against an ordered keyword table. The first
//! rule with a matching token wins; questions of the form "is it a/an X"
//! that match nothing earlier are `Object`; everything else is `Others`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Spatial,
    Object,
    Color,
    Action,
    Size,
    SuperCategory,
    Texture,
    Shape,
    Others,
}

impl QuestionType {
    pub const ALL: [QuestionType; 9] = [
        QuestionType::Spatial,
        QuestionType::Object,
        QuestionType::Color,
        QuestionType::Action,
        QuestionType::Size,
        QuestionType::SuperCategory,
        QuestionType::Texture,
        QuestionType::Shape,
        QuestionType::Others,
    ];

    /// Row of the question-type embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Lowercase name used in configuration files and prompts.
    pub fn key(self) -> &'static str {
        match self {
            QuestionType::Spatial => "spatial",
            QuestionType::Object => "object",
            QuestionType::Color => "color",
            QuestionType::Action => "action",
            QuestionType::Size => "size",
            QuestionType::SuperCategory => "super-category",
            QuestionType::Texture => "texture",
            QuestionType::Shape => "shape",
            QuestionType::Others => "others",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            QuestionType::SuperCategory => "Super-category",
            QuestionType::Spatial => "Spatial",
            QuestionType::Object => "Object",
            QuestionType::Color => "Color",
            QuestionType::Action => "Action",
            QuestionType::Size => "Size",
            QuestionType::Texture => "Texture",
            QuestionType::Shape => "Shape",
            QuestionType::Others => "Others",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown question type {0:?}")]
pub struct UnknownQuestionType(pub String);

impl FromStr for QuestionType {
    type Err = UnknownQuestionType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect();
        QuestionType::ALL
            .into_iter()
            .find(|t| t.key().replace('-', "") == norm)
            .ok_or_else(|| UnknownQuestionType(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum KeywordTableError {
    #[error("line {line}: expected `type: keyword, keyword, ...`")]
    Syntax { line: usize },
    #[error("line {line}: {source}")]
    UnknownType { line: usize, source: UnknownQuestionType },
    #[error("line {line}: the Others fallback cannot own keywords")]
    OthersWithKeywords { line: usize },
    #[error("line {line}: type {qtype} listed twice")]
    Duplicate { line: usize, qtype: QuestionType },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordRule {
    pub qtype: QuestionType,
    pub keywords: BTreeSet<String>,
}

/// Ordered keyword rules. `Others` never appears as a rule; it is the fallback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordTable {
    rules: Vec<KeywordRule>,
}

fn set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for KeywordTable {
    fn default() -> Self {
        use QuestionType::*;
        KeywordTable {
            rules: vec![
                KeywordRule {
                    qtype: Spatial,
                    keywords: set(&[
                        "left", "right", "top", "bottom", "front", "back", "behind", "near", "next", "side", "middle",
                        "corner", "half", "closest", "between",
                    ]),
                },
                KeywordRule {
                    qtype: Color,
                    keywords: set(&[
                        "white", "black", "red", "blue", "green", "yellow", "brown", "pink", "orange", "purple",
                        "gray", "grey", "color", "colour",
                    ]),
                },
                KeywordRule {
                    qtype: Size,
                    keywords: set(&[
                        "small", "big", "large", "tiny", "tall", "short", "huge", "smaller", "bigger", "largest",
                        "smallest",
                    ]),
                },
                KeywordRule {
                    qtype: Shape,
                    keywords: set(&["round", "square", "rectangular", "circular", "shape"]),
                },
                KeywordRule {
                    qtype: Texture,
                    keywords: set(&["wooden", "metal", "plastic", "glass", "made"]),
                },
                KeywordRule {
                    qtype: Action,
                    keywords: set(&[
                        "wearing", "holding", "sitting", "standing", "walking", "eating", "playing", "riding",
                        "carrying", "looking",
                    ]),
                },
                KeywordRule {
                    qtype: SuperCategory,
                    keywords: set(&[
                        "object",
                        "animal",
                        "vehicle",
                        "food",
                        "furniture",
                        "electronic",
                        "person",
                        "human",
                        "appliance",
                        "clothing",
                    ]),
                },
                KeywordRule {
                    qtype: Object,
                    keywords: BTreeSet::new(),
                },
            ],
        }
    }
}

impl KeywordTable {
    pub fn new(rules: Vec<KeywordRule>) -> Self {
        let mut rules: Vec<_> = rules.into_iter().filter(|r| r.qtype != QuestionType::Others).collect();
        if !rules.iter().any(|r| r.qtype == QuestionType::Object) {
            rules.push(KeywordRule {
                qtype: QuestionType::Object,
                keywords: BTreeSet::new(),
            });
        }
        KeywordTable { rules }
    }

    pub fn rules(&self) -> &[KeywordRule] {
        &self.rules
    }

    /// Parses `type: kw, kw, ...` lines. `#` starts a comment; blank lines are
    /// ignored. The Object rule always carries the "is it a/an X" pattern and
    /// is appended at the end when the file does not list it.
    pub fn parse(text: &str) -> Result<Self, KeywordTableError> {
        let mut rules: Vec<KeywordRule> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (name, words) = content.split_once(':').ok_or(KeywordTableError::Syntax { line })?;
            let qtype: QuestionType = name
                .parse()
                .map_err(|source| KeywordTableError::UnknownType { line, source })?;
            let keywords: BTreeSet<String> = words
                .split(',')
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect();
            if qtype == QuestionType::Others {
                if keywords.is_empty() {
                    continue;
                }
                return Err(KeywordTableError::OthersWithKeywords { line });
            }
            if rules.iter().any(|r| r.qtype == qtype) {
                return Err(KeywordTableError::Duplicate { line, qtype });
            }
            rules.push(KeywordRule { qtype, keywords });
        }
        Ok(KeywordTable::new(rules))
    }

    /// Loads the table from `path`, or the built-in default when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, KeywordTableError> {
        match path {
            Some(p) => KeywordTable::parse(&std::fs::read_to_string(p)?),
            None => Ok(KeywordTable::default()),
        }
    }

    /// Renders the table in the format accepted by [`KeywordTable::parse`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for rule in &self.rules {
            let words: Vec<&str> = rule.keywords.iter().map(String::as_str).collect();
            out.push_str(&format!("{}: {}\n", rule.qtype.key(), words.join(", ")));
        }
        out
    }

    pub fn classify(&self, text: &str) -> QuestionType {
        classify_tokens(&normalize_question(text), self)
    }
}

/// Lowercases, removes punctuation and splits on whitespace.
pub fn normalize_question(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn is_it_a_noun(tokens: &[String]) -> bool {
    tokens
        .windows(4)
        .any(|w| w[0] == "is" && w[1] == "it" && (w[2] == "a" || w[2] == "an") && !w[3].is_empty())
}

pub fn classify_tokens(tokens: &[String], table: &KeywordTable) -> QuestionType {
    for rule in &table.rules {
        if tokens.iter().any(|t| rule.keywords.contains(t)) {
            return rule.qtype;
        }
        if rule.qtype == QuestionType::Object && is_it_a_noun(tokens) {
            return QuestionType::Object;
        }
    }
    QuestionType::Others
}

pub fn classify_question(text: &str, table: &KeywordTable) -> QuestionType {
    table.classify(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_question("Is it white?"), ["is", "it", "white"]);
        assert_eq!(
            normalize_question("On the RIGHT side half?"),
            ["on", "the", "right", "side", "half"]
        );
        assert_eq!(normalize_question("  Is it a car? "), ["is", "it", "a", "car"]);
    }

    #[test]
    fn example_sentences() {
        let table = KeywordTable::default();
        let cases = [
            ("On the right side half?", QuestionType::Spatial),
            ("Is it a car?", QuestionType::Object),
            ("Is it white?", QuestionType::Color),
            ("Are they wearing jeans?", QuestionType::Action),
            ("A small one?", QuestionType::Size),
            ("Is the object electronic?", QuestionType::SuperCategory),
            ("Is it made of metal?", QuestionType::Texture),
            ("Is it a round container?", QuestionType::Shape),
            ("Is it edible?", QuestionType::Others),
        ];
        for (q, want) in cases {
            assert_eq!(table.classify(q), want, "{q}");
        }
    }

    #[test]
    fn token_match_is_exact() {
        let table = KeywordTable::default();
        assert_eq!(table.classify("Is it a table?"), QuestionType::Object);
        assert_eq!(table.classify("Is it leftover food?"), QuestionType::SuperCategory);
        assert_eq!(table.classify("Left-able?"), QuestionType::Others);
    }

    #[test]
    fn order_decides_multi_keyword_questions() {
        let q = "Is it the red one on the left?";
        assert_eq!(KeywordTable::default().classify(q), QuestionType::Spatial);
        let swapped = KeywordTable::parse("color: red\nspatial: left\n").unwrap();
        assert_eq!(swapped.classify(q), QuestionType::Color);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let table = KeywordTable::default();
        let reparsed = KeywordTable::parse(&table.to_config_string()).unwrap();
        assert_eq!(reparsed, table);

        let custom = KeywordTable::parse("# comment\nSuper-category: fruit\n\nothers:\n").unwrap();
        assert_eq!(custom.rules().len(), 2);
        assert_eq!(custom.classify("Is it a fruit?"), QuestionType::SuperCategory);
        assert_eq!(custom.classify("Is it a dog?"), QuestionType::Object);

        assert!(matches!(
            KeywordTable::parse("others: thing"),
            Err(KeywordTableError::OthersWithKeywords { line: 1 })
        ));
        assert!(matches!(
            KeywordTable::parse("colour red"),
            Err(KeywordTableError::Syntax { line: 1 })
        ));
        assert!(matches!(
            KeywordTable::parse("flavor: sweet"),
            Err(KeywordTableError::UnknownType { .. })
        ));
        assert!(matches!(
            KeywordTable::parse("color: red\ncolor: blue"),
            Err(KeywordTableError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn type_names_parse_back() {
        for t in QuestionType::ALL {
            assert_eq!(t.key().parse::<QuestionType>().unwrap(), t);
            assert_eq!(t.to_string().parse::<QuestionType>().unwrap(), t);
        }
    }

    proptest! {
        #[test]
        fn classification_is_total_and_deterministic(s in "\\PC{1,60}") {
            let table = KeywordTable::default();
            let a = table.classify(&s);
            prop_assert_eq!(a, table.classify(&s));
            prop_assert!(QuestionType::ALL.contains(&a));
        }
    }
}
