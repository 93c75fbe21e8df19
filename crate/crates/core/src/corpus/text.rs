use std::collections::{BTreeMap, HashMap, HashSet};

use crate::{Error, Result};

/// Bundled English stopword list, identified as `english-v1` in metadata.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "also",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "et",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "however",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "may",
    "me",
    "more",
    "most",
    "must",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "paper",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "thus",
    "to",
    "too",
    "under",
    "until",
    "up",
    "us",
    "using",
    "very",
    "via",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "within",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

pub const STOPWORD_LIST_ID: &str = "english-v1";

pub(crate) fn stopword_set() -> HashSet<&'static str> {
    ENGLISH_STOPWORDS.iter().copied().collect()
}

/// Lowercases, splits on non-alphanumerics, drops tokens shorter than two
/// characters and stopwords. Duplicates are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let stop = stopword_set();
    tokenize_with(text, &stop)
}

pub(crate) fn tokenize_with(text: &str, stop: &HashSet<&'static str>) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2 && !stop.contains(t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    /// Minimum document frequency for a word to enter the vocabulary.
    pub min_count: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_count: 3 }
    }
}

/// How [`load_graph`](super::load_graph) obtains its vocabulary.
#[derive(Debug, Clone)]
pub enum VocabSource {
    Build(VocabConfig),
    Fixed(Vocabulary),
}

impl Default for VocabSource {
    fn default() -> Self {
        VocabSource::Build(VocabConfig::default())
    }
}

/// Dense word index with per-word document frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    doc_freq: Vec<u32>,
    index: HashMap<String, u32>,
    min_count: u32,
    stopword_list: String,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized documents. Words are sorted so the
    /// index is independent of document order.
    pub fn build<'a, I>(docs: I, config: VocabConfig) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut df: BTreeMap<&str, u32> = BTreeMap::new();
        for doc in docs {
            let unique: HashSet<&str> = doc.iter().map(String::as_str).collect();
            for w in unique {
                *df.entry(w).or_insert(0) += 1;
            }
        }
        let (words, doc_freq): (Vec<String>, Vec<u32>) = df
            .into_iter()
            .filter(|&(_, c)| c >= config.min_count)
            .map(|(w, c)| (w.to_owned(), c))
            .unzip();
        Self::from_entries(words, doc_freq, config.min_count).expect("BTreeMap keys are unique")
    }

    pub fn from_entries(words: Vec<String>, doc_freq: Vec<u32>, min_count: u32) -> Result<Self> {
        if words.len() != doc_freq.len() {
            return Err(Error::shape("vocabulary words and frequencies differ in length"));
        }
        if words.len() > u32::MAX as usize {
            return Err(Error::config("vocabulary too large for u32 ids"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary word {w}")));
            }
        }
        Ok(Self {
            words,
            doc_freq,
            index,
            min_count,
            stopword_list: STOPWORD_LIST_ID.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn doc_freq(&self) -> &[u32] {
        &self.doc_freq
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    pub fn stopword_list(&self) -> &str {
        &self.stopword_list
    }

    /// Maps tokens onto ids, dropping out-of-vocabulary words.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().filter_map(|t| self.id(t)).collect()
    }
}
