//! Splitting captions into style text and category text with a noun lexicon.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryLexicon {
    nouns: BTreeSet<String>,
}

impl CategoryLexicon {
    pub fn new<S: AsRef<str>>(nouns: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for n in nouns {
            let n = n.as_ref();
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "lexicon entry {n:?} is empty or contains whitespace"
                )));
            }
            if n.to_lowercase() != n {
                return Err(Error::Config(format!("lexicon entry {n:?} is not lowercase")));
            }
            set.insert(n.to_string());
        }
        if set.is_empty() {
            return Err(Error::Config("category lexicon is empty".into()));
        }
        Ok(CategoryLexicon { nouns: set })
    }

    /// One noun per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn nouns(&self) -> impl Iterator<Item = &str> {
        self.nouns.iter().map(String::as_str)
    }

    /// Case-insensitive; a trailing `s` is also accepted as a plural.
    pub fn matches(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.nouns.contains(&w) || w.strip_suffix('s').is_some_and(|stem| self.nouns.contains(stem))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecomposedCaption {
    pub style_text: String,
    pub category_text: String,
    /// Articles removed because they introduced a category noun.
    pub dropped: Vec<String>,
}

/// Maximal alphanumeric runs (apostrophes kept inside words), original case.
pub fn words(caption: &str) -> Vec<&str> {
    caption
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn decompose(caption: &str, lexicon: &CategoryLexicon) -> DecomposedCaption {
    let ws = words(caption);
    let matched: Vec<bool> = ws.iter().map(|w| lexicon.matches(w)).collect();
    let mut style = Vec::new();
    let mut category = Vec::new();
    let mut dropped = Vec::new();
    for (i, w) in ws.iter().enumerate() {
        if matched[i] {
            category.push(*w);
        } else if matched.get(i + 1).copied().unwrap_or(false) && ARTICLES.contains(&w.to_lowercase().as_str()) {
            dropped.push(w.to_string());
        } else {
            style.push(*w);
        }
    }
    DecomposedCaption {
        style_text: style.join(" "),
        category_text: category.join(" "),
        dropped,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedRecord {
    pub caption: String,
    pub style_text: String,
    pub category_text: String,
}

/// Reads one caption per line and writes one JSON record per line.
/// Returns the number of records.
pub fn batch_decompose(captions: &Path, lexicon: &CategoryLexicon, out: &Path) -> Result<usize> {
    let input = File::open(captions).map_err(|e| Error::io(captions, e))?;
    let output = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(output);
    let mut n = 0;
    for line in BufReader::new(input).lines() {
        let line = line.map_err(|e| Error::io(captions, e))?;
        let caption = line.trim_end_matches('\r');
        let d = decompose(caption, lexicon);
        let rec = DecomposedRecord {
            caption: caption.to_string(),
            style_text: d.style_text,
            category_text: d.category_text,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(n)
}
