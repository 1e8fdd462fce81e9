use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymbolClass {
    Phone,
    WordBoundary,
    Punctuation,
    Delimiter,
}

pub const WORD_BOUNDARY: &str = "_";
pub const PUNCTUATION: &[&str] = &[",", ".", "?", "!", ";", ":"];
pub const DELIMITER: &[&str] = &["-", "/", "#"];

pub fn classify(symbol: &str) -> SymbolClass {
    if symbol == WORD_BOUNDARY {
        SymbolClass::WordBoundary
    } else if PUNCTUATION.contains(&symbol) {
        SymbolClass::Punctuation
    } else if DELIMITER.contains(&symbol) {
        SymbolClass::Delimiter
    } else {
        SymbolClass::Phone
    }
}

/// Symbol inventory mapping symbols to embedding rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains('|') {
                return Err(Error::Config(format!("invalid symbol `{s}`")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// Sorted union of the symbols in `sequences`.
    pub fn from_sequences<'a, I, S>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut all: Vec<String> = sequences
            .into_iter()
            .flat_map(|seq| seq.iter().map(|s| s.as_ref().to_string()))
            .collect();
        all.sort();
        all.dedup();
        Self::new(all)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index.get(symbol).copied().ok_or_else(|| Error::UnknownSymbol {
            symbol: symbol.to_string(),
        })
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }
}
