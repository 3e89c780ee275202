use std::collections::{BTreeSet, HashMap};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: usize = 4;

/// Character-level target vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(symbols: &str) -> Self {
        let symbols: Vec<char> = symbols.chars().collect();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS))
            .collect();
        CharVocab { symbols, index }
    }

    /// Sorted set of every character appearing in `texts`.
    pub fn symbols_of<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        set.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        SPECIALS + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// `BOS text EOS`.
    pub fn target_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Maps ids back to text, dropping PAD/BOS/EOS. UNK renders as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.symbol(id)).collect()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        match id {
            PAD | BOS | EOS => None,
            UNK => Some('\u{fffd}'),
            _ => self.symbols.get(id - SPECIALS).copied(),
        }
    }
}
