//! Byte-pair-encoding subword units.
//!
//! A word is split into characters with the first one carrying the
//! word-start marker `▁`, so `low` becomes `▁l o w`. Training repeatedly
//! merges the most frequent adjacent pair inside words, breaking count ties
//! by the smallest `(left, right)` in byte order, and stops early once no
//! pair occurs at least twice.
//!
//! Unit ids: the four specials first, then every training character, then
//! every training character with the marker (both sorted), then one unit
//! per executed merge in merge order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

pub use crate::ctc::BLANK;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<blank>", "<sos>", "<eos>", "<unk>"];
pub const MARKER: char = '▁';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    merges: Vec<(String, String)>,
    units: Vec<String>,
    ids: BTreeMap<String, u32>,
    ranks: BTreeMap<(String, String), usize>,
}

/// Units of one word before any merge.
fn split_word(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { format!("{MARKER}{c}") } else { c.to_string() })
        .collect()
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(core::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl SubwordVocab {
    /// Learns up to `num_merges` merges from whitespace-separated words.
    pub fn train<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("bpe corpus"));
        }
        let chars: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
        let mut words: Vec<(Vec<String>, usize)> = counts.iter().map(|(w, &n)| (split_word(w), n)).collect();
        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
                }
            }
            // BTreeMap iterates in (left, right) order, so the first maximum
            // is the tie-break winner.
            let mut best: Option<((&str, &str), usize)> = None;
            for (&pair, &n) in &pairs {
                if best.map_or(true, |(_, m)| n > m) {
                    best = Some((pair, n));
                }
            }
            let Some(((l, r), n)) = best else { break };
            if n < 2 {
                break;
            }
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                merge_in_place(syms, &l, &r);
            }
            merges.push((l, r));
        }
        let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        units.extend(chars.iter().map(|c| c.to_string()));
        units.extend(chars.iter().map(|c| format!("{MARKER}{c}")));
        units.extend(merges.iter().map(|(l, r)| format!("{l}{r}")));
        Self::from_parts(merges, units)
    }

    /// Rebuilds a vocabulary from its merge list and id-ordered units.
    pub fn from_parts(merges: Vec<(String, String)>, units: Vec<String>) -> Result<Self> {
        if units.len() < SPECIALS.len() + merges.len() {
            return Err(invalid("fewer units than specials plus merges"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if units[i] != *s {
                return Err(invalid(format!("unit {i} must be {s}, found {}", units[i])));
            }
        }
        let base = units.len() - merges.len();
        for (k, (l, r)) in merges.iter().enumerate() {
            let u = &units[base + k];
            if *u != format!("{l}{r}") {
                return Err(invalid(format!("merged unit {u} is not {l} + {r}")));
            }
        }
        for u in &units[SPECIALS.len()..base] {
            let mut cs = u.chars();
            let ok = match (cs.next(), cs.next(), cs.next()) {
                (Some(MARKER), Some(c), None) => c != MARKER,
                (Some(c), None, None) => c != MARKER,
                _ => false,
            };
            if !ok {
                return Err(invalid(format!("base unit {u:?} is not a single (marked) character")));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, u) in units.iter().enumerate().skip(SPECIALS.len()) {
            if SPECIALS.contains(&u.as_str()) {
                return Err(invalid(format!("unit {i} duplicates a special")));
            }
            ids.entry(u.clone()).or_insert(i as u32);
        }
        let mut ranks = BTreeMap::new();
        for (k, m) in merges.iter().enumerate() {
            ranks.entry(m.clone()).or_insert(k);
        }
        Ok(Self { merges, units, ids, ranks })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.ids.get(unit).copied()
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<Option<String>> = split_word(word)
            .into_iter()
            .map(|s| self.ids.contains_key(&s).then_some(s))
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let (Some(l), Some(r)) = (&syms[i], &syms[i + 1]) {
                    if let Some(&rank) = self.ranks.get(&(l.clone(), r.clone())) {
                        if best.map_or(true, |(b, _)| rank < b) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                let hit = i + 1 < syms.len()
                    && syms[i].as_deref() == Some(l.as_str())
                    && syms[i + 1].as_deref() == Some(r.as_str());
                if hit {
                    next.push(Some(format!("{l}{r}")));
                    i += 2;
                } else {
                    next.push(syms[i].take());
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend(syms.iter().map(|s| s.as_ref().map_or(UNK, |s| self.ids[s])));
    }

    /// Applies the merges in learned order to every whitespace-separated
    /// word. Characters outside the vocabulary become unk.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Concatenates units up to the first eos, drops specials and turns
    /// word-start markers into spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let unit = self.unit(id).ok_or(Error::InvalidUnit { id, size: self.len() })?;
            if id == EOS {
                break;
            }
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            for c in unit.chars() {
                s.push(if c == MARKER { ' ' } else { c });
            }
        }
        Ok(s.trim_start_matches(' ').to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    #[test]
    fn repeated_word_merges_marker_pair() {
        let v = SubwordVocab::train(&["aa aa aa"], 1).unwrap();
        assert_eq!(v.merges(), &[pair("▁a", "a")]);
    }

    #[test]
    fn low_lower_trace() {
        let v = SubwordVocab::train(&["low low lower"], 2).unwrap();
        assert_eq!(v.merges(), &[pair("o", "w"), pair("▁l", "ow")]);
        assert_eq!(v.encode("low").len(), 1);
    }

    #[test]
    fn early_stop_when_no_pair_repeats() {
        let v = SubwordVocab::train(&["abab ab"], 5).unwrap();
        assert_eq!(v.merges(), &[pair("▁a", "b")]);
    }

    #[test]
    fn zero_merges_is_alphabet_and_specials() {
        let v = SubwordVocab::train(&["ba ab"], 0).unwrap();
        let units: Vec<&str> = v.units().iter().map(String::as_str).collect();
        assert_eq!(units, vec!["<blank>", "<sos>", "<eos>", "<unk>", "a", "b", "▁a", "▁b"]);
    }

    #[test]
    fn decode_rules() {
        let v = SubwordVocab::train(&["hello"], 0).unwrap();
        let ids: Vec<u32> = ["▁h", "e", "l", "l", "o"].iter().map(|u| v.id(u).unwrap()).collect();
        assert_eq!(v.decode(&ids).unwrap(), "hello");
        assert_eq!(v.decode(&[]).unwrap(), "");
        let mut with_eos = ids.clone();
        with_eos.insert(2, EOS);
        assert_eq!(v.decode(&with_eos).unwrap(), "he");
        assert!(matches!(v.decode(&[99]), Err(Error::InvalidUnit { id: 99, .. })));
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = SubwordVocab::train(&["ab"], 0).unwrap();
        assert_eq!(v.encode("az"), vec![v.id("▁a").unwrap(), UNK]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn parts_round_trip() {
        let v = SubwordVocab::train(&["low low lower newest newest"], 6).unwrap();
        let w = SubwordVocab::from_parts(v.merges().to_vec(), v.units().to_vec()).unwrap();
        assert_eq!(v, w);
        let mut bad = v.units().to_vec();
        let last = bad.len() - 1;
        bad[last] = "zz".into();
        assert!(SubwordVocab::from_parts(v.merges().to_vec(), bad).is_err());
    }
}
