//! Joint token id space with per-language sub-vocabularies.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    L1,
    L2,
}

impl Lang {
    pub const BOTH: [Lang; 2] = [Lang::L1, Lang::L2];

    pub fn index(self) -> usize {
        match self {
            Lang::L1 => 0,
            Lang::L2 => 1,
        }
    }

    pub fn other(self) -> Lang {
        match self {
            Lang::L1 => Lang::L2,
            Lang::L2 => Lang::L1,
        }
    }

    pub fn parse(s: &str) -> Result<Lang> {
        match s {
            "l1" => Ok(Lang::L1),
            "l2" => Ok(Lang::L2),
            other => Err(Error::Usage(format!("unknown language tag '{other}' (expected l1 or l2)"))),
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::L1 => "l1",
            Lang::L2 => "l2",
        })
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "</s>", "<s:l1>", "<s:l2>"];

pub fn bos(lang: Lang) -> usize {
    3 + lang.index()
}

/// Token ids of one sentence, framed as `[bos_lang, …, eos]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    lang: Lang,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, lang: Lang) -> Result<Self> {
        if ids.len() < 2 || ids[0] != bos(lang) || *ids.last().unwrap() != EOS {
            return Err(Error::Input(format!("token sequence must be framed by bos({lang}) and eos")));
        }
        if ids[1..ids.len() - 1].iter().any(|&t| t == PAD || t == EOS || t == bos(Lang::L1) || t == bos(Lang::L2)) {
            return Err(Error::Input("token sequence has a reserved id in its interior".into()));
        }
        Ok(Self { ids, lang })
    }

    /// Frame interior ids with bos and eos.
    pub fn from_interior(interior: &[usize], lang: Lang) -> Result<Self> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(bos(lang));
        ids.extend_from_slice(interior);
        ids.push(EOS);
        Self::new(ids, lang)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn interior(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn lang(&self) -> Lang {
        self.lang
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior().is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// `membership[id]` bit 0: seen in l1, bit 1: seen in l2.
    membership: Vec<u8>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from tokens already in id order (reserved tokens excluded).
    pub fn from_tokens(tokens: Vec<(String, u8)>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut membership = vec![0u8; RESERVED.len()];
        for (t, m) in tokens {
            all.push(t);
            membership.push(m);
        }
        let mut v = Self { tokens: all, membership, index: HashMap::new() };
        v.rebuild_index()?;
        Ok(v)
    }

    pub(crate) fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        if self.membership.len() != self.tokens.len() {
            return Err(Error::Input("vocabulary membership table has the wrong length".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(text).map_err(|e| Error::Input(format!("bad vocabulary: {e}")))?;
        if v.tokens.len() < RESERVED.len() || v.tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Input("vocabulary does not start with the reserved tokens".into()));
        }
        v.rebuild_index()?;
        Ok(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn in_lang(&self, id: usize, lang: Lang) -> bool {
        self.membership[id] & (1 << lang.index()) != 0
    }

    /// Ids of the non-reserved tokens observed in `lang`.
    pub fn lang_tokens(&self, lang: Lang) -> Vec<usize> {
        (RESERVED.len()..self.len()).filter(|&i| self.in_lang(i, lang)).collect()
    }

    pub fn encode(&self, sentence: &str, lang: Lang) -> TokenSequence {
        let interior: Vec<usize> = sentence.split_whitespace().map(|t| self.lookup(t)).collect();
        TokenSequence::from_interior(&interior, lang).expect("lookup never yields reserved framing ids")
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.interior().iter().map(|&i| self.tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(vec![("a".into(), 1), ("b".into(), 2), ("c".into(), 3)]).unwrap()
    }

    #[test]
    fn reserved_ids_are_distinct() {
        let v = vocab();
        let ids = [PAD, UNK, EOS, bos(Lang::L1), bos(Lang::L2)];
        for (i, a) in ids.iter().enumerate() {
            assert_eq!(v.token(*a), RESERVED[i]);
        }
    }

    #[test]
    fn unknown_maps_to_unk() {
        assert_eq!(vocab().lookup("zzz"), UNK);
    }

    #[test]
    fn encode_decode() {
        let v = vocab();
        let s = v.encode("a  c b", Lang::L2);
        assert_eq!(s.ids(), &[4, 5, 7, 6, 2]);
        assert_eq!(v.decode(&s), "a c b");
    }

    #[test]
    fn membership() {
        let v = vocab();
        assert_eq!(v.lang_tokens(Lang::L1), vec![5, 7]);
        assert_eq!(v.lang_tokens(Lang::L2), vec![6, 7]);
    }

    #[test]
    fn json_round_trip() {
        let v = vocab();
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn framing_enforced() {
        assert!(TokenSequence::new(vec![3, 5, 2], Lang::L2).is_err());
        assert!(TokenSequence::new(vec![3, 0, 2], Lang::L1).is_err());
        assert!(TokenSequence::new(vec![3, 2], Lang::L1).unwrap().is_empty());
    }
}
