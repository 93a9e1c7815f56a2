//! Closed whitespace vocabulary with multi-word phrase tokens.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NB: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<nb>", "<eos>"];

/// Token table. Ids `0..4` are the special tokens; phrases (tokens that
/// contain spaces, such as multi-word category names) are matched greedily
/// before single words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Phrase word lists, longest first.
    phrases: Vec<(Vec<String>, usize)>,
}

impl Vocab {
    /// Specials, then `phrases` in order, then the remaining words in order
    /// of first appearance. Duplicates are ignored.
    pub fn build<'a>(phrases: &'a [String], words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for t in phrases.iter().map(String::as_str).chain(words) {
            let t = t.split_whitespace().collect::<Vec<_>>().join(" ");
            if !t.is_empty() && seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::from_tokens(tokens).expect("specials are placed first")
    }

    /// Table in id order; the first four entries must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(format!("vocabulary must start with {}", SPECIALS.join(" ")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut phrases = Vec::new();
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.trim() != t {
                return Err(format!("token {id} is empty or padded: {t:?}"));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
            let parts: Vec<String> = t.split(' ').map(str::to_string).collect();
            if parts.len() > 1 {
                phrases.push((parts, id));
            }
        }
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Ok(Self { tokens, index, phrases })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::with_capacity(words.len());
        let mut i = 0;
        'outer: while i < words.len() {
            for (parts, id) in &self.phrases {
                let n = parts.len();
                if i + n <= words.len() && parts.iter().zip(&words[i..i + n]).all(|(p, w)| p == w) {
                    out.push(*id);
                    i += n;
                    continue 'outer;
                }
            }
            out.push(self.id(words[i]).unwrap_or(UNK));
            i += 1;
        }
        out
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; line number is the id.
    pub fn render(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(
            &["rule learning".to_string(), "rule learning systems".to_string()],
            "the rule of learning is a test".split(' '),
        )
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<nb>"), Some(NB));
        assert_eq!(v.id("<eos>"), Some(EOS));
    }

    #[test]
    fn phrases_are_single_tokens_and_greedy() {
        let v = vocab();
        let ids = v.tokenize("the rule learning test");
        assert_eq!(ids.len(), 3);
        assert_eq!(v.token(ids[1]), "rule learning");
        let ids = v.tokenize("rule learning systems rule");
        assert_eq!(v.detokenize(&ids), "rule learning systems rule");
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        assert_eq!(v.tokenize("zebra the"), vec![UNK, v.id("the").unwrap()]);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::parse(&v.render()).unwrap(), v);
        assert!(Vocab::parse("a\nb\n").is_err());
    }
}
