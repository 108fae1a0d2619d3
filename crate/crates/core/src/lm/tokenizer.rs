//! Closed-vocabulary tokenizer over the world's surface strings.
//!
//! A piece is an optional single leading space followed by either a maximal
//! alphanumeric run or one other character, so concatenating pieces always
//! reproduces the input exactly. Pieces not in the vocabulary (entity names)
//! are segmented by greedy longest match against the alphanumeric tokens,
//! which resolves entity names into their generator syllables.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
    pub bos: TokenId,
    pub sep: TokenId,
}

impl Tokenizer {
    /// Build from surface strings. `words` are added both bare and with a
    /// leading space; ids are assigned in sorted order after BOS and SEP.
    pub fn build(words: impl IntoIterator<Item = String>) -> Self {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for w in words {
            if w.is_empty() {
                continue;
            }
            set.insert(format!(" {w}"));
            set.insert(w);
        }
        set.remove("\n");
        let mut vocab = vec![String::new(), "\n".to_string()];
        vocab.extend(set);
        let lookup = vocab
            .iter()
            .enumerate()
            .skip(1) // the empty BOS surface must never match
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Tokenizer {
            vocab,
            lookup,
            bos: 0,
            sep: 1,
        }
    }

    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .vocab
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.vocab[id as usize]
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.lookup.get(surface).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for piece in pieces(text) {
            self.encode_piece(piece, &mut out)?;
        }
        Ok(out)
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<TokenId>) -> Result<()> {
        if let Some(&id) = self.lookup.get(piece) {
            out.push(id);
            return Ok(());
        }
        // Greedy longest-match segmentation. The first sub-token keeps the
        // piece's leading space, the rest are bare.
        let (mut prefix, body) = match piece.strip_prefix(' ') {
            Some(rest) => (" ", rest),
            None => ("", piece),
        };
        let mut pos = 0;
        while pos < body.len() {
            let rest = &body[pos..];
            let mut matched = 0;
            for len in (1..=rest.len()).rev() {
                if !rest.is_char_boundary(len) {
                    continue;
                }
                let candidate = format!("{prefix}{}", &rest[..len]);
                if let Some(&id) = self.lookup.get(&candidate) {
                    out.push(id);
                    matched = len;
                    break;
                }
            }
            if matched == 0 {
                return Err(Error::Index(format!(
                    "unknown token piece '{piece}' (stuck at '{rest}')"
                )));
            }
            pos += matched;
            prefix = "";
        }
        Ok(())
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.vocab[id as usize].as_str())
            .collect()
    }

    /// Encode `text` and return the token range covering the characters
    /// `char_span` (byte offsets). Used to locate entity tokens.
    pub fn encode_with_span(
        &self,
        text: &str,
        char_span: (usize, usize),
    ) -> Result<(Vec<TokenId>, (usize, usize))> {
        let (start, end) = char_span;
        if start >= end || end > text.len() {
            return Err(Error::Index(format!(
                "entity span {start}..{end} out of bounds for text of length {}",
                text.len()
            )));
        }
        // Tokenize pre/entity/post separately, folding a trailing space of
        // the prefix into the entity segment so the split matches the
        // full-text tokenization.
        let (pre, entity_seg) = if start > 0 && text.as_bytes()[start - 1] == b' ' {
            (&text[..start - 1], format!(" {}", &text[start..end]))
        } else {
            (&text[..start], text[start..end].to_string())
        };
        let post = &text[end..];
        let pre_tokens = self.encode(pre)?;
        let ent_tokens = self.encode(&entity_seg)?;
        let post_tokens = self.encode(post)?;
        let span = (pre_tokens.len(), pre_tokens.len() + ent_tokens.len());
        let mut tokens = pre_tokens;
        tokens.extend(ent_tokens);
        tokens.extend(post_tokens);
        debug_assert_eq!(tokens, self.encode(text)?, "segmented encoding diverged");
        Ok((tokens, span))
    }
}

/// Split into round-trip-exact pieces: [space?](alnum-run | single char).
fn pieces(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= bytes.len() {
            return None;
        }
        let start = i;
        if bytes[i] == b' ' {
            i += 1;
            if i >= bytes.len() {
                return Some(&text[start..i]);
            }
        }
        if bytes[i].is_ascii_alphanumeric() {
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
        } else {
            // Single non-alnum char; assumes ASCII surface forms.
            i += 1;
        }
        Some(&text[start..i])
    })
}

/// Final token index of an entity span.
pub fn last_entity_token(tokens: &[TokenId], entity_span: (usize, usize)) -> Result<usize> {
    let (start, end) = entity_span;
    if start >= end || end > tokens.len() {
        return Err(Error::Index(format!(
            "entity span {start}..{end} invalid for {} tokens",
            tokens.len()
        )));
    }
    Ok(end - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::build(
            [
                "the", "region", "of", "is", "zak", "mur", "tol", "Brona", "\"", ":", "{", "}",
                ",",
            ]
            .map(str::to_string),
        )
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = toy();
        for s in [
            "the region of zakmur is",
            "{\"region\": \"Brona\"}",
            "zakmurtol is the region",
            "a\nb".replace(['a', 'b'], "is").as_str(),
        ] {
            let ids = t.encode(s).unwrap();
            assert_eq!(t.decode(&ids), s, "round trip failed for {s:?}");
        }
    }

    #[test]
    fn entity_names_segment_into_syllables() {
        let t = toy();
        let ids = t.encode(" zakmur").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(t.token(ids[0]), " zak");
        assert_eq!(t.token(ids[1]), "mur");
        let ids = t.encode("zakmurtol").unwrap();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn unknown_piece_is_an_error() {
        let t = toy();
        assert!(t.encode("qqq").is_err());
    }

    #[test]
    fn span_encoding_matches_full_encoding() {
        let t = toy();
        let text = "the region of zakmur is";
        let start = text.find("zakmur").unwrap();
        let (tokens, span) = t
            .encode_with_span(text, (start, start + "zakmur".len()))
            .unwrap();
        assert_eq!(tokens, t.encode(text).unwrap());
        let last = last_entity_token(&tokens, span).unwrap();
        assert_eq!(t.token(tokens[last]), "mur");
        // Cross-check: the last entity token is the final subword of the name.
        assert!("zakmur".ends_with(t.token(tokens[last]).trim_start()));
    }

    #[test]
    fn last_entity_token_plain_cases() {
        assert_eq!(last_entity_token(&[9, 9, 9, 9, 9, 9], (3, 6)).unwrap(), 5);
        assert_eq!(last_entity_token(&[9, 9, 9], (2, 3)).unwrap(), 2);
        assert!(last_entity_token(&[9, 9], (1, 4)).is_err());
    }

    #[test]
    fn sep_is_newline() {
        let t = toy();
        let ids = t.encode("is\nis").unwrap();
        assert_eq!(ids[1], t.sep);
        assert_eq!(t.decode(&ids), "is\nis");
    }
}
