//! Text preprocessing: lowercasing, mention normalization, word-level
//! tokenization with punctuation detachment, and clipping.

use std::sync::OnceLock;

use regex::Regex;

use super::CorpusError;

/// Token sequences are clipped to this many tokens.
pub const MAX_TOKENS: usize = 64;

/// Canonical mention tokens. The documented mention patterns
/// `{"animal 1", "animal1", "animal one"}` (and the 2-forms) normalize to
/// these before splitting.
pub const ANIMAL1_TOKEN: &str = "animal1";
pub const ANIMAL2_TOKEN: &str = "animal2";

/// Clitic suffixes kept attached to their apostrophe ("animal2's" becomes
/// `animal2` + `'s`). Anything else splits character-by-character.
const CLITICS: [&str; 8] = ["s", "t", "d", "m", "re", "ve", "ll", "em"];

fn mention_patterns() -> &'static (Regex, Regex) {
    static PATTERNS: OnceLock<(Regex, Regex)> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        (
            Regex::new(r"\banimal ?1\b|\banimal one\b").unwrap(),
            Regex::new(r"\banimal ?2\b|\banimal two\b").unwrap(),
        )
    })
}

/// Lowercase, normalize animal mentions, split into word and punctuation
/// tokens, clip at [`MAX_TOKENS`]. Idempotent on its own (joined) output.
pub fn preprocess(text: &str) -> Result<Vec<String>, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let lowered = text.to_lowercase();
    let (p1, p2) = mention_patterns();
    let replaced = p1.replace_all(&lowered, ANIMAL1_TOKEN);
    let replaced = p2.replace_all(&replaced, ANIMAL2_TOKEN);

    let mut tokens = Vec::new();
    for chunk in replaced.split_whitespace() {
        tokenize_chunk(chunk, &mut tokens);
        if tokens.len() >= MAX_TOKENS {
            break;
        }
    }
    tokens.truncate(MAX_TOKENS);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    Ok(tokens)
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if c == '\'' {
            // Peek at the following letter run; keep known clitics glued.
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_alphabetic() {
                j += 1;
            }
            let suffix: String = chars[i + 1..j].iter().collect();
            if CLITICS.contains(&suffix.as_str()) {
                out.push(format!("'{suffix}"));
                i = j;
            } else {
                out.push("'".to_owned());
                i += 1;
            }
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
}

/// Join tokens back into the canonical surface form used in prediction
/// files. Re-preprocessing the result reproduces the token sequence.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Sentence count by terminal punctuation (`.`, `!`, `?` followed by
/// whitespace or end of text); a trailing unterminated fragment counts as
/// one more sentence.
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    if chars.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut tail_content = false;
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if boundary {
                count += 1;
                tail_content = false;
            }
        } else if !c.is_whitespace() {
            tail_content = true;
        }
    }
    count + usize::from(tail_content)
}
