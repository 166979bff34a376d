//! Text normalisation shared by corpus building and scoring.

/// Lowercases, replaces everything except letters, digits and apostrophes
/// with whitespace, and collapses runs of whitespace.
pub fn normalize(s: &str) -> String {
    words(s).join(" ")
}

/// Normalised words of `s`.
pub fn words(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Normalises each element and re-splits, so `["Hello,", "World"]`
/// becomes `["hello", "world"]`.
pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().flat_map(|t| words(t.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(normalize("  You are, very KIND!  "), "you are very kind");
        assert_eq!(normalize("don't stop"), "don't stop");
        assert_eq!(normalize("...,"), "");
        assert_eq!(words("a-b"), vec!["a", "b"]);
    }

    #[test]
    fn normalisation_is_idempotent() {
        for s in ["Hello, World.", "x  y", "ÄBC déf"] {
            assert_eq!(normalize(&normalize(s)), normalize(s));
        }
    }
}
