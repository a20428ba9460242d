//! Whitespace-delimited pseudo-tokens.
//!
//! Used for chunk sizes, per-state `:max-tokens` limits, the mock backend and
//! the `|y|` length in summary selection. Real models tokenize differently;
//! these units only need to be consistent.

/// Number of whitespace-separated tokens in `text`.
pub fn count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte offset just past the `n`-th token, or `None` if `text` has at most `n` tokens.
pub fn end_of_nth(text: &str, n: usize) -> Option<usize> {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                seen += 1;
                in_token = false;
                if seen == n {
                    return Some(i);
                }
            }
        } else {
            if !in_token && seen == n {
                // Token n+1 starts here; the first n ended before the whitespace run.
                return Some(text[..i].trim_end().len());
            }
            in_token = true;
        }
    }
    None
}

/// The prefix of `text` holding at most `n` tokens, and whether anything was cut.
pub fn truncate(text: &str, n: usize) -> (&str, bool) {
    match end_of_nth(text, n) {
        Some(end) if text[end..].split_whitespace().next().is_some() => (&text[..end], true),
        _ => (text, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_and_truncating() {
        assert_eq!(count(""), 0);
        assert_eq!(count("  a b\n c "), 3);
        assert_eq!(truncate("one two three", 2), ("one two", true));
        assert_eq!(truncate("one two", 2), ("one two", false));
        assert_eq!(truncate("one two \n", 2), ("one two \n", false));
        assert_eq!(truncate("\n a", 0), ("", true));
        assert_eq!(truncate("", 0), ("", false));
    }

    proptest! {
        #[test]
        fn truncate_keeps_exactly_n_tokens(text in "[a-c \n]{0,40}", n in 0usize..8) {
            let (head, cut) = truncate(&text, n);
            prop_assert!(text.starts_with(head));
            if cut {
                prop_assert_eq!(count(head), n);
            } else {
                prop_assert_eq!(head, text.as_str());
                prop_assert!(count(&text) <= n);
            }
        }
    }
}
