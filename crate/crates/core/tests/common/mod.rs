//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use unicode_segmentation::UnicodeSegmentation;

/// Parses `[<digits>]`, `[<digits> word]` or `[<digits> words]`.
fn is_marker(s: &str) -> bool {
    let Some(inner) = s.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return false;
    };
    let digits = inner.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return false;
    }
    matches!(&inner[digits..], "" | " word" | " words")
}

/// Batch marker removal: whenever a `]` completes a marker, drop it together
/// with one adjacent space (the one before it, else the one after it when
/// nothing but whitespace precedes).
pub fn strip_markers(raw: &str) -> String {
    let mut out = String::new();
    let mut skip_space = false;
    for c in raw.chars() {
        if skip_space {
            skip_space = false;
            if c == ' ' {
                continue;
            }
        }
        out.push(c);
        if c != ']' {
            continue;
        }
        let Some(open) = out.rfind('[') else { continue };
        if !is_marker(&out[open..]) {
            continue;
        }
        out.truncate(open);
        if out.ends_with(' ') {
            out.pop();
        } else if out.chars().last().is_none_or(char::is_whitespace) {
            skip_space = true;
        }
    }
    out
}

/// Clean text of a session: markers removed, cut at the sentinel.
pub fn session_clean(raw: &str, sentinel: &str) -> String {
    let mut c = strip_markers(raw);
    if let Some(i) = c.find(sentinel) {
        c.truncate(i);
    }
    c
}

/// Units: maximal non-whitespace runs inside each word-bound segment.
pub fn count_units(text: &str) -> usize {
    let mut n = 0;
    for seg in text.split_word_bounds() {
        let mut in_run = false;
        for c in seg.chars() {
            if c.is_whitespace() {
                in_run = false;
            } else if !in_run {
                in_run = true;
                n += 1;
            }
        }
    }
    n
}

/// Byte ranges of units, in order.
pub fn unit_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (base, seg) in text.split_word_bound_indices() {
        let mut start = None;
        for (i, c) in seg.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    out.push((base + s, base + i));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push((base + s, base + seg.len()));
        }
    }
    out
}

/// Brute-force `{ N - floor(N / 2^i) }` restricted to `1..N`.
pub fn decaying_oracle(n: usize) -> Vec<usize> {
    let mut set = std::collections::BTreeSet::new();
    for i in 1..64u32 {
        let p = n as f64 - (n as f64 / 2f64.powi(i as i32)).floor();
        let p = p as usize;
        if p >= 1 && p < n {
            set.insert(p);
        }
    }
    set.into_iter().collect()
}
