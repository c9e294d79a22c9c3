//! Length markers: rendering, detection and removal.
//!
//! Grammar (with the default delimiters and label):
//!
//! ```text
//! marker := "[" DIGITS " words]" | "[" DIGITS " word]" | "[" DIGITS "]"
//! ```
//!
//! Removal takes the marker plus one adjacent ASCII space: the space before
//! it when there is one, otherwise the space after it if the marker starts a
//! line (or the text). Removal is applied to the output as it is built, so
//! text that only becomes a marker once an inner marker is gone is removed
//! too; this makes [`strip`] idempotent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    /// `[k words]`
    CountWithWordsLabel,
    /// `[k]`
    BareCount,
    /// `[target - k]`, rendered as `[r]`
    RemainingCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarkerFormat {
    pub kind: MarkerKind,
    pub open_delim: String,
    pub close_delim: String,
    pub label_singular: String,
    pub label_plural: String,
}

impl Default for MarkerFormat {
    fn default() -> Self {
        Self::with_kind(MarkerKind::CountWithWordsLabel)
    }
}

impl MarkerFormat {
    pub fn with_kind(kind: MarkerKind) -> Self {
        Self {
            kind,
            open_delim: "[".into(),
            close_delim: "]".into(),
            label_singular: "word".into(),
            label_plural: "words".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerOccurrence {
    pub declared_count: usize,
    /// Byte range of the marker itself (without the removed space) in the raw text.
    pub byte_span: (usize, usize),
}

/// Bracketed text that looked like a marker but did not parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerDiagnostic {
    pub byte_span: (usize, usize),
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stripped {
    pub clean: String,
    pub occurrences: Vec<MarkerOccurrence>,
    pub diagnostics: Vec<MarkerDiagnostic>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarkerError {
    #[error("remaining-count marker needs counted ({counted}) <= target ({target})")]
    CountExceedsTarget { counted: usize, target: usize },
}

pub fn render(format: &MarkerFormat, counted: usize, target: usize) -> Result<String, MarkerError> {
    let body = match format.kind {
        MarkerKind::CountWithWordsLabel => {
            let label = if counted == 1 {
                &format.label_singular
            } else {
                &format.label_plural
            };
            format!("{counted} {label}")
        }
        MarkerKind::BareCount => counted.to_string(),
        MarkerKind::RemainingCount => {
            if counted > target {
                return Err(MarkerError::CountExceedsTarget { counted, target });
            }
            (target - counted).to_string()
        }
    };
    Ok(format!(
        "{}{}{}",
        format.open_delim, body, format.close_delim
    ))
}

/// Removes every well-formed marker from `raw`.
pub fn strip(raw: &str, format: &MarkerFormat) -> Stripped {
    let mut stripper = MarkerStripper::new(format.clone());
    let mut sink = CleanSink::default();
    stripper.feed(raw, &mut sink);
    stripper.finish(&mut sink);
    Stripped {
        clean: sink.text,
        occurrences: stripper.occurrences,
        diagnostics: stripper.diagnostics,
    }
}

/// Parses `s` as exactly one marker, returning its declared number.
pub fn parse_marker(s: &str, format: &MarkerFormat) -> Option<usize> {
    let inner = s
        .strip_prefix(format.open_delim.as_str())?
        .strip_suffix(format.close_delim.as_str())?;
    let digits_end = inner
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(inner.len());
    if digits_end == 0 {
        return None;
    }
    let rest = &inner[digits_end..];
    let ok = rest.is_empty()
        || rest
            .strip_prefix(' ')
            .is_some_and(|l| l == format.label_plural || l == format.label_singular);
    if !ok {
        return None;
    }
    // Absurdly long digit runs are still markers; the count saturates.
    Some(inner[..digits_end].parse().unwrap_or(usize::MAX))
}

/// True when `s` (starting at an opening delimiter) can still grow into a marker.
fn is_marker_prefix(s: &str, format: &MarkerFormat) -> bool {
    let Some(rest) = s.strip_prefix(format.open_delim.as_str()) else {
        return false;
    };
    let digits_end = rest
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(rest.len());
    let tail = &rest[digits_end..];
    if tail.is_empty() {
        return true;
    }
    if digits_end == 0 {
        return false;
    }
    let close = format.close_delim.as_str();
    let prefix_of = |full: String| full.len() > tail.len() && full.starts_with(tail);
    prefix_of(close.to_string())
        || prefix_of(format!(" {}{close}", format.label_plural))
        || prefix_of(format!(" {}{close}", format.label_singular))
}

/// Start of the earliest opening delimiter in `s` that can still become a
/// marker, counting markers nested inside it that may be removed first
/// (`[3 [2 words]]` strips to nothing).
fn earliest_open_marker(s: &str, format: &MarkerFormat) -> Option<usize> {
    let open = format.open_delim.as_str();
    let starts: Vec<usize> = s.match_indices(open).map(|(i, _)| i).collect();
    let mut open_at = vec![false; starts.len()];
    let mut earliest = None;
    for k in (0..starts.len()).rev() {
        let i = starts[k];
        let mut ok = is_marker_prefix(&s[i..], format);
        if !ok {
            ok = (k + 1..starts.len()).any(|m| {
                if !open_at[m] {
                    return false;
                }
                let seg = &s[i..starts[m]];
                is_marker_prefix(seg, format)
                    || seg
                        .strip_suffix(' ')
                        .is_some_and(|t| is_marker_prefix(t, format))
            });
        }
        open_at[k] = ok;
        if ok {
            earliest = Some(i);
        }
    }
    earliest
}

/// Receives clean text together with the raw offset each run came from.
#[derive(Debug, Clone, Default)]
pub struct CleanSink {
    pub text: String,
    /// `(clean_offset, raw_offset)` at the start of every raw-contiguous run.
    pub anchors: Vec<(usize, usize)>,
}

impl CleanSink {
    fn push(&mut self, text: &str, raw_offset: usize) {
        if text.is_empty() {
            return;
        }
        let here = self.text.len();
        let contiguous = self
            .anchors
            .last()
            .is_some_and(|&(c, r)| r + (here - c) == raw_offset);
        if !contiguous {
            self.anchors.push((here, raw_offset));
        }
        self.text.push_str(text);
    }

    /// Raw offset just past the clean byte range ending at `clean_end`.
    pub fn raw_end_of(&self, clean_end: usize) -> usize {
        if clean_end == 0 {
            return self.anchors.first().map_or(0, |&(_, r)| r);
        }
        let last = clean_end - 1;
        let idx = self.anchors.partition_point(|&(c, _)| c <= last) - 1;
        let (c, r) = self.anchors[idx];
        r + (last - c) + 1
    }

    pub fn truncate(&mut self, clean_len: usize) {
        self.text.truncate(clean_len);
        let keep = self.anchors.partition_point(|&(c, _)| c < clean_len);
        self.anchors.truncate(keep);
    }
}

/// Streaming marker remover.
///
/// Output that a later marker could still remove (an open delimiter that may
/// become a marker, or a trailing space) is held back; everything else is
/// delivered to the [`CleanSink`] immediately. Feeding any split of a text
/// yields the same output as [`strip`] on the whole.
#[derive(Debug, Clone)]
pub struct MarkerStripper {
    format: MarkerFormat,
    /// Output not yet final, with per-run raw offsets.
    out: String,
    out_runs: Vec<(usize, usize)>,
    /// Leading bytes of `out` already handed to a sink (non-zero only after
    /// [`restore`](Self::restore)).
    delivered: usize,
    /// Last character of the finalized output before `out`.
    last_final: Option<char>,
    drop_next_space: bool,
    raw_pos: usize,
    retracted: bool,
    pub occurrences: Vec<MarkerOccurrence>,
    pub diagnostics: Vec<MarkerDiagnostic>,
}

impl MarkerStripper {
    pub fn new(format: MarkerFormat) -> Self {
        Self {
            format,
            out: String::new(),
            out_runs: Vec::new(),
            delivered: 0,
            last_final: None,
            drop_next_space: false,
            raw_pos: 0,
            retracted: false,
            occurrences: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn format(&self) -> &MarkerFormat {
        &self.format
    }

    /// Raw bytes consumed so far.
    pub fn raw_position(&self) -> usize {
        self.raw_pos
    }

    /// True if a removal reached into text that had already been delivered.
    pub fn has_retracted(&self) -> bool {
        self.retracted
    }

    /// True while already-delivered text is still part of a possible marker.
    pub fn holds_delivered(&self) -> bool {
        self.delivered > 0 && self.hold_point() < self.delivered
    }

    fn raw_of_out(&self, out_idx: usize) -> usize {
        let i = self.out_runs.partition_point(|&(o, _)| o <= out_idx) - 1;
        let (o, r) = self.out_runs[i];
        r + (out_idx - o)
    }

    fn push_str(&mut self, text: &str, raw_at: usize) {
        let here = self.out.len();
        let contiguous = self
            .out_runs
            .last()
            .is_some_and(|&(o, r)| r + (here - o) == raw_at);
        if !contiguous {
            self.out_runs.push((here, raw_at));
        }
        self.out.push_str(text);
    }

    fn cut_out(&mut self, len: usize) {
        if len < self.delivered {
            self.retracted = true;
            self.delivered = len;
        }
        self.out.truncate(len);
        let keep = self.out_runs.partition_point(|&(o, _)| o < len);
        self.out_runs.truncate(keep);
    }

    fn prev_char(&self) -> Option<char> {
        self.out.chars().next_back().or(self.last_final)
    }

    /// Checks whether `out` now ends with a marker and removes it.
    fn try_remove_marker(&mut self) {
        let close = self.format.close_delim.as_str();
        if !self.out.ends_with(close) {
            return;
        }
        let Some(start) = self.out.rfind(self.format.open_delim.as_str()) else {
            return;
        };
        let candidate = &self.out[start..];
        match parse_marker(candidate, &self.format) {
            Some(count) => {
                let raw_start = self.raw_of_out(start);
                self.occurrences.push(MarkerOccurrence {
                    declared_count: count,
                    byte_span: (raw_start, self.raw_pos),
                });
                self.cut_out(start);
                if self.out.ends_with(' ') {
                    self.cut_out(self.out.len() - 1);
                } else if self.prev_char().is_none_or(char::is_whitespace) {
                    self.drop_next_space = true;
                }
            }
            None => {
                if candidate.len() <= 48 && candidate.bytes().any(|b| b.is_ascii_digit()) {
                    self.diagnostics.push(MarkerDiagnostic {
                        byte_span: (self.raw_of_out(start), self.raw_pos),
                        text: candidate.to_string(),
                    });
                }
            }
        }
    }

    /// Start of the region that a future marker could still remove.
    fn hold_point(&self) -> usize {
        let open = self.format.open_delim.as_str();
        let mut hold = earliest_open_marker(&self.out, &self.format).unwrap_or(self.out.len());
        if hold == self.out.len() {
            // A partially typed multi-byte opening delimiter.
            for k in (1..open.len()).rev() {
                if self.out.len() >= k
                    && self.out.is_char_boundary(self.out.len() - k)
                    && open.starts_with(&self.out[self.out.len() - k..])
                {
                    hold = self.out.len() - k;
                    break;
                }
            }
        }
        // Each later marker may also consume one preceding space.
        while self.out[..hold].ends_with(' ') {
            hold -= 1;
        }
        hold
    }

    pub fn feed(&mut self, raw: &str, sink: &mut CleanSink) {
        let base = self.raw_pos;
        let close = self.format.close_delim.chars().next_back();
        let mut i = 0;
        while i < raw.len() {
            if self.drop_next_space {
                self.drop_next_space = false;
                if raw[i..].starts_with(' ') {
                    i += 1;
                    continue;
                }
            }
            // Text up to and including the next closing character.
            let end = close
                .and_then(|c| raw[i..].find(c).map(|k| i + k + c.len_utf8()))
                .unwrap_or(raw.len());
            self.push_str(&raw[i..end], base + i);
            if close.is_some_and(|c| raw[..end].ends_with(c)) {
                self.raw_pos = base + end;
                self.try_remove_marker();
            }
            i = end;
        }
        self.raw_pos = base + raw.len();
        self.flush(self.hold_point(), sink);
    }

    /// Ends the stream: everything held is delivered.
    pub fn finish(&mut self, sink: &mut CleanSink) {
        self.drop_next_space = false;
        self.flush(self.out.len(), sink);
    }

    fn flush(&mut self, upto: usize, sink: &mut CleanSink) {
        if upto > self.delivered {
            // Deliver run by run so raw offsets survive.
            let mut pos = self.delivered;
            while pos < upto {
                let run = self.out_runs.partition_point(|&(o, _)| o <= pos) - 1;
                let run_end = self
                    .out_runs
                    .get(run + 1)
                    .map_or(self.out.len(), |&(o, _)| o)
                    .min(upto);
                let (o, r) = self.out_runs[run];
                sink.push(&self.out[pos..run_end], r + (pos - o));
                pos = run_end;
            }
            self.delivered = upto;
        }
        let drop = upto.min(self.delivered);
        if drop > 0 {
            self.last_final = self.out[..drop].chars().next_back();
            let mut runs: Vec<(usize, usize)> = Vec::with_capacity(self.out_runs.len());
            let first = self
                .out_runs
                .partition_point(|&(o, _)| o <= drop)
                .saturating_sub(1);
            for &(o, r) in &self.out_runs[first..] {
                if o >= drop {
                    runs.push((o - drop, r));
                } else if drop < self.out.len() {
                    runs.push((0, r + (drop - o)));
                }
            }
            self.out.drain(..drop);
            self.out_runs = runs;
            self.delivered -= drop;
        }
    }

    /// Resets the stripper to the state it would have after processing the
    /// raw text up to `raw_end`, whose clean output is `clean` and has been
    /// fully delivered already.
    pub fn restore(&mut self, clean: &CleanSink, raw_end: usize) {
        let text = &clean.text;
        // The only part of the output that can still change is a trailing
        // run of possible marker prefixes; keep a short tail to find it.
        let mut start = text.len().saturating_sub(64);
        while !text.is_char_boundary(start) {
            start -= 1;
        }
        match earliest_open_marker(&text[start..], &self.format) {
            Some(i) => {
                start += i;
                while text[..start].ends_with(' ') {
                    start -= 1;
                }
            }
            None => start = text.len(),
        }
        self.out = text[start..].to_string();
        self.out_runs.clear();
        let mut pos = start;
        while pos < text.len() {
            let idx = clean.anchors.partition_point(|&(c, _)| c <= pos) - 1;
            let (c, r) = clean.anchors[idx];
            self.out_runs.push((pos - start, r + (pos - c)));
            pos = clean.anchors.get(idx + 1).map_or(text.len(), |&(c, _)| c);
        }
        self.delivered = self.out.len();
        self.last_final = text[..start].chars().next_back();
        self.drop_next_space = false;
        self.raw_pos = raw_end;
        self.retracted = false;
    }
}
