//! Length-unit segmentation and counting.
//!
//! A *unit* is what a length target counts: a run of letters/digits as
//! delimited by Unicode word boundaries (UAX #29), a standalone punctuation
//! or symbol, or (in CJK mode) a single Han/Kana/Hangul character.
//!
//! Conventions worth knowing when comparing against other counters:
//!
//! * `don't` and `3.14` stay joined (UAX #29 keeps them together).
//! * `state-of-the-art` is 7 units: hyphens are standalone symbols.
//! * `1,000` is one unit: UAX #29 joins digit groups across `,` and `.`.
//! * `...` is three units; an emoji ZWJ sequence or flag pair is one.
//!
//! [`IncrementalSegmenter`] produces the same boundaries as [`segment`] for
//! any chunking of the input, including chunks that split a multi-byte
//! character.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMode {
    /// Word-boundary runs of letters/digits plus standalone symbols.
    WordsAndSymbols,
    /// Whitespace-delimited tokens.
    WhitespaceOnly,
    /// `WordsAndSymbols`, with every CJK character counted on its own.
    CjkCharacters,
}

/// What counts as one length unit. Immutable and cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationRule {
    pub mode: SegmentationMode,
    pub treat_cjk_char_as_unit: bool,
}

impl Default for SegmentationRule {
    fn default() -> Self {
        Self::words_and_symbols()
    }
}

impl SegmentationRule {
    pub const fn words_and_symbols() -> Self {
        Self {
            mode: SegmentationMode::WordsAndSymbols,
            treat_cjk_char_as_unit: false,
        }
    }

    pub const fn whitespace_only() -> Self {
        Self {
            mode: SegmentationMode::WhitespaceOnly,
            treat_cjk_char_as_unit: false,
        }
    }

    pub const fn cjk_characters() -> Self {
        Self {
            mode: SegmentationMode::CjkCharacters,
            treat_cjk_char_as_unit: true,
        }
    }

    fn splits_cjk(&self) -> bool {
        self.treat_cjk_char_as_unit || self.mode == SegmentationMode::CjkCharacters
    }
}

/// End of a completed unit in the (clean) stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitBoundary {
    /// 1-based ordinal of the unit.
    pub unit_index: usize,
    pub byte_offset_start: usize,
    /// Exclusive end; always on a character boundary.
    pub byte_offset_end: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("invalid UTF-8 in stream at byte {offset}")]
    InvalidEncoding { offset: usize },
    #[error("stream finalized in the middle of a multi-byte character ({pending} dangling bytes)")]
    TruncatedCharacter { pending: usize },
}

/// Han, Hiragana, Katakana, Hangul and their compatibility/extension blocks.
pub fn is_cjk_char(c: char) -> bool {
    matches!(c as u32,
        0x1100..=0x11FF        // Hangul Jamo
        | 0x2E80..=0x2FDF      // CJK radicals, Kangxi
        | 0x3005..=0x3007      // iteration mark, closing mark, ideographic zero
        | 0x3021..=0x3029      // Hangzhou numerals
        | 0x3038..=0x303B
        | 0x3041..=0x3096      // Hiragana (without the combining sound marks)
        | 0x309D..=0x309F
        | 0x30A1..=0x30FA      // Katakana
        | 0x30FC..=0x30FF
        | 0x3130..=0x318F      // Hangul compatibility Jamo
        | 0x31F0..=0x31FF      // Katakana phonetic extensions
        | 0x3400..=0x4DBF      // CJK ext A
        | 0x4E00..=0x9FFF      // CJK unified
        | 0xA960..=0xA97F
        | 0xAC00..=0xD7FF      // Hangul syllables + Jamo ext B
        | 0xF900..=0xFAFF      // compatibility ideographs
        | 0xFF66..=0xFF9D      // halfwidth Katakana
        | 0xFFA0..=0xFFDC      // halfwidth Hangul
        | 0x1B000..=0x1B16F    // Kana supplement/extended
        | 0x20000..=0x3134F    // ext B..G
    )
}

/// Visits every unit of `text` as a `(start, end)` byte range, in order.
pub(crate) fn for_each_unit(text: &str, rule: SegmentationRule, mut f: impl FnMut(usize, usize)) {
    if rule.mode == SegmentationMode::WhitespaceOnly {
        let mut start = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    f(s, i);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            f(s, text.len());
        }
        return;
    }

    let cjk = rule.splits_cjk();
    for (seg_start, seg) in text.split_word_bound_indices() {
        // A word-bound segment may carry whitespace (space runs with attached
        // combining marks); units are its non-whitespace pieces.
        let mut piece_start = None;
        let emit = |s: usize, e: usize, f: &mut dyn FnMut(usize, usize)| {
            if cjk {
                split_cjk(text, s, e, f);
            } else {
                f(s, e);
            }
        };
        for (i, c) in seg.char_indices() {
            let abs = seg_start + i;
            if c.is_whitespace() {
                if let Some(s) = piece_start.take() {
                    emit(s, abs, &mut f);
                }
            } else if piece_start.is_none() {
                piece_start = Some(abs);
            }
        }
        if let Some(s) = piece_start {
            emit(s, seg_start + seg.len(), &mut f);
        }
    }
}

/// Splits `text[start..end]` so that every grapheme starting with a CJK
/// character is its own unit; non-CJK graphemes stay grouped.
fn split_cjk(text: &str, start: usize, end: usize, f: &mut dyn FnMut(usize, usize)) {
    let piece = &text[start..end];
    if !piece.chars().any(is_cjk_char) {
        f(start, end);
        return;
    }
    let mut run_start: Option<usize> = None;
    for (i, g) in piece.grapheme_indices(true) {
        let abs = start + i;
        if g.chars().next().is_some_and(is_cjk_char) {
            if let Some(s) = run_start.take() {
                f(s, abs);
            }
            f(abs, abs + g.len());
        } else if run_start.is_none() {
            run_start = Some(abs);
        }
    }
    if let Some(s) = run_start {
        f(s, end);
    }
}

/// Ordered unit list of `text`.
pub fn segment(text: &str, rule: SegmentationRule) -> Vec<&str> {
    let mut out = Vec::new();
    for_each_unit(text, rule, |s, e| out.push(&text[s..e]));
    out
}

/// Batch boundaries of `text`, numbered from 1.
pub fn boundaries(text: &str, rule: SegmentationRule) -> Vec<UnitBoundary> {
    let mut out = Vec::new();
    for_each_unit(text, rule, |s, e| {
        out.push(UnitBoundary {
            unit_index: out.len() + 1,
            byte_offset_start: s,
            byte_offset_end: e,
        })
    });
    out
}

pub fn count_units(text: &str, rule: SegmentationRule) -> usize {
    let mut n = 0;
    for_each_unit(text, rule, |_, _| n += 1);
    n
}

/// Streaming segmenter.
///
/// Text is buffered from the last whitespace onwards; a unit is reported
/// once a following whitespace character (or [`finalize`](Self::finalize))
/// proves that its end cannot move. Everything before a whitespace character
/// segments identically whether or not later text is present, which is what
/// makes the output independent of chunking.
#[derive(Debug, Clone)]
pub struct IncrementalSegmenter {
    rule: SegmentationRule,
    /// Undecoded tail of the byte stream (at most 3 bytes).
    partial: Vec<u8>,
    /// Text not yet proven final. Starts at `pending_start` in the stream.
    pending: String,
    pending_start: usize,
    /// Units inside `pending` that were already reported (only non-zero after
    /// [`truncate`](Self::truncate)).
    reported_in_pending: Vec<UnitBoundary>,
    units: usize,
    unstable: bool,
}

impl IncrementalSegmenter {
    pub fn new(rule: SegmentationRule) -> Self {
        Self {
            rule,
            partial: Vec::new(),
            pending: String::new(),
            pending_start: 0,
            reported_in_pending: Vec::new(),
            units: 0,
            unstable: false,
        }
    }

    pub fn rule(&self) -> SegmentationRule {
        self.rule
    }

    /// Units reported so far.
    pub fn count(&self) -> usize {
        self.units
    }

    /// Bytes of valid text consumed so far.
    pub fn consumed(&self) -> usize {
        self.pending_start + self.pending.len()
    }

    /// True once a previously reported unit was re-segmented differently.
    /// Only possible after [`truncate`](Self::truncate) followed by text that
    /// glues onto the truncated tail.
    pub fn is_unstable(&self) -> bool {
        self.unstable
    }

    /// Feeds raw bytes; a chunk may end inside a multi-byte character.
    pub fn feed(&mut self, chunk: &[u8]) -> Result<Vec<UnitBoundary>, SegmentError> {
        let mut out = Vec::new();
        self.feed_into(chunk, &mut out)?;
        Ok(out)
    }

    pub fn feed_into(
        &mut self,
        chunk: &[u8],
        out: &mut Vec<UnitBoundary>,
    ) -> Result<(), SegmentError> {
        if self.partial.is_empty() {
            match std::str::from_utf8(chunk) {
                Ok(s) => {
                    self.feed_str_into(s, out);
                    return Ok(());
                }
                Err(e) => {
                    if e.error_len().is_some() {
                        return Err(SegmentError::InvalidEncoding {
                            offset: self.consumed() + e.valid_up_to(),
                        });
                    }
                    let valid = e.valid_up_to();
                    // The prefix was just validated.
                    let head = std::str::from_utf8(&chunk[..valid]).expect("validated prefix");
                    self.feed_str_into(head, out);
                    self.partial.extend_from_slice(&chunk[valid..]);
                    return Ok(());
                }
            }
        }
        let mut buf = std::mem::take(&mut self.partial);
        buf.extend_from_slice(chunk);
        match std::str::from_utf8(&buf) {
            Ok(s) => self.feed_str_into(s, out),
            Err(e) => {
                if e.error_len().is_some() {
                    return Err(SegmentError::InvalidEncoding {
                        offset: self.consumed() + e.valid_up_to(),
                    });
                }
                let valid = e.valid_up_to();
                let head = std::str::from_utf8(&buf[..valid]).expect("validated prefix");
                self.feed_str_into(head, out);
                self.partial = buf[valid..].to_vec();
            }
        }
        Ok(())
    }

    pub fn feed_str(&mut self, text: &str) -> Vec<UnitBoundary> {
        let mut out = Vec::new();
        self.feed_str_into(text, &mut out);
        out
    }

    pub fn feed_str_into(&mut self, text: &str, out: &mut Vec<UnitBoundary>) {
        if text.is_empty() {
            return;
        }
        let old_len = self.pending.len();
        self.pending.push_str(text);
        // Last whitespace char in the pending buffer; scanning only the new
        // text is enough because the old part had no whitespace past index 0.
        let cut = self.pending[old_len..]
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map(|(i, _)| old_len + i);
        if let Some(cut) = cut {
            if cut > 0 {
                self.flush_prefix(cut, out);
            }
        }
    }

    /// Reports every unit in `pending[..cut]` and drops that prefix.
    fn flush_prefix(&mut self, cut: usize, out: &mut Vec<UnitBoundary>) {
        let base = self.pending_start;
        let rule = self.rule;
        let reported = std::mem::take(&mut self.reported_in_pending);
        let mut seen = 0usize;
        let mut units = self.units;
        let mut unstable = self.unstable;
        for_each_unit(&self.pending[..cut], rule, |s, e| {
            if seen < reported.len() {
                let r = &reported[seen];
                if r.byte_offset_start != base + s || r.byte_offset_end != base + e {
                    unstable = true;
                }
                seen += 1;
                return;
            }
            units += 1;
            out.push(UnitBoundary {
                unit_index: units,
                byte_offset_start: base + s,
                byte_offset_end: base + e,
            });
        });
        if seen < reported.len() {
            unstable = true;
        }
        self.units = units;
        self.unstable = unstable;
        self.pending.drain(..cut);
        self.pending_start += cut;
    }

    /// Ends the stream, reporting trailing units.
    pub fn finalize(&mut self) -> Result<Vec<UnitBoundary>, SegmentError> {
        if !self.partial.is_empty() {
            return Err(SegmentError::TruncatedCharacter {
                pending: self.partial.len(),
            });
        }
        let mut out = Vec::new();
        let len = self.pending.len();
        if len > 0 {
            self.flush_prefix(len, &mut out);
        }
        Ok(out)
    }

    /// Rewinds the stream to `boundary`, given the full text consumed so far.
    ///
    /// Units after the boundary are forgotten; the unit count becomes
    /// `boundary.unit_index`. The tail after the last whitespace is retained
    /// so later text is segmented in the same context a batch pass would see.
    pub fn truncate(&mut self, text: &str, boundary: UnitBoundary) {
        let end = boundary.byte_offset_end;
        let head = &text[..end];
        let tail_start = head
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let tail = &head[tail_start..];
        let mut reported = Vec::new();
        for_each_unit(tail, self.rule, |s, e| {
            reported.push(UnitBoundary {
                unit_index: 0,
                byte_offset_start: tail_start + s,
                byte_offset_end: tail_start + e,
            })
        });
        let first = boundary.unit_index + 1 - reported.len().min(boundary.unit_index + 1);
        for (i, r) in reported.iter_mut().enumerate() {
            r.unit_index = first + i;
        }
        self.partial.clear();
        self.pending = tail.to_string();
        self.pending_start = tail_start;
        self.reported_in_pending = reported;
        self.units = boundary.unit_index;
        self.unstable = false;
    }
}
