mod common;

use lengthmark::probes::letter_transform;
use lengthmark::segmenter::{self, IncrementalSegmenter, SegmentationRule};
use proptest::prelude::*;

const PIECES: &[&str] = &[
    "a",
    "word",
    "Hello",
    "naïve",
    "don't",
    "state-of-the-art",
    "1,000",
    "3.14",
    "x1",
    ",",
    ".",
    "!",
    "?",
    "-",
    "'",
    "\"",
    "(",
    ")",
    "[",
    "]",
    "…",
    "—",
    "中",
    "文字",
    "日本語",
    "😀",
    "👍🏽",
    "e\u{301}",
    "ß",
    "Ω",
    "٣",
    "#",
    "##end",
];

fn token() -> impl Strategy<Value = String> {
    prop::sample::select(PIECES).prop_map(str::to_string)
}

fn spacing() -> impl Strategy<Value = &'static str> {
    prop::sample::select(&["", " ", " ", "  ", "\n", "\t", " \n "][..])
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec((token(), spacing()), 0..40)
        .prop_map(|parts| parts.into_iter().map(|(t, s)| format!("{t}{s}")).collect())
}

fn with_cuts() -> impl Strategy<Value = (String, Vec<usize>)> {
    text().prop_flat_map(|t| {
        let n = t.len();
        (Just(t), prop::collection::vec(0..=n, 0..10))
    })
}

fn rules() -> impl Strategy<Value = SegmentationRule> {
    prop_oneof![
        Just(SegmentationRule::words_and_symbols()),
        Just(SegmentationRule::whitespace_only()),
        Just(SegmentationRule::cjk_characters()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn incremental_equals_batch_for_any_chunking((t, mut cuts) in with_cuts(), rule in rules()) {
        cuts.push(t.len());
        cuts.sort_unstable();
        let mut seg = IncrementalSegmenter::new(rule);
        let mut got = Vec::new();
        let mut at = 0;
        for cut in cuts {
            got.extend(seg.feed(&t.as_bytes()[at..cut]).unwrap());
            at = cut;
        }
        got.extend(seg.finalize().unwrap());
        prop_assert_eq!(got, segmenter::boundaries(&t, rule));
    }

    #[test]
    fn batch_matches_oracle(t in text()) {
        let spans: Vec<(usize, usize)> = segmenter::boundaries(&t, SegmentationRule::default())
            .iter()
            .map(|b| (b.byte_offset_start, b.byte_offset_end))
            .collect();
        prop_assert_eq!(spans, common::unit_spans(&t));
    }

    #[test]
    fn counts_add_across_a_space(a in text(), b in text(), rule in rules()) {
        let joined = format!("{a} {b}");
        prop_assert_eq!(
            segmenter::count_units(&a, rule) + segmenter::count_units(&b, rule),
            segmenter::count_units(&joined, rule)
        );
    }

    #[test]
    fn letter_control_keeps_whitespace_token_count(t in text()) {
        let rule = SegmentationRule::whitespace_only();
        prop_assert_eq!(
            segmenter::count_units(&letter_transform(&t), rule),
            segmenter::count_units(&t, rule)
        );
    }
}
