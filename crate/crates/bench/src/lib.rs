//! Inputs shared by the benchmarks.

use emobench_core::metrics::ConfusionMatrix;
use emobench_core::normalize::ParseOutcome;
use emobench_core::taxonomy::{scheme_for, Emotion};

/// Replies in the shapes real models produce, for one six-class prompt each.
pub const REPLIES: &[&str] = &[
    "joy",
    "  \"Sadness.\"\n",
    "```json\n[{\"emotion\": \"anger\"}]\n```",
    "emotion: fear",
    "I think the key emotion here is surprise.",
    "{'emotion': 'love'}",
    "<|start_header_id|>assistant<|end_header_id|>joy<|eot_id|>",
    "happiness",
];

/// A six-class matrix with `n` samples spread over every cell.
pub fn busy_matrix(n: u64) -> ConfusionMatrix {
    let scheme = scheme_for(6).expect("six classes");
    let mut m = ConfusionMatrix::for_scheme(&scheme);
    for i in 0..n {
        let gold = Emotion::ALL[(i % 6) as usize];
        let pred = Emotion::ALL[((i * 7 + i / 6) % 6) as usize];
        m.accumulate(gold.name(), &ParseOutcome::parsed(pred.name(), ""))
            .expect("labels belong to the scheme");
    }
    m
}

/// `n` labelled sentences as CSV text with a header.
pub fn corpus_csv(n: usize) -> String {
    let mut out = String::from("text,label\n");
    for i in 0..n {
        out.push_str(&format!("benchmark sentence {i} about the day,{}\n", i % 6));
    }
    out
}
