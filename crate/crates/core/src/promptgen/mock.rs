//! Offline stand-in for the LLM. Output is a pure function of the request and
//! carries the retrieved sentiment as words the text encoder can pick up.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::{fmt2, PromptRequest};
use crate::text::tokenize;

const STOPWORDS: &[&str] = &[
    "a", "about", "again", "ago", "also", "am", "an", "and", "are", "as", "at", "be", "been", "but",
    "by", "comes", "days", "do", "end", "few", "for", "from", "guess", "has", "have", "how", "i",
    "in", "is", "it", "its", "keep", "lately", "main", "me", "more", "most", "my", "of", "on", "or",
    "so", "than", "that", "the", "then", "there", "these", "thing", "this", "to", "too", "up", "was",
    "we", "were", "what", "when", "with", "you",
];

fn is_stopword(t: &str) -> bool {
    STOPWORDS.binary_search(&t).is_ok()
}

/// Up to three content tokens: most frequent first, then longest, then
/// alphabetical.
fn salient_tokens(text: &str) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in tokenize(text) {
        if t.chars().count() >= 3 && !is_stopword(&t) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.len().cmp(&a.0.len())).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(3).map(|(t, _)| t).collect()
}

fn tone(mean: f64) -> &'static str {
    match mean {
        m if m <= -1.5 => "bleak",
        m if m <= -0.5 => "gloomy",
        m if m < 0.5 => "mixed",
        m if m < 1.5 => "upbeat",
        _ => "bright",
    }
}

fn sign_word(s: f64) -> &'static str {
    if s > 0.0 {
        "positive"
    } else if s < 0.0 {
        "negative"
    } else {
        "neutral"
    }
}

fn join_words(words: &[String]) -> String {
    match words {
        [] => "nothing in particular".to_owned(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

pub fn mock_complete(request: &PromptRequest) -> String {
    let salient = salient_tokens(&request.original_text);
    let n = request.retrieved.len().max(1) as f64;
    let mean = request.retrieved.iter().map(|r| r.sentiment).sum::<f64>() / n;
    let own: BTreeSet<String> = tokenize(&request.original_text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect();

    let mut out = String::new();
    let _ = writeln!(
        out,
        "Q1: How low is the speaker's mood, and is it tied to {}?",
        join_words(&salient)
    );
    let _ = writeln!(
        out,
        "A1: The related texts average a sentiment of {}, a {} tone, which suggests the speaker's mood around these topics is {} as well.",
        fmt2(mean),
        tone(mean),
        tone(mean)
    );
    let _ = writeln!(out, "Q2: What do the related texts share with the transcript, and how does their sentiment differ?");
    out.push_str("A2:");
    for (i, r) in request.retrieved.iter().enumerate() {
        let shared: Vec<String> = tokenize(&r.text)
            .into_iter()
            .filter(|t| own.contains(t))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let _ = write!(
            out,
            " [{}] shares {} and is {} ({}).",
            i + 1,
            join_words(&shared),
            sign_word(r.sentiment),
            fmt2(r.sentiment)
        );
    }
    out.push('\n');
    out
}
