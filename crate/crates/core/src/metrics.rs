//! Evaluation metrics: exact-match accuracy (overall and per question
//! kind), corpus-level BLEU-1..4, and corpus-averaged ROUGE-L.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::QuestionKind;
use crate::error::{Error, Result};

/// Floor applied to a zero numerator (or an empty n-gram denominator) so
/// higher-order BLEU stays finite on short or disjoint corpora. Whenever
/// the floor fires, [`BleuScore::smoothed`] is set.
pub const BLEU_EPSILON: f64 = 1e-9;

/// ROUGE-L recall weight: F = (1 + beta^2) P R / (R + beta^2 P).
pub const ROUGE_BETA: f64 = 1.2;

/// Collapses all whitespace runs to single spaces and trims the ends;
/// the string equality used by exact-match accuracy.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Keyed by [`QuestionKind::name`]; kinds absent from the corpus are
    /// absent here, never reported as zero.
    pub by_kind: BTreeMap<String, f64>,
}

pub fn answer_accuracy<S: AsRef<str>, T: AsRef<str>>(
    predictions: &[S],
    references: &[T],
    kinds: &[QuestionKind],
) -> Result<AccuracyReport> {
    if predictions.len() != references.len() || predictions.len() != kinds.len() {
        return Err(Error::Validation(format!(
            "{} predictions, {} references, {} kinds",
            predictions.len(),
            references.len(),
            kinds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("accuracy over an empty corpus".into()));
    }
    let mut hits = 0usize;
    let mut kind_hits: BTreeMap<QuestionKind, (usize, usize)> = BTreeMap::new();
    for ((p, r), k) in predictions.iter().zip(references).zip(kinds) {
        let hit = normalize(p.as_ref()) == normalize(r.as_ref());
        hits += hit as usize;
        let e = kind_hits.entry(*k).or_insert((0, 0));
        e.0 += hit as usize;
        e.1 += 1;
    }
    Ok(AccuracyReport {
        overall: hits as f64 / predictions.len() as f64,
        by_kind: kind_hits
            .into_iter()
            .map(|(k, (h, n))| (k.name().to_string(), h as f64 / n as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuScore {
    /// `scores[k]` is BLEU-(k+1): brevity penalty times the geometric
    /// mean of modified precisions of orders 1..=k+1.
    pub scores: Vec<f64>,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// True iff [`BLEU_EPSILON`] replaced any zero count.
    pub smoothed: bool,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> BTreeMap<&'a [&'a str], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per candidate: clipped n-gram matches
/// and candidate n-gram totals accumulate over the whole corpus before
/// the precision quotient, and the brevity penalty compares total
/// lengths (`exp(1 - r/c)` when the candidate side is shorter).
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[S],
    references: &[T],
    max_n: usize,
) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Validation("BLEU over an empty corpus".into()));
    }
    assert!((1..=4).contains(&max_n), "BLEU order must be in 1..=4");

    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        let cand: Vec<&str> = cand.as_ref().split_whitespace().collect();
        let refr: Vec<&str> = refr.as_ref().split_whitespace().collect();
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&refr, n);
            for (gram, count) in ngram_counts(&cand, n) {
                clipped[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if c_len == 0 {
        return Err(Error::Validation("every candidate is empty".into()));
    }

    let mut smoothed = false;
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 || clipped[i] == 0 {
                smoothed = true;
                BLEU_EPSILON
            } else {
                clipped[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let scores = (1..=max_n)
        .map(|k| {
            let log_mean = precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
            brevity_penalty * log_mean.exp()
        })
        .collect();
    Ok(BleuScore { scores, precisions, brevity_penalty, smoothed })
}

/// Length of the longest common subsequence.
pub fn lcs_len<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Mean per-pair ROUGE-L F-measure ([`ROUGE_BETA`]-weighted). Precision
/// divides by candidate length, recall by reference length; a pair where
/// either side is empty scores 0 unless both are empty (then 1).
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Validation("ROUGE-L over an empty corpus".into()));
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut total = 0.0;
    for (cand, refr) in candidates.iter().zip(references) {
        let cand: Vec<&str> = cand.as_ref().split_whitespace().collect();
        let refr: Vec<&str> = refr.as_ref().split_whitespace().collect();
        if cand.is_empty() && refr.is_empty() {
            total += 1.0;
            continue;
        }
        if cand.is_empty() || refr.is_empty() {
            continue;
        }
        let lcs = lcs_len(&cand, &refr) as f64;
        let p = lcs / cand.len() as f64;
        let r = lcs / refr.len() as f64;
        if p + r > 0.0 {
            total += (1.0 + b2) * p * r / (r + b2 * p);
        }
    }
    Ok(total / candidates.len() as f64)
}

/// One evaluation run over a split, as printed by the eval command. The
/// decoding strategy is deliberately not recorded: strategies that pick
/// the same outputs must produce byte-identical reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub instances: usize,
    pub accuracy: AccuracyReport,
    /// BLEU-1 through BLEU-4.
    pub bleu: Vec<f64>,
    pub bleu_smoothed: bool,
    pub rouge_l: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_exact_matches_after_normalization() {
        let preds = ["yes", "  no ", "cat", "dog"];
        let refs = ["yes", "no", "cat", "cat"];
        let kinds = [
            QuestionKind::FeatureDependent,
            QuestionKind::FeatureDependent,
            QuestionKind::GraphDependent,
            QuestionKind::GraphDependent,
        ];
        let report = answer_accuracy(&preds, &refs, &kinds).unwrap();
        assert!((report.overall - 0.75).abs() < 1e-12);
        assert!((report.by_kind["feature_dependent"] - 1.0).abs() < 1e-12);
        assert!((report.by_kind["graph_dependent"] - 0.5).abs() < 1e-12);
        assert!(!report.by_kind.contains_key("history_dependent"));
    }

    #[test]
    fn empty_corpus_is_an_error_everywhere() {
        let none: [&str; 0] = [];
        assert!(answer_accuracy(&none, &none, &[]).is_err());
        assert!(corpus_bleu(&none, &none, 4).is_err());
        assert!(rouge_l(&none, &none).is_err());
        assert!(corpus_bleu(&["a"], &none, 4).is_err(), "length mismatch");
    }

    #[test]
    fn self_bleu_is_one() {
        let texts = ["the cat sat on the mat", "a dog barked"];
        let score = corpus_bleu(&texts, &texts, 4).unwrap();
        for s in &score.scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(!score.smoothed);
        assert!((score.brevity_penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_corpora_score_epsilon_and_flag_smoothing() {
        let score = corpus_bleu(&["aa bb cc"], &["xx yy zz"], 4).unwrap();
        assert!(score.smoothed);
        for s in &score.scores {
            assert!(*s < 1e-6, "{s}");
        }
    }

    #[test]
    fn bleu1_brevity_hand_value() {
        // 3/3 unigrams match, candidate 3 tokens vs reference 4:
        // BLEU-1 = 1.0 * exp(1 - 4/3).
        let score = corpus_bleu(&["the cat sat"], &["the cat sat down"], 1).unwrap();
        let want = (1.0f64 - 4.0 / 3.0).exp();
        assert!((score.scores[0] - want).abs() < 1e-6);
        assert!((score.scores[0] - 0.716_531).abs() < 1e-6);
        assert!(!score.smoothed);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "the the the" against "the cat": one clipped match of 3 attempts.
        let score = corpus_bleu(&["the the the"], &["the cat"], 1).unwrap();
        assert!((score.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_is_invariant_to_pair_order() {
        let cands = ["the cat sat", "a dog ran home", "yes"];
        let refs = ["the cat sat down", "a dog ran", "no"];
        let fwd = corpus_bleu(&cands, &refs, 4).unwrap();
        let rev_c: Vec<&str> = cands.iter().rev().copied().collect();
        let rev_r: Vec<&str> = refs.iter().rev().copied().collect();
        let rev = corpus_bleu(&rev_c, &rev_r, 4).unwrap();
        assert_eq!(fwd.scores, rev.scores);

        let a = rouge_l(&cands, &refs).unwrap();
        let b = rouge_l(&rev_c, &rev_r).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn lcs_hand_values() {
        assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "d"]), 3);
        assert_eq!(lcs_len(&["a", "b"], &["c", "d"]), 0);
        assert_eq!(lcs_len::<&str>(&[], &["a"]), 0);
    }

    #[test]
    fn rouge_l_identity_and_disjoint() {
        let texts = ["the cat sat", "a dog"];
        assert!((rouge_l(&texts, &texts).unwrap() - 1.0).abs() < 1e-12);
        assert!(rouge_l(&["aa bb"], &["cc dd"]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rouge_l_hand_value() {
        // Candidate "a c d" vs reference "a b c d": LCS 3, P = 3/3,
        // R = 3/4, F = (1 + 1.44) P R / (R + 1.44 P).
        let got = rouge_l(&["a c d"], &["a b c d"]).unwrap();
        let (p, r) = (1.0, 0.75);
        let want = (1.0 + 1.44) * p * r / (r + 1.44 * p);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn rouge_l_averages_over_pairs() {
        let half = rouge_l(&["a b", "x"], &["a b", "y"]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }
}
