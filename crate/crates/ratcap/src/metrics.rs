//! Caption evaluation: BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! All scorers are pure functions over normalized whitespace tokens
//! (lowercase, punctuation stripped). CIDEr-D follows the COCO toolkit
//! variant: clipped TF-IDF n-gram cosine with a Gaussian length penalty.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;
pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no references provided")]
    NoReferences,
    #[error("empty prediction set")]
    EmptyPredictions,
    #[error("prediction/reference image ids differ; missing from predictions: {missing_predictions:?}, missing from references: {missing_references:?}")]
    KeyMismatch {
        missing_predictions: Vec<String>,
        missing_references: Vec<String>,
    },
}

/// Lowercased, punctuation-stripped whitespace tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            for lc in c.to_lowercase() {
                cleaned.push(lc);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

type Ngram = Vec<String>;

/// N-gram multiset for n = 1..=4 of one caption.
#[derive(Debug, Clone, Default)]
pub struct NgramStats {
    counts: [BTreeMap<Ngram, f64>; MAX_NGRAM],
    pub token_len: usize,
}

impl NgramStats {
    pub fn from_text(text: &str) -> NgramStats {
        let tokens = metric_tokens(text);
        let mut stats = NgramStats {
            token_len: tokens.len(),
            ..Default::default()
        };
        for n in 1..=MAX_NGRAM {
            let map = &mut stats.counts[n - 1];
            if tokens.len() < n {
                continue;
            }
            for window in tokens.windows(n) {
                *map.entry(window.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        stats
    }

    fn grams(&self, n: usize) -> &BTreeMap<Ngram, f64> {
        &self.counts[n - 1]
    }
}

/// Document frequencies of n-grams over a reference corpus; one image with
/// any number of captions counts as one document.
#[derive(Debug, Clone)]
pub struct IdfTable {
    df: BTreeMap<Ngram, f64>,
    pub n_docs: usize,
}

impl IdfTable {
    pub fn from_references<S: AsRef<str>>(refs_by_image: &BTreeMap<String, Vec<S>>) -> IdfTable {
        let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
        for refs in refs_by_image.values() {
            let mut seen: BTreeMap<Ngram, ()> = BTreeMap::new();
            for r in refs {
                let stats = NgramStats::from_text(r.as_ref());
                for n in 1..=MAX_NGRAM {
                    for gram in stats.grams(n).keys() {
                        seen.insert(gram.clone(), ());
                    }
                }
            }
            for (gram, _) in seen {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        IdfTable {
            df,
            n_docs: refs_by_image.len(),
        }
    }

    /// A single-document corpus gives idf = 0 everywhere, so CIDEr collapses.
    pub fn is_degenerate(&self) -> bool {
        self.n_docs < 2
    }

    fn weight(&self, gram: &Ngram) -> f64 {
        (self.n_docs as f64).ln() - self.df.get(gram).copied().unwrap_or(0.0).max(1.0).ln()
    }
}

// ── BLEU ─────────────────────────────────────────────────────────────

/// Sentence BLEU-1..max_n: clipped modified precision, geometric mean,
/// brevity penalty from the closest reference length.
pub fn bleu<S: AsRef<str>>(candidate: &str, references: &[S], max_n: usize) -> Vec<f64> {
    let cand = NgramStats::from_text(candidate);
    let refs: Vec<NgramStats> = references
        .iter()
        .map(|r| NgramStats::from_text(r.as_ref()))
        .collect();
    if cand.token_len == 0 || refs.is_empty() {
        return vec![0.0; max_n];
    }
    let mut clipped = vec![0.0; max_n];
    let mut totals = vec![0.0; max_n];
    accumulate_bleu_counts(&cand, &refs, &mut clipped, &mut totals);
    let c_len = cand.token_len as f64;
    let r_len = closest_ref_len(cand.token_len, &refs) as f64;
    bleu_from_counts(&clipped, &totals, c_len, r_len, max_n)
}

fn accumulate_bleu_counts(
    cand: &NgramStats,
    refs: &[NgramStats],
    clipped: &mut [f64],
    totals: &mut [f64],
) {
    for n in 1..=clipped.len() {
        for (gram, &count) in cand.grams(n) {
            let best_ref = refs
                .iter()
                .map(|r| r.grams(n).get(gram).copied().unwrap_or(0.0))
                .fold(0.0, f64::max);
            clipped[n - 1] += count.min(best_ref);
            totals[n - 1] += count;
        }
    }
}

fn closest_ref_len(cand_len: usize, refs: &[NgramStats]) -> usize {
    refs.iter()
        .map(|r| r.token_len)
        .min_by_key(|&l| {
            let diff = (l as i64 - cand_len as i64).abs();
            (diff, l)
        })
        .unwrap_or(0)
}

fn bleu_from_counts(
    clipped: &[f64],
    totals: &[f64],
    c_len: f64,
    r_len: f64,
    max_n: usize,
) -> Vec<f64> {
    let bp = if c_len > r_len {
        1.0
    } else if c_len > 0.0 {
        (1.0 - r_len / c_len).exp()
    } else {
        0.0
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] > 0.0 {
                clipped[i] / totals[i]
            } else {
                0.0
            }
        })
        .collect();
    (1..=max_n)
        .map(|k| {
            if precisions[..k].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let mean_log: f64 =
                    precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
                bp * mean_log.exp()
            }
        })
        .collect()
}

// ── ROUGE-L ──────────────────────────────────────────────────────────

/// LCS F-measure with beta = 1.2; precision and recall are each maximized
/// over references before combining (COCO toolkit convention).
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> f64 {
    let c = metric_tokens(candidate);
    if c.is_empty() {
        return 0.0;
    }
    let mut best_p: f64 = 0.0;
    let mut best_r: f64 = 0.0;
    let mut any = false;
    for r in references {
        let r = metric_tokens(r.as_ref());
        if r.is_empty() {
            continue;
        }
        any = true;
        let l = lcs_len(&c, &r) as f64;
        best_p = best_p.max(l / c.len() as f64);
        best_r = best_r.max(l / r.len() as f64);
    }
    if !any || best_p + best_r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

// ── CIDEr-D ──────────────────────────────────────────────────────────

/// CIDEr-D in [0, 10]: clipped TF-IDF cosine per n, Gaussian length penalty,
/// averaged over n and references, times ten.
pub fn cider_d<S: AsRef<str>>(candidate: &str, references: &[S], idf: &IdfTable) -> f64 {
    if references.is_empty() || idf.is_degenerate() {
        return 0.0;
    }
    let cand = NgramStats::from_text(candidate);
    let (cand_vec, cand_norm) = tfidf_vectors(&cand, idf);
    let mut per_n = [0.0; MAX_NGRAM];
    for r in references {
        let rf = NgramStats::from_text(r.as_ref());
        let (ref_vec, ref_norm) = tfidf_vectors(&rf, idf);
        let delta = cand.token_len as f64 - rf.token_len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..MAX_NGRAM {
            let mut val = 0.0;
            for (gram, &x) in &cand_vec[n] {
                let y = ref_vec[n].get(gram).copied().unwrap_or(0.0);
                val += x.min(y) * y;
            }
            if cand_norm[n] != 0.0 && ref_norm[n] != 0.0 {
                val /= cand_norm[n] * ref_norm[n];
            }
            per_n[n] += val * penalty;
        }
    }
    let n_refs = references.len() as f64;
    10.0 * per_n.iter().map(|s| s / n_refs).sum::<f64>() / MAX_NGRAM as f64
}

#[allow(clippy::type_complexity)]
fn tfidf_vectors(
    stats: &NgramStats,
    idf: &IdfTable,
) -> ([BTreeMap<Ngram, f64>; MAX_NGRAM], [f64; MAX_NGRAM]) {
    let mut vecs: [BTreeMap<Ngram, f64>; MAX_NGRAM] = Default::default();
    let mut norms = [0.0; MAX_NGRAM];
    for n in 1..=MAX_NGRAM {
        let mut sq = 0.0;
        for (gram, &count) in stats.grams(n) {
            let w = count * idf.weight(gram);
            sq += w * w;
            vecs[n - 1].insert(gram.clone(), w);
        }
        norms[n - 1] = sq.sqrt();
    }
    (vecs, norms)
}

// ── Corpus evaluation ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Corpus-level BLEU-1..4 from pooled n-gram counts.
    pub bleu: Vec<f64>,
    /// Mean sentence ROUGE-L.
    pub rouge_l: f64,
    /// Mean CIDEr-D with idf from this reference corpus.
    pub cider_d: f64,
    pub images: usize,
    pub config: MetricConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricConfig {
    pub tokenization: String,
    pub cider_sigma: f64,
    pub rouge_beta: f64,
    pub idf_degenerate: bool,
}

pub fn corpus_eval(
    predictions: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<MetricReport, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::EmptyPredictions);
    }
    let missing_predictions: Vec<String> = references
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .cloned()
        .collect();
    let missing_references: Vec<String> = predictions
        .keys()
        .filter(|k| !references.contains_key(*k))
        .cloned()
        .collect();
    if !missing_predictions.is_empty() || !missing_references.is_empty() {
        return Err(MetricsError::KeyMismatch {
            missing_predictions,
            missing_references,
        });
    }

    let idf = IdfTable::from_references(references);
    let mut clipped = vec![0.0; MAX_NGRAM];
    let mut totals = vec![0.0; MAX_NGRAM];
    let mut c_len = 0.0;
    let mut r_len = 0.0;
    let mut rouge_sum = 0.0;
    let mut cider_sum = 0.0;
    for (id, pred) in predictions {
        let refs = &references[id];
        let cand = NgramStats::from_text(pred);
        let ref_stats: Vec<NgramStats> = refs
            .iter()
            .map(|r| NgramStats::from_text(r))
            .collect();
        accumulate_bleu_counts(&cand, &ref_stats, &mut clipped, &mut totals);
        c_len += cand.token_len as f64;
        r_len += closest_ref_len(cand.token_len, &ref_stats) as f64;
        rouge_sum += rouge_l(pred, refs);
        cider_sum += cider_d(pred, refs, &idf);
    }
    let n = predictions.len() as f64;
    Ok(MetricReport {
        bleu: bleu_from_counts(&clipped, &totals, c_len, r_len, MAX_NGRAM),
        rouge_l: rouge_sum / n,
        cider_d: cider_sum / n,
        images: predictions.len(),
        config: MetricConfig {
            tokenization: "lowercase, punctuation stripped, whitespace split".into(),
            cider_sigma: CIDER_SIGMA,
            rouge_beta: ROUGE_BETA,
            idf_degenerate: idf.is_degenerate(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed reference corpus shared by the frozen cases below.
    fn reference_corpus() -> BTreeMap<String, Vec<String>> {
        let raw: &[(&str, &[&str])] = &[
            ("img0", &["a red ball on the table", "the red ball sits on a table"]),
            ("img1", &["two green cubes stacked together", "a pair of green cubes"]),
            ("img2", &["a blue box near the wall", "the blue box stands by a wall"]),
            ("img3", &["a small dog running in the park", "the dog runs across the park"]),
            ("img4", &["a man riding a bicycle down the street", "a cyclist on a city street"]),
            ("img5", &["a cat sleeping on a warm windowsill", "the cat naps by the window"]),
            ("img6", &["three birds flying over the lake", "birds fly above a calm lake"]),
            ("img7", &["an old clock on the wooden shelf", "a clock sits on the shelf"]),
        ];
        raw.iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    /// Expected values computed once with an independent Python
    /// implementation of the published formulas.
    const FROZEN: &[(&str, &str, [f64; 4], f64, f64)] = &[
        ("img0", "a red ball on the table", [1.0, 1.0, 1.0, 1.0], 1.0, 6.4239143934),
        ("img0", "the red ball on a table", [1.0, 1.0, 0.9085602964, 0.0], 0.9104477612, 4.7390265649),
        ("img0", "a blue ball under the table", [0.6666666667, 0.3651483717, 0.0, 0.0], 0.6666666667, 1.6288741928),
        ("img1", "two green cubes stacked together", [1.0, 1.0, 1.0, 1.0], 1.0, 5.8715169944),
        ("img1", "green cubes", [0.2231301601, 0.2231301601, 0.0, 0.0], 0.5304347826, 2.5808206185),
        ("img2", "a blue box near the wall", [1.0, 1.0, 1.0, 1.0], 1.0, 6.1025395627),
        ("img2", "the wall near a blue box", [1.0, 0.7745966692, 0.5313292846, 0.0], 0.5, 3.4150395627),
        ("img3", "a small dog running in the park", [1.0, 1.0, 1.0, 1.0], 1.0, 5.7772843335),
        ("img3", "a dog in the park", [0.8187307531, 0.5789300675, 0.4505648972, 0.0], 0.8090185676, 2.6925761237),
        ("img4", "a man riding a bicycle", [0.8187307531, 0.8187307531, 0.8187307531, 0.8187307531], 0.7384987893, 3.1657025033),
        ("img5", "a cat sleeping on a windowsill", [1.0, 0.8944271910, 0.8434326653, 0.7952707288], 0.9104477612, 3.8379841125),
        ("img6", "three birds flying over the lake", [1.0, 1.0, 1.0, 1.0], 1.0, 5.4997939490),
        ("img7", "a very old clock on a very old wooden shelf indeed", [0.5454545455, 0.4045199175, 0.2629535894, 0.0], 0.5787476281, 1.3465880968),
        ("img0", "the the the the", [0.1516326649, 0.0, 0.0, 0.0], 0.1930379747, 0.0201413849),
    ];

    #[test]
    fn frozen_bleu_cases() {
        let refs = reference_corpus();
        for (img, cand, expected, _, _) in FROZEN {
            let got = bleu(cand, &refs[*img], 4);
            for (n, (g, e)) in got.iter().zip(expected).enumerate() {
                assert!(
                    (g - e).abs() <= 1e-6,
                    "BLEU-{} for {cand:?}: {g} vs {e}",
                    n + 1
                );
            }
        }
    }

    #[test]
    fn frozen_rouge_cases() {
        let refs = reference_corpus();
        for (img, cand, _, expected, _) in FROZEN {
            let got = rouge_l(cand, &refs[*img]);
            assert!((got - expected).abs() <= 1e-6, "{cand:?}: {got} vs {expected}");
        }
    }

    #[test]
    fn frozen_cider_cases() {
        let refs = reference_corpus();
        let idf = IdfTable::from_references(&refs);
        for (img, cand, _, _, expected) in FROZEN {
            let got = cider_d(cand, &refs[*img], &idf);
            assert!((got - expected).abs() <= 1e-4, "{cand:?}: {got} vs {expected}");
        }
    }

    #[test]
    fn bleu_identity_is_one() {
        let refs = ["a small dog running in the park".to_string()];
        let scores = bleu("a small dog running in the park", &refs, 4);
        assert_eq!(scores, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn bleu_repeated_token_clipping() {
        let scores = bleu("the the the the", &["the cat".to_string()], 4);
        assert_eq!(scores[0], 0.25);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu("", &["anything".to_string()], 4), vec![0.0; 4]);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l("a b c", &["a b c".to_string()]), 1.0);
        assert_eq!(rouge_l("a b c", &["x y z".to_string()]), 0.0);
        assert_eq!(rouge_l("", &["a b".to_string()]), 0.0);
    }

    #[test]
    fn rouge_matches_brute_force_lcs() {
        // Independent recursive-memo LCS instead of the rolling DP.
        fn lcs_rec(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<i64>>) -> usize {
            if i == 0 || j == 0 {
                return 0;
            }
            if memo[i][j] >= 0 {
                return memo[i][j] as usize;
            }
            let v = if a[i - 1] == b[j - 1] {
                lcs_rec(a, b, i - 1, j - 1, memo) + 1
            } else {
                lcs_rec(a, b, i - 1, j, memo).max(lcs_rec(a, b, i, j - 1, memo))
            };
            memo[i][j] = v as i64;
            v
        }
        let pairs = [
            ("a red ball on the table", "the red ball sits on a table"),
            ("the wall near a blue box", "a blue box near the wall"),
            ("x y z", "z y x"),
            ("a a b a", "a b a a"),
        ];
        for (c, r) in pairs {
            let (ct, rt) = (metric_tokens(c), metric_tokens(r));
            let mut memo = vec![vec![-1i64; rt.len() + 1]; ct.len() + 1];
            let expect = lcs_rec(&ct, &rt, ct.len(), rt.len(), &mut memo);
            assert_eq!(lcs_len(&ct, &rt), expect, "LCS of {c:?} vs {r:?}");
        }
    }

    #[test]
    fn cider_identity_with_sole_reference_scores_ten() {
        let mut refs = reference_corpus();
        refs.insert("solo".into(), vec!["a lonely lighthouse guards the rocky shore".into()]);
        let idf = IdfTable::from_references(&refs);
        let got = cider_d("a lonely lighthouse guards the rocky shore", &refs["solo"], &idf);
        assert!((got - 10.0).abs() <= 1e-9, "got {got}");
    }

    #[test]
    fn cider_single_document_corpus_is_zero() {
        let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        refs.insert("only".into(), vec!["a red ball".into()]);
        let idf = IdfTable::from_references(&refs);
        assert!(idf.is_degenerate());
        assert_eq!(cider_d("a red ball", &refs["only"], &idf), 0.0);
    }

    #[test]
    fn scores_invariant_to_reference_order() {
        let refs = reference_corpus();
        let idf = IdfTable::from_references(&refs);
        let cand = "a dog in the park";
        let fwd = &refs["img3"];
        let mut rev = fwd.clone();
        rev.reverse();
        assert_eq!(bleu(cand, fwd, 4), bleu(cand, &rev, 4));
        assert_eq!(rouge_l(cand, fwd), rouge_l(cand, &rev));
        assert_eq!(cider_d(cand, fwd, &idf), cider_d(cand, &rev, &idf));
    }

    #[test]
    fn idf_invariant_to_corpus_insertion_order() {
        let refs = reference_corpus();
        let mut reversed: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (k, v) in refs.iter().rev() {
            reversed.insert(k.clone(), v.clone());
        }
        let a = IdfTable::from_references(&refs);
        let b = IdfTable::from_references(&reversed);
        let cand = "a red ball on the table";
        assert_eq!(cider_d(cand, &refs["img0"], &a), cider_d(cand, &refs["img0"], &b));
    }

    #[test]
    fn corpus_eval_identity_predictions() {
        let refs = reference_corpus();
        let preds: BTreeMap<String, String> = refs
            .iter()
            .map(|(k, v)| (k.clone(), v[0].clone()))
            .collect();
        let report = corpus_eval(&preds, &refs).unwrap();
        assert_eq!(report.bleu[3], 1.0);
        assert!(report.rouge_l > 0.999);
        assert!(report.cider_d > 1.0);
    }

    #[test]
    fn corpus_eval_rejects_empty_and_mismatched() {
        let refs = reference_corpus();
        let empty: BTreeMap<String, String> = BTreeMap::new();
        assert!(matches!(
            corpus_eval(&empty, &refs),
            Err(MetricsError::EmptyPredictions)
        ));
        let mut preds: BTreeMap<String, String> = BTreeMap::new();
        preds.insert("img0".into(), "a red ball".into());
        preds.insert("ghost".into(), "not in refs".into());
        match corpus_eval(&preds, &refs) {
            Err(MetricsError::KeyMismatch {
                missing_predictions,
                missing_references,
            }) => {
                assert!(missing_predictions.contains(&"img1".to_string()));
                assert_eq!(missing_references, vec!["ghost".to_string()]);
            }
            other => panic!("expected key mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corpus_eval_matches_per_item_recomputation() {
        let refs = reference_corpus();
        let preds: BTreeMap<String, String> = [
            ("img0", "the red ball on a table"),
            ("img1", "green cubes"),
            ("img2", "a blue box near the wall"),
            ("img3", "a dog in the park"),
            ("img4", "a man riding a bicycle"),
            ("img5", "a cat sleeping on a windowsill"),
            ("img6", "three birds flying over the lake"),
            ("img7", "a clock on the shelf"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let report = corpus_eval(&preds, &refs).unwrap();

        // Recompute the means from scratch per item.
        let idf = IdfTable::from_references(&refs);
        let mut rouge_sum = 0.0;
        let mut cider_sum = 0.0;
        for (id, p) in &preds {
            rouge_sum += rouge_l(p, &refs[id]);
            cider_sum += cider_d(p, &refs[id], &idf);
        }
        let n = preds.len() as f64;
        assert_eq!(report.rouge_l, rouge_sum / n);
        assert_eq!(report.cider_d, cider_sum / n);
        assert!(report.bleu[0] > 0.0 && report.bleu[0] <= 1.0);
    }
}
