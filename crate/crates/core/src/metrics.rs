//! Caption metrics over token sequences: BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! Counting uses ordered maps so that every floating-point sum is taken in
//! the same order on every run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub type Counts<T> = BTreeMap<Vec<T>, usize>;

pub fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> Counts<T> {
    let mut c = Counts::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    c
}

/// Clipped matches and candidate total for order `n`.
fn clipped<T: Ord + Clone, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: Counts<T> = Counts::new();
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<T, R: AsRef<[T]>>(c: usize, references: &[R]) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn geometric_bleu(matches: &[usize], totals: &[usize], bp: f64) -> f64 {
    if matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_mean = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / matches.len() as f64;
    bp * log_mean.exp()
}

/// Sentence BLEU-`n` without smoothing.
pub fn bleu<T: Ord + Clone, R: AsRef<[T]>>(candidate: &[T], references: &[R], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (m, t): (Vec<usize>, Vec<usize>) =
        (1..=n).map(|k| clipped(candidate, references, k)).unzip();
    let bp = brevity_penalty(
        candidate.len(),
        closest_ref_len(candidate.len(), references),
    );
    geometric_bleu(&m, &t, bp)
}

/// Corpus BLEU-1..4: clipped counts and lengths pooled over the corpus.
pub fn corpus_bleu<T: Ord + Clone, R: AsRef<[T]>>(
    candidates: &[Vec<T>],
    references: &[Vec<R>],
) -> [f64; 4] {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        for k in 0..4 {
            let (a, b) = clipped(cand, refs, k + 1);
            m[k] += a;
            t[k] += b;
        }
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
    }
    let bp = brevity_penalty(c_len, r_len);
    std::array::from_fn(|n| geometric_bleu(&m[..=n], &t[..=n], bp))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA2: f64 = 1.2;

/// LCS F-measure, best over references.
pub fn rouge_l<T: PartialEq, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + ROUGE_BETA2) * p * rec / (rec + ROUGE_BETA2 * p)
        })
        .fold(0.0, f64::max)
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<T> {
    vecs: [BTreeMap<Vec<T>, f64>; 4],
    norms: [f64; 4],
    len: usize,
}

/// CIDEr-D with document frequencies from a fixed reference corpus.
#[derive(Clone, Debug)]
pub struct CiderD<T: Ord> {
    df: BTreeMap<Vec<T>, f64>,
    log_docs: f64,
}

impl<T: Ord + Clone> CiderD<T> {
    /// `corpus[i]` holds the references of image `i`.
    pub fn new<R: AsRef<[T]>>(corpus: &[Vec<R>]) -> Self {
        let mut df: BTreeMap<Vec<T>, f64> = BTreeMap::new();
        for refs in corpus {
            let mut seen: BTreeSet<Vec<T>> = BTreeSet::new();
            for r in refs {
                for n in 1..=4 {
                    seen.extend(ngram_counts(r.as_ref(), n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        if corpus.len() < 2 {
            log::warn!(
                "CIDEr-D document frequencies from {} document(s): every IDF is zero",
                corpus.len()
            );
        }
        CiderD {
            df,
            log_docs: (corpus.len().max(1) as f64).ln(),
        }
    }

    fn tfidf(&self, tokens: &[T]) -> TfIdf<T> {
        let mut vecs: [BTreeMap<Vec<T>, f64>; 4] = Default::default();
        let mut norms = [0.0; 4];
        for n in 1..=4 {
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let v = tf as f64 * (self.log_docs - df.ln());
                norms[n - 1] += v * v;
                vecs[n - 1].insert(g, v);
            }
        }
        TfIdf {
            vecs,
            norms,
            len: tokens.len(),
        }
    }

    fn similarity(hyp: &TfIdf<T>, reference: &TfIdf<T>) -> [f64; 4] {
        let delta = hyp.len as f64 - reference.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        std::array::from_fn(|n| {
            let mut val = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&r) = reference.vecs[n].get(g) {
                    val += h.min(r) * r;
                }
            }
            // `sqrt(a·b)` rather than `sqrt(a)·sqrt(b)`: equal norms then
            // cancel exactly.
            let denom = (hyp.norms[n] * reference.norms[n]).sqrt();
            if denom != 0.0 {
                val /= denom;
            }
            val * penalty
        })
    }

    /// Score of one candidate against its image's references.
    pub fn score<R: AsRef<[T]>>(&self, candidate: &[T], references: &[R]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.tfidf(candidate);
        let mut total = [0.0; 4];
        for r in references {
            let s = Self::similarity(&hyp, &self.tfidf(r.as_ref()));
            for n in 0..4 {
                total[n] += s[n];
            }
        }
        total.iter().sum::<f64>() / 4.0 / references.len() as f64 * 10.0
    }

    /// Mean and per-sentence scores.
    pub fn corpus<R: AsRef<[T]>>(
        &self,
        candidates: &[Vec<T>],
        references: &[Vec<R>],
    ) -> (f64, Vec<f64>) {
        let per: Vec<f64> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| self.score(c, r))
            .collect();
        let mean = if per.is_empty() {
            0.0
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        };
        (mean, per)
    }
}

/// Scores written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub n: usize,
}

/// Corpus BLEU, mean sentence ROUGE-L and CIDEr-D with document
/// frequencies from `references`.
pub fn evaluate<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> EvalReport {
    let b = corpus_bleu(candidates, references);
    let n = candidates.len();
    let rouge = if n == 0 {
        0.0
    } else {
        candidates
            .iter()
            .zip(references)
            .map(|(c, r)| rouge_l(c, r))
            .sum::<f64>()
            / n as f64
    };
    let (cider, _) = CiderD::new(references).corpus(candidates, references);
    EvalReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge,
        cider_d: cider,
        n,
    }
}
