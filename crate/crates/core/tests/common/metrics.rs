use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn count(tokens: &[u8], gram: &[u8]) -> usize {
    (0..tokens.len().saturating_sub(gram.len() - 1))
        .filter(|&i| tokens[i..].starts_with(gram))
        .count()
}

pub fn grams(tokens: &[u8], n: usize) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    for i in 0..tokens.len().saturating_sub(n - 1) {
        let g = tokens[i..i + n].to_vec();
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

pub fn oracle_bleu(c: &[u8], refs: &[Vec<u8>], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let total = c.len().saturating_sub(k - 1);
        let matched: usize = grams(c, k)
            .iter()
            .map(|g| count(c, g).min(refs.iter().map(|r| count(r, g)).max().unwrap()))
            .sum();
        if matched == 0 || total == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln() / n as f64;
    }
    let mut r = refs[0].len();
    for x in refs {
        let (d, e) = (x.len().abs_diff(c.len()), r.abs_diff(c.len()));
        if d < e || (d == e && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c.len() >= r {
        1.0
    } else {
        (1.0 - r as f64 / c.len() as f64).exp()
    };
    bp * log_p.exp()
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_sub = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            is_sub(&s).then_some(s.len())
        })
        .max()
        .unwrap()
}

pub fn oracle_rouge(c: &[u8], refs: &[Vec<u8>]) -> f64 {
    refs.iter()
        .map(|r| {
            let l = brute_lcs(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            (1.0 + 1.2) * p * rec / (rec + 1.2 * p)
        })
        .fold(0.0, f64::max)
}

/// CIDEr-D written directly from its definition with hash maps.
pub fn oracle_cider(corpus: &[Vec<Vec<u8>>], c: &[u8], refs: &[Vec<u8>]) -> f64 {
    let docs = corpus.len() as f64;
    let df = |g: &Vec<u8>| {
        corpus
            .iter()
            .filter(|refs| refs.iter().any(|r| count(r, g) > 0))
            .count() as f64
    };
    let vec = |s: &[u8], n: usize| -> HashMap<Vec<u8>, f64> {
        grams(s, n)
            .into_iter()
            .map(|g| {
                let w = count(s, &g) as f64 * (docs.ln() - df(&g).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    let mut total = 0.0;
    for r in refs {
        let delta = c.len() as f64 - r.len() as f64;
        let pen = (-delta * delta / 72.0).exp();
        for n in 1..=4 {
            let (vc, vr) = (vec(c, n), vec(r, n));
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, &x)| vr.get(g).map(|&y| x.min(y) * y))
                .sum();
            let nc: f64 = vc.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr: f64 = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            let sim = if nc * nr == 0.0 { dot } else { dot / (nc * nr) };
            total += sim * pen;
        }
    }
    10.0 * total / 4.0 / refs.len() as f64
}

pub fn sentence(rng: &mut ChaCha8Rng, vocab: u8) -> Vec<u8> {
    let n = rng.random_range(1..=8);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn cases(seed: u64) -> (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<Vec<Vec<u8>>> = (0..20)
        .map(|_| {
            (0..rng.random_range(1..=3))
                .map(|_| sentence(&mut rng, 5))
                .collect()
        })
        .collect();
    let cands = (0..20).map(|_| sentence(&mut rng, 5)).collect();
    (cands, refs)
}
