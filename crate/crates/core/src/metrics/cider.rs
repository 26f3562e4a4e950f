//! CIDEr without clipping: per-order TF-IDF cosine between candidate and
//! each reference, Gaussian length penalty (σ = 6), averaged over orders
//! 1..=4 and references, times 10. Document frequencies count images
//! whose reference set contains the n-gram.

use std::collections::{HashMap, HashSet};

use crate::synthworld::{Caption, TokenId};

pub const MAX_ORDER: usize = 4;
const SIGMA: f64 = 6.0;

type Gram = Vec<TokenId>;

fn counts(words: &[TokenId], n: usize) -> HashMap<Gram, f64> {
    let mut out: HashMap<Gram, f64> = HashMap::new();
    for w in words.windows(n) {
        *out.entry(w.to_vec()).or_default() += 1.0;
    }
    out
}

/// Document frequencies over an evaluation set's references.
#[derive(Clone, Debug, Default)]
pub struct CorpusStats {
    doc_freq: HashMap<Gram, f64>,
    log_docs: f64,
}

impl CorpusStats {
    /// One document per image: the union of that image's reference n-grams.
    pub fn from_references<'c, I>(reference_sets: I) -> Self
    where
        I: IntoIterator<Item = &'c [Caption]>,
    {
        let mut doc_freq: HashMap<Gram, f64> = HashMap::new();
        let mut docs = 0usize;
        for refs in reference_sets {
            docs += 1;
            let mut seen: HashSet<Gram> = HashSet::new();
            for r in refs {
                let words: Vec<TokenId> = r.words().collect();
                for n in 1..=MAX_ORDER {
                    seen.extend(words.windows(n).map(<[TokenId]>::to_vec));
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_default() += 1.0;
            }
        }
        Self {
            doc_freq,
            log_docs: (docs.max(1) as f64).ln(),
        }
    }

    pub fn num_grams(&self) -> usize {
        self.doc_freq.len()
    }

    fn idf(&self, gram: &Gram) -> f64 {
        self.log_docs - self.doc_freq.get(gram).copied().unwrap_or(0.0).max(1.0).ln()
    }

    fn tfidf(&self, words: &[TokenId], n: usize) -> (HashMap<Gram, f64>, f64) {
        let mut v = counts(words, n);
        for (g, c) in v.iter_mut() {
            *c *= self.idf(g);
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    }
}

pub fn cider(candidate: &Caption, references: &[Caption], stats: &CorpusStats) -> f64 {
    let cand: Vec<TokenId> = candidate.words().collect();
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let cand_vecs: Vec<_> = (1..=MAX_ORDER).map(|n| stats.tfidf(&cand, n)).collect();
    let mut total = 0.0;
    for r in references {
        let words: Vec<TokenId> = r.words().collect();
        let mut score = 0.0;
        for (n, (cv, cn)) in (1..=MAX_ORDER).zip(&cand_vecs) {
            let (rv, rn) = stats.tfidf(&words, n);
            if *cn > 0.0 && rn > 0.0 {
                let dot: f64 = cv.iter().filter_map(|(g, x)| rv.get(g).map(|y| x * y)).sum();
                score += dot / (cn * rn);
            }
        }
        score /= MAX_ORDER as f64;
        let delta = cand.len() as f64 - words.len() as f64;
        total += score * (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    }
    10.0 * total / references.len() as f64
}
