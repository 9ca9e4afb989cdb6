//! Corpus-level caption metrics over token-id sequences: BLEU-4, ROUGE-L
//! and CIDEr.

use std::collections::HashMap;
use std::fmt;

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;
/// Recall weight in the ROUGE-L F-measure.
pub const ROUGE_BETA_SQ: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

/// A hypothesis and its one or more references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: Vec<u32>,
    pub references: Vec<Vec<u32>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<u32>, references: Vec<Vec<u32>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("an evaluation pair needs at least one reference"));
        }
        Ok(EvalPair {
            hypothesis,
            references,
        })
    }
}

fn check_corpus(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot score an empty corpus"));
    }
    if corpus.iter().any(|p| p.references.is_empty()) {
        return Err(Error::invalid("an evaluation pair needs at least one reference"));
    }
    Ok(())
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 without smoothing.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus before the geometric mean. The effective reference length of a
/// pair is the reference length closest to the hypothesis length, preferring
/// the shorter on ties. Any zero n-gram precision gives a score of zero.
pub fn bleu4(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for pair in corpus {
        let c = pair.hypothesis.len();
        hyp_len += c;
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("checked nonempty");

        for n in 1..=MAX_NGRAM {
            let hyp = ngram_counts(&pair.hypothesis, n);
            let mut max_ref: HashMap<&[u32], usize> = HashMap::new();
            for r in &pair.references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            matched[n - 1] += hyp
                .iter()
                .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += c.saturating_sub(n - 1);
        }
    }

    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_NGRAM as f64;
    let brevity = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * log_precision.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut diag = 0;
        for (j, &y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

fn rouge_l_pair(hyp: &[u32], reference: &[u32]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
}

/// Mean over pairs of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let sum: f64 = corpus
        .iter()
        .map(|pair| {
            pair.references
                .iter()
                .map(|r| rouge_l_pair(&pair.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / corpus.len() as f64)
}

/// Document frequencies of reference n-grams, for CIDEr's idf weights.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    n_docs: usize,
    df: HashMap<Vec<u32>, usize>,
    scale: f64,
}

impl CiderIdf {
    /// A document is one pair's reference set; an n-gram counts once per
    /// set no matter how many references contain it.
    pub fn from_corpus(corpus: &[EvalPair]) -> Self {
        let mut df: HashMap<Vec<u32>, usize> = HashMap::new();
        for pair in corpus {
            let mut seen: HashMap<&[u32], ()> = HashMap::new();
            for r in &pair.references {
                for n in 1..=MAX_NGRAM {
                    if r.len() >= n {
                        for g in r.windows(n) {
                            seen.insert(g, ());
                        }
                    }
                }
            }
            for g in seen.into_keys() {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        CiderIdf {
            n_docs: corpus.len(),
            df,
            scale: 1.0,
        }
    }

    /// Multiplies every weight by `scale`; cosine similarities are unchanged.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, gram: &[u32]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        self.scale * (self.n_docs as f64 / df as f64).ln()
    }

    fn vector<'a>(&self, tokens: &'a [u32], n: usize) -> HashMap<&'a [u32], f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, k)| (g, k as f64 * self.idf(g)))
            .collect()
    }

    /// CIDEr of one pair: cosine similarity of tf-idf vectors, averaged over
    /// references and over n = 1..4, times 10.
    pub fn score_pair(&self, pair: &EvalPair) -> f64 {
        let mut total = 0.0;
        for n in 1..=MAX_NGRAM {
            let hyp = self.vector(&pair.hypothesis, n);
            let sims: f64 = pair
                .references
                .iter()
                .map(|r| cosine(&hyp, &self.vector(r, n)))
                .sum();
            total += sims / pair.references.len() as f64;
        }
        CIDER_SCALE * total / MAX_NGRAM as f64
    }
}

fn cosine(a: &HashMap<&[u32], f64>, b: &HashMap<&[u32], f64>) -> f64 {
    let norm = |v: &HashMap<&[u32], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(g, x)| b.get(g).map(|y| x * y))
        .sum();
    // Rounding can push an identical-vector cosine a hair above one.
    (dot / (na * nb)).min(1.0)
}

/// Corpus CIDEr (no length penalty or count clipping), in `[0, 10]`.
pub fn cider(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let idf = CiderIdf::from_corpus(corpus);
    Ok(corpus.iter().map(|p| idf.score_pair(p)).sum::<f64>() / corpus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub pairs: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

pub fn evaluate(corpus: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        pairs: corpus.len(),
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
    })
}

impl MetricReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("pairs", self.pairs);
        kv.set("bleu4", format!("{:.6}", self.bleu4));
        kv.set("rouge_l", format!("{:.6}", self.rouge_l));
        kv.set("cider", format!("{:.6}", self.cider));
        kv
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>12}", "metric", "score")?;
        writeln!(f, "{:<10}{:>12}", "pairs", self.pairs)?;
        writeln!(f, "{:<10}{:>12.6}", "BLEU-4", self.bleu4)?;
        writeln!(f, "{:<10}{:>12.6}", "ROUGE-L", self.rouge_l)?;
        writeln!(f, "{:<10}{:>12.6}", "CIDEr", self.cider)
    }
}
