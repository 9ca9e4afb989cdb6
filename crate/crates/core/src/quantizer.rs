//! K-means codebook learning and nearest-centroid assignment.
//!
//! This is the speech-unit extractor: frames are assigned to their nearest
//! centroid and runs of repeated ids are collapsed. The image tokenizer in
//! [`crate::image_units`] reuses the same machinery on patch vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{squared_distance, Codebook};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::units::{dedup, UnitSequence};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Speech vocabulary size used at full scale.
pub const DEFAULT_SPEECH_UNITS: usize = 200;

/// Lloyd's algorithm with k-means++ seeding.
#[derive(Debug, Clone)]
pub struct KMeans {
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    restarts: usize,
}

/// Result of a fit, including the inertia after every assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Final sum of squared distances, measured against the unrounded
    /// centroids.
    pub inertia: f64,
    /// `trace[0]` is the inertia of the seeded centroids; each later entry
    /// follows one update + reassignment round.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn new(k: usize) -> Self {
        KMeans {
            k,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            restarts: 1,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    /// Relative inertia improvement below which iteration stops.
    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Independent seedings to try (seeds `seed`, `seed + 1`, ...); the fit
    /// with the lowest inertia is kept, the earliest on ties.
    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    /// Fits `k` centroids to `data`, a row-major `N × dim` matrix.
    pub fn fit(&self, data: &[f32], dim: usize) -> Result<KMeansFit> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid("data length is not a multiple of dim"));
        }
        let n = data.len() / dim;
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if n < self.k {
            return Err(Error::invalid(format!(
                "need at least k = {} points, got {n}",
                self.k
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("k-means input must be finite"));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::invalid("tol must be nonnegative"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }

        let points: Vec<&[f32]> = data.chunks_exact(dim).collect();
        let mut best: Option<KMeansFit> = None;
        for r in 0..self.restarts as u64 {
            let fit = self.fit_once(&points, dim, self.seed.wrapping_add(r))?;
            if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                best = Some(fit);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    fn fit_once(&self, points: &[&[f32]], dim: usize, seed: u64) -> Result<KMeansFit> {
        let n = points.len();
        let mut centroids = self.seed_centroids(points, dim, seed);
        let mut labels = vec![0usize; n];
        let mut dists = vec![0f64; n];
        let mut inertia = assign_all(points, &centroids, dim, &mut labels, &mut dists);
        let mut trace = vec![inertia];
        let mut iterations = 0;

        while iterations < self.max_iters {
            iterations += 1;
            repair_empty_clusters(self.k, &mut labels, &mut dists);
            centroids = cluster_means(points, &labels, self.k, dim);
            let previous = labels.clone();
            let next = assign_all(points, &centroids, dim, &mut labels, &mut dists);
            trace.push(next);
            let improvement = inertia - next;
            inertia = next;
            if labels == previous || inertia == 0.0 || improvement < self.tol * trace[trace.len() - 2]
            {
                break;
            }
        }

        let codebook = Codebook::new(
            self.k,
            dim,
            centroids.iter().map(|&v| v as f32).collect(),
        )?;
        Ok(KMeansFit {
            codebook,
            inertia,
            trace,
            iterations,
        })
    }

    /// Greedy k-means++: the first centre is uniform; each later centre is
    /// the best of `2 + ln k` candidates drawn proportionally to squared
    /// distance from the nearest chosen centre, scored by the total
    /// squared distance it leaves.
    fn seed_centroids(&self, points: &[&[f32]], dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = points.len();
        let trials = 2 + (self.k as f64).ln() as usize;
        let mut chosen = Vec::with_capacity(self.k);
        chosen.push(rng.gen_range(0..n));
        let mut nearest: Vec<f64> = points
            .iter()
            .map(|p| squared_distance(p, points[chosen[0]]))
            .collect();

        while chosen.len() < self.k {
            let total: f64 = nearest.iter().sum();
            if total <= 0.0 {
                // Every remaining point coincides with a centre already.
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                chosen.push(free[rng.gen_range(0..free.len())]);
                continue;
            }
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for _ in 0..trials {
                let target = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &d) in nearest.iter().enumerate() {
                    acc += d;
                    if d > 0.0 && acc > target {
                        pick = Some(i);
                        break;
                    }
                }
                // Rounding can leave target just above the final sum.
                let pick = pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap());
                let updated: Vec<f64> = nearest
                    .iter()
                    .zip(points)
                    .map(|(&d, p)| d.min(squared_distance(p, points[pick])))
                    .collect();
                let potential: f64 = updated.iter().sum();
                if best.as_ref().is_none_or(|b| potential < b.1) {
                    best = Some((pick, potential, updated));
                }
            }
            let (pick, _, updated) = best.expect("at least one trial");
            chosen.push(pick);
            nearest = updated;
        }

        let mut centroids = Vec::with_capacity(self.k * dim);
        for &i in &chosen {
            centroids.extend(points[i].iter().map(|&v| f64::from(v)));
        }
        centroids
    }
}

/// Convenience wrapper returning only the codebook.
pub fn kmeans_fit(
    data: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Codebook> {
    Ok(KMeans::new(k)
        .seed(seed)
        .max_iters(max_iters)
        .tol(tol)
        .fit(data, dim)?
        .codebook)
}

fn assign_all(
    points: &[&[f32]],
    centroids: &[f64],
    dim: usize,
    labels: &mut [usize],
    dists: &mut [f64],
) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = (0usize, f64::INFINITY);
        for (j, c) in centroids.chunks_exact(dim).enumerate() {
            let d: f64 = p
                .iter()
                .zip(c)
                .map(|(&x, &y)| {
                    let e = f64::from(x) - y;
                    e * e
                })
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
        inertia += best.1;
    }
    inertia
}

/// Gives each empty cluster the point currently farthest from its centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty_clusters(k: usize, labels: &mut [usize], dists: &mut [f64]) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        // n >= k guarantees a donor cluster with two or more members.
        let i = donor.expect("k-means invariant: n >= k");
        counts[labels[i]] -= 1;
        labels[i] = empty;
        counts[empty] = 1;
        dists[i] = 0.0;
    }
}

fn cluster_means(points: &[&[f32]], labels: &[usize], k: usize, dim: usize) -> Vec<f64> {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p.iter()) {
            *s += f64::from(v);
        }
    }
    for (row, &c) in sums.chunks_exact_mut(dim).zip(&counts) {
        for s in row {
            *s /= c as f64;
        }
    }
    sums
}

/// Sum of squared distances from each row of `data` to its nearest centroid.
pub fn inertia(cb: &Codebook, data: &[f32]) -> f64 {
    data.chunks_exact(cb.dim()).map(|p| cb.nearest(p).1).sum()
}

/// Nearest-centroid id for every frame. Ties go to the lowest id; the result
/// is not deduplicated.
pub fn assign(cb: &Codebook, feats: &FeatureSequence) -> Result<UnitSequence> {
    let vocab = u32::try_from(cb.k()).map_err(|_| Error::invalid("codebook too large"))?;
    if feats.is_empty() {
        return UnitSequence::empty(vocab);
    }
    if feats.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            found: feats.dim(),
        });
    }
    let tokens = feats.frames().map(|f| cb.nearest(f).0).collect();
    UnitSequence::new(tokens, vocab)
}

/// Speech units: nearest-centroid assignment followed by repetition removal.
pub fn encode_speech(feats: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    Ok(dedup(&assign(cb, feats)?))
}

/// Units per second before repetition removal.
pub fn unit_rate(sample_rate_hz: f64, downsample_factor: u32) -> Result<f64> {
    if downsample_factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    if sample_rate_hz.is_nan() || sample_rate_hz <= 0.0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    Ok(sample_rate_hz / f64::from(downsample_factor))
}
