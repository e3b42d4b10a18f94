//! Seeded test-function corpora.
//!
//! Entry `i` draws from its own ChaCha stream, so corpora are prefix-stable:
//! the first `k` entries do not depend on the requested size.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::scalar::Real;
use crate::spectral::SpectralDecomposition;

/// Smoothing times of the heat-smoothed family.
pub const HEAT_TIMES: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry<T> {
    pub id: String,
    pub f: Vec<T>,
}

fn stream(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn normals<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Graph distance between interior vertices (edges to killed vertices ignored).
pub fn hop_distances<T: Real>(model: &Model<T>) -> Vec<Vec<usize>> {
    let idx = model.interior_index();
    let m = model.interior().len();
    let mut adj = vec![Vec::new(); m];
    for &(u, v, _) in &model.edges {
        if let (Some(i), Some(j)) = (idx[u], idx[v]) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    (0..m)
        .map(|s| {
            let mut d = vec![usize::MAX; m];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(x) = q.pop_front() {
                for &y in &adj[x] {
                    if d[y] == usize::MAX {
                        d[y] = d[x] + 1;
                        q.push_back(y);
                    }
                }
            }
            d
        })
        .collect()
}

fn bump<T: Real>(rng: &mut ChaCha8Rng, dist: &[Vec<usize>]) -> Vec<T> {
    let n = dist.len();
    let center = rng.random_range(0..n);
    let row = &dist[center];
    let reach = row.iter().filter(|&&d| d != usize::MAX).max().copied().unwrap_or(0);
    let width = 1.0 + rng.random::<f64>() * (reach as f64 / 2.0).max(1.0);
    let steep = 0.25 + rng.random::<f64>() * 1.75;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    row.iter()
        .map(|&d| {
            let d = if d == usize::MAX { 1e6 } else { d as f64 };
            T::lit(sign / (1.0 + ((d - width) / steep).exp()))
        })
        .collect()
}

fn draw<T: Real>(
    dec: &SpectralDecomposition<T>,
    dist: &[Vec<usize>],
    seed: u64,
    i: usize,
) -> CorpusEntry<T> {
    let mut rng = stream(seed, i);
    let n = dec.dim();
    match i % 3 {
        0 => CorpusEntry {
            id: format!("gaussian-{i:04}"),
            f: dec.synthesize(&normals(&mut rng, n)),
        },
        1 => {
            let tau = HEAT_TIMES[(i / 3) % HEAT_TIMES.len()];
            let g = normals(&mut rng, n);
            CorpusEntry {
                id: format!("heat{tau}-{i:04}"),
                f: dec.semigroup(T::lit(tau), &g).expect("length matches"),
            }
        }
        _ => CorpusEntry {
            id: format!("bump-{i:04}"),
            f: bump(&mut rng, dist),
        },
    }
}

/// `count` entries cycling through Gaussian eigen-coefficients, heat-smoothed
/// noise and sigmoid bumps in hop distance.
pub fn mixed<T: Real>(
    model: &Model<T>,
    dec: &SpectralDecomposition<T>,
    count: usize,
    seed: u64,
) -> Vec<CorpusEntry<T>> {
    let dist = hop_distances(model);
    (0..count).map(|i| draw(dec, &dist, seed, i)).collect()
}

/// Strictly positive entries `exp(s·g/‖g‖_∞)` from the mixed families, with
/// `s ∈ [0.5, 2]`.
pub fn positive<T: Real>(
    model: &Model<T>,
    dec: &SpectralDecomposition<T>,
    count: usize,
    seed: u64,
) -> Vec<CorpusEntry<T>> {
    let dist = hop_distances(model);
    (0..count)
        .map(|i| {
            let base = draw(dec, &dist, seed, i);
            let mut rng = stream(seed ^ 0x5eed_0f_e4f0, i);
            let s = T::lit(0.5 + 1.5 * rng.random::<f64>());
            let sup = crate::linalg::sup_norm(&base.f);
            let scale = if sup > T::zero() { s / sup } else { T::zero() };
            CorpusEntry {
                id: format!("positive-{}", base.id),
                f: base.f.iter().map(|&v| (scale * v).exp()).collect(),
            }
        })
        .collect()
}

/// Plain Gaussian vertex values.
pub fn gaussian_vertices<T: Real>(n: usize, count: usize, seed: u64) -> Vec<CorpusEntry<T>> {
    (0..count)
        .map(|i| CorpusEntry {
            id: format!("vertex-gaussian-{i:04}"),
            f: normals(&mut stream(seed, i), n),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::Instance;

    #[test]
    fn deterministic_and_prefix_stable() {
        let inst = Instance::<f64>::from_gallery("p16").unwrap();
        let a = mixed(&inst.model, &inst.spectral, 9, 3);
        let b = mixed(&inst.model, &inst.spectral, 20, 3);
        assert_eq!(a[..], b[..9]);
        let c = mixed(&inst.model, &inst.spectral, 9, 4);
        assert_ne!(a, c);
        assert!(a[0].id.starts_with("gaussian") && a[1].id.starts_with("heat") && a[2].id.starts_with("bump"));
    }

    #[test]
    fn positive_entries() {
        let inst = Instance::<f64>::from_gallery("grid8x8").unwrap();
        let p = positive(&inst.model, &inst.spectral, 30, 1);
        assert!(p.iter().all(|e| e.f.iter().all(|&v| v > 0.0 && v.is_finite())));
    }

    #[test]
    fn hop_distance_on_path() {
        let inst = Instance::<f64>::from_gallery("p16").unwrap();
        let d = hop_distances(&inst.model);
        assert_eq!(d[0][15], 15);
        assert_eq!(d[7][7], 0);
    }
}
