//! Epoch-level embedding cache, the fused similarity matrix of a search space
//! and its row-wise quantile summary.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};

/// Embeddings of every training pair from the last full pass. Row `i` of
/// `img` and of `txt` belong to the same labeled pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub img: Matrix,
    pub txt: Matrix,
    pub epoch_tag: usize,
}

impl EmbeddingCache {
    pub fn new(img: Matrix, txt: Matrix, epoch_tag: usize) -> Result<Self> {
        if img.shape() != txt.shape() {
            return Err(Error::StateCorruption(format!(
                "image cache {:?} and text cache {:?} disagree",
                img.shape(),
                txt.shape()
            )));
        }
        Ok(EmbeddingCache { img, txt, epoch_tag })
    }

    pub fn len(&self) -> usize {
        self.img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.img.rows() == 0
    }
}

/// Ordered global pair indices forming one localized search space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub indices: Vec<usize>,
}

impl SearchSpace {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `order` into consecutive spaces of `size`; the short remainder is
/// kept as a final space.
pub fn partition(order: &[usize], size: usize) -> Vec<SearchSpace> {
    assert!(size > 0, "search space size must be positive");
    order
        .chunks(size)
        .map(|c| SearchSpace { indices: c.to_vec() })
        .collect()
}

/// `S[a][b] = cos(img_a, txt_b) + cos(txt_a, img_b)` over the space's pairs.
pub fn build_similarity(cache: &EmbeddingCache, space: &SearchSpace) -> Result<Matrix> {
    if let Some(&bad) = space.indices.iter().find(|&&i| i >= cache.len()) {
        return Err(Error::Lookup {
            index: bad,
            len: cache.len(),
        });
    }
    let img = cache.img.select_rows(&space.indices);
    let txt = cache.txt.select_rows(&space.indices);
    let n = space.len();
    let i2t = img.matmul_t(&txt);
    let mut s = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            s.set(a, b, i2t.get(a, b) + i2t.get(b, a));
        }
    }
    Ok(s)
}

/// Nearest-rank position for quantile level `q` among `n` sorted values:
/// `round(q · (n − 1))`, halves rounded up.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    debug_assert!(n > 0);
    let r = (q * (n - 1) as f64 + 0.5).floor();
    (r.max(0.0) as usize).min(n - 1)
}

/// Total order on (value, index): ascending value, ties by lower index.
pub(crate) fn value_index_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySummary {
    /// Fused `|M|×|M|` similarity.
    pub raw: Matrix,
    /// Pre-softmax quantile values, `|M|×m`, non-decreasing along each row.
    pub quantiles: Matrix,
    /// Row-softmax of `quantiles`.
    pub summary: Matrix,
    pub m: usize,
}

/// Per-row `m` evenly spaced nearest-rank quantiles (the diagonal excluded),
/// each row softmax-normalized at `temperature`.
pub fn summarize(s: &Matrix, m: usize, temperature: f64) -> Result<SimilaritySummary> {
    let n = s.rows();
    if n < 2 {
        return Err(Error::DegenerateSpace(format!(
            "search space of {n} items has no off-diagonal similarities"
        )));
    }
    if m < 2 || m > n {
        return Err(Error::Contract(format!(
            "quantile count m = {m} must satisfy 2 <= m <= |M| = {n}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Contract("summary temperature must be > 0".into()));
    }
    let mut quantiles = Matrix::zeros(n, m);
    let mut summary = Matrix::zeros(n, m);
    let mut vals: Vec<f64> = Vec::with_capacity(n - 1);
    for a in 0..n {
        vals.clear();
        vals.extend((0..n).filter(|&b| b != a).map(|b| s.get(a, b)));
        vals.sort_by(f64::total_cmp);
        let qrow = quantiles.row_mut(a);
        for (k, slot) in qrow.iter_mut().enumerate() {
            let level = k as f64 / (m - 1) as f64;
            *slot = vals[nearest_rank(level, vals.len())];
        }
        let sm = softmax(quantiles.row(a), temperature);
        summary.row_mut(a).copy_from_slice(&sm);
    }
    Ok(SimilaritySummary {
        raw: s.clone(),
        quantiles,
        summary,
        m,
    })
}

/// Reorders rows lexicographically by their quantile vectors (ties by
/// original index). Returns the sorted summary and `perm` with
/// `sorted.row(r) == original.row(perm[r])`.
pub fn sort_rows(summary: &SimilaritySummary) -> (SimilaritySummary, Vec<usize>) {
    let q = &summary.quantiles;
    let mut perm: Vec<usize> = (0..q.rows()).collect();
    perm.sort_by(|&a, &b| {
        for (x, y) in q.row(a).iter().zip(q.row(b)) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        a.cmp(&b)
    });
    let sorted = SimilaritySummary {
        raw: summary.raw.clone(),
        quantiles: q.select_rows(&perm),
        summary: summary.summary.select_rows(&perm),
        m: summary.m,
    };
    (sorted, perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (r, &p) in perm.iter().enumerate() {
        inv[p] = r;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine, dot};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn random_cache(n: usize, d: usize, seed: u64) -> EmbeddingCache {
        let mut rng = stream(seed, Stream::ModelInit);
        let unit = |m: Matrix| {
            let mut m = m;
            for r in 0..m.rows() {
                let nr = dot(m.row(r), m.row(r)).sqrt();
                m.row_mut(r).iter_mut().for_each(|x| *x /= nr);
            }
            m
        };
        let img = unit(Matrix::randn(n, d, 1.0, &mut rng));
        let txt = unit(Matrix::randn(n, d, 1.0, &mut rng));
        EmbeddingCache::new(img, txt, 0).unwrap()
    }

    #[test]
    fn identical_towers_give_symmetric_matrix() {
        let c = random_cache(6, 4, 1);
        let same = EmbeddingCache::new(c.img.clone(), c.img.clone(), 0).unwrap();
        let s = build_similarity(&same, &SearchSpace { indices: vec![5, 0, 3, 2] }).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(s.get(a, b), s.get(b, a));
            }
        }
    }

    #[test]
    fn identical_embeddings_give_two_everywhere() {
        let row = vec![0.6, 0.8];
        let m = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]);
        let c = EmbeddingCache::new(m.clone(), m, 0).unwrap();
        let s = build_similarity(&c, &SearchSpace { indices: vec![0, 1, 2] }).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 2.0).abs() < 1e-15));
    }

    #[test]
    fn matches_brute_force_double_loop() {
        let c = random_cache(12, 5, 2);
        let space = SearchSpace {
            indices: vec![11, 3, 4, 0, 9, 7, 1, 6],
        };
        let s = build_similarity(&c, &space).unwrap();
        for (a, &ia) in space.indices.iter().enumerate() {
            for (b, &ib) in space.indices.iter().enumerate() {
                let brute = cosine(c.img.row(ia), c.txt.row(ib)) + cosine(c.txt.row(ia), c.img.row(ib));
                assert!((s.get(a, b) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_index_is_a_lookup_error() {
        let c = random_cache(3, 2, 3);
        let err = build_similarity(&c, &SearchSpace { indices: vec![0, 3] }).unwrap_err();
        assert!(matches!(err, Error::Lookup { index: 3, len: 3 }));
    }

    #[test]
    fn constant_row_gives_uniform_summary() {
        let s = Matrix::from_vec(4, 4, vec![0.3; 16]);
        let sum = summarize(&s, 3, 1.0).unwrap();
        for v in sum.summary.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_resolution_summary_is_sorted_row() {
        // distinct off-diagonal values; m = |M| − 1 recovers the sorted row.
        let s = Matrix::from_rows(&[
            vec![9.0, 0.5, -0.2, 1.1, 0.0],
            vec![0.5, 9.0, 0.7, -1.0, 0.2],
            vec![-0.2, 0.7, 9.0, 0.4, 1.9],
            vec![1.1, -1.0, 0.4, 9.0, 0.3],
            vec![0.0, 0.2, 1.9, 0.3, 9.0],
        ]);
        let sum = summarize(&s, 4, 1.0).unwrap();
        for a in 0..5 {
            let mut expect: Vec<f64> = (0..5).filter(|&b| b != a).map(|b| s.get(a, b)).collect();
            expect.sort_by(f64::total_cmp);
            assert_eq!(sum.quantiles.row(a), expect.as_slice());
        }
    }

    #[test]
    fn summary_argument_errors() {
        let s = Matrix::zeros(1, 1);
        assert!(matches!(summarize(&s, 2, 1.0), Err(Error::DegenerateSpace(_))));
        let s = Matrix::zeros(3, 3);
        assert!(summarize(&s, 1, 1.0).is_err());
        assert!(summarize(&s, 4, 1.0).is_err());
    }

    #[test]
    fn nearest_rank_rounds_half_up() {
        assert_eq!(nearest_rank(0.5, 4), 2);
        assert_eq!(nearest_rank(0.0, 4), 0);
        assert_eq!(nearest_rank(1.0, 4), 3);
        assert_eq!(nearest_rank(0.5, 1), 0);
        assert_eq!(nearest_rank(1.0 / 6.0, 4), 1);
    }

    #[test]
    fn sorted_input_gives_identity() {
        let s = Matrix::from_rows(&[
            vec![0.0, 0.1, 0.2],
            vec![0.1, 0.0, 0.3],
            vec![0.2, 0.3, 0.0],
        ]);
        let sum = summarize(&s, 2, 1.0).unwrap();
        let (sorted, perm) = sort_rows(&sum);
        assert_eq!(perm, vec![0, 1, 2]);
        let (again, perm2) = sort_rows(&sorted);
        assert_eq!(perm2, vec![0, 1, 2]);
        assert_eq!(again.quantiles, sorted.quantiles);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn summary_rows_are_distributions(seed in 0u64..500, scale in 0.1f64..10.0) {
            let c = random_cache(20, 6, seed);
            let space = SearchSpace { indices: (0..20).collect() };
            let mut s = build_similarity(&c, &space).unwrap();
            s.scale(scale);
            let sum = summarize(&s, 7, 1.0).unwrap();
            for a in 0..20 {
                let row = sum.summary.row(a);
                prop_assert!(row.iter().all(|&x| x >= 0.0 && x.is_finite()));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(sum.quantiles.row(a).windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn row_sort_is_permutation_invariant(seed in 0u64..500, shuffle_seed in 0u64..500) {
            let c = random_cache(15, 4, seed);
            let space = SearchSpace { indices: (0..15).collect() };
            let s = build_similarity(&c, &space).unwrap();
            let sum = summarize(&s, 5, 1.0).unwrap();
            let mut p: Vec<usize> = (0..15).collect();
            p.shuffle(&mut stream(shuffle_seed, Stream::Batching));
            let shuffled = SimilaritySummary {
                raw: sum.raw.clone(),
                quantiles: sum.quantiles.select_rows(&p),
                summary: sum.summary.select_rows(&p),
                m: sum.m,
            };
            let (a, perm_a) = sort_rows(&sum);
            let (b, _) = sort_rows(&shuffled);
            prop_assert_eq!(&a.quantiles, &b.quantiles);
            prop_assert_eq!(&a.summary, &b.summary);
            let inv = invert_permutation(&perm_a);
            prop_assert_eq!(a.quantiles.select_rows(&inv), sum.quantiles.clone());
        }
    }
}
