//! Realizing the random setup, ordering performance values, and the
//! permutation algebra the exchangeable-noise test relies on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Method, PerturbationSetup};

/// The `m` performance values `Z_1..Z_m` of one candidate θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceVector<T>(Vec<T>);

impl<T: Scalar> PerformanceVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < T::zero())
        {
            return Err(if v.is_finite() {
                Error::Domain(format!("performance value Z_{} = {v} is negative", i + 1))
            } else {
                Error::NonFinite(format!("performance value Z_{} = {v}", i + 1))
            });
        }
        Ok(PerformanceVector(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dataset indices (0-based) listed in decreasing order of performance value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ordering(pub Vec<usize>);

impl Ordering {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    /// 1-based position of dataset 1.
    pub fn rank_of_one(&self) -> usize {
        self.0.iter().position(|&i| i == 0).map_or(0, |p| p + 1)
    }
}

/// Realizes a setup from a seed.
///
/// Draw order: rows (or permutations) 2..m, then the tie-break
/// permutation. Changing it changes every stored fixture.
pub fn gen_setup(method: Method, m: usize, n: usize, seed: u64) -> Result<PerturbationSetup> {
    if m < 2 {
        return Err(Error::Domain(format!("need m >= 2 datasets, got {m}")));
    }
    if n < 1 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sign_matrix, permutations) = match method {
        Method::SignFlip => {
            let mut rows = vec![vec![1i8; n]];
            for _ in 1..m {
                rows.push((0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect());
            }
            (Some(rows), None)
        }
        Method::Permute => {
            let mut perms = vec![(0..n).collect::<Vec<_>>()];
            for _ in 1..m {
                perms.push(uniform_permutation(n, &mut rng));
            }
            (None, Some(perms))
        }
    };
    let tie_perm = uniform_permutation(m, &mut rng);
    Ok(PerturbationSetup {
        method,
        m,
        n,
        sign_matrix,
        permutations,
        tie_perm,
        seed,
    })
}

/// Fisher–Yates shuffle of `0..n`.
pub fn uniform_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Orders the values decreasingly and reports where dataset 1 landed.
///
/// Equal values are ordered by their position in `tie_perm`: the index
/// appearing earlier there counts as the larger value.
pub fn rank_of_one<T: Scalar>(
    z: &PerformanceVector<T>,
    tie_perm: &[usize],
) -> Result<(Ordering, usize)> {
    let m = z.len();
    if tie_perm.len() != m {
        return Err(Error::Dimension(format!(
            "{m} performance values but tie permutation of length {}",
            tie_perm.len()
        )));
    }
    let mut tie_pos = vec![usize::MAX; m];
    for (pos, &i) in tie_perm.iter().enumerate() {
        if i >= m || tie_pos[i] != usize::MAX {
            return Err(Error::Domain("tie_perm is not a permutation".into()));
        }
        tie_pos[i] = pos;
    }
    let v = z.values();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .expect("performance values are finite")
            .then(tie_pos[a].cmp(&tie_pos[b]))
    });
    let ord = Ordering(idx);
    let rank = ord.rank_of_one();
    Ok((ord, rank))
}

fn factorial_saturating(m: usize) -> u128 {
    (1..=m as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

/// The `r` orderings with dataset 1 placed as late as possible.
///
/// Primary key: position of index 1, descending. Secondary key:
/// lexicographic on the index sequence. Orderings are generated lazily,
/// so only the `r` returned ones are materialized.
pub fn accepted_orderings(m: usize, r: usize) -> Result<Vec<Ordering>> {
    if m < 1 {
        return Err(Error::Domain("m must be positive".into()));
    }
    if r < 1 || r as u128 > factorial_saturating(m) {
        return Err(Error::Domain(format!("r = {r} is outside 1..=m! for m = {m}")));
    }
    let mut out = Vec::with_capacity(r);
    let rest: Vec<usize> = (1..m).collect();
    for pos in (0..m).rev() {
        // Removing a common fixed position keeps lexicographic order, so the
        // orderings with 1 at `pos` follow the lexicographic order of the rest.
        let mut perm = rest.clone();
        loop {
            let mut o = perm.clone();
            o.insert(pos, 0);
            out.push(Ordering(o));
            if out.len() == r {
                return Ok(out);
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
    }
    Ok(out)
}

/// Advances to the next lexicographic permutation; false once wrapped.
fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        p.reverse();
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Composition "apply `first`, then `second`" as index maps.
///
/// With `(P v)[k] = v[p[k]]`, applying `first` then `second` to `v` yields
/// `v[first[second[k]]]`.
pub fn compose_permutation(first: &[usize], second: &[usize]) -> Result<Vec<usize>> {
    if first.len() != second.len() {
        return Err(Error::Dimension(format!(
            "permutations of length {} and {}",
            first.len(),
            second.len()
        )));
    }
    Ok(second.iter().map(|&k| first[k]).collect())
}

pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, &pk) in p.iter().enumerate() {
        inv[pk] = k;
    }
    inv
}

/// `(P v)[k] = v[p[k]]`.
pub fn apply_permutation<T: Copy>(p: &[usize], v: &[T]) -> Result<Vec<T>> {
    if p.len() != v.len() {
        return Err(Error::Dimension(format!(
            "permutation of length {} applied to vector of length {}",
            p.len(),
            v.len()
        )));
    }
    Ok(p.iter().map(|&k| v[k]).collect())
}

/// Index of a permutation of `0..n` in lexicographic order (Lehmer code).
pub fn permutation_rank(p: &[usize]) -> usize {
    let n = p.len();
    let mut rank = 0;
    for i in 0..n {
        let smaller = p[i + 1..].iter().filter(|&&x| x < p[i]).count();
        rank = rank * (n - i) + smaller;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn pv(v: &[f64]) -> PerformanceVector<f64> {
        PerformanceVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn strict_sort_without_ties() {
        let (o, r) = rank_of_one(&pv(&[5.0, 3.0, 4.0]), &[0, 1, 2]).unwrap();
        assert_eq!(o.one_based(), vec![1, 3, 2]);
        assert_eq!(r, 1);
    }

    #[test]
    fn tie_resolved_by_tie_perm() {
        let (o, r) = rank_of_one(&pv(&[2.0, 2.0]), &[1, 0]).unwrap();
        assert_eq!(o.one_based(), vec![2, 1]);
        assert_eq!(r, 2);
    }

    #[test]
    fn all_ties_reproduce_tie_perm() {
        let tie = vec![3, 0, 4, 2, 1];
        let (o, r) = rank_of_one(&pv(&[0.0; 5]), &tie).unwrap();
        assert_eq!(o.0, tie);
        assert_eq!(r, 2);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(rank_of_one(&pv(&[1.0, 2.0]), &[0, 1, 2]).is_err());
    }

    #[test]
    fn negative_or_nan_performance_rejected() {
        assert!(PerformanceVector::new(vec![1.0, -1e-3]).is_err());
        assert!(matches!(
            PerformanceVector::new(vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    /// Brute-force oracle: enumerate all m! orderings, stable-sort by
    /// position of 1 descending after a lexicographic sort.
    fn accepted_by_enumeration(m: usize, r: usize) -> Vec<Vec<usize>> {
        let mut all = vec![];
        let mut p: Vec<usize> = (0..m).collect();
        loop {
            all.push(p.clone());
            if !next_permutation(&mut p) {
                break;
            }
        }
        all.sort_by_key(|o| std::cmp::Reverse(o.iter().position(|&i| i == 0).unwrap()));
        all.truncate(r);
        all
    }

    #[test]
    fn accepted_orderings_small_cases() {
        let one = |v: Vec<Ordering>| v.into_iter().map(|o| o.one_based()).collect::<Vec<_>>();
        assert_eq!(one(accepted_orderings(2, 1).unwrap()), vec![vec![2, 1]]);
        assert_eq!(
            one(accepted_orderings(3, 2).unwrap()),
            vec![vec![2, 3, 1], vec![3, 2, 1]]
        );
        assert_eq!(one(accepted_orderings(2, 2).unwrap()), vec![vec![2, 1], vec![1, 2]]);
        assert!(accepted_orderings(3, 7).is_err());
        assert!(accepted_orderings(3, 0).is_err());
    }

    #[test]
    fn accepted_orderings_match_enumeration() {
        for m in 1..=5 {
            let total = (1..=m).product::<usize>();
            for r in 1..=total {
                let got: Vec<Vec<usize>> =
                    accepted_orderings(m, r).unwrap().into_iter().map(|o| o.0).collect();
                assert_eq!(got, accepted_by_enumeration(m, r), "m={m} r={r}");
            }
        }
    }

    #[test]
    fn rank_rule_orderings_are_a_prefix() {
        // Accepting rank_of_one > q corresponds to the first (m-q)(m-1)! orderings.
        let m = 4;
        for q in 1..m {
            let r = (m - q) * 6;
            assert!(accepted_orderings(m, r)
                .unwrap()
                .iter()
                .all(|o| o.rank_of_one() > q));
        }
    }

    #[test]
    fn composition_laws() {
        let p = vec![2, 0, 3, 1];
        let id: Vec<usize> = (0..4).collect();
        assert_eq!(compose_permutation(&id, &p).unwrap(), p);
        assert_eq!(compose_permutation(&p, &inverse_permutation(&p)).unwrap(), id);
        assert!(compose_permutation(&p, &[0, 1]).is_err());
        // applying first then second to a vector agrees with the composed map
        let v = [10, 20, 30, 40];
        let q = vec![1, 3, 0, 2];
        let seq = apply_permutation(&q, &apply_permutation(&p, &v).unwrap()).unwrap();
        let comp = apply_permutation(&compose_permutation(&p, &q).unwrap(), &v).unwrap();
        assert_eq!(seq, comp);
    }

    fn chi_square_p(counts: &[usize], expected: f64) -> f64 {
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn composition_with_uniform_is_uniform_s3() {
        let p1 = vec![1, 2, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 6];
        for _ in 0..6000 {
            let p2 = uniform_permutation(3, &mut rng);
            counts[permutation_rank(&compose_permutation(&p1, &p2).unwrap())] += 1;
        }
        assert!(chi_square_p(&counts, 1000.0) > 0.001, "{counts:?}");
    }

    #[test]
    fn gen_setup_structure_and_determinism() {
        let s = gen_setup(Method::SignFlip, 5, 9, 3).unwrap();
        assert!(s.sign_matrix.as_ref().unwrap()[0].iter().all(|&a| a == 1));
        assert_eq!(s, gen_setup(Method::SignFlip, 5, 9, 3).unwrap());
        let p = gen_setup(Method::Permute, 5, 9, 3).unwrap();
        assert_eq!(p.permutations.as_ref().unwrap()[0], (0..9).collect::<Vec<_>>());
        assert!(crate::types::validate_setup(&s).is_ok());
        assert!(crate::types::validate_setup(&p).is_ok());
        assert!(gen_setup(Method::SignFlip, 1, 9, 3).is_err());
        assert!(gen_setup(Method::Permute, 2, 0, 3).is_err());
    }

    #[test]
    fn sign_entries_are_fair() {
        let (mut minus, mut total) = (0usize, 0usize);
        for seed in 0..200 {
            let s = gen_setup(Method::SignFlip, 6, 20, seed).unwrap();
            for row in &s.sign_matrix.unwrap()[1..] {
                minus += row.iter().filter(|&&a| a == -1).count();
                total += row.len();
            }
        }
        let freq = minus as f64 / total as f64;
        assert!(total >= 10_000);
        assert!((freq - 0.5).abs() <= 3.0 * (0.25 / total as f64).sqrt(), "{freq}");
    }

    #[test]
    fn generated_permutations_are_uniform_over_s4() {
        let mut counts = [0usize; 24];
        for seed in 0..12_000 {
            let s = gen_setup(Method::Permute, 3, 4, seed).unwrap();
            for p in &s.permutations.unwrap()[1..] {
                counts[permutation_rank(p)] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 24_000);
        assert!(chi_square_p(&counts, 1000.0) > 0.001, "{counts:?}");
    }

    #[test]
    fn permutation_rank_is_lexicographic() {
        let mut p: Vec<usize> = (0..4).collect();
        let mut k = 0;
        loop {
            assert_eq!(permutation_rank(&p), k);
            k += 1;
            if !next_permutation(&mut p) {
                break;
            }
        }
        assert_eq!(k, 24);
    }

    proptest! {
        #[test]
        fn ordering_is_permutation_and_monotone_invariant(
            raw in proptest::collection::vec(0u8..6, 2..9),
            seed in any::<u64>(),
        ) {
            // small integer values force plenty of ties
            let z: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tie = uniform_permutation(z.len(), &mut rng);
            let (o, r) = rank_of_one(&pv(&z), &tie).unwrap();
            let mut sorted = o.0.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..z.len()).collect::<Vec<_>>());
            prop_assert_eq!(o.rank_of_one(), r);
            // strictly increasing transform keeps both values and ties
            let t: Vec<f64> = z.iter().map(|&v| 3.0 * v * v + v + 2.0).collect();
            let (o2, _) = rank_of_one(&pv(&t), &tie).unwrap();
            prop_assert_eq!(o, o2);
        }

        #[test]
        fn accepted_orderings_are_nested(m in 1usize..6, a in 1usize..200, b in 1usize..200) {
            let total = (1..=m).product::<usize>();
            let (r1, r2) = (a.min(b).min(total), a.max(b).min(total));
            let small = accepted_orderings(m, r1).unwrap();
            let big = accepted_orderings(m, r2).unwrap();
            prop_assert!(small.iter().all(|o| big.contains(o)));
        }
    }
}
