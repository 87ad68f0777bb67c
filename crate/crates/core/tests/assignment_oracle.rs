use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtrack::assignment::{max_score_assignment, min_cost_assignment};

/// Minimum total over every injective map from the smaller side to the larger.
fn brute_force(c: &DMatrix<f64>) -> f64 {
    let (n, m) = c.shape();
    let flip = n > m;
    let (small, large) = if flip { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if flip { c[(j, i)] } else { c[(i, j)] };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + rec(i + 1, small, large, used, at));
                used[j] = false;
            }
        }
        best
    }
    rec(0, small, large, &mut vec![false; large], &at)
}

/// Entries on a dyadic grid so every sum is exact in f64.
fn random_matrix(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = rng.random_range(1..=7);
    let m = rng.random_range(1..=7);
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-512i32..=512) as f64 / 64.0)
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let c = random_matrix(&mut rng);
        let pairs = min_cost_assignment(&c).unwrap();
        assert_eq!(pairs.len(), c.nrows().min(c.ncols()));
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(rows.len(), pairs.len());
        assert_eq!(cols.len(), pairs.len());
        let total: f64 = pairs.iter().map(|&(i, j)| c[(i, j)]).sum();
        assert_eq!(total, brute_force(&c), "trial {trial}: {c}");
    }
}

#[test]
fn max_score_is_negated_min_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let s = random_matrix(&mut rng);
        let pairs = max_score_assignment(&s).unwrap();
        let total: f64 = pairs.iter().map(|&(i, j)| s[(i, j)]).sum();
        assert_eq!(-total, brute_force(&(-&s)));
    }
}
