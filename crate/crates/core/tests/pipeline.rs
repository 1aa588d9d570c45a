use kronykit_core::io::{self, Dtype};
use kronykit_core::scheme::is_rank_preserving;
use kronykit_core::{
    enumerate_schemes, kron, kronecker_decompose, materialize, normalized_vl_init, numerical_rank, reconstruction_error,
    DenseMatrix, KroneckerSum,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn divisors(x: usize) -> Vec<usize> {
    (1..=x).filter(|d| x.is_multiple_of(*d)).collect()
}

#[test]
fn rank_preservation_predicate_matches_measured_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, n) in &[(12, 8), (16, 4), (9, 6), (24, 24), (64, 16)] {
        for m1 in divisors(m) {
            for n1 in divisors(n) {
                let (m2, n2) = (m / m1, n / n1);
                let w = kron(&random(&mut rng, m1, n1), &random(&mut rng, m2, n2)).unwrap();
                let full = numerical_rank(&w, None) == m.min(n);
                assert_eq!(full, is_rank_preserving(m1, n1, m2, n2), "{m}x{n} split {m1}x{n1}");
            }
        }
    }
}

#[test]
fn filtered_enumeration_only_lists_rank_preserving_splits() {
    let all = enumerate_schemes(48, 12, false);
    let rp = enumerate_schemes(48, 12, true);
    assert_eq!(all.len(), divisors(48).len() * divisors(12).len());
    assert!(rp.iter().all(|s| is_rank_preserving(s.m1, s.n1, s.m2, s.n2)));
    assert_eq!(rp.len(), all.iter().filter(|s| s.rank_preserving).count());
    assert!(all.windows(2).all(|w| w[0].per_matrix_params <= w[1].per_matrix_params));
}

#[test]
fn decompose_save_load_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dir = tempfile::tempdir().unwrap();
    let exact = materialize(&KroneckerSum::single(random(&mut rng, 4, 3), random(&mut rng, 5, 2))).unwrap();
    let w_path = dir.path().join("w.kpt");
    let f_path = dir.path().join("f.kpt");
    io::save_matrix(&w_path, &exact, Dtype::F64).unwrap();
    let w = io::load_matrix(&w_path).unwrap();
    let sum = kronecker_decompose(&w, 4, 3, 1).unwrap();
    io::save_kron_sum(&f_path, &sum, Dtype::F64).unwrap();
    let back = io::load_kron_sum(&f_path).unwrap();
    assert!(reconstruction_error(&w, &back).unwrap() < 1e-10 * w.frobenius_norm());
}

#[test]
fn normalized_init_of_trained_like_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&mut rng, 64, 16);
    let (sum, report) = normalized_vl_init(&w, 32, 8, 1).unwrap();
    assert!(report.alpha > 1.0);
    let m = materialize(&sum).unwrap();
    assert!((m.frobenius_norm() - w.frobenius_norm()).abs() < 1e-10 * w.frobenius_norm());
    let vl = kronecker_decompose(&w, 32, 8, 1).unwrap();
    let vl_m = materialize(&vl).unwrap();
    // Same direction, rescaled.
    assert!(m.sub(&vl_m.scaled(report.alpha)).unwrap().frobenius_norm() < 1e-10 * w.frobenius_norm());
}
