use fairscope_core::nn::{svd, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng) -> Tensor {
    let m = rng.gen_range(1..=32);
    let n = rng.gen_range(1..=32);
    Tensor::from_fn([m, n], |_| rng.gen_range(-3.0..3.0))
}

#[test]
fn reconstruction_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let a = random_matrix(&mut rng);
        let d = svd(&a).unwrap();
        let r = d.reconstruct();
        let diff: f64 = r.data().iter().zip(a.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let rel = diff / a.frobenius();
        assert!(rel < 1e-8, "{:?}: {rel:e}", a.shape());
    }
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let a = random_matrix(&mut rng);
        let d = svd(&a).unwrap();
        let na = DMatrix::from_row_slice(a.shape()[0], a.shape()[1], a.data());
        let mut want: Vec<f64> = na.singular_values().iter().copied().collect();
        want.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(d.s.len(), want.len());
        for (x, y) in d.s.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9 * want[0].max(1.0), "{:?} vs {want:?}", d.s);
        }
    }
}

#[test]
fn factors_are_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let a = random_matrix(&mut rng);
        let d = svd(&a).unwrap();
        let k = d.s.len();
        let utu = d.u.transpose().unwrap().matmul(&d.u).unwrap();
        let vvt = d.vt.matmul(&d.vt.transpose().unwrap()).unwrap();
        assert!(utu.max_abs_diff(&Tensor::identity(k)) < 1e-10);
        assert!(vvt.max_abs_diff(&Tensor::identity(k)) < 1e-10);
    }
}
