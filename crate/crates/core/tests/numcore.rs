use pam::numcore::{finite_diff_check, softmax, Mat, NumError, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Mat::new(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so ReLU never crosses its kink under `EPS`.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Mat::new(rows, cols, data).unwrap()
}

fn reduce(t: &mut Tape, y: Var, target: Mat) -> Result<Var, NumError> {
    t.mse_to_target(y, target)
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 100,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matmul_t_gradients(seed: u64, b in 1usize..=16, i in 1usize..=16, o in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_mat(&mut rng, b, o);
        let leaves = [rand_mat(&mut rng, b, i), rand_mat(&mut rng, o, i)];
        let err = finite_diff_check(|t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            reduce(t, y, target.clone())
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn linear_and_bias_gradients(seed: u64, b in 1usize..=16, i in 1usize..=16, o in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_mat(&mut rng, b, o);
        let leaves = [rand_mat(&mut rng, b, i), rand_mat(&mut rng, o, i), rand_mat(&mut rng, 1, o)];
        let err = finite_diff_check(|t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            reduce(t, y, target.clone())
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn relu_gradients(seed: u64, b in 1usize..=16, d in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_mat(&mut rng, b, d);
        let leaves = [off_kink(&mut rng, b, d)];
        let err = finite_diff_check(|t, v| {
            let y = t.relu(v[0])?;
            reduce(t, y, target.clone())
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn concat_gradients(seed: u64, b in 1usize..=16, d1 in 1usize..=8, d2 in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_mat(&mut rng, b, d1 + d2);
        let leaves = [rand_mat(&mut rng, b, d1), rand_mat(&mut rng, b, d2)];
        let err = finite_diff_check(|t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            reduce(t, y, target.clone())
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn inbatch_log_loss_gradients(seed: u64, b in 1usize..=16, d in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives: Vec<usize> = (0..b).collect();
        let labels: Vec<f64> = (0..b).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect();
        let mut leaves = [rand_mat(&mut rng, b, d), rand_mat(&mut rng, b, d)];
        for m in &mut leaves {
            m.scale(1.0 / (d as f64).sqrt());
        }
        let err = finite_diff_check(|t, v| {
            let s = t.scores(v[0], v[1], 1.0 / 0.2)?;
            t.inbatch_log_loss(s, &positives, &labels)
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn weighted_sum_gradients(seed: u64, d in 1usize..=16, w1 in -3.0f64..3.0, w2 in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t1 = rand_mat(&mut rng, 2, d);
        let t2 = rand_mat(&mut rng, 2, d);
        let leaves = [rand_mat(&mut rng, 2, d), rand_mat(&mut rng, 2, d)];
        let err = finite_diff_check(|t, v| {
            let a = t.mse_to_target(v[0], t1.clone())?;
            let b = t.mse_to_target(v[1], t2.clone())?;
            t.weighted_sum(&[(a, w1), (b, w2)])
        }, &leaves, EPS).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed: u64, d in 1usize..=16, c in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.leaf(rand_mat(&mut rng, 3, d)).unwrap();
        let l = t.mse_to_target(x, rand_mat(&mut rng, 3, d)).unwrap();
        let scaled = t.weighted_sum(&[(l, c)]).unwrap();
        let g1 = t.backward(l).unwrap().wrt(x);
        let gc = t.backward(scaled).unwrap().wrt(x);
        for (a, b) in g1.as_slice().iter().zip(gc.as_slice()) {
            prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let p = softmax(&logits);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(rand_mat(&mut rng, 5, 4)).unwrap();
        let w = t.leaf(rand_mat(&mut rng, 3, 4)).unwrap();
        let h = t.matmul_t(x, w).unwrap();
        let h = t.relu(h).unwrap();
        let l = t.mse_to_target(h, rand_mat(&mut rng, 5, 3)).unwrap();
        let g = t.backward(l).unwrap();
        (t.scalar(l).to_bits(), g.wrt(w))
    };
    assert_eq!(build(), build());
}
