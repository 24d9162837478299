use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::numerics::{finite_difference_gradient, max_relative_error};

fn unit_pair() -> GplParams {
    GplParams::from_moments(
        &[0.5, 0.5],
        &[vec![0.0], vec![2.0]],
        &[Tensor::identity(1), Tensor::identity(1)],
        vec![0, 1],
    )
    .unwrap()
}

#[test]
fn single_component_is_certain() {
    let p = GplParams::from_moments(&[1.0], &[vec![1.0, -1.0]], &[Tensor::identity(2)], vec![0]).unwrap();
    let lr = log_responsibilities(&p, &Tensor::from_vec(vec![3.0, 7.0])).unwrap();
    assert_eq!(lr.shape(), &[1]);
    assert_eq!(lr.data(), &[0.0]);
}

#[test]
fn identical_components_split_evenly() {
    let p = GplParams::from_moments(
        &[0.5, 0.5],
        &[vec![0.3], vec![0.3]],
        &[Tensor::identity(1), Tensor::identity(1)],
        vec![0, 1],
    )
    .unwrap();
    let lr = log_responsibilities(&p, &Tensor::from_vec(vec![1.7])).unwrap();
    for v in lr.data() {
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn two_unit_gaussians_at_zero() {
    // Densities at 0: φ(0) and φ(0)·e^{-2}; normalizing gives the values below.
    let expect0 = -(-2f64).exp().ln_1p();
    let expect1 = -2.0 + expect0;
    assert!((expect0 + 0.12693).abs() < 1e-5);
    let lr = log_responsibilities(&unit_pair(), &Tensor::from_vec(vec![0.0])).unwrap();
    assert!((lr.data()[0] - expect0).abs() < 1e-12);
    assert!((lr.data()[1] - expect1).abs() < 1e-12);
}

#[test]
fn responsibilities_keep_leading_shape() {
    let lr = log_responsibilities(&unit_pair(), &Tensor::zeros(&[3, 4, 1])).unwrap();
    assert_eq!(lr.shape(), &[3, 4, 2]);
}

#[test]
fn standard_normal_nll() {
    let p = GplParams::from_moments(&[1.0], &[vec![0.0]], &[Tensor::identity(1)], vec![0]).unwrap();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let one = gmm_nll(&p, &Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
    let two = gmm_nll(&p, &Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap()).unwrap();
    assert!((one - half_log_2pi).abs() < 1e-12);
    assert!((one - 0.91894).abs() < 1e-5);
    assert!((two - one).abs() < 1e-15);

    let twin = GplParams::from_moments(
        &[0.5, 0.5],
        &[vec![0.0], vec![0.0]],
        &[Tensor::identity(1), Tensor::identity(1)],
        vec![0, 1],
    )
    .unwrap();
    let z = Tensor::new(vec![3, 1], vec![-0.4, 0.0, 2.5]).unwrap();
    assert!((gmm_nll(&twin, &z).unwrap() - gmm_nll(&p, &z).unwrap()).abs() < 1e-12);
}

#[test]
fn covariance_respects_floor() {
    let p = GplParams::new(
        Tensor::zeros(&[1]),
        Tensor::zeros(&[1, 2]),
        Tensor::full(&[1, 2, 2], -40.0),
        vec![0],
    )
    .unwrap();
    let s = p.covariance(0);
    assert!(s.get(&[0, 0]) >= COVARIANCE_FLOOR);
    assert!(crate::numerics::cholesky(&s).is_ok());
}

#[test]
fn class_score_examples() {
    let lr = Tensor::from_vec(vec![-0.12693, -2.12693]);
    let id = LinearHead::from_effective(&Tensor::identity(2)).unwrap();
    let s = class_scores(&id, &lr).unwrap();
    assert!(s.max_abs_diff(&lr) < 1e-12);

    let zero = LinearHead::from_effective(&Tensor::zeros(&[2, 2])).unwrap();
    assert_eq!(class_scores(&zero, &lr).unwrap().data(), &[0.0, 0.0]);

    let a = LinearHead::from_effective(&Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let s = class_scores(&a, &Tensor::from_vec(vec![-1.0, -1.0])).unwrap();
    assert!(s.max_abs_diff(&Tensor::from_vec(vec![-2.0, -1.0])) < 1e-12);
}

#[test]
fn argmax_rules() {
    assert_eq!(argmax_first(&[-2.0, -1.0]), 1);
    assert_eq!(argmax_first(&[-1.0, -1.0]), 0);
    let id = LinearHead::from_effective(&Tensor::identity(2)).unwrap();
    assert_eq!(classify(&id, &unit_pair(), &[0.0]).unwrap(), 0);
}

#[test]
fn cross_entropy_examples() {
    let id = LinearHead::from_effective(&Tensor::identity(2)).unwrap();
    let flat = Tensor::new(vec![1, 2], vec![-1.0, -1.0]).unwrap();
    for label in 0..2 {
        let l = classification_loss(&id, &flat, &[label]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
    let lr = Tensor::new(vec![1, 2], vec![-2.0, -1.0]).unwrap();
    let l = classification_loss(&id, &lr, &[0]).unwrap();
    assert!((l - 1f64.exp().ln_1p()).abs() < 1e-12);
    assert!((l - 1.31326).abs() < 1e-5);

    let confident = Tensor::new(vec![1, 2], vec![-0.0, -60.0]).unwrap();
    assert!(classification_loss(&id, &confident, &[0]).unwrap() < 1e-20);
    assert!(matches!(
        classification_loss(&id, &lr, &[2]),
        Err(Error::LabelOutOfRange { .. })
    ));
}

#[test]
fn l1_examples() {
    let own = LinearHead::from_effective(&Tensor::identity(2)).unwrap();
    assert_eq!(l1_cross_class(&own, &[0, 1]).unwrap(), 0.0);
    let a = LinearHead::from_effective(&Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.25, 1.0]).unwrap()).unwrap();
    assert!((l1_cross_class(&a, &[0, 1]).unwrap() - 0.75).abs() < 1e-12);
    let ones = LinearHead::from_effective(&Tensor::full(&[2, 4], 1.0)).unwrap();
    assert!((l1_cross_class(&ones, &[0, 0, 1, 1]).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn init_single_component_is_batch_mean() {
    let z = Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    let p = init_from_data(&z, &[0], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((p.means.get(&[0, 0]) - 3.0).abs() < 1e-12);
    assert!((p.means.get(&[0, 1]) - 4.0).abs() < 1e-12);
    assert_eq!(p.logits.data(), &[0.0]);
    // σ² = mean within-cluster variance per coordinate = 5.
    assert!((p.covariance(0).get(&[0, 0]) - 5.0).abs() < 1e-9);
}

#[test]
fn init_finds_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut data = Vec::new();
    for i in 0..200 {
        let c = if i % 2 == 0 { 5.0 } else { -5.0 };
        data.push(c + noise.sample(&mut rng));
        data.push(c + noise.sample(&mut rng));
    }
    let z = Tensor::new(vec![200, 2], data).unwrap();
    let p = init_from_data(&z, &[0, 1], None, &mut rng).unwrap();
    let mut found = [false, false];
    for k in 0..2 {
        let m = p.means.row(k);
        for (slot, c) in [5.0, -5.0].iter().enumerate() {
            if ((m[0] - c).powi(2) + (m[1] - c).powi(2)).sqrt() < 0.1 {
                found[slot] = true;
            }
        }
    }
    assert_eq!(found, [true, true]);
}

#[test]
fn init_saturates_to_samples() {
    let z = Tensor::new(vec![3, 1], vec![-1.0, 0.5, 4.0]).unwrap();
    let p = init_from_data(&z, &[0, 0, 1], None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut m: Vec<f64> = p.means.data().to_vec();
    m.sort_by(f64::total_cmp);
    assert_eq!(m, vec![-1.0, 0.5, 4.0]);
}

#[test]
fn init_per_class_uses_labels() {
    let z = Tensor::new(vec![4, 1], vec![0.0, 0.2, 10.0, 10.2]).unwrap();
    let p = init_from_data(&z, &[1, 0], Some(&[0, 0, 1, 1]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((p.means.get(&[0, 0]) - 10.1).abs() < 1e-12);
    assert!((p.means.get(&[1, 0]) - 0.1).abs() < 1e-12);
    assert!(matches!(
        init_from_data(&z, &[0, 1], Some(&[0, 0, 0, 0]), &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::MissingClass(1))
    ));
}

#[test]
fn nll_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, dim, m) = (3, 2, 5);
    let logits = Tensor::randn(&[n], 0.5, &mut rng);
    let means = Tensor::randn(&[n, dim], 1.0, &mut rng);
    let raw = Tensor::randn(&[n, dim, dim], 0.3, &mut rng);
    let z = Tensor::randn(&[m, dim], 1.0, &mut rng);
    let eval = |l: &Tensor, mu: &Tensor, r: &Tensor, zz: &Tensor| {
        let p = GplParams::new(l.clone(), mu.clone(), r.clone(), vec![0, 0, 1]).unwrap();
        gmm_nll(&p, zz).unwrap()
    };
    let mut g = Graph::new();
    let vars = GplVars {
        logits: g.leaf(logits.clone()).unwrap(),
        means: g.leaf(means.clone()).unwrap(),
        chol_raw: g.leaf(raw.clone()).unwrap(),
    };
    let zv = g.leaf(z.clone()).unwrap();
    let fwd = forward(&mut g, &vars, zv).unwrap();
    let loss = nll_graph(&mut g, &fwd).unwrap();
    let grads = g.backward(loss).unwrap();

    let fd = finite_difference_gradient(|t| eval(t, &means, &raw, &z), &logits, 1e-5);
    assert!(max_relative_error(&grads.get(vars.logits), &fd, 1e-6) < 1e-4);
    let fd = finite_difference_gradient(|t| eval(&logits, t, &raw, &z), &means, 1e-5);
    assert!(max_relative_error(&grads.get(vars.means), &fd, 1e-6) < 1e-4);
    let fd = finite_difference_gradient(|t| eval(&logits, &means, t, &z), &raw, 1e-5);
    assert!(max_relative_error(&grads.get(vars.chol_raw), &fd, 1e-6) < 1e-4);
    let fd = finite_difference_gradient(|t| eval(&logits, &means, &raw, t), &z, 1e-5);
    assert!(max_relative_error(&grads.get(zv), &fd, 1e-6) < 1e-4);
}
