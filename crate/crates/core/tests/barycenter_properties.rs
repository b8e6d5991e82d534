use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seot_core::barycenter::{attach_target, class_mass, fit_barycenter, BarycenterConfig};
use seot_core::measures::{cost_matrix, uniform_measure, DataMatrix, LabeledDomain};
use seot_core::ot::{exact_ot_oracle, SinkhornConfig};

fn random_domain(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> LabeledDomain {
    let pts = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0) + shift);
    let labels = (0..n).map(|i| i % 2).collect();
    LabeledDomain::uniform(DataMatrix::new(pts).unwrap(), Some(labels)).unwrap()
}

fn translate(d: &LabeledDomain, v: &[f64]) -> LabeledDomain {
    let mut pts = d.points().as_array().clone();
    for mut row in pts.rows_mut() {
        for (x, s) in row.iter_mut().zip(v) {
            *x += s;
        }
    }
    LabeledDomain::uniform(DataMatrix::new(pts).unwrap(), d.labels().map(<[usize]>::to_vec))
        .unwrap()
}

fn max_matched_distance(a: &DataMatrix, b: &DataMatrix) -> f64 {
    a.as_array()
        .rows()
        .into_iter()
        .map(|x| {
            b.as_array()
                .rows()
                .into_iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[test]
fn objective_trace_never_increases() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_sources = rng.random_range(1..=3);
        let sources: Vec<_> = (0..n_sources)
            .map(|i| {
                let n = rng.random_range(8..30);
                random_domain(&mut rng, n, 2, i as f64 * 0.5)
            })
            .collect();
        let cfg = BarycenterConfig { n_atoms: Some(6), seed, ..Default::default() };
        let ot = SinkhornConfig { epsilon: 0.05, ..Default::default() };
        let b = fit_barycenter(&sources, &cfg, &ot).unwrap();
        for w in b.objective_trace().windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn identical_copies_recover_the_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Well separated points so entropic blurring between atoms is negligible.
    let pts = Array2::from_shape_fn((10, 2), |(i, j)| {
        (if j == 0 { (i % 5) as f64 } else { (i / 5) as f64 }) * 1.5 + rng.random_range(-0.2..0.2)
    });
    let domain = LabeledDomain::uniform(DataMatrix::new(pts).unwrap(), Some(vec![0; 10])).unwrap();
    for copies in [2, 3, 5] {
        let sources = vec![domain.clone(); copies];
        let cfg = BarycenterConfig { n_atoms: Some(10), ..Default::default() };
        let b = fit_barycenter(&sources, &cfg, &SinkhornConfig::default()).unwrap();
        assert!(max_matched_distance(domain.points(), b.support()) < 1e-3);
        assert!(max_matched_distance(b.support(), domain.points()) < 1e-3);
    }
}

#[test]
fn translation_moves_the_support_along() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sources: Vec<_> = (0..2).map(|_| random_domain(&mut rng, 20, 2, 0.0)).collect();
    let v = [3.0, -1.5];
    let shifted: Vec<_> = sources.iter().map(|s| translate(s, &v)).collect();
    let cfg = BarycenterConfig { n_atoms: Some(7), seed: 5, ..Default::default() };
    let ot = SinkhornConfig { epsilon: 0.05, ..Default::default() };
    let a = fit_barycenter(&sources, &cfg, &ot).unwrap();
    let b = fit_barycenter(&shifted, &cfg, &ot).unwrap();
    for (x, y) in a.support().as_array().rows().into_iter().zip(b.support().as_array().rows()) {
        for ((p, q), s) in x.iter().zip(y).zip(&v) {
            assert!((q - p - s).abs() < 1e-6, "{p} + {s} vs {q}");
        }
    }
}

#[test]
fn stored_plans_have_barycenter_row_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sources: Vec<_> = (0..3).map(|i| random_domain(&mut rng, 15, 3, i as f64)).collect();
    let ot = SinkhornConfig::default();
    let b = fit_barycenter(&sources, &BarycenterConfig::default(), &ot).unwrap();
    assert_eq!(b.n_atoms(), 15);
    for plan in b.plans_to_sources() {
        let err: f64 = plan
            .row_marginal()
            .iter()
            .zip(b.weights())
            .map(|(r, w)| (r - w).abs())
            .sum();
        assert!(err <= ot.tol);
    }
    assert!(b.weights().iter().all(|w| (w - 1.0 / 15.0).abs() < 1e-15));
}

#[test]
fn target_equal_to_support_gives_a_diagonal_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let s = random_domain(&mut rng, 5, 2, 0.0);
        let cfg = BarycenterConfig { n_atoms: Some(5), ..Default::default() };
        let b = fit_barycenter(std::slice::from_ref(&s), &cfg, &SinkhornConfig::default()).unwrap();
        let target = LabeledDomain::uniform(b.support().clone(), None).unwrap();
        let ot = SinkhornConfig { epsilon: 1e-3, ..Default::default() };
        let b = attach_target(b, &target, &ot).unwrap();
        let mu = uniform_measure(b.support().clone()).unwrap();
        let c = cost_matrix(b.support(), b.support(), 2.0).unwrap();
        let exact = exact_ot_oracle(&mu, &mu, &c).unwrap();
        let plan = b.plan_to_target().unwrap().gamma();
        for (x, y) in plan.iter().zip(exact.gamma()) {
            assert!((x - y).abs() < 1e-3);
        }
        for i in 0..5 {
            assert!((plan[[i, i]] - 0.2).abs() < 1e-3);
        }
    }
}

proptest! {
    #[test]
    fn label_argmax_ignores_plan_scale(
        entries in prop::collection::vec(0.0f64..1.0, 12),
        labels in prop::collection::vec(0usize..3, 4),
        scale in 1e-3f64..1e3,
    ) {
        let g = Array2::from_shape_vec((3, 4), entries).unwrap();
        let scaled = g.mapv(|x| x * scale);
        let a = class_mass(&[&g], &[1.0], &[&labels], 3).unwrap();
        let b = class_mass(&[&scaled], &[1.0], &[&labels], 3).unwrap();
        let argmax = |m: &Array2<f64>, k: usize| {
            let row = m.row(k);
            (0..3).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        };
        for k in 0..3 {
            prop_assert_eq!(argmax(&a, k), argmax(&b, k));
        }
    }
}
