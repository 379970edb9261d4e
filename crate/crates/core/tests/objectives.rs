use promim::numerics::{Graph, Tensor};
use promim::objectives::{class_probabilities, cross_entropy, kg_loss, total_loss};
use promim_testkit::laws::objective_identities;
use proptest::collection::vec;
use proptest::prelude::*;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(n_classes, dim, class rows, image row)` with entries in [-1, 1].
fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..7, 2usize..6).prop_flat_map(|(c, d)| {
        (
            Just(c),
            Just(d),
            vec(-1.0f64..1.0, c * d),
            vec(-1.0f64..1.0, d),
        )
    })
}

#[test]
fn kg_and_total_loss_identities() {
    for check in objective_identities(50).unwrap() {
        assert!(check.pass, "{}: {}", check.name, check.detail);
    }
}

proptest! {
    #[test]
    fn probabilities_are_normalized((c, d, w, x) in instance(), tau in 1e-3f64..2.0) {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, d, x).unwrap());
        let wv = g.constant(Tensor::matrix(c, d, w).unwrap());
        let p = class_probabilities(&mut g, xv, wv, tau).unwrap();
        let probs = g.value(p.probs).data().to_vec();
        prop_assert!(probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ce = cross_entropy(&mut g, &p, &[0]).unwrap();
        prop_assert!(g.scalar(ce).unwrap() >= 0.0);
    }

    #[test]
    fn argmax_ignores_temperature((c, d, w, x) in instance(), tau in 1e-3f64..5.0) {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, d, x).unwrap());
        let wv = g.constant(Tensor::matrix(c, d, w).unwrap());
        let p = class_probabilities(&mut g, xv, wv, tau).unwrap();
        let sims = g.value(p.sims).data().to_vec();
        prop_assert_eq!(argmax(g.value(p.probs).data()), argmax(&sims));
    }

    #[test]
    fn kg_is_nonnegative_and_zero_only_on_match(
        (c, d, w, r) in (2usize..6, 2usize..6).prop_flat_map(|(c, d)| {
            (Just(c), Just(d), vec(-1.0f64..1.0, c * d), vec(-1.0f64..1.0, c * d))
        })
    ) {
        let mut g = Graph::new();
        let reference = Tensor::matrix(c, d, r.clone()).unwrap();
        let wv = g.constant(Tensor::matrix(c, d, w.clone()).unwrap());
        let kg = kg_loss(&mut g, wv, &reference).unwrap();
        let v = g.scalar(kg).unwrap();
        prop_assert!(v >= 0.0);
        let equal = w.iter().zip(&r).all(|(a, b)| (a - b).abs() <= 1e-12);
        prop_assert_eq!(v <= 1e-24 * (c * d) as f64, equal);
    }

    #[test]
    fn total_is_linear_in_lambda(
        ce in 0.0f64..10.0,
        kg in 0.0f64..4.0,
        l1 in 0.0f64..10.0,
        l2 in 0.0f64..10.0,
    ) {
        let mut g = Graph::new();
        let cv = g.constant(Tensor::scalar(ce));
        let kv = g.constant(Tensor::scalar(kg));
        let (_, a) = total_loss(&mut g, cv, Some(kv), l1 + l2, None).unwrap();
        let (_, b) = total_loss(&mut g, cv, Some(kv), l1, None).unwrap();
        prop_assert!((a.total - b.total - l2 * kg).abs() <= 1e-12);
    }
}
