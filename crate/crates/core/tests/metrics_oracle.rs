//! Weighted metrics checked against exact rational arithmetic.

use lasi_core::training::Metrics;
use num_rational::Ratio;
use proptest::prelude::*;

type Q = Ratio<u64>;

struct Exact {
    accuracy: Q,
    precision: Q,
    recall: Q,
    f1: Q,
}

fn exact(c: &[Vec<u64>]) -> Exact {
    let k = c.len();
    let n: u64 = c.iter().flatten().sum();
    let zero = Q::from_integer(0);
    let (mut p, mut r, mut f) = (zero, zero, zero);
    for j in 0..k {
        let support: u64 = c[j].iter().sum();
        let predicted: u64 = (0..k).map(|i| c[i][j]).sum();
        let tp = c[j][j];
        let pj = if predicted == 0 { zero } else { Q::new(tp, predicted) };
        let rj = if support == 0 { zero } else { Q::new(tp, support) };
        let fj = if pj + rj == zero {
            zero
        } else {
            Q::from_integer(2) * pj * rj / (pj + rj)
        };
        let w = Q::from_integer(support);
        p += w * pj;
        r += w * rj;
        f += w * fj;
    }
    let nq = Q::from_integer(n);
    Exact {
        accuracy: Q::new((0..k).map(|i| c[i][i]).sum(), n),
        precision: p / nq,
        recall: r / nq,
        f1: f / nq,
    }
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn assert_matches(c: Vec<Vec<u64>>) {
    let e = exact(&c);
    let m = Metrics::from_confusion(c).unwrap();
    for (got, want) in [
        (m.accuracy, e.accuracy),
        (m.precision, e.precision),
        (m.recall, e.recall),
        (m.f1, e.f1),
    ] {
        assert!((got - to_f64(want)).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn worked_two_class_example() {
    let e = exact(&[vec![2, 1], vec![0, 3]]);
    assert_eq!(e.accuracy, Q::new(5, 6));
    assert_eq!(e.precision, Q::new(7, 8));
    assert_eq!(e.recall, Q::new(5, 6));
    assert_matches(vec![vec![2, 1], vec![0, 3]]);
}

#[test]
fn crafted_matrices() {
    assert_matches(vec![vec![5, 0, 0], vec![0, 0, 0], vec![2, 0, 1]]);
    assert_matches(vec![vec![0, 4], vec![3, 0]]);
    assert_matches(vec![
        vec![10, 2, 0, 1, 0],
        vec![1, 7, 3, 0, 0],
        vec![0, 2, 20, 4, 1],
        vec![0, 0, 5, 30, 2],
        vec![1, 0, 0, 3, 9],
    ]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn random_confusion_matrices(cells in proptest::collection::vec(0u64..40, 25)) {
        prop_assume!(cells.iter().sum::<u64>() > 0);
        let c: Vec<Vec<u64>> = cells.chunks(5).map(<[u64]>::to_vec).collect();
        assert_matches(c);
    }

    #[test]
    fn predictions_and_confusion_agree(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = Metrics::from_predictions(5, &gold, &pred).unwrap();
        let trace: u64 = (0..5).map(|i| m.confusion[i][i]).sum();
        prop_assert_eq!(m.n_examples, pairs.len() as u64);
        prop_assert!((m.accuracy - trace as f64 / pairs.len() as f64).abs() <= 1e-12);
    }
}
