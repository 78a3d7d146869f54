use autograd::{log_sum_exp, Graph, Tensor};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix()) {
        let mut g = Graph::inference();
        let v = g.constant(x);
        let s = g.softmax_rows(v);
        let s = g.value(s);
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(row in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&row) - c).abs() < 1e-9);
    }

    /// d/dA sum(A·B) has entry (i, k) equal to the k-th row sum of B.
    #[test]
    fn matmul_gradient_of_sum(a in matrix(), seed in 0u64..1000) {
        let (n, k) = (a.rows(), a.cols());
        let b = Tensor::matrix(k, 3, (0..k * 3).map(|i| ((seed + i as u64) % 7) as f64 - 3.0).collect());
        let mut g = Graph::new();
        let va = g.leaf(a);
        let vb = g.constant(b.clone());
        let p = g.matmul(va, vb);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let da = grads.wrt(va).unwrap();
        for i in 0..n {
            for j in 0..k {
                prop_assert_eq!(da.row(i)[j], b.row(j).iter().sum::<f64>());
            }
        }
    }
}
