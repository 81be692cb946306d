use dialogeval_tape::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

fn dims() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..9, 1usize..9, 1usize..9).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))
}

proptest! {
    #[test]
    fn matmul_matches_naive_product((a, b) in dims()) {
        let c = a.matmul(&b);
        prop_assert_eq!((c.rows(), c.cols()), (a.rows(), b.cols()));
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let want: f64 = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
                prop_assert!((c.get(i, j) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn transpose_reverses_products((a, b) in dims()) {
        prop_assert_eq!(a.transpose().transpose(), a.clone());
        let left = a.matmul(&b).transpose();
        let right = b.transpose().matmul(&a.transpose());
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
