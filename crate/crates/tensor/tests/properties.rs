use neurimg_tensor::{io, Tape, Tensor};
use proptest::prelude::*;

fn row_entry() -> impl Strategy<Value = f64> {
    prop_oneof![4 => -50.0f64..50.0, 1 => Just(f64::NEG_INFINITY)]
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        pool in proptest::collection::vec(row_entry(), 36),
    ) {
        let x = Tensor::new(&[rows, cols], pool[..rows * cols].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let s = t.softmax(v, 1).unwrap();
        let s = t.value(s);
        for r in 0..rows {
            let all_masked = x.row(r).iter().all(|v| *v == f64::NEG_INFINITY);
            let total: f64 = s.row(r).iter().sum();
            prop_assert!(s.row(r).iter().all(|p| *p >= 0.0));
            if all_masked {
                prop_assert_eq!(total, 0.0);
            } else {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unt1_round_trips(shape in proptest::collection::vec(1usize..4, 0..4), fill in -1e6f64..1e6) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| fill * i as f64 - 0.5).collect();
        let t = Tensor::new(&shape, data).unwrap();
        prop_assert_eq!(io::decode(&io::encode(&t)).unwrap(), t);
    }
}
