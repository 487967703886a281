use nalgebra::DMatrix;
use nslfa::model::LabelColumn;
use nslfa::{apply_zero_pattern, validate_design, Dataset, DesignMatrix, Error};
use proptest::prelude::*;

#[test]
fn validate_design_examples() {
    let q = validate_design(&[[1, 0], [0, 1]]).unwrap();
    assert_eq!((q.items(), q.factors()), (2, 2));
    assert_eq!(validate_design(&[[1, 2]]), Err(Error::NonBinaryEntry { row: 0, col: 1, value: 2 }));
    assert_eq!(validate_design(&[[0, 0], [1, 1]]), Err(Error::AllZeroRow(0)));
    assert_eq!(validate_design::<[i64; 0]>(&[]), Err(Error::EmptyMatrix));
    assert_eq!(validate_design(&[vec![1, 0], vec![1]]), Err(Error::RaggedMatrix));
}

#[test]
fn apply_zero_pattern_examples() {
    let a = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
    let q10 = validate_design(&[[1, 0]]).unwrap();
    let q11 = validate_design(&[[1, 1]]).unwrap();
    assert_eq!(apply_zero_pattern(&a, &q10).unwrap().a, DMatrix::from_row_slice(1, 2, &[3.0, 0.0]));
    assert_eq!(apply_zero_pattern(&a, &q11).unwrap().a, a);
    let ones = DMatrix::from_element(2, 2, 1.0);
    let eye = validate_design(&[[1, 0], [0, 1]]).unwrap();
    assert_eq!(apply_zero_pattern(&ones, &eye).unwrap().a, DMatrix::identity(2, 2));
    assert!(matches!(apply_zero_pattern(&ones, &q10), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn design_csv() {
    let q = DesignMatrix::read_csv("f1,f2\n1,0\n0,1\n1,1\n".as_bytes()).unwrap();
    assert_eq!(q.to_rows(), vec![vec![1, 0], vec![0, 1], vec![1, 1]]);
    let q = DesignMatrix::read_csv("1, 0\n\n0, 1\n".as_bytes()).unwrap();
    assert_eq!(q.items(), 2);
    assert!(matches!(DesignMatrix::read_csv("1,0\nx,1\n".as_bytes()), Err(Error::Parse(_))));
    assert_eq!(DesignMatrix::read_csv("1,3\n".as_bytes()), Err(Error::NonBinaryEntry { row: 0, col: 1, value: 3 }));
}

#[test]
fn data_csv() {
    let d = Dataset::read_csv("a,b\n1,2\n3,4\n5,6\n".as_bytes(), LabelColumn::Auto).unwrap();
    assert_eq!(d.y, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(d.names, Some(vec!["a".into(), "b".into()]));
    assert!(d.labels.is_none());

    let d = Dataset::read_csv("1,2,x\n3,4,y\n".as_bytes(), LabelColumn::Auto).unwrap();
    assert_eq!(d.j(), 2);
    assert_eq!(d.labels, Some(vec!["x".into(), "y".into()]));

    let d = Dataset::read_csv("1,2,0\n3,4,1\n".as_bytes(), LabelColumn::Last).unwrap();
    assert_eq!(d.labels, Some(vec!["0".into(), "1".into()]));

    assert!(matches!(Dataset::read_csv("1,2\n3,q\n4,5\n".as_bytes(), LabelColumn::None), Err(Error::Parse(_))));
    assert_eq!(Dataset::read_csv("1,2\n".as_bytes(), LabelColumn::None), Err(Error::TooFewRows { min: 2, got: 1 }));
    assert_eq!(Dataset::new(DMatrix::from_element(3, 1, f64::NAN)), Err(Error::NonFiniteData { row: 0, col: 0 }));
}

fn design_and_loadings() -> impl Strategy<Value = (Vec<Vec<i64>>, Vec<f64>)> {
    (1usize..8, 1usize..5).prop_flat_map(|(j, k)| {
        let row = prop::collection::vec(0i64..2, k).prop_filter("nonzero row", |r| r.iter().any(|&v| v == 1));
        (prop::collection::vec(row, j), prop::collection::vec(-3.0f64..3.0, j * k))
    })
}

proptest! {
    #[test]
    fn zero_pattern_is_idempotent_and_exact((rows, vals) in design_and_loadings()) {
        let q = validate_design(&rows).unwrap();
        let a = DMatrix::from_row_slice(q.items(), q.factors(), &vals);
        let once = apply_zero_pattern(&a, &q).unwrap();
        let twice = apply_zero_pattern(&once.a, &q).unwrap();
        prop_assert_eq!(&once.a, &twice.a);
        for j in 0..q.items() {
            for k in 0..q.factors() {
                if q.get(j, k) {
                    prop_assert_eq!(once.a[(j, k)], a[(j, k)]);
                } else {
                    prop_assert_eq!(once.a[(j, k)].to_bits(), 0.0f64.to_bits());
                }
            }
        }
        prop_assert!(once.respects(&q));
    }
}
