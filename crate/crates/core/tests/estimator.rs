use compost::estimator::{sscomp, sscomp2, CountMatrix, EstimateOptions, ZeroCollapse};
use compost::selection::LambdaGrid;
use compost::{BaseMeasure, CountVector};
use proptest::prelude::*;

fn options() -> EstimateOptions {
    EstimateOptions {
        grid: LambdaGrid::span(-4.0, 1.0, 0.2).unwrap(),
        ..EstimateOptions::default()
    }
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..15, 1usize..5).prop_flat_map(|(m, s)| {
        prop::collection::vec(
            prop::collection::vec(0u32..25, m)
                .prop_filter("n > 1", |c| c.iter().sum::<u32>() > 1)
                .prop_map(|c| c.into_iter().map(f64::from).collect::<Vec<f64>>()),
            s,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_estimate_is_permutation_equivariant(columns in matrix(), rot in 0usize..20) {
        let k = &columns[0];
        let m = k.len();
        let rotated: Vec<f64> = (0..m).map(|y| k[(y + rot) % m]).collect();
        let a = sscomp(&CountVector::new(k.clone()).unwrap(), None, &options()).unwrap();
        let b = sscomp(&CountVector::new(rotated).unwrap(), None, &options()).unwrap();
        prop_assert_eq!(a.trace.chosen_index, b.trace.chosen_index);
        for y in 0..m {
            prop_assert!((b.composition().as_slice()[y] - a.composition().as_slice()[(y + rot) % m]).abs() <= 1e-9);
        }
    }

    #[test]
    fn collapse_does_not_change_the_estimate(columns in matrix()) {
        let k = CountVector::new(columns[0].clone()).unwrap();
        let run = |mode| sscomp(&k, None, &EstimateOptions { zero_collapse: mode, ..options() }).unwrap();
        let (never, always) = (run(ZeroCollapse::Never), run(ZeroCollapse::Always));
        prop_assert_eq!(never.trace.chosen_index, always.trace.chosen_index);
        for (a, b) in never.composition().as_slice().iter().zip(always.composition().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn two_stage_columns_follow_their_inputs(columns in matrix()) {
        let s = columns.len();
        let counts = CountMatrix::from_columns(columns.clone()).unwrap();
        let est = sscomp2(&counts, &options()).unwrap();
        prop_assert_eq!(est.matrix.n_samples(), s);
        prop_assert_eq!(est.matrix.n_cells(), counts.n_cells());
        for j in 0..s {
            let col = est.matrix.column(j).as_slice();
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(col.iter().all(|&p| p > 0.0));
            prop_assert!(est.columns[j].kl_from_prior >= 0.0);
        }
        // Reversing the columns reverses the output.
        let reversed: Vec<Vec<f64>> = columns.iter().rev().cloned().collect();
        let back = sscomp2(&CountMatrix::from_columns(reversed).unwrap(), &options()).unwrap();
        for j in 0..s {
            let a = est.matrix.column(j).as_slice();
            let b = back.matrix.column(s - 1 - j).as_slice();
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn duplicate_columns_give_duplicate_estimates() {
    let col = vec![4.0, 0.0, 7.0, 1.0, 0.0, 12.0];
    let counts = CountMatrix::from_columns(vec![col.clone(), vec![1.0; 6], col]).unwrap();
    let est = sscomp2(&counts, &options()).unwrap();
    assert_eq!(est.matrix.column(0), est.matrix.column(2));
}

#[test]
fn prior_is_the_collapsed_fit() {
    let columns = vec![vec![3.0, 0.0, 5.0, 2.0], vec![0.0, 1.0, 9.0, 4.0]];
    let counts = CountMatrix::from_columns(columns).unwrap();
    let est = sscomp2(&counts, &options()).unwrap();
    let collapsed = sscomp(&counts.collapsed(), None, &options()).unwrap();
    assert_eq!(est.prior.composition(), collapsed.composition());
    // Each column is then fitted against the prior as base measure.
    let w = BaseMeasure::from(collapsed.composition());
    let second = sscomp(counts.column(1), Some(&w), &options()).unwrap();
    assert_eq!(est.matrix.column(1), second.composition());
}

#[test]
fn zeros_get_positive_mass() {
    let k = CountVector::new(vec![0.0, 0.0, 10.0, 0.0]).unwrap();
    let est = sscomp(&k, None, &EstimateOptions::default()).unwrap();
    assert!(est.composition().as_slice().iter().all(|&p| p > 0.0));
    assert_eq!(est.zero_cells, 3);
}

#[test]
fn zero_column_is_reported_by_index() {
    let err = CountMatrix::from_columns(vec![vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap_err();
    assert!(err.to_string().contains('1'), "{err}");
}
