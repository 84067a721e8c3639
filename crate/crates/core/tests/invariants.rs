//! Property-based invariants: encoding round trips, layout permutation,
//! clipping contract and metric ranges over randomized inputs.

mod common;

use proptest::collection::vec;
use proptest::prelude::*;

use mpsd::dp::clip_gradient;
use mpsd::encoding::{
    decode_record, encode_record, infer_schema, order_features, SchemaHints, Table,
};
use mpsd::metrics::{ks_complement, tv_complement};
use mpsd::mps::{GradientSet, MpsModel};
use mpsd::tensor::Tensor;

/// Rows over two categorical and two integer columns.
fn rows_strategy() -> impl Strategy<Value = Vec<(u8, u8, i32, i32)>> {
    vec((0u8..5, 0u8..3, 0i32..1000, -50i32..50), 2..40)
}

fn table_from(rows: &[(u8, u8, i32, i32)]) -> Table {
    let columns = vec!["color".into(), "flag".into(), "amount".into(), "delta".into()];
    let data = rows
        .iter()
        .map(|(a, b, x, y)| {
            vec![
                Some(format!("c{a}")),
                Some(format!("f{b}")),
                Some(x.to_string()),
                Some(y.to_string()),
            ]
        })
        .collect();
    Table::new(columns, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trips(rows in rows_strategy()) {
        let table = table_from(&rows);
        let schema = order_features(&infer_schema(&table, &SchemaHints::default()).unwrap());
        for row in &table.rows {
            let enc = encode_record(row, &schema).unwrap();
            let dec = decode_record(&enc, &schema).unwrap();
            let original: Vec<String> =
                row.iter().map(|c| c.clone().unwrap()).collect();
            prop_assert_eq!(dec, original);
        }
    }

    #[test]
    fn layout_is_a_permutation(rows in rows_strategy()) {
        let table = table_from(&rows);
        let inferred = infer_schema(&table, &SchemaHints::default()).unwrap();
        let ordered = order_features(&inferred);
        let mut before = inferred.layout.clone();
        let mut after = ordered.layout.clone();
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
        // Numeric digit blocks stay contiguous and most-significant first.
        for (fi, spec) in ordered.features.iter().enumerate() {
            if let Some(digits) = spec.num_digits.map(|d| d as usize) {
                let positions: Vec<usize> = ordered
                    .layout
                    .iter()
                    .enumerate()
                    .filter(|(_, (f, _))| *f == fi)
                    .map(|(pos, _)| pos)
                    .collect();
                prop_assert_eq!(positions.len(), digits);
                for pair in positions.windows(2) {
                    prop_assert_eq!(pair[1], pair[0] + 1);
                }
                let order: Vec<usize> = positions
                    .iter()
                    .map(|&p| ordered.layout[p].1)
                    .collect();
                prop_assert_eq!(order, (0..digits).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn clipping_never_exceeds_threshold(
        values in vec(-100.0f64..100.0, 1..64),
        threshold in 0.01f64..10.0,
    ) {
        let n = values.len();
        let g = GradientSet {
            cores: vec![Tensor::from_vec(vec![1, n, 1], values).unwrap()],
        };
        let clipped = clip_gradient(&g, threshold);
        prop_assert!(clipped.norm() <= threshold + 1e-9);
        // Direction is preserved: clipped = alpha * g with alpha in (0, 1].
        if g.norm() > 0.0 {
            let alpha = clipped.norm() / g.norm();
            for (c, o) in clipped.cores[0].data().iter().zip(g.cores[0].data()) {
                prop_assert!((c - alpha * o).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distribution_metrics_stay_in_unit_range(
        real in vec(-50.0f64..50.0, 1..60),
        synth in vec(-50.0f64..50.0, 1..60),
    ) {
        let ks = ks_complement(&real, &synth).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks));
        let to_cats = |vs: &[f64]| -> Vec<String> {
            vs.iter().map(|v| format!("b{}", (*v as i64) / 10)).collect()
        };
        let rc = to_cats(&real);
        let sc = to_cats(&synth);
        let tv = tv_complement(
            &rc.iter().map(String::as_str).collect::<Vec<_>>(),
            &sc.iter().map(String::as_str).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert!((0.0..=1.0).contains(&tv));
    }

    #[test]
    fn sampled_records_always_decode(seed in 0u64..500) {
        let schema = common::small_schema(&[2, 3, 2]);
        let model = MpsModel::init(schema.clone(), 3, seed);
        for rec in model.sample(20, seed + 1) {
            prop_assert!(decode_record(&rec, &schema).is_ok());
            prop_assert!(model.log_prob(&rec).unwrap().is_finite());
        }
    }
}
