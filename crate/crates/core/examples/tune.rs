//! Hyperparameter scratchpad: trains on the census-style fixture and
//! prints the NLL trace ends plus fidelity aggregates.
//!
//! Usage: tune <rows> <epochs> <num_batches> <descent_steps> <batch> <lr> <bond> [mechanism eps]

#[path = "../tests/common/mod.rs"]
mod common;

use mpsd::dp::{self, ClipConfig, Mechanism, NoiseConfig, TrainConfig};
use mpsd::encoding::{decode_record, encode_record, infer_schema, order_features, SchemaHints, Table};
use mpsd::metrics::{self, EvalConfig};
use mpsd::mps::MpsModel;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rows: usize = args[0].parse().unwrap();
    let epochs: usize = args[1].parse().unwrap();
    let num_batches: usize = args[2].parse().unwrap();
    let descent_steps: usize = args[3].parse().unwrap();
    let batch_size: usize = args[4].parse().unwrap();
    let learning_rate: f64 = args[5].parse().unwrap();
    let bond: usize = args[6].parse().unwrap();
    let mechanism = args.get(7).map(|s| s.as_str()).unwrap_or("none");
    let epsilon: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let real = common::adult_like(rows, 2024);
    let mut hints = SchemaHints::default();
    hints.target_feature = Some("income".into());
    let schema = order_features(&infer_schema(&real, &hints).unwrap());
    let records: Vec<_> = real
        .rows
        .iter()
        .map(|r| encode_record(r, &schema).unwrap())
        .collect();

    let (mech, clip) = match mechanism {
        "gaussian" => (Mechanism::Gaussian, Some(1.0)),
        "laplacian" => (Mechanism::Laplacian, Some(1.0)),
        _ => (Mechanism::None, None),
    };
    let tc = TrainConfig {
        epochs,
        num_batches,
        descent_steps,
        batch_size,
        learning_rate,
        lr_decay: args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1.0),
        seed: 11,
    };
    let noise = NoiseConfig {
        mechanism: mech,
        epsilon,
        ..NoiseConfig::default()
    };
    let model = MpsModel::init(schema.clone(), bond, 11);
    let t0 = std::time::Instant::now();
    let result = dp::train(&model, &records, &tc, &ClipConfig { threshold: clip }, &noise).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let n = result.trace.len();
    let head: Vec<f64> = result.trace.iter().take(5).map(|r| r.batch_nll).collect();
    let tail: Vec<f64> = result.trace.iter().skip(n.saturating_sub(5)).map(|r| r.batch_nll).collect();
    println!("updates {n}, train {train_secs:.1}s");
    println!("nll head {head:?}");
    println!("nll tail {tail:?}");

    let t1 = std::time::Instant::now();
    let columns: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    let synth_sets: Vec<Table> = (0..5)
        .map(|k| {
            let rows: Vec<Vec<Option<String>>> = result
                .model
                .sample(rows, 777 + k)
                .iter()
                .map(|rec| decode_record(rec, &schema).unwrap().into_iter().map(Some).collect())
                .collect();
            Table::new(columns.clone(), rows).unwrap()
        })
        .collect();
    let eval_cfg = EvalConfig { seed: 5, ..EvalConfig::default() };
    let report = metrics::evaluate(&real, &synth_sets, &schema, &eval_cfg).unwrap();
    println!("sample+eval {:.1}s", t1.elapsed().as_secs_f64());
    for (metric, ms) in &report.aggregates {
        println!("{metric:<24} {:.4} +- {:.4}", ms.mean, ms.std);
    }
    if std::env::var("TUNE_COLUMNS").is_ok() {
        for (col, scores) in &report.column_scores {
            let line: Vec<String> = scores
                .iter()
                .map(|(m, ms)| format!("{m}={:.4}", ms.mean))
                .collect();
            println!("  {col:<16} {}", line.join(" "));
        }
    }
    if std::env::var("TUNE_PAIRS").is_ok() {
        for (a, b, ms) in &report.pair_scores {
            if a == "income" || b == "income" {
                println!("  pair {a:<16} {b:<16} {:.4}", ms.mean);
            }
        }
    }
    if let (Some(r), Some(s)) = (&report.downstream_real, &report.downstream_synth) {
        println!("knn_f1 real {:.4} synth {:.4}", r.knn_f1, s.knn_f1);
        println!("linear_f1 real {:.4} synth {:.4}", r.linear_f1, s.linear_f1);
    }
    println!("overall {:.4}", report.overall_fidelity());
}
