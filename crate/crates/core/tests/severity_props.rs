mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::brute_betweenness;
use vulnkit::graphs::build_call_graph;
use vulnkit::ir::parse_program;
use vulnkit::severity::{
    betweenness, predict_features, train_model, SeverityModel, TrainingMeta, TrainingRow, FEATURES,
};

fn dataset(seed: u64, n: usize) -> Vec<TrainingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut features = [0.0; 7];
            for f in &mut features {
                *f = rng.random_range(0.0..5.0);
            }
            TrainingRow {
                features,
                score: rng.random_range(0.0..10.0),
            }
        })
        .collect()
}

/// Program whose call graph has exactly the given edges over `f0..fn`.
fn call_graph_program(n: usize, edges: &[(usize, usize)]) -> String {
    let mut text = String::from("entry f0\n");
    for i in 0..n {
        text += &format!("fn f{i}()\nentry:\n");
        for &(_, b) in edges.iter().filter(|(a, _)| *a == i) {
            text += &format!("  call f{b}()\n");
        }
        text += "  ret\n";
    }
    text
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescaling_a_column_rescales_its_weight(seed in any::<u64>(), col in 0..7usize, c in 0.1f64..10.0) {
        let rows = dataset(seed, 30);
        let scaled: Vec<TrainingRow> = rows
            .iter()
            .map(|r| {
                let mut f = r.features;
                f[col] *= c;
                TrainingRow { features: f, score: r.score }
            })
            .collect();
        let a = train_model(&rows).unwrap();
        let b = train_model(&scaled).unwrap();
        let (wa, wb) = (a.weight_vector().unwrap(), b.weight_vector().unwrap());
        prop_assert!((wb[col] * c - wa[col]).abs() <= 1e-9 * (1.0 + wa[col].abs()));
        for (r, s) in rows.iter().zip(&scaled) {
            prop_assert!((a.raw(&r.features).unwrap() - b.raw(&s.features).unwrap()).abs() < 1e-9);
            prop_assert!((predict_features(&a, &r.features).unwrap() - predict_features(&b, &s.features).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn predictions_stay_in_range(
        w in proptest::array::uniform7(-50.0f64..50.0),
        x in proptest::array::uniform7(-100.0f64..100.0),
        b in -50.0f64..50.0,
    ) {
        let m = SeverityModel {
            weights: FEATURES.iter().zip(w).map(|(k, v)| (k.to_string(), v)).collect(),
            intercept: b,
            training: TrainingMeta { rows: 0, residual_norm: 0.0 },
        };
        let s = predict_features(&m, &x).unwrap();
        prop_assert!((0.0..=10.0).contains(&s));
    }

    #[test]
    fn betweenness_matches_path_enumeration(
        n in 1..=8usize,
        raw in proptest::collection::vec((0..8usize, 0..8usize), 0..16),
    ) {
        let edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % n, b % n)).collect();
        let p = parse_program(&call_graph_program(n, &edges)).unwrap();
        let cg = build_call_graph(&p);
        let got = betweenness(&cg);
        for (k, v) in brute_betweenness(&cg) {
            prop_assert!((got[&k] - v).abs() < 1e-12, "{}: {} vs {}", k, got[&k], v);
        }
    }
}
