mod common;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::fixture_path;
use vulnkit::cli::{execute_command, REPORT_FIELDS};
use vulnkit::severity::{write_dataset, TrainingRow};

fn run(args: &[&str], out: Option<&Path>) -> i32 {
    let mut argv: Vec<String> = std::iter::once("vulnkit")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    if let Some(out) = out {
        argv.push("--out".into());
        argv.push(out.display().to_string());
    }
    execute_command(&argv)
}

fn fx(name: &str) -> String {
    fixture_path(name).display().to_string()
}

/// Runs a command that must succeed and returns its parsed report.
fn report(args: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    assert_eq!(run(args, Some(&out)), 0, "{args:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&v).unwrap() + "\n", text, "keys not sorted");
    v
}

#[test]
fn usage_errors_exit_two_and_failures_exit_one() {
    let p1 = fx("p1");
    assert_eq!(run(&[], None), 2);
    assert_eq!(run(&["symex", "--program", &p1, "--strategy", "astar"], None), 2);
    assert_eq!(run(&["munch", "--program", &p1, "--mode", "xy"], None), 2);
    assert_eq!(run(&["sonar", "--program", &p1, "--target", "target", "--combiner", "avg"], None), 2);
    assert_eq!(run(&["symex", "--program", &p1, "--max-states", "many"], None), 2);
    assert_eq!(run(&["parse", "--program", "/no/such/file.ir"], None), 1);
    assert_eq!(run(&["sonar", "--program", &p1, "--target", "nowhere"], None), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ir");
    std::fs::write(&bad, "fn main()\nentry:\n  jmp Nowhere\n").unwrap();
    assert_eq!(run(&["parse", "--program", bad.to_str().unwrap()], None), 1);
}

#[test]
fn every_command_emits_exactly_the_report_fields() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    std::fs::write(seeds.join("a"), [7u8, 0]).unwrap();
    let seeds = seeds.display().to_string();
    let (p1, deep) = (fx("p1"), fx("deep10"));
    let commands: Vec<Vec<&str>> = vec![
        vec!["parse", "--program", &p1],
        vec!["graph", "--program", &p1],
        vec!["symex", "--program", &p1, "--strategy", "dfs"],
        vec!["sonar", "--program", &deep, "--target", "target", "--combiner", "max"],
        vec!["fuzz", "--program", &p1, "--seed-dir", &seeds, "--max-execs", "200"],
        vec!["macke", "--program", &p1],
        vec!["munch", "--program", &p1, "--mode", "SF", "--fuzz-execs", "300"],
    ];
    let expected: BTreeSet<&str> = REPORT_FIELDS.into_iter().collect();
    for args in commands {
        let r = report(&args);
        let keys: BTreeSet<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, expected, "{args:?}");
        assert_eq!(r["command"][0], args[0]);
    }
}

#[test]
fn config_supplies_defaults_that_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# shared\nmax_states = 5\nseed = 9\nunrelated = 1\n").unwrap();
    let (p1, cfg) = (fx("p1"), cfg.display().to_string());

    let r = report(&["symex", "--program", &p1, "--strategy", "random", "--config", &cfg]);
    assert_eq!(r["payload"]["budget"]["maxStates"], 5);
    assert_eq!(r["seedValues"]["seed"], 9);

    let r = report(&["--config", &cfg, "symex", "--program", &p1, "--max-states", "7"]);
    assert_eq!(r["payload"]["budget"]["maxStates"], 7);
    assert_eq!(r["seedValues"]["seed"], 9);
}

#[test]
fn fuzz_reads_seed_files_and_finds_the_p1_crash() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s0"), [0u8, 0]).unwrap();
    let r = report(&["fuzz", "--program", &fx("p1"), "--seed-dir", dir.path().to_str().unwrap()]);
    let crashes = r["payload"]["crashes"].as_array().unwrap();
    assert!(crashes.iter().any(|c| c["input"][0] == 6));
}

#[test]
fn report_command_revalidates_and_rejects_extra_fields() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    assert_eq!(run(&["symex", "--program", &fx("p1")], Some(&first)), 0);
    let original: Value = serde_json::from_str(&std::fs::read_to_string(&first).unwrap()).unwrap();

    let again = report(&["report", "--input", first.to_str().unwrap()]);
    assert_eq!(again["payload"], original["payload"]);
    assert_eq!(again["seedValues"], original["seedValues"]);

    let mut tampered = original.clone();
    tampered["extra"] = Value::Bool(true);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, tampered.to_string()).unwrap();
    assert_eq!(run(&["report", "--input", bad.to_str().unwrap()], None), 1);
}

#[test]
fn severity_train_then_predict_on_a_macke_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<TrainingRow> = (0..12)
        .map(|_| {
            let features: [f64; 7] = std::array::from_fn(|_| rng.random_range(0.0..4.0));
            let score = 1.0 + features.iter().sum::<f64>() * 0.3;
            TrainingRow { features, score }
        })
        .collect();
    write_dataset(std::fs::File::create(&data).unwrap(), &rows).unwrap();
    let model = dir.path().join("model.json");
    let trained = report(&[
        "severity", "train", "--data", data.to_str().unwrap(), "--model-out", model.to_str().unwrap(),
    ]);
    assert_eq!(trained["payload"]["training"]["rows"], 12);

    let macke = dir.path().join("macke.json");
    assert_eq!(run(&["macke", "--program", &fx("chain4")], Some(&macke)), 0);
    let predicted = report(&[
        "severity", "predict", "--model", model.to_str().unwrap(), "--report", macke.to_str().unwrap(),
    ]);
    let preds = predicted["payload"]["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 4);
    for p in preds {
        let s = p["score"].as_f64().unwrap();
        assert!((0.0..=10.0).contains(&s));
    }

    let not_macke = dir.path().join("symex.json");
    assert_eq!(run(&["symex", "--program", &fx("p1")], Some(&not_macke)), 0);
    assert_eq!(
        run(&["severity", "predict", "--model", model.to_str().unwrap(), "--report", not_macke.to_str().unwrap()], None),
        1
    );
}
