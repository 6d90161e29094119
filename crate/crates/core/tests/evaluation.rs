use pemd::eval::{
    accuracy_of, correlation_bench, emit_results, evaluate_accuracy, parse_results_csv, results_csv, results_svg, EvalReport,
};
use pemd::synth::{generate_datasets, DataConfig, PairSet, Pairing};
use pemd::{ArchConfig, TwinRegistrationModel};

fn report(method: &str, seed: u64, acc: [f64; 4]) -> EvalReport {
    EvalReport { method: method.into(), seed, accuracies: acc, config_digest: 7 }
}

#[test]
fn untrained_models_sit_at_the_guessing_floor() {
    let d = generate_datasets(0, &DataConfig::default()).unwrap();
    let set = PairSet::pairing(&d.a_test, &d.b_test, Pairing::AA).unwrap();
    for seed in 0..3 {
        let model = TwinRegistrationModel::init(&ArchConfig::default(), seed);
        let acc = evaluate_accuracy(&model, &set).unwrap();
        assert!((0.02..=0.06).contains(&acc), "seed {seed}: {acc}");
        assert_eq!(acc, evaluate_accuracy(&model, &set).unwrap());
    }
}

#[test]
fn oracle_predictions_score_one() {
    let labels: Vec<usize> = (0..100).map(|i| i % 25).collect();
    assert_eq!(accuracy_of(&labels, &labels).unwrap(), 1.0);
    let shifted: Vec<usize> = labels.iter().map(|l| (l + 1) % 25).collect();
    assert_eq!(accuracy_of(&shifted, &labels).unwrap(), 0.0);
    assert!(accuracy_of(&[], &[]).is_err());
}

#[test]
fn csv_has_pairing_rows_and_seed_means() {
    let reps = [report("swd", 2, [0.5, 0.2, 0.3, 0.4]), report("swd", 1, [0.3, 0.1, 0.2, 0.3]), report("none", 0, [0.6, 0.1, 0.1, 0.1])];
    let csv = results_csv(&reps);
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mean_xmean: f64 = rows.iter().find(|r| r[0] == "swd" && r[1] == "mean" && r[2] == "XMEAN").unwrap()[3].parse().unwrap();
    assert!((mean_xmean - (0.3 + 0.2) / 2.0).abs() < 1e-9);
    assert_eq!(rows.iter().filter(|r| r[0] == "none").count(), 5);
    let back = parse_results_csv(&csv, std::path::Path::new("r.csv")).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(results_csv(&reps), csv);
}

#[test]
fn svg_is_well_formed_with_one_bar_per_method() {
    let reps = [
        report("none", 0, [0.6, 0.1, 0.1, 0.1]),
        report("none", 1, [0.6, 0.2, 0.1, 0.1]),
        report("pemd16+swd", 0, [0.6, 0.3, 0.2, 0.2]),
        report("a<b&c", 0, [0.1; 4]),
    ];
    let svg = results_svg(&reps);
    let doc = roxmltree::Document::parse(&svg).expect("well-formed XML");
    let bars: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("bar")).collect();
    assert_eq!(bars.len(), 3);
    assert_eq!(bars[2].attribute("data-method"), Some("a<b&c"));
    let seeds = doc.descendants().filter(|n| n.attribute("class") == Some("seed")).count();
    assert_eq!(seeds, 4);
    assert!(!svg.contains("href"));

    let dir = tempfile::tempdir().unwrap();
    let (c, s) = (dir.path().join("r.csv"), dir.path().join("r.svg"));
    emit_results(&reps, &c, &s).unwrap();
    assert_eq!(std::fs::read_to_string(&s).unwrap(), svg);
    assert!(emit_results(&[], &c, &s).is_err());
    assert!(emit_results(&reps, &dir.path().join("missing/r.csv"), &s).is_err());
}

#[test]
fn correlation_bench_values_are_deterministic() {
    let a = correlation_bench(120, 4).unwrap();
    let b = correlation_bench(120, 4).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.to_csv(false), b.to_csv(false));
    let exact = a.row("exact").unwrap();
    assert!((exact.pearson.unwrap() - 1.0).abs() < 1e-12);
    assert!(a.row("pemd2").unwrap().pearson.unwrap() >= 0.95);
    assert!(correlation_bench(50, 4).is_err());
}
