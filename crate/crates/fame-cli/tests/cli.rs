//! End-to-end checks of the `fame` binary: file formats, error paths, exit
//! codes, and cross-command consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fame() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fame"))
}

fn run(args: &[&str]) -> Output {
    fame().args(args).output().expect("failed to run fame binary")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate_small(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let cohort = dir.join("cohort.jsonl");
    let out = run(&[
        "generate",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--widths",
        "demographic:4,structured:8,notes:8",
        "--out",
        cohort.to_str().unwrap(),
    ]);
    assert_success(&out);
    cohort
}

const FAST_TRAIN: [&str; 10] = [
    "--lr",
    "1e-3",
    "--proj-dim",
    "8",
    "--hidden-dim",
    "16",
    "--max-epochs",
    "2",
    "--batch-size",
    "32",
];

#[test]
fn generate_writes_requested_count_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 120, 3);
    let lines = std::fs::read_to_string(&cohort).unwrap().lines().count();
    assert_eq!(lines, 120);
    let manifest = dir.path().join("cohort.jsonl.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert!(manifest["cohort_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn generate_rejects_invalid_marginals() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate",
        "--n",
        "10",
        "--marginals-ethnicity",
        "0.5,0.2,0.1,0.1,0.2",
        "--out",
        dir.path().join("c.jsonl").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("marginals"), "{}", stderr(&out));
}

#[test]
fn train_on_missing_cohort_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--cohort",
        dir.path().join("absent.jsonl").to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.jsonl"), "{}", stderr(&out));
}

#[test]
fn train_writes_all_outputs_and_config_file_merges() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 150, 4);
    let config = dir.path().join("train.cfg");
    std::fs::write(&config, "mode average\nlambda 0.4\nmax_epochs 2\nbatch_size 32\nlr 1e-3\nproj_dim 8\nhidden_dim 16\n").unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--cohort",
        cohort.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--mode",
        "eddi_only", // override beats the config file
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    for file in ["checkpoint.json", "trajectory.csv", "metrics.json", "predictions.csv", "manifest.json"] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["mode"], "EddiOnly");
    assert_eq!(manifest["config"]["lambda"], 0.4);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn audit_reproduces_training_metrics_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 150, 5);
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--cohort", cohort.to_str().unwrap(), "--out-dir", run_dir.to_str().unwrap()];
    args.extend(FAST_TRAIN);
    assert_success(&run(&args));

    let audit_out = dir.path().join("audit.json");
    let out = run(&[
        "audit",
        "--predictions",
        run_dir.join("predictions.csv").to_str().unwrap(),
        "--out",
        audit_out.to_str().unwrap(),
    ]);
    assert_success(&out);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.json")).unwrap();
    let audited = std::fs::read_to_string(&audit_out).unwrap();
    assert_eq!(metrics, audited);
}

#[test]
fn audit_on_perfect_predictions_reports_zero_disparity() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("perfect.csv");
    let mut csv = String::from("id,task,score,label,ethnicity,insurance,age_bucket\n");
    for (i, (eth, label)) in [
        ("White", 1),
        ("White", 0),
        ("Black", 1),
        ("Black", 0),
        ("Asian", 1),
        ("Asian", 0),
    ]
    .iter()
    .enumerate()
    {
        let score = if *label == 1 { 0.9 } else { 0.1 };
        csv.push_str(&format!("p{i},mortality,{score},{label},{eth},Medicare,70+\n"));
    }
    std::fs::write(&pred, csv).unwrap();
    let out_path = dir.path().join("report.json");
    let out = run(&["audit", "--predictions", pred.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(report["eddi_overall"], 0.0);
    assert_eq!(report["eo_overall"], 0.0);
    assert_eq!(report["auroc"]["mortality"], 1.0);
}

#[test]
fn audit_matches_hand_computed_subgroup_disparity() {
    // ten rows, two wrong, both wrong in the four-member Black subgroup:
    // OER 0.2, ER_Black 0.5, ER_White 0 -> EDDI_Black 0.375, EDDI_White -0.25
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("hand.csv");
    let mut csv = String::from("id,task,score,label,ethnicity,insurance,age_bucket\n");
    for i in 0..10 {
        let eth = if i < 4 { "Black" } else { "White" };
        let score = if i < 2 { 0.1 } else { 0.9 }; // first two rows predicted 0
        csv.push_str(&format!("p{i},mortality,{score},1,{eth},Medicare,70+\n"));
    }
    std::fs::write(&pred, csv).unwrap();
    let out_path = dir.path().join("report.json");
    assert_success(&run(&["audit", "--predictions", pred.to_str().unwrap(), "--out", out_path.to_str().unwrap()]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    let subgroups = &report["eddi"]["ethnicity"]["subgroups"];
    let black = subgroups["Black"]["eddi"].as_f64().unwrap();
    let white = subgroups["White"]["eddi"].as_f64().unwrap();
    assert!((black - 0.375).abs() < 1e-12, "black {black}");
    assert!((white + 0.25).abs() < 1e-12, "white {white}");
    assert!((subgroups["Black"]["error_rate"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn audit_cites_the_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("bad.csv");
    std::fs::write(
        &pred,
        "id,task,score,label,ethnicity,insurance,age_bucket\n\
         p0,mortality,0.9,1,White,Medicare,70+\n\
         p1,mortality,not-a-number,1,White,Medicare,70+\n",
    )
    .unwrap();
    let out = run(&["audit", "--predictions", pred.to_str().unwrap(), "--out", dir.path().join("r.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn sweep_single_cell_matches_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 150, 6);
    let run_dir = dir.path().join("run");
    let mut train_args = vec![
        "train",
        "--cohort",
        cohort.to_str().unwrap(),
        "--out-dir",
        run_dir.to_str().unwrap(),
        "--lambda",
        "0.6",
        "--seed",
        "9",
    ];
    train_args.extend(FAST_TRAIN);
    assert_success(&run(&train_args));

    let sweep_out = dir.path().join("sweep.csv");
    let mut sweep_args = vec![
        "sweep",
        "--cohort",
        cohort.to_str().unwrap(),
        "--lambdas",
        "0.6",
        "--seeds",
        "9",
        "--out",
        sweep_out.to_str().unwrap(),
    ];
    sweep_args.extend(FAST_TRAIN);
    assert_success(&run(&sweep_args));

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    let auprcs: Vec<f64> =
        metrics["auprc"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).collect();
    let expected_auprc = auprcs.iter().sum::<f64>() / auprcs.len() as f64;
    let expected_eddi = metrics["eddi_overall"].as_f64().unwrap();

    let csv = std::fs::read_to_string(&sweep_out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,seed,auprc,eddi,eo");
    assert_eq!(lines.len(), 3); // one cell row + one mean row
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&fields[..3], &["lambda", "0.6", "9"]);
    assert_eq!(fields[3].parse::<f64>().unwrap(), expected_auprc);
    assert_eq!(fields[4].parse::<f64>().unwrap(), expected_eddi);
}

#[test]
fn sweep_rejects_empty_and_conflicting_value_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 60, 7);
    let out_path = dir.path().join("sweep.csv");
    let out = run(&["sweep", "--cohort", cohort.to_str().unwrap(), "--lambdas", "", "--out", out_path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("usage"), "{}", stderr(&out));
    let out = run(&["sweep", "--cohort", cohort.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert!(!out.status.success());
    let out = run(&[
        "sweep",
        "--cohort",
        cohort.to_str().unwrap(),
        "--lambdas",
        "0.1",
        "--gammas",
        "0.5",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablate_subset_emits_fixed_header_and_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 150, 8);
    let out_path = dir.path().join("ablation.csv");
    let mut args = vec![
        "ablate",
        "--cohort",
        cohort.to_str().unwrap(),
        "--variants",
        "fame,average",
        "--seeds",
        "1",
        "--out",
        out_path.to_str().unwrap(),
    ];
    args.extend(FAST_TRAIN);
    assert_success(&run(&args));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,auroc,auprc,eddi,eo");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("fame,"));
    assert!(lines[2].starts_with("average,"));
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 5);
    }
}

#[test]
fn ablate_full_matrix_covers_seven_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_small(dir.path(), 120, 9);
    let out_path = dir.path().join("ablation.csv");
    let mut args = vec![
        "ablate",
        "--cohort",
        cohort.to_str().unwrap(),
        "--seeds",
        "1",
        "--out",
        out_path.to_str().unwrap(),
    ];
    args.extend(FAST_TRAIN);
    assert_success(&run(&args));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let variants: Vec<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        vec![
            "average",
            "sigmoid_only",
            "eddi_only",
            "fame",
            "dfc",
            "unimodal_structured",
            "unimodal_notes"
        ]
    );
}

#[test]
fn out_dir_env_var_provides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = fame()
        .args(["generate", "--n", "30", "--widths", "demographic:2,structured:2,notes:2"])
        .env("FAME_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("cohort.jsonl").exists());

    // without --out and without the env var the command refuses
    let out = fame()
        .args(["generate", "--n", "30"])
        .env_remove("FAME_OUT_DIR")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAME_OUT_DIR"));
}
