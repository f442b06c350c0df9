//! End-to-end checks of the `ramer` binary: the advertised pipeline works,
//! outputs are deterministic, and failures map onto the documented exit
//! codes.

use std::path::Path;
use std::process::{Command, Output};

fn ramer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ramer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn pipeline_round_trip_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "gen.json", r#"{"n_samples": 110}"#);
    write(dir, "train.json", r#"{"epochs": 1, "batch_size": 16}"#);

    let out = ramer(
        &["gen", "--out", "corpus", "--gen-config", "gen.json", "--seed", "9"],
        dir,
    );
    assert_code(&out, 0, "gen");
    assert!(dir.join("corpus/manifest.json").is_file());
    assert!(dir.join("corpus/features.bin").is_file());

    // Same seed, same bytes.
    let out = ramer(
        &["gen", "--out", "corpus2", "--gen-config", "gen.json", "--seed", "9"],
        dir,
    );
    assert_code(&out, 0, "gen again");
    for name in ["manifest.json", "features.bin"] {
        let a = std::fs::read(dir.join("corpus").join(name)).unwrap();
        let b = std::fs::read(dir.join("corpus2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical gen runs");
    }

    let out = ramer(
        &[
            "train", "--data", "corpus", "--config", "train.json", "--out", "ckpt.json",
            "--seed", "3",
        ],
        dir,
    );
    assert_code(&out, 0, "train");

    let out = ramer(
        &["eval", "--data", "corpus", "--ckpt", "ckpt.json", "--report", "report.json"],
        dir,
    );
    assert_code(&out, 0, "eval");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in [
        "n_samples",
        "zeta",
        "acc_jaccard",
        "acc_subset",
        "micro_precision",
        "micro_recall",
        "micro_f1",
        "macro_f1",
        "weighted_f1",
        "per_label",
    ] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }

    // Evaluation is pure: a second run reproduces the report byte for byte.
    let out = ramer(
        &["eval", "--data", "corpus", "--ckpt", "ckpt.json", "--report", "report2.json"],
        dir,
    );
    assert_code(&out, 0, "eval again");
    assert_eq!(
        std::fs::read(dir.join("report.json")).unwrap(),
        std::fs::read(dir.join("report2.json")).unwrap()
    );

    // Both projection exports and the attribution export run from the same
    // checkpoint; the linear projection is byte-reproducible.
    for (what, file) in [("spec_common", "sc.csv"), ("recon", "recon.csv")] {
        let out = ramer(
            &[
                "viz", "--ckpt", "ckpt.json", "--data", "corpus", "--what", what, "--out", file,
                "--pca",
            ],
            dir,
        );
        assert_code(&out, 0, what);
        let text = std::fs::read_to_string(dir.join(file)).unwrap();
        assert!(text.starts_with("id,modality,component,labels,x,y\n"));
    }
    let out = ramer(
        &[
            "viz", "--ckpt", "ckpt.json", "--data", "corpus", "--what", "spec_common", "--out",
            "sc2.csv", "--pca",
        ],
        dir,
    );
    assert_code(&out, 0, "spec_common again");
    assert_eq!(
        std::fs::read(dir.join("sc.csv")).unwrap(),
        std::fs::read(dir.join("sc2.csv")).unwrap()
    );

    let out = ramer(
        &["viz", "--ckpt", "ckpt.json", "--data", "corpus", "--what", "mod2label", "--out", "m.csv"],
        dir,
    );
    assert_code(&out, 0, "mod2label");
    let text = std::fs::read_to_string(dir.join("m.csv")).unwrap();
    assert!(text.starts_with("label,visual,textual,acoustic\n"));
    assert_eq!(text.lines().count(), 7, "6 label rows plus header");
}

#[test]
fn ablate_writes_an_entry_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "gen.json", r#"{"n_samples": 90}"#);
    write(dir, "train.json", r#"{"epochs": 1, "batch_size": 16}"#);
    let out = ramer(
        &["gen", "--out", "corpus", "--gen-config", "gen.json", "--seed", "4"],
        dir,
    );
    assert_code(&out, 0, "gen");

    let out = ramer(
        &[
            "ablate", "--data", "corpus", "--config", "train.json", "--variants",
            "full,no_Lscl", "--seeds", "2", "--report", "ab.json",
        ],
        dir,
    );
    assert_code(&out, 0, "ablate");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ab.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], 2);
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["variant"], "full");
    assert_eq!(entries[1]["variant"], "no_Lscl");
    assert_eq!(entries[0]["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn failures_use_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "gen.json", r#"{"n_samples": 60}"#);
    write(dir, "train.json", r#"{"epochs": 0}"#);
    write(dir, "bad_key.json", r#"{"learning_rat": 0.01}"#);
    write(dir, "bad_value.json", r#"{"threshold": 1.5}"#);
    let out = ramer(
        &["gen", "--out", "corpus", "--gen-config", "gen.json", "--seed", "1"],
        dir,
    );
    assert_code(&out, 0, "gen");
    let out = ramer(
        &["train", "--data", "corpus", "--config", "train.json", "--out", "ckpt.json"],
        dir,
    );
    assert_code(&out, 0, "train");

    // Usage problems and bad configuration: 1.
    assert_code(&ramer(&["train", "--data", "corpus"], dir), 1, "missing args");
    assert_code(&ramer(&["nonsense"], dir), 1, "unknown subcommand");
    assert_code(
        &ramer(
            &["train", "--data", "corpus", "--config", "bad_key.json", "--out", "x.json"],
            dir,
        ),
        1,
        "unknown config key",
    );
    assert_code(
        &ramer(
            &["train", "--data", "corpus", "--config", "bad_value.json", "--out", "x.json"],
            dir,
        ),
        1,
        "out-of-range config value",
    );
    assert_code(
        &ramer(
            &[
                "ablate", "--data", "corpus", "--config", "train.json", "--variants", "bogus",
                "--seeds", "1", "--report", "r.json",
            ],
            dir,
        ),
        1,
        "unknown variant name",
    );

    // Data problems: 2.
    assert_code(
        &ramer(
            &["train", "--data", "nowhere", "--config", "train.json", "--out", "x.json"],
            dir,
        ),
        2,
        "missing corpus",
    );
    assert_code(
        &ramer(
            &["eval", "--data", "corpus", "--ckpt", "nowhere.json", "--report", "r.json"],
            dir,
        ),
        2,
        "missing checkpoint",
    );
    write(dir, "mangled.json", "{\"format\": \"ramer-checkpoint\"");
    assert_code(
        &ramer(
            &["eval", "--data", "corpus", "--ckpt", "mangled.json", "--report", "r.json"],
            dir,
        ),
        2,
        "corrupt checkpoint",
    );

    // Help is not a failure.
    assert_code(&ramer(&["--help"], dir), 0, "help");
}
