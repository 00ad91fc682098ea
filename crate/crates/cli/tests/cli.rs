use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use zsl_core::dataio::load_bundle;
use zsl_core::eval::eval_gzsl_direct;
use zsl_core::id3m::flag_count;
use zsl_core::metrics::EvalReport;
use zsl_core::train::{calibration_degrees, init_setnet, load_checkpoint, Checkpoint};
use zsl_core::{DdmEnsemble64, SetNet64};

const CONFIG: &str = r#"{
  "synthetic": {
    "seen_classes": 6, "unseen_classes": 3, "samples_per_class": 10,
    "height": 3, "width": 3, "channels": 8, "semantic_dim": 10,
    "attributes_per_class": 3, "noise": 0.1, "jitter": true, "seed": 4
  },
  "train": {
    "learning_rate": 1.0, "epochs": 6, "batch_size": 8, "seed": 1, "lambda": 0.2,
    "heads": 2, "attention_hidden": 6, "folds": 3, "diversity_sign": -1.0, "ddm_hidden": 12
  },
  "fnr_grid": [0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.17, 0.19]
}"#;

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("cfg.json"), CONFIG).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_zsl"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        err
    }

    /// Bundle, SetNet and calibrated detector checkpoints.
    fn pipeline(&self) {
        self.ok(&["gen-synth", "--config", "cfg.json", "--out", "b.sdnb"]);
        self.ok(&["train-setnet", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "s.sdnc"]);
        self.ok(&["train-ddm", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "d.sdnc"]);
        self.ok(&["calibrate", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--fnr", "0.11", "--out", "dc.sdnc"]);
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap()
}

fn report(path: &Path) -> EvalReport {
    let r: EvalReport = serde_json::from_slice(&read(path)).unwrap();
    r.validate().unwrap();
    r
}

#[test]
fn gen_synth_is_reproducible_and_loadable() {
    let w = Work::new();
    w.ok(&["gen-synth", "--config", "cfg.json", "--out", "a.sdnb"]);
    w.ok(&["gen-synth", "--config", "cfg.json", "--out", "b.sdnb"]);
    assert_eq!(read(&w.path("a.sdnb")), read(&w.path("b.sdnb")));
    let b = load_bundle(w.path("a.sdnb")).unwrap();
    assert_eq!(b.num_samples(), 90);
    w.ok(&["gen-synth", "--config", "cfg.json", "--out", "c.sdnb", "--seed", "99"]);
    assert_ne!(read(&w.path("a.sdnb")), read(&w.path("c.sdnb")));
}

#[test]
fn config_errors_name_the_key() {
    let w = Work::new();
    fs::write(w.path("missing.json"), CONFIG.replace(r#""noise": 0.1, "#, "")).unwrap();
    let err = w.fails(&["gen-synth", "--config", "missing.json", "--out", "x"]);
    assert!(err.contains("noise"), "{err}");

    fs::write(w.path("extra.json"), CONFIG.replace(r#""seed": 1,"#, r#""seed": 1, "momentum": 0.9,"#)).unwrap();
    let err = w.fails(&["gen-synth", "--config", "extra.json", "--out", "x"]);
    assert!(err.contains("momentum"), "{err}");

    fs::write(w.path("range.json"), CONFIG.replace(r#""batch_size": 8"#, r#""batch_size": 0"#)).unwrap();
    let err = w.fails(&["gen-synth", "--config", "range.json", "--out", "x"]);
    assert!(err.contains("batch_size"), "{err}");

    w.fails(&["gen-synth", "--config", "nope.json", "--out", "x"]);
    w.fails(&["no-such-command"]);
}

#[test]
fn training_prints_one_row_per_epoch_and_is_reproducible() {
    let w = Work::new();
    w.ok(&["gen-synth", "--config", "cfg.json", "--out", "b.sdnb"]);
    let csv = w.ok(&["train-setnet", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "s1.sdnc"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,"));
    w.ok(&["train-setnet", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "s2.sdnc"]);
    assert_eq!(read(&w.path("s1.sdnc")), read(&w.path("s2.sdnc")));

    let csv = w.ok(&["train-ddm", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "d.sdnc", "--epochs", "4"]);
    assert_eq!(csv.lines().count(), 5);
    let ck = load_checkpoint(w.path("d.sdnc")).unwrap();
    assert_eq!(ck.config.epochs, 4);
    assert_eq!(ck.to_ddm::<f64>().unwrap().members().len(), 3);
}

#[test]
fn zero_learning_rate_checkpoint_is_fresh_init() {
    let w = Work::new();
    w.ok(&["gen-synth", "--config", "cfg.json", "--out", "b.sdnb"]);
    w.ok(&["train-setnet", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "s.sdnc", "--lr", "0"]);
    let ck = load_checkpoint(w.path("s.sdnc")).unwrap();
    let bundle = load_bundle(w.path("b.sdnb")).unwrap();
    let fresh: SetNet64 = init_setnet(&bundle, &ck.config).unwrap();
    assert_eq!(Checkpoint::from_setnet(&fresh, &ck.config).to_bytes(), read(&w.path("s.sdnc")));
}

#[test]
fn calibration_flags_the_target_count() {
    let w = Work::new();
    w.pipeline();
    let bundle = load_bundle(w.path("b.sdnb")).unwrap();
    for fnr in ["0.05", "0.11", "0.19"] {
        w.ok(&["calibrate", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--fnr", fnr, "--out", "x.sdnc"]);
        let ck = load_checkpoint(w.path("x.sdnc")).unwrap();
        let ddm: DdmEnsemble64 = ck.to_ddm().unwrap();
        let degrees = calibration_degrees(&ddm, &bundle, ck.config.seed).unwrap();
        let theta = ddm.theta().unwrap();
        let flagged = degrees.iter().filter(|&&d| d < theta).count();
        assert_eq!(flagged, flag_count(degrees.len(), fnr.parse().unwrap()));
    }
    // recalibrating a calibrated checkpoint gives the same bytes
    w.ok(&["calibrate", "--ddm", "dc.sdnc", "--bundle", "b.sdnb", "--fnr", "0.11", "--out", "again.sdnc"]);
    assert_eq!(read(&w.path("dc.sdnc")), read(&w.path("again.sdnc")));

    for bad in ["0", "1", "1.5", "-0.1"] {
        w.fails(&["calibrate", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--fnr", bad, "--out", "y.sdnc"]);
    }
}

#[test]
fn evaluation_reports() {
    let w = Work::new();
    w.pipeline();
    w.ok(&["eval-zsl", "--model", "s.sdnc", "--bundle", "b.sdnb", "--report", "z.json", "--attn", "a.csv"]);
    let z = report(&w.path("z.json"));
    assert_eq!(z.per_class.len(), 3);
    let attn = fs::read_to_string(w.path("a.csv")).unwrap();
    assert!(attn.starts_with("head,0\n"));
    assert!(attn.contains("head,1\n"));

    let out = w.ok(&["eval-gzsl", "--zsl", "s.sdnc", "--ddm", "dc.sdnc", "--bundle", "b.sdnb", "--report", "g.json"]);
    assert!(out.contains("h="));
    let g = report(&w.path("g.json"));
    assert!(g.h.is_some());

    w.ok(&["eval-ood", "--ddm", "dc.sdnc", "--bundle", "b.sdnb", "--report", "o.json", "--curves", "c.csv"]);
    let o = report(&w.path("o.json"));
    let tnr: Vec<f64> = o.tnr_at_fnr.unwrap().iter().map(|p| p.tnr).collect();
    assert_eq!(tnr.len(), 8);
    assert!(tnr.windows(2).all(|p| p[0] <= p[1]));
    let curve = fs::read_to_string(w.path("c.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("fnr,tnr"));
    assert_eq!(curve.lines().count(), 9);

    // same inputs, same bytes
    w.ok(&["eval-ood", "--ddm", "dc.sdnc", "--bundle", "b.sdnb", "--report", "o2.json", "--curves", "c2.csv"]);
    assert_eq!(read(&w.path("o.json")), read(&w.path("o2.json")));
    assert_eq!(read(&w.path("c.csv")), read(&w.path("c2.csv")));
}

#[test]
fn never_flagging_threshold_equals_direct_gzsl() {
    let w = Work::new();
    w.pipeline();
    w.ok(&["train-setnet", "--config", "cfg.json", "--bundle", "b.sdnb", "--out", "g.sdnc", "--seed", "7"]);
    w.ok(&[
        "eval-gzsl", "--zsl", "s.sdnc", "--gzsl", "g.sdnc", "--ddm", "d.sdnc", "--theta", "-inf", "--bundle", "b.sdnb",
        "--report", "r.json",
    ]);
    let bundle = load_bundle(w.path("b.sdnb")).unwrap();
    let gzsl: SetNet64 = load_checkpoint(w.path("g.sdnc")).unwrap().to_setnet().unwrap();
    assert_eq!(report(&w.path("r.json")), eval_gzsl_direct(&gzsl, &bundle).unwrap());
}

#[test]
fn mismatched_inputs_fail_cleanly() {
    let w = Work::new();
    w.pipeline();
    let err = w.fails(&["eval-zsl", "--model", "d.sdnc", "--bundle", "b.sdnb", "--report", "x.json"]);
    assert!(err.contains("setnet"), "{err}");
    w.fails(&["eval-ood", "--ddm", "s.sdnc", "--bundle", "b.sdnb", "--report", "x.json"]);
    w.fails(&["eval-ood", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--report", "x.json"]);
    w.fails(&["eval-gzsl", "--zsl", "s.sdnc", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--report", "x.json"]);
    w.fails(&["eval-zsl", "--model", "s.sdnc", "--bundle", "cfg.json", "--report", "x.json"]);

    // a bundle with other dimensions
    fs::write(w.path("wide.json"), CONFIG.replace(r#""channels": 8"#, r#""channels": 5"#)).unwrap();
    w.ok(&["gen-synth", "--config", "wide.json", "--out", "w.sdnb"]);
    w.fails(&["eval-zsl", "--model", "s.sdnc", "--bundle", "w.sdnb", "--report", "x.json"]);
    assert!(!w.path("x.json").exists());
}

#[test]
fn config_paths_fill_missing_flags() {
    let w = Work::new();
    let cfg = CONFIG.replacen(
        r#""fnr_grid""#,
        r#""paths": {"bundle": "b.sdnb", "setnet": "s.sdnc", "ddm": "dc.sdnc"}, "fnr_grid""#,
        1,
    );
    fs::write(w.path("paths.json"), cfg).unwrap();
    w.ok(&["gen-synth", "--config", "paths.json", "--out", "b.sdnb"]);
    w.ok(&["train-setnet", "--config", "paths.json", "--out", "s.sdnc"]);
    w.ok(&["train-ddm", "--config", "paths.json", "--out", "d.sdnc"]);
    w.ok(&["calibrate", "--ddm", "d.sdnc", "--bundle", "b.sdnb", "--fnr", "0.09", "--out", "dc.sdnc"]);
    w.ok(&["eval-gzsl", "--config", "paths.json", "--report", "g.json"]);
    w.ok(&["eval-ood", "--config", "paths.json", "--report", "o.json", "--fnr-grid", "0.1,0.2"]);
    assert_eq!(report(&w.path("o.json")).tnr_at_fnr.unwrap().len(), 2);
}
