use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stconv::Network;

const SUBCOMMANDS: [&str; 10] = ["build", "describe", "count", "curve", "train", "eval", "reverse-test", "weight-stats", "export-emb", "selftest"];

fn stconv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stconv"))
        .args(args)
        .env("STCONV_OUT_DIR", out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Set `UPDATE_GOLDEN=1` to rewrite the files after an intended change.
#[test]
fn help_matches_golden_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cases = vec![("stconv".to_string(), vec!["--help".to_string()])];
    cases.extend(SUBCOMMANDS.iter().map(|s| (format!("stconv-{s}"), vec![s.to_string(), "--help".into()])));
    let top = ok(stconv(tmp.path(), &["--help"]));
    for s in SUBCOMMANDS {
        assert!(top.contains(&format!("  {s}")), "top-level help misses {s}");
    }
    for (name, args) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let text = ok(stconv(tmp.path(), &args));
        let path = golden_dir().join(format!("{name}.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
        assert_eq!(text, want, "{name}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["count", "--arch", "i4d"], &["count", "--mac", "3"], &["count", "--arch", "i2d", "--reconcile"]] {
        let o = stconv(tmp.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn count_writes_the_cost_report_and_reconciliation_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(stconv(tmp.path(), &["count", "--arch", "i3d", "--frames", "64", "--size", "224"]));
    let total = text.lines().find(|l| l.starts_with("total ")).unwrap();
    let gflops: f64 = total.split('(').nth(2).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((100.0..120.0).contains(&gflops), "{total}");
    let csv = fs::read_to_string(tmp.path().join("cost_i3d.csv")).unwrap();
    assert!(csv.starts_with("# cost_report v1"), "{}", csv.lines().next().unwrap());
    assert!(csv.lines().any(|l| l.starts_with("TOTAL,")));

    // The published I3D totals are out of reach of the layer table.
    let o = stconv(tmp.path(), &["count", "--arch", "i3d", "--reconcile"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("reconcile flops"));
}

#[test]
fn describe_i2d_lists_two_temporally_strided_pools() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(stconv(tmp.path(), &["describe", "--arch", "i2d"]));
    let strided = text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|f| f.get(1) == Some(&"max_pool") && f.get(4).is_some_and(|s| s.starts_with("2x")))
        .count();
    assert_eq!(strided, 2, "{text}");
}

fn reverse_delta(text: &str) -> f64 {
    let field = text.split_whitespace().find_map(|w| w.strip_prefix("max_logit_delta=")).unwrap();
    field.parse().unwrap()
}

#[test]
fn reverse_test_on_fresh_i2d_is_order_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(stconv(tmp.path(), &["reverse-test", "--arch", "i2d", "--mini", "--seed", "3", "--samples", "8"]));
    assert!(reverse_delta(&text) < 1e-5, "{text}");
    let grid = fs::read_to_string(tmp.path().join("reversal_i2d-mini.csv")).unwrap();
    assert!(grid.starts_with("# reversal_grid v1"));
}

#[test]
fn seeded_outputs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        ok(stconv(dir, &["export-emb", "--arch", "s3d", "--mini", "--seed", "4", "--samples", "4", "--layer", "Mixed4b"]));
        ok(stconv(dir, &["weight-stats", "--arch", "i3d", "--mini", "--seed", "4"]));
        ok(stconv(dir, &["curve", "--family", "bottom-heavy", "--conv", "sep"]));
    }
    for name in ["emb_s3d-mini_Mixed4b.csv", "offsets_i3d-mini.csv", "curve_bottom-heavy_sep.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        assert!(!x.is_empty());
    }
}

#[test]
fn train_flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.toml");
    fs::write(
        &cfg,
        "batch_size = 2\nsteps = 5\nseed = 1\n\n[schedule]\ninitial = 0.05\n\n\
         [dataset]\nkind = \"directional_motion\"\nclasses = 2\nsamples = 4\nseed = 2\n\n\
         [dataset.geometry]\nframes = 13\nheight = 32\nwidth = 32\nchannels = 1\n",
    )
    .unwrap();
    let text = ok(stconv(tmp.path(), &["train", "--arch", "i2d", "--mini", "--train-config", cfg.to_str().unwrap(), "--steps", "2"]));
    assert!(text.contains("final step=1"), "{text}");
    let log = fs::read_to_string(tmp.path().join("i2d-mini.train.log")).unwrap();
    assert!(log.starts_with("# train_log v1 steps=2 batch_size=2"), "{log}");
    assert!(tmp.path().join("i2d-mini.stck").exists());

    // The trained checkpoint feeds the probes.
    let ck = tmp.path().join("i2d-mini.stck");
    let text = ok(stconv(tmp.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--samples", "4"]));
    assert!(text.contains("top1="));
}

#[test]
fn non_finite_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    ok(stconv(tmp.path(), &["build", "--arch", "i2d", "--mini", "--seed", "2"]));
    let path = tmp.path().join("i2d-mini.stck");
    let mut net = Network::<f32>::load(&path).unwrap();
    net.params_mut().get_mut("Mixed3b/b1b/w").unwrap().data_mut()[0] = f32::NAN;
    net.save(&path, Default::default()).unwrap();
    let o = stconv(
        tmp.path(),
        &["train", "--arch", "i2d", "--mini", "--init", path.to_str().unwrap(), "--steps", "1", "--batch-size", "2", "--samples", "4"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Mixed3b"));
}

#[test]
fn selftest_passes_and_out_dir_flag_beats_the_environment() {
    let (env_dir, flag_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let text = ok(stconv(env_dir.path(), &["selftest", "--instances", "3"]));
    assert!(!text.contains("FAIL"));
    ok(stconv(env_dir.path(), &["build", "--arch", "s3d-g", "--mini", "--out-dir", flag_dir.path().to_str().unwrap()]));
    assert!(flag_dir.path().join("s3d-g-mini.arch.toml").exists());
    assert!(!env_dir.path().join("s3d-g-mini.arch.toml").exists());
}
