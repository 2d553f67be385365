//! End-to-end runs of the `contextnet` binary on tiny synthetic problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contextnet::runs::{self, Mode};
use contextnet::{checkpoint, pnm, RunConfig};
use contextnet_core::data::RgbImage;
use contextnet_core::eval::{predict, EvalMode};
use contextnet_core::graph::count_params;
use contextnet_core::Graph;

const TINY: &str = "height = 32\nwidth = 64\ntrain_samples = 8\nval_samples = 4\nepochs = 1\n";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contextnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = bin(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Exit code and the single stderr line of a failing run.
fn err(args: &[&str]) -> (i32, String) {
    let o = bin(args);
    let text = String::from_utf8(o.stderr).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    (o.status.code().unwrap(), text.trim_end().to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.txt")
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let (out, cfg) = (self.path(out), self.config());
        let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out.join("model.ckpt")
    }
}

fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply(TINY.lines().map(|l| l.split_once(" = ").unwrap())).unwrap();
    c
}

fn trainable(g: &Graph) -> Vec<Vec<f32>> {
    g.nodes()
        .iter()
        .flat_map(|n| n.op.param_values().into_iter().take(n.op.trainable_count()).map(<[f32]>::to_vec).collect::<Vec<_>>())
        .collect()
}

#[test]
fn train_writes_a_loadable_checkpoint_and_eval_scores_it() {
    let f = Fixture::new();
    let ckpt = f.train("run", &[]);
    let run = ckpt.parent().unwrap();
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(runs::METRICS_HEADER));
    assert_eq!(lines.count(), 1);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command = train\n"));
    assert!(manifest.contains("[config]\n"));

    let cfg = RunConfig::load(&run.join("config.txt")).unwrap();
    assert_eq!(cfg, tiny_cfg());
    let graph = runs::load_model(&cfg, &ckpt).unwrap();

    // The checkpoint's config.txt is picked up without --config.
    let out = f.path("eval");
    let o = ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let (_, val) = runs::load_data(&cfg, None).unwrap();
    let want = runs::report_text(Mode::Normal, &runs::eval_graph(&graph, None, Mode::Normal, &val, 4).unwrap());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), want);
    assert_eq!(fs::read_to_string(out.join("eval.txt")).unwrap(), want);

    for mode in ["zero_context", "zero_detail", "aux"] {
        let o = ok(&["eval", "--checkpoint", s(&ckpt), "--mode", mode, "--out", s(&out)]);
        assert!(String::from_utf8(o.stdout).unwrap().starts_with(&format!("mode = {mode}\n")));
    }
    let second = f.train("run2", &["--seed", "1"]);
    let o = ok(&["eval", "--checkpoint", s(&ckpt), "--checkpoint2", s(&second), "--mode", "ensemble", "--out", s(&out)]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("miou = "));
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new();
    let a = f.train("a", &["--set", "epochs=2"]);
    let b = f.train("b", &["--set", "epochs=2"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let metrics = |p: &Path| fs::read_to_string(p.parent().unwrap().join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    let c = f.train("c", &["--set", "epochs=2", "--seed", "5"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let f = Fixture::new();
    let ckpt = f.train("lr0", &["--set", "base_lr=0"]);
    let mut cfg = tiny_cfg();
    cfg.base_lr = 0.0;
    let init = runs::build_model(&cfg).unwrap();
    let trained = runs::load_model(&cfg, &ckpt).unwrap();
    assert_eq!(trainable(&trained), trainable(&init));
}

#[test]
fn input_checkpoints_are_never_modified() {
    let f = Fixture::new();
    let ckpt = f.train("run", &[]);
    let before = fs::read(&ckpt).unwrap();
    let img = f.path("img.ppm");
    let sample = &runs::load_data(&tiny_cfg(), None).unwrap().1[0];
    pnm::write_ppm(&img, &RgbImage::from_tensor(&sample.image).unwrap()).unwrap();

    ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&f.path("e"))]);
    ok(&["profile", "--checkpoint", s(&ckpt), "--reps", "1", "--out", s(&f.path("p"))]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&f.path("i")), s(&img)]);
    ok(&["train", "--checkpoint", s(&ckpt), "--out", s(&f.path("t"))]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let run = s(ckpt.parent().unwrap());
    for cmd in ["eval", "train", "profile"] {
        let (code, line) = err(&[cmd, "--checkpoint", s(&ckpt), "--out", run]);
        assert_eq!(code, 2);
        assert!(line.starts_with("error[usage]: --out must not be"), "{line}");
    }
    assert_eq!(fs::read(&ckpt).unwrap(), before);
}

#[test]
fn prune_reaches_the_native_width_and_stays_evaluable() {
    let f = Fixture::new();
    let wide = f.train("wide", &["--set", "width_multiplier=2"]);
    let out = f.path("pruned");
    let o = ok(&["prune", "--checkpoint", s(&wide), "--set", "finetune_epochs=1", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("prune.csv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);
    let params: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(params.len(), 4);
    assert!(params.windows(2).all(|w| w[1] < w[0]), "{params:?}");

    let cfg = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(cfg.width_multiplier, 1.0);
    let pruned = runs::load_model(&cfg, &out.join("model.ckpt")).unwrap();
    assert_eq!(count_params(&pruned), count_params(&runs::build_model(&cfg).unwrap()));
    assert_eq!(*params.last().unwrap(), count_params(&pruned));
    ok(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--out", s(&f.path("e"))]);
}

#[test]
fn infer_is_deterministic_and_matches_the_unfolded_model() {
    let f = Fixture::new();
    let ckpt = f.train("run", &[]);
    let cfg = tiny_cfg();
    let img_path = f.path("img.ppm");
    let sample = &runs::load_data(&cfg, None).unwrap().1[1];
    let img = RgbImage::from_tensor(&sample.image).unwrap();
    pnm::write_ppm(&img_path, &img).unwrap();

    let (a, b) = (f.path("a"), f.path("b"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&a), s(&img_path)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&b), s(&img_path)]);
    for name in ["mask.pgm", "mask.ppm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let mask = pnm::read_pgm(&a.join("mask.pgm")).unwrap();
    assert_eq!((mask.height(), mask.width()), (img.height, img.width));
    let color = pnm::read_ppm(&a.join("mask.ppm")).unwrap();
    assert_eq!((color.height, color.width), (img.height, img.width));

    let graph = runs::load_model(&cfg, &ckpt).unwrap();
    let unfolded = predict(&graph, &img.to_tensor(), EvalMode::Normal).unwrap();
    assert_eq!(mask.data(), unfolded.as_slice());
}

#[test]
fn profile_reports_parameters_and_quadratic_macs() {
    let f = Fixture::new();
    let cfg = f.config();
    let total = |out: &Path| -> (usize, u64) {
        let csv = fs::read_to_string(out.join("profile.csv")).unwrap();
        let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
        assert_eq!(last[0], "TOTAL");
        (last[2].parse().unwrap(), last[3].parse().unwrap())
    };
    let (small, large) = (f.path("p128"), f.path("p256"));
    ok(&["profile", "--config", s(&cfg), "--input-size", "128x256", "--reps", "1", "--out", s(&small)]);
    ok(&["profile", "--config", s(&cfg), "--input-size", "256x512", "--reps", "1", "--out", s(&large)]);
    let (ps, ms) = total(&small);
    let (pl, ml) = total(&large);
    let native = RunConfig { height: 128, width: 256, ..tiny_cfg() };
    assert_eq!(ps, count_params(&runs::build_model(&native).unwrap()));
    assert_eq!(ps, pl);
    assert_eq!(ml, 4 * ms);
    assert!(fs::read_to_string(small.join("profile.txt")).unwrap().contains("TOTAL"));
}

#[test]
fn generated_datasets_train_like_in_memory_ones() {
    let f = Fixture::new();
    let data = f.path("data");
    ok(&["generate", "--config", s(&f.config()), "--out", s(&data)]);
    assert_eq!(fs::read_dir(data.join("train/images")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(data.join("val/labels")).unwrap().count(), 4);
    assert!(data.join("palette.txt").is_file());
    let ckpt = f.train("run", &["--data", s(&data)]);
    let o = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&f.path("e"))]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("miou = "));
}

#[test]
fn failures_print_one_machine_readable_line() {
    let f = Fixture::new();
    let cfg = s(&f.config()).to_string();
    let out = f.path("o");
    let out = s(&out);

    let (code, line) = err(&["train", "--config", &cfg, "--set", "foo=1", "--set", "bar=2", "--out", out]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error[config]: unknown config keys:"), "{line}");
    assert!(line.contains("foo") && line.contains("bar"));

    let (code, line) = err(&["train", "--config", &cfg, "--set", "epochs=many", "--out", out]);
    assert_eq!((code, line.starts_with("error[config]:")), (1, true), "{line}");

    let missing = f.path("nope.ckpt");
    let (code, line) = err(&["eval", "--config", &cfg, "--checkpoint", s(&missing), "--out", out]);
    assert_eq!((code, line.starts_with("error[io]:")), (1, true), "{line}");

    let (code, line) = err(&["eval", "--config", &cfg, "--checkpoint", s(&missing), "--mode", "ensemble", "--out", out]);
    assert_eq!(code, 2);
    assert!(line.starts_with("error[usage]:") && line.contains("--checkpoint2"), "{line}");

    let (code, line) = err(&["eval", "--config", &cfg, "--checkpoint", s(&missing), "--mode", "sideways", "--out", out]);
    assert_eq!((code, line.starts_with("error[usage]:")), (2, true), "{line}");

    for args in [&["profile", "--input-size", "12by3"][..], &["train", "--bogus"], &["eval", "--out", out], &["profile", "--reps", "0"]] {
        let (code, line) = err(args);
        assert_eq!(code, 2, "{args:?}");
        assert!(line.starts_with("error[usage]:"), "{line}");
    }

    let ckpt = f.train("run", &[]);
    let (code, line) = err(&["eval", "--config", &cfg, "--set", "width_multiplier=2", "--checkpoint", s(&ckpt), "--out", out]);
    assert_eq!((code, line.starts_with("error[checkpoint]:")), (1, true), "{line}");

    let junk = f.path("junk.ckpt");
    fs::write(&junk, b"garbage").unwrap();
    let (code, line) = err(&["eval", "--config", &cfg, "--checkpoint", s(&junk), "--out", out]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error[checkpoint]:") && line.contains("junk.ckpt"), "{line}");

    assert!(bin(&["--help"]).status.success());
    assert!(bin(&["--version"]).status.success());
}

#[test]
fn checkpoint_bytes_round_trip_through_the_binary() {
    let f = Fixture::new();
    let ckpt = f.train("run", &[]);
    let g = runs::load_model(&tiny_cfg(), &ckpt).unwrap();
    assert_eq!(checkpoint::encode(&g), fs::read(&ckpt).unwrap());
}
