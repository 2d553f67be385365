//! The five reproducible runs behind the command-line tool. Each writes
//! its artefacts plus a `manifest.txt` (command, code version, inputs and
//! the full resolved config) into an output directory. Input checkpoints
//! are only ever read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use contextnet_core::arch::build_contextnet;
use contextnet_core::data::{colorize_mask, generate_synthetic_dataset, LabelMap, MiouReport, SegSample};
use contextnet_core::eval::{evaluate, predict, EvalMode, Predictor};
use contextnet_core::graph::{count_params, fold_batch_norm};
use contextnet_core::prune::{conv_out_widths, progressive_prune, ContextNetTargets, PruneReport};
use contextnet_core::train::{StepStats, Trainer};
use contextnet_core::Graph;

use crate::config::RunConfig;
use crate::{checkpoint, dataset, pnm, profile};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Batch size used for scoring; it does not affect results.
const EVAL_BATCH: usize = 8;

/// Progress sink; the binary prints to stderr, tests usually ignore it.
pub type Log<'a> = &'a mut dyn FnMut(&str);

pub fn build_model(cfg: &RunConfig) -> Result<Graph> {
    cfg.validate()?;
    Ok(build_contextnet(&cfg.model(), cfg.seed)?)
}

/// Builds the architecture described by `cfg` and fills it from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Graph> {
    let mut g = build_model(cfg)?;
    checkpoint::load_into(path, &mut g)?;
    Ok(g)
}

/// Train and validation samples: from `data` when given, otherwise a
/// synthetic set of `train_samples + val_samples` scenes split in order.
pub fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let (train, val) = match data {
        Some(dir) => dataset::load_split(dir, cfg.classes)?,
        None => {
            let mut all = generate_synthetic_dataset(
                cfg.train_samples + cfg.val_samples,
                cfg.height,
                cfg.width,
                cfg.classes,
                cfg.data_seed,
            )?;
            let val = all.split_off(cfg.train_samples);
            (all, val)
        }
    };
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for s in train.iter().chain(&val) {
        if (s.height(), s.width()) != (cfg.height, cfg.width) {
            return Err(Error::Dataset(format!(
                "sample is {}x{} but the model input is {}x{}",
                s.height(),
                s.width(),
                cfg.height,
                cfg.width
            )));
        }
    }
    Ok((train, val))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path, inputs: &[Option<&Path>]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let out_abs = out.canonicalize().map_err(|e| Error::io(out, e))?;
    for p in inputs.iter().flatten() {
        // Writing next to an input checkpoint could replace it or its config.txt.
        if p.canonicalize().ok().and_then(|c| c.parent().map(Path::to_path_buf)) == Some(out_abs.clone()) {
            return Err(Error::Usage(format!(
                "--out must not be the directory holding {}",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, Option<&Path>)]) -> Result<()> {
    let mut s = format!("command = {command}\nversion = {VERSION}\n");
    for (k, p) in inputs {
        let v = p.map_or_else(|| "-".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "{k} = {v}");
    }
    s.push_str("\n[config]\n");
    s.push_str(&cfg.to_text());
    write(&out.join("manifest.txt"), s)?;
    write(&out.join("config.txt"), cfg.to_text())
}

fn score(graph: &Graph, samples: &[SegSample], classes: usize) -> Result<MiouReport> {
    Ok(evaluate(Predictor::Model(graph, EvalMode::Normal), samples, classes, EVAL_BATCH)?.1)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub lr: f64,
    pub train_miou: Option<f64>,
    pub val_miou: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,loss,main_loss,aux_loss,lr,train_miou,val_miou";

impl EpochRow {
    fn from_steps(epoch: usize, steps: &[StepStats]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepStats) -> f64| steps.iter().map(f).sum::<f64>() / n;
        EpochRow {
            epoch,
            loss: mean(|s| s.loss),
            main: mean(|s| s.main),
            aux: mean(|s| s.aux),
            lr: steps.last().map_or(0.0, |s| s.lr),
            train_miou: None,
            val_miou: None,
        }
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.loss,
            self.main,
            self.aux,
            self.lr,
            opt(self.train_miou),
            opt(self.val_miou)
        )
    }
}

pub struct TrainOutcome {
    pub graph: Graph,
    pub epochs: Vec<EpochRow>,
    pub steps: Vec<StepStats>,
}

/// Trains `graph` on `train` for `cfg.epochs`, scoring every
/// `cfg.eval_every` epochs and after the last one. With `bn_recalibrate`
/// the final statistics are re-estimated before that last score.
pub fn train_graph(
    graph: Graph,
    cfg: &RunConfig,
    train: &[SegSample],
    val: &[SegSample],
    log: Log<'_>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(graph, cfg.train(), train.len())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for e in 1..=cfg.epochs {
        let stats = trainer.epoch(train)?;
        let mut row = EpochRow::from_steps(e, &stats);
        steps.extend(stats);
        if e == cfg.epochs && cfg.bn_recalibrate {
            trainer.recalibrate_batch_norm(train)?;
        }
        if e % cfg.eval_every == 0 || e == cfg.epochs {
            row.train_miou = Some(score(&trainer.graph, train, cfg.classes)?.mean);
            if !val.is_empty() {
                row.val_miou = Some(score(&trainer.graph, val, cfg.classes)?.mean);
            }
        }
        log(&format!("epoch {e}/{}: {}", cfg.epochs, row.csv()));
        epochs.push(row);
    }
    Ok(TrainOutcome { graph: trainer.into_graph(), epochs, steps })
}

/// Writes `model.ckpt`, `metrics.csv`, `config.txt` and `manifest.txt`.
/// With `init`, training starts from that checkpoint.
pub fn run_train(cfg: &RunConfig, data: Option<&Path>, init: Option<&Path>, out: &Path, log: Log<'_>) -> Result<TrainOutcome> {
    let graph = match init {
        Some(p) => load_model(cfg, p)?,
        None => build_model(cfg)?,
    };
    prepare_out(out, &[init])?;
    let (train, val) = load_data(cfg, data)?;
    write_manifest(out, "train", cfg, &[("data", data), ("checkpoint", init)])?;
    let outcome = train_graph(graph, cfg, &train, &val, log)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &outcome.epochs {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&out.join("metrics.csv"), csv)?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.graph)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Normal,
    ZeroContext,
    ZeroDetail,
    Ensemble,
    /// The auxiliary context-branch head on its own.
    Aux,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "normal" => Mode::Normal,
            "zero_context" => Mode::ZeroContext,
            "zero_detail" => Mode::ZeroDetail,
            "ensemble" => Mode::Ensemble,
            "aux" => Mode::Aux,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown mode `{s}` (expected normal, zero_context, zero_detail, ensemble or aux)"
                )))
            }
        })
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::ZeroContext => "zero_context",
            Mode::ZeroDetail => "zero_detail",
            Mode::Ensemble => "ensemble",
            Mode::Aux => "aux",
        }
    }
}

/// Scores `graph` (and `second` for an ensemble) on `samples`.
pub fn eval_graph(graph: &Graph, second: Option<&Graph>, mode: Mode, samples: &[SegSample], classes: usize) -> Result<MiouReport> {
    let predictor = match mode {
        Mode::Normal => Predictor::Model(graph, EvalMode::Normal),
        Mode::ZeroContext => Predictor::Model(graph, EvalMode::ZeroContext),
        Mode::ZeroDetail => Predictor::Model(graph, EvalMode::ZeroDetail),
        Mode::Aux => Predictor::Aux(graph),
        Mode::Ensemble => Predictor::Ensemble(
            graph,
            second.ok_or_else(|| Error::Usage("ensemble mode needs --checkpoint2".into()))?,
        ),
    };
    Ok(evaluate(predictor, samples, classes, EVAL_BATCH)?.1)
}

pub fn report_text(mode: Mode, report: &MiouReport) -> String {
    let mut s = format!("mode = {}\nmiou = {:.6}\n", mode.name(), report.mean);
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => {
                let _ = writeln!(s, "class {c} = {v:.6}");
            }
            None => {
                let _ = writeln!(s, "class {c} = absent");
            }
        }
    }
    s
}

/// Scores the validation split; writes `eval.txt` and `manifest.txt`.
pub fn run_eval(
    cfg: &RunConfig,
    data: Option<&Path>,
    ckpt: &Path,
    ckpt2: Option<&Path>,
    mode: Mode,
    out: &Path,
) -> Result<MiouReport> {
    if mode == Mode::Ensemble && ckpt2.is_none() {
        return Err(Error::Usage("ensemble mode needs --checkpoint2".into()));
    }
    let graph = load_model(cfg, ckpt)?;
    let second = ckpt2.map(|p| load_model(cfg, p)).transpose()?;
    prepare_out(out, &[Some(ckpt), ckpt2])?;
    let (_, val) = load_data(cfg, data)?;
    if val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    write_manifest(out, "eval", cfg, &[("data", data), ("checkpoint", Some(ckpt)), ("checkpoint2", ckpt2)])?;
    let report = eval_graph(&graph, second.as_ref(), mode, &val, cfg.classes)?;
    write(&out.join("eval.txt"), report_text(mode, &report))?;
    Ok(report)
}

pub fn prune_report_text(initial_miou: f64, report: &PruneReport, multipliers: &[f64]) -> String {
    let mut s = String::from("stage,multiplier,params,miou\n");
    let _ = writeln!(s, "0,{},{},{initial_miou:.6}", multipliers[0], report.initial_params);
    for (i, st) in report.stages.iter().enumerate() {
        let miou = st.miou.map_or(String::new(), |m| format!("{m:.6}"));
        let _ = writeln!(s, "{},{},{},{miou}", i + 1, st.multiplier, st.params);
    }
    s
}

fn layer_report(report: &PruneReport) -> String {
    let mut s = String::new();
    for st in &report.stages {
        let _ = writeln!(s, "[stage {}x: {} params]", st.multiplier, st.params);
        for l in &st.layers {
            let _ = writeln!(s, "{} {} -> {}", l.layers.join("+"), l.before, l.kept);
        }
    }
    s
}

pub struct PruneOutcome {
    pub graph: Graph,
    pub initial_miou: f64,
    pub report: PruneReport,
}

/// Progressive pruning of a model trained at `cfg.prune_schedule[0]`,
/// fine-tuning for `cfg.finetune_epochs` after each stage.
pub fn prune_graph(
    graph: Graph,
    cfg: &RunConfig,
    train: &[SegSample],
    val: &[SegSample],
    log: Log<'_>,
) -> Result<PruneOutcome> {
    let schedule = cfg.schedule();
    let eval_set = if val.is_empty() { train } else { val };
    let initial_miou = score(&graph, eval_set, cfg.classes)?.mean;
    log(&format!("{}x: {} params, miou {initial_miou:.4}", schedule.multipliers[0], count_params(&graph)));
    let mut ft = cfg.clone();
    ft.epochs = cfg.finetune_epochs;
    let targets = ContextNetTargets(cfg.model());
    let (graph, report) = progressive_prune(graph, &schedule, &targets, |g, stage| {
        if ft.epochs > 0 {
            *g = train_graph(g.clone(), &ft, train, &[], &mut |_| {})
                .map_err(|e| contextnet_core::Error::InvalidArgument(e.to_string()))?
                .graph;
        }
        let m = score(g, eval_set, ft.classes).map_err(|e| contextnet_core::Error::InvalidArgument(e.to_string()))?;
        stage.miou = Some(m.mean);
        log(&format!("{}x: {} params, miou {:.4}", stage.multiplier, stage.params, m.mean));
        Ok(())
    })?;
    Ok(PruneOutcome { graph, initial_miou, report })
}

/// Loads `ckpt` at the schedule's first multiplier, prunes down to 1.0x and
/// writes `model.ckpt` plus a `config.txt` describing the pruned model.
pub fn run_prune(cfg: &RunConfig, data: Option<&Path>, ckpt: &Path, out: &Path, log: Log<'_>) -> Result<PruneOutcome> {
    cfg.schedule().validate()?;
    let mut start = cfg.clone();
    start.width_multiplier = cfg.prune_schedule[0];
    let graph = load_model(&start, ckpt)?;
    prepare_out(out, &[Some(ckpt)])?;
    let (train, val) = load_data(&start, data)?;
    write_manifest(out, "prune", &start, &[("data", data), ("checkpoint", Some(ckpt))])?;
    let outcome = prune_graph(graph, &start, &train, &val, log)?;
    let mut end = start.clone();
    end.width_multiplier = *cfg.prune_schedule.last().expect("validated");
    if conv_out_widths(&outcome.graph) != conv_out_widths(&build_model(&end)?) {
        return Err(Error::Core(contextnet_core::Error::Prune("pruned widths differ from the target architecture".into())));
    }
    write(&out.join("prune.csv"), prune_report_text(outcome.initial_miou, &outcome.report, &cfg.prune_schedule))?;
    write(&out.join("prune_layers.txt"), layer_report(&outcome.report))?;
    write(&out.join("config.txt"), end.to_text())?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.graph)?;
    Ok(outcome)
}

/// Profiles single-image inference of the configured architecture at
/// `input` (default: the configured size). Writes `profile.csv` and
/// `profile.txt`.
pub fn run_profile(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    input: Option<(usize, usize)>,
    reps: usize,
    out: &Path,
) -> Result<profile::Profile> {
    let mut cfg = cfg.clone();
    if let Some((h, w)) = input {
        cfg.height = h;
        cfg.width = w;
    }
    let graph = match ckpt {
        Some(p) => load_model(&cfg, p)?,
        None => build_model(&cfg)?,
    };
    prepare_out(out, &[ckpt])?;
    write_manifest(out, "profile", &cfg, &[("checkpoint", ckpt)])?;
    let p = profile::profile(&graph, reps)?;
    write(&out.join("profile.csv"), p.to_csv())?;
    write(&out.join("profile.txt"), p.to_table())?;
    Ok(p)
}

/// Paths written by [`run_infer`].
pub struct InferOutput {
    pub mask: PathBuf,
    pub color: PathBuf,
    pub labels: LabelMap,
}

/// Folds batch norm, segments one PPM image and writes `mask.pgm`
/// (class ids) and `mask.ppm` (palette colours). The palette comes from
/// `data/palette.txt` when present.
pub fn run_infer(cfg: &RunConfig, ckpt: &Path, image: &Path, data: Option<&Path>, out: &Path) -> Result<InferOutput> {
    let img = pnm::read_ppm(image)?;
    let mut cfg = cfg.clone();
    cfg.height = img.height;
    cfg.width = img.width;
    let graph = fold_batch_norm(&load_model(&cfg, ckpt)?)?;
    let palette = dataset::load_palette(data, cfg.classes)?;
    prepare_out(out, &[Some(ckpt)])?;
    write_manifest(out, "infer", &cfg, &[("checkpoint", Some(ckpt)), ("image", Some(image)), ("data", data)])?;
    let pred = predict(&graph, &img.to_tensor(), EvalMode::Normal)?;
    let labels = LabelMap::new(img.height, img.width, pred)?;
    let (mask, color) = (out.join("mask.pgm"), out.join("mask.ppm"));
    pnm::write_pgm(&mask, &labels)?;
    pnm::write_ppm(&color, &colorize_mask(&labels, &palette))?;
    Ok(InferOutput { mask, color, labels })
}

/// Writes the synthetic train/val split described by `cfg` under `out`
/// in the on-disk dataset layout, with its palette.
pub fn run_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, val) = load_data(cfg, None)?;
    dataset::save_dataset(&out.join("train"), &train)?;
    dataset::save_dataset(&out.join("val"), &val)?;
    let palette = contextnet_core::data::Palette::default_for(cfg.classes);
    write(&out.join("palette.txt"), dataset::palette_text(&palette))?;
    write_manifest(out, "generate", cfg, &[])
}
