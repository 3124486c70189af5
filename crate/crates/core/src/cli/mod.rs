//! Command-line entry point: argument parsing, config resolution and the
//! subcommands.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::auxseg::AuxSeg;
use crate::data::{content_checksum, save_archive};
use crate::error::{Error, Result};
use crate::inference::{detections_csv, run, write_detections_jsonl, ArchiveSource, CostReport, Mode, Models};
use crate::metrics::{panoptic_quality, write_json, EvalReport, InstanceMap};
use crate::model::{Detector, Integration, PhiPrime};
use crate::training::{write_pseudo_labels_jsonl, Labeling, PseudoSource};

pub use config::RunConfig;
pub use pipeline::{ablate, Ablation, Axis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ctxdet", version, about = "Context-aware nucleus detection over tiled slides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML or JSON run config; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for the split and every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Pooling grid side.
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub integration: Option<Integration>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic benchmark as slide archives.
    GenData {
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        slides: Option<usize>,
        /// Window side in pixels.
        #[arg(long)]
        patch: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the detector.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        no_augment: bool,
        /// Annotate every window instead of the checkerboard.
        #[arg(long)]
        all_labeled: bool,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train the auxiliary segmentation model.
    TrainAux {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the refinement head on pseudo-labeled detections.
    PostTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        /// `cl` (cross-labeling) or `sl` (self-labeling).
        #[arg(long)]
        source: Option<PseudoSource>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_me: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Detect nuclei on slide archives.
    Infer {
        /// One slide archive or a directory of them.
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        delta: Option<usize>,
        #[arg(long)]
        theta_det: Option<f32>,
        #[arg(long)]
        no_me: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a detector on a dataset split, or PQ on instance maps.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        /// `train`, `val`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        class_agnostic: bool,
        #[arg(long)]
        no_me: bool,
        /// Predicted instance map (JSON) for PQ.
        #[arg(long, requires = "gt_masks")]
        pred_masks: Option<PathBuf>,
        #[arg(long, requires = "pred_masks")]
        gt_masks: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare inference modes' costs.
    Bench {
        /// Slide archive; a synthetic slide is generated when absent.
        #[arg(long)]
        slide: Option<PathBuf>,
        /// Trained detector; a seeded untrained one when absent.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "streaming,lfov_emulated")]
        mode: Vec<Mode>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test one axis of variants.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Slide archives; the configured synthetic benchmark when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::TrainAux { common, .. }
            | Command::PostTrain { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = self.delta {
            cfg.model.delta = d;
            if self.k.is_none() {
                cfg.model.k = cfg.model.k.min(cfg.model.blocks());
            }
        }
        if let Some(k) = self.k {
            cfg.model.k = k;
        }
        if let Some(s) = self.s {
            cfg.model.s = s;
        }
        if let Some(i) = self.integration {
            cfg.model.integration = i;
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    match cmd {
        Command::GenData { rows, cols, slides, patch, .. } => {
            if let Some(r) = rows {
                cfg.generator.rows = *r;
            }
            if let Some(c) = cols {
                cfg.generator.cols = *c;
            }
            if let Some(n) = slides {
                cfg.slides = *n;
            }
            if let Some(p) = patch {
                cfg.generator.patch_h = *p;
                cfg.generator.patch_w = *p;
            }
        }
        Command::Train {
            epochs,
            lr,
            batch,
            no_augment,
            all_labeled,
            model,
            ..
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
            if let Some(b) = batch {
                cfg.train.batch = *b;
            }
            if *no_augment {
                cfg.train.augment = false;
            }
            if *all_labeled {
                cfg.train.labeling = Labeling::All;
            }
            model.apply(&mut cfg);
        }
        Command::TrainAux { epochs, lr, .. } => {
            if let Some(e) = epochs {
                cfg.aux_train.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.aux_train.lr = *l;
            }
        }
        Command::PostTrain { source, epochs, no_me, .. } => {
            if let Some(s) = source {
                cfg.post.source = *s;
            }
            if let Some(e) = epochs {
                cfg.post.epochs = *e;
            }
            if *no_me {
                cfg.post.use_me = false;
            }
        }
        Command::Infer {
            mode,
            delta,
            theta_det,
            no_me,
            ..
        } => {
            if let Some(m) = mode {
                cfg.inference.mode = *m;
            }
            if let Some(d) = delta {
                cfg.model.delta = *d;
            }
            if theta_det.is_some() {
                cfg.inference.theta_det = *theta_det;
            }
            if *no_me {
                cfg.inference.use_me = false;
            }
        }
        Command::Eval {
            sigma, class_agnostic, no_me, ..
        } => {
            if let Some(s) = sigma {
                cfg.eval.sigma = *s;
            }
            if *class_agnostic {
                cfg.eval.class_agnostic = true;
            }
            if *no_me {
                cfg.inference.use_me = false;
            }
        }
        Command::Bench { rows, cols, model, .. } => {
            if let Some(r) = rows {
                cfg.generator.rows = *r;
            }
            if let Some(c) = cols {
                cfg.generator.cols = *c;
            }
            model.apply(&mut cfg);
        }
        Command::Ablate { epochs, lr, .. } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status. Errors go to stderr.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() || matches!(e, Error::Missing { .. }) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Resolves the config and runs the command on its own thread pool.
pub fn dispatch(cmd: &Command) -> Result<()> {
    let cfg = resolve(cmd)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| execute(cmd, &cfg))
}

fn load_detector(path: &Path, cfg: &RunConfig) -> Result<Detector> {
    let det = Detector::load(path)?;
    if det.cfg.categories != cfg.eval.categories {
        return Err(Error::Config(format!(
            "detector has {} categories, run config {}",
            det.cfg.categories, cfg.eval.categories
        )));
    }
    Ok(det)
}

fn load_head(path: &Path, det: &Detector) -> Result<PhiPrime> {
    let c = &det.cfg;
    PhiPrime::load(path, c.d, c.d_m, c.phi_hidden, c.categories)
}

fn execute(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cmd.common());
    cfg.write_snapshot(&out)?;
    match cmd {
        Command::GenData { .. } => gen_data(cfg, &out),
        Command::Train { data, .. } => {
            let ds = pipeline::load_dataset(data)?;
            pipeline::check_geometry(cfg, &ds)?;
            let split = pipeline::split(cfg, ds)?;
            let ckpt = out.join("detector.ctxd");
            let (det, report) = pipeline::train_detector(cfg, &split, Some(&ckpt))?;
            det.save(&ckpt)?;
            write_text(&out.join("metrics.csv"), &report.metrics_csv(cfg.model.categories))?;
            write_json(&out.join("train_report.json"), &report)
        }
        Command::TrainAux { data, .. } => {
            let ds = pipeline::load_dataset(data)?;
            pipeline::check_geometry(cfg, &ds)?;
            let split = pipeline::split(cfg, ds)?;
            let (aux, report) = pipeline::train_aux_model(cfg, &split)?;
            aux.save(&out.join("aux.ctxd"))?;
            write_json(&out.join("aux_report.json"), &report)
        }
        Command::PostTrain { data, detector, aux, .. } => {
            let det = load_detector(detector, cfg)?;
            let aux = aux.as_deref().map(AuxSeg::load).transpose()?;
            if aux.is_none() && (cfg.post.source == PseudoSource::Cross || cfg.post.use_me) {
                return Err(Error::Config("post-train needs --aux for cross-labeling or morphology embeddings (or --source sl --no-me)".into()));
            }
            let ds = pipeline::load_dataset(data)?;
            pipeline::check_geometry(cfg, &ds)?;
            let split = pipeline::split(cfg, ds)?;
            let (head, report, dump) = pipeline::post_train(cfg, &det, aux.as_ref(), &split)?;
            head.save(&out.join("phi_prime.ctxd"))?;
            write_pseudo_labels_jsonl(&out.join("pseudo_labels.jsonl"), &dump)?;
            write_json(&out.join("post_report.json"), &report)
        }
        Command::Infer {
            slide,
            detector,
            aux,
            head,
            delta,
            ..
        } => {
            let mut det = load_detector(detector, cfg)?;
            if let Some(d) = delta {
                if det.cfg.integration == Integration::Concat && *d != det.cfg.delta {
                    return Err(Error::Config("concat integration is tied to its training delta".into()));
                }
                det.cfg.delta = *d;
                det.cfg.k = det.cfg.k.min(det.cfg.blocks());
                det.cfg.validate()?;
            }
            let aux = aux.as_deref().map(AuxSeg::load).transpose()?;
            let head = head.as_deref().map(|p| load_head(p, &det)).transpose()?;
            let models = Models {
                detector: &det,
                aux: aux.as_ref(),
                head: head.as_ref(),
            };
            let dirs = if slide.join("manifest.json").is_file() {
                vec![slide.clone()]
            } else {
                crate::data::list_archives(slide)?
            };
            if dirs.is_empty() {
                return Err(Error::Missing {
                    what: "slide archives",
                    path: slide.clone(),
                });
            }
            let mut all = Vec::new();
            let mut costs = Vec::new();
            for d in dirs {
                let (dets, cost) = run(&mut ArchiveSource::open(&d)?, models, &cfg.inference)?;
                log::info!("{}: {} detections in {:.1} ms", cost.slide_id, dets.len(), cost.wall_ms);
                all.extend(dets);
                costs.push(reproducible(cost));
            }
            write_detections_jsonl(&out.join("detections.jsonl"), &all)?;
            write_text(&out.join("detections.csv"), &detections_csv(&all))?;
            write_json(&out.join("cost_report.json"), &costs)
        }
        Command::Eval {
            data,
            detector,
            aux,
            head,
            split,
            pred_masks,
            gt_masks,
            ..
        } => {
            if let (Some(p), Some(g)) = (pred_masks, gt_masks) {
                let read = |p: &PathBuf| -> Result<InstanceMap> {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    Ok(serde_json::from_slice(&bytes)?)
                };
                let pq = panoptic_quality(&read(p)?, &read(g)?, cfg.eval.categories)?;
                write_json(&out.join("pq_report.json"), &pq)?;
            }
            let (Some(data), Some(detector)) = (data, detector) else {
                if pred_masks.is_none() {
                    return Err(Error::Config("eval needs --data and --detector, or --pred-masks and --gt-masks".into()));
                }
                return Ok(());
            };
            let det = load_detector(detector, cfg)?;
            let aux = aux.as_deref().map(AuxSeg::load).transpose()?;
            let head = head.as_deref().map(|p| load_head(p, &det)).transpose()?;
            let ds = pipeline::load_dataset(data)?;
            pipeline::check_geometry(cfg, &ds)?;
            let parts = pipeline::split(cfg, ds)?;
            let slides = match split.as_str() {
                "train" => parts.train,
                "val" => parts.val,
                "test" => parts.test,
                "all" => parts.train.into_iter().chain(parts.val).chain(parts.test).collect(),
                other => return Err(Error::Config(format!("unknown split {other:?} (train, val, test, all)"))),
            };
            let models = Models {
                detector: &det,
                aux: aux.as_ref(),
                head: head.as_ref(),
            };
            let outcome = pipeline::evaluate_models(cfg, models, &slides)?;
            log::info!("average F1 {:.4}", outcome.scores.average_f1);
            write_json(
                &out.join("eval_report.json"),
                &EvalReport {
                    config: cfg.eval.clone(),
                    scores: outcome.scores.clone(),
                    runs: None,
                },
            )?;
            write_json(&out.join("eval_counts.json"), &outcome)
        }
        Command::Bench { slide, detector, mode, .. } => {
            let det = match detector {
                Some(p) => load_detector(p, cfg)?,
                None => Detector::new(cfg.model.clone(), cfg.seed)?,
            };
            let slide = match slide {
                Some(dir) => crate::data::load_archive(dir)?.0,
                None => crate::data::generate_synthetic_slide(&cfg.generator, "bench")?.0,
            };
            let mut reports = Vec::new();
            for m in mode {
                let inf = crate::inference::InferenceConfig {
                    mode: *m,
                    ..cfg.inference.clone()
                };
                let r = crate::inference::bench(&slide, Models::detector_only(&det), &inf, *m)?;
                log::info!("{m}: {} encodes, {} bytes, {:.1} ms", r.encoder_invocations, r.total_bytes(), r.wall_ms);
                reports.push(reproducible(r));
            }
            write_text(&out.join("bench.csv"), &bench_csv(&reports))?;
            write_json(&out.join("bench.json"), &reports)
        }
        Command::Ablate {
            axis, values, data, runs, ..
        } => {
            let ds = match data {
                Some(d) => pipeline::load_dataset(d)?,
                None => pipeline::generate_dataset(cfg)?,
            };
            pipeline::check_geometry(cfg, &ds)?;
            let split = pipeline::split(cfg, ds)?;
            let values: Vec<String> = if values.is_empty() {
                axis.default_values().iter().map(|s| s.to_string()).collect()
            } else {
                values.clone()
            };
            let result = ablate(cfg, &split, *axis, &values, *runs)?;
            write_text(&out.join(format!("ablate_{axis}.csv")), &result.csv(cfg.model.categories))?;
            write_json(&out.join(format!("ablate_{axis}.json")), &result)
        }
    }
}

/// Wall time varies between runs, so written reports leave it out.
fn reproducible(mut r: CostReport) -> CostReport {
    r.wall_ms = 0.0;
    r
}

pub fn bench_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("mode,slide_id,windows,encoder_invocations,aux_invocations,tile_bytes_read,extra_bytes,total_bytes,max_reads_per_tile,peak_pooled,peak_full,peak_cache_bytes,detections\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.slide_id,
            r.windows,
            r.encoder_invocations,
            r.aux_invocations,
            r.tile_bytes_read,
            r.extra_bytes,
            r.total_bytes(),
            r.max_reads_per_tile,
            r.peak_pooled,
            r.peak_full,
            r.peak_cache_bytes,
            r.detections
        );
    }
    s
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = pipeline::generate_dataset(cfg)?;
    let mut index = String::from("slide_id,manifest_sha256,content_sha256\n");
    for s in &ds {
        let dir = save_archive(&s.slide, &s.annotations, out)?;
        let mpath = dir.join("manifest.json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        println!("{} {}", s.slide.slide_id, digest);
        let _ = writeln!(index, "{},{},{}", s.slide.slide_id, digest, content_checksum(&s.slide, &s.annotations));
    }
    write_text(&out.join("checksums.csv"), &index)
}
