use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use branchgan::checkpoint::Checkpoint;
use branchgan::edit::EditConstraints;
use branchgan::imaging::strip;
use branchgan::spectral::{dimension_targets, subvector_targets, variance_image};
use branchgan::trainer::{EncoderTraining, StageEvent, SuppressionBudget, TrainEvent};
use branchgan::{
    constant_sweep, fuse, generate_synthetic, load_checkpoint, optimize_edit, sample_latent, save_checkpoint,
    suppression_experiment, train_encoder, BandSpec, BranchedLatent, Dataset, EditConfig, Generator, Image, InitMode,
    Network, SamplePolicy, SuppressionKind, SyntheticRecipe, Trainer, VbsReportOptions,
};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, set_path, RunConfig};
use crate::{input_err, plot, CliError, Command, RunFlags};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Vbs(a) => vbs(a),
        Command::Sweep(a) => sweep(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Edit(a) => edit(a),
        Command::TrainEncoder(a) => train_encoder_cmd(a),
        Command::Suppress(a) => suppress(a),
        Command::SynthData(a) => synth_data(a),
        Command::Serve(a) => serve(a),
    }
}

/// Collects written files and emits the run manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| input_err(format!("{}: {e}", dir.display())))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
        self.dir.join(name)
    }

    fn png(&mut self, name: &str, image: &Image) -> Result<(), CliError> {
        let p = self.path(name);
        Ok(image.save_png(&p)?)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let p = self.path(name);
        Ok(std::fs::write(p, body)?)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.text(name, &(body + "\n"))
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p).map_err(|e| CliError::Runtime(e.to_string()))?;
        let io = |e: csv::Error| CliError::Runtime(e.to_string());
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `run_manifest.json`: argv, resolved configuration and outputs.
    fn finish(mut self, command: &str, config: Value) -> Result<(), CliError> {
        let manifest = json!({
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "outputs": self.files,
            "elapsed_secs": self.started.elapsed().as_secs_f64(),
        });
        let p = self.dir.join("run_manifest.json");
        std::fs::write(p, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
        self.files.clear();
        Ok(())
    }
}

fn run_flags_patch(f: &RunFlags) -> Value {
    let mut p = json!({});
    if let Some(d) = &f.data {
        set_path(&mut p, "data.source", json!({"kind": "directory", "path": d}));
    }
    if let Some(n) = f.synthetic {
        set_path(&mut p, "data.source.kind", json!("synthetic"));
        set_path(&mut p, "data.source.recipe.samples", json!(n));
    }
    if let Some(s) = f.data_seed {
        set_path(&mut p, "data.source.seed", json!(s));
    }
    if let Some(v) = f.lr {
        set_path(&mut p, "optim.learning_rate", json!(v));
    }
    if let Some(v) = f.batch_size {
        set_path(&mut p, "optim.batch_size", json!(v));
    }
    if let Some(v) = f.seed {
        set_path(&mut p, "seed", json!(v));
    }
    if let Some(v) = &f.out {
        set_path(&mut p, "out", json!(v));
    }
    p
}

fn load_model(path: &Path) -> Result<(Checkpoint, Generator), CliError> {
    let ck = load_checkpoint(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    let g = ck.generator().map_err(input_err)?;
    Ok((ck, g))
}

fn read_latent(path: &Path, g: &Generator) -> Result<BranchedLatent, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    let z: BranchedLatent = serde_json::from_str(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    z.validate(g.config()).map_err(input_err)?;
    Ok(z)
}

/// A latent from a JSON file, or drawn uniformly from a seed.
fn latent_arg(file: Option<&Path>, seed: Option<u64>, g: &Generator, what: &str) -> Result<BranchedLatent, CliError> {
    match (file, seed) {
        (Some(p), _) => read_latent(p, g),
        (None, Some(s)) => {
            let cfg = g.config();
            Ok(sample_latent(cfg, &SamplePolicy::uniform(cfg.branch_count()), s)?)
        }
        (None, None) => Err(CliError::Config(format!("{what}: give a latent file or a seed"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| CliError::Config(format!("{what}: cannot parse '{p}'"))))
        .collect()
}

// ------------------------------------------------------------------ train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Epochs per stage (overrides the profile).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fixed steps per stage instead of epochs.
    #[arg(long)]
    pub steps_per_stage: Option<usize>,
    #[arg(long)]
    pub stage1_fraction: Option<f64>,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps (a later --resume continues).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Also write latest.bgck every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Log losses every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Resolve and validate the configuration, write it, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

fn trainer_checkpoint(t: &Trainer, cfg: &RunConfig) -> Checkpoint {
    let mut ck = Checkpoint::from_generator(&t.g);
    ck.discriminator = Some(t.d.params().clone());
    ck.train_state = Some(t.state.clone());
    ck.metadata.insert("profile".into(), cfg.profile.to_string());
    ck.metadata.insert("seed".into(), cfg.seed.to_string());
    ck.metadata.insert(
        "schedule".into(),
        serde_json::to_string(&cfg.schedule()).expect("schedule serializes"),
    );
    ck
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut patch = run_flags_patch(&a.run);
    if let Some(e) = a.epochs {
        set_path(&mut patch, "schedule.epochs_per_stage", json!(e));
    }
    if let Some(s) = a.steps_per_stage {
        set_path(&mut patch, "schedule.steps_per_stage", json!(s));
    }
    if let Some(f) = a.stage1_fraction {
        set_path(&mut patch, "schedule.stage1_fraction", json!(f));
    }
    let cfg = resolve(a.run.profile, a.run.config.as_deref(), patch)?;
    let cfg_json = serde_json::to_value(&cfg).expect("config serializes");
    let mut out = Outputs::new(&cfg.out)?;
    out.json("config.json", &cfg)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg_json).expect("config serializes"));
        return out.finish("train", cfg_json);
    }
    let dataset = Dataset::build(&cfg.dataset_spec()).map_err(input_err)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
            let state = ck
                .train_state
                .clone()
                .ok_or_else(|| CliError::Config(format!("{} has no training state", path.display())))?;
            let d = ck
                .discriminator()
                .map_err(input_err)?
                .ok_or_else(|| CliError::Config(format!("{} has no discriminator", path.display())))?;
            if ck.config != cfg.net {
                return Err(CliError::Config("checkpoint network differs from the resolved configuration".into()));
            }
            Trainer::resume(ck.generator().map_err(input_err)?, d, state, cfg.schedule(), cfg.optim.clone())
                .map_err(input_err)?
        }
        None => Trainer::new(&cfg.net, cfg.schedule(), cfg.optim.clone(), cfg.seed).map_err(input_err)?,
    };
    tracing::info!(
        profile = %cfg.profile,
        images = dataset.len(),
        budget = trainer.budget(&dataset),
        done = trainer.state.global_step,
        "training"
    );
    let dir = cfg.out.clone();
    let mut stage_files = Vec::new();
    let log_every = a.log_every.max(1);
    let mut observer = |t: &Trainer, ev: TrainEvent| -> branchgan::Result<()> {
        match ev {
            TrainEvent::Step(r) => {
                if (r.global_step + 1) % log_every as u64 == 0 {
                    tracing::info!(step = r.global_step + 1, stage = r.stage, d_loss = r.d_loss, g_loss = r.g_loss);
                }
                if a.checkpoint_every.is_some_and(|n| n > 0 && (r.global_step + 1) % n as u64 == 0) {
                    save_checkpoint(&trainer_checkpoint(t, &cfg), &dir.join("latest.bgck"))?;
                }
            }
            TrainEvent::Stage(StageEvent::StageEnd { stage, .. }) => {
                let name = format!("stage{stage}.bgck");
                save_checkpoint(&trainer_checkpoint(t, &cfg), &dir.join(&name))?;
                tracing::info!(stage, "stage complete");
                stage_files.push(name);
            }
            TrainEvent::Stage(_) => {}
        }
        Ok(())
    };
    trainer.run(&dataset, a.max_steps, &mut observer)?;
    for f in stage_files {
        out.path(&f);
    }
    let latest = out.path("latest.bgck");
    save_checkpoint(&trainer_checkpoint(&trainer, &cfg), &latest)?;
    out.text("loss.csv", &trainer.state.loss_csv())?;
    out.text("events.jsonl", &trainer.state.events_jsonl())?;
    let d: Vec<f64> = trainer.state.history.iter().map(|r| r.d_loss).collect();
    let g: Vec<f64> = trainer.state.history.iter().map(|r| r.g_loss).collect();
    out.png("loss.png", &plot::lines(&[d, g]))?;
    println!(
        "trained {} steps (stage {}, finished: {}) -> {}",
        trainer.state.global_step,
        trainer.state.stage,
        trainer.state.finished,
        cfg.out.display()
    );
    out.finish("train", cfg_json)
}

// ------------------------------------------------------------------ vbs

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VbsMode {
    PerDimension,
    PerSubvector,
}

#[derive(Debug, Args)]
pub struct VbsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "per-subvector")]
    pub mode: VbsMode,
    /// Band edges, e.g. 0,0.0625,0.125,0.25,0.5,1 (default: five octave bands).
    #[arg(long)]
    pub bands: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub constants: usize,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "vbs_out")]
    pub out: PathBuf,
}

fn vbs(a: VbsArgs) -> Result<(), CliError> {
    let (_, g) = load_model(&a.model)?;
    let bands = match &a.bands {
        Some(s) => {
            let edges: Vec<f64> = parse_list(s, "bands")?;
            let spec = BandSpec {
                bands: edges.windows(2).map(|w| (w[0], w[1])).collect(),
            };
            spec.validate().map_err(input_err)?;
            spec
        }
        None => BandSpec::five_band(),
    };
    let cfg = g.config().clone();
    let targets = match a.mode {
        VbsMode::PerDimension => dimension_targets(&cfg),
        VbsMode::PerSubvector => subvector_targets(&cfg),
    };
    let opts = VbsReportOptions {
        n_constants: a.constants,
        n_samples: a.samples,
        seed: a.seed,
        keep_per_constant: matches!(a.mode, VbsMode::PerDimension),
    };
    let report = branchgan::vbs_report(&g, &targets, &bands, &opts).map_err(input_err)?;
    let mut out = Outputs::new(&a.out)?;
    out.json("vbs_report.json", &report)?;
    out.text("vbs.csv", &report.to_csv())?;
    let nb = bands.len();
    if let Some(samples) = report.samples_csv() {
        out.text("vbs_samples.csv", &samples)?;
        let pops: Vec<Vec<f64>> = (0..nb).map(|b| report.normalized_samples(b).unwrap_or_default()).collect();
        for (b, p) in pops.iter().enumerate() {
            out.png(&format!("vbs_hist_b{b}.png"), &plot::histograms(std::slice::from_ref(p), 30))?;
        }
        out.png("vbs_hist.png", &plot::histograms(&pops, 30))?;
    }
    let curves: Vec<Vec<f64>> = report
        .normalized
        .iter()
        .map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        .collect();
    if matches!(a.mode, VbsMode::PerSubvector) {
        out.png("vbs_peaks.png", &plot::lines(&curves))?;
    }
    let mut rows = Vec::new();
    for t in &report.targets {
        if let Ok(d) = report.dominant_scale(*t) {
            rows.push(vec![t.label(), d.to_string()]);
        }
    }
    out.csv("dominant_scale.csv", &["target", "band"], &rows)?;
    if let Ok(s) = report.spread() {
        println!("spread {s:.6}");
    }
    let cohort = report.cohort_normalized_mean();
    println!(
        "{} targets x {} bands; cohort means {:?}",
        report.targets.len(),
        nb,
        cohort.iter().map(|m| m.map(|v| format!("{v:.6}"))).collect::<Vec<_>>()
    );
    out.finish(
        "vbs",
        json!({"model": a.model, "mode": a.mode, "bands": bands, "constants": a.constants, "samples": a.samples, "seed": a.seed}),
    )
}

// ------------------------------------------------------------------ sweep / fuse

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Base latent as JSON ({"subvectors": [[...], ...]}).
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// Draw the base latent from this seed instead.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sub-vector to replace.
    #[arg(long)]
    pub t: usize,
    /// Comma separated p values.
    #[arg(long, default_value = "-1,-0.5,0,0.5,1", allow_hyphen_values = true)]
    pub p: String,
    #[arg(long, default_value = "sweep_out")]
    pub out: PathBuf,
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let (_, g) = load_model(&a.model)?;
    let base = latent_arg(a.latent.as_deref(), a.seed, &g, "sweep")?;
    let ps: Vec<f32> = parse_list(&a.p, "p")?;
    if ps.len() < 2 {
        return Err(CliError::Config("a sweep needs at least 2 p values".into()));
    }
    let latents = constant_sweep(&base, a.t, &ps).map_err(input_err)?;
    let images = g.generate_batch(&latents)?;
    let var = variance_image(&images)?;
    let mut out = Outputs::new(&a.out)?;
    for (i, im) in images.iter().enumerate() {
        out.png(&format!("sweep_{i}.png"), im)?;
    }
    out.png("variance.png", &var.display())?;
    let mut all = images.clone();
    all.push(var.display());
    out.png("strip.png", &strip(&all).expect("non-empty"))?;
    out.json("latents.json", &latents)?;
    let rows: Vec<Vec<String>> = var
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i / var.width).to_string(), (i % var.width).to_string(), v.to_string()])
        .collect();
    out.csv("variance.csv", &["y", "x", "variance"], &rows)?;
    println!("{} images, total variance {:.6}", images.len(), var.total());
    out.finish("sweep", json!({"model": a.model, "base": base, "t": a.t, "p": ps}))
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub a_seed: Option<u64>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub b_seed: Option<u64>,
    /// Comma separated sub-vector indices taken from a (the rest come from b).
    #[arg(long, default_value = "")]
    pub take_from_a: String,
    /// Seed used for a and b when neither a file nor a per-latent seed is given (b uses seed + 1).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "fuse_out")]
    pub out: PathBuf,
}

fn fuse_cmd(a: FuseArgs) -> Result<(), CliError> {
    let (_, g) = load_model(&a.model)?;
    let za = latent_arg(a.a.as_deref(), a.a_seed.or(a.seed), &g, "a")?;
    let zb = latent_arg(a.b.as_deref(), a.b_seed.or(a.seed.map(|s| s + 1)), &g, "b")?;
    let take: BTreeSet<usize> = parse_list::<usize>(&a.take_from_a, "take-from-a")?.into_iter().collect();
    let z = fuse(&za, &zb, &take).map_err(input_err)?;
    let images = g.generate_batch(&[za.clone(), zb.clone(), z.clone()])?;
    let mut out = Outputs::new(&a.out)?;
    out.png("a.png", &images[0])?;
    out.png("b.png", &images[1])?;
    out.png("fused.png", &images[2])?;
    out.png("strip.png", &strip(&images).expect("non-empty"))?;
    out.json("fused.json", &z)?;
    out.finish("fuse", json!({"model": a.model, "a": za, "b": zb, "take_from_a": take}))
}

// ------------------------------------------------------------------ edit

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Encoder,
    Random,
    Given,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory with color.png, mask.png and optional edge.png.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Color target; used with a full mask unless --mask is given.
    #[arg(long, conflicts_with = "constraints")]
    pub color: Option<PathBuf>,
    #[arg(long, conflicts_with = "constraints")]
    pub mask: Option<PathBuf>,
    #[arg(long, conflicts_with = "constraints")]
    pub edge: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "encoder")]
    pub init: InitArg,
    /// Starting latent for --init given.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "edit_out")]
    pub out: PathBuf,
}

fn read_gray(path: &Path) -> Result<Image, CliError> {
    let bytes = std::fs::read(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    Image::gray_from_png_bytes(&bytes).map_err(input_err)
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let (ck, g) = load_model(&a.model)?;
    let encoder = ck.encoder().map_err(input_err)?;
    let (h, w) = g.resolution();
    let channels = g.config().output_channels;
    let constraints = match &a.constraints {
        Some(dir) => EditConstraints::load_dir(dir).map_err(input_err)?,
        None => {
            let color = a.color.as_deref().map(|p| Image::load(p).map_err(input_err)).transpose()?;
            let mask = match (&a.mask, &color) {
                (Some(p), _) => branchgan::edit::binarize(read_gray(p)?),
                (None, Some(_)) => Image::filled(1, h, w, 1.0),
                (None, None) => Image::filled(1, h, w, 0.0),
            };
            let color = color.unwrap_or_else(|| Image::filled(channels, h, w, 0.0));
            let color = if channels == 1 { color.to_gray() } else { color };
            let edge = a.edge.as_deref().map(read_gray).transpose()?;
            EditConstraints { color, mask, edge }
        }
    };
    constraints.validate((h, w), channels).map_err(input_err)?;
    let mut config = EditConfig::default();
    config.init = match a.init {
        InitArg::Encoder if encoder.is_none() => {
            return Err(CliError::Config("--init encoder needs a checkpoint with an encoder (see train-encoder)".into()))
        }
        InitArg::Encoder => InitMode::Encoder,
        InitArg::Random => InitMode::Random,
        InitArg::Given => InitMode::Given {
            latent: read_latent(
                a.latent
                    .as_deref()
                    .ok_or_else(|| CliError::Config("--init given needs --latent".into()))?,
                &g,
            )?,
        },
    };
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.restarts {
        config.restarts = v;
    }
    if let Some(v) = a.alpha {
        config.alpha = v;
    }
    if let Some(v) = a.step_size {
        config.step_size = v;
    }
    config.validate().map_err(input_err)?;
    let r = optimize_edit(&g, encoder.as_ref(), &constraints, &config, a.seed)?;
    let mut out = Outputs::new(&a.out)?;
    out.png("result.png", r.image.as_ref().expect("edit image"))?;
    out.json("result.json", &r)?;
    let rows: Vec<Vec<String>> = r
        .trace
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    out.csv("trace.csv", &["step", "loss"], &rows)?;
    out.png("trace.png", &plot::lines(std::slice::from_ref(&r.trace)))?;
    println!("loss {:.6} -> {:.6}", r.initial_loss, r.final_loss);
    out.finish("edit", json!({"model": a.model, "config": config, "seed": a.seed}))
}

// ------------------------------------------------------------------ encoder

#[derive(Debug, Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "encoder_out")]
    pub out: PathBuf,
}

fn train_encoder_cmd(a: EncoderArgs) -> Result<(), CliError> {
    let (mut ck, g) = load_model(&a.model)?;
    let mut spec = EncoderTraining {
        seed: a.seed,
        ..EncoderTraining::default()
    };
    if let Some(v) = a.steps {
        spec.steps = v;
        spec.eval_every = spec.eval_every.min(v.max(1));
    }
    if let Some(v) = a.batch_size {
        spec.batch_size = v;
    }
    if let Some(v) = a.lr {
        spec.learning_rate = v;
    }
    let report = train_encoder(&g, &spec).map_err(|e| match e {
        branchgan::Error::InvalidConfig(m) => CliError::Config(m),
        other => other.into(),
    })?;
    ck.encoder = Some(report.encoder.params().clone());
    let mut out = Outputs::new(&a.out)?;
    let path = out.path("with_encoder.bgck");
    save_checkpoint(&ck, &path)?;
    let rows: Vec<Vec<String>> = report
        .curve
        .iter()
        .map(|(s, e)| vec![s.to_string(), e.to_string()])
        .collect();
    out.csv("encoder_curve.csv", &["step", "latent_error"], &rows)?;
    out.png("encoder_curve.png", &plot::lines(&[report.curve.iter().map(|c| c.1).collect()]))?;
    println!("latent error {:.4} -> {:.4}", report.initial_error, report.final_error);
    out.finish("train-encoder", json!({"model": a.model, "spec": spec}))
}

// ------------------------------------------------------------------ suppress

#[derive(Debug, Args)]
pub struct SuppressArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// pretrained_dominant (a) or sequential_defreeze (b).
    #[arg(long)]
    pub kind: SuppressionKind,
    #[arg(long, default_value_t = 400)]
    pub steps_per_phase: usize,
    #[arg(long, default_value_t = 8)]
    pub constants: usize,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
}

fn suppress(a: SuppressArgs) -> Result<(), CliError> {
    let cfg = resolve(a.run.profile, a.run.config.as_deref(), run_flags_patch(&a.run))?;
    let budget = SuppressionBudget {
        steps_per_phase: a.steps_per_phase,
        eval_constants: a.constants,
        eval_samples: a.samples,
    };
    let dataset = Dataset::build(&cfg.dataset_spec()).map_err(input_err)?;
    let (report, g) = suppression_experiment(a.kind, &cfg.net, &dataset, &cfg.optim, &budget, cfg.seed)
        .map_err(|e| match e {
            branchgan::Error::InvalidConfig(m) => CliError::Config(m),
            other => other.into(),
        })?;
    let mut out = Outputs::new(&cfg.out)?;
    out.json("suppression_report.json", &report)?;
    for (b, v) in report.variance_images.iter().enumerate() {
        out.png(&format!("variance_b{b}.png"), &v.display())?;
    }
    let rows: Vec<Vec<String>> = report
        .branch_variance
        .iter()
        .enumerate()
        .map(|(b, v)| vec![b.to_string(), v.to_string()])
        .collect();
    out.csv("branch_variance.csv", &["branch", "variance"], &rows)?;
    let rows: Vec<Vec<String>> = report
        .dominance
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, r)| {
                vec![i.to_string(), j.to_string(), r.map(|v| v.to_string()).unwrap_or_default()]
            })
        })
        .collect();
    out.csv("dominance.csv", &["branch", "over", "ratio"], &rows)?;
    let path = out.path("suppress.bgck");
    save_checkpoint(&Checkpoint::from_generator(&g), &path)?;
    println!("branch variance {:?}", report.branch_variance);
    out.finish(
        "suppress",
        json!({"run": cfg, "kind": a.kind, "budget": budget}),
    )
}

// ------------------------------------------------------------------ synth-data

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// HEIGHTxWIDTH.
    #[arg(long, default_value = "32x32")]
    pub resolution: String,
    /// Optional TOML file with recipe fields.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
}

fn synth_data(a: SynthArgs) -> Result<(), CliError> {
    let (h, w) = a
        .resolution
        .split_once('x')
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .ok_or_else(|| CliError::Config(format!("resolution '{}' is not HEIGHTxWIDTH", a.resolution)))?;
    let mut recipe: SyntheticRecipe = match &a.recipe {
        Some(p) => {
            let v = crate::config::read_toml(p)?;
            serde_json::from_value(v).map_err(input_err)?
        }
        None => SyntheticRecipe::default(),
    };
    recipe.samples = a.n;
    recipe.resolution = (h, w);
    recipe.validate().map_err(input_err)?;
    let images = generate_synthetic(&recipe, a.seed)?;
    let mut out = Outputs::new(&a.out)?;
    for (i, im) in images.iter().enumerate() {
        out.png(&format!("img_{i:05}.png"), im)?;
    }
    println!("wrote {} images to {}", images.len(), a.out.display());
    out.finish("synth-data", json!({"recipe": recipe, "seed": a.seed}))
}

// ------------------------------------------------------------------ serve

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service TOML (bind, queue_capacity, [[models]]).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Address to bind, overriding the config file.
    #[arg(long)]
    pub bind: Option<String>,
    /// Extra model as ID=CHECKPOINT; repeatable.
    #[arg(long = "model")]
    pub models: Vec<String>,
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    use branchgan_service::{ModelEntry, ServiceConfig};
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p).map_err(CliError::Config)?,
        None => ServiceConfig::default(),
    };
    for m in &a.models {
        let (id, path) = m
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--model '{m}' is not ID=CHECKPOINT")))?;
        cfg.models.push(ModelEntry {
            id: id.into(),
            checkpoint: path.into(),
        });
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    cfg.validate().map_err(CliError::Config)?;
    // load once up front so bad checkpoints are reported as config errors
    branchgan_service::load_models(&cfg.models).map_err(input_err)?;
    let rt = tokio::runtime::Runtime::new()?;
    let bind = cfg.bind.clone();
    rt.block_on(branchgan_service::serve(cfg, &bind))?;
    Ok(())
}
