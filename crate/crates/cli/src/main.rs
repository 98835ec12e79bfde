use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dtsw_core::config::{parse_bool, parse_value, Entry};
use dtsw_core::data::{generate_dataset, load_rvol, save_rvol, Dataset, MANIFEST_NAME};
use dtsw_core::metrics::{EvalReport, SampleEval};
use dtsw_core::model::{load_checkpoint, ModelConfig, Task};
use dtsw_core::train::{
    evaluate, load_model, parse_run_config, train_fold, FoldPaths, StepRecord, TrainConfig, LOG_COLUMNS,
};
use dtsw_core::verify::{run_suite, Group};
use dtsw_core::{Error, Tensor};

const DETERMINISTIC_ENV: &str = "DTSW_DETERMINISTIC";

#[derive(Parser)]
#[command(
    name = "dtsw",
    version,
    about = "Dual-task windowed transformer: follow-up scan generation and prognosis classification"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value run file (`#` starts a comment); flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Replace interactive attention with independent decoders
    #[arg(long, global = true)]
    no_interactive_attention: bool,
    /// Decoder that computes the shared attention weights
    #[arg(long, global = true, value_enum, value_name = "TASK")]
    reference_task: Option<RefTask>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefTask {
    Gen,
    Cls,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a stratified fold manifest
    GenData {
        /// Number of scan pairs
        #[arg(long)]
        n: Option<usize>,
        /// Number of cross-validation folds
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train with k-fold cross-validation (or a single fold)
    Train {
        /// Dataset directory containing the manifest
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train only this fold
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue a fold from a trainer checkpoint (requires --fold)
        #[arg(long, value_name = "CKPT", requires = "fold")]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints and print an EvalReport
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate (on all samples, or on --fold's held-out samples)
        #[arg(long, conflicts_with = "run")]
        checkpoint: Option<PathBuf>,
        /// Training output directory: each fold's best checkpoint on its held-out fold
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Run the self-check suite; exits nonzero if any check fails
    Verify {
        /// Only run checks whose name contains this text
        #[arg(long)]
        filter: Option<String>,
        /// Break the softmax gradient first (the suite must then fail)
        #[arg(long, hide = true)]
        mutate_softmax_grad: bool,
    },
    /// Predict the follow-up scan and class probabilities for one scan
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Initial scan (RVOL)
        #[arg(long)]
        input: PathBuf,
    },
}

/// Everything a run file and the flags can set.
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: Option<PathBuf>,
    n: usize,
    folds: usize,
    val_fraction: f64,
    normalize: bool,
    /// Whether the user constrained the model shape (file, mode or ablation flags).
    model_explicit: bool,
}

const RUN_KEYS: &[&str] = &["mode", "data", "n", "folds", "val_fraction", "normalize"];

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let text = match &common.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let entries = dtsw_core::config::parse_kv(&text).context("parsing config")?;
        let file_mode = entries.iter().rev().find(|e| e.key == "mode").map(|e| e.value.clone());
        let three_d = match (common.mode, file_mode.as_deref()) {
            (Some(m), _) => matches!(m, Mode::ThreeD),
            (None, None | Some("2d")) => false,
            (None, Some("3d")) => true,
            (None, Some(other)) => bail!("config: mode must be 2d or 3d, got {other:?}"),
        };
        let mut model = if three_d { ModelConfig::desk_3d() } else { ModelConfig::desk_2d() };
        let mut train = TrainConfig::default();
        let extra = parse_run_config(&text, &mut model, &mut train, RUN_KEYS)?;
        let mut rc = RunConfig {
            model,
            train,
            data: None,
            n: 200,
            folds: 5,
            val_fraction: 0.1,
            normalize: false,
            model_explicit: common.config.is_some()
                || common.mode.is_some()
                || common.no_interactive_attention
                || common.reference_task.is_some(),
        };
        for e in &extra {
            rc.set_extra(e)?;
        }
        if let Some(s) = common.seed {
            rc.train.seed = s;
        }
        if common.no_interactive_attention {
            rc.model.interactive = false;
        }
        if let Some(r) = common.reference_task {
            rc.model.reference_task = match r {
                RefTask::Gen => Task::Generation,
                RefTask::Cls => Task::Classification,
            };
        }
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    fn set_extra(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "mode" => {}
            "data" => self.data = Some(PathBuf::from(&e.value)),
            "n" => self.n = parse_value(e)?,
            "folds" => self.folds = parse_value(e)?,
            "val_fraction" => self.val_fraction = parse_value(e)?,
            "normalize" => self.normalize = parse_bool(e)?,
            _ => unreachable!("only RUN_KEYS are returned"),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let t = &self.train;
        let crop = t.crop.as_ref().map(|c| dtsw_core::config::join(c)).unwrap_or_else(|| "model".into());
        s += &format!(
            "steps={}\nbatch_size={}\nlr={}\ndisc_lr={}\nseed={}\ngradnorm={}\nval_every={}\nwarmup={}\ncosine={}\nlr_floor={}\naugment={}\n# crop={crop}\n",
            t.steps,
            t.batch_size,
            t.lr,
            t.disc_lr,
            t.seed,
            t.gradnorm,
            t.val_every,
            t.warmup,
            t.cosine,
            t.lr_floor,
            t.augment
        );
        s += &format!("folds={}\nval_fraction={}\nnormalize={}\n", self.folds, self.val_fraction, self.normalize);
        if let Some(d) = &self.data {
            s += &format!("data={}\n", d.display());
        }
        s
    }

    fn dataset(&self, flag: Option<&PathBuf>) -> Result<Dataset> {
        let dir = flag.or(self.data.as_ref()).context("no dataset: pass --data DIR or set data= in the config")?;
        let manifest = dir.join(MANIFEST_NAME);
        if !manifest.exists() {
            bail!("{} not found (run gen-data first)", manifest.display());
        }
        Ok(Dataset::load(&manifest, self.normalize)?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let deterministic = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
    if deterministic {
        // kernels are single-threaded with a fixed reduction order already
        eprintln!("{DETERMINISTIC_ENV}=1: deterministic kernels");
    }
    let c = &cli.common;
    match &cli.command {
        Command::GenData { n, folds } => gen_data(c, *n, *folds),
        Command::Train { data, fold, steps, resume } => train(c, data.as_ref(), *fold, *steps, resume.as_deref()),
        Command::Eval { data, checkpoint, run, fold, json } => {
            eval(c, data.as_ref(), checkpoint.as_deref(), run.as_deref(), *fold, *json)
        }
        Command::Verify { filter, mutate_softmax_grad } => Ok(verify(filter.as_deref(), *mutate_softmax_grad)),
        Command::Infer { checkpoint, input } => infer(c, checkpoint, input),
    }
}

fn gen_data(c: &Common, n: Option<usize>, folds: Option<usize>) -> Result<ExitCode> {
    let rc = RunConfig::load(c)?;
    let out = c.out.clone().or(rc.data.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let (n, k) = (n.unwrap_or(rc.n), folds.unwrap_or(rc.folds));
    let entries = generate_dataset(&out, n, k, &rc.model.input, rc.train.seed)?;
    let positives = entries.iter().filter(|e| e.label == 1).count();
    println!(
        "wrote {} pairs ({} hemorrhagic, {} non-hemorrhagic) in {} folds to {}",
        entries.len(),
        positives,
        entries.len() - positives,
        k,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(
    c: &Common,
    data: Option<&PathBuf>,
    fold: Option<usize>,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let mut rc = RunConfig::load(c)?;
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    let ds = rc.dataset(data)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("run.cfg"), rc.to_text()).with_context(|| format!("writing {}/run.cfg", out.display()))?;
    fs::write(out.join("log_columns.tsv"), LOG_COLUMNS.join("\t") + "\n")?;

    let folds: Vec<usize> = match fold {
        Some(f) if f >= ds.folds() => bail!("fold {f} out of range: the manifest has {} folds", ds.folds()),
        Some(f) => vec![f],
        None => (0..ds.folds()).collect(),
    };
    let resume_ck = resume.map(load_checkpoint).transpose()?;
    let mut samples = Vec::new();
    for &f in &folds {
        let start = Instant::now();
        let every = (rc.train.steps / 20).max(1);
        let progress = |r: &StepRecord| {
            if r.step.is_multiple_of(every) || r.step == rc.train.steps {
                eprintln!(
                    "fold {f} step {}/{} gen {:.4} cls {:.4} w {:.3}/{:.3} ({:.0}s)",
                    r.step,
                    rc.train.steps,
                    r.gen,
                    r.cls,
                    r.w_gen,
                    r.w_cls,
                    start.elapsed().as_secs_f64()
                );
            }
        };
        let res = train_fold(&ds, &rc.model, &rc.train, f, &out, rc.val_fraction, resume_ck.as_ref(), progress);
        let fold_samples = match res {
            Err(Error::NonFinite { step, batch }) => {
                let dump = out.join(format!("fold{f}.nonfinite.txt"));
                fs::write(&dump, format!("step\t{step}\nbatch\t{}\n", batch.join(",")))?;
                bail!(
                    "fold {f}: non-finite loss at step {step}; batch sample ids {batch:?} (written to {})",
                    dump.display()
                );
            }
            other => other?,
        };
        let fr = EvalReport::from_samples(&fold_samples)?;
        eprintln!("fold {f}: held-out {}", fr.to_text().lines().collect::<Vec<_>>().join(" "));
        samples.extend(fold_samples);
    }
    let report = EvalReport::from_samples(&samples)?;
    write_report(&out, &report, &samples)?;
    print!("{}", report.to_text());
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, report: &EvalReport, samples: &[SampleEval]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    let mut tsv = String::from("id\tfold\tlabel\tpredicted\tscore\tpsnr\tssim\n");
    for s in samples {
        tsv += &format!("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", s.id, s.fold, s.label, s.predicted, s.score, s.psnr, s.ssim);
    }
    fs::write(dir.join("samples.tsv"), tsv)?;
    Ok(())
}

fn eval(
    c: &Common,
    data: Option<&PathBuf>,
    checkpoint: Option<&Path>,
    run: Option<&Path>,
    fold: Option<usize>,
    json: bool,
) -> Result<ExitCode> {
    let rc = RunConfig::load(c)?;
    let ds = rc.dataset(data)?;
    let expected = rc.model_explicit.then_some(&rc.model);
    let batch = rc.train.batch_size;
    let mut samples = Vec::new();
    match (checkpoint, run) {
        (Some(ck), _) => {
            let model = load_model(ck, expected)?;
            let idx = match fold {
                Some(f) => ds.split(f).1,
                None => (0..ds.len()).collect(),
            };
            if idx.is_empty() {
                bail!("no samples to evaluate");
            }
            samples = evaluate(&model, &ds, &idx, batch)?;
        }
        (None, Some(dir)) => {
            let folds: Vec<usize> = fold.map(|f| vec![f]).unwrap_or_else(|| (0..ds.folds()).collect());
            for f in folds {
                let path = FoldPaths::new(dir, f).best_ckpt;
                if !path.exists() {
                    if fold.is_some() {
                        bail!("{} not found", path.display());
                    }
                    continue;
                }
                let model = load_model(&path, expected)?;
                samples.extend(evaluate(&model, &ds, &ds.split(f).1, batch)?);
            }
            if samples.is_empty() {
                bail!("no fold checkpoints found in {}", dir.display());
            }
        }
        (None, None) => bail!("pass --checkpoint PATH or --run DIR"),
    }
    let report = EvalReport::from_samples(&samples)?;
    if let Some(out) = &c.out {
        write_report(out, &report, &samples)?;
    }
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(filter: Option<&str>, mutate: bool) -> ExitCode {
    if mutate {
        dtsw_core::tensor::BREAK_SOFTMAX_GRAD.store(true, Ordering::SeqCst);
        println!("mutation: softmax backward drops its correction term");
    }
    let start = Instant::now();
    let mut stdout = std::io::stdout();
    let summary = run_suite(filter, |r| {
        let _ = writeln!(
            stdout,
            "{} {:<32} {:>9.3}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        );
        let _ = stdout.flush();
    });
    for g in
        [Group::Gradients, Group::TokenAlgebra, Group::Attention, Group::GradNorm, Group::Metrics, Group::RoundTrips]
    {
        if summary.results.iter().any(|r| r.group == g) {
            println!(
                "group {:<14} {} {:>9.3}s",
                g.as_str(),
                if summary.group_passed(g) { "pass" } else { "FAIL" },
                summary.group_time(g).as_secs_f64()
            );
        }
    }
    println!("{} checks, {} failed, {:.1}s", summary.results.len(), summary.failures(), start.elapsed().as_secs_f64());
    if summary.passed() && !summary.results.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn infer(c: &Common, checkpoint: &Path, input: &Path) -> Result<ExitCode> {
    let rc = RunConfig::load(c)?;
    let model = load_model(checkpoint, rc.model_explicit.then_some(&rc.model))?;
    let scan = load_rvol(input)?;
    if scan.shape() != model.cfg.input.as_slice() {
        bail!("{}: extents {:?}, model expects {:?}", input.display(), scan.shape(), model.cfg.input);
    }
    let mut shape = vec![1];
    shape.extend_from_slice(scan.shape());
    let batch = Tensor::new(shape, scan.into_data())?;
    let (pred, probs) = model.predict(&batch)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("scan");
    let path = out.join(format!("{stem}.pred.rvol"));
    save_rvol(&path, &Tensor::new(model.cfg.input.clone(), pred.into_data())?)?;
    let p = probs.data();
    let class = if p[1] > p[0] { 1 } else { 0 };
    println!("prediction={}", path.display());
    println!("class={class}");
    println!("p_hemorrhagic={}", p[1]);
    Ok(ExitCode::SUCCESS)
}
