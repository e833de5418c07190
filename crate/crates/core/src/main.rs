use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use corrkd::checks;
use corrkd::config::RunConfig;
use corrkd::corruption::{MissingnessSpec, ModalitySet};
use corrkd::datasets::{generate_synthetic, load_dataset, save_dataset, Split};
use corrkd::distill::{self, load_checkpoint, load_checkpoint_as, save_checkpoint, write_metrics, Role, TrainConfig};
use corrkd::eval;
use corrkd::losses::LossWeights;
use corrkd::{Checkpoint64, Dataset64, Error, Result};

const CONFIG_KEYS: &str = "\
Config file (TOML) sections and keys; omitted keys keep their defaults:
  [dataset]  num_classes, samples_per_split = [train, valid, test], seq_lens = [l, a, v],
             feature_dims = [l, a, v], latent_dim, noise_std, class_sep, signal_gain, seed
  [net]      d, num_heads, num_layers, ffn_dim, dropout, num_classes, conv_kernel, input_dims
  [train]    lr, batch_size, epochs, seed, eta, clip_norm, ntcr_renormalize,
             statnet_hidden, statnet_layers, loss_weights = { task, scd, cpd, rcd },
             adam = { beta1, beta2, eps }
  [mrm]      mode = \"random_train\" | \"fixed\", p_max, p_l, p_a, p_v, available = \"lav\"
  [eval]     seeds = [..], jobs

Outputs under --out: data/, teacher.json, <name>.json, <name>_metrics.csv,
report.csv, curve.csv, run-<command>.toml and run-<command>.json.";

#[derive(Parser, Debug)]
#[command(name = "corrkd", version, about = "Distillation for multimodal classification with missing modalities", after_help = CONFIG_KEYS)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration, layered over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides dataset.seed and train.seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// default | mosi-like | mosei-like | iemocap-like
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Worker threads for sweeps (overrides eval.jobs).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Overrides train.epochs.
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,
    /// Zero-pad every modality to the longest sequence length.
    #[arg(long, global = true)]
    pad_to_max: bool,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset directory [default: <out>/data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into <out>/data.
    GenerateData,
    /// Train the teacher on complete data.
    TrainTeacher {
        #[command(flatten)]
        data: DataArg,
        /// Continue an unfinished <out>/teacher.json.
        #[arg(long)]
        resume: bool,
    },
    /// Distil a student from a frozen teacher under random missingness.
    TrainStudent {
        #[command(flatten)]
        data: DataArg,
        /// Teacher checkpoint [default: <out>/teacher.json]
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// Output name; writes <out>/<name>.json
        #[arg(long, default_value = "student")]
        name: String,
        /// Task loss only (corruption augmentation without distillation).
        #[arg(long)]
        baseline: bool,
        /// Continue an unfinished <out>/<name>.json.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint under one missingness condition.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Available modalities, e.g. `la`.
        #[arg(long, default_value = "lav")]
        available: String,
        /// Frame drop ratio for every modality.
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Evaluate a checkpoint over the full missingness grid.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        /// [default: <out>/student.json]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Summarise a sweep report.
    Report {
        /// [default: <out>/report.csv]
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Run the numeric loss checks and print a table.
    CheckLosses,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainStudent { .. } => "train-student",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Report { .. } => "report",
            Command::CheckLosses => "check-losses",
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    preset: Option<&'a str>,
    config: &'a RunConfig,
    out_dir: &'a Path,
    started_unix: f64,
    finished_unix: f64,
    artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(g.preset.as_deref().unwrap_or("default"))?;
    if let Some(path) = &g.config {
        // Parse once on its own for key validation and line numbers.
        RunConfig::load(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut base = toml::Value::try_from(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge(&mut base, over);
        cfg = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    }
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(j) = g.jobs {
        cfg.eval.jobs = j;
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

struct Ctx<'a> {
    g: &'a Global,
    cfg: RunConfig,
    artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.g.out.join(name)
    }

    fn data_dir(&self, d: &DataArg) -> PathBuf {
        d.data.clone().unwrap_or_else(|| self.out("data"))
    }

    fn load_data(&self, d: &DataArg) -> Result<Dataset64> {
        let dir = self.data_dir(d);
        let ds: Dataset64 = load_dataset(&dir)?;
        if self.g.pad_to_max {
            ds.pad_to_max()
        } else {
            Ok(ds)
        }
    }

    fn checkpoint_path(&self, p: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let path = p.clone().unwrap_or_else(|| self.out(default));
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        Ok(path)
    }
}

fn train_cmd(
    ctx: &mut Ctx,
    role: Role,
    data: &DataArg,
    name: &str,
    teacher: Option<&Checkpoint64>,
    baseline: bool,
    resume: bool,
) -> Result<()> {
    let ds = ctx.load_data(data)?;
    let mut tcfg = ctx.cfg.train_config();
    if baseline {
        tcfg.loss_weights = LossWeights::task_only();
    }
    let ckpt_path = ctx.out(&format!("{name}.json"));
    let mut ckpt = if resume && ckpt_path.exists() {
        let mut c: Checkpoint64 = load_checkpoint_as(&ckpt_path, role)?;
        // Only the schedule length may change on resume.
        if (TrainConfig {
            epochs: tcfg.epochs,
            ..c.train.clone()
        }) != tcfg
        {
            return Err(Error::InvalidConfig(format!(
                "{} was trained with a different configuration",
                ckpt_path.display()
            )));
        }
        if c.state.epoch > tcfg.epochs {
            return Err(Error::InvalidConfig(format!(
                "{} is already past epoch {}",
                ckpt_path.display(),
                tcfg.epochs
            )));
        }
        c.train.epochs = tcfg.epochs;
        log::info!("resuming {} from epoch {}", ckpt_path.display(), c.state.epoch);
        c
    } else {
        match role {
            Role::Teacher => distill::init_teacher(&ds, &tcfg)?,
            Role::Student => distill::init_student(&ds, teacher.expect("student needs teacher"), &tcfg)?,
        }
    };
    let total = tcfg.epochs;
    while ckpt.state.epoch < total {
        let next = ckpt.state.epoch + 1;
        distill::run_epochs(&mut ckpt, &ds, teacher, next)?;
        save_checkpoint(&ckpt, &ckpt_path)?;
    }
    save_checkpoint(&ckpt, &ckpt_path)?;
    let metrics = ctx.out(&format!("{name}_metrics.csv"));
    write_metrics(&ckpt.history, &metrics)?;
    println!(
        "{role} `{name}`: best epoch {} with validation {} {:.4}",
        ckpt.best_epoch,
        if role == Role::Teacher {
            "accuracy"
        } else {
            "weighted F1"
        },
        ckpt.best_score
    );
    ctx.artifacts.extend([ckpt_path, metrics]);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::CheckLosses = cli.command {
        let rows = checks::loss_checks();
        print!("{}", checks::format_table(&rows));
        let failed = rows.iter().filter(|c| !c.pass).count();
        println!("{} checks, {failed} failed", rows.len());
        return if failed == 0 {
            Ok(())
        } else {
            Err(Error::NonFinite {
                component: format!("{failed} loss checks"),
            })
        };
    }

    let g = &cli.global;
    let started = now();
    let cfg = resolve_config(g)?;
    std::fs::create_dir_all(&g.out).map_err(|e| Error::io(format!("creating {}", g.out.display()), e))?;
    log::info!("resolved configuration:\n{}", cfg.to_toml());
    let mut ctx = Ctx {
        g,
        cfg,
        artifacts: Vec::new(),
    };

    match &cli.command {
        Command::GenerateData => {
            let mut ds: Dataset64 = generate_synthetic(&ctx.cfg.dataset)?;
            if g.pad_to_max {
                ds = ds.pad_to_max()?;
            }
            let dir = ctx.out("data");
            save_dataset(&ds, &dir)?;
            println!(
                "wrote {} / {} / {} samples to {}",
                ds.train.len(),
                ds.valid.len(),
                ds.test.len(),
                dir.display()
            );
            ctx.artifacts.push(dir);
        }
        Command::TrainTeacher { data, resume } => {
            train_cmd(&mut ctx, Role::Teacher, data, "teacher", None, false, *resume)?;
        }
        Command::TrainStudent {
            data,
            teacher,
            name,
            baseline,
            resume,
        } => {
            let tpath = ctx.checkpoint_path(teacher, "teacher.json")?;
            let t: Checkpoint64 = load_checkpoint_as(&tpath, Role::Teacher)?;
            train_cmd(&mut ctx, Role::Student, data, name, Some(&t), *baseline, *resume)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            available,
            p,
            split,
        } => {
            let path = ctx.checkpoint_path(checkpoint, "student.json")?;
            let ckpt: Checkpoint64 = load_checkpoint(&path)?;
            let ds = ctx.load_data(data)?;
            let split: Split = split.parse()?;
            let set: ModalitySet = available.parse()?;
            let spec = MissingnessSpec::fixed(set, *p);
            spec.validate()?;
            let row = eval::evaluate_condition(&ckpt.model, ds.split(split), &spec, ctx.cfg.train.seed)?;
            let report = eval::RobustnessReport::from_rows(vec![row.clone()]);
            let out = ctx.out("evaluate.csv");
            let curve = ctx.out("evaluate_curve.csv");
            eval::write_report(&report, &out, &curve)?;
            println!(
                "{} on {}: acc {:.4}, weighted F1 {:.4} (n = {})",
                row.condition,
                split.name(),
                row.accuracy,
                row.weighted_f1,
                row.n
            );
            ctx.artifacts.extend([out, curve]);
        }
        Command::Sweep { data, checkpoint } => {
            let path = ctx.checkpoint_path(checkpoint, "student.json")?;
            let ckpt: Checkpoint64 = load_checkpoint(&path)?;
            let ds = ctx.load_data(data)?;
            let report = eval::robustness_sweep(&ckpt.model, &ds.test, &ctx.cfg.eval.seeds, ctx.cfg.eval.jobs)?;
            let out = ctx.out("report.csv");
            let curve = ctx.out("curve.csv");
            eval::write_report(&report, &out, &curve)?;
            println!(
                "{} rows; six-condition average weighted F1 {:.4}",
                report.rows.len(),
                report.mean_partial_wf1()
            );
            ctx.artifacts.extend([out, curve]);
        }
        Command::Report { report } => {
            let path = report.clone().unwrap_or_else(|| ctx.out("report.csv"));
            let rep = eval::read_report(&path)?;
            println!("{:<10} {:>8} {:>8} {:>6}", "condition", "acc", "wf1", "seed");
            for r in rep.rows.iter().chain(&rep.averages) {
                println!(
                    "{:<10} {:>8.4} {:>8.4} {:>6}",
                    r.condition, r.accuracy, r.weighted_f1, r.seed
                );
            }
            println!("mean six-condition weighted F1: {:.4}", rep.mean_partial_wf1());
            for (s, ok) in rep.monotone_flags() {
                println!("seed {s}: wf1(p=0.1) >= wf1(p=1): {ok}");
            }
            return Ok(());
        }
        Command::CheckLosses => unreachable!("handled above"),
    }

    let name = cli.command.name();
    let toml_path = ctx.out(&format!("run-{name}.toml"));
    write_atomic(&toml_path, ctx.cfg.to_toml().as_bytes())?;
    ctx.artifacts.push(toml_path);
    let manifest = RunManifest {
        command: name,
        config_path: g.config.as_deref(),
        preset: g.preset.as_deref(),
        config: &ctx.cfg,
        out_dir: &g.out,
        started_unix: started,
        finished_unix: now(),
        artifacts: ctx.artifacts.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&ctx.out(&format!("run-{name}.json")), &json)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
