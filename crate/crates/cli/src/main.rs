//! `cada`: dataset generation, training, evaluation and sweeps.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cada::config::Config;
use cada::data::{generate_dataset, load_dataset, Dataset, GenerateOptions};
use cada::losses::group_count;
use cada::numerics::Checkpoint;
use cada::retrieval::{evaluate, mam_accuracy, test_split, evaluate_on, EvalReport, Protocol};
use cada::trainer::{load_model, TrainOptions, Trainer};
use cada::{CadaError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cada", version, about = "Cross-modal adaptive dual association for text-to-person retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic attribute-person dataset.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Retrain or re-evaluate over a range of settings.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 80)]
    ids: usize,
    /// Held-out identities (default: a fifth).
    #[arg(long)]
    test_ids: Option<usize>,
    #[arg(long, default_value_t = 4)]
    images_per_id: usize,
    #[arg(long, default_value_t = 2)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Config file; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_ndf: bool,
    #[arg(long)]
    no_atp: bool,
    #[arg(long)]
    no_ara: bool,
}

impl RunArgs {
    fn config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::desk(),
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        c.loss.ndf &= !self.no_ndf;
        c.loss.atp &= !self.no_atp;
        c.loss.ara &= !self.no_ara;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print progress every this many steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    progress: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Global,
    Local,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Global => Protocol::Global,
            ProtocolArg::Local => Protocol::Local,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Default: `eval.protocol` of the checkpoint's config.
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Candidates reranked by the decoder (default: `eval.eta` of the checkpoint's config).
    #[arg(long)]
    eta: Option<usize>,
    /// Directory for the report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Eta,
    MaskRate,
    Group,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    /// Comma-separated settings: η values or mask rates.
    #[arg(long)]
    values: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CadaError::io(path, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let opts = GenerateOptions {
        n_ids: a.ids,
        test_ids: a.test_ids,
        images_per_id: a.images_per_id,
        captions_per_image: a.captions_per_image,
        image_size: a.image_size,
        seed: a.seed,
    };
    let s = generate_dataset(&opts, &a.out)?;
    println!("attribute capacity {} distinct identities", s.capacity);
    println!("identities {} (train {}, test {})", s.specs.len(), s.train_ids, s.test_ids);
    let test = s.records.iter().filter(|r| r.split == cada::data::Split::Test).count();
    println!("records {} (train {}, test {})", s.records.len(), s.records.len() - test, test);
    println!("manifest sha256 {}", s.manifest_sha256);
    Ok(())
}

fn train_run<'a>(
    config: &Config,
    data: &'a Dataset,
    out: &Path,
    resume: Option<&Path>,
    progress: usize,
) -> Result<Trainer<'a>> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, config, data)?,
        None => Trainer::new(config, data)?,
    };
    let opts = TrainOptions { stop_after: None, progress_every: (progress > 0).then_some(progress) };
    let start = Instant::now();
    let outcome = trainer.run(out, &opts)?;
    println!(
        "trained {} steps in {:.1}s; checkpoint {}",
        outcome.steps,
        start.elapsed().as_secs_f64(),
        outcome.checkpoint.display()
    );
    Ok(trainer)
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = a.run.config()?;
    let data = load_dataset(&a.run.data)?;
    train_run(&config, &data, &a.out, a.resume.as_deref(), a.progress)?;
    Ok(())
}

fn print_report(r: &EvalReport, seconds: f64) {
    println!(
        "{} eta={} queries={} gallery={} rank1={:.4} rank5={:.4} rank10={:.4} map={:.4} decoder_calls={} ({seconds:.2}s)",
        r.protocol.name(),
        r.eta,
        r.num_queries,
        r.gallery_size,
        r.rank1,
        r.rank5,
        r.rank10,
        r.map,
        r.decoder_calls
    );
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (config, model) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let protocol = match a.protocol {
        Some(p) => Protocol::from(p),
        None if config.eval.local => Protocol::Local,
        None => Protocol::Global,
    };
    let eta = a.eta.unwrap_or(config.eval.eta);
    let start = Instant::now();
    let report = evaluate(&model, &data, protocol, eta)?;
    print_report(&report, start.elapsed().as_secs_f64());
    let mam = mam_accuracy(&model, &data)?;
    println!("mam top1 {:.4} over {} masked tokens", mam.accuracy, mam.masked_tokens);
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| CadaError::io(out, e))?;
        let path = out.join(format!("eval_{}_eta{}.csv", protocol.name(), report.eta));
        write(&path, &report.to_csv())?;
        println!("report {}", path.display());
    }
    Ok(())
}

const SWEEP_HEADER: &str = "setting,rank1,rank5,rank10,map,decoder_calls";

fn sweep_row(setting: &str, r: &EvalReport) -> String {
    format!("{setting},{:.6},{:.6},{:.6},{:.6},{}", r.rank1, r.rank5, r.rank10, r.map, r.decoder_calls)
}

fn parse_values<V: std::str::FromStr>(values: &Option<String>, default: &[V]) -> Result<Vec<V>>
where
    V: Clone,
{
    match values {
        None => Ok(default.to_vec()),
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| CadaError::Validation(format!("bad sweep value {v:?}"))))
            .collect(),
    }
}

/// Group settings scaled from a 72-token reference to `max_len`.
fn group_settings(max_len: usize) -> Vec<(usize, usize)> {
    [(36, 36), (36, 18), (24, 24), (48, 24), (72, 72)]
        .iter()
        .map(|&(p, r)| ((p * max_len / 72).max(1), (r * max_len / 72).max(1)))
        .collect()
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = a.run.config()?;
    let data = load_dataset(&a.run.data)?;
    fs::create_dir_all(&a.out).map_err(|e| CadaError::io(&a.out, e))?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let (name, x_label) = match a.kind {
        SweepKind::Eta => {
            let etas: Vec<usize> = parse_values(&a.values, &[0, 4, 8, 16, 32, 64])?;
            let trainer = train_run(&base, &data, &a.out.join("run"), None, 0)?;
            let (queries, gallery) = test_split(&trainer.model, &data)?;
            for &eta in &etas {
                let protocol = if eta == 0 { Protocol::Global } else { Protocol::Local };
                let r = evaluate_on(&trainer.model, &queries, &gallery, protocol, eta)?;
                print_report(&r, 0.0);
                rows.push(sweep_row(&eta.to_string(), &r));
                points.push((eta.to_string(), r.rank1));
            }
            ("eta", "eta")
        }
        SweepKind::MaskRate => {
            let alphas: Vec<f64> = parse_values(&a.values, &[0.2, 0.4, 0.6, 0.8, 1.0])?;
            for &alpha in &alphas {
                let mut c = base.clone();
                c.loss.alpha = alpha;
                let trainer = train_run(&c, &data, &a.out.join(format!("alpha_{alpha}")), None, 0)?;
                let r = evaluate(&trainer.model, &data, Protocol::Local, c.eval.eta)?;
                print_report(&r, 0.0);
                rows.push(sweep_row(&alpha.to_string(), &r));
                points.push((alpha.to_string(), r.rank1));
            }
            ("mask_rate", "mask rate")
        }
        SweepKind::Group => {
            let m = base.model.max_len;
            for (p, r) in group_settings(m) {
                let mut c = base.clone();
                c.loss.group_size = p;
                c.loss.group_stride = r;
                let kappa = group_count(m, p, r)?;
                let trainer = train_run(&c, &data, &a.out.join(format!("group_{p}_{r}")), None, 0)?;
                let rep = evaluate(&trainer.model, &data, Protocol::Local, c.eval.eta)?;
                print_report(&rep, 0.0);
                let setting = format!("p{p}_r{r}_k{kappa}");
                rows.push(sweep_row(&setting, &rep));
                points.push((setting, rep.rank1));
            }
            ("group", "group size / stride")
        }
    };
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    let csv_path = a.out.join(format!("sweep_{name}.csv"));
    write(&csv_path, &csv)?;
    let svg_path = a.out.join(format!("sweep_{name}.svg"));
    plot::rank1_chart(&svg_path, &format!("Rank-1 by {x_label}"), x_label, &points)?;
    println!("sweep {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}
