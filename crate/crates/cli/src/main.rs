use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxseg::checkpoint::Checkpoint;
use voxseg::config::{RunConfig, RunOverrides};
use voxseg::data::{BinaryMask, Volume};
use voxseg::metrics::{write_report_csv, write_runs_csv};
use voxseg::model::{describe_config, search_parameter_count, Variant};
use voxseg::nn::Norm;
use voxseg::phantom::{self, annotation_file, Split};
use voxseg::pipeline::{self, load_split};
use voxseg::train::train;
use voxseg::Error;

/// Volumetric segmentation: phantoms, training, inference and evaluation.
#[derive(Parser)]
#[command(name = "voxseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    PhantomGen(PhantomArgs),
    /// Majority-vote `<id>_ann<k>.rvol` annotations into one mask per volume.
    CombineGt(CombineArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score one or more checkpoints on a dataset split.
    Evaluate(EvaluateArgs),
    /// Segment a single volume.
    Infer(InferArgs),
    /// Print the parameter ledger of a model.
    Describe(DescribeArgs),
}

fn parse_extents(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<_> = s.split([',', 'x']).map(str::trim).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| format!("`{p}` is not a positive integer")))
        .collect::<Result<_, _>>()?;
    nums.try_into()
        .map_err(|_| format!("expected three extents like 160,188,49, got `{s}`"))
}

fn parse_norm(s: &str) -> Result<Norm, String> {
    match s {
        "none" => Ok(Norm::None),
        "instance" => Ok(Norm::Instance),
        _ => Err(format!("unknown norm `{s}` (expected none or instance)")),
    }
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 87)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Volume extents X,Y,Z.
    #[arg(long, value_parser = parse_extents, default_value = "160,188,49")]
    extents: [usize; 3],
    /// Also write this many perturbed annotations per volume.
    #[arg(long, default_value_t = 0)]
    annotators: usize,
    /// Probability of flipping a boundary voxel in each annotation.
    #[arg(long, default_value_t = 0.3)]
    flip: f64,
}

#[derive(Args)]
struct CombineArgs {
    /// Directory holding `<id>_ann<k>.rvol` files.
    #[arg(long)]
    annotations: PathBuf,
    /// Where fused masks and agreement.csv are written.
    #[arg(long)]
    out: PathBuf,
}

/// Run settings; every flag overrides the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Network input extents X,Y,Z.
    #[arg(long, value_parser = parse_extents)]
    input_extents: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_norm)]
    norm: Option<Norm>,
    #[arg(long)]
    zero_head: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epoch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    reports: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> voxseg::Result<RunConfig> {
        let file = match &self.config {
            Some(path) => RunOverrides::load(path)?,
            None => RunOverrides::default(),
        };
        let flags = RunOverrides {
            variant: self.variant,
            levels: self.levels,
            base_channels: self.base_channels,
            growth: self.growth,
            kernel: self.kernel,
            input_extents: self.input_extents,
            norm: self.norm,
            zero_head: self.zero_head,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            epoch_size: self.epoch_size,
            seed: self.seed,
            threshold: self.threshold,
            val_every: self.val_every,
            dataset: self.dataset,
            checkpoints: self.checkpoints,
            reports: self.reports,
        };
        file.merge(flags).resolve()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// One checkpoint per independent run.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Dataset directory (defaults to the one the first checkpoint trained on).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Overrides the checkpoint's threshold.
    #[arg(long)]
    threshold: Option<f32>,
    /// Output directory for the CSV reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input `.rvol` intensity volume.
    #[arg(long)]
    input: PathBuf,
    /// Output mask `.rvol`.
    #[arg(long)]
    mask: PathBuf,
    /// Optional output probability map `.rvol`.
    #[arg(long)]
    prob: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Describe the model stored in a checkpoint instead.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// List the configurations whose size is nearest this parameter count.
    #[arg(long)]
    search: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Shape { .. } | Error::Dimension { .. } | Error::InvalidValue(_) => 3,
        Error::Numerical(_) => 4,
        Error::NonScalarLoss(_) | Error::MissingGrad(_) => 1,
    }
}

fn run(command: Command) -> voxseg::Result<()> {
    match command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::CombineGt(a) => combine_gt(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Infer(a) => infer(a),
        Command::Describe(a) => describe(a),
    }
}

fn phantom_gen(a: PhantomArgs) -> voxseg::Result<()> {
    let phantoms = phantom::generate_dataset(a.count, a.seed, a.extents)?;
    let manifest = phantom::write_dataset(&a.out, a.seed, a.extents, &phantoms)?;
    for (i, p) in phantoms.iter().enumerate() {
        let masks = phantom::annotator_masks(&p.mask, a.annotators, a.flip, a.seed.wrapping_add(i as u64))?;
        for (k, m) in masks.iter().enumerate() {
            m.save(a.out.join(annotation_file(&p.id, k + 1)))?;
        }
    }
    let ids = manifest.ids();
    println!(
        "wrote {} phantoms to {} (train {}, val {}, test {})",
        phantoms.len(),
        a.out.display(),
        ids[&Split::Train].len(),
        ids[&Split::Val].len(),
        ids[&Split::Test].len()
    );
    Ok(())
}

fn combine_gt(a: CombineArgs) -> voxseg::Result<()> {
    let combined = pipeline::combine_annotations(&a.annotations)?;
    pipeline::write_combined(&a.out, &combined)?;
    for c in &combined {
        let m = c.agreement.len();
        let pairs: Vec<String> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .map(|(i, j)| format!("{}-{}: {:.4}", i + 1, j + 1, c.agreement[i][j]))
            .collect();
        println!("{}: {} annotators, {} voxels kept; {}", c.id, m, c.mask.count(), pairs.join(", "));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> voxseg::Result<()> {
    let config = a.run.resolve()?;
    if a.dry_run {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let resume = a.resume.map(Checkpoint::load).transpose()?;
    let out = train(&config, resume, |row| {
        let val = row.val.map(|(j, d)| format!(" val jaccard {j:.4} dsc {d:.4}")).unwrap_or_default();
        println!("epoch {} steps {} loss {:.5}{val}", row.epoch, row.steps, row.train_loss);
    })?;
    println!("latest checkpoint: {}", out.latest.display());
    if let (Some(best), Some((epoch, score))) = (&out.best, out.checkpoint.best) {
        println!("best checkpoint: {} (epoch {epoch}, val jaccard {score:.4})", best.display());
    }
    println!("history: {}", out.history.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> voxseg::Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ckpts = a.checkpoint.iter().map(Checkpoint::load).collect::<voxseg::Result<Vec<_>>>()?;
    let dataset = a.dataset.clone().unwrap_or_else(|| ckpts[0].config.dataset.clone());
    let items = load_split(&dataset, a.split)?;
    if items.is_empty() {
        return Err(Error::Data(format!("split `{}` of {} is empty", a.split.name(), dataset.display())));
    }
    let mut runs = Vec::new();
    for (k, (path, ckpt)) in a.checkpoint.iter().zip(&ckpts).enumerate() {
        let model = ckpt.model()?;
        let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
        let reports = pipeline::evaluate(&model, &items, threshold)?;
        let out = a.out.join(format!("run{}.csv", k + 1));
        write_csv(&out, |w| write_report_csv(w, &reports))?;
        println!(
            "{} (epoch {}, {}): mean jaccard {:.4} -> {}",
            path.display(),
            ckpt.epoch,
            checkpoint_label(ckpt),
            pipeline::mean_jaccard(&reports),
            out.display()
        );
        runs.push(reports);
    }
    let out = a.out.join("runs.csv");
    write_csv(&out, |w| write_runs_csv(w, &runs))?;
    println!("aggregate over {} run(s): {}", runs.len(), out.display());
    Ok(())
}

/// Says whether a checkpoint is the run's best, its final state, or both.
fn checkpoint_label(ckpt: &Checkpoint) -> &'static str {
    let best = ckpt.best.is_some_and(|(e, _)| e == ckpt.epoch);
    let last = ckpt.epoch >= ckpt.config.epochs as u64;
    match (best, last) {
        (true, true) => "best and final",
        (true, false) => "best",
        (false, true) => "final",
        (false, false) => "intermediate",
    }
}

fn write_csv(path: &Path, f: impl FnOnce(&mut File) -> voxseg::Result<()>) -> voxseg::Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    f(&mut file)?;
    file.flush().map_err(|e| Error::io(path, e))
}

fn infer(a: InferArgs) -> voxseg::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let volume = Volume::load(&a.input)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
    let (prob, mask): (Volume, BinaryMask) = pipeline::infer(&model, &volume, threshold)?;
    mask.save(&a.mask)?;
    if let Some(p) = &a.prob {
        prob.save(p)?;
    }
    println!("{}: {} foreground voxels of {}", a.input.display(), mask.count(), mask.data().len());
    Ok(())
}

fn describe(a: DescribeArgs) -> voxseg::Result<()> {
    let model = match &a.checkpoint {
        Some(path) => Checkpoint::load(path)?.config.model,
        None => a.run.resolve()?.model,
    };
    let mut out = io::stdout().lock();
    let io_err = |e| Error::io("stdout", e);
    write!(out, "{}", describe_config(&model)?).map_err(io_err)?;
    if let Some(target) = a.search {
        writeln!(out, "\n# nearest to {target} parameters ({})", model.variant).map_err(io_err)?;
        writeln!(out, "levels\tbase\tnorm\tcount\tgap").map_err(io_err)?;
        for hit in search_parameter_count(model.variant, target, 2..=5, 1..=160, 10) {
            let c = &hit.config;
            writeln!(out, "{}\t{}\t{:?}\t{}\t{:+}", c.levels, c.base_channels, c.norm, hit.count, hit.gap)
                .map_err(io_err)?;
        }
    }
    Ok(())
}
