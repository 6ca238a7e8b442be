//! Command-line front end: data generation, training, evaluation, mining
//! inspection, ablation sweeps and reports.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use boostret::dataset::{generate, Corpus, Dataset, Split, SynthConfig, MANIFEST_FILE};
use boostret::encoder::EncoderParams;
use boostret::eval::{encode_distractor, encode_split, evaluate_with_distractors, EvalReport};
use boostret::report::{self, AblationAxis, AblationSpec};
use boostret::trainer::{self, checkpoint, mine_split, LossPreset, TrainConfig, CHECKPOINT_DIR};

#[derive(Debug, Parser)]
#[command(
    name = "boostret",
    version,
    about = "Weak-positive boosting for dual-encoder retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (train/val/test splits)
    GenData(GenDataArgs),
    /// Train an encoder pair
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with distractor galleries
    Eval(EvalArgs),
    /// Dump the weak-positive set a checkpoint produces on a split
    Mine(MineArgs),
    /// Sweep one boosting hyperparameter over several seeds
    Ablate(AblateArgs),
    /// Summarize finished runs and sweeps
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Generator config JSON; flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_identities: Option<usize>,
    #[arg(long)]
    pub images_per_id: Option<usize>,
    #[arg(long)]
    pub texts_per_image: Option<usize>,
    #[arg(long)]
    pub confusion_rate: Option<f64>,
    #[arg(long)]
    pub confusion_lambda: Option<f64>,
    /// Feature noise for both modalities
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub name: Option<String>,
}

/// Overrides shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct ConfigOverrides {
    /// Run config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// clip, clip+b, irra or irra+b
    #[arg(long)]
    pub loss_preset: Option<LossPreset>,
    /// Mining rank k (turns boosting on)
    #[arg(long)]
    pub boost_k: Option<usize>,
    /// Boost weight exp(alpha) (turns boosting on)
    #[arg(long)]
    pub boost_weight: Option<f64>,
    /// Epochs between weight refreshes
    #[arg(long)]
    pub refresh_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Also boost pairs already at rank 1
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augmented: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl ConfigOverrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(p) = self.loss_preset {
            cfg = cfg.with_preset(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.boost_k {
            cfg.boost.k = k;
            cfg.boost.enabled = true;
        }
        if let Some(w) = self.boost_weight {
            cfg.boost.exp_alpha = w;
            cfg.boost.enabled = true;
        }
        if let Some(r) = self.refresh_epochs {
            cfg.boost.refresh_period = r;
        }
        if let Some(a) = self.augmented {
            cfg.boost.augmented = a;
        }
        if let Some(w) = self.warmup_epochs {
            cfg.boost.warmup_epochs = w;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the run directory
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory (its test split is used) or a single split directory
    #[arg(long)]
    pub data: PathBuf,
    /// Extra gallery sources, same layout as --data
    #[arg(long = "distractor")]
    pub distractors: Vec<PathBuf>,
    /// Where to write eval.json (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory (its train split is used) or a single split directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 1.6)]
    pub boost_weight: f64,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "true")]
    pub augmented: bool,
    /// JSON-lines output (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the weight table as JSON
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// k, exp_alpha or refresh_period
    #[arg(long)]
    pub axis: AblationAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Generator config JSON (its seed is replaced by each sweep seed)
    #[arg(long)]
    pub data_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories; the first is the comparison baseline
    #[arg(long = "run", num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Directories holding ablation.csv
    #[arg(long = "ablation", num_args = 1..)]
    pub ablations: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Mine(a) => mine(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => {
            report::report(&a.runs, &a.ablations, &a.out)?;
            Ok(())
        }
    }
}

fn read_synth(path: Option<&Path>) -> Result<SynthConfig> {
    Ok(match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    })
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = read_synth(a.config.as_deref())?;
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field.clone() { cfg.$field = v; })*};
    }
    set!(
        seed,
        n_identities,
        images_per_id,
        texts_per_image,
        confusion_rate,
        confusion_lambda
    );
    if let Some(n) = a.noise {
        cfg.noise_img = n;
        cfg.noise_txt = n;
    }
    if let Some(n) = &a.name {
        cfg.name = Some(n.clone());
    }
    let corpus = generate(&cfg)?;
    corpus.save(&a.out)?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let corpus = Corpus::load(&a.data).with_context(|| format!("loading corpus {}", a.data.display()))?;
    let out = if a.resume {
        trainer::resume(&cfg, &corpus, &a.out)?
    } else {
        trainer::run(&cfg, &corpus, Some(&a.out))?
    };
    let m = out.test;
    println!(
        "test r1={:.4} r5={:.4} r10={:.4} map={:.4}",
        m.r1, m.r5, m.r10, m.map
    );
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// A single split directory, or the named split of a corpus directory.
fn load_split(path: &Path, split: Split) -> Result<Dataset> {
    let dir = if path.join(MANIFEST_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join(split.as_str())
    };
    Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_params(path: &Path) -> Result<(EncoderParams, checkpoint::CheckpointMeta)> {
    let dir = checkpoint_dir(path);
    checkpoint::load_params(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (params, _) = load_params(&a.checkpoint)?;
    let primary = load_split(&a.data, Split::Test)?;
    let run = encode_split(&params, &primary)?;
    let mut galleries = Vec::new();
    for d in &a.distractors {
        galleries.push(encode_distractor(&params, &load_split(d, Split::Test)?)?);
    }
    let metrics = evaluate_with_distractors(&run, &galleries)?;
    let sources = galleries.iter().map(|g| g.source.clone()).collect();
    let mut report = EvalReport::new(metrics, &run, sources);
    report.n_gallery += galleries.iter().map(|g| g.embeddings.nrows()).sum::<usize>();
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_output(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct MinedLine {
    pair_id: u64,
    rank: usize,
    rank1_pair_id: u64,
    rank1_identity: u64,
}

fn mine(a: &MineArgs) -> Result<()> {
    let (params, meta) = load_params(&a.checkpoint)?;
    let ds = load_split(&a.data, Split::Train)?;
    let mut boost = meta.config.boost;
    boost.k = a.k;
    boost.exp_alpha = a.boost_weight;
    boost.augmented = a.augmented;
    boost.enabled = true;
    boost.validate()?;

    let refresh = mine_split(&params, &ds, &boost, meta.epoch, None)?;

    let image_pair_ids = ds.image_pair_ids();
    let image_ids = ds.image_identities();
    let mut text = String::new();
    for e in &refresh.mined.entries {
        let line = MinedLine {
            pair_id: e.pair_id,
            rank: e.rank_of_pair,
            rank1_pair_id: image_pair_ids[e.rank1_gallery_index],
            rank1_identity: image_ids[e.rank1_gallery_index],
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    write_output(a.out.as_deref(), &text)?;
    if let Some(p) = &a.weights {
        std::fs::write(p, refresh.table.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.overrides.resolve()?;
    let data = read_synth(a.data_config.as_deref())?;
    let spec = AblationSpec {
        axis: a.axis,
        values: a.values.clone(),
        seeds: a.seeds.clone(),
        base,
        data,
    };
    let rows = report::run_ablation(&spec, Some(&a.out))?;
    let missing = report::missing_cells(&rows, spec.axis, &spec.values, &spec.seeds);
    if !missing.is_empty() {
        bail!("sweep incomplete: missing {missing:?}");
    }
    report::write_report(&[], &rows, &a.out)?;
    Ok(())
}
