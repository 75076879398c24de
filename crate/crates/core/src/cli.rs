//! Command-line front end. Every subcommand resolves its settings from, in
//! increasing priority: built-in defaults (or a named preset), an optional
//! `key = value` config file, then explicit flags. The resolved settings are
//! logged to stderr in the config-file format so any run can be replayed
//! with `--config`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::data::{self, ImageFeatureStore};
use crate::decode::{self, BeamConfig};
use crate::error::MqaError;
use crate::eval::{self, AblationData, AblationStore};
use crate::gradcheck::{self, GradCheckConfig};
use crate::model::{encode_examples, MqaConfig, MqaModel, Variant};
use crate::nn::StateSource;
use crate::train::{self, TrainConfig};
use crate::vocab::{tokenize, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// File names inside a data directory written by `gen-data`.
pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Parser)]
#[command(
    name = "mqa",
    version,
    about = "Multimodal question answering over image features"
)]
struct Cli {
    /// `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation and batched training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shapes benchmark.
    GenData {
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        qpi: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Output directory for checkpoints, history and resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one question with beam search.
    Answer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        question: Option<String>,
        #[command(flatten)]
        beam: BeamArgs,
        /// Print every hypothesis, best first.
        #[arg(long)]
        all: bool,
    },
    /// Report word error rate, loss and exact match on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long, conflicts_with = "json_lines")]
        csv: bool,
        #[arg(long)]
        json_lines: bool,
    },
    /// Train and evaluate every variant on one data directory.
    Ablate {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse per-variant checkpoints already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// One variant; all five when omitted.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d_embed: Option<usize>,
        #[arg(long)]
        d_hidden: Option<usize>,
        #[arg(long)]
        d_fuse: Option<usize>,
        #[arg(long)]
        d_img: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// `paper` (lr 1, ÷10 per epoch, init ±0.08) or `benchmark`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_fuse: Option<usize>,
    #[arg(long)]
    state_source: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BeamArgs {
    #[arg(long)]
    beam_k: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(MqaError),
}

impl From<MqaError> for CliError {
    fn from(e: MqaError) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Layers defaults, config file and flags, remembering what was resolved.
struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    resolved: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| MqaError::io(p, e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected `key = value`", p.display(), i + 1))
                })?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            used: Vec::new(),
            resolved: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl Display) {
        self.used.push(key.to_string());
        self.resolved.push((key.to_string(), value.to_string()));
    }

    /// `flag`, else the file value, else `default`.
    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    fn required<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required setting `{key}` (flag --{})",
                key.replace('_', "-")
            ))
        })?;
        self.record(key, &v);
        Ok(v)
    }

    fn optional<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?;
        if let Some(x) = &v {
            self.record(key, x);
        } else {
            self.used.push(key.to_string());
        }
        Ok(v)
    }

    fn lookup<T>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config `{key} = {s}`: {e}"))),
            None => Ok(None),
        }
    }

    /// Rejects config-file keys this subcommand never asked for, then logs.
    fn finish(&self) -> CliResult<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.iter().any(|u| u == *k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        eprint!("{}", self.to_text());
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut s = String::from("# resolved config\n");
        for (k, v) in &self.resolved {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        // only the first configuration in a process takes effect
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result =
        Settings::load(cli.config.as_deref()).and_then(|mut s| dispatch(cli.command, &mut s));
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command, s: &mut Settings) -> CliResult<i32> {
    match cmd {
        Command::GenData {
            n_images,
            qpi,
            seed,
            out_dir,
        } => gen_data(s, n_images, qpi, seed, out_dir),
        Command::Train {
            data_dir,
            model,
            train,
            out,
        } => train_cmd(s, data_dir, model, train, out),
        Command::Answer {
            checkpoint,
            features,
            vocab,
            image_id,
            question,
            beam,
            all,
        } => answer_cmd(
            s, checkpoint, features, vocab, image_id, question, beam, all,
        ),
        Command::Eval {
            checkpoint,
            data,
            features,
            vocab,
            beam,
            csv,
            json_lines,
        } => eval_cmd(s, checkpoint, data, features, vocab, beam, csv, json_lines),
        Command::Ablate {
            data_dir,
            model,
            train,
            beam,
            out,
            resume,
        } => ablate_cmd(s, data_dir, model, train, beam, out, resume),
        Command::Gradcheck {
            variant,
            tolerance,
            n,
            d_embed,
            d_hidden,
            d_fuse,
            d_img,
            samples,
            seed,
        } => {
            let variant = s.optional("variant", variant)?;
            let variants = match variant {
                Some(v) => vec![parse_variant(&v)?],
                None => Variant::ALL.to_vec(),
            };
            let base = GradCheckConfig::tiny(Variant::Complete);
            let tolerance = s.get("tolerance", tolerance, base.tolerance)?;
            let n = s.get("n", n, base.model.n)?;
            let d_embed = s.get("d_embed", d_embed, base.model.d_embed)?;
            let d_hidden = s.get("d_hidden", d_hidden, base.model.d_hidden)?;
            let d_fuse = s.get("d_fuse", d_fuse, base.model.d_fuse)?;
            let d_img = s.get("d_img", d_img, base.model.d_img)?;
            let samples = s.get("samples", samples, base.samples_per_tensor)?;
            let seed = s.get("seed", seed, base.seed)?;
            if n < 4 {
                return Err(CliError::Usage("gradcheck needs n >= 4".into()));
            }
            s.finish()?;
            let mut all_passed = true;
            for variant in variants {
                let cfg = GradCheckConfig {
                    model: MqaConfig {
                        n,
                        d_embed,
                        d_hidden,
                        d_fuse,
                        d_img,
                        variant,
                        ..base.model.clone()
                    },
                    tolerance,
                    samples_per_tensor: samples,
                    seed,
                    ..base.clone()
                };
                let report = gradcheck::gradient_check(&cfg)?;
                println!("{report}");
                all_passed &= report.passed();
            }
            Ok(if all_passed { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse()
        .map_err(|e: MqaError| CliError::Usage(e.to_string()))
}

fn gen_data(
    s: &mut Settings,
    n_images: Option<usize>,
    qpi: Option<usize>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> CliResult<i32> {
    let n_images = s.get("n_images", n_images, 1000)?;
    let qpi = s.get("qpi", qpi, 3)?;
    let seed = s.get("seed", seed, 0)?;
    let out_dir: PathBuf = s
        .required("out_dir", out_dir.map(|p| p.display().to_string()))?
        .into();
    if n_images == 0 || qpi == 0 {
        return Err(CliError::Usage("--n-images and --qpi must be >= 1".into()));
    }
    s.finish()?;
    let synth = data::generate_synthetic(n_images, qpi, seed)?;
    let split = synth.split_default();
    fs::create_dir_all(&out_dir).map_err(|e| MqaError::io(&out_dir, e))?;
    data::save_dataset(out_dir.join(TRAIN_FILE), &split.train)?;
    data::save_dataset(out_dir.join(VALID_FILE), &split.valid)?;
    data::save_dataset(out_dir.join(TEST_FILE), &split.test)?;
    synth.features.save(out_dir.join(FEATURES_FILE))?;
    data::build_vocabulary(&split.train, 1)?.save(out_dir.join(VOCAB_FILE))?;
    println!(
        "wrote {} train, {} valid, {} test examples to {}",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        out_dir.display()
    );
    Ok(EXIT_OK)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Preset {
    Paper,
    Benchmark,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Preset::Paper),
            "benchmark" => Ok(Preset::Benchmark),
            other => Err(format!("unknown preset `{other}` (paper, benchmark)")),
        }
    }
}

impl Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Benchmark => "benchmark",
        })
    }
}

/// Vocabulary size and image width come from the data directory.
fn resolve_model_and_train(
    s: &mut Settings,
    m: ModelArgs,
    t: TrainArgs,
    n: usize,
    d_img: usize,
) -> CliResult<(MqaConfig, TrainConfig)> {
    let preset = s.get(
        "preset",
        m.preset
            .map(|p| p.parse())
            .transpose()
            .map_err(CliError::Usage)?,
        Preset::Paper,
    )?;
    let seed = s.get("seed", t.seed, 0)?;
    let variant =
        parse_variant(&s.get("variant", m.variant, Variant::Complete.name().to_string())?)?;
    let (pm, pt) = match preset {
        Preset::Paper => (
            MqaConfig {
                n,
                d_img,
                variant,
                seed,
                ..MqaConfig::default()
            },
            TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        ),
        Preset::Benchmark => {
            let (mut pm, pt) = eval::benchmark_preset(n, variant, seed);
            pm.d_img = d_img;
            (pm, pt)
        }
    };
    let state_source = StateSource::parse(&s.get(
        "state_source",
        m.state_source,
        pm.state_source.as_str().to_string(),
    )?)
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let model = MqaConfig {
        d_embed: s.get("d_embed", m.d_embed, pm.d_embed)?,
        d_hidden: s.get("d_hidden", m.d_hidden, pm.d_hidden)?,
        d_fuse: s.get("d_fuse", m.d_fuse, pm.d_fuse)?,
        init_scale: s.get("init_scale", m.init_scale, pm.init_scale)?,
        state_source,
        ..pm
    };
    let train = TrainConfig {
        initial_lr: s.get("lr", t.lr, pt.initial_lr)?,
        decay_factor: s.get("decay", t.decay, pt.decay_factor)?,
        patience: s.get("patience", t.patience, pt.patience)?,
        max_epochs: s.get("max_epochs", t.max_epochs, pt.max_epochs)?,
        batch_size: s.get("batch_size", t.batch_size, pt.batch_size)?,
        clip_norm: s.get("clip_norm", t.clip_norm, pt.clip_norm)?,
        ..pt
    };
    model
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((model, train))
}

fn resolve_beam(s: &mut Settings, b: BeamArgs) -> CliResult<BeamConfig> {
    let d = BeamConfig::default();
    let cfg = BeamConfig {
        k: s.get("beam_k", b.beam_k, d.k)?,
        max_len: s.get("max_len", b.max_len, d.max_len)?,
        ..d
    };
    if cfg.k == 0 || cfg.max_len == 0 {
        return Err(CliError::Usage(
            "--beam-k and --max-len must be >= 1".into(),
        ));
    }
    Ok(cfg)
}

fn path_setting(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    Ok(s.required(key, flag.map(|p| p.display().to_string()))?
        .into())
}

fn optional_path(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    Ok(s.optional(key, flag.map(|p| p.display().to_string()))?
        .map(PathBuf::from))
}

/// Features for `variant`; blind models never read the vectors.
fn features_for(variant: Variant, path: &Path) -> crate::Result<ImageFeatureStore> {
    if variant.uses_image() {
        ImageFeatureStore::load(path)
    } else {
        Ok(ImageFeatureStore::new(ImageFeatureStore::peek_dim(path)?))
    }
}

struct DataDir {
    vocab: Vocabulary,
    train: Vec<data::QaExample>,
    valid: Vec<data::QaExample>,
    test: Vec<data::QaExample>,
    features_path: PathBuf,
    d_img: usize,
}

fn load_data_dir(dir: &Path) -> crate::Result<DataDir> {
    let optional = |name: &str| -> crate::Result<Vec<data::QaExample>> {
        let p = dir.join(name);
        if p.exists() {
            data::load_dataset(p)
        } else {
            Ok(Vec::new())
        }
    };
    let features_path = dir.join(FEATURES_FILE);
    Ok(DataDir {
        vocab: Vocabulary::load(dir.join(VOCAB_FILE))?,
        train: data::load_dataset(dir.join(TRAIN_FILE))?,
        valid: optional(VALID_FILE)?,
        test: optional(TEST_FILE)?,
        d_img: ImageFeatureStore::peek_dim(&features_path)?,
        features_path,
    })
}

fn train_cmd(
    s: &mut Settings,
    data_dir: Option<PathBuf>,
    m: ModelArgs,
    t: TrainArgs,
    out: Option<PathBuf>,
) -> CliResult<i32> {
    let data_dir = path_setting(s, "data_dir", data_dir)?;
    let out = path_setting(s, "out", out)?;
    let dd = load_data_dir(&data_dir)?;
    let (model_cfg, train_cfg) = resolve_model_and_train(s, m, t, dd.vocab.len(), dd.d_img)?;
    s.finish()?;
    let features = features_for(model_cfg.variant, &dd.features_path)?;
    let train_set = encode_examples(&dd.vocab, &dd.train);
    let valid_set = encode_examples(&dd.vocab, &dd.valid);

    fs::create_dir_all(&out).map_err(|e| MqaError::io(&out, e))?;
    fs::write(out.join("config.txt"), s.to_text())
        .map_err(|e| MqaError::io(out.join("config.txt"), e))?;
    let model = MqaModel::init(model_cfg)?;
    println!("{}", train::HISTORY_HEADER);
    let outcome = train::train_with(
        model,
        &train_set,
        &valid_set,
        &features,
        &train_cfg,
        |r, m| {
            let line = train::TrainHistory { records: vec![*r] }.to_csv();
            print!(
                "{}",
                line.lines()
                    .nth(1)
                    .map(|l| format!("{l}\n"))
                    .unwrap_or_default()
            );
            checkpoint::save(m, out.join(format!("epoch-{:03}.ckpt", r.epoch)))
        },
    )?;
    let history_path = out.join("history.csv");
    fs::write(&history_path, outcome.history.to_csv())
        .map_err(|e| MqaError::io(&history_path, e))?;
    checkpoint::save(&outcome.best, out.join("best.ckpt"))?;
    eprintln!(
        "stopped: {:?}; best epoch {:?}; wrote {}",
        outcome.stop_reason,
        outcome.best_epoch,
        out.display()
    );
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn answer_cmd(
    s: &mut Settings,
    checkpoint_path: Option<PathBuf>,
    features: Option<PathBuf>,
    vocab: Option<PathBuf>,
    image_id: Option<String>,
    question: Option<String>,
    beam: BeamArgs,
    all: bool,
) -> CliResult<i32> {
    let checkpoint_path = path_setting(s, "checkpoint", checkpoint_path)?;
    let features = optional_path(s, "features", features)?;
    let vocab_path = path_setting(s, "vocab", vocab)?;
    let image_id = s.get("image_id", image_id, String::new())?;
    let question: String = s.required("question", question)?;
    let beam = resolve_beam(s, beam)?;
    let tokens = tokenize(&question);
    if tokens.is_empty() {
        return Err(CliError::Usage("question is empty".into()));
    }
    s.finish()?;
    let model = checkpoint::load(&checkpoint_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let store = match (&features, model.variant().uses_image()) {
        (Some(p), true) => ImageFeatureStore::load(p)?,
        (None, true) => {
            return Err(CliError::Usage(
                "--features is required for this checkpoint".into(),
            ))
        }
        (_, false) => ImageFeatureStore::new(model.config.d_img),
    };
    let ranked = decode::answer_all(&model, &store, &vocab, &image_id, &tokens, &beam)?;
    let shown = if all { ranked.len() } else { 1 };
    for (words, logprob) in ranked.iter().take(shown) {
        println!("{}\t{logprob}", words.join(" "));
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    s: &mut Settings,
    checkpoint_path: Option<PathBuf>,
    data_path: Option<PathBuf>,
    features: Option<PathBuf>,
    vocab: Option<PathBuf>,
    beam: BeamArgs,
    csv: bool,
    json_lines: bool,
) -> CliResult<i32> {
    let checkpoint_path = path_setting(s, "checkpoint", checkpoint_path)?;
    let data_path = path_setting(s, "data", data_path)?;
    let features = path_setting(s, "features", features)?;
    let vocab_path = path_setting(s, "vocab", vocab)?;
    let beam = resolve_beam(s, beam)?;
    s.finish()?;
    let model = checkpoint::load(&checkpoint_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != model.vocab_size() {
        return Err(MqaError::shape("eval: vocabulary", model.vocab_size(), vocab.len()).into());
    }
    let store = features_for(model.variant(), &features)?;
    let examples = encode_examples(&vocab, &data::load_dataset(&data_path)?);
    let report = eval::evaluate(&model, &examples, &store, &beam)?;
    if csv {
        print!("{}", report.to_csv());
    } else if json_lines {
        println!("{}", report.to_json_line());
    } else {
        println!("word error rate   {:.6}", report.word_error_rate);
        println!("mean loss / token {:.6}", report.mean_loss_per_token);
        println!("exact match       {:.6}", report.exact_match_accuracy);
        println!("examples          {}", report.n_examples);
    }
    Ok(EXIT_OK)
}

fn ablate_cmd(
    s: &mut Settings,
    data_dir: Option<PathBuf>,
    m: ModelArgs,
    t: TrainArgs,
    beam: BeamArgs,
    out: Option<PathBuf>,
    resume: bool,
) -> CliResult<i32> {
    let data_dir = path_setting(s, "data_dir", data_dir)?;
    let out = path_setting(s, "out", out)?;
    let dd = load_data_dir(&data_dir)?;
    let (model_cfg, train_cfg) = resolve_model_and_train(s, m, t, dd.vocab.len(), dd.d_img)?;
    let beam = resolve_beam(s, beam)?;
    s.finish()?;
    if dd.test.is_empty() {
        return Err(MqaError::Empty("test split").into());
    }
    let features = ImageFeatureStore::load(&dd.features_path)?;
    let train_set = encode_examples(&dd.vocab, &dd.train);
    let valid_set = encode_examples(&dd.vocab, &dd.valid);
    let test_set = encode_examples(&dd.vocab, &dd.test);
    fs::create_dir_all(&out).map_err(|e| MqaError::io(&out, e))?;
    let report = eval::ablation_report(
        AblationData {
            train: &train_set,
            valid: &valid_set,
            test: &test_set,
            features: &features,
        },
        &model_cfg,
        &train_cfg,
        &beam,
        Some(AblationStore { dir: &out, resume }),
    )?;
    for (name, body) in [
        ("ablation.csv", report.to_csv()),
        ("ablation.txt", report.to_text()),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| MqaError::io(&p, e))?;
    }
    print!("{}", report.to_text());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mqa"]), EXIT_USAGE);
        assert_eq!(run(["mqa", "no-such-command"]), EXIT_USAGE);
        assert_eq!(
            run([
                "mqa",
                "gen-data",
                "--n-images",
                "0",
                "--out-dir",
                "/nonexistent"
            ]),
            EXIT_USAGE
        );
        assert_eq!(run(["mqa", "gen-data", "--n-images", "x"]), EXIT_USAGE);
        assert_eq!(run(["mqa", "--help"]), EXIT_OK);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "# comment\nn-images = 7\nqpi = 2 # trailing\n").unwrap();
        let mut s = Settings::load(Some(&cfg)).unwrap();
        assert_eq!(s.get("n_images", None, 1000usize).unwrap(), 7);
        assert_eq!(s.get("qpi", Some(5usize), 3).unwrap(), 5);
        assert_eq!(s.get("seed", None, 9u64).unwrap(), 9);
        assert!(s.finish().is_ok());
        assert_eq!(
            s.to_text(),
            "# resolved config\nn_images = 7\nqpi = 5\nseed = 9\n"
        );
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "learning_rate = 1\n").unwrap();
        let s = Settings::load(Some(&cfg)).unwrap();
        assert!(matches!(s.finish(), Err(CliError::Usage(_))));
    }
}
