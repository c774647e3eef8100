mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dami::corpus::{generate_synthetic, Corpus, SplitSpec, SynthConfig, TriggerRates, WhitespaceTokenizer};
use dami::featurize::{EmotionScorer, LexiconScorer, LexiconTagger, Tagger};
use dami::metrics::{self, evaluate_predictions, format_sweep, lambda_sweep, read_predictions, write_predictions, LAMBDA_GRID};
use dami::model::{Checkpoint, Dami, EncoderMode, ModelConfig};
use dami::pipeline::{featurize_with, prepare, Dataset};
use dami::training::{self, SelectionMetric, TrainConfig};
use log::info;
use serde_json::json;

use manifest::Manifest;

/// Output paths that are relative are resolved under this directory when set.
const OUTPUT_DIR_ENV: &str = "DAMI_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "dami", version, about = "Utterance-level handoff labeling for customer-service dialogues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted handoff triggers.
    Synth(SynthArgs),
    /// Validate a JSONL corpus and print its statistics.
    IngestCheck(IngestArgs),
    /// Train a model, saving the checkpoint, log, test split and test report.
    Train(TrainArgs),
    /// Label every utterance of a corpus with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Score(ScoreArgs),
    /// Train and evaluate ablation variants on shared data and seeds.
    Ablate(AblateArgs),
    /// GT-I/II/III across a grid of asymmetry coefficients.
    SweepLambda(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long = "n", default_value_t = 1000)]
    n_dialogues: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    explicit_demand_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    unsatisfactory_answer_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    negative_emotion_rate: f64,
    #[arg(long, default_value_t = 0.4)]
    repeated_utterance_rate: f64,
    #[arg(long, default_value_t = 0.08)]
    normal_fraction: f64,
    #[arg(long, default_value_t = 10.0)]
    mean_utterances: f64,
    #[arg(long, default_value_t = 30)]
    max_utterances: usize,
    #[arg(long, default_value_t = 8.0)]
    mean_tokens: f64,
    #[arg(long, default_value_t = 0.05)]
    same_role_rate: f64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
}

#[derive(Args, Clone)]
struct FeatureArgs {
    /// `token<TAB>tag` file; defaults to the synthetic inventory's tagger.
    #[arg(long)]
    tagger: Option<PathBuf>,
    /// Tag given to tokens missing from the tagger file.
    #[arg(long, default_value = "NOUN")]
    fallback_tag: String,
    /// `token<TAB>polarity` file; defaults to the built-in lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl FeatureArgs {
    fn load(&self) -> Result<(LexiconTagger, LexiconScorer), String> {
        let tagger = match &self.tagger {
            Some(p) => LexiconTagger::from_tsv(p, &self.fallback_tag).map_err(|e| e.to_string())?,
            None => LexiconTagger::synthetic(),
        };
        let scorer = match &self.lexicon {
            Some(p) => LexiconScorer::from_tsv(p).map_err(|e| e.to_string())?,
            None => LexiconScorer::builtin(),
        };
        Ok((tagger, scorer))
    }

    fn record(&self, m: &mut Manifest) -> Result<(), String> {
        for p in self.tagger.iter().chain(&self.lexicon) {
            m.input(p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Difficulty,
    PlainBirnn,
    BirnnSelfAttention,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    MacroF1,
    GtIi,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 200)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    attention: usize,
    #[arg(long, default_value_t = 64)]
    max_dialogue_len: usize,
    #[arg(long, default_value_t = 0.25)]
    dropout_rate: f64,
    #[arg(long)]
    no_emotion: bool,
    #[arg(long)]
    no_matching: bool,
    #[arg(long, value_enum, default_value = "difficulty")]
    encoder_mode: ModeArg,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            attention: self.attention,
            max_dialogue_len: self.max_dialogue_len,
            dropout_rate: self.dropout_rate,
            use_emotion: !self.no_emotion,
            use_matching: !self.no_matching,
            encoder_mode: match self.encoder_mode {
                ModeArg::Difficulty => EncoderMode::Difficulty,
                ModeArg::PlainBirnn => EncoderMode::PlainBirnn,
                ModeArg::BirnnSelfAttention => EncoderMode::BirnnSelfAttention,
            },
            ..ModelConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 0.0075)]
    learning_rate: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, value_enum, default_value = "macro-f1")]
    selection_metric: SelectionArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long = "lambda", default_value_t = 0.0, allow_negative_numbers = true)]
    lambda: f64,
    /// Train/valid/test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainingArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            l2: self.l2,
            seed: self.seed,
            selection_metric: match self.selection_metric {
                SelectionArg::MacroF1 => SelectionMetric::MacroF1,
                SelectionArg::GtIi => SelectionMetric::GtIi,
            },
            clip_norm: self.clip_norm,
            threshold: self.threshold,
            lambda: self.lambda,
            ..TrainConfig::default()
        }
    }

    fn split(&self) -> Result<SplitSpec, String> {
        SplitSpec::new(self.split[0], self.split[1], self.split[2], self.seed).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "lambda", default_value_t = 0.0, allow_negative_numbers = true)]
    lambda: f64,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Full,
    NoEmotion,
    NoMatching,
    NoDifficulty,
    PlainAttention,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEmotion => "no_emotion",
            Variant::NoMatching => "no_matching",
            Variant::NoDifficulty => "no_difficulty",
            Variant::PlainAttention => "plain_attention",
        }
    }

    fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoEmotion => c.use_emotion = false,
            Variant::NoMatching => c.use_matching = false,
            Variant::NoDifficulty => c.encoder_mode = EncoderMode::PlainBirnn,
            Variant::PlainAttention => c.encoder_mode = EncoderMode::BirnnSelfAttention,
        }
        c
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Variant::Full, Variant::NoEmotion, Variant::NoMatching, Variant::NoDifficulty, Variant::PlainAttention])]
    variants: Vec<Variant>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    json: bool,
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_parent(p: &Path) -> Result<(), String> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write_text(p: &Path, text: &str) -> Result<(), String> {
    fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display()))
}

fn load_corpus(p: &Path) -> Result<Corpus, String> {
    Corpus::ingest_jsonl(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn synth(a: SynthArgs) -> Result<(), String> {
    let cfg = SynthConfig {
        n_dialogues: a.n_dialogues,
        rates: TriggerRates {
            explicit_demand: a.explicit_demand_rate,
            unsatisfactory_answer: a.unsatisfactory_answer_rate,
            negative_emotion: a.negative_emotion_rate,
            repeated_utterance: a.repeated_utterance_rate,
        },
        normal_fraction: a.normal_fraction,
        mean_utterances: a.mean_utterances,
        max_utterances: a.max_utterances,
        mean_tokens: a.mean_tokens,
        same_role_rate: a.same_role_rate,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let out = output_path(&a.out);
    ensure_parent(&out)?;
    corpus.write_jsonl(&out).map_err(|e| e.to_string())?;
    let mut m = Manifest::new("synth", Some(a.seed), json!(cfg));
    m.output(&out);
    m.write_beside(&out)?;
    println!("{}", corpus.stats(&WhitespaceTokenizer));
    Ok(())
}

fn ingest_check(a: IngestArgs) -> Result<(), String> {
    let corpus = load_corpus(&a.corpus)?;
    let corpus = corpus
        .build_vocabulary(a.min_count, &WhitespaceTokenizer)
        .map_err(|e| e.to_string())?;
    println!("{}", corpus.stats(&WhitespaceTokenizer));
    println!("vocabulary size (min_count {}): {}", a.min_count, corpus.vocabulary.as_ref().map_or(0, |v| v.len()));
    Ok(())
}

fn check_lengths(data: &Dataset, cfg: &ModelConfig) -> Result<(), String> {
    let longest = data.longest_dialogue();
    if longest > cfg.max_dialogue_len {
        return Err(format!(
            "the corpus has a dialogue of {longest} utterances but --max-dialogue-len is {}; raise it or split long dialogues",
            cfg.max_dialogue_len
        ));
    }
    Ok(())
}

struct Trained {
    model: Dami,
    report: metrics::Report,
    log: String,
}

/// Trains one model, keeps the best validation epoch and scores it on the
/// test split. The kept model is rounded to checkpoint precision first, so
/// the report matches what a reloaded checkpoint predicts.
fn fit(data: &Dataset, model_cfg: ModelConfig, train_cfg: &TrainConfig, label: &str) -> Result<Trained, String> {
    let model = Dami::new(model_cfg, train_cfg.seed).map_err(|e| e.to_string())?;
    let mut log = String::new();
    let state = training::train(model, &data.train, &data.valid, train_cfg, |r| {
        info!(
            "{label} epoch {} loss {:.4} valid MacroF1 {:.4} GT-II {:.4}",
            r.epoch,
            r.train_loss,
            r.valid["MacroF1"].unwrap_or(f64::NAN),
            r.valid["GT-II"].unwrap_or(f64::NAN)
        );
        log.push_str(&serde_json::to_string(r).expect("log record serializes"));
        log.push('\n');
    })
    .map_err(|e| e.to_string())?;
    info!("{label}: best epoch {} ({:.4})", state.best_epoch, state.best_score);
    let model = Checkpoint {
        model: state.best_model(),
        vocabulary: data.vocabulary.clone(),
        pos_tagset: data.pos_tagset.clone(),
    }
    .rounded()
    .model;
    let report = training::evaluate(&model, &data.test, train_cfg.lambda, train_cfg.threshold, train_cfg.batch_size)
        .map_err(|e| e.to_string())?;
    Ok(Trained { model, report, log })
}

fn prepare_data(corpus: &Corpus, t: &TrainingArgs, f: &FeatureArgs) -> Result<Dataset, String> {
    let (tagger, scorer) = f.load()?;
    prepare(corpus, &t.split()?, t.min_count, &tagger, &scorer).map_err(|e| e.to_string())
}

fn train(a: TrainArgs) -> Result<(), String> {
    let corpus = load_corpus(&a.corpus)?;
    let train_cfg = a.training.config();
    train_cfg.validate().map_err(|e| e.to_string())?;
    let data = prepare_data(&corpus, &a.training, &a.features)?;
    let model_cfg = data.model_config(&a.model.config());
    model_cfg.validate().map_err(|e| e.to_string())?;
    check_lengths(&data, &model_cfg)?;

    let out_dir = output_path(&a.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    let trained = fit(&data, model_cfg.clone(), &train_cfg, "train")?;

    let ckpt = out_dir.join("model.ckpt");
    Checkpoint {
        model: trained.model,
        vocabulary: data.vocabulary.clone(),
        pos_tagset: data.pos_tagset.clone(),
    }
    .save(&ckpt)
    .map_err(|e| e.to_string())?;
    let log_path = out_dir.join("train_log.jsonl");
    write_text(&log_path, &trained.log)?;
    let (_, _, test) = corpus.split(&a.training.split()?).map_err(|e| e.to_string())?;
    let test_path = out_dir.join("test.jsonl");
    test.write_jsonl(&test_path).map_err(|e| e.to_string())?;
    let report_path = out_dir.join("report.json");
    write_text(&report_path, &(serde_json::to_string_pretty(&trained.report.to_json()).unwrap() + "\n"))?;

    let mut m = Manifest::new(
        "train",
        Some(train_cfg.seed),
        json!({"model": model_cfg, "training": train_cfg, "split": a.training.split, "min_count": a.training.min_count}),
    );
    m.input(&a.corpus)?;
    a.features.record(&mut m)?;
    for p in [&ckpt, &log_path, &test_path, &report_path] {
        m.output(p);
    }
    m.write_beside(&out_dir)?;
    print!("{}", trained.report);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), String> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| e.to_string())?;
    let corpus = load_corpus(&a.corpus)?;
    let (tagger, scorer) = a.features.load()?;
    let dialogues = featurize_with(&corpus, &ck.vocabulary, &ck.pos_tagset, &tagger as &dyn Tagger, &scorer as &dyn EmotionScorer)
        .map_err(|e| e.to_string())?;
    if !(0.0..1.0).contains(&a.threshold) {
        return Err("--threshold must lie in [0, 1)".into());
    }
    let preds = training::predict(&ck.model, &dialogues, a.threshold, a.batch_size).map_err(|e| e.to_string())?;
    let out = output_path(&a.out);
    ensure_parent(&out)?;
    write_predictions(&out, &preds).map_err(|e| e.to_string())?;
    let mut m = Manifest::new("predict", None, json!({"threshold": a.threshold, "model": ck.model.config}));
    m.input(&a.checkpoint)?;
    m.input(&a.corpus)?;
    a.features.record(&mut m)?;
    m.output(&out);
    m.write_beside(&out)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), String> {
    let gold = load_corpus(&a.gold)?;
    let preds = read_predictions(&a.pred).map_err(|e| format!("{}: {e}", a.pred.display()))?;
    let report = evaluate_predictions(&gold.dialogues, &preds, a.lambda).map_err(|e| e.to_string())?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{report}");
    }
    if let Some(p) = &a.report {
        let out = output_path(p);
        ensure_parent(&out)?;
        write_text(&out, &(serde_json::to_string_pretty(&report.to_json()).unwrap() + "\n"))?;
        let mut m = Manifest::new("score", None, json!({"lambda": a.lambda}));
        m.input(&a.gold)?;
        m.input(&a.pred)?;
        m.output(&out);
        m.write_beside(&out)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), String> {
    let corpus = load_corpus(&a.corpus)?;
    let train_cfg = a.training.config();
    train_cfg.validate().map_err(|e| e.to_string())?;
    let data = prepare_data(&corpus, &a.training, &a.features)?;
    let base = data.model_config(&a.model.config());
    base.validate().map_err(|e| e.to_string())?;
    check_lengths(&data, &base)?;
    let out_dir = output_path(&a.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;

    let mut table = format!(
        "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "variant", "F1", "MacroF1", "AUC", "GT-I", "GT-II", "GT-III"
    );
    let mut reports = serde_json::Map::new();
    let mut m = Manifest::new("ablate", Some(train_cfg.seed), json!({"base": base, "training": train_cfg}));
    m.input(&a.corpus)?;
    a.features.record(&mut m)?;
    for v in &a.variants {
        let trained = fit(&data, v.apply(&base), &train_cfg, v.name())?;
        let r = &trained.report;
        let auc = r.auc.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        table.push_str(&format!(
            "{:<16} {:>7.4} {:>7.4} {:>7} {:>7.4} {:>7.4} {:>7.4}\n",
            v.name(),
            r.f1,
            r.macro_f1,
            auc,
            r.gt[0],
            r.gt[1],
            r.gt[2]
        ));
        reports.insert(v.name().to_string(), r.to_json());
        let log_path = out_dir.join(format!("{}_train_log.jsonl", v.name()));
        write_text(&log_path, &trained.log)?;
        m.output(&log_path);
    }
    let json_path = out_dir.join("ablation.json");
    write_text(&json_path, &(serde_json::to_string_pretty(&reports).unwrap() + "\n"))?;
    let table_path = out_dir.join("ablation.txt");
    write_text(&table_path, &table)?;
    m.output(&json_path);
    m.output(&table_path);
    m.write_beside(&out_dir)?;
    print!("{table}");
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), String> {
    let gold = load_corpus(&a.gold)?;
    let preds = read_predictions(&a.pred).map_err(|e| format!("{}: {e}", a.pred.display()))?;
    let grid = a.grid.unwrap_or_else(|| LAMBDA_GRID.to_vec());
    let rows = lambda_sweep(&gold.dialogues, &preds, &grid).map_err(|e| e.to_string())?;
    if a.json {
        let v: Vec<_> = rows
            .iter()
            .map(|(l, gt)| json!({"lambda": l, "GT-I": gt[0], "GT-II": gt[1], "GT-III": gt[2]}))
            .collect();
        println!("{}", serde_json::Value::Array(v));
    } else {
        print!("{}", format_sweep(&rows));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::IngestCheck(a) => ingest_check(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepLambda(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
