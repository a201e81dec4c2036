//! Pipeline driver: corpus generation, base-model pretraining, prompt
//! training, connector training, generation, and evaluation, from one
//! config file plus subcommands.

mod config;

pub use config::{
    ClassifierSection, ConnectorSection, CorpusConfig, EvalSection, ModelSection, PathsConfig,
    PromptSection, RunConfig,
};

use crate::compose::{
    train_attribute_classifier, train_connector, AttributeClassifier, ClassifierTrainConfig,
    ComposeError, CompositionMode, CompositionPlan, Connector, ConnectorTrainConfig, PseudoMode,
};
use crate::corpus::{
    default_corpus_spec, default_schema, generate_corpus, generate_dual_sentences,
    generate_neutral_sentences, load_external_corpus, save_corpus, CorpusError, LabeledSentence,
    Vocab,
};
use crate::eval::{
    compute_metrics, emit_report, grid_report, read_dump, write_dump, CorrectnessJudge, EvalError,
    EvalReport, GenerationRun, PairRow, RunDigests,
};
use crate::model::{pretrain_lm, LanguageModel, ModelError, TokenizedDataset};
use crate::prompt::{
    init_prompt, train_single_prompt, PromptError, PromptStore, PromptTrainConfig,
    SinglePromptLayout,
};
use crate::util::derive_seed;
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{what} not found at {path}; run `promptlab {produced_by}` first")]
    MissingArtifact {
        what: String,
        path: String,
        produced_by: String,
    },
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// One attribute, one prompt.
    Single,
    /// Two prompts, plain concatenation.
    Concat,
    /// Two prompts with the cross-prompt mask and re-indexed position ids.
    MaskRp,
    /// Ablation: mask only, consecutive ids.
    MaskOnly,
    /// Ablation: re-indexed ids only, no mask.
    RpOnly,
    /// Two prompts bridged by the trained connector.
    Connector,
}

impl ModeArg {
    pub fn label(self) -> &'static str {
        match self {
            ModeArg::Single => "single",
            ModeArg::Concat => "concat",
            ModeArg::MaskRp => "mask-rp",
            ModeArg::MaskOnly => "mask-only",
            ModeArg::RpOnly => "rp-only",
            ModeArg::Connector => "connector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PseudoModeArg {
    Argmax,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeArg {
    Oracle,
    Classifier,
}

#[derive(Parser)]
#[command(
    name = "promptlab",
    about = "Attribute-controlled text generation with composable continuous prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora and vocabulary.
    Corpus {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Pretrain the base language model on the plain-text corpus.
    Pretrain {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Train one attribute prompt (or all of them) against the frozen base.
    TrainPrompt {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// FAMILY=VALUE of the prompt to train.
        #[arg(long, value_name = "FAMILY=VALUE", conflicts_with = "all")]
        attributes: Option<String>,
        /// Train every (family, value) prompt in the schema.
        #[arg(long)]
        all: bool,
    },
    /// Train the connector on single-attribute sentences with pseudo prompts.
    TrainConnector {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_enum)]
        pseudo_mode: Option<PseudoModeArg>,
        /// Attribute pair to exclude from training, e.g.
        /// "SENTIMENT=POS,TOPIC=MUSIC".
        #[arg(long, value_name = "PAIR")]
        held_out: Option<String>,
    },
    /// Sample continuations for the given attributes under a composition mode.
    Generate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        /// One or two attributes, e.g. "SENTIMENT=POS,TOPIC=MUSIC"; the
        /// order given is the prompt order.
        #[arg(long, value_name = "ATTRS")]
        attributes: String,
        /// Overrides the decode seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump file path (defaults into the report directory).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Score a generation dump: correctness, perplexity, distinct-n.
    Eval {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "PATH")]
        dump: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        judge: JudgeArg,
        /// Report path (defaults into the report directory).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline end to end and emit the attribute-pair grid
    /// report.
    Pipeline {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "connector")]
        mode: ModeArg,
    },
}

/// Binary entry point: parses process args, returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Drives the CLI from an argument vector (no process spawn), for tests and
/// embedding. The leading binary name is implied.
pub fn run_from<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut argv = vec!["promptlab".to_string()];
    argv.extend(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::BadArgs(e.to_string()))?;
    dispatch(cli.command)
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Corpus { config } => cmd_corpus(&RunConfig::load(&config)?),
        Command::Pretrain { config } => cmd_pretrain(&RunConfig::load(&config)?),
        Command::TrainPrompt {
            config,
            attributes,
            all,
        } => {
            let cfg = RunConfig::load(&config)?;
            if all {
                cmd_train_all_prompts(&cfg)
            } else {
                let spec = attributes.ok_or_else(|| {
                    CliError::BadArgs("pass --attributes FAMILY=VALUE or --all".into())
                })?;
                let (family, value) = parse_single_attribute(&spec)?;
                cmd_train_prompt(&cfg, &family, &value)
            }
        }
        Command::TrainConnector {
            config,
            pseudo_mode,
            held_out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let held = held_out
                .as_deref()
                .map(parse_attributes)
                .transpose()?
                .map(|pairs| pairs.into_iter().collect::<BTreeMap<_, _>>());
            cmd_train_connector(&cfg, pseudo_mode, held)
        }
        Command::Generate {
            config,
            mode,
            attributes,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            cmd_generate(&cfg, mode, &attributes, seed, out.as_deref()).map(|_| ())
        }
        Command::Eval {
            config,
            dump,
            judge,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            cmd_eval(&cfg, &dump, judge, out.as_deref()).map(|_| ())
        }
        Command::Pipeline { config, mode } => {
            let cfg = RunConfig::load(&config)?;
            cmd_pipeline(&cfg, mode)
        }
    }
}

pub fn parse_attributes(spec: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for pair in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (f, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::BadArgs(format!("expected FAMILY=VALUE, got {pair:?}")))?;
        out.push((f.trim().to_string(), v.trim().to_string()));
    }
    if out.is_empty() {
        return Err(CliError::BadArgs("no attributes given".into()));
    }
    Ok(out)
}

fn parse_single_attribute(spec: &str) -> Result<(String, String), CliError> {
    let attrs = parse_attributes(spec)?;
    if attrs.len() != 1 {
        return Err(CliError::BadArgs(format!(
            "expected exactly one FAMILY=VALUE, got {}",
            attrs.len()
        )));
    }
    Ok(attrs.into_iter().next().expect("len checked"))
}

fn require(path: &Path, what: &str, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what: what.to_string(),
            path: path.display().to_string(),
            produced_by: produced_by.to_string(),
        })
    }
}

fn seed_for_key(base: u64, key: &str) -> u64 {
    let mut acc = base;
    for b in key.as_bytes() {
        acc = derive_seed(acc, *b as u64);
    }
    acc
}

// ── Stage implementations ────────────────────────────────────────────

pub fn cmd_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = default_corpus_spec(cfg.corpus.sentences_per_attribute, cfg.corpus.seed);
    let singles = generate_corpus(&spec)?;
    let duals = generate_dual_sentences(&spec, cfg.corpus.dual_per_pair)?;
    let neutrals = generate_neutral_sentences(&spec, cfg.corpus.neutral)?;

    let work = &cfg.paths.work_dir;
    std::fs::create_dir_all(work).map_err(|source| CliError::Io {
        path: work.display().to_string(),
        source,
    })?;
    save_corpus(&cfg.resolve(&cfg.paths.corpus), &singles)?;
    save_corpus(&cfg.resolve(&cfg.paths.eval_fixtures), &duals)?;

    // Pretraining text: attribute-coherent documents, one per line.
    let pretrain_path = cfg.resolve(&cfg.paths.pretrain_corpus);
    let documents = crate::corpus::generate_pretraining_documents(
        &spec,
        cfg.corpus.sentences_per_attribute,
        cfg.corpus.dual_per_pair,
        cfg.corpus.neutral,
    )?;
    std::fs::write(&pretrain_path, documents.join("\n") + "\n").map_err(|source| CliError::Io {
        path: pretrain_path.display().to_string(),
        source,
    })?;

    let vocab = Vocab::build(&[&singles, &duals, &neutrals], &cfg.eval_prefixes());
    vocab.save(&cfg.resolve(&cfg.paths.vocab))?;
    println!(
        "corpus: {} single-attribute sentences, {} dual fixtures, {} pretraining documents; vocab {}",
        singles.len(),
        duals.len(),
        documents.len(),
        vocab.len()
    );
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab, CliError> {
    let path = cfg.resolve(&cfg.paths.vocab);
    require(&path, "vocabulary", "corpus --config <cfg>")?;
    Ok(Vocab::load(&path)?)
}

fn load_labeled_corpus(cfg: &RunConfig) -> Result<Vec<LabeledSentence>, CliError> {
    let path = cfg.resolve(&cfg.paths.corpus);
    require(&path, "labeled corpus", "corpus --config <cfg>")?;
    let load = load_external_corpus(&path)?;
    for d in &load.diagnostics {
        eprintln!("corpus line {}: {}", d.line, d.reason);
    }
    Ok(load.sentences)
}

fn load_model(cfg: &RunConfig) -> Result<LanguageModel, CliError> {
    let path = cfg.resolve(&cfg.paths.model);
    require(&path, "model checkpoint", "pretrain --config <cfg>")?;
    Ok(LanguageModel::load(&path)?)
}

fn load_store(cfg: &RunConfig, model: &LanguageModel) -> Result<PromptStore, CliError> {
    let path = cfg.resolve(&cfg.paths.prompt_store);
    require(&path, "prompt store", "train-prompt --all --config <cfg>")?;
    Ok(PromptStore::load(&path, model)?)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let pretrain_path = cfg.resolve(&cfg.paths.pretrain_corpus);
    require(&pretrain_path, "pretraining corpus", "corpus --config <cfg>")?;
    let text = std::fs::read_to_string(&pretrain_path).map_err(|source| CliError::Io {
        path: pretrain_path.display().to_string(),
        source,
    })?;
    let sequences: Vec<Vec<usize>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode_for_lm(l))
        .collect();
    let data = TokenizedDataset::new(sequences);

    let mut model =
        LanguageModel::new(cfg.model.to_model_config(vocab.len()), cfg.model.init_seed)?;
    let log = pretrain_lm(&mut model, &data, &cfg.pretrain)?;
    let model_path = cfg.resolve(&cfg.paths.model);
    model.save(&model_path)?;
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.final_loss()) {
        println!(
            "pretrain: {} epochs, loss {first:.4} -> {last:.4}, digest {}",
            log.epoch_losses.len(),
            &model.digest()[..12]
        );
    }
    Ok(())
}

pub fn cmd_train_prompt(cfg: &RunConfig, family: &str, value: &str) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let corpus = load_labeled_corpus(cfg)?;
    let store_path = cfg.resolve(&cfg.paths.prompt_store);
    let mut store = if store_path.exists() {
        PromptStore::load(&store_path, &model)?
    } else {
        PromptStore::new(&model)
    };
    train_one_prompt_into(cfg, &model, &vocab, &corpus, &mut store, family, value)?;
    store.save(&store_path)?;
    Ok(())
}

fn train_one_prompt_into(
    cfg: &RunConfig,
    model: &LanguageModel,
    vocab: &Vocab,
    corpus: &[LabeledSentence],
    store: &mut PromptStore,
    family: &str,
    value: &str,
) -> Result<(), CliError> {
    let subset: Vec<LabeledSentence> = corpus
        .iter()
        .filter(|s| s.labels.get(family) == Some(&value.to_string()))
        .cloned()
        .collect();
    let key = format!("{family}={value}");
    let mut prompt = init_prompt(
        family,
        value,
        cfg.prompt.length,
        model.config().d_emb,
        seed_for_key(cfg.prompt.init_seed, &key),
    );
    let train_cfg = PromptTrainConfig {
        epochs: cfg.prompt.epochs,
        batch_size: cfg.prompt.batch_size,
        learning_rate: cfg.prompt.learning_rate,
        seed: seed_for_key(cfg.prompt.train_seed, &key),
    };
    let log = train_single_prompt(model, &mut prompt, &subset, vocab, &train_cfg)?;
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.final_loss()) {
        println!(
            "prompt {key}: {} sentences, {} epochs, loss {first:.4} -> {last:.4}",
            subset.len(),
            log.epoch_losses.len()
        );
    }
    store.insert(prompt)?;
    Ok(())
}

pub fn cmd_train_all_prompts(cfg: &RunConfig) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let corpus = load_labeled_corpus(cfg)?;
    let store_path = cfg.resolve(&cfg.paths.prompt_store);
    let mut store = if store_path.exists() {
        PromptStore::load(&store_path, &model)?
    } else {
        PromptStore::new(&model)
    };
    for fam in &default_schema().families {
        for value in &fam.values {
            train_one_prompt_into(cfg, &model, &vocab, &corpus, &mut store, &fam.name, value)?;
        }
    }
    store.save(&store_path)?;
    Ok(())
}

fn classifier_path(cfg: &RunConfig, family: &str) -> PathBuf {
    cfg.resolve(&cfg.paths.classifier_dir)
        .join(format!("classifier-{family}.bin"))
}

/// Loads cached classifiers when they match the vocabulary, otherwise
/// trains and saves them.
fn ensure_classifiers(
    cfg: &RunConfig,
    corpus: &[LabeledSentence],
    vocab: &Vocab,
) -> Result<BTreeMap<String, AttributeClassifier>, CliError> {
    let dir = cfg.resolve(&cfg.paths.classifier_dir);
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for fam in &default_schema().families {
        let path = classifier_path(cfg, &fam.name);
        let cached = if path.exists() {
            let clf = AttributeClassifier::load(&path)?;
            (clf.vocab_digest() == vocab.digest()).then_some(clf)
        } else {
            None
        };
        let clf = match cached {
            Some(clf) => clf,
            None => train_and_save_classifier(cfg, &fam.name, corpus, vocab, &path)?,
        };
        out.insert(fam.name.clone(), clf);
    }
    Ok(out)
}

fn train_and_save_classifier(
    cfg: &RunConfig,
    family: &str,
    corpus: &[LabeledSentence],
    vocab: &Vocab,
    path: &Path,
) -> Result<AttributeClassifier, CliError> {
    let train_cfg = ClassifierTrainConfig {
        epochs: cfg.classifier.epochs,
        batch_size: cfg.classifier.batch_size,
        learning_rate: cfg.classifier.learning_rate,
        seed: cfg.classifier.seed,
        held_out_fraction: cfg.classifier.held_out_fraction,
    };
    let clf = train_attribute_classifier(family, corpus, vocab, &train_cfg)?;
    println!(
        "classifier {family}: held-out accuracy {:.3}",
        clf.held_out_accuracy
    );
    clf.save(path)?;
    Ok(clf)
}

pub fn cmd_train_connector(
    cfg: &RunConfig,
    pseudo_mode: Option<PseudoModeArg>,
    held_out: Option<BTreeMap<String, String>>,
) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let store = load_store(cfg, &model)?;
    let corpus = load_labeled_corpus(cfg)?;
    let classifiers = ensure_classifiers(cfg, &corpus, &vocab)?;

    let mode = match pseudo_mode {
        Some(PseudoModeArg::Argmax) => PseudoMode::Argmax,
        Some(PseudoModeArg::Weighted) => PseudoMode::Weighted,
        None => match cfg.connector.pseudo_mode.as_str() {
            "weighted" => PseudoMode::Weighted,
            _ => PseudoMode::Argmax,
        },
    };
    let train_cfg = ConnectorTrainConfig {
        pseudo_mode: mode,
        connector_len: cfg.connector.length,
        epochs: cfg.connector.epochs,
        batch_size: cfg.connector.batch_size,
        learning_rate: cfg.connector.learning_rate,
        seed: cfg.connector.seed,
        held_out_pair: held_out,
    };
    let (connector, log) =
        train_connector(&model, &store, &classifiers, &corpus, &vocab, &train_cfg)?;
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.final_loss()) {
        println!(
            "connector ({mode}): {} epochs, loss {first:.4} -> {last:.4}",
            log.epoch_losses.len()
        );
    }
    connector.save(&cfg.resolve(&cfg.paths.connector))?;
    Ok(())
}

fn run_digests(
    model: &LanguageModel,
    store: &PromptStore,
    attrs: &[(String, String)],
    connector: Option<&Connector>,
) -> Result<RunDigests, CliError> {
    let mut prompts = BTreeMap::new();
    for (f, v) in attrs {
        prompts.insert(format!("{f}={v}"), store.get(f, v)?.digest());
    }
    Ok(RunDigests {
        model: model.digest(),
        prompts,
        connector: connector.map(|c| c.digest()),
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '=' || c == '-' {
                c
            } else {
                '+'
            }
        })
        .collect()
}

/// Runs generation for one attribute set and writes the dump. Returns the
/// dump path.
pub fn cmd_generate(
    cfg: &RunConfig,
    mode: ModeArg,
    attributes: &str,
    seed_override: Option<u64>,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let attrs = parse_attributes(attributes)?;
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let store = load_store(cfg, &model)?;
    let mut decode = cfg.decode.clone();
    if let Some(s) = seed_override {
        decode.seed = s;
    }
    let prefixes = cfg.eval_prefixes();
    let targets: BTreeMap<String, String> = attrs.iter().cloned().collect();

    let connector = if mode == ModeArg::Connector {
        let path = cfg.resolve(&cfg.paths.connector);
        require(&path, "connector checkpoint", "train-connector --config <cfg>")?;
        Some(Connector::load(&path)?)
    } else {
        None
    };

    let run = match mode {
        ModeArg::Single => {
            if attrs.len() != 1 {
                return Err(CliError::BadArgs(
                    "mode single needs exactly one FAMILY=VALUE".into(),
                ));
            }
            let prompt = store.get(&attrs[0].0, &attrs[0].1)?;
            let layout = SinglePromptLayout { prompt };
            GenerationRun::execute(
                &model,
                &layout,
                mode.label().into(),
                targets,
                &prefixes,
                cfg.eval.samples_per_prefix,
                &decode,
                &vocab,
                run_digests(&model, &store, &attrs, None)?,
            )?
        }
        _ => {
            if attrs.len() != 2 {
                return Err(CliError::BadArgs(format!(
                    "mode {} needs exactly two FAMILY=VALUE attributes",
                    mode.label()
                )));
            }
            let first = store.get(&attrs[0].0, &attrs[0].1)?;
            let second = store.get(&attrs[1].0, &attrs[1].1)?;
            let mut plan = match mode {
                ModeArg::Concat => CompositionPlan::new(first, second, CompositionMode::Concat),
                ModeArg::MaskRp => CompositionPlan::new(first, second, CompositionMode::MaskRp),
                ModeArg::MaskOnly => CompositionPlan::new(first, second, CompositionMode::MaskRp)
                    .with_ablation(true, false),
                ModeArg::RpOnly => CompositionPlan::new(first, second, CompositionMode::MaskRp)
                    .with_ablation(false, true),
                ModeArg::Connector => {
                    CompositionPlan::new(first, second, CompositionMode::Connector)
                }
                ModeArg::Single => unreachable!(),
            };
            if let Some(c) = connector.as_ref() {
                plan = plan.with_connector(c);
            }
            GenerationRun::execute(
                &model,
                &plan,
                mode.label().into(),
                targets,
                &prefixes,
                cfg.eval.samples_per_prefix,
                &decode,
                &vocab,
                run_digests(&model, &store, &attrs, connector.as_ref())?,
            )?
        }
    };

    let dump_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.report_dir();
            std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let attrs_name: Vec<String> =
                run.targets.iter().map(|(f, v)| format!("{f}={v}")).collect();
            dir.join(format!(
                "dump_{}_{}_{}.txt",
                mode.label(),
                sanitize(&attrs_name.join("+")),
                decode.seed
            ))
        }
    };
    write_dump(&run, &dump_path)?;
    println!(
        "generate {}: {} sentences ({} truncated) -> {}",
        mode.label(),
        run.sentences.len(),
        run.truncated,
        dump_path.display()
    );
    Ok(dump_path)
}

/// Scores a dump and writes the report. Returns the report path.
pub fn cmd_eval(
    cfg: &RunConfig,
    dump: &Path,
    judge: JudgeArg,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    require(dump, "generation dump", "generate --config <cfg>")?;
    let run = read_dump(dump)?;
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let schema = default_schema();
    let metrics = match judge {
        JudgeArg::Oracle => {
            compute_metrics(&run, &CorrectnessJudge::Oracle(&schema), &model, &vocab)?
        }
        JudgeArg::Classifier => {
            let corpus = load_labeled_corpus(cfg)?;
            let classifiers = ensure_classifiers(cfg, &corpus, &vocab)?;
            compute_metrics(
                &run,
                &CorrectnessJudge::Classifier {
                    classifiers: &classifiers,
                    vocab: &vocab,
                },
                &model,
                &vocab,
            )?
        }
    };
    let report = EvalReport::from_run(&run, metrics).with_config(cfg.echo());
    let report_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.report_dir();
            std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let stem = dump
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".into());
            dir.join(format!("report_{stem}.json"))
        }
    };
    emit_report(&report, &report_path)?;
    println!(
        "eval: correctness avg {:.3}, ppl {:.2}, dist-1/2/3 {:.3}/{:.3}/{:.3} -> {}",
        report.metrics.correctness_avg,
        report.metrics.ppl,
        report.metrics.dist1,
        report.metrics.dist2,
        report.metrics.dist3,
        report_path.display()
    );
    Ok(report_path)
}

/// The full default pipeline: corpus → pretrain → all prompts → connector →
/// per-pair generation and evaluation → grid report.
pub fn cmd_pipeline(cfg: &RunConfig, mode: ModeArg) -> Result<(), CliError> {
    cmd_corpus(cfg)?;
    cmd_pretrain(cfg)?;
    cmd_train_all_prompts(cfg)?;
    cmd_train_connector(cfg, None, None)?;

    let schema = default_schema();
    let sentiment = &schema.families[0];
    let topic = &schema.families[1];
    let mut rows = Vec::new();
    for s in &sentiment.values {
        for t in &topic.values {
            let attrs = format!("{}={s},{}={t}", sentiment.name, topic.name);
            let dump = cmd_generate(cfg, mode, &attrs, None, None)?;
            let report_path = cmd_eval(cfg, &dump, JudgeArg::Oracle, None)?;
            let report = crate::eval::parse_report(&report_path)?;
            rows.push(PairRow {
                targets: report.targets.clone(),
                metrics: report.metrics.clone(),
            });
        }
    }
    let grid = grid_report(mode.label(), rows);
    let grid_path = cfg.report_dir().join(format!("grid_{}.json", mode.label()));
    grid.write(&grid_path)?;
    println!(
        "pipeline complete: grid avg correctness {:.3} -> {}",
        grid.average.correctness_avg,
        grid_path.display()
    );
    Ok(())
}
