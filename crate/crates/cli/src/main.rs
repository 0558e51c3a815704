//! `utged`: command-line entry point for data preparation, training,
//! generation, evaluation and parameter sweeps.
//!
//! Every command writes into a run directory holding the resolved
//! configuration (`config.toml`) and `run.json` with the seed, the command
//! line and SHA-256 hashes of every input file. Exit codes: 0 on success,
//! 1 on usage, configuration or input-format errors, 2 on runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use utged::config::{content_hash, Config};
use utged::control::DecodeTrace;
use utged::corpus::{self, FilterConfig, SplitRatios, TopOrder, UserRecord};
use utged::evaluation::{self, EvalReport, Sample, SweepAxis};
use utged::pipeline::{build_examples, source_tokens, tokenize_users, Example, Vocabs};
use utged::similarity::{Backend, MeanEmbeddingEncoder, SentenceEncoder, TfidfEncoder};
use utged::synth::{self, SynthConfig};
use utged::training::{self, Checkpoint, Model, Optimizer, CHECKPOINT_FILE, CONFIG_FILE};
use utged::{Error, Result};

#[derive(Parser)]
#[command(name = "utged", version, about = "Topic-guided self-introduction generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory of this run [default: runs/<command>].
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    MostSimilar,
    MostRecent,
}

impl From<Order> for TopOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::MostSimilar => TopOrder::MostSimilar,
            Order::MostRecent => TopOrder::MostRecent,
        }
    }
}

#[derive(Args, Clone)]
struct DecodeFlags {
    /// Topic-word steering during decoding.
    #[arg(long, value_enum)]
    control: Option<Switch>,
    #[arg(long)]
    alpha_step: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Ascent rounds per decode step.
    #[arg(long)]
    iters: Option<usize>,
    /// Number of topic words taken from the user's major topic.
    #[arg(long)]
    topic_words: Option<usize>,
    /// Whitespace-separated words used as the topic word set for every user.
    #[arg(long)]
    topic_words_file: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Write per-step steering diagnostics to trace.jsonl.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and build vocabularies from a raw JSONL corpus.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Keep every record.
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        min_similarity: Option<f64>,
        #[arg(long, value_enum)]
        top_order: Option<Order>,
        #[arg(long)]
        min_ascii_ratio: Option<f64>,
        #[arg(long, default_value_t = 0.8)]
        train_ratio: f64,
        #[arg(long, default_value_t = 0.1)]
        valid_ratio: f64,
        #[arg(long, default_value_t = 0.1)]
        test_ratio: f64,
    },
    /// Similarity and history-size histograms of a corpus.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 30)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "most-similar")]
        top_order: Order,
    },
    /// Pretrain the topic model alone and save a checkpoint.
    PretrainNtm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain (unless --init is given) and jointly train the full model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        /// Start from this checkpoint directory and skip pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        ntm_epochs: Option<usize>,
        #[arg(long)]
        joint_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_sig: Option<f64>,
        #[arg(long)]
        alpha_loss: Option<f64>,
        /// Representative document selection.
        #[arg(long, value_enum)]
        selection: Option<Switch>,
        /// Topic prompt on the encoder input.
        #[arg(long, value_enum)]
        tpee: Option<Switch>,
    },
    /// Generate self-introductions for every user of a corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Generate and score against the reference introductions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Train and evaluate once per value of an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// K (topic number), L (prompt length) or bucket (history size).
        #[arg(long)]
        axis: String,
        /// Comma-separated values [default: the axis grid].
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Top words of every learned topic.
    TopicsDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 30)]
        words: usize,
    },
    /// Documents kept by representative selection, per user.
    SelectionDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Embedding table for the mean-token-embedding backend.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_input_tokens: Option<usize>,
    },
    /// Synthetic corpus with planted topics.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        topics: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        docs_min: usize,
        #[arg(long, default_value_t = 60)]
        docs_max: usize,
        #[arg(long, default_value_t = 300)]
        vocab: usize,
        #[arg(long, default_value_t = 12)]
        words_per_doc: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Stats { .. } => "stats",
            Command::PretrainNtm { .. } => "pretrain-ntm",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::TopicsDump { .. } => "topics-dump",
            Command::SelectionDump { .. } => "selection-dump",
            Command::Synth { .. } => "synth",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::Stats { common, .. }
            | Command::PretrainNtm { common, .. }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::TopicsDump { common, .. }
            | Command::SelectionDump { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }
}

/// Output directory plus the metadata needed to reproduce the run.
struct Run {
    dir: PathBuf,
    cfg: Config,
    command: &'static str,
    inputs: Vec<(String, String)>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))
    }

    fn hash_input(&mut self, path: &Path) -> Result<()> {
        let files: Vec<PathBuf> = if path.is_dir() {
            [CONFIG_FILE, CHECKPOINT_FILE].iter().map(|f| path.join(f)).collect()
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            let bytes = fs::read(&f).map_err(|e| io_err(&f, e))?;
            self.inputs.push((f.display().to_string(), content_hash(&bytes)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        self.write(CONFIG_FILE, &self.cfg.to_toml())?;
        let inputs: Vec<_> = self.inputs.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect();
        let meta = json!({
            "command": self.command,
            "args": std::env::args().collect::<Vec<_>>(),
            "seed": self.cfg.train.seed,
            "config_sha256": content_hash(self.cfg.to_toml().as_bytes()),
            "inputs": inputs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        self.write("run.json", &serde_json::to_string_pretty(&meta)?)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn resolve_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_decode(cfg: &mut Config, d: &DecodeFlags) {
    if let Some(c) = d.control {
        cfg.train.twed = c.on();
    }
    set(&mut cfg.decode.alpha_step, d.alpha_step);
    set(&mut cfg.decode.gamma, d.gamma);
    set(&mut cfg.decode.n_iter, d.iters);
    set(&mut cfg.decode.topic_words, d.topic_words);
    set(&mut cfg.decode.beam_width, d.beam_width);
    set(&mut cfg.decode.max_len, d.max_len);
}

fn read_users(run: &mut Run, path: &Path) -> Result<Vec<UserRecord>> {
    run.hash_input(path)?;
    corpus::read_jsonl(path)
}

fn write_jsonl(path: &Path, rows: impl IntoIterator<Item = serde_json::Value>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn global_tfidf(records: &[UserRecord]) -> Result<TfidfEncoder> {
    let users = tokenize_users(records);
    TfidfEncoder::fit(users.iter().flat_map(|u| u.docs.iter().chain(std::iter::once(&u.intro))).map(Vec::as_slice))
}

fn load_checkpoint(run: &mut Run, dir: &Path) -> Result<Checkpoint> {
    run.hash_input(dir)?;
    Checkpoint::load(dir)
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Parse { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    let name = command.name();
    let common = command.common().clone();
    let cfg = resolve_config(&common)?;
    let dir = common.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut run = Run {
        dir,
        cfg,
        command: name,
        inputs: Vec::new(),
    };
    match command {
        Command::Prepare {
            input,
            no_filter,
            min_similarity,
            top_order,
            min_ascii_ratio,
            train_ratio,
            valid_ratio,
            test_ratio,
            ..
        } => {
            let records = read_users(&mut run, &input)?;
            let records = if no_filter {
                records
            } else {
                let mut f = FilterConfig::default();
                set(&mut f.min_similarity, min_similarity);
                if let Some(o) = top_order {
                    f.top_order = o.into();
                }
                f.min_ascii_ratio = min_ascii_ratio;
                let enc = global_tfidf(&records)?;
                corpus::filter_records(records, &f, &enc)?
            };
            let ratios = SplitRatios {
                train: train_ratio,
                valid: valid_ratio,
                test: test_ratio,
            };
            let (train, valid, test) = corpus::split(&records, ratios, run.cfg.train.seed)?;
            for (file, part) in [("train.jsonl", &train), ("valid.jsonl", &valid), ("test.jsonl", &test)] {
                corpus::write_jsonl(&run.path(file), part)?;
            }
            Vocabs::build(&tokenize_users(&train), &run.cfg.data).save(&run.dir)?;
            log::info!("{} records kept: {} train, {} valid, {} test", records.len(), train.len(), valid.len(), test.len());
        }
        Command::Stats { input, top_k, top_order, .. } => {
            let records = read_users(&mut run, &input)?;
            let enc = global_tfidf(&records)?;
            let report = corpus::stats(&records, &enc, top_k, top_order.into());
            run.write("similarity.csv", &corpus::bins_csv(&report.similarity))?;
            run.write("doc_counts.csv", &corpus::bins_csv(&report.doc_counts))?;
            run.write("summary.txt", &report.summary())?;
            print!("{}", report.summary());
        }
        Command::PretrainNtm { train, epochs, .. } => {
            set(&mut run.cfg.train.ntm_pretrain_epochs, epochs);
            run.cfg.validate()?;
            let users = tokenize_users(&read_users(&mut run, &train)?);
            let vocabs = Vocabs::build(&users, &run.cfg.data);
            let examples = build_examples(&users, &vocabs, &run.cfg.data, run.cfg.train.selection, None)?;
            let mut model = Model::new(&run.cfg, vocabs.gen.len(), vocabs.bow.len())?;
            let bows: Vec<_> = examples.iter().map(|e| &e.bow).collect();
            let losses = training::pretrain_ntm(&mut model, &bows, &run.cfg)?;
            let mut csv = String::from("epoch,L_NTM\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            run.write("ntm_loss.csv", &csv)?;
            run.write("topics.txt", &topics_text(&model, &vocabs, run.cfg.decode.topic_words))?;
            let opt = Optimizer::new(&model.store, &run.cfg);
            save_checkpoint(&run, model, opt, vocabs, 0)?;
        }
        Command::Train {
            train,
            init,
            ntm_epochs,
            joint_epochs,
            batch_size,
            lr_sig,
            alpha_loss,
            selection,
            tpee,
            ..
        } => {
            let t = &mut run.cfg.train;
            set(&mut t.ntm_pretrain_epochs, ntm_epochs);
            set(&mut t.joint_epochs, joint_epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.lr_sig, lr_sig);
            set(&mut t.alpha_loss, alpha_loss);
            set(&mut t.selection, selection.map(Switch::on));
            set(&mut t.tpee, tpee.map(Switch::on));
            run.cfg.validate()?;
            let users = tokenize_users(&read_users(&mut run, &train)?);
            let (mut model, vocabs) = match &init {
                Some(dir) => {
                    let ck = load_checkpoint(&mut run, dir)?;
                    if ck.config.model != run.cfg.model {
                        return Err(Error::Config("model shape differs from the --init checkpoint".into()));
                    }
                    (ck.model, ck.vocabs)
                }
                None => {
                    let vocabs = Vocabs::build(&users, &run.cfg.data);
                    (Model::new(&run.cfg, vocabs.gen.len(), vocabs.bow.len())?, vocabs)
                }
            };
            let examples = build_examples(&users, &vocabs, &run.cfg.data, run.cfg.train.selection, None)?;
            if init.is_none() {
                let bows: Vec<_> = examples.iter().map(|e| &e.bow).collect();
                training::pretrain_ntm(&mut model, &bows, &run.cfg)?;
            }
            let trainer = training::joint_train(&mut model, &examples, &run.cfg)?;
            training::write_log_csv(&run.path("train_log.csv"), &trainer.log)?;
            let epochs = run.cfg.train.joint_epochs as u64;
            save_checkpoint(&run, model, trainer.opt, vocabs, epochs)?;
        }
        Command::Generate { checkpoint, input, decode, .. } => {
            let ck = load_checkpoint(&mut run, &checkpoint)?;
            let (examples, a) = decode_setup(&mut run, &ck, &input, &decode)?;
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for ex in &examples {
                let (toks, trace) = evaluation::generate(&ck.model, &ck.vocabs, ex, &run.cfg, a.as_deref())?;
                rows.push(json!({"user_id": ex.user_id, "generated": toks.join(" "), "reference": ex.target_tokens.join(" ")}));
                traces.push((ex.user_id.clone(), trace));
            }
            write_jsonl(&run.path("generations.jsonl"), rows)?;
            if decode.trace {
                write_traces(&run.path("trace.jsonl"), &traces)?;
            }
        }
        Command::Evaluate { checkpoint, input, decode, .. } => {
            let ck = load_checkpoint(&mut run, &checkpoint)?;
            let (examples, a) = decode_setup(&mut run, &ck, &input, &decode)?;
            let mut samples = Vec::new();
            let mut traces = Vec::new();
            let mut failures = 0;
            for ex in &examples {
                match evaluation::generate(&ck.model, &ck.vocabs, ex, &run.cfg, a.as_deref()) {
                    Ok((toks, trace)) => {
                        samples.push(Sample {
                            user_id: ex.user_id.clone(),
                            score: evaluation::rouge(&toks, &ex.target_tokens),
                            generated: toks.join(" "),
                            reference: ex.target_tokens.join(" "),
                            history_docs: ex.history_docs,
                        });
                        traces.push((ex.user_id.clone(), trace));
                    }
                    Err(e) => {
                        log::warn!("{}: generation failed: {e}", ex.user_id);
                        failures += 1;
                    }
                }
            }
            let report = EvalReport::from_samples(samples, failures);
            let metrics = json!({"r1": report.r1, "r2": report.r2, "rl": report.rl, "samples": report.samples.len(), "failures": report.failures});
            run.write("metrics.json", &serde_json::to_string_pretty(&metrics)?)?;
            run.write("samples.csv", &report.samples_csv())?;
            write_jsonl(
                &run.path("generations.jsonl"),
                report.samples.iter().map(|s| json!({"user_id": s.user_id, "generated": s.generated, "reference": s.reference})),
            )?;
            if decode.trace {
                write_traces(&run.path("trace.jsonl"), &traces)?;
            }
            println!("R-1 {:.4}  R-2 {:.4}  R-L {:.4}  ({} samples, {} failures)", report.r1, report.r2, report.rl, report.samples.len(), report.failures);
        }
        Command::Sweep { axis, values, train, test, .. } => {
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            run.cfg.validate()?;
            let train = tokenize_users(&read_users(&mut run, &train)?);
            let test = tokenize_users(&read_users(&mut run, &test)?);
            let report = evaluation::sweep(axis, &values, &run.cfg, &train, &test);
            run.write("sweep.csv", &report.csv())?;
            run.write("sweep.dat", &report.plot_data())?;
            print!("{}", report.csv());
        }
        Command::TopicsDump { checkpoint, words, .. } => {
            let ck = load_checkpoint(&mut run, &checkpoint)?;
            run.cfg = ck.config.clone();
            let text = topics_text(&ck.model, &ck.vocabs, words);
            run.write("topics.txt", &text)?;
            print!("{text}");
        }
        Command::SelectionDump {
            input,
            checkpoint,
            lambda,
            max_input_tokens,
            ..
        } => {
            set(&mut run.cfg.data.lambda, lambda);
            set(&mut run.cfg.data.max_input_tokens, max_input_tokens);
            run.cfg.validate()?;
            let users = tokenize_users(&read_users(&mut run, &input)?);
            let shared: Option<Box<dyn SentenceEncoder>> = match (run.cfg.data.similarity, &checkpoint) {
                (Backend::Tfidf, _) => None,
                (Backend::MeanTokenEmbedding, Some(dir)) => {
                    let ck = load_checkpoint(&mut run, dir)?;
                    let table = ck.model.store.get(ck.model.gen.embed).clone();
                    Some(Box::new(MeanEmbeddingEncoder::new(ck.vocabs.gen, table)?))
                }
                (Backend::MeanTokenEmbedding, None) => return Err(usage("the mean-token-embedding backend needs --checkpoint")),
            };
            let mut rows = Vec::new();
            for u in &users {
                let (seq, kept, scores) = source_tokens(u, &run.cfg.data, true, shared.as_deref())?;
                rows.push(json!({"user_id": u.user_id, "kept_indices": kept, "scores": scores, "token_count": seq.len()}));
            }
            write_jsonl(&run.path("selection.jsonl"), rows)?;
        }
        Command::Synth {
            topics,
            users,
            docs_min,
            docs_max,
            vocab,
            words_per_doc,
            noise,
            ..
        } => {
            let sc = SynthConfig {
                topics,
                users,
                docs_min,
                docs_max,
                vocab,
                words_per_doc,
                noise,
                seed: run.cfg.train.seed,
                ..SynthConfig::default()
            };
            let (records, planted) = synth::generate(&sc)?;
            corpus::write_jsonl(&run.path("corpus.jsonl"), &records)?;
            planted.save(&run.path("planted.json"))?;
            run.write("synth.json", &serde_json::to_string_pretty(&sc)?)?;
        }
    }
    run.finish()
}

fn save_checkpoint(run: &Run, model: Model, opt: Optimizer, vocabs: Vocabs, epoch: u64) -> Result<()> {
    let ck = Checkpoint {
        config: run.cfg.clone(),
        model,
        opt,
        vocabs,
        epoch,
    };
    ck.save(&run.path("checkpoint"))
}

/// Examples under the checkpoint's vocabularies, plus the fixed topic word
/// set when one was given.
fn decode_setup(run: &mut Run, ck: &Checkpoint, input: &Path, d: &DecodeFlags) -> Result<(Vec<Example>, Option<Vec<usize>>)> {
    let seed = run.cfg.train.seed;
    let decode_cfg = run.cfg.decode.clone();
    run.cfg = ck.config.clone();
    run.cfg.train.seed = seed;
    run.cfg.decode = decode_cfg;
    apply_decode(&mut run.cfg, d);
    run.cfg.validate()?;
    let a = match &d.topic_words_file {
        Some(p) => {
            run.hash_input(p)?;
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let mut ids = Vec::new();
            for w in text.split_whitespace() {
                match ck.vocabs.gen.id(w) {
                    Some(id) if !ids.contains(&id) => ids.push(id),
                    Some(_) => {}
                    None => log::warn!("topic word {w:?} is not in the generation vocabulary"),
                }
            }
            Some(ids)
        }
        None => None,
    };
    let users = tokenize_users(&read_users(run, input)?);
    let examples = build_examples(&users, &ck.vocabs, &run.cfg.data, run.cfg.train.selection, None)?;
    Ok((examples, a))
}

fn write_traces(path: &Path, traces: &[(String, Option<DecodeTrace>)]) -> Result<()> {
    let mut rows = Vec::new();
    for (user, trace) in traces {
        for step in trace.iter().flat_map(|t| &t.steps) {
            let mut v = serde_json::to_value(step)?;
            v["user_id"] = json!(user);
            rows.push(v);
        }
    }
    write_jsonl(path, rows)
}

fn topics_text(model: &Model, vocabs: &Vocabs, words: usize) -> String {
    let mut out = String::new();
    for c in 0..model.ntm.cfg.topics {
        let ws = vocabs.bow.decode(&model.ntm.topic_words(&model.store, c, words));
        out.push_str(&format!("topic {c}: {}\n", ws.join(" ")));
    }
    out
}
