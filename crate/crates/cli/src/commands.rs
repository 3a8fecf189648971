use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use empdial_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use empdial_core::corpus::{build_vocab, load_corpus, make_all_examples, Dialogue, Role};
use empdial_core::labels::{Emotion, Intent, NUM_EMOTIONS};
use empdial_core::model::Model;
use empdial_core::pipeline::{evaluate, ChatTurn, EvalOptions};
use empdial_core::priors::{Priors, ShiftMatrix};
use empdial_core::respg::SamplingOptions;
use empdial_core::trainer::Trainer;
use empdial_core::{Error, TrainConfig};
use empdial_service::{AppState, ServiceOptions, TurnResult};

use crate::{Cli, Command, DataArgs, Failure, SamplingArgs};

type Res<T> = std::result::Result<T, Failure>;

fn io_fail(path: &Path, e: io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

fn base_config(cli: &Cli) -> Res<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Splits {
    train: Vec<Dialogue>,
    valid: Vec<Dialogue>,
    test: Vec<Dialogue>,
}

fn load_split(dir: &Path, name: &str, required: bool) -> Res<Vec<Dialogue>> {
    let path = dir.join(format!("{name}.jsonl"));
    if !path.exists() {
        if required {
            return Err(Failure::Data(format!("{} does not exist", path.display())));
        }
        return Ok(Vec::new());
    }
    Ok(load_corpus(&path)?)
}

fn load_splits(data: &DataArgs) -> Res<Splits> {
    if !data.data.is_dir() {
        return Err(Failure::Data(format!("{} is not a directory", data.data.display())));
    }
    let train = load_split(&data.data, "train", true)?;
    if train.is_empty() {
        return Err(Failure::Data("train.jsonl holds no dialogues".into()));
    }
    Ok(Splits {
        train,
        valid: load_split(&data.data, "valid", false)?,
        test: load_split(&data.data, "test", false)?,
    })
}

fn sampling(cfg: &TrainConfig, args: &SamplingArgs) -> Res<SamplingOptions> {
    let s = SamplingOptions {
        top_k: args.topk.unwrap_or(cfg.top_k),
        temperature: args.temperature.unwrap_or(cfg.temperature),
        max_new: args.max_new.unwrap_or(cfg.max_new),
    };
    if s.top_k == 0 || s.max_new == 0 || !(s.temperature > 0.0 && s.temperature.is_finite()) {
        return Err(Failure::Usage("--topk, --max-new and --temperature must be positive".into()));
    }
    Ok(s)
}

fn load_model(dir: &Path) -> Res<Checkpoint> {
    Ok(load_checkpoint(dir)?)
}

pub(crate) fn dispatch(cli: &Cli) -> Res<()> {
    match &cli.command {
        Command::Prep { data, out } => prep(cli, data, out),
        Command::Priors { data, out, top } => priors(cli, data, out.as_deref(), *top),
        Command::Train {
            data,
            out,
            epochs,
            warmup_epochs,
            lr,
            batch_size,
            log,
        } => {
            let mut cfg = base_config(cli)?;
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = warmup_epochs {
                cfg.warmup_epochs = *v;
            }
            if let Some(v) = lr {
                cfg.lr = *v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = *v;
            }
            cfg.validate()?;
            train(cfg, data, out, log.as_deref())
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            sampling: s,
            gold_states,
            per_response_dist,
            per_label_ap,
            report,
            kv,
            samples,
        } => {
            let ckpt = load_model(checkpoint)?;
            let opts = EvalOptions {
                sampling: sampling(&ckpt.config, s)?,
                seed: cli.seed.unwrap_or(ckpt.config.seed),
                gold_states: *gold_states,
                per_response_dist: *per_response_dist,
                per_label_ap: *per_label_ap,
            };
            let outputs = EvalOutputs {
                report: report.as_deref(),
                kv: kv.as_deref(),
                samples: samples.as_deref(),
            };
            eval(&ckpt.model, data, split, &opts, outputs)
        }
        Command::Generate {
            checkpoint,
            input,
            output,
            sampling: s,
        } => {
            let ckpt = load_model(checkpoint)?;
            let opts = sampling(&ckpt.config, s)?;
            generate(&ckpt.model, input, output.as_deref(), &opts, cli.seed.unwrap_or(ckpt.config.seed))
        }
        Command::Chat { checkpoint, sampling: s } => {
            let ckpt = load_model(checkpoint)?;
            let opts = sampling(&ckpt.config, s)?;
            let stdin = io::stdin();
            chat(&ckpt.model, &opts, cli.seed.unwrap_or(ckpt.config.seed), stdin.lock(), io::stdout())
        }
        Command::Serve {
            checkpoint,
            host,
            port,
            sampling: s,
            session_ttl,
            transcript,
        } => {
            let (model, cfg) = match checkpoint {
                Some(p) => {
                    let c = load_model(p)?;
                    (Some(c.model), c.config)
                }
                None => {
                    log::warn!("no --checkpoint given; sessions will be refused");
                    (None, base_config(cli)?)
                }
            };
            if *session_ttl == 0 {
                return Err(Failure::Usage("--session-ttl must be positive".into()));
            }
            let options = ServiceOptions {
                sampling: sampling(&cfg, s)?,
                session_ttl: Duration::from_secs(*session_ttl),
                transcript: transcript.clone(),
                checkpoint: checkpoint.clone(),
            };
            serve(model, options, &format!("{host}:{port}"))
        }
        Command::Stats { data, top } => stats(data, *top),
    }
}

fn prep(cli: &Cli, data: &DataArgs, out: &Path) -> Res<()> {
    let cfg = base_config(cli)?;
    let splits = load_splits(data)?;
    let vocab = build_vocab(&splits.train, cfg.min_freq);
    let mut outputs = Vec::new();
    for (name, dialogues) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let examples = make_all_examples(dialogues, &vocab, cfg.model.max_len);
        let mut text = String::new();
        for ex in &examples {
            text.push_str(&serde_json::to_string(ex).expect("example serializes"));
            text.push('\n');
        }
        println!("{name}: {} dialogues, {} examples", dialogues.len(), examples.len());
        outputs.push((format!("{name}.examples.jsonl"), text));
    }
    let mut vocab_text = vocab.tokens().join("\n");
    vocab_text.push('\n');
    outputs.push(("vocab.txt".into(), vocab_text));
    for (file, text) in outputs {
        write_file(&out.join(file), text)?;
    }
    println!("vocabulary: {} tokens", vocab.len());
    Ok(())
}

fn print_transitions(m: &ShiftMatrix, top: usize) {
    println!("{} (top {top})", m.kind().name());
    for t in m.report_statistics(top) {
        println!("  {} -> {} {:.3}", t.source_name, t.target_name, t.probability);
    }
}

fn priors(cli: &Cli, data: &DataArgs, out: Option<&Path>, top: usize) -> Res<()> {
    let cfg = base_config(cli)?;
    let splits = load_splits(data)?;
    let p = Priors::build(&splits.train, &splits.valid, cfg.smoothing);
    print_transitions(&p.emo_emo, top);
    print_transitions(&p.emo_intent, top);
    if let Some(dir) = out {
        write_file(&dir.join("emo_emo.txt"), p.emo_emo.export())?;
        write_file(&dir.join("emo_intent.txt"), p.emo_intent.export())?;
    }
    Ok(())
}

fn train(cfg: TrainConfig, data: &DataArgs, out: &Path, log_path: Option<&Path>) -> Res<()> {
    let splits = load_splits(data)?;
    let vocab = build_vocab(&splits.train, cfg.min_freq);
    let priors = Priors::build(&splits.train, &splits.valid, cfg.smoothing);
    let train = make_all_examples(&splits.train, &vocab, cfg.model.max_len);
    let valid = make_all_examples(&splits.valid, &vocab, cfg.model.max_len);
    if train.is_empty() {
        return Err(Failure::Data(format!("no training example fits max_len {}", cfg.model.max_len)));
    }
    log::info!("{} train / {} valid examples, vocabulary {}", train.len(), valid.len(), vocab.len());
    let model = Model::new(cfg.model.clone(), vocab, priors, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg)?;
    if let Some(p) = log_path {
        let f = File::create(p).map_err(|e| io_fail(p, e))?;
        trainer = trainer.with_log(Box::new(BufWriter::new(f)));
    }
    if let Err(e) = trainer.fit(&train, &valid) {
        return Err(match e {
            Error::Diverged { .. } => Failure::Runtime(format!("{e}; no checkpoint written")),
            other => other.into(),
        });
    }
    save_checkpoint(out, &trainer.model, &trainer.cfg, &trainer.history)?;
    if let Some((epoch, nll)) = trainer.best {
        println!("best epoch {epoch}: validation NLL {nll:.6}");
    }
    println!("{} optimizer steps; checkpoint written to {}", trainer.steps(), out.display());
    Ok(())
}

struct EvalOutputs<'a> {
    report: Option<&'a Path>,
    kv: Option<&'a Path>,
    samples: Option<&'a Path>,
}

fn eval(model: &Model<f32>, data: &DataArgs, split: &str, opts: &EvalOptions, out: EvalOutputs<'_>) -> Res<()> {
    if !["train", "valid", "test"].contains(&split) {
        return Err(Failure::Usage(format!("unknown split `{split}`; expected train, valid or test")));
    }
    let dialogues = load_split(&data.data, split, true)?;
    let examples = make_all_examples(&dialogues, &model.vocab, model.config.max_len);
    let result = evaluate(model, &examples, opts)?;
    let rows = empdial_core::metrics::report_rows(Some(&result.generation), Some(&result.state));
    let text = empdial_core::metrics::format_text_report(&rows);
    print!("{text}");
    if let Some(p) = out.report {
        write_file(p, &text)?;
    }
    if let Some(p) = out.kv {
        write_file(p, empdial_core::metrics::format_kv_report(&rows))?;
    }
    if let Some(p) = out.samples {
        let mut s = String::new();
        for sample in &result.samples {
            s.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            s.push('\n');
        }
        write_file(p, s)?;
    }
    Ok(())
}

fn parse_context_line(line: &str, lineno: usize) -> Res<Vec<String>> {
    let bad = |m: &str| Failure::Data(format!("line {lineno}: {m}"));
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
    let turns: Vec<String> = match value {
        serde_json::Value::String(s) => vec![s],
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("turns must be strings"))?,
        _ => return Err(bad("expected a string or an array of strings")),
    };
    if turns.len().is_multiple_of(2) {
        return Err(bad("context must end with a speaker turn (odd number of turns)"));
    }
    if turns.iter().any(|t| t.trim().is_empty()) {
        return Err(bad("empty turn"));
    }
    Ok(turns)
}

fn roles(turns: &[String]) -> impl DoubleEndedIterator<Item = (Role, &str)> {
    turns.iter().enumerate().map(|(i, t)| {
        let role = if i % 2 == 0 { Role::Speaker } else { Role::Listener };
        (role, t.as_str())
    })
}

fn generate(model: &Model<f32>, input: &Path, output: Option<&Path>, opts: &SamplingOptions, seed: u64) -> Res<()> {
    let text = fs::read_to_string(input).map_err(|e| io_fail(input, e))?;
    let mut contexts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            let turns = parse_context_line(line, i + 1)?;
            contexts.push((i + 1, model.context_for(roles(&turns)).map_err(|e| Failure::Data(format!("line {}: {e}", i + 1)))?));
        }
    }
    let mut out = String::new();
    for (k, (_, ctx)) in contexts.iter().enumerate() {
        let turn = model.respond(ctx, opts, seed.wrapping_add(k as u64))?;
        out.push_str(&serde_json::to_string(&TurnResult::from(&turn)).expect("result serializes"));
        out.push('\n');
    }
    match output {
        Some(p) => write_file(p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn top_label(names: &[&str], probs: &[f64]) -> String {
    let (i, p) = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    format!("{} {p:.2}", names[i])
}

fn diagnostics(t: &ChatTurn) -> String {
    let intents: Vec<&str> = Intent::ALL
        .iter()
        .filter(|i| t.state.intents[i.id()])
        .map(|i| i.name())
        .collect();
    format!(
        "  [speaker {} | listener {} | intents {} | gate {:.3} | seed {}]",
        top_label(Emotion::NAMES, &t.state.p_speaker),
        top_label(Emotion::NAMES, &t.state.p_listener),
        intents.join(","),
        t.gate,
        t.seed
    )
}

/// Reads speaker lines from `input` until EOF or `/quit`; `/reset` starts a
/// new conversation.
pub(crate) fn chat(
    model: &Model<f32>,
    opts: &SamplingOptions,
    seed: u64,
    input: impl BufRead,
    mut out: impl Write,
) -> Res<()> {
    let w = |e: io::Error| Failure::Runtime(e.to_string());
    let mut history: Vec<String> = Vec::new();
    let mut n = 0u64;
    writeln!(out, "type a message; /reset clears the conversation, /quit exits").map_err(w)?;
    for line in input.lines() {
        let line = line.map_err(w)?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                writeln!(out, "(conversation cleared)").map_err(w)?;
                continue;
            }
            _ => {}
        }
        history.push(text.to_string());
        let turn = match model.context_for(roles(&history)) {
            Ok(ctx) => model.respond(&ctx, opts, seed.wrapping_add(n))?,
            Err(e) => {
                history.pop();
                writeln!(out, "error: {e}").map_err(w)?;
                continue;
            }
        };
        n += 1;
        writeln!(out, "listener: {}", turn.response).map_err(w)?;
        writeln!(out, "{}", diagnostics(&turn)).map_err(w)?;
        history.push(if turn.response.is_empty() { "...".into() } else { turn.response });
    }
    Ok(())
}

fn serve(model: Option<Model<f32>>, options: ServiceOptions, addr: &str) -> Res<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let app = AppState::new(model, options).map_err(|e| Failure::Data(format!("transcript: {e}")))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("listening on http://{local}");
        tokio::select! {
            r = empdial_service::serve(listener, app) => r.map_err(|e| Failure::Runtime(e.to_string())),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

fn print_counts(title: &str, counts: &BTreeMap<&str, usize>, order: &[&str]) {
    let total: usize = counts.values().sum();
    println!("{title} ({total})");
    for name in order {
        let c = counts.get(name).copied().unwrap_or(0);
        if c > 0 {
            println!("  {name:<14} {c:>6} {:>6.1}%", 100.0 * c as f64 / total as f64);
        }
    }
}

fn stats(data: &DataArgs, top: usize) -> Res<()> {
    let splits = load_splits(data)?;
    for (name, d) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let turns: usize = d.iter().map(|x| x.utterances.len()).sum();
        println!("{name}: {} dialogues, {turns} turns", d.len());
    }
    let mut speaker = BTreeMap::new();
    let mut listener = BTreeMap::new();
    let mut intents = BTreeMap::new();
    let mut shifts = [[0usize; NUM_EMOTIONS]; NUM_EMOTIONS];
    for d in splits.train.iter().chain(&splits.valid) {
        for (s, l) in d.exchanges() {
            *speaker.entry(s.emotion.name()).or_insert(0) += 1;
            *listener.entry(l.emotion.name()).or_insert(0) += 1;
            for i in &l.intents {
                *intents.entry(i.name()).or_insert(0) += 1;
            }
            shifts[s.emotion.id()][l.emotion.id()] += 1;
        }
    }
    print_counts("speaker emotions", &speaker, Emotion::NAMES);
    print_counts("listener emotions", &listener, Emotion::NAMES);
    print_counts("listener intents", &intents, Intent::NAMES);

    let mut ranked: Vec<(usize, usize, usize)> = (0..NUM_EMOTIONS)
        .flat_map(|s| (0..NUM_EMOTIONS).map(move |t| (s, t)))
        .filter(|&(s, t)| s != t && shifts[s][t] > 0)
        .map(|(s, t)| (s, t, shifts[s][t]))
        .collect();
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    println!("emotion shifts (top {top})");
    for (s, t, c) in ranked.into_iter().take(top) {
        let row: usize = shifts[s].iter().sum();
        println!(
            "  {} -> {} {c} ({:.3} of {})",
            Emotion::NAMES[s],
            Emotion::NAMES[t],
            c as f64 / row as f64,
            Emotion::NAMES[s]
        );
    }
    Ok(())
}
