use std::fmt;
use std::path::Path;
use std::time::Instant;

use xlm_core::data::{binary_tokens, gen_binary_corpus, load_token_stream, write_token_stream};
use xlm_core::eval::{emit_trajectory, perplexity, trace_trajectory, window_stats, write_window_stats};
use xlm_core::model::{count_params, load_checkpoint, save_checkpoint};
use xlm_core::training::{CostLog, Trainer};
use xlm_core::Error;

use crate::config::{CorpusSource, RawConfig, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.xlm";
pub const COSTS_FILE: &str = "costs.csv";
pub const CONFIG_FILE: &str = "config.cfg";

/// Command failure with its exit status class.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or paths; exit status 1.
    Usage(String),
    /// Failure while computing or writing results; exit status 2.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Refuses to replace an existing file unless `force` is set.
fn check_writable(path: &Path, force: bool) -> Outcome {
    if path.is_dir() {
        return Err(usage(format!("{} is a directory", path.display())));
    }
    if path.exists() && !force {
        return Err(usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(usage(format!("directory {} does not exist", parent.display())));
        }
    }
    Ok(())
}

fn check_readable(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

pub fn gen_binary(bits: u32, out: &Path, force: bool) -> Outcome {
    check_writable(out, force)?;
    let corpus = gen_binary_corpus(bits)?;
    write_token_stream(&corpus, out)?;
    println!("wrote {} tokens to {}", corpus.len(), out.display());
    Ok(())
}

pub fn train(raw: &RawConfig, force: bool, quiet: bool) -> Outcome {
    let run = RunConfig::from_raw(raw).map_err(Failure::Usage)?;
    if let CorpusSource::File(path) = &run.corpus {
        check_readable(path, "corpus")?;
    }
    if run.out_dir.exists() && !run.out_dir.is_dir() {
        return Err(usage(format!("{} is not a directory", run.out_dir.display())));
    }
    let out = |name: &str| run.out_dir.join(name);
    for name in [CHECKPOINT_FILE, COSTS_FILE, CONFIG_FILE] {
        if out(name).exists() && !force {
            return Err(usage(format!(
                "{} already exists; pass --force to overwrite",
                out(name).display()
            )));
        }
    }

    let corpus = match &run.corpus {
        CorpusSource::Binary(bits) => gen_binary_corpus(*bits)?,
        CorpusSource::File(path) => load_token_stream(path, run.model.vocab_size)?,
    };
    let mut trainer = Trainer::new(&run.model, &run.train, &corpus)?;
    std::fs::create_dir_all(&run.out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", run.out_dir.display())))?;
    std::fs::write(out(CONFIG_FILE), run.render())
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", out(CONFIG_FILE).display())))?;

    let n = run.train.n_batches;
    let every = (n / 20).max(1);
    let start = Instant::now();
    if !quiet {
        eprintln!(
            "training {} ({} parameters) on {} tokens of {}",
            run.model.sublayer1,
            trainer.weights.param_count(),
            corpus.len(),
            corpus.source()
        );
    }
    for _ in 0..n {
        match trainer.step() {
            Ok(cost) => {
                let b = trainer.batches();
                if !quiet && (b % every == 0 || b == n) {
                    eprintln!("batch {b}/{n} cost {cost:.5} ({:.1?})", start.elapsed());
                }
            }
            Err(e) => {
                trainer.log.write_csv(&out(COSTS_FILE))?;
                return Err(e.into());
            }
        }
    }
    save_checkpoint(&trainer.weights, &out(CHECKPOINT_FILE))?;
    trainer.log.write_csv(&out(COSTS_FILE))?;
    report_costs(&trainer.log);
    println!("outputs in {}", run.out_dir.display());
    Ok(())
}

fn report_costs(log: &CostLog) {
    let costs = log.costs();
    let Some(&last) = costs.last() else {
        println!("no batches trained");
        return;
    };
    let k = costs.len().min(100);
    let tail = costs[costs.len() - k..].iter().sum::<f64>() / k as f64;
    println!("final cost {last:.6} (perplexity {:.6})", perplexity(last));
    println!(
        "mean cost of last {k} batches {tail:.6} (perplexity {:.6})",
        perplexity(tail)
    );
}

pub fn stats(costs: &Path, window: usize, out: Option<&Path>, force: bool) -> Outcome {
    check_readable(costs, "cost log")?;
    if window == 0 {
        return Err(usage("window must be at least 1"));
    }
    if let Some(out) = out {
        check_writable(out, force)?;
    }
    let log = CostLog::read_csv(costs)?;
    let stats = window_stats(&log, window)?;
    println!("window_start,median,q1,q3,median_perplexity");
    for s in &stats {
        println!(
            "{},{},{},{},{}",
            s.window_start,
            s.median,
            s.q1,
            s.q3,
            perplexity(s.median)
        );
    }
    if let Some(out) = out {
        write_window_stats(&stats, out)?;
    }
    Ok(())
}

pub struct TraceArgs<'a> {
    pub checkpoint: &'a Path,
    pub tokens: Option<&'a str>,
    pub text: Option<&'a str>,
    pub row: Option<usize>,
    pub out: &'a Path,
    pub svg: Option<&'a Path>,
    pub force: bool,
}

fn parse_ids(list: &str) -> Result<Vec<usize>, Failure> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad token id {s:?}")))
        })
        .collect()
}

pub fn trace(args: &TraceArgs) -> Outcome {
    check_readable(args.checkpoint, "checkpoint")?;
    check_writable(args.out, args.force)?;
    if let Some(svg) = args.svg {
        check_writable(svg, args.force)?;
    }
    let tokens: Vec<usize> = match (args.tokens, args.text) {
        (Some(list), _) => parse_ids(list)?,
        (None, Some(text)) => binary_tokens(text)?.into_iter().map(|t| t as usize).collect(),
        (None, None) => return Err(usage("pass --tokens or --text")),
    };
    let weights = load_checkpoint(args.checkpoint)?;
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(usage("no tokens to trace"));
    }
    if tokens.len() > cfg.context_len {
        return Err(usage(format!(
            "{} tokens exceed the context length {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(usage(format!(
            "token {bad} is outside the vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if let Some(row) = args.row.filter(|&r| r >= tokens.len()) {
        return Err(usage(format!("row {row} is outside {} tokens", tokens.len())));
    }
    if args.svg.is_some() && cfg.dim != 2 {
        return Err(usage(format!(
            "SVG output needs a two-dimensional model, this one has dim {}",
            cfg.dim
        )));
    }
    let record = trace_trajectory(&weights, &tokens, args.row)?;
    emit_trajectory(&record, args.out, args.svg)?;
    println!("row {} through {} stages", record.row, record.stages.len());
    for (label, v) in &record.stages {
        let cells: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        println!("{label:>6} {}", cells.join(" "));
    }
    Ok(())
}

pub fn params(raw: &RawConfig) -> Outcome {
    let cfg = raw.model().map_err(Failure::Usage)?;
    let c = count_params(&cfg)?;
    println!("model            {}", cfg.sublayer1);
    println!("embedding        {}", c.embedding);
    println!("pos_embedding    {}", c.pos_embedding);
    println!("mixer per layer  {}", c.mixer);
    println!("ffn per layer    {}", c.ffn);
    println!("layers           {}", c.layers);
    println!("head             {}", c.head);
    println!("total            {}", c.total);
    Ok(())
}
