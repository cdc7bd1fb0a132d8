//! Subcommand bodies. Each returns `Ok(())` or a [`CliError`] that the
//! entry point maps to the documented exit codes.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use deepscale::checkpoint::{self, Checkpoint};
use deepscale::infer;
use deepscale::layers::Layout;
use deepscale::model::{DecoderVariant, Model, TokenBatch};
use deepscale::probes::{self, measure};
use deepscale::rng::Rng;
use deepscale::train::{self, metrics_csv, TrainConfig};
use deepscale::InitPolicy;

use crate::config::{ConfigError, RunConfig};

pub enum CliError {
    /// Exit code 2: the run description itself is wrong.
    Config(String),
    /// Exit code 3: the run failed while executing.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<deepscale::Error> for CliError {
    fn from(e: deepscale::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err("cannot create", out, e))?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| io_err("cannot create", &ckpt_dir, e))?;

    // effective settings, reloadable via --config
    probes::write_text(&out.join("run.cfg"), &cfg.echo)?;

    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    println!(
        "training {} ({} params) on {} for {} steps",
        cfg.model.decoder.name(),
        model.count_params(),
        cfg.train.task.kind.name(),
        cfg.train.steps
    );
    let outcome = train::train(&mut model, &cfg.train, Some(&ckpt_dir))?;
    probes::write_text(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    probes::write_text(
        &out.join("dynamics.csv"),
        &probes::dynamics_csv(&outcome.dynamics),
    )?;
    println!(
        "finished at step {} with best token accuracy {:.4}; wrote metrics.csv, dynamics.csv \
         and {} checkpoints under {}",
        outcome.final_step,
        outcome.best_acc,
        outcome.checkpoints.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.model.layout != Layout::PostNorm {
        return Err(CliError::Config(
            "analyze requires layout=post; the error-signal probes are defined on \
             post-norm sublayers"
                .into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| io_err("cannot create", out, e))?;

    // one seeded batch of roughly batch_tokens target tokens, uniform row
    // length so the residual-variance column is not padded
    let len = 32.min(cfg.model.max_len / 4).max(4);
    let rows = (cfg.train.batch_tokens / len).max(1);
    let mut rng = Rng::new(cfg.seed).derive_named("analyze");
    let vocab = cfg.model.src_vocab;
    let data: Vec<Vec<usize>> = (0..rows)
        .map(|_| (0..len).map(|_| 3 + rng.below(vocab - 3)).collect())
        .collect();
    let src = TokenBatch::new(&data)?;
    let gold = TokenBatch::new(&data)?;

    let alpha = match cfg.model.init {
        InitPolicy::DepthScaled { alpha } => alpha,
        _ => 1.0,
    };
    let mut ratio_rows = Vec::new();
    let mut norm_rows = Vec::new();
    for (label, init) in [
        ("glorot", InitPolicy::Glorot),
        ("ds", InitPolicy::DepthScaled { alpha }),
    ] {
        let mut mc = cfg.model.clone();
        mc.init = init;
        let model = Model::build(mc, cfg.seed)?;
        let m = measure(&model, &src, &gold, cfg.train.smoothing)?;
        println!(
            "{label}: loss {:.4}, decoder cross beta {:.3}",
            m.loss,
            m.report
                .cells
                .iter()
                .find(|c| c.kind.name() == "cross" || c.kind.name() == "merged")
                .map(|c| c.beta)
                .unwrap_or(f64::NAN)
        );
        for c in &m.report.cells {
            ratio_rows.push((label.to_string(), *c));
        }
        for n in &m.layer_norms {
            norm_rows.push((label.to_string(), *n));
        }
    }
    probes::write_text(&out.join("ratios.csv"), &probes::ratios_csv(&ratio_rows))?;
    probes::write_text(
        &out.join("gradnorms.csv"),
        &probes::gradnorms_csv(&norm_rows),
    )?;
    println!(
        "wrote ratios.csv ({} rows) and gradnorms.csv ({} rows) under {}",
        ratio_rows.len(),
        norm_rows.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_decode(cfg: &RunConfig, ckpt: &Path, input: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input).map_err(|e| io_err("cannot read", input, e))?;
    let mut seqs: Vec<Vec<usize>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| {
                CliError::Runtime(format!(
                    "{} line {}: `{tok}` is not a token id",
                    input.display(),
                    idx + 1
                ))
            })?;
            if id >= cfg.model.src_vocab {
                return Err(CliError::Runtime(format!(
                    "{} line {}: token id {id} exceeds source vocab {}",
                    input.display(),
                    idx + 1,
                    cfg.model.src_vocab
                )));
            }
            seq.push(id);
        }
        if seq.is_empty() {
            return Err(CliError::Runtime(format!(
                "{} line {}: empty sequence",
                input.display(),
                idx + 1
            )));
        }
        seqs.push(seq);
    }
    if seqs.is_empty() {
        return Ok(());
    }

    let loaded = checkpoint::load(ckpt)?;
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    model.set_params(loaded.tensors)?;

    let mut stdout = String::new();
    for seq in &seqs {
        let out = infer::beam_search(&model, seq, cfg.beam, cfg.len_penalty)?;
        let words: Vec<String> = out.iter().map(|t| t.to_string()).collect();
        stdout.push_str(&words.join(" "));
        stdout.push('\n');
    }
    print!("{stdout}");
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err("cannot create", out, e))?;
    let variants = [
        DecoderVariant::Baseline,
        DecoderVariant::Matt,
        DecoderVariant::MattSelf,
        DecoderVariant::AanOriginal,
    ];
    let models: Vec<Model> = variants
        .iter()
        .map(|&decoder| {
            let mut mc = cfg.model.clone();
            mc.decoder = decoder;
            Model::build(mc, cfg.seed)
        })
        .collect::<deepscale::Result<_>>()?;

    // decode throughput: shared batch, baseline anchors the speedup column
    let len = 64.min((cfg.model.max_len.saturating_sub(8)) / 2).max(4);
    let mut rng = Rng::new(cfg.seed).derive_named("bench");
    let data: Vec<Vec<usize>> = (0..8)
        .map(|_| {
            (0..len)
                .map(|_| 3 + rng.below(cfg.model.src_vocab - 3))
                .collect()
        })
        .collect();
    let src = TokenBatch::new(&data)?;
    let refs: Vec<&Model> = models.iter().collect();
    let rows = infer::bench_decode(&refs, &src, 3)?;
    probes::write_text(&out.join("bench.csv"), &infer::bench_csv(&rows))?;
    for r in &rows {
        println!(
            "decode {:<12} {:>8.0} tokens/s  ({:.2}x baseline)",
            r.variant, r.tokens_per_second, r.speedup_vs_baseline
        );
    }

    // per-step training time, small fixed budget per variant
    let mut train_csv = String::from("variant,layers,steps_per_second,speedup_vs_baseline\n");
    let mut baseline_sps = 0.0;
    for (model, &decoder) in models.iter().zip(&variants) {
        let mut tc = TrainConfig {
            steps: 5,
            checkpoint_interval: usize::MAX,
            ..cfg.train.clone()
        };
        tc.config_echo = String::new();
        let mut m = model.clone();
        let start = Instant::now();
        train::train(&mut m, &tc, None)?;
        let sps = tc.steps as f64 / start.elapsed().as_secs_f64();
        if decoder == DecoderVariant::Baseline {
            baseline_sps = sps;
        }
        println!("train  {:<12} {sps:>8.2} steps/s", decoder.name());
        train_csv.push_str(&format!(
            "{},{},{},{}\n",
            decoder.name(),
            cfg.model.layers,
            sps,
            sps / baseline_sps
        ));
    }
    probes::write_text(&out.join("train_bench.csv"), &train_csv)?;

    let mut params_csv = String::from("variant,total_params,dec_attention_params_per_layer\n");
    for (model, &decoder) in models.iter().zip(&variants) {
        params_csv.push_str(&format!(
            "{},{},{}\n",
            decoder.name(),
            model.count_params(),
            model.decoder_attention_params_per_layer()
        ));
    }
    probes::write_text(&out.join("params.csv"), &params_csv)?;
    println!(
        "wrote bench.csv, train_bench.csv, params.csv under {}",
        out.display()
    );
    Ok(())
}

pub fn cmd_avg(paths: &[std::path::PathBuf], output: &Path) -> Result<(), CliError> {
    let mut loaded: Vec<Checkpoint> = Vec::with_capacity(paths.len());
    for p in paths {
        loaded.push(checkpoint::load(p)?);
    }
    let step = loaded.iter().map(|c| c.step).max().unwrap_or(0);
    let echo = loaded
        .first()
        .map(|c| c.config_echo.clone())
        .unwrap_or_default();
    let avg = train::average_checkpoints(&loaded)?;
    checkpoint::save(
        output,
        &Checkpoint {
            step,
            config_echo: echo,
            tensors: avg.tensors,
            optimizer: None,
        },
    )?;
    println!(
        "averaged {} checkpoints into {}",
        paths.len(),
        output.display()
    );
    Ok(())
}
