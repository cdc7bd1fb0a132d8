//! Flat key=value run configuration shared by every subcommand.
//!
//! A run is described by a config file of `key = value` lines plus optional
//! command-line overrides (`--layers 12`), the override winning on conflict.
//! Every key is validated against the schema below; unknown keys and
//! malformed values are reported with the offending key name and exit the
//! process with code 2.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use clap::Args;
use deepscale::init::InitPolicy;
use deepscale::layers::Layout;
use deepscale::model::{DecoderVariant, DsScope, ModelConfig};
use deepscale::train::{SyntheticTask, TaskKind, TrainConfig};

/// Configuration problem; the caller maps it to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Every legal key. `layers` and `dim` are required, the rest default.
pub const KEYS: &[&str] = &[
    "layers",
    "dim",
    "ffn_dim",
    "heads",
    "vocab",
    "layout",
    "decoder",
    "init",
    "alpha",
    "sigma",
    "ds_scope",
    "dp_r",
    "dp_a",
    "aan_ffn_dim",
    "steps",
    "warmup",
    "batch_tokens",
    "smoothing",
    "clip_norm",
    "checkpoint_interval",
    "seed",
    "task",
    "min_len",
    "max_len",
    "beam",
    "len_penalty",
];

/// Command-line overrides, one flag per schema key. Values stay strings
/// here so file and flag inputs share a single validation path.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long = "layers", value_name = "N")]
    layers: Option<String>,
    #[arg(long = "dim", value_name = "N")]
    dim: Option<String>,
    #[arg(long = "ffn_dim", value_name = "N")]
    ffn_dim: Option<String>,
    #[arg(long = "heads", value_name = "N")]
    heads: Option<String>,
    #[arg(long = "vocab", value_name = "N")]
    vocab: Option<String>,
    #[arg(long = "layout", value_name = "post|pre")]
    layout: Option<String>,
    #[arg(long = "decoder", value_name = "baseline|matt|matt_self|aan")]
    decoder: Option<String>,
    #[arg(long = "init", value_name = "glorot|ds|fixed")]
    init: Option<String>,
    #[arg(long = "alpha", value_name = "X")]
    alpha: Option<String>,
    #[arg(long = "sigma", value_name = "X")]
    sigma: Option<String>,
    #[arg(long = "ds_scope", value_name = "both|enc|dec")]
    ds_scope: Option<String>,
    #[arg(long = "dp_r", value_name = "X")]
    dp_r: Option<String>,
    #[arg(long = "dp_a", value_name = "X")]
    dp_a: Option<String>,
    #[arg(long = "aan_ffn_dim", value_name = "N")]
    aan_ffn_dim: Option<String>,
    #[arg(long = "steps", value_name = "N")]
    steps: Option<String>,
    #[arg(long = "warmup", value_name = "N")]
    warmup: Option<String>,
    #[arg(long = "batch_tokens", value_name = "N")]
    batch_tokens: Option<String>,
    #[arg(long = "smoothing", value_name = "X")]
    smoothing: Option<String>,
    #[arg(long = "clip_norm", value_name = "X")]
    clip_norm: Option<String>,
    #[arg(long = "checkpoint_interval", value_name = "N")]
    checkpoint_interval: Option<String>,
    #[arg(long = "seed", value_name = "N")]
    seed: Option<String>,
    #[arg(long = "task", value_name = "copy|reverse|sort")]
    task: Option<String>,
    #[arg(long = "min_len", value_name = "N")]
    min_len: Option<String>,
    #[arg(long = "max_len", value_name = "N")]
    max_len: Option<String>,
    #[arg(long = "beam", value_name = "N")]
    beam: Option<String>,
    #[arg(long = "len_penalty", value_name = "X")]
    len_penalty: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let fields: [(&'static str, &Option<String>); 26] = [
            ("layers", &self.layers),
            ("dim", &self.dim),
            ("ffn_dim", &self.ffn_dim),
            ("heads", &self.heads),
            ("vocab", &self.vocab),
            ("layout", &self.layout),
            ("decoder", &self.decoder),
            ("init", &self.init),
            ("alpha", &self.alpha),
            ("sigma", &self.sigma),
            ("ds_scope", &self.ds_scope),
            ("dp_r", &self.dp_r),
            ("dp_a", &self.dp_a),
            ("aan_ffn_dim", &self.aan_ffn_dim),
            ("steps", &self.steps),
            ("warmup", &self.warmup),
            ("batch_tokens", &self.batch_tokens),
            ("smoothing", &self.smoothing),
            ("clip_norm", &self.clip_norm),
            ("checkpoint_interval", &self.checkpoint_interval),
            ("seed", &self.seed),
            ("task", &self.task),
            ("min_len", &self.min_len),
            ("max_len", &self.max_len),
            ("beam", &self.beam),
            ("len_penalty", &self.len_penalty),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v.clone())))
            .collect()
    }
}

/// Fully validated run description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub beam: usize,
    pub len_penalty: f64,
    /// Canonical `key=value` echo of every explicit setting, stored in
    /// checkpoints so a run can be reconstructed from its artifacts.
    pub echo: String,
}

pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!(
                    "{} line {}: expected key=value, got `{line}`",
                    path.display(),
                    idx + 1
                ));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for (k, v) in overrides.pairs() {
        map.insert(k.to_string(), v);
    }
    build(&map)
}

fn build(map: &BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
    for key in map.keys() {
        if !KEYS.contains(&key.as_str()) {
            return err(format!("unknown key `{key}`"));
        }
    }
    for key in ["layers", "dim"] {
        if !map.contains_key(key) {
            return err(format!("missing required key `{key}`"));
        }
    }

    let layers = get_usize(map, "layers")?.unwrap();
    let dim = get_usize(map, "dim")?.unwrap();
    let vocab = get_usize(map, "vocab")?.unwrap_or(64);

    let layout = match map.get("layout").map(String::as_str) {
        None | Some("post") => Layout::PostNorm,
        Some("pre") => Layout::PreNorm,
        Some(v) => return err(format!("key layout: expected post|pre, got `{v}`")),
    };
    let decoder = match map.get("decoder").map(String::as_str) {
        None | Some("baseline") => DecoderVariant::Baseline,
        Some("matt") => DecoderVariant::Matt,
        Some("matt_self") => DecoderVariant::MattSelf,
        Some("aan") => DecoderVariant::AanOriginal,
        Some(v) => {
            return err(format!(
                "key decoder: expected baseline|matt|matt_self|aan, got `{v}`"
            ))
        }
    };
    let alpha = get_f64(map, "alpha")?.unwrap_or(1.0);
    let sigma = get_f64(map, "sigma")?.unwrap_or(0.02);
    let init = match map.get("init").map(String::as_str) {
        None | Some("glorot") => InitPolicy::Glorot,
        Some("ds") => InitPolicy::DepthScaled { alpha },
        Some("fixed") => InitPolicy::FixedSigma { sigma },
        Some(v) => return err(format!("key init: expected glorot|ds|fixed, got `{v}`")),
    };
    let ds_scope = match map.get("ds_scope").map(String::as_str) {
        None | Some("both") => DsScope::Both,
        Some("enc") => DsScope::EncOnly,
        Some("dec") => DsScope::DecOnly,
        Some(v) => return err(format!("key ds_scope: expected both|enc|dec, got `{v}`")),
    };
    let kind = match map.get("task").map(String::as_str) {
        None | Some("copy") => TaskKind::Copy,
        Some("reverse") => TaskKind::Reverse,
        Some("sort") => TaskKind::Sort,
        Some(v) => return err(format!("key task: expected copy|reverse|sort, got `{v}`")),
    };

    let mut model = ModelConfig::desk_default();
    model.layers = layers;
    model.dim = dim;
    model.ffn_dim = get_usize(map, "ffn_dim")?.unwrap_or(4 * dim);
    model.heads = get_usize(map, "heads")?.unwrap_or(4);
    model.src_vocab = vocab;
    model.tgt_vocab = vocab;
    model.layout = layout;
    model.decoder = decoder;
    model.init = init;
    model.ds_scope = ds_scope;
    model.dp_r = get_f64(map, "dp_r")?.unwrap_or(model.dp_r);
    model.dp_a = get_f64(map, "dp_a")?.unwrap_or(model.dp_a);
    model.aan_ffn_dim = get_usize(map, "aan_ffn_dim")?.unwrap_or((dim / 8).max(1));

    let task = SyntheticTask {
        kind,
        vocab,
        min_len: get_usize(map, "min_len")?.unwrap_or(3),
        max_len: get_usize(map, "max_len")?.unwrap_or(8),
    };
    let mut train = TrainConfig::desk_default(task);
    train.steps = get_usize(map, "steps")?.unwrap_or(train.steps);
    train.warmup = get_usize(map, "warmup")?.unwrap_or(train.warmup);
    train.batch_tokens = get_usize(map, "batch_tokens")?.unwrap_or(train.batch_tokens);
    train.smoothing = get_f64(map, "smoothing")?.unwrap_or(train.smoothing);
    train.clip_norm = get_f64(map, "clip_norm")?;
    train.checkpoint_interval =
        get_usize(map, "checkpoint_interval")?.unwrap_or(train.checkpoint_interval);
    let seed = get_u64(map, "seed")?.unwrap_or(1);
    train.seed = seed;

    let mut echo = String::new();
    for (k, v) in map {
        echo.push_str(k);
        echo.push('=');
        echo.push_str(v);
        echo.push('\n');
    }
    train.config_echo = echo.clone();

    let beam = get_usize(map, "beam")?.unwrap_or(4);
    if beam == 0 {
        return err("key beam: must be >= 1");
    }
    let len_penalty = get_f64(map, "len_penalty")?.unwrap_or(0.6);
    if !len_penalty.is_finite() || len_penalty < 0.0 {
        return err(format!(
            "key len_penalty: must be a finite value >= 0, got {len_penalty}"
        ));
    }

    // core validation catches cross-field problems (e.g. heads not dividing
    // dim); those are config mistakes too
    model.validate().map_err(|e| ConfigError(e.to_string()))?;
    train.validate().map_err(|e| ConfigError(e.to_string()))?;

    Ok(RunConfig {
        model,
        train,
        seed,
        beam,
        len_penalty,
        echo,
    })
}

fn get_usize(map: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>, ConfigError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<usize>().map(Some).map_err(|_| {
            ConfigError(format!(
                "key {key}: expected a non-negative integer, got `{v}`"
            ))
        }),
    }
}

fn get_u64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<u64>, ConfigError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<u64>().map(Some).map_err(|_| {
            ConfigError(format!(
                "key {key}: expected a non-negative integer, got `{v}`"
            ))
        }),
    }
}

fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, ConfigError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| ConfigError(format!("key {key}: expected a number, got `{v}`"))),
    }
}
