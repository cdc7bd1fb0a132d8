//! Encoder/decoder assembly.
//!
//! A model is a named parameter map plus a config; forward passes bind the
//! parameters onto a tape and record the full computation, so training,
//! probing, and gradient checks all run off the same graph definition.
//!
//! Parameter names follow `stack.layer.sublayer.matrix` (1-based layers),
//! e.g. `dec.3.merged.wo`. The map is ordered, which fixes the canonical
//! parameter order used by checkpoints and the optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::init::{InitPolicy, InitRecord};
use crate::layers::{
    self, AanNodes, AttnNodes, FfnNodes, Layout, LnNodes, MergedBranch, MergedNodes, Probe,
    MASK_VALUE,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First token id usable as task payload.
pub const PAYLOAD_START: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderVariant {
    Baseline,
    Matt,
    MattSelf,
    AanOriginal,
}

impl DecoderVariant {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "baseline",
            DecoderVariant::Matt => "matt",
            DecoderVariant::MattSelf => "matt_self",
            DecoderVariant::AanOriginal => "aan_original",
        }
    }

    /// Sublayers per decoder layer: merged variants fold self and cross
    /// attention into one block.
    pub fn sublayers(&self) -> usize {
        match self {
            DecoderVariant::Baseline => 3,
            _ => 2,
        }
    }
}

/// Which stacks receive the depth discount when the policy is depth-scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsScope {
    Both,
    EncOnly,
    DecOnly,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub layout: Layout,
    pub decoder: DecoderVariant,
    pub init: InitPolicy,
    pub ds_scope: DsScope,
    pub dp_r: f64,
    pub dp_a: f64,
    pub share_target_softmax: bool,
    /// Width of the gated transform inside the original average network.
    pub aan_ffn_dim: usize,
    pub ln_eps: f64,
    /// Positional table length; sequences longer than this are rejected.
    pub max_len: usize,
    pub use_positional: bool,
}

impl ModelConfig {
    /// Desk-scale defaults sized so 12-layer runs finish in minutes on one
    /// CPU core.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 6,
            dim: 64,
            ffn_dim: 256,
            heads: 4,
            src_vocab: 64,
            tgt_vocab: 64,
            layout: Layout::PostNorm,
            decoder: DecoderVariant::Baseline,
            init: InitPolicy::Glorot,
            ds_scope: DsScope::Both,
            dp_r: 0.1,
            dp_a: 0.1,
            share_target_softmax: true,
            aan_ffn_dim: 8,
            ln_eps: 1e-6,
            max_len: 512,
            use_positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidParameter("layers must be >= 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "dim must be >= 2, got {}",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.aan_ffn_dim == 0 {
            return Err(Error::InvalidParameter(
                "ffn_dim and aan_ffn_dim must be >= 1".into(),
            ));
        }
        for (name, v) in [("dp_r", self.dp_r), ("dp_a", self.dp_a)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.src_vocab <= PAYLOAD_START || self.tgt_vocab <= PAYLOAD_START {
            return Err(Error::InvalidParameter(format!(
                "vocab sizes must exceed {PAYLOAD_START} (pad/bos/eos + payload), got {}/{}",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ln_eps must be positive, got {}",
                self.ln_eps
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        // policy parameters get range-checked on first sample; do it eagerly
        match self.init {
            InitPolicy::DepthScaled { alpha } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "alpha must lie in (0, 1], got {alpha}"
                    )));
                }
            }
            InitPolicy::FixedSigma { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "sigma must be positive, got {sigma}"
                    )));
                }
            }
            InitPolicy::Glorot => {}
        }
        Ok(())
    }
}

/// Named parameter store. Tensors and init metadata share the same keys.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    pub tensors: BTreeMap<String, Tensor>,
    pub records: BTreeMap<String, InitRecord>,
}

impl Parameters {
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stack {
    Enc,
    Dec,
}

impl Stack {
    pub fn name(&self) -> &'static str {
        match self {
            Stack::Enc => "enc",
            Stack::Dec => "dec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SublayerKind {
    SelfAtt,
    Cross,
    Ffn,
    Merged,
}

impl SublayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SublayerKind::SelfAtt => "self",
            SublayerKind::Cross => "cross",
            SublayerKind::Ffn => "ffn",
            SublayerKind::Merged => "merged",
        }
    }
}

/// One probed sublayer: where it sits plus the tape nodes of its z, r, o.
#[derive(Debug, Clone, Copy)]
pub struct ProbePoint {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
    pub probe: Probe,
}

/// Parameter map bound onto a tape for one forward pass.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    fn ln(&self, prefix: &str) -> LnNodes {
        LnNodes {
            g: self.id(&format!("{prefix}.g")),
            b: self.id(&format!("{prefix}.b")),
        }
    }

    fn attn(&self, prefix: &str) -> AttnNodes {
        AttnNodes {
            wq: self.id(&format!("{prefix}.wq")),
            wk: self.id(&format!("{prefix}.wk")),
            wv: self.id(&format!("{prefix}.wv")),
            wo: self.id(&format!("{prefix}.wo")),
        }
    }

    fn ffn(&self, prefix: &str) -> FfnNodes {
        FfnNodes {
            w1: self.id(&format!("{prefix}.w1")),
            b1: self.id(&format!("{prefix}.b1")),
            w2: self.id(&format!("{prefix}.w2")),
            b2: self.id(&format!("{prefix}.b2")),
        }
    }
}

/// A padded batch of id sequences: row-major [batch, len] with PAD fill.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<TokenBatch> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap();
        if len == 0 {
            return Err(Error::Contract("batch of empty sequences".into()));
        }
        let batch = seqs.len();
        let mut ids = vec![PAD; batch * len];
        let mut lengths = Vec::with_capacity(batch);
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(TokenBatch {
            ids,
            batch,
            len,
            lengths,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }

    /// True at padded positions; aligned with `ids`.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.ids.len()];
        for b in 0..self.batch {
            for t in self.lengths[b]..self.len {
                mask[b * self.len + t] = true;
            }
        }
        mask
    }

    /// Count of non-pad tokens.
    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Teacher-forcing input: gold shifted right one step behind a BOS.
pub fn teacher_input(gold: &TokenBatch) -> TokenBatch {
    let mut ids = vec![PAD; gold.ids.len()];
    for b in 0..gold.batch {
        let row = b * gold.len;
        ids[row] = BOS;
        for t in 1..gold.lengths[b] {
            ids[row + t] = gold.ids[row + t - 1];
        }
    }
    TokenBatch {
        ids,
        batch: gold.batch,
        len: gold.len,
        lengths: gold.lengths.clone(),
    }
}

/// Additive attention mask [batch, heads, m, n]: blocks j > i when causal,
/// and key positions at or beyond the per-row length when lengths are given.
pub fn attn_mask(
    batch: usize,
    heads: usize,
    m: usize,
    n: usize,
    causal: bool,
    key_lengths: Option<&[usize]>,
) -> Tensor {
    let mut data = vec![0.0; batch * heads * m * n];
    for b in 0..batch {
        let limit = key_lengths.map(|l| l[b]).unwrap_or(n);
        for h in 0..heads {
            let base = ((b * heads) + h) * m * n;
            for i in 0..m {
                for j in 0..n {
                    if (causal && j > i) || j >= limit {
                        data[base + i * n + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![batch, heads, m, n],
        data,
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

/// (name, rows, cols, depth, stack) for every sampled matrix in the model.
fn matrix_plan(cfg: &ModelConfig) -> Vec<(String, usize, usize, usize, Option<Stack>)> {
    let d = cfg.dim;
    let mut plan = Vec::new();
    plan.push(("src_embed".to_string(), cfg.src_vocab, d, 1, None));
    plan.push(("tgt_embed".to_string(), cfg.tgt_vocab, d, 1, None));
    if !cfg.share_target_softmax {
        plan.push(("out_proj".to_string(), cfg.tgt_vocab, d, 1, None));
    }
    for l in 1..=cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            plan.push((format!("enc.{l}.self.{w}"), d, d, l, Some(Stack::Enc)));
        }
        plan.push((
            format!("enc.{l}.ffn.w1"),
            d,
            cfg.ffn_dim,
            l,
            Some(Stack::Enc),
        ));
        plan.push((
            format!("enc.{l}.ffn.w2"),
            cfg.ffn_dim,
            d,
            l,
            Some(Stack::Enc),
        ));
    }
    for l in 1..=cfg.layers {
        match cfg.decoder {
            DecoderVariant::Baseline => {
                for w in ["wq", "wk", "wv", "wo"] {
                    plan.push((format!("dec.{l}.self.{w}"), d, d, l, Some(Stack::Dec)));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    plan.push((format!("dec.{l}.cross.{w}"), d, d, l, Some(Stack::Dec)));
                }
            }
            DecoderVariant::Matt => {
                plan.push((format!("dec.{l}.merged.saan_wv"), d, d, l, Some(Stack::Dec)));
                for w in ["wq", "wk", "wv", "wo"] {
                    plan.push((format!("dec.{l}.merged.{w}"), d, d, l, Some(Stack::Dec)));
                }
            }
            DecoderVariant::MattSelf => {
                for w in ["self_wq", "self_wk", "self_wv"] {
                    plan.push((format!("dec.{l}.merged.{w}"), d, d, l, Some(Stack::Dec)));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    plan.push((format!("dec.{l}.merged.{w}"), d, d, l, Some(Stack::Dec)));
                }
            }
            DecoderVariant::AanOriginal => {
                plan.push((
                    format!("dec.{l}.merged.aan_w1"),
                    d,
                    cfg.aan_ffn_dim,
                    l,
                    Some(Stack::Dec),
                ));
                plan.push((
                    format!("dec.{l}.merged.aan_w2"),
                    cfg.aan_ffn_dim,
                    d,
                    l,
                    Some(Stack::Dec),
                ));
                plan.push((
                    format!("dec.{l}.merged.aan_wi"),
                    2 * d,
                    d,
                    l,
                    Some(Stack::Dec),
                ));
                plan.push((
                    format!("dec.{l}.merged.aan_wf"),
                    2 * d,
                    d,
                    l,
                    Some(Stack::Dec),
                ));
                for w in ["wq", "wk", "wv", "wo"] {
                    plan.push((format!("dec.{l}.merged.{w}"), d, d, l, Some(Stack::Dec)));
                }
            }
        }
        plan.push((
            format!("dec.{l}.ffn.w1"),
            d,
            cfg.ffn_dim,
            l,
            Some(Stack::Dec),
        ));
        plan.push((
            format!("dec.{l}.ffn.w2"),
            cfg.ffn_dim,
            d,
            l,
            Some(Stack::Dec),
        ));
    }
    plan
}

/// LN parameter prefixes plus zero-bias names, per layer.
fn aux_plan(cfg: &ModelConfig) -> (Vec<String>, Vec<(String, usize)>) {
    let d = cfg.dim;
    let mut ln_prefixes = Vec::new();
    let mut biases = Vec::new();
    for l in 1..=cfg.layers {
        ln_prefixes.push(format!("enc.{l}.self_ln"));
        ln_prefixes.push(format!("enc.{l}.ffn_ln"));
        biases.push((format!("enc.{l}.ffn.b1"), cfg.ffn_dim));
        biases.push((format!("enc.{l}.ffn.b2"), d));
    }
    for l in 1..=cfg.layers {
        match cfg.decoder {
            DecoderVariant::Baseline => {
                ln_prefixes.push(format!("dec.{l}.self_ln"));
                ln_prefixes.push(format!("dec.{l}.cross_ln"));
            }
            _ => {
                ln_prefixes.push(format!("dec.{l}.merged_ln"));
            }
        }
        if cfg.decoder == DecoderVariant::AanOriginal {
            biases.push((format!("dec.{l}.merged.aan_b1"), cfg.aan_ffn_dim));
            biases.push((format!("dec.{l}.merged.aan_b2"), d));
            biases.push((format!("dec.{l}.merged.aan_bi"), d));
            biases.push((format!("dec.{l}.merged.aan_bf"), d));
        }
        ln_prefixes.push(format!("dec.{l}.ffn_ln"));
        biases.push((format!("dec.{l}.ffn.b1"), cfg.ffn_dim));
        biases.push((format!("dec.{l}.ffn.b2"), d));
    }
    if cfg.layout == Layout::PreNorm {
        ln_prefixes.push("enc.final_ln".to_string());
        ln_prefixes.push("dec.final_ln".to_string());
    }
    (ln_prefixes, biases)
}

impl Model {
    /// Sample all parameters. Each matrix draws from its own named substream,
    /// so values do not depend on construction order. Weights inside layer l
    /// use depth l (1-based within the stack) when the policy and scope say
    /// so; embeddings and the output projection are never depth-discounted.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut params = Parameters::default();
        for (name, rows, cols, depth, stack) in matrix_plan(&config) {
            let scoped = match (stack, config.ds_scope) {
                (None, _) => false,
                (_, DsScope::Both) => true,
                (Some(Stack::Enc), DsScope::EncOnly) => true,
                (Some(Stack::Dec), DsScope::DecOnly) => true,
                _ => false,
            };
            let policy = match config.init {
                InitPolicy::DepthScaled { .. } if stack.is_some() && !scoped => InitPolicy::Glorot,
                p => p,
            };
            let eff_depth = if stack.is_some() { depth } else { 1 };
            let mut rng = root.derive_named(&name);
            let (tensor, record) = policy.sample(rows, cols, eff_depth, &mut rng)?;
            params.records.insert(name.clone(), record);
            params.tensors.insert(name, tensor);
        }
        let (ln_prefixes, biases) = aux_plan(&config);
        let d = config.dim;
        for prefix in ln_prefixes {
            params
                .tensors
                .insert(format!("{prefix}.g"), Tensor::new(vec![d], vec![1.0; d])?);
            params
                .tensors
                .insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
        }
        for (name, len) in biases {
            params.tensors.insert(name, Tensor::zeros(vec![len]));
        }
        Ok(Model { config, params })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Replace the parameter values with checkpoint tensors. The name set
    /// and every shape must match this model's plan exactly.
    pub fn set_params(&mut self, tensors: BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                self.params.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &tensors {
            match self.params.tensors.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint tensor {name} not in model plan"
                    )))
                }
                Some(own) if own.shape != t.shape => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                        own.shape, t.shape
                    )))
                }
                Some(_) => {}
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }

    /// Put every parameter on the tape; the returned map drives the forward
    /// builders and, after backward, gradient extraction by name.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.params.tensors {
            ids.insert(name.clone(), tape.param(tensor.clone()));
        }
        Bound { ids }
    }

    /// Gradients per parameter name after a backward pass; parameters the
    /// loss never touched get zeros.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in bound.ids() {
            let data = match tape.grad(*id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.params.tensors[name].numel()],
            };
            out.insert(
                name.clone(),
                Tensor {
                    shape: self.params.tensors[name].shape.clone(),
                    data,
                },
            );
        }
        out
    }

    fn embed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: &str,
        batch: &TokenBatch,
    ) -> Result<NodeId> {
        if batch.len > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        let d = self.config.dim;
        let table_id = bound.id(table);
        let flat = tape.gather(table_id, &batch.ids)?;
        let shaped = tape.reshape(flat, vec![batch.batch, batch.len, d])?;
        let scaled = tape.scale(shaped, (d as f64).sqrt());
        if !self.config.use_positional {
            return Ok(scaled);
        }
        let pe = layers::positional_encoding(batch.len, d);
        let pe_id = tape.constant(pe);
        tape.add_broadcast(scaled, pe_id)
    }

    /// Encoder stack: embedding+positions, then `layers`x (self-attention,
    /// FFN) in the configured layout. Returns the stack output and any
    /// post-norm probe points.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &TokenBatch,
    ) -> Result<(NodeId, Vec<ProbePoint>)> {
        let cfg = &self.config;
        let mut probes = Vec::new();
        let mut h = self.embed(tape, bound, "src_embed", src)?;
        let mask = tape.constant(attn_mask(
            src.batch,
            cfg.heads,
            src.len,
            src.len,
            false,
            Some(&src.lengths),
        ));
        for l in 1..=cfg.layers {
            let attn = bound.attn(&format!("enc.{l}.self"));
            let ln = bound.ln(&format!("enc.{l}.self_ln"));
            let (out, probe) =
                layers::sublayer(tape, cfg.layout, h, &ln, cfg.ln_eps, cfg.dp_r, |tp, z| {
                    layers::multi_head_attention(tp, z, z, &attn, cfg.heads, Some(mask), cfg.dp_a)
                })?;
            if let Some(p) = probe {
                probes.push(ProbePoint {
                    stack: Stack::Enc,
                    layer: l,
                    kind: SublayerKind::SelfAtt,
                    probe: p,
                });
            }
            let fnodes = bound.ffn(&format!("enc.{l}.ffn"));
            let ln = bound.ln(&format!("enc.{l}.ffn_ln"));
            let (out2, probe) =
                layers::sublayer(tape, cfg.layout, out, &ln, cfg.ln_eps, cfg.dp_r, |tp, z| {
                    layers::ffn(tp, z, &fnodes)
                })?;
            if let Some(p) = probe {
                probes.push(ProbePoint {
                    stack: Stack::Enc,
                    layer: l,
                    kind: SublayerKind::Ffn,
                    probe: p,
                });
            }
            h = out2;
        }
        if cfg.layout == Layout::PreNorm {
            let ln = bound.ln("enc.final_ln");
            h = layers::layer_norm(tape, h, &ln, cfg.ln_eps)?;
        }
        Ok((h, probes))
    }

    /// Teacher-forced decoder pass over a full target prefix. `dec_input`
    /// is the shifted target (BOS first); returns logits [batch, m, V] and
    /// post-norm probe points.
    pub fn decode_train(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        dec_input: &TokenBatch,
        enc_out: NodeId,
        src_lengths: &[usize],
    ) -> Result<(NodeId, Vec<ProbePoint>)> {
        let cfg = &self.config;
        let mut probes = Vec::new();
        let m = dec_input.len;
        let n = tape.shape(enc_out)[1];
        let mut s = self.embed(tape, bound, "tgt_embed", dec_input)?;
        let self_mask = tape.constant(attn_mask(dec_input.batch, cfg.heads, m, m, true, None));
        let cross_mask = tape.constant(attn_mask(
            dec_input.batch,
            cfg.heads,
            m,
            n,
            false,
            Some(src_lengths),
        ));
        let avg_mask = if cfg.decoder == DecoderVariant::Baseline {
            None
        } else {
            Some(tape.constant(layers::average_mask(m)?))
        };

        for l in 1..=cfg.layers {
            match cfg.decoder {
                DecoderVariant::Baseline => {
                    let attn = bound.attn(&format!("dec.{l}.self"));
                    let ln = bound.ln(&format!("dec.{l}.self_ln"));
                    let (out, probe) = layers::sublayer(
                        tape,
                        cfg.layout,
                        s,
                        &ln,
                        cfg.ln_eps,
                        cfg.dp_r,
                        |tp, z| {
                            layers::multi_head_attention(
                                tp,
                                z,
                                z,
                                &attn,
                                cfg.heads,
                                Some(self_mask),
                                cfg.dp_a,
                            )
                        },
                    )?;
                    if let Some(p) = probe {
                        probes.push(ProbePoint {
                            stack: Stack::Dec,
                            layer: l,
                            kind: SublayerKind::SelfAtt,
                            probe: p,
                        });
                    }
                    let attn = bound.attn(&format!("dec.{l}.cross"));
                    let ln = bound.ln(&format!("dec.{l}.cross_ln"));
                    let (out2, probe) = layers::sublayer(
                        tape,
                        cfg.layout,
                        out,
                        &ln,
                        cfg.ln_eps,
                        cfg.dp_r,
                        |tp, z| {
                            layers::multi_head_attention(
                                tp,
                                z,
                                enc_out,
                                &attn,
                                cfg.heads,
                                Some(cross_mask),
                                cfg.dp_a,
                            )
                        },
                    )?;
                    if let Some(p) = probe {
                        probes.push(ProbePoint {
                            stack: Stack::Dec,
                            layer: l,
                            kind: SublayerKind::Cross,
                            probe: p,
                        });
                    }
                    s = out2;
                }
                _ => {
                    let prefix = format!("dec.{l}.merged");
                    let branch = match cfg.decoder {
                        DecoderVariant::Matt => MergedBranch::Saan {
                            wv: bound.id(&format!("{prefix}.saan_wv")),
                        },
                        DecoderVariant::MattSelf => MergedBranch::SelfAttn {
                            wq: bound.id(&format!("{prefix}.self_wq")),
                            wk: bound.id(&format!("{prefix}.self_wk")),
                            wv: bound.id(&format!("{prefix}.self_wv")),
                        },
                        DecoderVariant::AanOriginal => MergedBranch::Aan(AanNodes {
                            w1: bound.id(&format!("{prefix}.aan_w1")),
                            b1: bound.id(&format!("{prefix}.aan_b1")),
                            w2: bound.id(&format!("{prefix}.aan_w2")),
                            b2: bound.id(&format!("{prefix}.aan_b2")),
                            wi: bound.id(&format!("{prefix}.aan_wi")),
                            bi: bound.id(&format!("{prefix}.aan_bi")),
                            wf: bound.id(&format!("{prefix}.aan_wf")),
                            bf: bound.id(&format!("{prefix}.aan_bf")),
                        }),
                        DecoderVariant::Baseline => unreachable!(),
                    };
                    let nodes = MergedNodes {
                        branch,
                        cross_wq: bound.id(&format!("{prefix}.wq")),
                        cross_wk: bound.id(&format!("{prefix}.wk")),
                        cross_wv: bound.id(&format!("{prefix}.wv")),
                        wo: bound.id(&format!("{prefix}.wo")),
                    };
                    let ln = bound.ln(&format!("dec.{l}.merged_ln"));
                    let (out, probe) = layers::sublayer(
                        tape,
                        cfg.layout,
                        s,
                        &ln,
                        cfg.ln_eps,
                        cfg.dp_r,
                        |tp, z| {
                            layers::merged_attention(
                                tp,
                                z,
                                enc_out,
                                &nodes,
                                cfg.heads,
                                Some(self_mask),
                                Some(cross_mask),
                                avg_mask.unwrap(),
                                cfg.dp_a,
                            )
                        },
                    )?;
                    if let Some(p) = probe {
                        probes.push(ProbePoint {
                            stack: Stack::Dec,
                            layer: l,
                            kind: SublayerKind::Merged,
                            probe: p,
                        });
                    }
                    s = out;
                }
            }
            let fnodes = bound.ffn(&format!("dec.{l}.ffn"));
            let ln = bound.ln(&format!("dec.{l}.ffn_ln"));
            let (out, probe) =
                layers::sublayer(tape, cfg.layout, s, &ln, cfg.ln_eps, cfg.dp_r, |tp, z| {
                    layers::ffn(tp, z, &fnodes)
                })?;
            if let Some(p) = probe {
                probes.push(ProbePoint {
                    stack: Stack::Dec,
                    layer: l,
                    kind: SublayerKind::Ffn,
                    probe: p,
                });
            }
            s = out;
        }
        if cfg.layout == Layout::PreNorm {
            let ln = bound.ln("dec.final_ln");
            s = layers::layer_norm(tape, s, &ln, cfg.ln_eps)?;
        }
        let proj = if cfg.share_target_softmax {
            bound.id("tgt_embed")
        } else {
            bound.id("out_proj")
        };
        let logits = tape.matmul_nt(s, proj)?;
        Ok((logits, probes))
    }

    /// Analytic multiply-accumulate count for one incremental decode step at
    /// position t (1-based) with source length n: projections plus attention
    /// arithmetic plus the FFN, summed over decoder layers, plus the final
    /// vocabulary projection.
    pub fn decoder_step_macs(&self, t: usize, n: usize) -> u64 {
        let d = self.config.dim as u64;
        let dff = self.config.ffn_dim as u64;
        let k = self.config.aan_ffn_dim as u64;
        let t = t as u64;
        let n = n as u64;
        let ffn = 2 * d * dff;
        let cross = d * d + 2 * n * d; // q projection + scores + context
        let per_layer = match self.config.decoder {
            // self q,k,v,o + growing-window attention + cross q,k,v..o
            DecoderVariant::Baseline => 4 * d * d + 2 * t * d + cross + d * d + ffn,
            // saan W_v + running-mean update + cross + shared W_o
            DecoderVariant::Matt => d * d + 2 * d + cross + d * d + ffn,
            // self q,k,v + growing window + cross + shared W_o
            DecoderVariant::MattSelf => 3 * d * d + 2 * t * d + cross + d * d + ffn,
            // running sum + inner FFN + two [2d,d] gates + cross + shared W_o
            DecoderVariant::AanOriginal => 2 * d + 2 * d * k + 4 * d * d + cross + d * d + ffn,
        };
        self.config.layers as u64 * per_layer + d * self.config.tgt_vocab as u64
    }

    /// Parameters of the attention sublayers in one decoder layer (weight
    /// matrices only; biases and LN params excluded).
    pub fn decoder_attention_params_per_layer(&self) -> usize {
        self.params
            .tensors
            .iter()
            .filter(|(name, t)| {
                t.ndim() == 2
                    && (name.starts_with("dec.1.self.")
                        || name.starts_with("dec.1.cross.")
                        || name.starts_with("dec.1.merged."))
            })
            .map(|(_, t)| t.numel())
            .sum()
    }
}
