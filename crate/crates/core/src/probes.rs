//! Gradient-flow instrumentation.
//!
//! Post-norm sublayers expose three activations: the block input z, the
//! residual sum r = z + f(z), and the normalized output o = LN(r). Reading
//! the backward signal at each gives the norm ratios
//!
//!   beta_ln = |d_r| / |d_o|   (what LN does to the error signal)
//!   beta_rc = |d_z| / |d_r|   (what the residual + sublayer body do)
//!   beta    = |d_z| / |d_o|   (net effect of the whole block)
//!
//! Values near 1 mean the block preserves gradient norm. Var(r) is the
//! population variance of the residual-sum entries; large values are what
//! drive LN's shrinking effect. Ratios are measured on one forward/backward
//! of a seeded batch with dropout disabled.
//!
//! Pre-norm stacks have no LN-after-residual, so the ratios are undefined
//! there and measurement is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Layout, Probe};
use crate::model::{teacher_input, Model, Stack, SublayerKind, TokenBatch};
use crate::rng::Rng;
use crate::tape::{Mode, Tape};
use crate::tensor::{l2_norm, population_variance};

/// Ratio statistics of one probed sublayer.
#[derive(Debug, Clone, Copy)]
pub struct ProbeRecord {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
    pub beta_ln: f64,
    pub beta_rc: f64,
    pub beta: f64,
    pub var_r: f64,
}

/// Per-(stack, sublayer-kind) averages over layers.
#[derive(Debug, Clone, Copy)]
pub struct CellStat {
    pub stack: Stack,
    pub kind: SublayerKind,
    pub beta_ln: f64,
    pub beta_rc: f64,
    pub beta: f64,
    pub var_r: f64,
}

#[derive(Debug, Clone)]
pub struct RatioReport {
    pub records: Vec<ProbeRecord>,
    pub cells: Vec<CellStat>,
}

/// L2 norm of all parameter gradients belonging to one layer of one stack.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub stack: Stack,
    pub layer: usize,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct Measurement {
    pub report: RatioReport,
    pub layer_norms: Vec<LayerNorm>,
    pub loss: f64,
}

/// The two norm ratios and their product from the three signal norms.
pub fn betas(norm_z: f64, norm_r: f64, norm_o: f64) -> (f64, f64, f64) {
    (norm_r / norm_o, norm_z / norm_r, norm_z / norm_o)
}

/// Ratios and residual variance for one probe triple after backward.
/// beta is computed from the raw norms, not as the product, so the
/// beta = beta_ln * beta_rc identity remains a live check downstream.
pub fn ratios_from_probe(tape: &Tape, probe: &Probe) -> Result<(f64, f64, f64, f64)> {
    let read = |id| -> Result<f64> {
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::DegenerateSignal("probe point got no gradient".into()))?;
        Ok(l2_norm(g))
    };
    let no = read(probe.o)?;
    let nr = read(probe.r)?;
    let nz = read(probe.z)?;
    if no == 0.0 || nr == 0.0 {
        return Err(Error::DegenerateSignal(format!(
            "zero error-signal norm at probe (|d_o|={no}, |d_r|={nr})"
        )));
    }
    let (bln, brc, b) = betas(nz, nr, no);
    Ok((bln, brc, b, population_variance(tape.data(probe.r))))
}

/// One forward/backward on (src, gold) with label-smoothed cross-entropy and
/// dropout disabled; returns per-sublayer ratios, per-cell averages, and
/// per-layer parameter-gradient norms.
pub fn measure(
    model: &Model,
    src: &TokenBatch,
    gold: &TokenBatch,
    smoothing: f64,
) -> Result<Measurement> {
    if model.config.layout != Layout::PostNorm {
        return Err(Error::UnsupportedLayout(
            "gradient-flow ratios are defined for the post-norm layout only".into(),
        ));
    }
    let mut tape = Tape::new(Mode::Eval, Rng::new(0));
    let bound = model.bind(&mut tape);
    let (enc_out, mut points) = model.encode(&mut tape, &bound, src)?;
    let dec_in = teacher_input(gold);
    let (logits, dec_points) =
        model.decode_train(&mut tape, &bound, &dec_in, enc_out, &src.lengths)?;
    points.extend(dec_points);
    let loss = tape.smoothed_cross_entropy(logits, &gold.ids, &gold.pad_mask(), smoothing)?;
    tape.backward(loss)?;

    let mut records = Vec::with_capacity(points.len());
    for p in &points {
        let (beta_ln, beta_rc, beta, var_r) = ratios_from_probe(&tape, &p.probe)?;
        records.push(ProbeRecord {
            stack: p.stack,
            layer: p.layer,
            kind: p.kind,
            beta_ln,
            beta_rc,
            beta,
            var_r,
        });
    }

    let mut groups: BTreeMap<(Stack, SublayerKind), Vec<&ProbeRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.stack, r.kind)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((stack, kind), rs)| {
            let n = rs.len() as f64;
            CellStat {
                stack,
                kind,
                beta_ln: rs.iter().map(|r| r.beta_ln).sum::<f64>() / n,
                beta_rc: rs.iter().map(|r| r.beta_rc).sum::<f64>() / n,
                beta: rs.iter().map(|r| r.beta).sum::<f64>() / n,
                var_r: rs.iter().map(|r| r.var_r).sum::<f64>() / n,
            }
        })
        .collect();

    let grads = model.grads(&tape, &bound);
    let layer_norms = layer_norms_from_grads(&grads, model.config.layers);

    Ok(Measurement {
        report: RatioReport { records, cells },
        layer_norms,
        loss: tape.data(loss)[0],
    })
}

/// Groups parameter gradients by `stack.layer.` prefix and takes the L2 norm
/// of each group's concatenation.
pub fn layer_norms_from_grads(
    grads: &BTreeMap<String, crate::tensor::Tensor>,
    layers: usize,
) -> Vec<LayerNorm> {
    let mut out = Vec::with_capacity(2 * layers);
    for stack in [Stack::Enc, Stack::Dec] {
        for l in 1..=layers {
            let prefix = format!("{}.{l}.", stack.name());
            let sq: f64 = grads
                .iter()
                .filter(|(name, _)| name.starts_with(&prefix))
                .flat_map(|(_, g)| g.data.iter())
                .map(|v| v * v)
                .sum();
            out.push(LayerNorm {
                stack,
                layer: l,
                norm: sq.sqrt(),
            });
        }
    }
    out
}

/// Windowed mean of per-step layer norms, for training-dynamics curves.
/// Push one batch of per-layer norms per step; `finish` emits one row per
/// (window, stack, layer) with the mean over the window's steps. A final
/// partial window averages over however many steps it holds.
#[derive(Debug)]
pub struct DynamicsLog {
    window: usize,
    steps_in_window: usize,
    next_window: usize,
    sums: BTreeMap<(Stack, usize), f64>,
    rows: Vec<(usize, Stack, usize, f64)>,
}

impl DynamicsLog {
    pub fn new(window: usize) -> Result<DynamicsLog> {
        if window == 0 {
            return Err(Error::InvalidParameter("window must be >= 1".into()));
        }
        Ok(DynamicsLog {
            window,
            steps_in_window: 0,
            next_window: 1,
            sums: BTreeMap::new(),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, norms: &[LayerNorm]) {
        for n in norms {
            *self.sums.entry((n.stack, n.layer)).or_insert(0.0) += n.norm;
        }
        self.steps_in_window += 1;
        if self.steps_in_window == self.window {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.steps_in_window == 0 {
            return;
        }
        let denom = self.steps_in_window as f64;
        for (&(stack, layer), &sum) in &self.sums {
            self.rows
                .push((self.next_window, stack, layer, sum / denom));
        }
        self.sums.clear();
        self.steps_in_window = 0;
        self.next_window += 1;
    }

    /// Completed rows as (window, stack, layer, mean norm).
    pub fn finish(mut self) -> Vec<(usize, Stack, usize, f64)> {
        self.flush();
        self.rows
    }
}

// ---------------------------------------------------------------- CSV out

/// ratios.csv rows: one per (policy, cell).
pub fn ratios_csv(rows: &[(String, CellStat)]) -> String {
    let mut s = String::from("policy,stack,sublayer,beta_ln,beta_rc,beta,var_r\n");
    for (policy, c) in rows {
        let _ = writeln!(
            s,
            "{policy},{},{},{},{},{},{}",
            c.stack.name(),
            c.kind.name(),
            c.beta_ln,
            c.beta_rc,
            c.beta,
            c.var_r
        );
    }
    s
}

/// gradnorms.csv rows: one per (policy, stack, layer).
pub fn gradnorms_csv(rows: &[(String, LayerNorm)]) -> String {
    let mut s = String::from("policy,stack,layer,norm\n");
    for (policy, n) in rows {
        let _ = writeln!(s, "{policy},{},{},{}", n.stack.name(), n.layer, n.norm);
    }
    s
}

/// dynamics.csv rows from a finished DynamicsLog.
pub fn dynamics_csv(rows: &[(usize, Stack, usize, f64)]) -> String {
    let mut s = String::from("window,stack,layer,norm\n");
    for (window, stack, layer, norm) in rows {
        let _ = writeln!(s, "{window},{},{layer},{norm}", stack.name());
    }
    s
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{self, LnNodes};
    use crate::model::{DecoderVariant, ModelConfig};
    use crate::tensor::Tensor;

    fn probe_batch(seed: u64, count: usize, len: usize, vocab: usize) -> (TokenBatch, TokenBatch) {
        let mut rng = Rng::new(seed);
        let mut srcs = Vec::new();
        let mut golds = Vec::new();
        for _ in 0..count {
            let s: Vec<usize> = (0..len)
                .map(|_| {
                    crate::model::PAYLOAD_START + rng.below(vocab - crate::model::PAYLOAD_START)
                })
                .collect();
            golds.push(s.clone());
            srcs.push(s);
        }
        (
            TokenBatch::new(&srcs).unwrap(),
            TokenBatch::new(&golds).unwrap(),
        )
    }

    fn tiny_model(decoder: DecoderVariant) -> Model {
        let cfg = ModelConfig {
            layers: 2,
            dim: 16,
            ffn_dim: 32,
            heads: 2,
            src_vocab: 12,
            tgt_vocab: 12,
            decoder,
            dp_r: 0.0,
            dp_a: 0.0,
            aan_ffn_dim: 4,
            ..ModelConfig::desk_default()
        };
        Model::build(cfg, 5).unwrap()
    }

    #[test]
    fn beta_arithmetic_example() {
        let (bln, brc, b) = betas(2.0, 1.0, 4.0);
        assert_eq!(bln, 0.25);
        assert_eq!(brc, 2.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn identity_body_gives_beta_rc_of_one() {
        // f(z) = 0 makes r = z, so the z and r signals coincide exactly
        let mut tape = Tape::eval();
        let z = tape.param(Tensor::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap());
        let g = tape.param(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = tape.param(Tensor::zeros(vec![4]));
        let (_, probe) = layers::sublayer(
            &mut tape,
            Layout::PostNorm,
            z,
            &LnNodes { g, b },
            1e-6,
            0.0,
            |tp, zz| Ok(tp.scale(zz, 0.0)),
        )
        .unwrap();
        let probe = probe.unwrap();
        // non-uniform weights: a constant upstream signal would be killed
        // by LN's translation invariance and leave d_r = 0
        let w = tape.param(
            Tensor::new(vec![2, 4], (0..8).map(|i| 0.1 * i as f64 + 0.05).collect()).unwrap(),
        );
        let prod = tape.mul(probe.o, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let (_, beta_rc, _, _) = ratios_from_probe(&tape, &probe).unwrap();
        assert_eq!(beta_rc, 1.0);
    }

    #[test]
    fn disconnected_probe_is_degenerate() {
        let mut tape = Tape::eval();
        let z = tape.param(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.param(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = tape.param(Tensor::zeros(vec![4]));
        let (_, probe) = layers::sublayer(
            &mut tape,
            Layout::PostNorm,
            z,
            &LnNodes { g, b },
            1e-6,
            0.0,
            |tp, zz| Ok(tp.scale(zz, 0.5)),
        )
        .unwrap();
        let other = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = tape.sum_all(other);
        tape.backward(loss).unwrap();
        match ratios_from_probe(&tape, &probe.unwrap()) {
            Err(Error::DegenerateSignal(_)) => {}
            other => panic!("expected DegenerateSignal, got {other:?}"),
        }
    }

    #[test]
    fn product_identity_holds_on_real_models() {
        for decoder in [DecoderVariant::Baseline, DecoderVariant::Matt] {
            let model = tiny_model(decoder);
            let (src, gold) = probe_batch(41, 4, 6, 12);
            let m = measure(&model, &src, &gold, 0.1).unwrap();
            assert!(!m.report.records.is_empty());
            for r in &m.report.records {
                assert!(
                    (r.beta - r.beta_ln * r.beta_rc).abs() <= 1e-9,
                    "{:?} layer {} {:?}: {} vs {}",
                    r.stack,
                    r.layer,
                    r.kind,
                    r.beta,
                    r.beta_ln * r.beta_rc
                );
                assert!(r.var_r >= 0.0);
            }
            // cells cover (enc: self+ffn) and decoder kinds
            let enc_cells = m
                .report
                .cells
                .iter()
                .filter(|c| c.stack == Stack::Enc)
                .count();
            assert_eq!(enc_cells, 2);
        }
    }

    #[test]
    fn pre_norm_measurement_is_rejected() {
        let mut cfg = ModelConfig {
            layers: 1,
            dim: 16,
            ffn_dim: 32,
            heads: 2,
            src_vocab: 12,
            tgt_vocab: 12,
            dp_r: 0.0,
            dp_a: 0.0,
            aan_ffn_dim: 4,
            ..ModelConfig::desk_default()
        };
        cfg.layout = Layout::PreNorm;
        let model = Model::build(cfg, 5).unwrap();
        let (src, gold) = probe_batch(43, 2, 4, 12);
        match measure(&model, &src, &gold, 0.1) {
            Err(Error::UnsupportedLayout(_)) => {}
            other => panic!("expected UnsupportedLayout, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn doubling_loss_seed_doubles_layer_norms() {
        let model = tiny_model(DecoderVariant::Baseline);
        let (src, gold) = probe_batch(47, 3, 5, 12);
        let run = |seed: f64| -> Vec<f64> {
            let mut tape = Tape::eval();
            let bound = model.bind(&mut tape);
            let (enc_out, _) = model.encode(&mut tape, &bound, &src).unwrap();
            let dec_in = teacher_input(&gold);
            let (logits, _) = model
                .decode_train(&mut tape, &bound, &dec_in, enc_out, &src.lengths)
                .unwrap();
            let loss = tape
                .smoothed_cross_entropy(logits, &gold.ids, &gold.pad_mask(), 0.1)
                .unwrap();
            tape.backward_seeded(loss, seed).unwrap();
            let grads = model.grads(&tape, &bound);
            layer_norms_from_grads(&grads, model.config.layers)
                .iter()
                .map(|n| n.norm)
                .collect()
        };
        let ones = run(1.0);
        let twos = run(2.0);
        assert_eq!(ones.len(), 4); // 2 stacks x 2 layers
        for (a, b) in ones.iter().zip(&twos) {
            assert!(*a > 0.0);
            assert!((b - 2.0 * a).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn dynamics_log_windows_and_partial_tail() {
        let mut log = DynamicsLog::new(50).unwrap();
        let constant = [
            LayerNorm {
                stack: Stack::Enc,
                layer: 1,
                norm: 3.25,
            },
            LayerNorm {
                stack: Stack::Dec,
                layer: 2,
                norm: 1.5,
            },
        ];
        for _ in 0..120 {
            log.push(&constant);
        }
        let rows = log.finish();
        // 120 steps -> windows of 50, 50, 20 -> ceil(120/50) = 3 per series
        assert_eq!(rows.len(), 3 * 2);
        for (window, _, _, norm) in &rows {
            assert!((1..=3).contains(window));
            assert!((norm - 3.25).abs() < 1e-12 || (norm - 1.5).abs() < 1e-12);
        }
        assert!(DynamicsLog::new(0).is_err());
    }

    #[test]
    fn csv_schemas_have_stable_headers() {
        let cell = CellStat {
            stack: Stack::Dec,
            kind: SublayerKind::Cross,
            beta_ln: 0.74,
            beta_rc: 1.25,
            beta: 0.925,
            var_r: 1.84,
        };
        let csv = ratios_csv(&[("glorot".to_string(), cell)]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "policy,stack,sublayer,beta_ln,beta_rc,beta,var_r"
        );
        assert_eq!(
            lines.next().unwrap(),
            "glorot,dec,cross,0.74,1.25,0.925,1.84"
        );

        let n = LayerNorm {
            stack: Stack::Enc,
            layer: 7,
            norm: 0.5,
        };
        let csv = gradnorms_csv(&[("ds".to_string(), n)]);
        assert!(csv.starts_with("policy,stack,layer,norm\n"));
        assert!(csv.contains("ds,enc,7,0.5"));

        let csv = dynamics_csv(&[(2, Stack::Dec, 12, 0.125)]);
        assert!(csv.starts_with("window,stack,layer,norm\n"));
        assert!(csv.contains("2,dec,12,0.125"));
    }
}
