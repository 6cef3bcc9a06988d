//! Bidirectional transformer over stacked per-timestep tokens.
//!
//! Each timestep is one input row: four 32-wide slot vectors (agent, key,
//! action, return-to-go) concatenated to 128 and offset by a learned
//! position vector. Hidden slots read a learned mask vector; the rtg slot past
//! `t = 0` reads a separate "absent" vector.

mod checkpoint;

use flexibit_tensor::{Scalar, Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gridworld::{HORIZON, NUM_ACTIONS, NUM_CELLS};
use crate::masking::MaskedExample;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

pub const STATE_LOSS_WEIGHT: f64 = 0.2;
pub const ACTION_LOSS_WEIGHT: f64 = 0.2;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub slot_dim: usize,
    pub ff_mult: usize,
    pub context: usize,
    pub agent_vocab: usize,
    pub key_vocab: usize,
    pub action_vocab: usize,
    pub rtg_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            hidden_dim: 128,
            slot_dim: 32,
            ff_mult: 4,
            context: HORIZON,
            agent_vocab: NUM_CELLS,
            key_vocab: NUM_CELLS,
            action_vocab: NUM_ACTIONS,
            rtg_vocab: 2 * HORIZON + 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if 4 * self.slot_dim != self.hidden_dim {
            return bad(format!("4 x slot_dim {} != hidden_dim {}", self.slot_dim, self.hidden_dim));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        if self.layers == 0 || self.context == 0 || self.ff_mult == 0 {
            return bad("layers, context and ff_mult must be positive".into());
        }
        if self.rtg_vocab.is_multiple_of(2) {
            return bad("rtg vocabulary must be odd (centred on zero)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.hidden_dim
    }

    /// Offset mapping a return to its rtg vocabulary row.
    pub fn rtg_offset(&self) -> i32 {
        (self.rtg_vocab / 2) as i32
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, s, f) = (self.hidden_dim, self.slot_dim, self.ff_dim());
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.agent".into(), vec![self.agent_vocab, s]),
            ("embed.key".into(), vec![self.key_vocab, s]),
            ("embed.action".into(), vec![self.action_vocab, s]),
            ("embed.rtg".into(), vec![self.rtg_vocab, s]),
            ("mask.agent".into(), vec![1, s]),
            ("mask.key".into(), vec![1, s]),
            ("mask.action".into(), vec![1, s]),
            ("mask.rtg".into(), vec![1, s]),
            ("absent.rtg".into(), vec![1, s]),
            ("position".into(), vec![self.context, d]),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gamma".into(), vec![d]),
            ("final_ln.beta".into(), vec![d]),
            ("head.agent.w".into(), vec![d, self.agent_vocab]),
            ("head.agent.b".into(), vec![self.agent_vocab]),
            ("head.key.w".into(), vec![d, self.key_vocab]),
            ("head.key.b".into(), vec![self.key_vocab]),
            ("head.action.w".into(), vec![d, self.action_vocab]),
            ("head.action.b".into(), vec![self.action_vocab]),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const PREAMBLE: usize = 10;
const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let values = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound {
            config: self.config,
            values,
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub config: ModelConfig,
    pub values: Vec<Value>,
}

struct LayerRefs {
    ln1: (Value, Value),
    wq: (Value, Value),
    wk: (Value, Value),
    wv: (Value, Value),
    wo: (Value, Value),
    ln2: (Value, Value),
    ff1: (Value, Value),
    ff2: (Value, Value),
}

impl Bound {
    fn layer(&self, l: usize) -> LayerRefs {
        let v = &self.values[PREAMBLE + l * PER_LAYER..PREAMBLE + (l + 1) * PER_LAYER];
        LayerRefs {
            ln1: (v[0], v[1]),
            wq: (v[2], v[3]),
            wk: (v[4], v[5]),
            wv: (v[6], v[7]),
            wo: (v[8], v[9]),
            ln2: (v[10], v[11]),
            ff1: (v[12], v[13]),
            ff2: (v[14], v[15]),
        }
    }

    fn tail(&self, i: usize) -> Value {
        self.values[PREAMBLE + self.config.layers * PER_LAYER + i]
    }
}

fn truncated_normal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

/// Truncated-normal weights and embeddings, zero biases, unit norm gains.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") || shape.len() == 1 {
            vec![0.0; n]
        } else {
            truncated_normal(n, &mut rng)
        };
        tensors.push(Tensor::new(shape, data.into_iter().map(F::lit).collect())?);
        names.push(name);
    }
    Ok(ModelParams {
        config: *config,
        names,
        tensors,
    })
}

/// Flattened `[B, T]` batch. Agent and key carry separate bits so a caller
/// may reveal one without the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub size: usize,
    pub len: usize,
    pub agent: Vec<usize>,
    pub key: Vec<usize>,
    pub action: Vec<usize>,
    pub agent_visible: Vec<bool>,
    pub key_visible: Vec<bool>,
    pub action_visible: Vec<bool>,
    pub agent_target: Vec<bool>,
    pub key_target: Vec<bool>,
    pub action_target: Vec<bool>,
    pub rtg0: Vec<i32>,
    pub rtg_visible: Vec<bool>,
}

impl MaskedBatch {
    pub fn from_examples(examples: &[MaskedExample]) -> Result<Self> {
        let len = examples.first().map_or(0, |e| e.pattern.len());
        let mut b = MaskedBatch {
            size: examples.len(),
            len,
            agent: Vec::new(),
            key: Vec::new(),
            action: Vec::new(),
            agent_visible: Vec::new(),
            key_visible: Vec::new(),
            action_visible: Vec::new(),
            agent_target: Vec::new(),
            key_target: Vec::new(),
            action_target: Vec::new(),
            rtg0: Vec::new(),
            rtg_visible: Vec::new(),
        };
        for ex in examples {
            let p = &ex.pattern;
            if p.len() != len || ex.states.len() != len || ex.actions.len() != len {
                return Err(Error::LengthMismatch {
                    pattern: p.len(),
                    trajectory: ex.states.len(),
                });
            }
            b.agent.extend(ex.states.iter().map(|s| s.agent.index()));
            b.key.extend(ex.states.iter().map(|s| s.key.index()));
            b.action.extend(ex.actions.iter().map(|a| a.index()));
            b.agent_visible.extend(&p.state_visible);
            b.key_visible.extend(&p.state_visible);
            b.action_visible.extend(&p.action_visible);
            b.agent_target.extend(&p.state_target);
            b.key_target.extend(&p.state_target);
            b.action_target.extend(&p.action_target);
            b.rtg0.push(ex.rtg0);
            b.rtg_visible.push(p.rtg_visible);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.size * self.len
    }

    pub fn state_targets(&self) -> usize {
        self.agent_target.iter().filter(|b| **b).count()
    }

    pub fn target_count(&self) -> usize {
        [&self.agent_target, &self.key_target, &self.action_target]
            .iter()
            .map(|v| v.iter().filter(|b| **b).count())
            .sum()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let n = self.rows();
        let lens = [
            self.agent.len(),
            self.key.len(),
            self.action.len(),
            self.agent_visible.len(),
            self.key_visible.len(),
            self.action_visible.len(),
            self.agent_target.len(),
            self.key_target.len(),
            self.action_target.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.rtg0.len() != self.size || self.rtg_visible.len() != self.size {
            return Err(Error::InvalidArgument("batch fields disagree in length".into()));
        }
        if self.len != config.context {
            return Err(Error::LengthMismatch {
                pattern: config.context,
                trajectory: self.len,
            });
        }
        let off = config.rtg_offset();
        if self.rtg0.iter().any(|r| r.abs() > off) {
            return Err(Error::InvalidArgument("return outside the rtg vocabulary".into()));
        }
        Ok(())
    }
}

/// `[V + 1, D]` table whose last row is the mask vector.
fn with_mask<F: Scalar>(tape: &mut Tape<F>, table: Value, mask: Value) -> Result<Value> {
    Ok(tape.concat_first_dim(&[table, mask])?)
}

pub fn embed_inputs<F: Scalar>(tape: &mut Tape<F>, p: &Bound, batch: &MaskedBatch) -> Result<Value> {
    let c = &p.config;
    batch.check(c)?;
    let v = &p.values;
    let agent_t = with_mask(tape, v[0], v[4])?;
    let key_t = with_mask(tape, v[1], v[5])?;
    let action_t = with_mask(tape, v[2], v[6])?;
    let rtg_t = tape.concat_first_dim(&[v[3], v[7], v[8]])?;

    let pick = |ids: &[usize], vis: &[bool], mask_row: usize| -> Vec<usize> {
        ids.iter().zip(vis).map(|(&i, &s)| if s { i } else { mask_row }).collect()
    };
    let agent_ids = pick(&batch.agent, &batch.agent_visible, c.agent_vocab);
    let key_ids = pick(&batch.key, &batch.key_visible, c.key_vocab);
    let action_ids = pick(&batch.action, &batch.action_visible, c.action_vocab);
    let off = c.rtg_offset();
    let rtg_ids: Vec<usize> = (0..batch.rows())
        .map(|r| {
            let (b, t) = (r / batch.len, r % batch.len);
            match (t, batch.rtg_visible[b]) {
                (0, true) => (batch.rtg0[b] + off) as usize,
                (0, false) => c.rtg_vocab,
                _ => c.rtg_vocab + 1,
            }
        })
        .collect();

    let slots = [
        tape.embedding_lookup(agent_t, &agent_ids)?,
        tape.embedding_lookup(key_t, &key_ids)?,
        tape.embedding_lookup(action_t, &action_ids)?,
        tape.embedding_lookup(rtg_t, &rtg_ids)?,
    ];
    let x = tape.concat_last_dim(&slots)?;
    let x = tape.reshape(x, &[batch.size, batch.len, c.hidden_dim])?;
    Ok(tape.add(x, v[9])?)
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: Value, (w, b): (Value, Value)) -> Result<Value> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Value,
    refs: &LayerRefs,
    config: &ModelConfig,
    trace: &mut Option<&mut Vec<Value>>,
) -> Result<Value> {
    let q = linear(tape, x, refs.wq)?;
    let k = linear(tape, x, refs.wk)?;
    let v = linear(tape, x, refs.wv)?;
    let hd = config.head_dim();
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = tape.slice_last_dim(q, h * hd, hd)?;
        let kh = tape.slice_last_dim(k, h * hd, hd)?;
        let vh = tape.slice_last_dim(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_last_dim(scores);
        if let Some(t) = trace.as_deref_mut() {
            t.push(weights);
        }
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_last_dim(&outs)?;
    linear(tape, merged, refs.wo)
}

fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    mut x: Value,
    mut trace: Option<&mut Vec<Value>>,
) -> Result<Value> {
    let c = p.config;
    for l in 0..c.layers {
        let refs = p.layer(l);
        let h = tape.layer_norm(x, refs.ln1.0, refs.ln1.1)?;
        let a = attention(tape, h, &refs, &c, &mut trace)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, refs.ln2.0, refs.ln2.1)?;
        let h = linear(tape, h, refs.ff1)?;
        let h = tape.gelu(h);
        let h = linear(tape, h, refs.ff2)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Pre-norm encoder stack without any attention mask.
pub fn encoder_forward<F: Scalar>(tape: &mut Tape<F>, p: &Bound, x: Value) -> Result<Value> {
    encode(tape, p, x, None)
}

/// Like [`encoder_forward`], also returning every head's attention weights
/// `[B, T, T]`, layer by layer.
pub fn encoder_forward_traced<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    x: Value,
) -> Result<(Value, Vec<Value>)> {
    let mut trace = Vec::new();
    let out = encode(tape, p, x, Some(&mut trace))?;
    Ok((out, trace))
}

#[derive(Debug, Clone, Copy)]
pub struct Logits {
    /// `[B*T, vocab]` each.
    pub agent: Value,
    pub key: Value,
    pub action: Value,
}

/// Unweighted cross-entropies and target counts of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub agent_ce: f64,
    pub key_ce: f64,
    pub action_ce: f64,
    pub state_targets: usize,
    pub action_targets: usize,
}

impl LossBreakdown {
    /// Predicted tokens: agent and key count separately.
    pub fn tokens(&self) -> usize {
        2 * self.state_targets + self.action_targets
    }

    /// Mean cross-entropy per predicted token.
    pub fn token_ce(&self) -> f64 {
        let n = self.tokens();
        if n == 0 {
            return 0.0;
        }
        let s = self.state_targets as f64;
        (s * (self.agent_ce + self.key_ce) + self.action_targets as f64 * self.action_ce) / n as f64
    }
}

fn targets(ids: &[usize], bits: &[bool]) -> Vec<Option<usize>> {
    ids.iter().zip(bits).map(|(&i, &b)| b.then_some(i)).collect()
}

fn logits_of<F: Scalar>(tape: &mut Tape<F>, p: &Bound, hidden: Value, rows: usize) -> Result<Logits> {
    let normed = tape.layer_norm(hidden, p.tail(0), p.tail(1))?;
    let flat = tape.reshape(normed, &[rows, p.config.hidden_dim])?;
    Ok(Logits {
        agent: linear(tape, flat, (p.tail(2), p.tail(3)))?,
        key: linear(tape, flat, (p.tail(4), p.tail(5)))?,
        action: linear(tape, flat, (p.tail(6), p.tail(7)))?,
    })
}

/// Weighted cross-entropy on target slots only.
pub fn heads_and_loss<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    hidden: Value,
    batch: &MaskedBatch,
) -> Result<(Value, Logits, LossBreakdown)> {
    if batch.target_count() == 0 {
        return Err(Error::NoTargets);
    }
    let logits = logits_of(tape, p, hidden, batch.rows())?;
    let ce_a = tape.cross_entropy_with_logits(logits.agent, &targets(&batch.agent, &batch.agent_target))?;
    let ce_k = tape.cross_entropy_with_logits(logits.key, &targets(&batch.key, &batch.key_target))?;
    let ce_s = tape.add(ce_a, ce_k)?;
    let ce_s = tape.scale(ce_s, F::lit(STATE_LOSS_WEIGHT));
    let ce_u = tape.cross_entropy_with_logits(logits.action, &targets(&batch.action, &batch.action_target))?;
    let weighted_u = tape.scale(ce_u, F::lit(ACTION_LOSS_WEIGHT));
    let loss = tape.add(ce_s, weighted_u)?;
    let read = |v: Value| tape.data(v)[0].as_f64();
    let breakdown = LossBreakdown {
        total: read(loss),
        agent_ce: read(ce_a),
        key_ce: read(ce_k),
        action_ce: read(ce_u),
        state_targets: batch.agent_target.iter().filter(|b| **b).count(),
        action_targets: batch.action_target.iter().filter(|b| **b).count(),
    };
    Ok((loss, logits, breakdown))
}

/// Full forward pass: embed, encode, score.
pub fn forward_loss<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    batch: &MaskedBatch,
) -> Result<(Value, LossBreakdown)> {
    let x = embed_inputs(tape, p, batch)?;
    let h = encoder_forward(tape, p, x)?;
    let (loss, _, b) = heads_and_loss(tape, p, h, batch)?;
    Ok((loss, b))
}

/// Softmax of every head at every timestep, flattened `[B*T, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub size: usize,
    pub len: usize,
    pub agent: Vec<f64>,
    pub key: Vec<f64>,
    pub action: Vec<f64>,
}

impl Distributions {
    fn row(data: &[f64], width: usize, r: usize) -> &[f64] {
        &data[r * width..(r + 1) * width]
    }

    pub fn agent(&self, b: usize, t: usize) -> &[f64] {
        Self::row(&self.agent, NUM_CELLS, b * self.len + t)
    }

    pub fn key(&self, b: usize, t: usize) -> &[f64] {
        Self::row(&self.key, NUM_CELLS, b * self.len + t)
    }

    pub fn action(&self, b: usize, t: usize) -> &[f64] {
        Self::row(&self.action, NUM_ACTIONS, b * self.len + t)
    }
}

fn softmax_rows<F: Scalar>(data: &[F], width: usize) -> Vec<f64> {
    let mut out: Vec<f64> = data.iter().map(|v| v.as_f64()).collect();
    for row in out.chunks_mut(width) {
        flexibit_tensor::softmax_in_place(row);
    }
    out
}

pub fn predict_distributions<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch) -> Result<Distributions> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = embed_inputs(&mut tape, &p, batch)?;
    let h = encoder_forward(&mut tape, &p, x)?;
    let logits = logits_of(&mut tape, &p, h, batch.rows())?;
    let c = &params.config;
    Ok(Distributions {
        size: batch.size,
        len: batch.len,
        agent: softmax_rows(tape.data(logits.agent), c.agent_vocab),
        key: softmax_rows(tape.data(logits.key), c.key_vocab),
        action: softmax_rows(tape.data(logits.action), c.action_vocab),
    })
}

/// Loss of a batch without recording gradients.
pub fn evaluate_batch<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    Ok(forward_loss(&mut tape, &p, batch)?.1)
}
