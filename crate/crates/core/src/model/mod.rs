//! The adaptive-depth classifier.
//!
//! Token and position embeddings give `h_0`; one weight-shared pre-norm
//! transformer block (the step cell) maps `h_{i−1}` to `h_i`. After every
//! step the first-token vector of `h_i` is normalized and handed to the
//! classifier head and the halting (Lambda) head. Parameter count does not
//! depend on the depth `n`, except for per-layer classifier heads.

mod checkpoint;
mod config;
mod params;

use std::cell::Cell;
use std::ops::ControlFlow;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ClassifierMode, LambdaArch, LambdaInput, ModelConfig};
pub use params::{BoundParams, ParamStore};

use crate::error::{Error, Result};
use crate::grad::{sigmoid, Array, Graph, Var};
use crate::haltdist::{posterior_from_halting, ExitDistribution, HaltingVector};
use crate::rng::RngStream;

/// Name prefix shared by every halting-head parameter.
pub const LAMBDA_PREFIX: &str = "lambda.";

thread_local! {
    static STEP_CELL_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`PonderModel::step_cell`] calls made on the current thread.
pub fn step_cell_calls() -> u64 {
    STEP_CELL_CALLS.with(Cell::get)
}

/// One unrolled layer of a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// First-token vector of `h_i`.
    pub pooled_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// Halting probability `λ_i`.
    pub lambda: f64,
}

impl LayerRecord {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn class_probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.len());
        crate::grad::softmax_row(&self.logits, &mut out);
        out
    }
}

/// Per-layer records of one forward pass, in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTrace {
    pub layers: Vec<LayerRecord>,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.lambda).collect()
    }

    /// Exit distribution induced by the trace's halting probabilities.
    pub fn posterior(&self) -> Result<ExitDistribution> {
        Ok(posterior_from_halting(&HaltingVector::new(self.lambdas())?))
    }
}

/// Graph handles for one layer of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// `[batch, classes]`
    pub logits: Var,
    /// `[batch, 1]` pre-sigmoid halting logits.
    pub halting_logit: Var,
}

#[derive(Debug, Clone)]
pub struct PonderModel {
    config: ModelConfig,
}

impl PonderModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.max_layers
    }

    fn classifier_names(&self, layer: usize) -> (String, String) {
        match self.config.classifier_mode {
            ClassifierMode::Shared => ("classifier.w".into(), "classifier.b".into()),
            ClassifierMode::PerLayer => (
                format!("classifier.{layer}.w"),
                format!("classifier.{layer}.b"),
            ),
        }
    }

    /// Fresh parameters drawn from `config.init_seed`.
    pub fn init_params(&self) -> ParamStore {
        let c = &self.config;
        let mut rng = RngStream::new(c.init_seed);
        let mut store = ParamStore::new();
        let put = |store: &mut ParamStore, name: &str, a: Array| {
            store.insert(name, a).expect("parameter names are unique");
        };
        let normal = |rng: &mut RngStream, shape: &[usize], std: f64| {
            let n = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
                .expect("shape matches")
        };
        let d = c.d_model;

        put(&mut store, "embed.token", normal(&mut rng, &[c.vocab_size, d], 1.0));
        put(&mut store, "embed.position", normal(&mut rng, &[c.max_seq_len, d], 1.0));
        for ln in ["cell.ln1", "cell.ln2", "readout.norm"] {
            put(&mut store, &format!("{ln}.gain"), Array::full(&[d], 1.0));
            put(&mut store, &format!("{ln}.bias"), Array::zeros(&[d]));
        }
        let fan = 1.0 / (d as f64).sqrt();
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, &format!("cell.attn.{w}"), normal(&mut rng, &[d, d], fan));
            let b = w.replace('w', "b");
            put(&mut store, &format!("cell.attn.{b}"), Array::zeros(&[1, d]));
        }
        put(&mut store, "cell.ff.w1", normal(&mut rng, &[d, c.d_ff], fan));
        put(&mut store, "cell.ff.b1", Array::zeros(&[1, c.d_ff]));
        put(
            &mut store,
            "cell.ff.w2",
            normal(&mut rng, &[c.d_ff, d], 1.0 / (c.d_ff as f64).sqrt()),
        );
        put(&mut store, "cell.ff.b2", Array::zeros(&[1, d]));

        let heads = match c.classifier_mode {
            ClassifierMode::Shared => vec![1],
            ClassifierMode::PerLayer => (1..=c.max_layers).collect(),
        };
        for layer in heads {
            let (w, b) = self.classifier_names(layer);
            put(&mut store, &w, normal(&mut rng, &[d, c.num_classes], fan));
            put(&mut store, &b, Array::zeros(&[1, c.num_classes]));
        }

        let din = c.lambda_input_width();
        let out_bias = c.lambda_init_prior.map_or(0.0, |p| (p / (1.0 - p)).ln());
        let out_in = match c.lambda_arch {
            LambdaArch::OneLayer => din,
            LambdaArch::ThreeLayer => {
                let mid = d / 2;
                let s1 = 1.0 / (din as f64).sqrt();
                put(&mut store, "lambda.l1.w", normal(&mut rng, &[din, d], s1));
                put(&mut store, "lambda.l1.b", Array::zeros(&[1, d]));
                put(&mut store, "lambda.l2.w", normal(&mut rng, &[d, mid], fan));
                put(&mut store, "lambda.l2.b", Array::zeros(&[1, mid]));
                mid
            }
        };
        let s_out = 0.1 / (out_in as f64).sqrt();
        put(&mut store, "lambda.out.w", normal(&mut rng, &[out_in, 1], s_out));
        put(&mut store, "lambda.out.b", Array::full(&[1, 1], out_bias));
        store
    }

    /// Checks that every token sequence is usable and of equal length.
    pub fn validate_batch(&self, batch: &[&[usize]]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| Error::input("empty batch"))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::input("empty token sequence"));
        }
        if len > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for seq in batch {
            if seq.len() != len {
                return Err(Error::input("sequences in a batch must share one length"));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::input(format!(
                    "token id {t} out of range for vocab of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(len)
    }

    /// `h_0` for a batch, as `[batch·seq, d]`.
    pub fn embed(&self, g: &mut Graph, p: &BoundParams, batch: &[&[usize]]) -> Result<Var> {
        let seq = self.validate_batch(batch)?;
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = g.embedding_lookup(p.var("embed.token")?, &ids)?;
        let pos = g.embedding_lookup(p.var("embed.position")?, &positions)?;
        g.add(tok, pos)
    }

    fn linear(&self, g: &mut Graph, p: &BoundParams, x: Var, w: &str, b: &str) -> Result<Var> {
        let xw = g.matmul(x, p.var(w)?)?;
        g.add(xw, p.var(b)?)
    }

    /// One application of the shared block: `h ↦ h + attn(ln(h))`, then
    /// `h ↦ h + ff(ln(h))`.
    pub fn step_cell(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        STEP_CELL_CALLS.with(|n| n.set(n.get() + 1));
        let c = &self.config;
        let (d, heads, dh) = (c.d_model, c.n_heads, c.head_dim());

        let x = g.layer_norm(h, p.var("cell.ln1.gain")?, p.var("cell.ln1.bias")?)?;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[batch, seq, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[batch * heads, seq, dh])
        };
        let q = self.linear(g, p, x, "cell.attn.wq", "cell.attn.bq")?;
        let k = self.linear(g, p, x, "cell.attn.wk", "cell.attn.bk")?;
        let v = self.linear(g, p, x, "cell.attn.wv", "cell.attn.bv")?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, heads, seq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * seq, d])?;
        let out = self.linear(g, p, ctx, "cell.attn.wo", "cell.attn.bo")?;
        let h = g.add(h, out)?;

        let x = g.layer_norm(h, p.var("cell.ln2.gain")?, p.var("cell.ln2.bias")?)?;
        let f = self.linear(g, p, x, "cell.ff.w1", "cell.ff.b1")?;
        let f = g.gelu(f);
        let f = self.linear(g, p, f, "cell.ff.w2", "cell.ff.b2")?;
        g.add(h, f)
    }

    /// First-token rows of `h`, `[batch, d]`.
    pub fn pool(&self, g: &mut Graph, h: Var, batch: usize, seq: usize) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        g.gather(h, &rows)
    }

    /// Normalization applied to pooled vectors before both heads.
    pub fn readout(&self, g: &mut Graph, p: &BoundParams, pooled: Var) -> Result<Var> {
        g.layer_norm(pooled, p.var("readout.norm.gain")?, p.var("readout.norm.bias")?)
    }

    /// Class logits for a readout vector at 1-based `layer`.
    pub fn classify(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        readout: Var,
        layer: usize,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if layer == 0 || layer > self.config.max_layers {
            return Err(Error::input(format!(
                "layer {layer} outside 1..={}",
                self.config.max_layers
            )));
        }
        let x = g.dropout(readout, self.config.classifier_dropout, rng)?;
        let (w, b) = self.classifier_names(layer);
        self.linear(g, p, x, &w, &b)
    }

    /// Pre-sigmoid halting logit `[batch, 1]` from the current and previous
    /// readout vectors.
    pub fn halting_logit(&self, g: &mut Graph, p: &BoundParams, current: Var, previous: Var) -> Result<Var> {
        let x = match self.config.lambda_input {
            LambdaInput::SingleH => current,
            LambdaInput::ConcatHPrev => g.concat(&[current, previous])?,
        };
        let x = match self.config.lambda_arch {
            LambdaArch::OneLayer => x,
            LambdaArch::ThreeLayer => {
                let x = self.linear(g, p, x, "lambda.l1.w", "lambda.l1.b")?;
                let x = g.tanh(x);
                let x = self.linear(g, p, x, "lambda.l2.w", "lambda.l2.b")?;
                g.tanh(x)
            }
        };
        self.linear(g, p, x, "lambda.out.w", "lambda.out.b")
    }

    /// Unrolls all `n` layers for a batch of equal-length sequences.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &[&[usize]],
        rng: &mut RngStream,
    ) -> Result<Vec<LayerVars>> {
        let seq = self.validate_batch(batch)?;
        let b = batch.len();
        let mut h = self.embed(g, p, batch)?;
        let pooled = self.pool(g, h, b, seq)?;
        let mut prev = self.readout(g, p, pooled)?;
        let mut out = Vec::with_capacity(self.config.max_layers);
        for layer in 1..=self.config.max_layers {
            h = self.step_cell(g, p, h, b, seq)?;
            let pooled = self.pool(g, h, b, seq)?;
            let cur = self.readout(g, p, pooled)?;
            let logits = self.classify(g, p, cur, layer, rng)?;
            let halting_logit = self.halting_logit(g, p, cur, prev)?;
            out.push(LayerVars {
                logits,
                halting_logit,
            });
            prev = cur;
        }
        Ok(out)
    }

    /// Lazy layer-by-layer evaluation of one input in eval mode.
    pub fn unroll<'m>(&'m self, params: &ParamStore, tokens: &[usize]) -> Result<Unroller<'m>> {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let h = self.embed(&mut graph, &bound, &[tokens])?;
        let pooled = self.pool(&mut graph, h, 1, tokens.len())?;
        let prev = self.readout(&mut graph, &bound, pooled)?;
        Ok(Unroller {
            model: self,
            graph,
            params: bound,
            hidden: h,
            prev_readout: prev,
            seq: tokens.len(),
            invocations: 0,
            rng: RngStream::new(0),
        })
    }

    /// All `n` layers of one input.
    pub fn forward_full(&self, params: &ParamStore, tokens: &[usize]) -> Result<LayerTrace> {
        let (trace, _) = self.forward_incremental(params, tokens, |_, _| ControlFlow::Continue(()))?;
        Ok(trace)
    }

    /// Evaluates layers until `consumer` breaks or depth `n` is reached.
    /// Returns the partial trace and the number of step-cell invocations.
    pub fn forward_incremental<F>(
        &self,
        params: &ParamStore,
        tokens: &[usize],
        mut consumer: F,
    ) -> Result<(LayerTrace, usize)>
    where
        F: FnMut(usize, &LayerRecord) -> ControlFlow<()>,
    {
        let mut unroller = self.unroll(params, tokens)?;
        let mut trace = LayerTrace::default();
        while !unroller.is_exhausted() {
            let record = unroller.step()?;
            let layer = unroller.invocations();
            let flow = consumer(layer, &record);
            trace.layers.push(record);
            if flow.is_break() {
                break;
            }
        }
        Ok((trace, unroller.invocations()))
    }

    /// Halting probability from explicit readout-space inputs, bypassing the
    /// step cell. `previous` is ignored for single-state inputs.
    pub fn lambda_from_pooled(&self, params: &ParamStore, current: &[f64], previous: &[f64]) -> Result<f64> {
        let d = self.config.d_model;
        if current.len() != d || previous.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: current.len().min(previous.len()),
            });
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let c = g.input(Array::new(vec![1, d], current.to_vec())?);
        let c = self.readout(&mut g, &p, c)?;
        let q = g.input(Array::new(vec![1, d], previous.to_vec())?);
        let q = self.readout(&mut g, &p, q)?;
        let z = self.halting_logit(&mut g, &p, c, q)?;
        Ok(halting_prob(g.value(z).item()))
    }
}

/// Incremental evaluation state for one input. Each [`Unroller::step`]
/// applies the step cell exactly once.
pub struct Unroller<'m> {
    model: &'m PonderModel,
    graph: Graph,
    params: BoundParams,
    hidden: Var,
    prev_readout: Var,
    seq: usize,
    invocations: usize,
    rng: RngStream,
}

impl Unroller<'_> {
    /// Step-cell applications performed so far.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn is_exhausted(&self) -> bool {
        self.invocations >= self.model.config.max_layers
    }

    pub fn step(&mut self) -> Result<LayerRecord> {
        if self.is_exhausted() {
            return Err(Error::input("all layers already evaluated"));
        }
        let (m, g, p) = (self.model, &mut self.graph, &self.params);
        let h = m.step_cell(g, p, self.hidden, 1, self.seq)?;
        self.invocations += 1;
        let layer = self.invocations;
        let pooled = m.pool(g, h, 1, self.seq)?;
        let cur = m.readout(g, p, pooled)?;
        let logits = m.classify(g, p, cur, layer, &mut self.rng)?;
        let z = m.halting_logit(g, p, cur, self.prev_readout)?;
        let record = LayerRecord {
            pooled_hidden: g.value(pooled).data().to_vec(),
            logits: g.value(logits).data().to_vec(),
            lambda: halting_prob(g.value(z).item()),
        };
        self.hidden = h;
        self.prev_readout = cur;
        Ok(record)
    }
}

/// `σ(z)` kept strictly inside `(0, 1)`; saturated logits would otherwise
/// round to exactly 0 or 1.
pub fn halting_prob(z: f64) -> f64 {
    const EDGE: f64 = 1e-15;
    sigmoid(z).clamp(EDGE, 1.0 - EDGE)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}
