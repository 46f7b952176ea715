//! A small causal transformer over per-frame inputs.
//!
//! Each frame's input is the embedding of the previously emitted token (or a
//! reserved begin-of-stream row), plus one of two user-activity embeddings,
//! plus a learned position embedding. Blocks are pre-norm attention and a
//! GELU feed-forward, followed by a final norm and a linear vocabulary head.
//!
//! Parameters are held in `f64` for exact gradient work but always stay on
//! the `f32` grid, which is what checkpoints store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_horizon: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: 8,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            max_horizon: 256,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_horizon", self.max_horizon),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Row of the token embedding used as "previous token" at frame 0.
    pub fn bos_id(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    specs: Vec<ParamSpec>,
    tok_emb: usize,
    user_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Layout {
        let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim());
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(ParamSpec { name, shape, offset, kind });
            offset
        };
        use ParamKind::*;
        let tok_emb = add("tok_emb".into(), vec![v + 1, d], Weight);
        let user_emb = add("user_emb".into(), vec![2, d], Weight);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_horizon, d], Weight);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerOffsets {
                    ln1_g: add(p("ln1.gain"), vec![d], Gain),
                    ln1_b: add(p("ln1.bias"), vec![d], Bias),
                    qkv_w: add(p("attn.qkv.weight"), vec![d, 3 * d], Weight),
                    qkv_b: add(p("attn.qkv.bias"), vec![3 * d], Bias),
                    out_w: add(p("attn.out.weight"), vec![d, d], Weight),
                    out_b: add(p("attn.out.bias"), vec![d], Bias),
                    ln2_g: add(p("ln2.gain"), vec![d], Gain),
                    ln2_b: add(p("ln2.bias"), vec![d], Bias),
                    fc_w: add(p("mlp.fc.weight"), vec![d, h], Weight),
                    fc_b: add(p("mlp.fc.bias"), vec![h], Bias),
                    proj_w: add(p("mlp.proj.weight"), vec![h, d], Weight),
                    proj_b: add(p("mlp.proj.bias"), vec![d], Bias),
                }
            })
            .collect();
        let lnf_g = add("ln_f.gain".into(), vec![d], Gain);
        let lnf_b = add("ln_f.bias".into(), vec![d], Bias);
        let head_w = add("head.weight".into(), vec![d, v], Weight);
        let head_b = add("head.bias".into(), vec![v], Bias);
        Layout {
            specs,
            tok_emb,
            user_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total,
        }
    }
}

/// Per-frame conditioning for one episode.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeInput {
    /// 1 where the user is speaking during the frame.
    pub user_activity_bits: Vec<u8>,
    /// Selects the forced prompt tokens.
    pub content_seed: Option<u64>,
    /// Leading frames whose tokens are forced to speech and not trained on.
    #[serde(default)]
    pub forced_active_frames: usize,
}

impl EpisodeInput {
    pub fn new(user_activity_bits: Vec<u8>) -> Self {
        EpisodeInput {
            user_activity_bits,
            content_seed: None,
            forced_active_frames: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.user_activity_bits.len()
    }
}

/// Row-major `[frames, vocab]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogits {
    vocab: usize,
    data: Vec<f64>,
}

impl FrameLogits {
    pub fn new(vocab: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % vocab, 0);
        FrameLogits { vocab, data }
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.vocab)
    }
}

#[derive(Debug, Clone, Default)]
struct LayerTrace {
    x_in: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    // frame t occupies heads * (t + 1) weights starting at heads * t * (t + 1) / 2
    att: Vec<f64>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ln2_out: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

/// Activations of a causal forward pass, frame by frame. Doubles as the
/// key/value cache during sampling and as the tape for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    frames: usize,
    prev_tokens: Vec<usize>,
    user_bits: Vec<u8>,
    layers: Vec<LayerTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    lnf_out: Vec<f64>,
    logits: Vec<f64>,
    vocab: usize,
}

impl Trace {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_logits(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn logits(&self) -> FrameLogits {
        FrameLogits::new(self.vocab, self.logits.clone())
    }
}

/// Policy parameters together with their configuration. A checkpoint is this
/// value serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    params: Vec<f64>,
    layout: Layout,
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl Policy {
    pub fn init(config: PolicyConfig) -> Result<Policy> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for spec in &layout.specs {
            let slot = &mut params[spec.range()];
            match spec.kind {
                ParamKind::Weight => slot
                    .iter_mut()
                    .for_each(|p| *p = to_f32_grid(normal.sample(&mut rng))),
                ParamKind::Bias => slot.fill(0.0),
                ParamKind::Gain => slot.fill(1.0),
            }
        }
        Ok(Policy {
            config,
            params,
            layout,
        })
    }

    pub(crate) fn from_parts(config: PolicyConfig, params: Vec<f64>) -> Result<Policy> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Policy {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replace parameters, rounding each onto the `f32` grid.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: values.len(),
            });
        }
        for (p, &v) in self.params.iter_mut().zip(values) {
            *p = to_f32_grid(v);
        }
        Ok(())
    }

    /// Raw access without rounding, for finite-difference probes.
    pub fn params_mut_unrounded(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.params[range])
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn new_trace(&self, capacity: usize) -> Trace {
        let (d, h) = (self.config.embed_dim, self.config.hidden_dim());
        let heads = self.config.num_heads;
        let layer = LayerTrace {
            x_in: Vec::with_capacity(capacity * d),
            ln1_xhat: Vec::with_capacity(capacity * d),
            ln1_rstd: Vec::with_capacity(capacity),
            ln1_out: Vec::with_capacity(capacity * d),
            q: Vec::with_capacity(capacity * d),
            k: Vec::with_capacity(capacity * d),
            v: Vec::with_capacity(capacity * d),
            att: Vec::with_capacity(heads * capacity * (capacity + 1) / 2),
            ctx: Vec::with_capacity(capacity * d),
            x_mid: Vec::with_capacity(capacity * d),
            ln2_xhat: Vec::with_capacity(capacity * d),
            ln2_rstd: Vec::with_capacity(capacity),
            ln2_out: Vec::with_capacity(capacity * d),
            fc_pre: Vec::with_capacity(capacity * h),
            fc_act: Vec::with_capacity(capacity * h),
        };
        Trace {
            frames: 0,
            prev_tokens: Vec::with_capacity(capacity),
            user_bits: Vec::with_capacity(capacity),
            layers: vec![layer; self.config.num_layers],
            lnf_xhat: Vec::with_capacity(capacity * d),
            lnf_rstd: Vec::with_capacity(capacity),
            lnf_out: Vec::with_capacity(capacity * d),
            logits: Vec::with_capacity(capacity * self.config.vocab_size),
            vocab: self.config.vocab_size,
        }
    }

    /// Run one more frame. `prev_token` is the token emitted at the previous
    /// frame, or `None` at frame 0.
    pub fn step<'t>(&self, trace: &'t mut Trace, prev_token: Option<usize>, user_bit: u8) -> Result<&'t [f64]> {
        let cfg = &self.config;
        let t = trace.frames;
        if t >= cfg.max_horizon {
            return Err(Error::Horizon {
                frame: t,
                limit: cfg.max_horizon,
            });
        }
        let prev = match prev_token {
            Some(id) if id >= cfg.vocab_size => {
                return Err(Error::Range {
                    id,
                    limit: cfg.vocab_size,
                })
            }
            Some(id) => id,
            None => cfg.bos_id(),
        };
        let user = usize::from(user_bit != 0);
        let lay = self.layout();
        let p = &self.params;
        let (d, h, nh, hd) = (cfg.embed_dim, cfg.hidden_dim(), cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x: Vec<f64> = (0..d)
            .map(|i| {
                p[lay.tok_emb + prev * d + i] + p[lay.user_emb + user * d + i] + p[lay.pos_emb + t * d + i]
            })
            .collect();
        trace.prev_tokens.push(prev);
        trace.user_bits.push(user as u8);

        let mut buf = vec![0.0; 3 * d.max(h)];
        for (lo, lt) in lay.layers.iter().zip(trace.layers.iter_mut()) {
            lt.x_in.extend_from_slice(&x);
            let (xhat, rstd) = layer_norm(&x);
            let ln1: Vec<f64> = (0..d).map(|i| xhat[i] * p[lo.ln1_g + i] + p[lo.ln1_b + i]).collect();
            lt.ln1_xhat.extend_from_slice(&xhat);
            lt.ln1_rstd.push(rstd);

            let qkv = &mut buf[..3 * d];
            matvec(&ln1, &p[lo.qkv_w..lo.qkv_w + d * 3 * d], &p[lo.qkv_b..lo.qkv_b + 3 * d], qkv);
            lt.q.extend_from_slice(&qkv[..d]);
            lt.k.extend_from_slice(&qkv[d..2 * d]);
            lt.v.extend_from_slice(&qkv[2 * d..]);
            lt.ln1_out.extend_from_slice(&ln1);

            let mut ctx = vec![0.0; d];
            let q = &lt.q[t * d..(t + 1) * d];
            for head in 0..nh {
                let off = head * hd;
                let qh = &q[off..off + hd];
                let start = lt.att.len();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=t {
                    let kj = &lt.k[j * d + off..j * d + off + hd];
                    let s = dot(qh, kj) * scale;
                    max = max.max(s);
                    lt.att.push(s);
                }
                let weights = &mut lt.att[start..];
                let mut sum = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - max).exp();
                    sum += *w;
                }
                let inv = 1.0 / sum;
                let ch = &mut ctx[off..off + hd];
                for (j, w) in weights.iter_mut().enumerate() {
                    *w *= inv;
                    let vj = &lt.v[j * d + off..j * d + off + hd];
                    axpy(*w, vj, ch);
                }
            }
            let attn_out = &mut buf[..d];
            matvec(&ctx, &p[lo.out_w..lo.out_w + d * d], &p[lo.out_b..lo.out_b + d], attn_out);
            lt.ctx.extend_from_slice(&ctx);
            for i in 0..d {
                x[i] += attn_out[i];
            }
            lt.x_mid.extend_from_slice(&x);

            let (xhat, rstd) = layer_norm(&x);
            let ln2: Vec<f64> = (0..d).map(|i| xhat[i] * p[lo.ln2_g + i] + p[lo.ln2_b + i]).collect();
            lt.ln2_xhat.extend_from_slice(&xhat);
            lt.ln2_rstd.push(rstd);
            let mut pre = vec![0.0; h];
            matvec(&ln2, &p[lo.fc_w..lo.fc_w + d * h], &p[lo.fc_b..lo.fc_b + h], &mut pre);
            lt.ln2_out.extend_from_slice(&ln2);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let proj = &mut buf[..d];
            matvec(&act, &p[lo.proj_w..lo.proj_w + h * d], &p[lo.proj_b..lo.proj_b + d], proj);
            lt.fc_pre.extend_from_slice(&pre);
            lt.fc_act.extend_from_slice(&act);
            for i in 0..d {
                x[i] += proj[i];
            }
        }

        let (xhat, rstd) = layer_norm(&x);
        let out: Vec<f64> = (0..d).map(|i| xhat[i] * p[lay.lnf_g + i] + p[lay.lnf_b + i]).collect();
        trace.lnf_xhat.extend_from_slice(&xhat);
        trace.lnf_rstd.push(rstd);
        let v = cfg.vocab_size;
        let start = trace.logits.len();
        trace.logits.resize(start + v, 0.0);
        matvec(
            &out,
            &p[lay.head_w..lay.head_w + d * v],
            &p[lay.head_b..lay.head_b + v],
            &mut trace.logits[start..],
        );
        trace.lnf_out.extend_from_slice(&out);
        trace.frames += 1;
        let logits = &trace.logits[start..];
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::numeric("logits", Some(t)));
        }
        Ok(logits)
    }

    /// Teacher-forced pass: frame `t` sees `user_bits[..=t]` and `tokens[..t]`.
    /// Returns a trace with `tokens.len()` frames.
    pub fn trace(&self, episode: &EpisodeInput, tokens: &[usize]) -> Result<Trace> {
        let n = tokens.len();
        if n > episode.horizon() {
            return Err(Error::Shape {
                expected: episode.horizon(),
                got: n,
            });
        }
        let mut trace = self.new_trace(n);
        for t in 0..n {
            let prev = t.checked_sub(1).map(|i| tokens[i]);
            self.step(&mut trace, prev, episode.user_activity_bits[t])?;
        }
        Ok(trace)
    }

    pub fn forward(&self, episode: &EpisodeInput, tokens: &[usize]) -> Result<FrameLogits> {
        Ok(self.trace(episode, tokens)?.logits())
    }

    /// Evaluate a scalar functional of the frame logits and its exact gradient
    /// with respect to every parameter. The closure returns the value and
    /// `d value / d logits` in the same row-major layout.
    pub fn loss_and_grad<F>(&self, episode: &EpisodeInput, tokens: &[usize], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&FrameLogits) -> Result<(f64, Vec<f64>)>,
    {
        let trace = self.trace(episode, tokens)?;
        let (value, dlogits) = loss(&trace.logits())?;
        if !value.is_finite() {
            return Err(Error::numeric("loss", None));
        }
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&trace, &dlogits, &mut grads)?;
        Ok((value, grads))
    }

    /// Accumulate `d L / d params` into `grads` given `d L / d logits`.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut [f64]) -> Result<()> {
        let cfg = &self.config;
        let (v, d, h, nh, hd) = (
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.hidden_dim(),
            cfg.num_heads,
            cfg.head_dim(),
        );
        let n = trace.frames;
        if dlogits.len() != n * v {
            return Err(Error::Shape {
                expected: n * v,
                got: dlogits.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if let Some(pos) = dlogits.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric("logit gradient", Some(pos / v)));
        }
        let lay = self.layout();
        let p = &self.params;
        let scale = 1.0 / (hd as f64).sqrt();

        // head
        let head_wt = transpose(&p[lay.head_w..lay.head_w + d * v], d, v);
        let mut dx = vec![0.0; n * d];
        {
            let mut dout = vec![0.0; d];
            for t in 0..n {
                let dl = &dlogits[t * v..(t + 1) * v];
                let hin = &trace.lnf_out[t * d..(t + 1) * d];
                outer_acc(hin, dl, &mut grads[lay.head_w..lay.head_w + d * v]);
                add_into(dl, &mut grads[lay.head_b..lay.head_b + v]);
                matvec_t(dl, &head_wt, &mut dout);
                layer_norm_backward(
                    &dout,
                    &trace.lnf_xhat[t * d..(t + 1) * d],
                    trace.lnf_rstd[t],
                    &p[lay.lnf_g..lay.lnf_g + d],
                    &mut grads[lay.lnf_g..lay.lnf_b + d],
                    &mut dx[t * d..(t + 1) * d],
                );
            }
        }

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut tmp_d = vec![0.0; d];
        let mut tmp_h = vec![0.0; h];
        let mut dqkv = vec![0.0; 3 * d];
        for (lo, lt) in lay.layers.iter().zip(&trace.layers).rev() {
            // feed-forward branch; dx is the gradient w.r.t. the block output
            let proj_wt = transpose(&p[lo.proj_w..lo.proj_w + h * d], h, d);
            let fc_wt = transpose(&p[lo.fc_w..lo.fc_w + d * h], d, h);
            for t in 0..n {
                let dy = &dx[t * d..(t + 1) * d];
                outer_acc(&lt.fc_act[t * h..(t + 1) * h], dy, &mut grads[lo.proj_w..lo.proj_w + h * d]);
                add_into(dy, &mut grads[lo.proj_b..lo.proj_b + d]);
                matvec_t(dy, &proj_wt, &mut tmp_h);
                for (g, &z) in tmp_h.iter_mut().zip(&lt.fc_pre[t * h..(t + 1) * h]) {
                    *g *= gelu_grad(z);
                }
                outer_acc(&lt.ln2_out[t * d..(t + 1) * d], &tmp_h, &mut grads[lo.fc_w..lo.fc_w + d * h]);
                add_into(&tmp_h, &mut grads[lo.fc_b..lo.fc_b + h]);
                matvec_t(&tmp_h, &fc_wt, &mut tmp_d);
                layer_norm_backward(
                    &tmp_d,
                    &lt.ln2_xhat[t * d..(t + 1) * d],
                    lt.ln2_rstd[t],
                    &p[lo.ln2_g..lo.ln2_g + d],
                    &mut grads[lo.ln2_g..lo.ln2_b + d],
                    &mut dx[t * d..(t + 1) * d],
                );
            }

            // attention branch; dx now holds the gradient w.r.t. x_mid
            let out_wt = transpose(&p[lo.out_w..lo.out_w + d * d], d, d);
            dq.fill(0.0);
            dk.fill(0.0);
            dv.fill(0.0);
            let mut dctx = vec![0.0; d];
            for t in 0..n {
                let dy = &dx[t * d..(t + 1) * d];
                outer_acc(&lt.ctx[t * d..(t + 1) * d], dy, &mut grads[lo.out_w..lo.out_w + d * d]);
                add_into(dy, &mut grads[lo.out_b..lo.out_b + d]);
                matvec_t(dy, &out_wt, &mut dctx);
                let att_base = nh * t * (t + 1) / 2;
                for head in 0..nh {
                    let off = head * hd;
                    let a = &lt.att[att_base + head * (t + 1)..att_base + (head + 1) * (t + 1)];
                    let dc = &dctx[off..off + hd];
                    let mut da = Vec::with_capacity(t + 1);
                    let mut weighted = 0.0;
                    for (j, &aj) in a.iter().enumerate() {
                        let vj = &lt.v[j * d + off..j * d + off + hd];
                        let g = dot(dc, vj);
                        weighted += aj * g;
                        da.push(g);
                        axpy(aj, dc, &mut dv[j * d + off..j * d + off + hd]);
                    }
                    let qt = &lt.q[t * d + off..t * d + off + hd];
                    for (j, &aj) in a.iter().enumerate() {
                        let ds = aj * (da[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &lt.k[j * d + off..j * d + off + hd];
                        axpy(ds, kj, &mut dq[t * d + off..t * d + off + hd]);
                        axpy(ds, qt, &mut dk[j * d + off..j * d + off + hd]);
                    }
                }
            }
            let qkv_wt = transpose(&p[lo.qkv_w..lo.qkv_w + d * 3 * d], d, 3 * d);
            for t in 0..n {
                dqkv[..d].copy_from_slice(&dq[t * d..(t + 1) * d]);
                dqkv[d..2 * d].copy_from_slice(&dk[t * d..(t + 1) * d]);
                dqkv[2 * d..].copy_from_slice(&dv[t * d..(t + 1) * d]);
                outer_acc(&lt.ln1_out[t * d..(t + 1) * d], &dqkv, &mut grads[lo.qkv_w..lo.qkv_w + 3 * d * d]);
                add_into(&dqkv, &mut grads[lo.qkv_b..lo.qkv_b + 3 * d]);
                matvec_t(&dqkv, &qkv_wt, &mut tmp_d);
                layer_norm_backward(
                    &tmp_d,
                    &lt.ln1_xhat[t * d..(t + 1) * d],
                    lt.ln1_rstd[t],
                    &p[lo.ln1_g..lo.ln1_g + d],
                    &mut grads[lo.ln1_g..lo.ln1_b + d],
                    &mut dx[t * d..(t + 1) * d],
                );
            }
        }

        for t in 0..n {
            let g = &dx[t * d..(t + 1) * d];
            let prev = trace.prev_tokens[t];
            let user = trace.user_bits[t] as usize;
            add_into(g, &mut grads[lay.tok_emb + prev * d..lay.tok_emb + (prev + 1) * d]);
            add_into(g, &mut grads[lay.user_emb + user * d..lay.user_emb + (user + 1) * d]);
            add_into(g, &mut grads[lay.pos_emb + t * d..lay.pos_emb + (t + 1) * d]);
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes so the reduction vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `out = bias + x W` with `W` stored `[in, out]` row-major.
fn matvec(x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * n_out..(i + 1) * n_out], out);
    }
}

/// `out = W dy` given `W^T` stored `[out, in]` row-major.
fn matvec_t(dy: &[f64], wt: &[f64], out: &mut [f64]) {
    let n_in = out.len();
    out.fill(0.0);
    for (o, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, &wt[o * n_in..(o + 1) * n_in], out);
        }
    }
}

fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// `G += x^T dy` for `G` stored `[x.len(), dy.len()]`.
fn outer_acc(x: &[f64], dy: &[f64], g: &mut [f64]) {
    let n_out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dy, &mut g[i * n_out..(i + 1) * n_out]);
        }
    }
}

fn layer_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

/// `gain_bias_grads` is `[d gain | d bias]`; the input gradient is added to `dx`.
fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: f64, gain: &[f64], gain_bias_grads: &mut [f64], dx: &mut [f64]) {
    let d = dy.len();
    let (dg, db) = gain_bias_grads.split_at_mut(d);
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..d {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        let g = dy[i] * gain[i];
        mean_dxhat += g;
        mean_dxhat_xhat += g * xhat[i];
    }
    mean_dxhat /= d as f64;
    mean_dxhat_xhat /= d as f64;
    for i in 0..d {
        let g = dy[i] * gain[i];
        dx[i] += rstd * (g - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
