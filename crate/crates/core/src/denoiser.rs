//! Conditioned noise-prediction network.
//!
//! Input sequence (one row per token), in this fixed order:
//!
//! ```text
//! rows 0..N   action tokens   x_t · W_act + b_act + positional(waypoint index)
//! row  N      history token   W2 · silu(W1 · flatten(history) + b1) + b2
//! row  N+1    pooled scene    mean of the conditioning tokens
//! ```
//!
//! Each block applies adaptive layer norm (shift/scale/gate produced from
//! `silu(time_embedding(t) + W_ego · ego)`), multi-head self-attention,
//! multi-head cross-attention onto the conditioning tokens and a gated
//! feed-forward layer, each as a gated residual branch. The first `N` output
//! tokens go through a final modulated norm and an affine head to `N × 3`.
//! All modulation layers and the head start at zero, so a fresh network
//! predicts exactly zero noise.

use crate::autodiff::{zero_grads, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Mat;
use crate::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Network shape.
///
/// Desk-scale defaults; the reference large-scale setting is width 1536,
/// 32-wide heads (48 heads) and 16 layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Waypoints per trajectory (`N`).
    pub waypoints: usize,
    /// Token width (`D`).
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Conditioning tokens (`L`).
    pub cond_tokens: usize,
    /// Largest diffusion timestep (`T`).
    pub max_timestep: usize,
    /// History waypoints (`H`).
    pub history: usize,
    /// Hidden width of the gated feed-forward layer.
    pub ffn_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { waypoints: 8, width: 64, heads: 4, layers: 2, cond_tokens: 16, max_timestep: 100, history: 4, ffn_hidden: 128 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("waypoints", self.waypoints),
            ("width", self.width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("cond_tokens", self.cond_tokens),
            ("max_timestep", self.max_timestep),
            ("history", self.history),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("denoiser.{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("denoiser.width {} is not divisible by heads {}", self.width, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Denoiser inputs that do not depend on `x_t` or `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    /// `L × D` scene tokens.
    pub tokens: Mat<T>,
    /// `1 × D` column mean of `tokens`.
    pub pooled: Mat<T>,
    /// `1 × D` projected ego status.
    pub ego: Mat<T>,
    /// `H × 3` normalized history; embedded by the network's own history encoder.
    pub history: Mat<T>,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn new(tokens: Mat<T>, ego: Mat<T>, history: Mat<T>) -> Result<Self> {
        let pooled = pool_semantic(&tokens)?;
        let b = Self { tokens, pooled, ego, history };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.tokens.cols();
        if self.pooled.shape() != (1, d) || self.ego.shape() != (1, d) {
            return invalid("conditioning widths disagree");
        }
        if self.history.cols() != 3 {
            return invalid("history must have 3 columns");
        }
        if !(self.tokens.is_finite() && self.ego.is_finite() && self.history.is_finite()) {
            return invalid("conditioning contains non-finite values");
        }
        let mean = self.tokens.mean_rows();
        if mean.max_abs_diff(&self.pooled) > T::lit(1e-9) {
            return invalid("pooled token is not the mean of the conditioning tokens");
        }
        Ok(())
    }
}

/// Arithmetic mean over the rows of `tokens`.
pub fn pool_semantic<T: Scalar>(tokens: &Mat<T>) -> Result<Mat<T>> {
    if tokens.rows() == 0 {
        return invalid("cannot pool zero tokens");
    }
    Ok(tokens.mean_rows())
}

/// Sinusoidal features of a scalar position, `[sin(p·f_i)…, cos(p·f_i)…]`.
pub fn sinusoidal<T: Scalar>(pos: f64, width: usize) -> Vec<T> {
    let half = width / 2;
    let mut out = vec![T::zero(); width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = T::lit((pos * freq).sin());
        out[half + i] = T::lit((pos * freq).cos());
    }
    out
}

pub fn positional_table<T: Scalar>(rows: usize, width: usize) -> Mat<T> {
    let mut m = Mat::zeros(rows, width);
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(&sinusoidal::<T>(r as f64, width));
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BlockLayout {
    ada: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    gate: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    act: Linear,
    hist1: Linear,
    hist2: Linear,
    time1: Linear,
    time2: Linear,
    ego: Linear,
    blocks: Vec<BlockLayout>,
    final_ada: Linear,
    head: Linear,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Gaussian with std `1/sqrt(fan_in)`.
    FanIn,
    Zero,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> Linear {
        let w = self.tensor(format!("{prefix}.w"), (fan_in, fan_out), init);
        let b = self.tensor(format!("{prefix}.b"), (1, fan_out), Init::Zero);
        Linear { w, b }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d, Init::FanIn),
            k: self.linear(&format!("{prefix}.k"), d, d, Init::FanIn),
            v: self.linear(&format!("{prefix}.v"), d, d, Init::FanIn),
            o: self.linear(&format!("{prefix}.o"), d, d, Init::FanIn),
        }
    }
}

fn build_layout(cfg: &DenoiserConfig) -> (Layout, Builder) {
    let d = cfg.width;
    let mut b = Builder { names: vec![], shapes: vec![], inits: vec![] };
    let act = b.linear("act", 3, d, Init::FanIn);
    let hist1 = b.linear("hist.l1", 3 * cfg.history, d, Init::FanIn);
    let hist2 = b.linear("hist.l2", d, d, Init::FanIn);
    let time1 = b.linear("time.l1", d, d, Init::FanIn);
    let time2 = b.linear("time.l2", d, d, Init::FanIn);
    let ego = b.linear("ego", d, d, Init::FanIn);
    let blocks = (0..cfg.layers)
        .map(|i| BlockLayout {
            ada: b.linear(&format!("blocks.{i}.ada"), d, 9 * d, Init::Zero),
            self_attn: b.attention(&format!("blocks.{i}.self"), d),
            cross_attn: b.attention(&format!("blocks.{i}.cross"), d),
            gate: b.linear(&format!("blocks.{i}.ffn.gate"), d, cfg.ffn_hidden, Init::FanIn),
            up: b.linear(&format!("blocks.{i}.ffn.up"), d, cfg.ffn_hidden, Init::FanIn),
            down: b.linear(&format!("blocks.{i}.ffn.down"), cfg.ffn_hidden, d, Init::FanIn),
        })
        .collect();
    let final_ada = b.linear("final.ada", d, 2 * d, Init::Zero);
    let head = b.linear("head", d, 3, Init::Zero);
    (Layout { act, hist1, hist2, time1, time2, ego, blocks, final_ada, head }, b)
}

/// Network parameters addressable by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    cfg: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
    layout: Layout,
    positional: Mat<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    /// Fresh parameters: fan-in Gaussian weights, zero biases, zero modulation and head.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, b) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), init)| match init {
                Init::Zero => Mat::zeros(r, c),
                Init::FanIn => {
                    let std = 1.0 / (r as f64).sqrt();
                    Mat::from_fn(r, c, |_, _| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
                }
            })
            .collect();
        Ok(Self { cfg, names: b.names, tensors, layout, positional: positional_table(cfg.waypoints, cfg.width) })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(cfg: DenoiserConfig, named: Vec<(String, Mat<T>)>) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        if named.len() != p.names.len() {
            return invalid(format!("expected {} parameter tensors, found {}", p.names.len(), named.len()));
        }
        for (name, m) in named {
            let i = p.index_of(&name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
            if m.shape() != p.tensors[i].shape() {
                return invalid(format!("parameter {name} has shape {:?}, expected {:?}", m.shape(), p.tensors[i].shape()));
            }
            if !m.is_finite() {
                return invalid(format!("parameter {name} is not finite"));
            }
            p.tensors[i] = m;
        }
        Ok(p)
    }

    /// Overwrites every tensor, including zero-initialized ones, with Gaussian noise of std `scale / sqrt(fan_in)`.
    pub fn randomize_all(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut self.tensors {
            let std = scale / (t.rows() as f64).sqrt();
            for v in t.data_mut() {
                *v = T::lit(std * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Names of the adaptive-norm modulation tensors (shift, scale and gate producers).
    pub fn modulation_names(&self) -> Vec<&str> {
        self.names.iter().filter(|n| n.contains(".ada.")).map(String::as_str).collect()
    }

    /// Plain forward pass.
    pub fn predict_noise(&self, x_t: &Mat<T>, t: usize, cond: &ConditioningBundle<T>) -> Result<Mat<T>> {
        let mut tape = Tape::new(&self.tensors);
        let x = tape.constant(x_t.clone());
        let out = self.predict_noise_on(&mut tape, x, t, cond)?;
        Ok(tape.value(out).clone())
    }

    fn linear(&self, tape: &mut Tape<'_, T>, x: Var, l: Linear) -> Var {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    /// Action encoder: per-waypoint affine map plus the positional table.
    pub fn encode_actions_on(&self, tape: &mut Tape<'_, T>, x_t: Var) -> Result<Var> {
        let shape = tape.value(x_t).shape();
        if shape != (self.cfg.waypoints, 3) {
            return invalid(format!("action tensor has shape {shape:?}, expected ({}, 3)", self.cfg.waypoints));
        }
        let h = self.linear(tape, x_t, self.layout.act);
        let pos = tape.constant(self.positional.clone());
        Ok(tape.add(h, pos))
    }

    /// History encoder: flatten, affine, SiLU, affine.
    pub fn encode_history_on(&self, tape: &mut Tape<'_, T>, history: &Mat<T>) -> Result<Var> {
        if history.shape() != (self.cfg.history, 3) {
            return invalid(format!("history has shape {:?}, expected ({}, 3)", history.shape(), self.cfg.history));
        }
        let flat = tape.constant(Mat::row_vector(history.data().to_vec()));
        let h = self.linear(tape, flat, self.layout.hist1);
        let h = tape.silu(h);
        Ok(self.linear(tape, h, self.layout.hist2))
    }

    /// Concatenates `[action tokens; history; pooled]` along the token axis.
    pub fn assemble_input_on(&self, tape: &mut Tape<'_, T>, actions: Var, hist: Var, pooled: Var) -> Result<Var> {
        let d = tape.value(actions).cols();
        if tape.value(hist).shape() != (1, d) || tape.value(pooled).shape() != (1, d) {
            return invalid("history and pooled embeddings must be 1 × D rows matching the action tokens");
        }
        Ok(tape.concat_rows(&[actions, hist, pooled]))
    }

    /// `silu(time_embedding(t) + W_ego·ego + b)`, the modulation input of every block.
    pub fn conditioning_vector_on(&self, tape: &mut Tape<'_, T>, t: usize, ego: &Mat<T>) -> Var {
        let s = tape.constant(Mat::row_vector(sinusoidal(t as f64, self.cfg.width)));
        let h = self.linear(tape, s, self.layout.time1);
        let h = tape.silu(h);
        let temb = self.linear(tape, h, self.layout.time2);
        let e = tape.constant(ego.clone());
        let e = self.linear(tape, e, self.layout.ego);
        let c = tape.add(temb, e);
        tape.silu(c)
    }

    fn attention(&self, tape: &mut Tape<'_, T>, queries: Var, keys: Var, a: Attention) -> Var {
        let q = self.linear(tape, queries, a.q);
        let k = self.linear(tape, keys, a.k);
        let v = self.linear(tape, keys, a.v);
        let dh = self.cfg.head_dim();
        let inv = T::one() / T::lit(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, inv);
            let p = tape.softmax(s);
            heads.push(tape.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.linear(tape, cat, a.o)
    }

    fn modulate(tape: &mut Tape<'_, T>, x: Var, shift: Var, scale: Var) -> Var {
        let n = tape.layer_norm(x);
        let s1 = tape.shift(scale, T::one());
        let m = tape.mul_row(n, s1);
        tape.add_row(m, shift)
    }

    /// One block: modulated self-attention, cross-attention onto `cond_tokens`
    /// and gated feed-forward, each a gated residual branch.
    pub fn dit_block_on(&self, tape: &mut Tape<'_, T>, seq: Var, cond_tokens: Var, cond_vec: Var, block: usize) -> Result<Var> {
        self.cfg.validate()?;
        let bl = *self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::Config(format!("block {block} out of range")))?;
        let d = self.cfg.width;
        if tape.value(seq).cols() != d || tape.value(cond_tokens).cols() != d {
            return invalid("block inputs must have width D");
        }
        let m = self.linear(tape, cond_vec, bl.ada);
        let chunk: Vec<Var> = (0..9).map(|i| tape.slice_cols(m, i * d, d)).collect();

        let h = Self::modulate(tape, seq, chunk[0], chunk[1]);
        let a = self.attention(tape, h, h, bl.self_attn);
        let a = tape.mul_row(a, chunk[2]);
        let seq = tape.add(seq, a);

        let h = Self::modulate(tape, seq, chunk[3], chunk[4]);
        let a = self.attention(tape, h, cond_tokens, bl.cross_attn);
        let a = tape.mul_row(a, chunk[5]);
        let seq = tape.add(seq, a);

        let h = Self::modulate(tape, seq, chunk[6], chunk[7]);
        let g = self.linear(tape, h, bl.gate);
        let g = tape.silu(g);
        let u = self.linear(tape, h, bl.up);
        let f = tape.mul(g, u);
        let f = self.linear(tape, f, bl.down);
        let f = tape.mul_row(f, chunk[8]);
        Ok(tape.add(seq, f))
    }

    /// Full network on a tape: returns the `N × 3` predicted noise.
    pub fn predict_noise_on(&self, tape: &mut Tape<'_, T>, x_t: Var, t: usize, cond: &ConditioningBundle<T>) -> Result<Var> {
        let d = self.cfg.width;
        if cond.tokens.shape() != (self.cfg.cond_tokens, d) {
            return invalid(format!(
                "conditioning tokens have shape {:?}, expected ({}, {d})",
                cond.tokens.shape(),
                self.cfg.cond_tokens
            ));
        }
        if t == 0 || t > self.cfg.max_timestep {
            return invalid(format!("timestep {t} outside 1..={}", self.cfg.max_timestep));
        }
        let actions = self.encode_actions_on(tape, x_t)?;
        let hist = self.encode_history_on(tape, &cond.history)?;
        let pooled = tape.constant(cond.pooled.clone());
        let mut seq = self.assemble_input_on(tape, actions, hist, pooled)?;
        let c = self.conditioning_vector_on(tape, t, &cond.ego);
        let fh = tape.constant(cond.tokens.clone());
        for i in 0..self.cfg.layers {
            seq = self.dit_block_on(tape, seq, fh, c, i)?;
        }
        let m = self.linear(tape, c, self.layout.final_ada);
        let shift = tape.slice_cols(m, 0, d);
        let scale = tape.slice_cols(m, d, d);
        let head_in = tape.slice_rows(seq, 0, self.cfg.waypoints);
        let h = Self::modulate(tape, head_in, shift, scale);
        let out = self.linear(tape, h, self.layout.head);
        if !tape.value(out).is_finite() {
            return Err(Error::Diverged(format!("noise prediction at t={t} is not finite")));
        }
        Ok(out)
    }

    /// Plain evaluation of [`Self::encode_actions_on`].
    pub fn encode_actions(&self, x_t: &Mat<T>) -> Result<Mat<T>> {
        let mut tape = Tape::new(&self.tensors);
        let x = tape.constant(x_t.clone());
        let v = self.encode_actions_on(&mut tape, x)?;
        Ok(tape.value(v).clone())
    }

    pub fn encode_history(&self, history: &Mat<T>) -> Result<Mat<T>> {
        let mut tape = Tape::new(&self.tensors);
        let v = self.encode_history_on(&mut tape, history)?;
        Ok(tape.value(v).clone())
    }

    pub fn assemble_input(&self, actions: &Mat<T>, hist: &Mat<T>, pooled: &Mat<T>) -> Result<Mat<T>> {
        let mut tape = Tape::new(&self.tensors);
        let (a, h, p) = (tape.constant(actions.clone()), tape.constant(hist.clone()), tape.constant(pooled.clone()));
        let v = self.assemble_input_on(&mut tape, a, h, p)?;
        Ok(tape.value(v).clone())
    }

    /// Plain evaluation of one block; `cond_vec` is the `1 × D` modulation input.
    pub fn dit_block(&self, seq: &Mat<T>, cond_tokens: &Mat<T>, cond_vec: &Mat<T>, block: usize) -> Result<Mat<T>> {
        let mut tape = Tape::new(&self.tensors);
        let (s, f, c) = (tape.constant(seq.clone()), tape.constant(cond_tokens.clone()), tape.constant(cond_vec.clone()));
        let v = self.dit_block_on(&mut tape, s, f, c, block)?;
        Ok(tape.value(v).clone())
    }
}

/// Loss value and exact parameter gradients of a scalar function built on a tape.
pub fn gradient<T, F>(params: &DenoiserParams<T>, loss_fn: F) -> Result<(T, Vec<Mat<T>>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<'_, T>, &DenoiserParams<T>) -> Result<Var>,
{
    let mut grads = zero_grads(params.tensors());
    let mut tape = Tape::new(params.tensors());
    let root = loss_fn(&mut tape, params)?;
    let value = tape.value(root).get(0, 0);
    tape.backward(root, T::one(), &mut grads);
    Ok((value, grads))
}
