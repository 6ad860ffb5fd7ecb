//! The confidence estimator network: learned embeddings for scene tokens
//! and caption tokens, a stack of full (non-causal) self-attention
//! encoder layers, and a small feed-forward head that turns the target
//! position's output embedding into a correctness probability.
//!
//! Forward and backward passes are written out by hand; `gradient_check`
//! verifies every parameter against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Scene;
use crate::error::{CoreError, Result};
use crate::linalg::{dot, Mat};
use crate::Float;

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Shape of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorDims {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub max_positions: usize,
}

impl EstimatorDims {
    /// Desk-scale default: width 32, 2 encoder layers, 4 heads, and a
    /// 64-wide head MLP.
    pub fn desk(vocab_size: usize) -> Self {
        EstimatorDims {
            vocab_size,
            width: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            head_hidden: 64,
            max_positions: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.width,
            self.layers,
            self.heads,
            self.ffn_hidden,
            self.head_hidden,
            self.max_positions,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(CoreError::InvalidConfig(
                "estimator dimensions must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "head count {} does not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// One encoder layer: multi-head self-attention and a feed-forward block,
/// each with a residual connection and layer normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct EncoderLayer<T: Float> {
    pub wq: Mat<T>,
    pub bq: Vec<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub bv: Vec<T>,
    pub wo: Mat<T>,
    pub bo: Vec<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ff_w1: Mat<T>,
    pub ff_b1: Vec<T>,
    pub ff_w2: Mat<T>,
    pub ff_b2: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
}

/// All weights of the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Float", deserialize = "T: Float"))]
pub struct EstimatorParams<T: Float> {
    pub dims: EstimatorDims,
    pub token_embed: Mat<T>,
    pub scene_embed: Mat<T>,
    pub pos_embed: Mat<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub head_w1: Mat<T>,
    pub head_b1: Vec<T>,
    pub head_w2: Vec<T>,
    pub head_b2: T,
}

impl<T: Float> EstimatorParams<T> {
    pub fn zeros(dims: EstimatorDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.width;
        let layer = || EncoderLayer {
            wq: Mat::zeros(d, d),
            bq: vec![T::zero(); d],
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            bv: vec![T::zero(); d],
            wo: Mat::zeros(d, d),
            bo: vec![T::zero(); d],
            ln1_gamma: vec![T::zero(); d],
            ln1_beta: vec![T::zero(); d],
            ff_w1: Mat::zeros(d, dims.ffn_hidden),
            ff_b1: vec![T::zero(); dims.ffn_hidden],
            ff_w2: Mat::zeros(dims.ffn_hidden, d),
            ff_b2: vec![T::zero(); d],
            ln2_gamma: vec![T::zero(); d],
            ln2_beta: vec![T::zero(); d],
        };
        Ok(EstimatorParams {
            dims,
            token_embed: Mat::zeros(dims.vocab_size, d),
            scene_embed: Mat::zeros(dims.vocab_size, d),
            pos_embed: Mat::zeros(dims.max_positions, d),
            layers: (0..dims.layers).map(|_| layer()).collect(),
            head_w1: Mat::zeros(d, dims.head_hidden),
            head_b1: vec![T::zero(); dims.head_hidden],
            head_w2: vec![T::zero(); dims.head_hidden],
            head_b2: T::zero(),
        })
    }

    /// Xavier-uniform weights, unit layer-norm gains, zero biases.
    pub fn init(dims: EstimatorDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| {
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            })
        };
        let mut params = Self::zeros(dims)?;
        params.token_embed = xavier(dims.vocab_size, dims.width);
        params.scene_embed = xavier(dims.vocab_size, dims.width);
        params.pos_embed = xavier(dims.max_positions, dims.width);
        for layer in &mut params.layers {
            layer.wq = xavier(dims.width, dims.width);
            layer.wk = xavier(dims.width, dims.width);
            layer.wv = xavier(dims.width, dims.width);
            layer.wo = xavier(dims.width, dims.width);
            layer.ln1_gamma = vec![T::one(); dims.width];
            layer.ln2_gamma = vec![T::one(); dims.width];
            layer.ff_w1 = xavier(dims.width, dims.ffn_hidden);
            layer.ff_w2 = xavier(dims.ffn_hidden, dims.width);
        }
        params.head_w1 = xavier(dims.width, dims.head_hidden);
        params.head_w2 = (0..dims.head_hidden)
            .map(|_| {
                let bound = (6.0 / (dims.head_hidden + 1) as f64).sqrt();
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            })
            .collect();
        Ok(params)
    }

    /// Every parameter drawn uniformly from `[-bound, bound]`, used by
    /// gradient-check and bidirectionality tests.
    pub fn init_uniform(dims: EstimatorDims, bound: f64, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = params.flat_len();
        for i in 0..n {
            params.flat_set(i, T::from_f64_lossy(rng.gen_range(-bound..bound)));
        }
        Ok(params)
    }

    fn segments(&self) -> usize {
        3 + self.layers.len() * 15 + 4
    }

    fn segment(&self, seg: usize) -> &[T] {
        match seg {
            0 => self.token_embed.data(),
            1 => self.scene_embed.data(),
            2 => self.pos_embed.data(),
            s if s < 3 + self.layers.len() * 15 => {
                let layer = &self.layers[(s - 3) / 15];
                match (s - 3) % 15 {
                    0 => layer.wq.data(),
                    1 => &layer.bq,
                    2 => layer.wk.data(),
                    3 => layer.wv.data(),
                    4 => &layer.bv,
                    5 => layer.wo.data(),
                    6 => &layer.bo,
                    7 => &layer.ln1_gamma,
                    8 => &layer.ln1_beta,
                    9 => layer.ff_w1.data(),
                    10 => &layer.ff_b1,
                    11 => layer.ff_w2.data(),
                    12 => &layer.ff_b2,
                    13 => &layer.ln2_gamma,
                    _ => &layer.ln2_beta,
                }
            }
            s => {
                let head = s - 3 - self.layers.len() * 15;
                match head {
                    0 => self.head_w1.data(),
                    1 => &self.head_b1,
                    2 => &self.head_w2,
                    _ => std::slice::from_ref(&self.head_b2),
                }
            }
        }
    }

    fn segment_mut(&mut self, seg: usize) -> &mut [T] {
        let layer_segs = self.layers.len() * 15;
        match seg {
            0 => self.token_embed.data_mut(),
            1 => self.scene_embed.data_mut(),
            2 => self.pos_embed.data_mut(),
            s if s < 3 + layer_segs => {
                let layer = &mut self.layers[(s - 3) / 15];
                match (s - 3) % 15 {
                    0 => layer.wq.data_mut(),
                    1 => &mut layer.bq,
                    2 => layer.wk.data_mut(),
                    3 => layer.wv.data_mut(),
                    4 => &mut layer.bv,
                    5 => layer.wo.data_mut(),
                    6 => &mut layer.bo,
                    7 => &mut layer.ln1_gamma,
                    8 => &mut layer.ln1_beta,
                    9 => layer.ff_w1.data_mut(),
                    10 => &mut layer.ff_b1,
                    11 => layer.ff_w2.data_mut(),
                    12 => &mut layer.ff_b2,
                    13 => &mut layer.ln2_gamma,
                    _ => &mut layer.ln2_beta,
                }
            }
            s => {
                let head = s - 3 - layer_segs;
                match head {
                    0 => self.head_w1.data_mut(),
                    1 => &mut self.head_b1,
                    2 => &mut self.head_w2,
                    _ => std::slice::from_mut(&mut self.head_b2),
                }
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        (0..self.segments()).map(|s| self.segment(s).len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.flat_len());
        for s in 0..self.segments() {
            flat.extend_from_slice(self.segment(s));
        }
        flat
    }

    pub fn from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} flat values for {} parameters",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for s in 0..self.segments() {
            let seg = self.segment_mut(s);
            seg.copy_from_slice(&flat[offset..offset + seg.len()]);
            offset += seg.len();
        }
        Ok(())
    }

    pub fn flat_get(&self, index: usize) -> T {
        let (seg, off) = self.locate(index);
        self.segment(seg)[off]
    }

    pub fn flat_set(&mut self, index: usize, value: T) {
        let (seg, off) = self.locate(index);
        self.segment_mut(seg)[off] = value;
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for s in 0..self.segments() {
            let len = self.segment(s).len();
            if index < len {
                return (s, index);
            }
            index -= len;
        }
        panic!("flat index out of range");
    }
}

/// Input to the estimator: the scene's instance tokens, the caption
/// token sequence (prefix, predicted token, postfix), and the target
/// position whose output embedding feeds the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorInput {
    pub scene_tokens: Vec<usize>,
    pub caption_tokens: Vec<usize>,
    /// Zero-based index into `caption_tokens`.
    pub target_position: usize,
}

impl EstimatorInput {
    /// Builds the input for scoring position `target` (zero-based) of a
    /// token sequence against a scene.
    pub fn from_scene(scene: &Scene, caption_tokens: Vec<usize>, target: usize) -> Self {
        let mut scene_tokens = Vec::new();
        for instance in scene.instances() {
            scene_tokens.push(instance.object);
            if let Some(attr) = instance.attribute {
                scene_tokens.push(attr);
            }
        }
        EstimatorInput {
            scene_tokens,
            caption_tokens,
            target_position: target,
        }
    }

    fn validate(&self, dims: &EstimatorDims) -> Result<()> {
        if self.caption_tokens.is_empty() {
            return Err(CoreError::ShapeMismatch("empty caption sequence".into()));
        }
        if self.target_position >= self.caption_tokens.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "target position {} in caption of length {}",
                self.target_position,
                self.caption_tokens.len()
            )));
        }
        if self.caption_tokens.len() > dims.max_positions {
            return Err(CoreError::ShapeMismatch(format!(
                "caption length {} exceeds positional table {}",
                self.caption_tokens.len(),
                dims.max_positions
            )));
        }
        for &t in self.scene_tokens.iter().chain(&self.caption_tokens) {
            if t >= dims.vocab_size {
                return Err(CoreError::TokenOutOfRange {
                    index: t,
                    size: dims.vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64_lossy(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a binary label, with an
/// optional weight on the positive class.
pub fn bce_loss<T: Float>(logit: T, label: bool, pos_weight: T) -> T {
    if label {
        pos_weight * softplus(-logit)
    } else {
        softplus(logit)
    }
}

fn bce_dlogit<T: Float>(logit: T, label: bool, pos_weight: T) -> T {
    let s = sigmoid(logit);
    let c = if label { T::one() } else { T::zero() };
    s * (pos_weight * c + T::one() - c) - pos_weight * c
}

struct LnCache<T: Float> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

struct LayerCache<T: Float> {
    x_in: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    attn_probs: Vec<Mat<T>>,
    z: Mat<T>,
    ln1: LnCache<T>,
    y1: Mat<T>,
    ff_pre: Mat<T>,
    ff_act: Mat<T>,
    ln2: LnCache<T>,
}

/// Activations recorded by a forward pass, consumed by `backward`.
pub struct ForwardCache<T: Float> {
    scene_len: usize,
    layers: Vec<LayerCache<T>>,
    picked_row: usize,
    picked: Vec<T>,
    head_pre: Vec<T>,
    head_act: Vec<T>,
    pub logit: T,
    pub c_hat: T,
}

fn add_bias_rows<T: Float>(m: &mut Mat<T>, bias: &[T]) {
    for i in 0..m.rows() {
        for (x, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn layer_norm<T: Float>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, LnCache<T>) {
    let (s, d) = (x.rows(), x.cols());
    let dn = T::from_usize(d).unwrap();
    let eps = T::from_f64_lossy(LN_EPS);
    let mut xhat = Mat::zeros(s, d);
    let mut rstd = Vec::with_capacity(s);
    let mut out = Mat::zeros(s, d);
    for i in 0..s {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat.set(i, j, h);
            out.set(i, j, gamma[j] * h + beta[j]);
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Float>(
    dy: &Mat<T>,
    cache: &LnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Mat<T> {
    let (s, d) = (dy.rows(), dy.cols());
    let dn = T::from_usize(d).unwrap();
    let mut dx = Mat::zeros(s, d);
    for i in 0..s {
        let dy_row = dy.row(i);
        let xhat_row = cache.xhat.row(i);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = dy_row[j] * gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_row[j];
            dgamma[j] += dy_row[j] * xhat_row[j];
            dbeta[j] += dy_row[j];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dy_row[j] * gamma[j];
            dx.set(i, j, r * (dxh - mean_dxhat - xhat_row[j] * mean_dxhat_xhat));
        }
    }
    dx
}

/// Full forward pass; returns ĉ together with the activation cache.
pub fn forward_cached<T: Float>(
    params: &EstimatorParams<T>,
    input: &EstimatorInput,
) -> Result<(T, ForwardCache<T>)> {
    input.validate(&params.dims)?;
    let dims = &params.dims;
    let (d, heads, dh) = (dims.width, dims.heads, dims.head_dim());
    let scene_len = input.scene_tokens.len();
    let seq = scene_len + input.caption_tokens.len();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    // Scene rows use the scene-object table; caption rows use the token
    // table plus learned positional encodings.
    let mut x = Mat::zeros(seq, d);
    for (i, &tok) in input.scene_tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(params.scene_embed.row(tok));
    }
    for (j, &tok) in input.caption_tokens.iter().enumerate() {
        let row = x.row_mut(scene_len + j);
        for (idx, v) in row.iter_mut().enumerate() {
            *v = params.token_embed.get(tok, idx) + params.pos_embed.get(j, idx);
        }
    }

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let x_in = x;
        let mut q = x_in.mul(&layer.wq);
        add_bias_rows(&mut q, &layer.bq);
        // No key bias: it shifts every attention score in a row by the
        // same constant, which the softmax cancels exactly.
        let k = x_in.mul(&layer.wk);
        let mut v = x_in.mul(&layer.wv);
        add_bias_rows(&mut v, &layer.bv);

        let mut attn_probs = Vec::with_capacity(heads);
        let mut z = Mat::zeros(seq, d);
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mut probs = Mat::zeros(seq, seq);
            for i in 0..seq {
                let qi = &q.row(i)[lo..hi];
                let row = probs.row_mut(i);
                let mut max = T::neg_infinity();
                for j in 0..seq {
                    let score = scale * dot(qi, &k.row(j)[lo..hi]);
                    row[j] = score;
                    max = max.max(score);
                }
                let mut sum = T::zero();
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
            for i in 0..seq {
                for j in 0..seq {
                    let a = probs.get(i, j);
                    if a == T::zero() {
                        continue;
                    }
                    let vj = v.row(j);
                    let zi = z.row_mut(i);
                    for (c, slot) in zi[lo..hi].iter_mut().enumerate() {
                        *slot += a * vj[lo + c];
                    }
                }
            }
            attn_probs.push(probs);
        }
        let mut attn_out = z.mul(&layer.wo);
        add_bias_rows(&mut attn_out, &layer.bo);

        let mut res1 = x_in.clone();
        res1.add_assign(&attn_out);
        let (y1, ln1) = layer_norm(&res1, &layer.ln1_gamma, &layer.ln1_beta);

        let mut ff_pre = y1.mul(&layer.ff_w1);
        add_bias_rows(&mut ff_pre, &layer.ff_b1);
        let mut ff_act = Mat::zeros(seq, dims.ffn_hidden);
        for i in 0..seq {
            for j in 0..dims.ffn_hidden {
                ff_act.set(i, j, gelu(ff_pre.get(i, j)));
            }
        }
        let mut ff_out = ff_act.mul(&layer.ff_w2);
        add_bias_rows(&mut ff_out, &layer.ff_b2);

        let mut res2 = y1.clone();
        res2.add_assign(&ff_out);
        let (y2, ln2) = layer_norm(&res2, &layer.ln2_gamma, &layer.ln2_beta);

        x = y2;
        layer_caches.push(LayerCache {
            x_in,
            q,
            k,
            v,
            attn_probs,
            z,
            ln1,
            y1,
            ff_pre,
            ff_act,
            ln2,
        });
    }

    let picked_row = scene_len + input.target_position;
    let picked = x.row(picked_row).to_vec();
    let mut head_pre = params.head_b1.clone();
    for (i, &p) in picked.iter().enumerate() {
        for (j, acc) in head_pre.iter_mut().enumerate() {
            *acc += p * params.head_w1.get(i, j);
        }
    }
    let head_act: Vec<T> = head_pre.iter().map(|&u| gelu(u)).collect();
    let logit = dot(&head_act, &params.head_w2) + params.head_b2;
    let c_hat = sigmoid(logit);

    Ok((
        c_hat,
        ForwardCache {
            scene_len,
            layers: layer_caches,
            picked_row,
            picked,
            head_pre,
            head_act,
            logit,
            c_hat,
        },
    ))
}

/// The estimator's confidence ĉ ∈ (0, 1) for the target position.
pub fn estimator_forward<T: Float>(
    params: &EstimatorParams<T>,
    input: &EstimatorInput,
) -> Result<T> {
    Ok(forward_cached(params, input)?.0)
}

/// Accumulates the BCE gradient of one example into `grads`, returning
/// the example's loss. `grads` must have the same dims as `params`.
pub fn backward<T: Float>(
    params: &EstimatorParams<T>,
    input: &EstimatorInput,
    cache: &ForwardCache<T>,
    label: bool,
    pos_weight: T,
    grads: &mut EstimatorParams<T>,
) -> T {
    let dims = &params.dims;
    let (d, heads, dh) = (dims.width, dims.heads, dims.head_dim());
    let seq = cache.scene_len + input.caption_tokens.len();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let loss = bce_loss(cache.logit, label, pos_weight);
    let dlogit = bce_dlogit(cache.logit, label, pos_weight);

    // Head MLP.
    grads.head_b2 += dlogit;
    let mut d_head_act = vec![T::zero(); dims.head_hidden];
    for j in 0..dims.head_hidden {
        grads.head_w2[j] += cache.head_act[j] * dlogit;
        d_head_act[j] = params.head_w2[j] * dlogit;
    }
    let mut d_head_pre = vec![T::zero(); dims.head_hidden];
    for j in 0..dims.head_hidden {
        d_head_pre[j] = d_head_act[j] * gelu_derivative(cache.head_pre[j]);
        grads.head_b1[j] += d_head_pre[j];
    }
    let mut d_picked = vec![T::zero(); d];
    for i in 0..d {
        let mut acc = T::zero();
        for j in 0..dims.head_hidden {
            grads.head_w1.data_mut()[i * dims.head_hidden + j] +=
                cache.picked[i] * d_head_pre[j];
            acc += params.head_w1.get(i, j) * d_head_pre[j];
        }
        d_picked[i] = acc;
    }

    let mut dy = Mat::zeros(seq, d);
    dy.add_to_row(cache.picked_row, &d_picked);

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];
        // LN2.
        let d_res2 = layer_norm_backward(
            &dy,
            &lc.ln2,
            &layer.ln2_gamma,
            &mut gl.ln2_gamma,
            &mut gl.ln2_beta,
        );

        // Feed-forward block: res2 = y1 + ff(y1).
        let mut dy1 = d_res2.clone();
        let d_ff_out = &d_res2;
        gl.ff_w2.add_assign(&lc.ff_act.tmul(d_ff_out));
        for i in 0..seq {
            for (j, &g) in d_ff_out.row(i).iter().enumerate() {
                gl.ff_b2[j] += g;
            }
        }
        let d_ff_act = d_ff_out.mul_t(&layer.ff_w2);
        let mut d_ff_pre = Mat::zeros(seq, dims.ffn_hidden);
        for i in 0..seq {
            for j in 0..dims.ffn_hidden {
                d_ff_pre.set(
                    i,
                    j,
                    d_ff_act.get(i, j) * gelu_derivative(lc.ff_pre.get(i, j)),
                );
            }
        }
        gl.ff_w1.add_assign(&lc.y1.tmul(&d_ff_pre));
        for i in 0..seq {
            for (j, &g) in d_ff_pre.row(i).iter().enumerate() {
                gl.ff_b1[j] += g;
            }
        }
        dy1.add_assign(&d_ff_pre.mul_t(&layer.ff_w1));

        // LN1.
        let d_res1 = layer_norm_backward(
            &dy1,
            &lc.ln1,
            &layer.ln1_gamma,
            &mut gl.ln1_gamma,
            &mut gl.ln1_beta,
        );

        // Attention block: res1 = x_in + proj(attn(x_in)).
        let mut dx = d_res1.clone();
        let d_attn_out = &d_res1;
        gl.wo.add_assign(&lc.z.tmul(d_attn_out));
        for i in 0..seq {
            for (j, &g) in d_attn_out.row(i).iter().enumerate() {
                gl.bo[j] += g;
            }
        }
        let dz = d_attn_out.mul_t(&layer.wo);

        let mut dq = Mat::zeros(seq, d);
        let mut dk = Mat::zeros(seq, d);
        let mut dv = Mat::zeros(seq, d);
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let probs = &lc.attn_probs[h];
            // dA and dV.
            let mut d_probs = Mat::zeros(seq, seq);
            for i in 0..seq {
                let dz_i = &dz.row(i)[lo..hi];
                for j in 0..seq {
                    d_probs.set(i, j, dot(dz_i, &lc.v.row(j)[lo..hi]));
                    let a = probs.get(i, j);
                    if a == T::zero() {
                        continue;
                    }
                    let dv_j = dv.row_mut(j);
                    for (c, &g) in dz_i.iter().enumerate() {
                        dv_j[lo + c] += a * g;
                    }
                }
            }
            // Softmax rows, then the scaled dot-product.
            for i in 0..seq {
                let a_row = probs.row(i);
                let da_row = d_probs.row(i);
                let inner: T = a_row.iter().zip(da_row).map(|(&a, &g)| a * g).sum();
                for j in 0..seq {
                    let ds = a_row[j] * (da_row[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = lc.k.row(j);
                    let dq_i = dq.row_mut(i);
                    for c in lo..hi {
                        dq_i[c] += ds * kj[c];
                    }
                    let qi = lc.q.row(i);
                    let dk_j = dk.row_mut(j);
                    for c in lo..hi {
                        dk_j[c] += ds * qi[c];
                    }
                }
            }
        }

        gl.wq.add_assign(&lc.x_in.tmul(&dq));
        gl.wk.add_assign(&lc.x_in.tmul(&dk));
        gl.wv.add_assign(&lc.x_in.tmul(&dv));
        for i in 0..seq {
            for j in 0..d {
                gl.bq[j] += dq.get(i, j);
                gl.bv[j] += dv.get(i, j);
            }
        }
        dx.add_assign(&dq.mul_t(&layer.wq));
        dx.add_assign(&dk.mul_t(&layer.wk));
        dx.add_assign(&dv.mul_t(&layer.wv));

        dy = dx;
    }

    // Embedding tables.
    for (i, &tok) in input.scene_tokens.iter().enumerate() {
        grads.scene_embed.add_to_row(tok, dy.row(i));
    }
    for (j, &tok) in input.caption_tokens.iter().enumerate() {
        let row = dy.row(cache.scene_len + j);
        grads.token_embed.add_to_row(tok, row);
        grads.pos_embed.add_to_row(j, row);
    }

    loss
}
