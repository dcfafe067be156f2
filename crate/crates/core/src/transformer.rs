//! Encoder-decoder transformer whose feed-forward blocks are reservoirs.
//!
//! One encoder layer and one decoder layer, no layer normalisation, fixed
//! sinusoidal positions. Outputs stay in embedding space and are scored with
//! squared error against the model's own embedding of the target tokens.
//! Each feed-forward block projects a token down to the reservoir input,
//! runs the reservoir on that single token, projects the reservoir output
//! back up and adds the residual.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequencePair;
use crate::engine::{DifferentiableModel, Model};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DenseLayer, LossReduction};
use crate::param_space::{LayoutBuilder, ParameterVector};
use crate::reservoir::{BlackBox, Reservoir, ReservoirSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Width of the down projection, must equal the reservoir input width.
    pub reservoir_in: usize,
    /// Width read back from the reservoir.
    pub reservoir_out: usize,
    pub residual: bool,
    pub loss: LossReduction,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            embed_dim: 32,
            n_heads: 2,
            max_seq_len: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            reservoir_in: 5,
            reservoir_out: 100,
            residual: true,
            loss: LossReduction::Mean,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, embed_dim and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.encoder_layers != 1 || self.decoder_layers != 1 {
            return bad("only single-layer encoder and decoder are supported".into());
        }
        if self.reservoir_in == 0 || self.reservoir_out == 0 {
            return bad("reservoir adapter widths must be positive".into());
        }
        Ok(())
    }

    /// Trainable parameter count implied by the architecture alone.
    pub fn analytic_param_count(&self) -> usize {
        let d = self.embed_dim;
        let attention = 4 * (d * d + d);
        let ffn = (d * self.reservoir_in + self.reservoir_in) + (self.reservoir_out * d + d);
        self.vocab_size * d + d + attention * 3 + ffn * 2 + (d * d + d)
    }
}

/// Fixed sinusoidal position codes, `max_len x dim`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..max_len)
        .map(|pos| {
            (0..dim)
                .map(|i| {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
                    let a = pos as f64 / freq;
                    if i % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// `softmax(q k^T / sqrt(d)) v`, rows as positions. Returns the context rows
/// and the attention weights. With `causal`, query `i` sees keys `0..=i`.
pub fn scaled_dot_product_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    causal: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if q.is_empty() || k.is_empty() {
        return Err(Error::InvalidConfig("attention needs at least one query and key".into()));
    }
    check_len("attention values", k.len(), v.len())?;
    let dk = q[0].len();
    let dv = v[0].len();
    for row in q.iter().chain(k) {
        check_len("attention query/key width", dk, row.len())?;
    }
    for row in v {
        check_len("attention value width", dv, row.len())?;
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::with_capacity(q.len());
    let mut ctx = Vec::with_capacity(q.len());
    for (i, qi) in q.iter().enumerate() {
        let visible = if causal { (i + 1).min(k.len()) } else { k.len() };
        let logits: Vec<f64> = k[..visible].iter().map(|kj| scale * dot(qi, kj)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        w.resize(k.len(), 0.0);
        let mut c = vec![0.0; dv];
        for (wj, vj) in w.iter().zip(v) {
            for (ci, vv) in c.iter_mut().zip(vj) {
                *ci += wj * vv;
            }
        }
        weights.push(w);
        ctx.push(c);
    }
    Ok((ctx, weights))
}

/// Gradients of [`scaled_dot_product_attention`] with respect to q, k and v.
fn attention_backward(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    weights: &[Vec<f64>],
    dctx: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dk_w = q[0].len();
    let scale = 1.0 / (dk_w as f64).sqrt();
    let mut dq = vec![vec![0.0; dk_w]; q.len()];
    let mut dk = vec![vec![0.0; dk_w]; k.len()];
    let mut dv = vec![vec![0.0; v[0].len()]; v.len()];
    for i in 0..q.len() {
        let w = &weights[i];
        let da: Vec<f64> = v.iter().map(|vj| dot(&dctx[i], vj)).collect();
        let mix: f64 = w.iter().zip(&da).map(|(a, b)| a * b).sum();
        for j in 0..k.len() {
            if w[j] == 0.0 {
                continue;
            }
            axpy(&mut dv[j], w[j], &dctx[i]);
            let ds = w[j] * (da[j] - mix) * scale;
            axpy(&mut dq[i], ds, &k[j]);
            axpy(&mut dk[j], ds, &q[i]);
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn add_rows(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        axpy(ra, 1.0, rb);
    }
}

fn columns(m: &[Vec<f64>], r: Range<usize>) -> Vec<Vec<f64>> {
    m.iter().map(|row| row[r.clone()].to_vec()).collect()
}

#[derive(Debug, Clone)]
struct MultiHeadAttention {
    q: DenseLayer,
    k: DenseLayer,
    v: DenseLayer,
    o: DenseLayer,
    heads: usize,
    causal: bool,
}

struct AttentionCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    weights: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl MultiHeadAttention {
    fn register(b: &mut LayoutBuilder, name: &str, d: usize, heads: usize, causal: bool) -> Self {
        let mut proj = |p: &str| DenseLayer::register(b, &format!("{name}.{p}"), d, d, Activation::Identity);
        Self {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            o: proj("o"),
            heads,
            causal,
        }
    }

    fn layers(&self) -> [&DenseLayer; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn forward(&self, theta: &[f64], xq: &[Vec<f64>], xkv: &[Vec<f64>]) -> Result<AttentionCache> {
        let map = |l: &DenseLayer, xs: &[Vec<f64>]| xs.iter().map(|x| l.forward(theta, x)).collect::<Result<Vec<_>>>();
        let q = map(&self.q, xq)?;
        let k = map(&self.k, xkv)?;
        let v = map(&self.v, xkv)?;
        let hd = self.q.outputs / self.heads;
        let mut ctx = vec![Vec::with_capacity(self.q.outputs); q.len()];
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let r = h * hd..(h + 1) * hd;
            let (c, w) = scaled_dot_product_attention(&columns(&q, r.clone()), &columns(&k, r.clone()), &columns(&v, r), self.causal)?;
            for (row, part) in ctx.iter_mut().zip(c) {
                row.extend(part);
            }
            weights.push(w);
        }
        let out = map(&self.o, &ctx)?;
        Ok(AttentionCache { q, k, v, weights, ctx, out })
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    fn backward(
        &self,
        theta: &[f64],
        xq: &[Vec<f64>],
        xkv: &[Vec<f64>],
        cache: &AttentionCache,
        dout: &[Vec<f64>],
        grad: &mut [f64],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dctx: Vec<Vec<f64>> = (0..dout.len())
            .map(|i| self.o.backward(theta, &cache.ctx[i], &cache.out[i], &dout[i], grad))
            .collect();
        let d = self.q.outputs;
        let hd = d / self.heads;
        let mut dq = vec![vec![0.0; d]; xq.len()];
        let mut dk = vec![vec![0.0; d]; xkv.len()];
        let mut dv = vec![vec![0.0; d]; xkv.len()];
        for h in 0..self.heads {
            let r = h * hd..(h + 1) * hd;
            let (hq, hk, hv) = attention_backward(
                &columns(&cache.q, r.clone()),
                &columns(&cache.k, r.clone()),
                &columns(&cache.v, r.clone()),
                &cache.weights[h],
                &columns(&dctx, r.clone()),
            );
            for (dst, src) in [(&mut dq, hq), (&mut dk, hk), (&mut dv, hv)] {
                for (row, part) in dst.iter_mut().zip(src) {
                    row[r.clone()].copy_from_slice(&part);
                }
            }
        }
        let dxq = (0..xq.len())
            .map(|i| self.q.backward(theta, &xq[i], &cache.q[i], &dq[i], grad))
            .collect();
        let dxkv = (0..xkv.len())
            .map(|j| {
                let mut a = self.k.backward(theta, &xkv[j], &cache.k[j], &dk[j], grad);
                axpy(&mut a, 1.0, &self.v.backward(theta, &xkv[j], &cache.v[j], &dv[j], grad));
                a
            })
            .collect();
        (dxq, dxkv)
    }
}

/// Feed-forward block built around a reservoir.
pub struct ReservoirFfn {
    down: DenseLayer,
    up: DenseLayer,
    reservoir: Box<dyn Reservoir>,
    residual: bool,
}

struct FfnCache {
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl ReservoirFfn {
    pub fn register(
        b: &mut LayoutBuilder,
        name: &str,
        embed_dim: usize,
        reservoir: Box<dyn Reservoir>,
        residual: bool,
    ) -> Self {
        let down = DenseLayer::register(b, &format!("{name}.down"), embed_dim, reservoir.input_dim(), Activation::Identity);
        let up = DenseLayer::register(b, &format!("{name}.up"), reservoir.output_dim(), embed_dim, Activation::Identity);
        Self {
            down,
            up,
            reservoir,
            residual,
        }
    }

    pub fn reservoir(&self) -> &dyn Reservoir {
        self.reservoir.as_ref()
    }

    /// One token through the block.
    pub fn forward_token(&mut self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(theta, &[x.to_vec()])?.out.pop().expect("one token"))
    }

    fn forward(&mut self, theta: &[f64], xs: &[Vec<f64>]) -> Result<FfnCache> {
        if self.reservoir.is_stateful() {
            self.reservoir.reset_state();
        }
        let mut cache = FfnCache {
            z: Vec::with_capacity(xs.len()),
            r: Vec::with_capacity(xs.len()),
            u: Vec::with_capacity(xs.len()),
            out: Vec::with_capacity(xs.len()),
        };
        for x in xs {
            cache.z.push(self.down.forward(theta, x)?);
        }
        // one reservoir evaluation per token, in token order
        cache.r = self.reservoir.forward_many(&cache.z)?;
        for (x, r) in xs.iter().zip(&cache.r) {
            let u = self.up.forward(theta, r)?;
            let mut out = u.clone();
            if self.residual {
                axpy(&mut out, 1.0, x);
            }
            cache.u.push(u);
            cache.out.push(out);
        }
        Ok(cache)
    }

    fn backward(&self, theta: &[f64], xs: &[Vec<f64>], cache: &FfnCache, dout: &[Vec<f64>], grad: &mut [f64]) -> Result<Vec<Vec<f64>>> {
        let mut dx = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let dr = self.up.backward(theta, &cache.r[i], &cache.u[i], &dout[i], grad);
            let dz = self.reservoir.input_gradient(&cache.z[i], &dr)?;
            let mut d = self.down.backward(theta, &xs[i], &cache.z[i], &dz, grad);
            if self.residual {
                axpy(&mut d, 1.0, &dout[i]);
            }
            dx.push(d);
        }
        Ok(dx)
    }
}

struct ForwardCache {
    x: Vec<Vec<f64>>,
    enc_attn: AttentionCache,
    h: Vec<Vec<f64>>,
    enc_ffn: FfnCache,
    y: Vec<Vec<f64>>,
    dec_self: AttentionCache,
    a: Vec<Vec<f64>>,
    dec_cross: AttentionCache,
    c: Vec<Vec<f64>>,
    dec_ffn: FfnCache,
    out: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn encoded(&self) -> &[Vec<f64>] {
        &self.enc_ffn.out
    }
}

pub struct ReservoirTransformer {
    config: TransformerConfig,
    params: ParameterVector,
    embedding: usize,
    bos: usize,
    enc_attn: MultiHeadAttention,
    enc_ffn: ReservoirFfn,
    dec_self: MultiHeadAttention,
    dec_cross: MultiHeadAttention,
    dec_ffn: ReservoirFfn,
    out: DenseLayer,
    positions: Vec<Vec<f64>>,
}

impl ReservoirTransformer {
    /// Encoder and decoder each get their own reservoir instance.
    pub fn new(config: TransformerConfig, encoder_reservoir: Box<dyn Reservoir>, decoder_reservoir: Box<dyn Reservoir>) -> Result<Self> {
        config.validate()?;
        for r in [&encoder_reservoir, &decoder_reservoir] {
            if r.input_dim() != config.reservoir_in || r.output_dim() != config.reservoir_out {
                return Err(Error::InvalidConfig(format!(
                    "reservoir is {}->{}, adapters expect {}->{}",
                    r.input_dim(),
                    r.output_dim(),
                    config.reservoir_in,
                    config.reservoir_out
                )));
            }
        }
        let d = config.embed_dim;
        let mut b = LayoutBuilder::default();
        let embedding = b.push("embedding", &[config.vocab_size, d]);
        let bos = b.push("bos", &[d]);
        let enc_attn = MultiHeadAttention::register(&mut b, "enc.self_attn", d, config.n_heads, false);
        let enc_ffn = ReservoirFfn::register(&mut b, "enc.ffn", d, encoder_reservoir, config.residual);
        let dec_self = MultiHeadAttention::register(&mut b, "dec.self_attn", d, config.n_heads, true);
        let dec_cross = MultiHeadAttention::register(&mut b, "dec.cross_attn", d, config.n_heads, false);
        let dec_ffn = ReservoirFfn::register(&mut b, "dec.ffn", d, decoder_reservoir, config.residual);
        let out = DenseLayer::register(&mut b, "out", d, d, Activation::Identity);
        let layout = b.finish();

        let mut params = ParameterVector::zeros(layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let theta = params.values_mut();
        let unit = 3f64.sqrt();
        for x in &mut theta[embedding..bos + d] {
            *x = rng.gen_range(-unit..=unit);
        }
        let mut dense: Vec<&DenseLayer> = Vec::new();
        dense.extend(enc_attn.layers());
        dense.extend([&enc_ffn.down, &enc_ffn.up]);
        dense.extend(dec_self.layers());
        dense.extend(dec_cross.layers());
        dense.extend([&dec_ffn.down, &dec_ffn.up, &out]);
        for l in dense {
            l.init(theta, &mut rng);
        }

        Ok(Self {
            positions: sinusoidal_positions(config.max_seq_len, d),
            config,
            params,
            embedding,
            bos,
            enc_attn,
            enc_ffn,
            dec_self,
            dec_cross,
            dec_ffn,
            out,
        })
    }

    /// Builds both reservoirs from `spec`. With `opaque` they are wrapped in
    /// [`BlackBox`] so no gradient can leak through.
    pub fn from_spec(config: TransformerConfig, spec: &ReservoirSpec, opaque: bool) -> Result<Self> {
        let build = || -> Result<Box<dyn Reservoir>> {
            let r = spec.build()?;
            Ok(if opaque { Box::new(BlackBox(r)) } else { r })
        };
        Self::new(config, build()?, build()?)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn encoder_ffn(&self) -> &ReservoirFfn {
        &self.enc_ffn
    }

    pub fn decoder_ffn(&self) -> &ReservoirFfn {
        &self.dec_ffn
    }

    pub fn encoder_ffn_mut(&mut self) -> &mut ReservoirFfn {
        &mut self.enc_ffn
    }

    pub fn embed<'a>(&self, theta: &'a [f64], token: usize) -> &'a [f64] {
        let d = self.config.embed_dim;
        &theta[self.embedding + token * d..self.embedding + (token + 1) * d]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn with_position(&self, e: &[f64], pos: usize) -> Vec<f64> {
        e.iter().zip(&self.positions[pos]).map(|(a, b)| a + b).collect()
    }

    fn forward_cached(&mut self, theta: &[f64], source: &[usize], target: &[usize]) -> Result<ForwardCache> {
        check_len("parameter vector", self.params.len(), theta.len())?;
        self.check_tokens(source)?;
        self.check_tokens(target)?;
        let d = self.config.embed_dim;

        let x: Vec<Vec<f64>> = source.iter().enumerate().map(|(i, &t)| self.with_position(self.embed(theta, t), i)).collect();
        let enc_attn = self.enc_attn.forward(theta, &x, &x)?;
        let mut h = x.clone();
        add_rows(&mut h, &enc_attn.out);
        let enc_ffn = self.enc_ffn.forward(theta, &h)?;

        let bos = &theta[self.bos..self.bos + d];
        let y: Vec<Vec<f64>> = (0..target.len())
            .map(|i| {
                let e = if i == 0 { bos } else { self.embed(theta, target[i - 1]) };
                self.with_position(e, i)
            })
            .collect();
        let dec_self = self.dec_self.forward(theta, &y, &y)?;
        let mut a = y.clone();
        add_rows(&mut a, &dec_self.out);
        let dec_cross = self.dec_cross.forward(theta, &a, &enc_ffn.out)?;
        let mut c = a.clone();
        add_rows(&mut c, &dec_cross.out);
        let dec_ffn = self.dec_ffn.forward(theta, &c)?;
        let out = dec_ffn
            .out
            .iter()
            .map(|f| self.out.forward(theta, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardCache {
            x,
            enc_attn,
            h,
            enc_ffn,
            y,
            dec_self,
            a,
            dec_cross,
            c,
            dec_ffn,
            out,
        })
    }

    /// Teacher-forced output embeddings, one per target position.
    pub fn forward(&mut self, theta: &[f64], source: &[usize], target: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_cached(theta, source, target)?.out)
    }

    /// Squared error between `outputs` and the embeddings of `target`.
    pub fn embedding_loss(&self, theta: &[f64], outputs: &[Vec<f64>], target: &[usize]) -> Result<f64> {
        check_len("output positions", target.len(), outputs.len())?;
        let mut sum = 0.0;
        for (o, &t) in outputs.iter().zip(target) {
            sum += crate::nn::mse_loss(o, self.embed(theta, t))?;
        }
        Ok(sum * self.config.loss.scale(target.len() * self.config.embed_dim))
    }

    pub fn backprop_gradients(&mut self, theta: &[f64], source: &[usize], target: &[usize]) -> Result<(f64, Vec<f64>)> {
        for ffn in [&self.enc_ffn, &self.dec_ffn] {
            if !ffn.reservoir.gradient_available() {
                return Err(Error::GradientUnavailable(
                    "a reservoir block is opaque; use perturbative training".into(),
                ));
            }
        }
        let cache = self.forward_cached(theta, source, target)?;
        let loss = self.embedding_loss(theta, &cache.out, target)?;
        let d = self.config.embed_dim;
        let scale = 2.0 * self.config.loss.scale(target.len() * d);
        let mut grad = vec![0.0; theta.len()];

        let mut df = Vec::with_capacity(target.len());
        for (i, &t) in target.iter().enumerate() {
            let err: Vec<f64> = cache.out[i].iter().zip(self.embed(theta, t)).map(|(o, e)| scale * (o - e)).collect();
            let row = self.embedding + t * d;
            axpy(&mut grad[row..row + d], -1.0, &err);
            df.push(self.out.backward(theta, &cache.dec_ffn.out[i], &cache.out[i], &err, &mut grad));
        }

        let mut dc = self.dec_ffn.backward(theta, &cache.c, &cache.dec_ffn, &df, &mut grad)?;
        let (dq, mut de) = self.dec_cross.backward(theta, &cache.a, cache.encoded(), &cache.dec_cross, &dc, &mut grad);
        add_rows(&mut dc, &dq);
        let da = dc;
        let (dq, dkv) = self.dec_self.backward(theta, &cache.y, &cache.y, &cache.dec_self, &da, &mut grad);
        let mut dy = da;
        add_rows(&mut dy, &dq);
        add_rows(&mut dy, &dkv);
        for (i, g) in dy.iter().enumerate() {
            let start = if i == 0 { self.bos } else { self.embedding + target[i - 1] * d };
            axpy(&mut grad[start..start + d], 1.0, g);
        }

        let dh_ffn = self.enc_ffn.backward(theta, &cache.h, &cache.enc_ffn, &de, &mut grad)?;
        de = dh_ffn;
        let (dq, dkv) = self.enc_attn.backward(theta, &cache.x, &cache.x, &cache.enc_attn, &de, &mut grad);
        let mut dx = de;
        add_rows(&mut dx, &dq);
        add_rows(&mut dx, &dkv);
        for (&t, g) in source.iter().zip(&dx) {
            let start = self.embedding + t * d;
            axpy(&mut grad[start..start + d], 1.0, g);
        }
        Ok((loss, grad))
    }

    pub fn checkpoint(&self, reservoir: &ReservoirSpec) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            reservoir: reservoir.clone(),
            seed: self.config.seed,
            layout: self
                .params
                .layout()
                .iter()
                .map(|e| (e.name.clone(), e.shape.clone()))
                .collect(),
            values: self.params.values().to_vec(),
        }
    }

    /// Rebuilds a model from a checkpoint; reservoirs are regenerated from their spec.
    pub fn from_checkpoint(ck: &Checkpoint, opaque: bool) -> Result<Self> {
        let mut model = Self::from_spec(ck.config.clone(), &ck.reservoir, opaque)?;
        let layout: Vec<(String, Vec<usize>)> = model.params.layout().iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        if layout != ck.layout {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        model.params.set_values(&ck.values)?;
        Ok(model)
    }
}

impl Model for ReservoirTransformer {
    type Sample = SequencePair;

    fn parameters(&self) -> &ParameterVector {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    fn loss(&mut self, theta: &[f64], sample: &SequencePair) -> Result<f64> {
        let out = self.forward(theta, &sample.source, &sample.target)?;
        self.embedding_loss(theta, &out, &sample.target)
    }

    fn supports_batching(&self) -> bool {
        self.enc_ffn.reservoir.is_simulated() && self.dec_ffn.reservoir.is_simulated()
    }
}

impl DifferentiableModel for ReservoirTransformer {
    fn loss_and_gradient(&mut self, theta: &[f64], sample: &SequencePair) -> Result<(f64, Vec<f64>)> {
        self.backprop_gradients(theta, &sample.source, &sample.target)
    }
}

pub const CHECKPOINT_FORMAT: &str = "pgt-transformer";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON dump of configuration, reservoir recipe and the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TransformerConfig,
    pub reservoir: ReservoirSpec,
    pub seed: u64,
    pub layout: Vec<(String, Vec<usize>)>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}
