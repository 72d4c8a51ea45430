//! Deterministic CPU backbone for tests and desk-scale experiments.
//!
//! * encoder: 4x average pooling of the pixels (latent channels = 3)
//! * forward process: `z = (1 - t/T) x + (t/T) eps`
//! * text encoder: per-token `tanh(W e + b)` over a word-level vocabulary
//! * denoiser: one cross-attention layer (query from the latent cell, keys
//!   and values from the tokens) and a 2-layer tanh MLP per cell, combined
//!   as `eps = z + W_o ctx + MLP([z; ctx; t/T])`
//!
//! Low-rank adapters sit on the query, key, value and output projections. All math
//! is `f64` with a fixed loop order, so results are bit-reproducible.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{normalize_attention, AdapterState, Backbone, ForwardPass, LatentDims, LoraPair, TextEmbedding};
use crate::error::{Error, Result};
use crate::grid::{avg_pool2, avg_pool3, upsample_nearest, Planes};
use crate::seed::{self, Stream};
use crate::tokenizer::{TokenBindings, Tokenizer, Vocabulary};

pub const POOL_FACTOR: usize = 4;
pub const LATENT_CHANNELS: usize = 3;

pub const LORA_NAMES: [&str; 4] = ["attn.to_q", "attn.to_k", "attn.to_v", "attn.to_out"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub resolution: usize,
    pub attn_size: usize,
    pub num_timesteps: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            resolution: 64,
            attn_size: 16,
            num_timesteps: 1000,
            embed_dim: 16,
            key_dim: 16,
            value_dim: 16,
            hidden: 32,
            lora_rank: 32,
            lora_alpha: 32.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ToyBase {
    tok_emb: Array2<f64>,
    w_enc: Array2<f64>,
    b_enc: Array1<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyConfig,
    vocab: Vocabulary,
    base_vocab: usize,
    base: ToyBase,
}

fn normal_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn normal_vector(rng: &mut impl rand::Rng, len: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// `a . b` with a fixed summation order.
fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    debug_assert_eq!(k, k2);
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn effective(base: &Array2<f64>, pair: &LoraPair, scale: f64) -> Array2<f64> {
    let mut w = base.clone();
    let delta = matmul(&pair.up, &pair.down);
    w.zip_mut_with(&delta, |a, &d| *a += scale * d);
    w
}

/// `out[i] = sum_j w[i, j] x[j]`
#[inline]
fn matvec(w: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    let ws = w.as_slice().expect("standard layout");
    for (i, o) in out.iter_mut().enumerate() {
        let row = &ws[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// `out[j] += sum_i w[i, j] g[i]`
#[inline]
fn matvec_t_acc(w: &Array2<f64>, g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    let ws = w.as_slice().expect("standard layout");
    for (i, gi) in g.iter().enumerate() {
        let row = &ws[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gi;
        }
    }
}

/// `m[i, j] += g[i] x[j]`
#[inline]
fn outer_acc(m: &mut Array2<f64>, g: &[f64], x: &[f64]) {
    let cols = x.len();
    let ms = m.as_slice_mut().expect("standard layout");
    for (i, gi) in g.iter().enumerate() {
        let row = &mut ms[i * cols..(i + 1) * cols];
        for (o, xj) in row.iter_mut().zip(x) {
            *o += gi * xj;
        }
    }
}

struct AttnCache {
    pos: usize,
    pooled: Array2<f64>,
    lo: usize,
    hi: usize,
    range: f64,
}

pub struct ToyCache {
    tokens: Vec<usize>,
    zs: Vec<f64>,
    e: Vec<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ctx: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    p: Vec<f64>,
    hid: Vec<f64>,
    attn: Option<AttnCache>,
}

impl ToyBackbone {
    pub fn new(config: ToyConfig) -> Result<Self> {
        Self::with_vocabulary(config, Vocabulary::toy())
    }

    pub fn with_vocabulary(config: ToyConfig, vocab: Vocabulary) -> Result<Self> {
        let res = config.resolution;
        if res == 0 || res % POOL_FACTOR != 0 {
            return Err(Error::Backbone(format!(
                "toy resolution {res} must be a positive multiple of {POOL_FACTOR}"
            )));
        }
        let latent = res / POOL_FACTOR;
        if config.attn_size == 0 || latent % config.attn_size != 0 {
            return Err(Error::Backbone(format!(
                "attention size {} must divide the latent size {latent}",
                config.attn_size
            )));
        }
        if config.num_timesteps < 2 || config.lora_rank == 0 {
            return Err(Error::Backbone("toy backbone needs T >= 2 and rank >= 1".into()));
        }
        let mut rng = seed::rng(config.init_seed, Stream::BackboneInit, &[]);
        let (e, dk, dv, h, c) = (
            config.embed_dim,
            config.key_dim,
            config.value_dim,
            config.hidden,
            LATENT_CHANNELS,
        );
        let u = c + dv + 1;
        let base = ToyBase {
            tok_emb: normal_matrix(&mut rng, vocab.vocab_size(), e, 1.0),
            w_enc: normal_matrix(&mut rng, e, e, 1.0 / (e as f64).sqrt()),
            b_enc: normal_vector(&mut rng, e, 0.1),
            w_q: normal_matrix(&mut rng, dk, c, 1.0 / (c as f64).sqrt()),
            w_k: normal_matrix(&mut rng, dk, e, 1.0 / (e as f64).sqrt()),
            w_v: normal_matrix(&mut rng, dv, e, 1.0 / (e as f64).sqrt()),
            w_o: normal_matrix(&mut rng, c, dv, 0.5 / (dv as f64).sqrt()),
            w1: normal_matrix(&mut rng, h, u, 1.0 / (u as f64).sqrt()),
            b1: normal_vector(&mut rng, h, 0.1),
            w2: normal_matrix(&mut rng, c, h, 0.5 / (h as f64).sqrt()),
            b2: normal_vector(&mut rng, c, 2.0),
        };
        Ok(ToyBackbone {
            base_vocab: vocab.vocab_size(),
            config,
            vocab,
            base,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn token_row<'a>(&'a self, adapter: &'a AdapterState, tok: usize) -> Result<ndarray::ArrayView1<'a, f64>> {
        if tok < self.base_vocab {
            Ok(self.base.tok_emb.row(tok))
        } else {
            let row = adapter
                .embedding_row(tok)
                .ok_or_else(|| Error::Tokenizer(format!("token {tok} has no embedding")))?;
            Ok(adapter.pseudo_embeddings.row(row))
        }
    }

    fn encode_tokens(&self, adapter: &AdapterState, tokens: &[usize]) -> Result<Vec<f64>> {
        let ed = self.config.embed_dim;
        let mut e = vec![0.0; tokens.len() * ed];
        let mut pre = vec![0.0; ed];
        for (j, &tok) in tokens.iter().enumerate() {
            let x = self.token_row(adapter, tok)?;
            let x = x.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| x.to_vec());
            matvec(&self.base.w_enc, &x, &mut pre);
            for i in 0..ed {
                e[j * ed + i] = (pre[i] + self.base.b_enc[i]).tanh();
            }
        }
        Ok(e)
    }

    fn check_adapter(&self, adapter: &AdapterState) -> Result<()> {
        let c = &self.config;
        let ok = adapter.lora.len() == 4
            && adapter.lora[0].down.dim() == (adapter.rank, LATENT_CHANNELS)
            && adapter.lora[0].up.dim() == (c.key_dim, adapter.rank)
            && adapter.lora[1].down.dim() == (adapter.rank, c.embed_dim)
            && adapter.lora[1].up.dim() == (c.key_dim, adapter.rank)
            && adapter.lora[2].down.dim() == (adapter.rank, c.embed_dim)
            && adapter.lora[2].up.dim() == (c.value_dim, adapter.rank)
            && adapter.lora[3].down.dim() == (adapter.rank, c.value_dim)
            && adapter.lora[3].up.dim() == (LATENT_CHANNELS, adapter.rank)
            && adapter.pseudo_embeddings.ncols() == c.embed_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("adapter layout does not match the toy backbone".into()))
        }
    }

    /// Row-stochastic attention probabilities `(cells, tokens)` before any
    /// pooling or normalization.
    pub fn attention_probabilities(
        &self,
        adapter: &AdapterState,
        latent: &Planes,
        t: usize,
        tokens: &[usize],
    ) -> Result<Array2<f64>> {
        let pass = self.forward(adapter, latent, t, tokens, None)?;
        let cells = latent.dim().1 * latent.dim().2;
        Ok(Array2::from_shape_vec((cells, tokens.len()), pass.cache.p).expect("cache shape"))
    }
}

impl Backbone for ToyBackbone {
    type Cache = ToyCache;

    fn kind(&self) -> &'static str {
        "toy"
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn latent_dims(&self) -> LatentDims {
        let side = self.config.resolution / POOL_FACTOR;
        LatentDims {
            channels: LATENT_CHANNELS,
            height: side,
            width: side,
        }
    }

    fn attn_dims(&self) -> (usize, usize) {
        (self.config.attn_size, self.config.attn_size)
    }

    fn num_timesteps(&self) -> usize {
        self.config.num_timesteps
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn tokenizer_mut(&mut self) -> &mut dyn Tokenizer {
        &mut self.vocab
    }

    fn token_embedding(&self, token: usize) -> Result<Array1<f64>> {
        if token >= self.base_vocab {
            return Err(Error::Tokenizer(format!("token {token} is not in the base vocabulary")));
        }
        Ok(self.base.tok_emb.row(token).to_owned())
    }

    fn init_adapter(&self, bindings: &TokenBindings, seed: u64) -> Result<AdapterState> {
        let c = &self.config;
        let r = c.lora_rank;
        let mut rng = seed::rng(seed, Stream::AdapterInit, &[]);
        let dims = [
            (LATENT_CHANNELS, c.key_dim),
            (c.embed_dim, c.key_dim),
            (c.embed_dim, c.value_dim),
            (c.value_dim, LATENT_CHANNELS),
        ];
        let lora = LORA_NAMES
            .iter()
            .zip(dims)
            .map(|(name, (fan_in, fan_out))| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                LoraPair {
                    name: name.to_string(),
                    down: Array2::from_shape_simple_fn((r, fan_in), || dist.sample(&mut rng)),
                    up: Array2::zeros((fan_out, r)),
                }
            })
            .collect();
        let mut pseudo_embeddings = Array2::zeros((bindings.len(), c.embed_dim));
        for (row, b) in bindings.iter().enumerate() {
            pseudo_embeddings.row_mut(row).assign(&self.token_embedding(b.init_token_id)?);
        }
        Ok(AdapterState {
            rank: r,
            alpha: c.lora_alpha,
            lora,
            pseudo_embeddings,
            pseudo_tokens: bindings.iter().map(|b| b.token_id).collect(),
        })
    }

    fn encode_image(&self, pixels: &Planes) -> Result<Planes> {
        let res = self.config.resolution;
        if pixels.dim() != (3, res, res) {
            return Err(Error::Shape(format!(
                "toy encoder expects (3, {res}, {res}), got {:?}",
                pixels.dim()
            )));
        }
        avg_pool3(pixels, POOL_FACTOR)
    }

    fn decode_latent(&self, latent: &Planes) -> Result<Planes> {
        if latent.dim() != self.latent_dims().shape() {
            return Err(Error::Shape(format!("latent shape {:?}", latent.dim())));
        }
        Ok(upsample_nearest(latent, POOL_FACTOR))
    }

    fn noise_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let total = self.config.num_timesteps;
        if t >= total {
            return Err(Error::Backbone(format!("timestep {t} outside [0, {total})")));
        }
        let tau = t as f64 / total as f64;
        Ok((1.0 - tau, tau))
    }

    fn embed_text(&self, tokens: &[usize], adapter: &AdapterState) -> Result<TextEmbedding> {
        let e = self.encode_tokens(adapter, tokens)?;
        Ok(TextEmbedding {
            tokens: tokens.to_vec(),
            encoded: Array2::from_shape_vec((tokens.len(), self.config.embed_dim), e).expect("shape"),
        })
    }

    fn forward(
        &self,
        adapter: &AdapterState,
        latent: &Planes,
        t: usize,
        tokens: &[usize],
        attn_token: Option<usize>,
    ) -> Result<ForwardPass<ToyCache>> {
        self.check_adapter(adapter)?;
        let dims = self.latent_dims();
        if latent.dim() != dims.shape() {
            return Err(Error::Shape(format!(
                "latent {:?}, expected {:?}",
                latent.dim(),
                dims.shape()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Tokenizer("empty token sequence".into()));
        }
        let total = self.config.num_timesteps;
        if t >= total {
            return Err(Error::Backbone(format!("timestep {t} outside [0, {total})")));
        }
        let attn_pos = match attn_token {
            Some(tok) => Some(tokens.iter().position(|&x| x == tok).ok_or_else(|| {
                Error::Tokenizer(format!("token {tok} does not occur in the prompt"))
            })?),
            None => None,
        };

        let cfg = &self.config;
        let (c, dk, dv, hd) = (LATENT_CHANNELS, cfg.key_dim, cfg.value_dim, cfg.hidden);
        let (h, w) = dims.spatial();
        let cells = h * w;
        let l = tokens.len();
        let tau = t as f64 / total as f64;
        let scale = adapter.scaling();
        let inv_sqrt = 1.0 / (dk as f64).sqrt();

        let mut zs = vec![0.0; cells * c];
        for ((ch, y, x), v) in latent.indexed_iter() {
            zs[(y * w + x) * c + ch] = *v;
        }
        let e = self.encode_tokens(adapter, tokens)?;
        let ed = cfg.embed_dim;
        let wq = effective(&self.base.w_q, &adapter.lora[0], scale);
        let wk = effective(&self.base.w_k, &adapter.lora[1], scale);
        let wv = effective(&self.base.w_v, &adapter.lora[2], scale);
        let wo = effective(&self.base.w_o, &adapter.lora[3], scale);

        let mut k = vec![0.0; l * dk];
        let mut v = vec![0.0; l * dv];
        for j in 0..l {
            let ej = &e[j * ed..(j + 1) * ed];
            matvec(&wk, ej, &mut k[j * dk..(j + 1) * dk]);
            matvec(&wv, ej, &mut v[j * dv..(j + 1) * dv]);
        }

        let mut q = vec![0.0; cells * dk];
        let mut p = vec![0.0; cells * l];
        let mut hid = vec![0.0; cells * hd];
        let mut out = vec![0.0; cells * c];
        let mut ctx = vec![0.0; cells * dv];
        let mut u = vec![0.0; c + dv + 1];
        let mut skip = vec![0.0; c];
        let mut g = vec![0.0; hd];
        for s in 0..cells {
            let zs_s = &zs[s * c..(s + 1) * c];
            let qs = &mut q[s * dk..(s + 1) * dk];
            matvec(&wq, zs_s, qs);
            let ps = &mut p[s * l..(s + 1) * l];
            let mut max = f64::NEG_INFINITY;
            for j in 0..l {
                let kj = &k[j * dk..(j + 1) * dk];
                let mut acc = 0.0;
                for (a, b) in qs.iter().zip(kj) {
                    acc += a * b;
                }
                ps[j] = acc * inv_sqrt;
                max = max.max(ps[j]);
            }
            let mut norm = 0.0;
            for pj in ps.iter_mut() {
                *pj = (*pj - max).exp();
                norm += *pj;
            }
            for pj in ps.iter_mut() {
                *pj /= norm;
            }
            u[..c].copy_from_slice(zs_s);
            u[c..c + dv].fill(0.0);
            for j in 0..l {
                let vj = &v[j * dv..(j + 1) * dv];
                for (ui, vi) in u[c..c + dv].iter_mut().zip(vj) {
                    *ui += ps[j] * vi;
                }
            }
            u[c + dv] = tau;
            ctx[s * dv..(s + 1) * dv].copy_from_slice(&u[c..c + dv]);
            matvec(&wo, &u[c..c + dv], &mut skip);
            matvec(&self.base.w1, &u, &mut g);
            let hs = &mut hid[s * hd..(s + 1) * hd];
            for i in 0..hd {
                hs[i] = (g[i] + self.base.b1[i]).tanh();
            }
            let os = &mut out[s * c..(s + 1) * c];
            matvec(&self.base.w2, hs, os);
            for i in 0..c {
                os[i] += self.base.b2[i] + zs_s[i] + skip[i];
            }
        }

        let mut prediction = Planes::zeros(dims.shape());
        for ((ch, y, x), val) in prediction.indexed_iter_mut() {
            *val = out[(y * w + x) * c + ch];
        }

        let (attention, attn) = match attn_pos {
            Some(pos) => {
                let raw = Array2::from_shape_fn((h, w), |(y, x)| p[(y * w + x) * l + pos]);
                let (ah, aw) = self.attn_dims();
                let pooled = avg_pool2(&raw, ah, aw)?;
                let normalized = normalize_attention(&pooled);
                let (mut lo, mut hi) = (0, 0);
                let flat = pooled.as_slice().expect("standard layout");
                for (i, &val) in flat.iter().enumerate() {
                    if val < flat[lo] {
                        lo = i;
                    }
                    if val > flat[hi] {
                        hi = i;
                    }
                }
                let range = flat[hi] - flat[lo];
                (
                    Some(normalized),
                    Some(AttnCache {
                        pos,
                        pooled,
                        lo,
                        hi,
                        range,
                    }),
                )
            }
            None => (None, None),
        };

        Ok(ForwardPass {
            prediction,
            attention,
            cache: ToyCache {
                tokens: tokens.to_vec(),
                zs,
                e,
                wk,
                wv,
                wo,
                ctx,
                k,
                v,
                q,
                p,
                hid,
                attn,
            },
        })
    }

    fn backward(
        &self,
        adapter: &AdapterState,
        pass: &ForwardPass<ToyCache>,
        grad_prediction: &Planes,
        grad_attention: Option<&Array2<f64>>,
        grads: &mut AdapterState,
    ) -> Result<()> {
        adapter.check_layout(grads)?;
        let cache = &pass.cache;
        let dims = self.latent_dims();
        if grad_prediction.dim() != dims.shape() {
            return Err(Error::Shape("prediction gradient shape".into()));
        }
        let cfg = &self.config;
        let (c, dk, dv, hd, ed) = (LATENT_CHANNELS, cfg.key_dim, cfg.value_dim, cfg.hidden, cfg.embed_dim);
        let (h, w) = dims.spatial();
        let cells = h * w;
        let l = cache.tokens.len();
        let scale = adapter.scaling();
        let inv_sqrt = 1.0 / (dk as f64).sqrt();

        // gradient reaching the raw attention probabilities of the tracked token
        let mut dp_attn = vec![0.0; cells];
        let attn_pos = match (grad_attention, &cache.attn) {
            (Some(ga), Some(ac)) => {
                let (ah, aw) = self.attn_dims();
                if ga.dim() != (ah, aw) {
                    return Err(Error::Shape("attention gradient shape".into()));
                }
                let mut gp = Array2::<f64>::zeros((ah, aw));
                if ac.range > 0.0 {
                    let r = ac.range;
                    let flat = ac.pooled.as_slice().unwrap();
                    let lo_v = flat[ac.lo];
                    let mut total = 0.0;
                    let mut weighted = 0.0;
                    for (&gi, &a) in ga.iter().zip(flat) {
                        total += gi;
                        weighted += gi * (a - lo_v) / r;
                    }
                    let gps = gp.as_slice_mut().unwrap();
                    for (o, &gi) in gps.iter_mut().zip(ga.iter()) {
                        *o = gi / r;
                    }
                    gps[ac.lo] += (weighted - total) / r;
                    gps[ac.hi] -= weighted / r;
                }
                let (fy, fx) = (h / ah, w / aw);
                let norm = (fy * fx) as f64;
                for y in 0..h {
                    for x in 0..w {
                        dp_attn[y * w + x] = gp[[y / fy, x / fx]] / norm;
                    }
                }
                Some(ac.pos)
            }
            (Some(_), None) => {
                return Err(Error::Backbone("attention gradient given but no map was computed".into()))
            }
            _ => None,
        };

        let mut d_wq = Array2::<f64>::zeros((dk, c));
        let mut d_wk = Array2::<f64>::zeros((dk, ed));
        let mut d_wv = Array2::<f64>::zeros((dv, ed));
        let mut d_wo = Array2::<f64>::zeros((c, dv));
        let mut dk_acc = vec![0.0; l * dk];
        let mut dv_acc = vec![0.0; l * dv];

        let mut dout = vec![0.0; c];
        let mut dhid = vec![0.0; hd];
        let mut du = vec![0.0; c + dv + 1];
        let mut dp = vec![0.0; l];
        let mut da = vec![0.0; l];
        let mut dq = vec![0.0; dk];
        for s in 0..cells {
            let (y, x) = (s / w, s % w);
            for (ch, o) in dout.iter_mut().enumerate() {
                *o = grad_prediction[[ch, y, x]];
            }
            let hs = &cache.hid[s * hd..(s + 1) * hd];
            dhid.fill(0.0);
            matvec_t_acc(&self.base.w2, &dout, &mut dhid);
            for (dh, hv) in dhid.iter_mut().zip(hs) {
                *dh *= 1.0 - hv * hv;
            }
            du.fill(0.0);
            matvec_t_acc(&self.base.w1, &dhid, &mut du);
            matvec_t_acc(&cache.wo, &dout, &mut du[c..c + dv]);
            outer_acc(&mut d_wo, &dout, &cache.ctx[s * dv..(s + 1) * dv]);
            let dctx = &du[c..c + dv];
            let ps = &cache.p[s * l..(s + 1) * l];
            for j in 0..l {
                let vj = &cache.v[j * dv..(j + 1) * dv];
                let mut acc = 0.0;
                for (a, b) in dctx.iter().zip(vj) {
                    acc += a * b;
                }
                dp[j] = acc;
                let dvj = &mut dv_acc[j * dv..(j + 1) * dv];
                for (o, g) in dvj.iter_mut().zip(dctx) {
                    *o += ps[j] * g;
                }
            }
            if let Some(pos) = attn_pos {
                dp[pos] += dp_attn[s];
            }
            let mut dot = 0.0;
            for j in 0..l {
                dot += ps[j] * dp[j];
            }
            for j in 0..l {
                da[j] = ps[j] * (dp[j] - dot) * inv_sqrt;
            }
            let qs = &cache.q[s * dk..(s + 1) * dk];
            dq.fill(0.0);
            for j in 0..l {
                let kj = &cache.k[j * dk..(j + 1) * dk];
                for (o, kv) in dq.iter_mut().zip(kj) {
                    *o += da[j] * kv;
                }
                let dkj = &mut dk_acc[j * dk..(j + 1) * dk];
                for (o, qv) in dkj.iter_mut().zip(qs) {
                    *o += da[j] * qv;
                }
            }
            outer_acc(&mut d_wq, &dq, &cache.zs[s * c..(s + 1) * c]);
        }

        let mut de = vec![0.0; ed];
        let mut dx = vec![0.0; ed];
        for j in 0..l {
            let ej = &cache.e[j * ed..(j + 1) * ed];
            let dkj = &dk_acc[j * dk..(j + 1) * dk];
            let dvj = &dv_acc[j * dv..(j + 1) * dv];
            outer_acc(&mut d_wk, dkj, ej);
            outer_acc(&mut d_wv, dvj, ej);
            let tok = cache.tokens[j];
            if tok < self.base_vocab {
                continue;
            }
            let row = adapter
                .embedding_row(tok)
                .ok_or_else(|| Error::Tokenizer(format!("token {tok} has no embedding")))?;
            de.fill(0.0);
            matvec_t_acc(&cache.wk, dkj, &mut de);
            matvec_t_acc(&cache.wv, dvj, &mut de);
            for (d, ev) in de.iter_mut().zip(ej) {
                *d *= 1.0 - ev * ev;
            }
            dx.fill(0.0);
            matvec_t_acc(&self.base.w_enc, &de, &mut dx);
            let mut grow = grads.pseudo_embeddings.row_mut(row);
            for (o, d) in grow.iter_mut().zip(&dx) {
                *o += d;
            }
        }

        for (idx, dw) in [d_wq, d_wk, d_wv, d_wo].iter().enumerate() {
            let pair = &adapter.lora[idx];
            // W = W0 + s * up . down
            let d_up = matmul(dw, &pair.down.t().to_owned());
            let d_down = matmul(&pair.up.t().to_owned(), dw);
            let g = &mut grads.lora[idx];
            g.up.zip_mut_with(&d_up, |o, &d| *o += scale * d);
            g.down.zip_mut_with(&d_down, |o, &d| *o += scale * d);
        }
        Ok(())
    }

    fn frozen_parameters(&self) -> Vec<f64> {
        let b = &self.base;
        let mut out = Vec::new();
        out.extend(b.tok_emb.iter());
        out.extend(b.w_enc.iter());
        out.extend(b.b_enc.iter());
        out.extend(b.w_q.iter());
        out.extend(b.w_k.iter());
        out.extend(b.w_v.iter());
        out.extend(b.w_o.iter());
        out.extend(b.w1.iter());
        out.extend(b.b1.iter());
        out.extend(b.w2.iter());
        out.extend(b.b2.iter());
        out
    }
}
