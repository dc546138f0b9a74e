//! A small diffusion transformer over concatenated `[x | s | o]` latent tokens.
//!
//! Self-attention uses rotary positions over `(f, h, w, l)` where `f` tags
//! object tokens; text enters through per-layer cross-attention.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::codec::LatentGrid;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub ffn_mult: usize,
    /// When false every token gets `f = 0` (identity-flag ablation).
    pub identity_flag: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            width: 64,
            layers: 4,
            heads: 4,
            cond_dim: 64,
            ffn_mult: 4,
            identity_flag: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(8) {
            return Err(Error::Config(format!(
                "head dim {} must be divisible by 8",
                self.head_dim()
            )));
        }
        if !self.width.is_multiple_of(2) || self.channels == 0 || self.layers == 0 || self.cond_dim == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("model.channels".into(), self.channels.to_string()),
            ("model.width".into(), self.width.to_string()),
            ("model.layers".into(), self.layers.to_string()),
            ("model.heads".into(), self.heads.to_string()),
            ("model.cond_dim".into(), self.cond_dim.to_string()),
            ("model.ffn_mult".into(), self.ffn_mult.to_string()),
            ("model.identity_flag".into(), self.identity_flag.to_string()),
            ("model.seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let get = |k: &str| -> Result<Option<&String>> { Ok(pairs.get(k)) };
        macro_rules! field {
            ($key:literal, $f:ident) => {
                if let Some(v) = get($key)? {
                    cfg.$f = v
                        .parse()
                        .map_err(|_| Error::Format(format!("bad value for {}: {v}", $key)))?;
                }
            };
        }
        field!("model.channels", channels);
        field!("model.width", width);
        field!("model.layers", layers);
        field!("model.heads", heads);
        field!("model.cond_dim", cond_dim);
        field!("model.ffn_mult", ffn_mult);
        field!("model.identity_flag", identity_flag);
        field!("model.seed", seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Position of one token: source flag and latent cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPosition {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

pub const ROPE_BASE: f64 = 10000.0;

/// Rotation angles for one token; `head_dim / 2` slots in bands `[f, h, w, l]`.
pub fn rope_angles(pos: TokenPosition, head_dim: usize) -> Result<Vec<f64>> {
    if head_dim == 0 || !head_dim.is_multiple_of(8) {
        return Err(Error::Invalid(format!(
            "head dim {head_dim} must be a positive multiple of 8"
        )));
    }
    let slots = head_dim / 2;
    let band = slots / 4;
    let band_width = (head_dim / 4) as f64;
    let coords = [pos.f, pos.h, pos.w, pos.l];
    let mut out = Vec::with_capacity(slots);
    for c in coords {
        for k in 0..band {
            out.push(c as f64 * ROPE_BASE.powf(-2.0 * k as f64 / band_width));
        }
    }
    Ok(out)
}

/// Token positions of the `[x | s | o]` sequence for latent dims `(H, W, L)`.
pub fn token_positions(dims: [usize; 3], identity_flag: bool) -> Vec<TokenPosition> {
    let mut out = Vec::with_capacity(3 * dims[0] * dims[1] * dims[2]);
    for block in 0..3 {
        let f = usize::from(identity_flag && block == 2);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for l in 0..dims[2] {
                    out.push(TokenPosition { f, h, w, l });
                }
            }
        }
    }
    out
}

/// Rotates pairs `(i, i + D_h/2)` of the last dimension by `angles`.
pub fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> candle_core::Result<Tensor> {
    let half = x.dim(D::Minus1)? / 2;
    let x1 = x.narrow(D::Minus1, 0, half)?;
    let x2 = x.narrow(D::Minus1, half, half)?;
    let r1 = (x1.broadcast_mul(cos)? - x2.broadcast_mul(sin)?)?;
    let r2 = (x2.broadcast_mul(cos)? + x1.broadcast_mul(sin)?)?;
    Tensor::cat(&[&r1, &r2], D::Minus1)
}

/// Instruction tokens in the conditioning space, or the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Vec<Vec<f32>>,
    pub null: bool,
}

impl ConditionEmbedding {
    pub fn null() -> Self {
        ConditionEmbedding {
            tokens: Vec::new(),
            null: true,
        }
    }
}

/// Frozen bag-of-hashed-tokens text encoder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub vocab: usize,
    pub dim: usize,
    pub max_tokens: usize,
    table: Vec<f32>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl HashEmbedder {
    pub fn new(vocab: usize, dim: usize, max_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e3bd);
        let table = (0..vocab * dim)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        HashEmbedder {
            vocab,
            dim,
            max_tokens,
            table,
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token) % self.vocab as u64) as usize
    }

    pub fn embed(&self, text: &str) -> Result<ConditionEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::Invalid("empty instruction".into()));
        }
        if text.chars().any(|c| c.is_control() && !c.is_whitespace()) {
            return Err(Error::Invalid("instruction contains control characters".into()));
        }
        let tokens = tokenize(text)
            .into_iter()
            .take(self.max_tokens)
            .map(|t| {
                let b = self.bucket(&t);
                self.table[b * self.dim..(b + 1) * self.dim].to_vec()
            })
            .collect::<Vec<_>>();
        if tokens.is_empty() {
            return Err(Error::Invalid("instruction has no tokens".into()));
        }
        Ok(ConditionEmbedding {
            tokens,
            null: false,
        })
    }
}

/// Trainable parameters stored by name.
#[derive(Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl ModelParams {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut vars = BTreeMap::new();
        let dev = Device::Cpu;
        let mut add = |name: String, shape: &[usize], values: Vec<f64>| -> Result<()> {
            let t = Tensor::from_vec(values, shape, &dev)?.to_dtype(dtype)?;
            vars.insert(name, Var::from_tensor(&t)?);
            Ok(())
        };
        let (d, w, c, f) = (
            config.channels,
            config.width,
            config.cond_dim,
            config.width * config.ffn_mult,
        );
        let lin = |rng: &mut ChaCha8Rng, i: usize, o: usize, gain: f64| {
            normal(rng, i * o, gain / (i as f64).sqrt())
        };
        add("in.w".into(), &[d, w], lin(&mut rng, d, w, 1.0))?;
        add("in.b".into(), &[w], vec![0.0; w])?;
        add("time.w1".into(), &[w, w], lin(&mut rng, w, w, 1.0))?;
        add("time.b1".into(), &[w], vec![0.0; w])?;
        add("time.w2".into(), &[w, w], lin(&mut rng, w, w, 1.0))?;
        add("time.b2".into(), &[w], vec![0.0; w])?;
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for ln in ["ln1", "ln2", "ln3"] {
                add(p(&format!("{ln}.g")), &[w], vec![1.0; w])?;
                add(p(&format!("{ln}.b")), &[w], vec![0.0; w])?;
            }
            for m in ["q", "k", "v"] {
                add(p(&format!("attn.{m}")), &[w, w], lin(&mut rng, w, w, 1.0))?;
            }
            add(p("attn.o"), &[w, w], lin(&mut rng, w, w, 0.5))?;
            add(p("attn.ob"), &[w], vec![0.0; w])?;
            add(p("cross.q"), &[w, w], lin(&mut rng, w, w, 1.0))?;
            add(p("cross.k"), &[c, w], lin(&mut rng, c, w, 1.0))?;
            add(p("cross.v"), &[c, w], lin(&mut rng, c, w, 1.0))?;
            add(p("cross.o"), &[w, w], lin(&mut rng, w, w, 0.5))?;
            add(p("cross.ob"), &[w], vec![0.0; w])?;
            add(p("ffn.w1"), &[w, f], lin(&mut rng, w, f, 1.0))?;
            add(p("ffn.b1"), &[f], vec![0.0; f])?;
            add(p("ffn.w2"), &[f, w], lin(&mut rng, f, w, 0.5))?;
            add(p("ffn.b2"), &[w], vec![0.0; w])?;
        }
        add("final.g".into(), &[w], vec![1.0; w])?;
        add("final.b".into(), &[w], vec![0.0; w])?;
        add("out.w".into(), &[w, d], lin(&mut rng, w, d, 0.1))?;
        add("out.b".into(), &[d], vec![0.0; d])?;
        add("null".into(), &[1, c], normal(&mut rng, c, 1.0))?;
        Ok(ModelParams {
            config,
            vars,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    fn p(&self, name: &str) -> &Tensor {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .as_tensor()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy with freshly allocated storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ModelParams {
            config: self.config.clone(),
            vars,
            dtype: self.dtype,
        })
    }

    /// SHA-256 over names and f32 values in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, extra: &[(String, String)]) -> Result<()> {
        w.write_all(b"LVGCKPT1")?;
        w.write_all(&1u32.to_le_bytes())?;
        let mut cfg = String::new();
        for (k, v) in self.config.to_pairs().iter().chain(extra) {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.vars.len() as u32).to_le_bytes())?;
        for (name, v) in &self.vars {
            let t = v.as_tensor();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for x in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint; returns the parameters and every config line.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, BTreeMap<String, String>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"LVGCKPT1" {
            return Err(Error::Format("not an LVGCKPT1 checkpoint".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut u32b)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut cfg)?;
        let cfg = String::from_utf8(cfg).map_err(|_| Error::Format("config not utf-8".into()))?;
        let mut pairs = BTreeMap::new();
        for line in cfg.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let config = ModelConfig::from_pairs(&pairs)?;
        let mut params = ModelParams::new(config, DType::F32)?;
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        if count != params.vars.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, model expects {}",
                params.vars.len()
            )));
        }
        for _ in 0..count {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16b) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("bad tensor name".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u32b)?;
                dims.push(u32::from_le_bytes(u32b) as usize);
            }
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let var = params
                .vars
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            if var.dims() != dims.as_slice() {
                return Err(Error::Format(format!("tensor `{name}` has dims {dims:?}")));
            }
            var.set(&Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?)?;
        }
        if !params.all_finite()? {
            return Err(Error::NonFinite("checkpoint load".into()));
        }
        params.dtype = DType::F32;
        Ok((params, pairs))
    }

    pub fn save(&self, path: &std::path::Path, extra: &[(String, String)]) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f), extra)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, BTreeMap<String, String>)> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

/// Batched conditioning: padded text tokens plus per-sample null flags.
#[derive(Debug, Clone)]
pub struct CondBatch {
    tokens: Tensor,
    lengths: Vec<usize>,
    null: Vec<bool>,
}

impl CondBatch {
    pub fn new(items: &[&ConditionEmbedding], dim: usize, dtype: DType) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("condition batch"));
        }
        let t_max = items.iter().map(|c| c.tokens.len()).max().unwrap_or(0).max(1);
        let mut data = vec![0f32; items.len() * t_max * dim];
        let mut lengths = Vec::with_capacity(items.len());
        let mut null = Vec::with_capacity(items.len());
        for (b, c) in items.iter().enumerate() {
            if c.null || c.tokens.is_empty() {
                lengths.push(1);
                null.push(true);
                continue;
            }
            for (i, tok) in c.tokens.iter().enumerate() {
                if tok.len() != dim {
                    return Err(Error::Shape(format!(
                        "condition token width {} != {dim}",
                        tok.len()
                    )));
                }
                data[(b * t_max + i) * dim..(b * t_max + i + 1) * dim].copy_from_slice(tok);
            }
            lengths.push(c.tokens.len());
            null.push(false);
        }
        let tokens = Tensor::from_vec(data, (items.len(), t_max, dim), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(CondBatch {
            tokens,
            lengths,
            null,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

fn check(t: &Tensor, stage: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(stage.to_string()))
    }
}

fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    let denom = (x.neg()?.exp()? + 1.0)?;
    x / denom
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let mu = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mu)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    xn.broadcast_mul(g)?.broadcast_add(b)
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let y = x.broadcast_matmul(w)?;
    match b {
        Some(b) => y.broadcast_add(b),
        None => Ok(y),
    }
}

/// Sinusoidal embedding of `t` (shape `(B,)`) to width `dim`.
pub fn timestep_features(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tt in t {
        let x = tt * 1000.0;
        for k in 0..half {
            let freq = ROPE_BASE.powf(-(k as f64) / half as f64);
            data.push((x * freq).sin());
        }
        for k in 0..half {
            let freq = ROPE_BASE.powf(-(k as f64) / half as f64);
            data.push((x * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Internal attention tensors saved by `forward_with_logits` for tests.
pub struct Probe {
    /// Self-attention logits of the first layer, shape `(B, heads, 3N, 3N)`.
    pub logits: Tensor,
}

impl ModelParams {
    /// Velocity prediction `(B, N, d)` for batched latents `x`, `s`, `o`.
    pub fn forward(
        &self,
        x: &Tensor,
        s: &Tensor,
        o: &Tensor,
        dims: [usize; 3],
        cond: &CondBatch,
        t: &[f64],
    ) -> Result<Tensor> {
        Ok(self.forward_inner(x, s, o, dims, cond, t, None)?.0)
    }

    /// Like `forward`, also returning first-layer logits with selected RoPE
    /// bands zeroed (bands indexed `[f, h, w, l]`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_logits(
        &self,
        x: &Tensor,
        s: &Tensor,
        o: &Tensor,
        dims: [usize; 3],
        cond: &CondBatch,
        t: &[f64],
        keep_bands: [bool; 4],
    ) -> Result<(Tensor, Probe)> {
        let (y, p) = self.forward_inner(x, s, o, dims, cond, t, Some(keep_bands))?;
        Ok((y, p.expect("probe requested")))
    }

    fn rope_tables(&self, dims: [usize; 3], keep: [bool; 4]) -> Result<(Tensor, Tensor)> {
        let dh = self.config.head_dim();
        let positions = token_positions(dims, self.config.identity_flag);
        let band = dh / 8;
        let mut cos = Vec::with_capacity(positions.len() * dh / 2);
        let mut sin = Vec::with_capacity(positions.len() * dh / 2);
        for p in positions {
            for (i, a) in rope_angles(p, dh)?.into_iter().enumerate() {
                let a = if keep[i / band] { a } else { 0.0 };
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        let n = cos.len() / (dh / 2);
        let dev = Device::Cpu;
        Ok((
            Tensor::from_vec(cos, (n, dh / 2), &dev)?.to_dtype(self.dtype)?,
            Tensor::from_vec(sin, (n, dh / 2), &dev)?.to_dtype(self.dtype)?,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner(
        &self,
        x: &Tensor,
        s: &Tensor,
        o: &Tensor,
        dims: [usize; 3],
        cond: &CondBatch,
        t: &[f64],
        probe: Option<[bool; 4]>,
    ) -> Result<(Tensor, Option<Probe>)> {
        let cfg = &self.config;
        let (b, n, d) = x.dims3()?;
        if s.dims() != x.dims() || o.dims() != x.dims() {
            return Err(Error::Shape(format!(
                "x {:?}, s {:?}, o {:?} must match",
                x.dims(),
                s.dims(),
                o.dims()
            )));
        }
        if d != cfg.channels || n != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "latent ({n}, {d}) does not match dims {dims:?} x {} channels",
                cfg.channels
            )));
        }
        if t.len() != b || cond.len() != b {
            return Err(Error::Shape(format!(
                "batch {b} vs {} times and {} conditions",
                t.len(),
                cond.len()
            )));
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("t outside [0, 1]".into()));
        }
        for (name, v) in [("x", x), ("s", s), ("o", o)] {
            check(v, &format!("input {name}"))?;
        }
        let (w, heads, dh) = (cfg.width, cfg.heads, cfg.head_dim());
        let tokens = 3 * n;

        let seq = Tensor::cat(&[x, s, o], 1)?;
        let mut hcur = linear(&seq, self.p("in.w"), Some(self.p("in.b")))?;

        let tf = timestep_features(t, w, self.dtype)?;
        let temb = silu(&linear(&tf, self.p("time.w1"), Some(self.p("time.b1")))?)?;
        let temb = linear(&temb, self.p("time.w2"), Some(self.p("time.b2")))?;
        hcur = hcur.broadcast_add(&temb.unsqueeze(1)?)?;
        check(&hcur, "input projection")?;

        let (cos, sin) = self.rope_tables(dims, probe.unwrap_or([true; 4]))?;

        // null rows replaced by the learned null vector, padding masked out
        let tc = cond.tokens.dim(1)?;
        let null_mask: Vec<f64> = cond.null.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(null_mask, (b, 1, 1), &Device::Cpu)?.to_dtype(self.dtype)?;
        let null_tok = self.p("null").unsqueeze(0)?.broadcast_as((b, tc, cfg.cond_dim))?;
        let ctx = (cond.tokens.broadcast_mul(&(1.0 - &m)?)? + null_tok.broadcast_mul(&m)?)?;
        let mut mask = Vec::with_capacity(b * tc);
        for &len in &cond.lengths {
            for j in 0..tc {
                mask.push(if j < len { 0.0 } else { -1e9 });
            }
        }
        let mask = Tensor::from_vec(mask, (b, 1, 1, tc), &Device::Cpu)?.to_dtype(self.dtype)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let split = |y: &Tensor, len: usize| -> candle_core::Result<Tensor> {
            y.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let merge = |y: &Tensor, len: usize| -> candle_core::Result<Tensor> {
            y.transpose(1, 2)?.contiguous()?.reshape((b, len, w))
        };
        let mut probe_out = None;
        for l in 0..cfg.layers {
            let p = |s: &str| self.p(&format!("layer{l}.{s}"));

            let hn = layer_norm(&hcur, p("ln1.g"), p("ln1.b"))?;
            let q = apply_rope(&split(&linear(&hn, p("attn.q"), None)?, tokens)?, &cos, &sin)?;
            let k = apply_rope(&split(&linear(&hn, p("attn.k"), None)?, tokens)?, &cos, &sin)?;
            let v = split(&linear(&hn, p("attn.v"), None)?, tokens)?;
            let logits = (q.matmul(&k.t()?)? * scale)?;
            if l == 0 && probe.is_some() {
                probe_out = Some(Probe {
                    logits: logits.clone(),
                });
            }
            let att = candle_nn::ops::softmax(&logits, D::Minus1)?.matmul(&v)?;
            let att = linear(&merge(&att, tokens)?, p("attn.o"), Some(p("attn.ob")))?;
            hcur = (hcur + att)?;
            check(&hcur, &format!("layer {l} self-attention"))?;

            let hn = layer_norm(&hcur, p("ln2.g"), p("ln2.b"))?;
            let q = split(&linear(&hn, p("cross.q"), None)?, tokens)?;
            let k = split(&linear(&ctx, p("cross.k"), None)?, tc)?;
            let v = split(&linear(&ctx, p("cross.v"), None)?, tc)?;
            let logits = (q.matmul(&k.t()?)? * scale)?.broadcast_add(&mask)?;
            let att = candle_nn::ops::softmax(&logits, D::Minus1)?.matmul(&v)?;
            let att = linear(&merge(&att, tokens)?, p("cross.o"), Some(p("cross.ob")))?;
            hcur = (hcur + att)?;
            check(&hcur, &format!("layer {l} cross-attention"))?;

            let hn = layer_norm(&hcur, p("ln3.g"), p("ln3.b"))?;
            let ff = silu(&linear(&hn, p("ffn.w1"), Some(p("ffn.b1")))?)?;
            let ff = linear(&ff, p("ffn.w2"), Some(p("ffn.b2")))?;
            hcur = (hcur + ff)?;
            check(&hcur, &format!("layer {l} feed-forward"))?;
        }
        let hn = layer_norm(&hcur, self.p("final.g"), self.p("final.b"))?;
        let out = linear(&hn.narrow(1, 0, n)?, self.p("out.w"), Some(self.p("out.b")))?;
        check(&out, "output projection")?;
        Ok((out, probe_out))
    }
}

/// `(1, N, d)` tensor view of a latent grid.
pub fn latent_tensor(g: &LatentGrid, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        g.values().to_vec(),
        (1, g.cells(), g.channels()),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?)
}

/// Stacks latents into a `(B, N, d)` batch.
pub fn latent_batch(gs: &[&LatentGrid], dtype: DType) -> Result<Tensor> {
    let first = gs.first().ok_or(Error::Empty("latent batch"))?;
    let mut data = Vec::with_capacity(gs.len() * first.values().len());
    for g in gs {
        if !g.same_shape(first) {
            return Err(Error::Shape("latent batch shapes differ".into()));
        }
        data.extend_from_slice(g.values());
    }
    Ok(Tensor::from_vec(data, (gs.len(), first.cells(), first.channels()), &Device::Cpu)?
        .to_dtype(dtype)?)
}

/// Converts the `b`-th element of a `(B, N, d)` tensor back into a grid.
pub fn tensor_latent(t: &Tensor, b: usize, dims: [usize; 3]) -> Result<LatentGrid> {
    let (_, n, d) = t.dims3()?;
    let v = t.get(b)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let _ = n;
    LatentGrid::new(dims, d, v)
}
