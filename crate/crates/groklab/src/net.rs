//! Two-layer MLP with an optional embedding front-end: forward pass with
//! softmax cross-entropy, exact hand-derived backpropagation (including the
//! sparse scatter into embedding rows), evaluation helpers, and checkpoint
//! serialization.

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::linalg::Mat;
use crate::modspace::Example;
use crate::rng::{self, stream};
use std::path::Path;

/// Sequence length: `a op b =`.
pub const SEQ_LEN: usize = 4;

const CKPT_MAGIC: &[u8; 8] = b"GLABCKPT";
const CKPT_VERSION: u32 = 1;

/// Whether the first layer sees concatenated embedding rows or the raw
/// 4-token vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    WithEmbed,
    NoEmbed,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::WithEmbed => "with_embed",
            Mode::NoEmbed => "no_embed",
        }
    }
}

/// Architecture hyperparameters. `h` defaults to `4 * d` elsewhere; here all
/// dims are explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub mode: Mode,
    /// Number of output classes (the modulus p).
    pub p: usize,
    /// Vocabulary size V = p + 2.
    pub vocab: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    /// Multiplier on the standard-normal embedding init.
    pub embed_scale: f64,
    /// No-embed mode only: feed raw token values instead of values / V.
    pub raw_inputs: bool,
}

impl NetConfig {
    pub fn with_embed(p: usize, d: usize, h: usize) -> Self {
        NetConfig {
            mode: Mode::WithEmbed,
            p,
            vocab: p + 2,
            d,
            h,
            embed_scale: 1.0,
            raw_inputs: false,
        }
    }

    pub fn no_embed(p: usize, h: usize) -> Self {
        NetConfig {
            mode: Mode::NoEmbed,
            p,
            vocab: p + 2,
            d: 0,
            h,
            embed_scale: 1.0,
            raw_inputs: false,
        }
    }

    /// Width of the first-layer input: 4d with embeddings, 4 without.
    pub fn in_width(&self) -> usize {
        match self.mode {
            Mode::WithEmbed => SEQ_LEN * self.d,
            Mode::NoEmbed => SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.h == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate dims p={} h={}",
                self.p, self.h
            )));
        }
        if self.mode == Mode::WithEmbed && self.d == 0 {
            return Err(Error::InvalidConfig("embedding dim d must be > 0".into()));
        }
        Ok(())
    }
}

/// Dense parameter tensors. `e` is `None` in no-embed mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub config: NetConfig,
    /// V x d embedding rows.
    pub e: Option<Mat>,
    /// h x in_width first layer.
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// p x h output layer.
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Gradients with the same shapes as the parameters, plus the per-token
/// touched mask for the batch that produced them.
#[derive(Debug, Clone)]
pub struct Grads {
    pub e: Option<Mat>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    /// touched_tokens[i] is true iff token i occurred in the batch.
    pub touched_tokens: Vec<bool>,
}

/// A batch of token sequences and labels.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub inputs: Vec<[u32; 4]>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Self {
        Batch {
            inputs: examples.iter().map(|e| e.tokens).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// n x in_width first-layer input (concatenated embeddings or encoded
    /// token values).
    pub x: Mat,
    /// n x h pre-activations.
    pub z1: Mat,
    /// n x h ReLU outputs.
    pub a1: Mat,
    /// n x p logits.
    pub logits: Mat,
    /// n x p softmax rows.
    pub probs: Mat,
}

/// Samples fresh parameters: embeddings standard normal (times
/// `embed_scale`), linear layers uniform on ±1/sqrt(fan_in), biases zero.
/// Each tensor draws from its own seed stream so modes stay comparable.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<MlpParams> {
    config.validate()?;
    let base = rng::mix(seed, stream::INIT);
    let e = match config.mode {
        Mode::WithEmbed => {
            let mut r = rng::chacha(rng::mix(base, 1));
            let scale = config.embed_scale;
            Some(Mat::from_fn(config.vocab, config.d, |_, _| {
                scale * rng::standard_normal(&mut r)
            }))
        }
        Mode::NoEmbed => None,
    };
    let fan1 = config.in_width();
    let bound1 = 1.0 / (fan1 as f64).sqrt();
    let mut r1 = rng::chacha(rng::mix(base, 2));
    let w1 = Mat::from_fn(config.h, fan1, |_, _| rng::uniform_sym(&mut r1, bound1));
    let bound2 = 1.0 / (config.h as f64).sqrt();
    let mut r2 = rng::chacha(rng::mix(base, 3));
    let w2 = Mat::from_fn(config.p, config.h, |_, _| rng::uniform_sym(&mut r2, bound2));
    Ok(MlpParams {
        config: *config,
        e,
        w1,
        b1: vec![0.0; config.h],
        w2,
        b2: vec![0.0; config.p],
    })
}

impl MlpParams {
    pub fn zeros(config: &NetConfig) -> Self {
        MlpParams {
            config: *config,
            e: match config.mode {
                Mode::WithEmbed => Some(Mat::zeros(config.vocab, config.d)),
                Mode::NoEmbed => None,
            },
            w1: Mat::zeros(config.h, config.in_width()),
            b1: vec![0.0; config.h],
            w2: Mat::zeros(config.p, config.h),
            b2: vec![0.0; config.p],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.e.as_ref().map_or(true, |e| e.is_finite())
            && self.w1.is_finite()
            && self.b1.iter().all(|x| x.is_finite())
            && self.w2.is_finite()
            && self.b2.iter().all(|x| x.is_finite())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.len() != batch.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} inputs but {} labels",
                batch.inputs.len(),
                batch.labels.len()
            )));
        }
        if batch.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        for row in &batch.inputs {
            for &t in row {
                if t as usize >= self.config.vocab {
                    return Err(Error::ShapeMismatch(format!(
                        "token id {t} >= vocab {}",
                        self.config.vocab
                    )));
                }
            }
        }
        for &l in &batch.labels {
            if l as usize >= self.config.p {
                return Err(Error::ShapeMismatch(format!(
                    "label {l} >= p {}",
                    self.config.p
                )));
            }
        }
        Ok(())
    }

    /// Builds the first-layer input matrix for a batch.
    fn encode(&self, batch: &Batch) -> Mat {
        let n = batch.len();
        match self.config.mode {
            Mode::WithEmbed => {
                let e = self.e.as_ref().expect("embed mode has E");
                let d = self.config.d;
                let mut x = Mat::zeros(n, SEQ_LEN * d);
                for (i, toks) in batch.inputs.iter().enumerate() {
                    let row = x.row_mut(i);
                    for (k, &t) in toks.iter().enumerate() {
                        row[k * d..(k + 1) * d].copy_from_slice(e.row(t as usize));
                    }
                }
                x
            }
            Mode::NoEmbed => {
                // Token values fed directly; scaled by 1/V unless raw mode
                // is requested, to keep activations O(1).
                let scale = if self.config.raw_inputs {
                    1.0
                } else {
                    1.0 / self.config.vocab as f64
                };
                let mut x = Mat::zeros(n, SEQ_LEN);
                for (i, toks) in batch.inputs.iter().enumerate() {
                    let row = x.row_mut(i);
                    for (k, &t) in toks.iter().enumerate() {
                        row[k] = t as f64 * scale;
                    }
                }
                x
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch plus the cached activations.
pub fn forward(params: &MlpParams, batch: &Batch) -> Result<(f64, ForwardCache)> {
    params.check_batch(batch)?;
    if !params.is_finite() {
        return Err(Error::NonFinite {
            context: "parameters before forward pass".into(),
        });
    }
    let n = batch.len();
    let p = params.config.p;

    let x = params.encode(batch);
    let mut z1 = x.matmul_nt(&params.w1);
    for i in 0..n {
        for (z, b) in z1.row_mut(i).iter_mut().zip(&params.b1) {
            *z += b;
        }
    }
    let mut a1 = z1.clone();
    a1.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    let mut logits = a1.matmul_nt(&params.w2);
    for i in 0..n {
        for (l, b) in logits.row_mut(i).iter_mut().zip(&params.b2) {
            *l += b;
        }
    }

    // Row-wise stable softmax and log-likelihood.
    let mut probs = Mat::zeros(n, p);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (pr, &l) in probs.row_mut(i).iter_mut().zip(row) {
            let ex = (l - m).exp();
            *pr = ex;
            z += ex;
        }
        probs.row_mut(i).iter_mut().for_each(|pr| *pr /= z);
        let label = batch.labels[i] as usize;
        loss -= row[label] - m - z.ln();
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss after forward pass".into(),
        });
    }
    Ok((
        loss,
        ForwardCache {
            x,
            z1,
            a1,
            logits,
            probs,
        },
    ))
}

/// Exact gradients of the mean loss via hand-derived backpropagation.
/// Embedding-gradient rows accumulate only through scatter-adds from tokens
/// present in the batch, so untouched rows are exactly zero.
pub fn backward(params: &MlpParams, batch: &Batch, cache: &ForwardCache) -> Grads {
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    // dL/dlogits = (probs - onehot) / n
    let mut dlogits = cache.probs.clone();
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = dlogits.row_mut(i);
        row[label as usize] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }

    let dw2 = dlogits.matmul_tn(&cache.a1);
    let mut db2 = vec![0.0; params.config.p];
    for i in 0..n {
        for (s, v) in db2.iter_mut().zip(dlogits.row(i)) {
            *s += v;
        }
    }

    let mut dz1 = dlogits.matmul(&params.w2);
    for (dz, z) in dz1.data_mut().iter_mut().zip(cache.z1.data()) {
        if *z <= 0.0 {
            *dz = 0.0;
        }
    }

    let dw1 = dz1.matmul_tn(&cache.x);
    let mut db1 = vec![0.0; params.config.h];
    for i in 0..n {
        for (s, v) in db1.iter_mut().zip(dz1.row(i)) {
            *s += v;
        }
    }

    let mut touched = vec![false; params.config.vocab];
    let de = match params.config.mode {
        Mode::WithEmbed => {
            let d = params.config.d;
            let dx = dz1.matmul(&params.w1);
            let mut de = Mat::zeros(params.config.vocab, d);
            for (i, toks) in batch.inputs.iter().enumerate() {
                let dxr = dx.row(i);
                for (k, &t) in toks.iter().enumerate() {
                    touched[t as usize] = true;
                    let dst = de.row_mut(t as usize);
                    for (s, v) in dst.iter_mut().zip(&dxr[k * d..(k + 1) * d]) {
                        *s += v;
                    }
                }
            }
            Some(de)
        }
        Mode::NoEmbed => {
            for toks in &batch.inputs {
                for &t in toks {
                    touched[t as usize] = true;
                }
            }
            None
        }
    };

    Grads {
        e: de,
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
        touched_tokens: touched,
    }
}

/// Fraction of examples classified correctly; argmax ties break toward the
/// lowest class index. Evaluates in chunks to bound memory.
pub fn accuracy(params: &MlpParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(2048) {
        let batch = Batch::from_examples(chunk);
        let (_, cache) = forward(params, &batch)?;
        for (i, ex) in chunk.iter().enumerate() {
            let row = cache.logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == ex.label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Mean loss over a full example list, chunked.
pub fn mean_loss(params: &MlpParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in examples.chunks(2048) {
        let batch = Batch::from_examples(chunk);
        let (loss, _) = forward(params, &batch)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Byte offsets of each tensor inside the flattened parameter vector, in
/// checkpoint order (E, W1, b1, W2, b2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub e: (usize, usize),
    pub w1: (usize, usize),
    pub b1: (usize, usize),
    pub w2: (usize, usize),
    pub b2: (usize, usize),
    pub total: usize,
}

impl ParamLayout {
    pub fn of(config: &NetConfig) -> Self {
        let e_len = match config.mode {
            Mode::WithEmbed => config.vocab * config.d,
            Mode::NoEmbed => 0,
        };
        let w1_len = config.h * config.in_width();
        let b1_len = config.h;
        let w2_len = config.p * config.h;
        let b2_len = config.p;
        let e = (0, e_len);
        let w1 = (e.1, e.1 + w1_len);
        let b1 = (w1.1, w1.1 + b1_len);
        let w2 = (b1.1, b1.1 + w2_len);
        let b2 = (w2.1, w2.1 + b2_len);
        ParamLayout {
            e,
            w1,
            b1,
            w2,
            b2,
            total: b2.1,
        }
    }
}

impl MlpParams {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::of(&self.config)
    }

    /// Copies all tensors into one flat vector in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut flat = Vec::with_capacity(layout.total);
        if let Some(e) = &self.e {
            flat.extend_from_slice(e.data());
        }
        flat.extend_from_slice(self.w1.data());
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(self.w2.data());
        flat.extend_from_slice(&self.b2);
        flat
    }

    /// Rebuilds parameters from a flat vector laid out by `to_flat`.
    pub fn from_flat(config: &NetConfig, flat: &[f64]) -> Self {
        let layout = ParamLayout::of(config);
        assert_eq!(flat.len(), layout.total, "flat vector length mismatch");
        let e = match config.mode {
            Mode::WithEmbed => Some(Mat::from_vec(
                config.vocab,
                config.d,
                flat[layout.e.0..layout.e.1].to_vec(),
            )),
            Mode::NoEmbed => None,
        };
        MlpParams {
            config: *config,
            e,
            w1: Mat::from_vec(
                config.h,
                config.in_width(),
                flat[layout.w1.0..layout.w1.1].to_vec(),
            ),
            b1: flat[layout.b1.0..layout.b1.1].to_vec(),
            w2: Mat::from_vec(config.p, config.h, flat[layout.w2.0..layout.w2.1].to_vec()),
            b2: flat[layout.b2.0..layout.b2.1].to_vec(),
        }
    }
}

impl Grads {
    /// Flat view in the same order as `MlpParams::to_flat`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        if let Some(e) = &self.e {
            flat.extend_from_slice(e.data());
        }
        flat.extend_from_slice(self.w1.data());
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(self.w2.data());
        flat.extend_from_slice(&self.b2);
        flat
    }
}

fn mode_code(config: &NetConfig) -> u32 {
    match (config.mode, config.raw_inputs) {
        (Mode::WithEmbed, _) => 0,
        (Mode::NoEmbed, false) => 1,
        (Mode::NoEmbed, true) => 2,
    }
}

/// Writes the versioned checkpoint: magic, version, dims, mode, then the
/// row-major little-endian tensors in the order E, W1, b1, W2, b2.
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = ByteWriter::new(std::io::BufWriter::new(file), path);
    w.write_bytes(CKPT_MAGIC)?;
    w.write_u32(CKPT_VERSION)?;
    let c = &params.config;
    w.write_u32(mode_code(c))?;
    w.write_u64(c.p as u64)?;
    w.write_u64(c.vocab as u64)?;
    w.write_u64(c.d as u64)?;
    w.write_u64(c.h as u64)?;
    w.write_f64(c.embed_scale)?;
    if let Some(e) = &params.e {
        w.write_f64_slice(e.data())?;
    }
    w.write_f64_slice(params.w1.data())?;
    w.write_f64_slice(&params.b1)?;
    w.write_f64_slice(params.w2.data())?;
    w.write_f64_slice(&params.b2)?;
    w.finish()?;
    Ok(())
}

/// Reads a checkpoint written by `save_checkpoint`, validating the header
/// and exact byte count.
pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(std::io::BufReader::new(file), path);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(r.corrupt("bad magic (not a checkpoint file)"));
    }
    let version = r.read_u32()?;
    if version != CKPT_VERSION {
        return Err(r.corrupt(format!("unsupported checkpoint version {version}")));
    }
    let mode_code = r.read_u32()?;
    let p = r.read_u64()? as usize;
    let vocab = r.read_u64()? as usize;
    let d = r.read_u64()? as usize;
    let h = r.read_u64()? as usize;
    let embed_scale = r.read_f64()?;
    let (mode, raw_inputs) = match mode_code {
        0 => (Mode::WithEmbed, false),
        1 => (Mode::NoEmbed, false),
        2 => (Mode::NoEmbed, true),
        other => return Err(r.corrupt(format!("unknown mode code {other}"))),
    };
    let config = NetConfig {
        mode,
        p,
        vocab,
        d,
        h,
        embed_scale,
        raw_inputs,
    };
    config.validate().map_err(|e| r.corrupt(format!("{e}")))?;
    let e = match mode {
        Mode::WithEmbed => Some(Mat::from_vec(vocab, d, r.read_f64_vec(vocab * d)?)),
        Mode::NoEmbed => None,
    };
    let in_w = config.in_width();
    let w1 = Mat::from_vec(h, in_w, r.read_f64_vec(h * in_w)?);
    let b1 = r.read_f64_vec(h)?;
    let w2 = Mat::from_vec(p, h, r.read_f64_vec(p * h)?);
    let b2 = r.read_f64_vec(p)?;
    r.expect_eof()?;
    Ok(MlpParams {
        config,
        e,
        w1,
        b1,
        w2,
        b2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modspace::{enumerate_examples, ModTask, Op};

    fn small_batch(p: u64, n: usize) -> Batch {
        let task = ModTask::new(Op::Add, p).unwrap();
        let all = enumerate_examples(&task);
        Batch::from_examples(&all[..n.min(all.len())])
    }

    /// Straightforward scalar-loop reimplementation of the forward loss,
    /// used as an independent oracle.
    fn naive_loss(params: &MlpParams, batch: &Batch) -> f64 {
        let c = &params.config;
        let mut total = 0.0;
        for (toks, &label) in batch.inputs.iter().zip(&batch.labels) {
            // Build the input vector.
            let mut x = Vec::new();
            match c.mode {
                Mode::WithEmbed => {
                    let e = params.e.as_ref().unwrap();
                    for &t in toks {
                        x.extend_from_slice(e.row(t as usize));
                    }
                }
                Mode::NoEmbed => {
                    let s = if c.raw_inputs { 1.0 } else { 1.0 / c.vocab as f64 };
                    for &t in toks {
                        x.push(t as f64 * s);
                    }
                }
            }
            let mut h1 = vec![0.0; c.h];
            for j in 0..c.h {
                let mut acc = params.b1[j];
                for (k, &xv) in x.iter().enumerate() {
                    acc += params.w1.get(j, k) * xv;
                }
                h1[j] = acc.max(0.0);
            }
            let mut logits = vec![0.0; c.p];
            for j in 0..c.p {
                let mut acc = params.b2[j];
                for (k, &hv) in h1.iter().enumerate() {
                    acc += params.w2.get(j, k) * hv;
                }
                logits[j] = acc;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            total -= logits[label as usize] - m - z.ln();
        }
        total / batch.len() as f64
    }

    #[test]
    fn init_deterministic() {
        let c = NetConfig::with_embed(7, 8, 32);
        let p1 = init_params(&c, 42).unwrap();
        let p2 = init_params(&c, 42).unwrap();
        assert_eq!(p1, p2);
        let p3 = init_params(&c, 43).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn zero_output_layer_gives_uniform_loss() {
        let c = NetConfig::with_embed(5, 4, 16);
        let mut params = init_params(&c, 0).unwrap();
        params.w2.fill(0.0);
        params.b2.iter_mut().for_each(|b| *b = 0.0);
        let batch = small_batch(5, 10);
        let (loss, cache) = forward(&params, &batch).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-15);
        for i in 0..batch.len() {
            let s: f64 = cache.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_true_logit_drives_loss_to_zero() {
        let c = NetConfig::no_embed(5, 8);
        let mut params = MlpParams::zeros(&c);
        let batch = Batch {
            inputs: vec![[1, 5, 2, 6]],
            labels: vec![3],
        };
        params.b2[3] = 40.0; // overwhelming logit at the true class
        let (loss, _) = forward(&params, &batch).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for seed in 0..3u64 {
            let c = NetConfig::with_embed(5, 3, 12);
            let params = init_params(&c, seed).unwrap();
            let batch = small_batch(5, 4);
            let (loss, _) = forward(&params, &batch).unwrap();
            let oracle = naive_loss(&params, &batch);
            assert!(
                (loss - oracle).abs() < 1e-12,
                "seed {seed}: {loss} vs {oracle}"
            );
        }
    }

    #[test]
    fn loss_invariant_to_batch_order_and_duplication() {
        let c = NetConfig::with_embed(7, 4, 8);
        let params = init_params(&c, 5).unwrap();
        let batch = small_batch(7, 6);
        let (loss, cache) = forward(&params, &batch).unwrap();
        let grads = backward(&params, &batch, &cache);

        let mut rev = batch.clone();
        rev.inputs.reverse();
        rev.labels.reverse();
        let (loss_rev, _) = forward(&params, &rev).unwrap();
        assert!((loss - loss_rev).abs() < 1e-12);

        // Duplicating every example leaves the mean gradient unchanged.
        let mut dup = batch.clone();
        dup.inputs.extend_from_slice(&batch.inputs);
        dup.labels.extend_from_slice(&batch.labels);
        let (loss_dup, cache_dup) = forward(&params, &dup).unwrap();
        let grads_dup = backward(&params, &dup, &cache_dup);
        assert!((loss - loss_dup).abs() < 1e-12);
        let f1 = grads.to_flat();
        let f2 = grads_dup.to_flat();
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn fd_check(config: &NetConfig, seed: u64, n: usize) -> f64 {
        let params = init_params(config, seed).unwrap();
        let batch = small_batch(config.p as u64, n);
        let (_, cache) = forward(&params, &batch).unwrap();
        let grads = backward(&params, &batch, &cache);
        let flat = params.to_flat();
        let gflat = grads.to_flat();
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += step;
            let mut minus = flat.clone();
            minus[i] -= step;
            let lp = forward(&MlpParams::from_flat(config, &plus), &batch)
                .unwrap()
                .0;
            let lm = forward(&MlpParams::from_flat(config, &minus), &batch)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * step);
            let rel = (fd - gflat[i]).abs() / (fd.abs().max(gflat[i].abs()) + 1e-8);
            max_rel = max_rel.max(rel);
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences_with_embed() {
        let c = NetConfig::with_embed(5, 3, 8);
        let rel = fd_check(&c, 11, 6);
        assert!(rel < 1e-5, "max relative error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences_no_embed() {
        let c = NetConfig::no_embed(5, 8);
        let rel = fd_check(&c, 12, 6);
        assert!(rel < 1e-5, "max relative error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences_no_embed_raw() {
        let mut c = NetConfig::no_embed(5, 8);
        c.raw_inputs = true;
        let rel = fd_check(&c, 13, 6);
        assert!(rel < 1e-5, "max relative error {rel}");
    }

    #[test]
    fn untouched_embedding_rows_are_exactly_zero() {
        let c = NetConfig::with_embed(7, 4, 8);
        let params = init_params(&c, 9).unwrap();
        let batch = Batch {
            inputs: vec![[1, 7, 2, 8], [2, 7, 2, 8]],
            labels: vec![3, 4],
        };
        let (_, cache) = forward(&params, &batch).unwrap();
        let grads = backward(&params, &batch, &cache);
        let de = grads.e.as_ref().unwrap();
        for t in 0..c.vocab {
            let touched = [1usize, 2, 7, 8].contains(&t);
            assert_eq!(grads.touched_tokens[t], touched);
            let zero_row = de.row(t).iter().all(|&v| v == 0.0);
            if !touched {
                assert!(zero_row, "untouched token {t} has nonzero gradient");
            } else {
                assert!(!zero_row, "touched token {t} has zero gradient");
            }
        }
    }

    #[test]
    fn accuracy_chance_level_untrained() {
        let task = ModTask::new(Op::Add, 97).unwrap();
        let all = enumerate_examples(&task);
        let c = NetConfig::with_embed(97, 16, 64);
        let params = init_params(&c, 3).unwrap();
        let acc = accuracy(&params, &all).unwrap();
        assert!(
            (acc - 1.0 / 97.0).abs() < 0.02,
            "accuracy {acc} too far from chance"
        );
    }

    #[test]
    fn accuracy_zero_params_counts_class_zero() {
        let task = ModTask::new(Op::Add, 7).unwrap();
        let all = enumerate_examples(&task);
        let c = NetConfig::with_embed(7, 4, 8);
        let params = MlpParams::zeros(&c);
        let acc = accuracy(&params, &all).unwrap();
        let zero_frac =
            all.iter().filter(|e| e.label == 0).count() as f64 / all.len() as f64;
        assert_eq!(acc, zero_frac);
    }

    #[test]
    fn token_relabeling_with_permuted_rows_is_invariant() {
        let c = NetConfig::with_embed(7, 4, 8);
        let params = init_params(&c, 21).unwrap();
        let batch = small_batch(7, 10);
        let (loss, _) = forward(&params, &batch).unwrap();

        // Permute the vocabulary and permute E's rows to match.
        let v = c.vocab;
        let perm: Vec<usize> = (0..v).map(|i| (i + 3) % v).collect();
        let e = params.e.as_ref().unwrap();
        let mut e2 = Mat::zeros(v, c.d);
        for t in 0..v {
            e2.row_mut(perm[t]).copy_from_slice(e.row(t));
        }
        let mut params2 = params.clone();
        params2.e = Some(e2);
        let batch2 = Batch {
            inputs: batch
                .inputs
                .iter()
                .map(|toks| {
                    let mut t2 = *toks;
                    for t in &mut t2 {
                        *t = perm[*t as usize] as u32;
                    }
                    t2
                })
                .collect(),
            labels: batch.labels.clone(),
        };
        let (loss2, _) = forward(&params2, &batch2).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        for c in [NetConfig::with_embed(7, 4, 8), NetConfig::no_embed(7, 8)] {
            let params = init_params(&c, 77).unwrap();
            let flat = params.to_flat();
            assert_eq!(flat.len(), params.layout().total);
            let back = MlpParams::from_flat(&c, &flat);
            assert_eq!(params, back);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for c in [NetConfig::with_embed(7, 4, 8), NetConfig::no_embed(7, 8)] {
            let params = init_params(&c, 1234).unwrap();
            let path = dir.path().join(format!("{}.ckpt", c.mode.name()));
            save_checkpoint(&params, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(params, loaded);
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let c = NetConfig::with_embed(5, 3, 6);
        let params = init_params(&c, 1).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::CorruptFile { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
