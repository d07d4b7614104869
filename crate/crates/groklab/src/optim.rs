//! Parameter update rules: SGD with weight decay, Adam with decoupled (or
//! optionally coupled) weight decay, and Adam-LR, which scales the embedding
//! block's learning rate by a fixed or adaptively recomputed ratio c.
//!
//! Adam-LR shares the Adam code path exactly — with c = 1 the trajectories
//! are bitwise identical — and moments are updated for every tensor every
//! step, so embedding rows absent from a batch keep drifting under stale
//! momentum unless the strict-sparse ablation is enabled.

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::net::{Grads, MlpParams, ParamLayout};
use std::path::Path;

const STATE_MAGIC: &[u8; 8] = b"GLABOPTS";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
    AdamLr,
}

impl OptKind {
    pub fn name(self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::Adam => "adam",
            OptKind::AdamLr => "adam_lr",
        }
    }
}

impl std::str::FromStr for OptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptKind::Sgd),
            "adam" => Ok(OptKind::Adam),
            "adam_lr" => Ok(OptKind::AdamLr),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer '{other}' (expected sgd|adam|adam_lr)"
            ))),
        }
    }
}

/// How Adam-LR chooses the embedding learning-rate ratio c.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioMode {
    Fixed(f64),
    /// Every `recompute_every` steps set
    /// `c = clamp(sigma_max(E)/sigma_max(W1) * f_W/f_E, c_min, c_max)`.
    Adaptive {
        recompute_every: u64,
        c_min: f64,
        c_max: f64,
    },
}

impl RatioMode {
    pub const DEFAULT_ADAPTIVE: RatioMode = RatioMode::Adaptive {
        recompute_every: 100,
        c_min: 1.0,
        c_max: 50.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adam-LR only; ignored by the other kinds.
    pub ratio: RatioMode,
    /// Adam family: fold decay into the gradient (classic L2) instead of
    /// the default decoupled pre-step shrink.
    pub coupled_decay: bool,
    /// Ablation: embedding rows untouched by the batch receive no update at
    /// all (no decay, no moment drift).
    pub strict_sparse: bool,
}

impl OptConfig {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        OptConfig {
            kind,
            lr,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ratio: RatioMode::Fixed(10.0),
            coupled_decay: false,
            strict_sparse: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if let RatioMode::Fixed(c) = self.ratio {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("ratio c must be > 0, got {c}")));
            }
        }
        if let RatioMode::Adaptive {
            recompute_every,
            c_min,
            c_max,
        } = self.ratio
        {
            if recompute_every == 0 || !(c_min >= 1.0 && c_min <= c_max) {
                return Err(Error::InvalidConfig(format!(
                    "adaptive ratio needs recompute_every >= 1 and 1 <= c_min <= c_max, got every={recompute_every} c_min={c_min} c_max={c_max}"
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer moments and bookkeeping counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    /// First/second Adam moments over the flattened parameter vector
    /// (zero-length for SGD).
    m: Vec<f64>,
    v: Vec<f64>,
    /// Global step count.
    pub t: u64,
    /// Steps in which any embedding row received nonzero gradient.
    pub f_e: u64,
    /// Steps in which the W1 block received nonzero gradient.
    pub f_w: u64,
    /// Per-token count of steps that touched the token (reporting).
    pub token_steps: Vec<u64>,
    /// Current Adam-LR ratio.
    pub current_ratio: f64,
}

impl OptState {
    pub fn new(config: &OptConfig, layout: &ParamLayout, vocab: usize) -> Self {
        let len = match config.kind {
            OptKind::Sgd => 0,
            _ => layout.total,
        };
        OptState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            f_e: 0,
            f_w: 0,
            token_steps: vec![0; vocab],
            current_ratio: match config.ratio {
                RatioMode::Fixed(c) => c,
                RatioMode::Adaptive { c_min, .. } => c_min,
            },
        }
    }
}

/// One optimizer tied to one training run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptConfig,
    pub state: OptState,
    layout: ParamLayout,
}

impl Optimizer {
    pub fn new(config: OptConfig, params: &MlpParams) -> Result<Self> {
        config.validate()?;
        let layout = params.layout();
        Ok(Optimizer {
            state: OptState::new(&config, &layout, params.config.vocab),
            config,
            layout,
        })
    }

    /// Applies one update. Grad shapes must match `params`; aborts on any
    /// non-finite result.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Grads) -> Result<()> {
        // Frequency bookkeeping: a block counts as updated when any entry of
        // its gradient is nonzero.
        let e_touched = grads.touched_tokens.iter().any(|&t| t);
        if e_touched {
            self.state.f_e += 1;
        }
        if grads.w1.data().iter().any(|&g| g != 0.0) {
            self.state.f_w += 1;
        }
        for (count, &touched) in self.state.token_steps.iter_mut().zip(&grads.touched_tokens) {
            if touched {
                *count += 1;
            }
        }

        if self.config.kind == OptKind::AdamLr {
            self.maybe_recompute_ratio(params);
        }

        match self.config.kind {
            OptKind::Sgd => self.sgd_step(params, grads),
            OptKind::Adam | OptKind::AdamLr => self.adam_step(params, grads),
        }
        self.state.t += 1;

        if !params.is_finite() {
            return Err(Error::NonFinite {
                context: format!("parameters after {} step {}", self.config.kind.name(), self.state.t),
            });
        }
        Ok(())
    }

    fn ratio(&self) -> f64 {
        if self.config.kind == OptKind::AdamLr {
            self.state.current_ratio
        } else {
            1.0
        }
    }

    fn maybe_recompute_ratio(&mut self, params: &MlpParams) {
        let RatioMode::Adaptive {
            recompute_every,
            c_min,
            c_max,
        } = self.config.ratio
        else {
            return;
        };
        if self.state.t % recompute_every != 0 {
            return;
        }
        let Some(e) = &params.e else {
            return;
        };
        let (sig_e, conv_e) = crate::diag::sigma_max_conv(e);
        let (sig_w, conv_w) = crate::diag::sigma_max_conv(&params.w1);
        if !conv_e || !conv_w || sig_w == 0.0 {
            log::warn!(
                "adaptive ratio recompute did not converge at step {}; keeping c = {}",
                self.state.t,
                self.state.current_ratio
            );
            return;
        }
        let f_e = self.state.f_e.max(1) as f64;
        let f_w = self.state.f_w as f64;
        let c = (sig_e / sig_w) * (f_w / f_e);
        self.state.current_ratio = c.clamp(c_min, c_max);
    }

    /// Eq. 3 form: every tensor moves by `-lr*wd*theta - lr*grad`; decay
    /// shrinks untouched embedding rows too.
    fn sgd_step(&mut self, params: &mut MlpParams, grads: &Grads) {
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        let strict = self.config.strict_sparse;
        let update = |theta: &mut [f64], g: &[f64]| {
            for (t, gv) in theta.iter_mut().zip(g) {
                *t -= lr * wd * *t + lr * gv;
            }
        };
        if let (Some(e), Some(de)) = (&mut params.e, &grads.e) {
            for row in 0..e.rows() {
                if strict && !grads.touched_tokens[row] {
                    continue;
                }
                update(e.row_mut(row), de.row(row));
            }
        }
        update(params.w1.data_mut(), grads.w1.data());
        update(&mut params.b1, &grads.b1);
        update(params.w2.data_mut(), grads.w2.data());
        update(&mut params.b2, &grads.b2);
    }

    /// Adam with bias correction; weight decay decoupled by default
    /// (`theta ← theta - lr*wd*theta` before the moment step), coupled-L2
    /// as an option. Adam-LR only changes the learning rate applied to the
    /// embedding block's moment step; decay is never scaled by c.
    fn adam_step(&mut self, params: &mut MlpParams, grads: &Grads) {
        let cfg = &self.config;
        let t_next = self.state.t + 1;
        let bc1 = 1.0 - cfg.beta1.powi(t_next as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t_next as i32);
        let lr_e = cfg.lr * self.ratio();

        let layout = self.layout;
        let block = |theta: &mut [f64],
                     g: &[f64],
                     mv: (&mut [f64], &mut [f64]),
                     lr: f64| {
            let (m, v) = mv;
            adam_block(theta, g, m, v, lr, cfg, bc1, bc2);
        };

        if let (Some(e), Some(de)) = (&mut params.e, &grads.e) {
            let d = e.cols();
            let (m, v) = (&mut self.state.m, &mut self.state.v);
            for row in 0..e.rows() {
                if cfg.strict_sparse && !grads.touched_tokens[row] {
                    continue;
                }
                let off = layout.e.0 + row * d;
                block(
                    e.row_mut(row),
                    de.row(row),
                    (&mut m[off..off + d], &mut v[off..off + d]),
                    lr_e,
                );
            }
        }
        let (m, v) = (&mut self.state.m, &mut self.state.v);
        block(
            params.w1.data_mut(),
            grads.w1.data(),
            (&mut m[layout.w1.0..layout.w1.1], &mut v[layout.w1.0..layout.w1.1]),
            cfg.lr,
        );
        block(
            &mut params.b1,
            &grads.b1,
            (&mut m[layout.b1.0..layout.b1.1], &mut v[layout.b1.0..layout.b1.1]),
            cfg.lr,
        );
        block(
            params.w2.data_mut(),
            grads.w2.data(),
            (&mut m[layout.w2.0..layout.w2.1], &mut v[layout.w2.0..layout.w2.1]),
            cfg.lr,
        );
        block(
            &mut params.b2,
            &grads.b2,
            (&mut m[layout.b2.0..layout.b2.1], &mut v[layout.b2.0..layout.b2.1]),
            cfg.lr,
        );
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = ByteWriter::new(std::io::BufWriter::new(file), path);
        w.write_bytes(STATE_MAGIC)?;
        w.write_u32(STATE_VERSION)?;
        w.write_u32(match self.config.kind {
            OptKind::Sgd => 0,
            OptKind::Adam => 1,
            OptKind::AdamLr => 2,
        })?;
        let s = &self.state;
        w.write_u64(s.t)?;
        w.write_u64(s.f_e)?;
        w.write_u64(s.f_w)?;
        w.write_f64(s.current_ratio)?;
        w.write_u64(s.m.len() as u64)?;
        w.write_f64_slice(&s.m)?;
        w.write_f64_slice(&s.v)?;
        w.write_u64(s.token_steps.len() as u64)?;
        for &c in &s.token_steps {
            w.write_u64(c)?;
        }
        w.finish()?;
        Ok(())
    }

    /// Restores moments/counters saved by `save_state`; the caller supplies
    /// the same config and params the run was built with.
    pub fn load_state(config: OptConfig, params: &MlpParams, path: &Path) -> Result<Self> {
        config.validate()?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(std::io::BufReader::new(file), path);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(r.corrupt("bad magic (not an optimizer state file)"));
        }
        let version = r.read_u32()?;
        if version != STATE_VERSION {
            return Err(r.corrupt(format!("unsupported state version {version}")));
        }
        let kind_code = r.read_u32()?;
        let expect = match config.kind {
            OptKind::Sgd => 0,
            OptKind::Adam => 1,
            OptKind::AdamLr => 2,
        };
        if kind_code != expect {
            return Err(r.corrupt(format!(
                "state kind code {kind_code} does not match config {}",
                config.kind.name()
            )));
        }
        let t = r.read_u64()?;
        let f_e = r.read_u64()?;
        let f_w = r.read_u64()?;
        let current_ratio = r.read_f64()?;
        let m_len = r.read_u64()? as usize;
        let layout = params.layout();
        let want = match config.kind {
            OptKind::Sgd => 0,
            _ => layout.total,
        };
        if m_len != want {
            return Err(r.corrupt(format!("moment length {m_len}, model needs {want}")));
        }
        let m = r.read_f64_vec(m_len)?;
        let v = r.read_f64_vec(m_len)?;
        let tok_len = r.read_u64()? as usize;
        if tok_len != params.config.vocab {
            return Err(r.corrupt(format!(
                "token counter length {tok_len}, vocab is {}",
                params.config.vocab
            )));
        }
        let mut token_steps = Vec::with_capacity(tok_len);
        for _ in 0..tok_len {
            token_steps.push(r.read_u64()?);
        }
        r.expect_eof()?;
        Ok(Optimizer {
            config,
            state: OptState {
                m,
                v,
                t,
                f_e,
                f_w,
                token_steps,
                current_ratio,
            },
            layout,
        })
    }
}

fn adam_block(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &OptConfig,
    bc1: f64,
    bc2: f64,
) {
    let wd = cfg.weight_decay;
    for i in 0..theta.len() {
        let mut gi = g[i];
        if cfg.coupled_decay {
            gi += wd * theta[i];
        } else {
            // Decoupled decay uses the base lr even on the E block.
            theta[i] -= cfg.lr * wd * theta[i];
        }
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
