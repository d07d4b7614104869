//! Training diagnostics: Hessian-vector products by central finite
//! differences of exact gradients, blockwise power-method eigenvalue
//! estimates, largest singular values, effective ranks of E/W1 and their
//! per-position products, embedding DFT spectra, the embedding-convergence
//! ODE model, and gradient-heatmap export.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::modspace::Example;
use crate::net::{backward, forward, Batch, Grads, MlpParams, Mode, ParamLayout, SEQ_LEN};
use crate::rng::{self, stream};
use crate::svg;
use rand::seq::SliceRandom;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which parameter block a curvature query restricts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    E,
    W1,
    All,
}

impl Block {
    /// Index range of the block inside the flat parameter vector.
    pub fn range(self, layout: &ParamLayout) -> (usize, usize) {
        match self {
            Block::E => layout.e,
            Block::W1 => layout.w1,
            Block::All => (0, layout.total),
        }
    }
}

/// Central finite difference of a gradient oracle:
/// `Hv ≈ [g(θ + εv) − g(θ − εv)] / 2ε` with `ε = eps_fd·(1+‖θ‖)/‖v‖`.
pub fn hvp_fd<F>(mut grad: F, theta: &[f64], v: &[f64], eps_fd: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps_fd > 0.0) {
        return Err(Error::InvalidConfig(format!("eps_fd must be > 0, got {eps_fd}")));
    }
    let v_norm = linalg::norm2(v);
    if v_norm == 0.0 {
        return Err(Error::InvalidConfig("hvp direction must be nonzero".into()));
    }
    let theta_norm = linalg::norm2(theta);
    let eps = eps_fd * (1.0 + theta_norm) / v_norm;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let g_plus = grad(&plus)?;
    let g_minus = grad(&minus)?;
    let hv: Vec<f64> = g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("hvp result at finite-difference step {eps:.3e}"),
        });
    }
    Ok(hv)
}

/// Gradient of the batch loss as a flat vector, evaluated at a flat
/// parameter point.
pub fn model_grad(params_template: &MlpParams, flat: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    let p = MlpParams::from_flat(&params_template.config, flat);
    let (_, cache) = forward(&p, batch)?;
    Ok(backward(&p, batch, &cache).to_flat())
}

/// Model HVP restricted to a block: out-of-block components of the
/// direction and the result are zeroed.
pub fn hvp(
    params: &MlpParams,
    batch: &Batch,
    v: &[f64],
    block: Block,
    eps_fd: f64,
) -> Result<Vec<f64>> {
    let layout = params.layout();
    if v.len() != layout.total {
        return Err(Error::ShapeMismatch(format!(
            "direction length {} != parameter count {}",
            v.len(),
            layout.total
        )));
    }
    let (lo, hi) = block.range(&layout);
    let mut masked = vec![0.0; v.len()];
    masked[lo..hi].copy_from_slice(&v[lo..hi]);
    let theta = params.to_flat();
    let mut hv = hvp_fd(|flat| model_grad(params, flat, batch), &theta, &masked, eps_fd)?;
    for (i, x) in hv.iter_mut().enumerate() {
        if i < lo || i >= hi {
            *x = 0.0;
        }
    }
    Ok(hv)
}

/// Power-method estimate of the dominant blockwise Hessian eigenvalue.
#[derive(Debug, Clone)]
pub struct BlockEig {
    pub lambda: f64,
    /// `‖Hv − λv‖` at the final iterate.
    pub residual: f64,
    /// Rayleigh-quotient delta converged and the residual is small
    /// (≤ 1e−4·max(1,|λ|)).
    pub converged: bool,
    pub iters: usize,
    /// Final block-dimension iterate, reusable as a warm start.
    pub vector: Vec<f64>,
}

/// Appendix-C style iteration: normalize, apply the HVP, update the
/// Rayleigh quotient, stop on a relative eigenvalue delta below `tol` or at
/// `iters`. The returned vector lives in the block subspace.
pub fn power_method_max_eig(
    params: &MlpParams,
    batch: &Batch,
    block: Block,
    iters: usize,
    tol: f64,
    eps_fd: f64,
    seed: u64,
    warm_start: Option<&[f64]>,
) -> Result<BlockEig> {
    let layout = params.layout();
    let (lo, hi) = block.range(&layout);
    let dim = hi - lo;
    if dim == 0 {
        return Err(Error::InvalidConfig(
            "requested block is empty for this model".into(),
        ));
    }
    let theta = params.to_flat();
    let first_error = std::cell::RefCell::new(None);
    let apply = |bv: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; layout.total];
        full[lo..hi].copy_from_slice(bv);
        match hvp_fd(|flat| model_grad(params, flat, batch), &theta, &full, eps_fd) {
            Ok(hv) => hv[lo..hi].to_vec(),
            Err(e) => {
                first_error.borrow_mut().get_or_insert(e);
                vec![0.0; bv.len()]
            }
        }
    };
    let r = linalg::power_method(apply, dim, iters, tol, rng::mix(seed, stream::POWER), warm_start);
    if let Some(e) = first_error.into_inner() {
        return Err(e);
    }
    let converged = r.converged && r.residual <= 1e-4 * r.value.abs().max(1.0);
    Ok(BlockEig {
        lambda: r.value,
        residual: r.residual,
        converged,
        iters: r.iters,
        vector: r.vector,
    })
}

/// Largest singular value with a convergence flag, via power iteration on
/// `M^T M` (tolerance 1e−10, up to 1000 iterations).
pub(crate) fn sigma_max_conv(m: &Mat) -> (f64, bool) {
    if m.rows() == 0 || m.cols() == 0 || m.data().iter().all(|&x| x == 0.0) {
        return (0.0, true);
    }
    let r = linalg::power_method(
        |x| {
            let mx = m.matvec(x);
            m.matvec_t(&mx)
        },
        m.cols(),
        1000,
        1e-10,
        0x5157,
        None,
    );
    (r.value.max(0.0).sqrt(), r.converged)
}

/// Largest singular value of a matrix.
pub fn sigma_max(m: &Mat) -> f64 {
    sigma_max_conv(m).0
}

/// Number of singular values at or above `rel_tol * sigma_max`, computed
/// with the one-sided Jacobi SVD. Zero matrices have rank 0.
pub fn effective_rank(m: &Mat, rel_tol: f64) -> usize {
    assert!(rel_tol > 0.0 && rel_tol < 1.0, "rel_tol must be in (0,1)");
    if m.rows() == 0 || m.cols() == 0 {
        return 0;
    }
    let sv = linalg::jacobi_svd_values(m);
    let top = sv.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s >= rel_tol * top).count()
}

pub const DEFAULT_RANK_REL_TOL: f64 = 1e-3;

/// Effective ranks of the four per-position products `E·W^(j)ᵀ` (W1 split
/// columnwise into h×d position blocks) plus their horizontal
/// concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductRanks {
    pub per_position: [usize; SEQ_LEN],
    pub combined: usize,
}

pub fn product_ranks(e: &Mat, w1: &Mat, rel_tol: f64) -> Result<ProductRanks> {
    let d = e.cols();
    if w1.cols() != SEQ_LEN * d {
        return Err(Error::ShapeMismatch(format!(
            "W1 has {} columns, expected 4·d = {}",
            w1.cols(),
            SEQ_LEN * d
        )));
    }
    let mut per_position = [0usize; SEQ_LEN];
    let mut combined: Option<Mat> = None;
    for (j, rank_slot) in per_position.iter_mut().enumerate() {
        let wj = w1.col_block(j * d, d);
        let prod = e.matmul_nt(&wj); // V x h
        *rank_slot = effective_rank(&prod, rel_tol);
        combined = Some(match combined {
            None => prod,
            Some(acc) => acc.hcat(&prod),
        });
    }
    Ok(ProductRanks {
        per_position,
        combined: effective_rank(&combined.unwrap(), rel_tol),
    })
}

/// Full p-point DFT magnitude profile of the operand-token block of E:
/// per frequency, the ℓ2-norm over embedding coordinates of the
/// 1/√p-normalized transform. Parseval holds exactly under this
/// normalization: the squared norms sum to the squared entries.
pub fn fft_spectrum_full(e: &Mat, p: usize) -> Result<Vec<f64>> {
    if p > e.rows() {
        return Err(Error::ShapeMismatch(format!(
            "p = {p} exceeds embedding row count {}",
            e.rows()
        )));
    }
    let d = e.cols();
    let scale = 1.0 / (p as f64).sqrt();
    let mut norms = vec![0.0f64; p];
    // Precomputed twiddle tables for the O(p^2 d) direct transform.
    let angles: Vec<f64> = (0..p)
        .map(|k| -2.0 * std::f64::consts::PI * k as f64 / p as f64)
        .collect();
    for (f, norm_slot) in norms.iter_mut().enumerate() {
        let mut energy = 0.0;
        for j in 0..d {
            let mut re = 0.0;
            let mut im = 0.0;
            for a in 0..p {
                let angle = angles[(f * a) % p];
                let v = e.get(a, j);
                re += v * angle.cos();
                im += v * angle.sin();
            }
            energy += re * re + im * im;
        }
        *norm_slot = energy.sqrt() * scale;
    }
    Ok(norms)
}

/// The first ⌈p/2⌉ components of the spectrum (the rest mirror them).
pub fn fft_spectrum(e: &Mat, p: usize) -> Result<Vec<f64>> {
    let mut full = fft_spectrum_full(e, p)?;
    full.truncate(p.div_ceil(2));
    Ok(full)
}

/// Simulation of the per-dimension embedding ODE `de/dt = −λe − p·g`.
#[derive(Debug, Clone)]
pub struct OdeTrace {
    pub lambda: f64,
    pub p: f64,
    pub g: f64,
    pub e0: f64,
    /// Closed-form equilibrium `−p·g/λ`.
    pub equilibrium: f64,
    /// Distance coefficient `C = e0 − equilibrium`.
    pub c: f64,
    /// Sampled (t, e(t)) pairs from the integration grid.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// First time within ε of equilibrium (log-interpolated between grid
    /// points, exact for exponential decay); `None` if never reached.
    pub t_eps: Option<f64>,
    /// Max |numeric − closed form| over the sampled points.
    pub max_closed_form_err: f64,
}

/// Fixed-step RK4 integration; records the trajectory (decimated to ≤ 1025
/// samples), the first ε-crossing, and the deviation from the closed-form
/// solution `e(t) = C·e^{−λt} + equilibrium`.
pub fn simulate_embedding_ode(
    lambda: f64,
    p: f64,
    g: f64,
    e0: f64,
    horizon: f64,
    eps: f64,
) -> Result<OdeTrace> {
    if !(lambda > 0.0) || !(horizon > 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need lambda > 0, horizon > 0, eps > 0; got {lambda}, {horizon}, {eps}"
        )));
    }
    let equilibrium = -p * g / lambda;
    let c = e0 - equilibrium;
    let f = |e: f64| -lambda * e - p * g;

    let n_steps = ((200.0 * lambda * horizon).ceil() as usize).clamp(1_000, 2_000_000);
    let dt = horizon / n_steps as f64;
    let stride = n_steps.div_ceil(1024);

    let mut e = e0;
    let mut t_eps = if c.abs() <= eps { Some(0.0) } else { None };
    let mut times = vec![0.0];
    let mut values = vec![e0];
    let mut max_err: f64 = 0.0;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let d_prev = (e - equilibrium).abs();
        let k1 = f(e);
        let k2 = f(e + 0.5 * dt * k1);
        let k3 = f(e + 0.5 * dt * k2);
        let k4 = f(e + dt * k3);
        e += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let t_next = t + dt;
        let d_next = (e - equilibrium).abs();
        if t_eps.is_none() && d_prev > eps && d_next <= eps {
            // Distance decays exactly exponentially, so interpolate the
            // crossing on a log scale.
            t_eps = Some(t + (d_prev / eps).ln() / lambda);
        }
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            times.push(t_next);
            values.push(e);
            let closed = c * (-lambda * t_next).exp() + equilibrium;
            max_err = max_err.max((e - closed).abs());
        }
    }
    Ok(OdeTrace {
        lambda,
        p,
        g,
        e0,
        equilibrium,
        c,
        times,
        values,
        t_eps,
        max_closed_form_err: max_err,
    })
}

/// The closed-form lower bound `T = ln(|C|/ε)/λ` for comparison with the
/// measured crossing time.
pub fn ode_t_eps_closed_form(lambda: f64, c: f64, eps: f64) -> Option<f64> {
    if c.abs() <= eps {
        Some(0.0)
    } else {
        Some((c.abs() / eps).ln() / lambda)
    }
}

fn format_f64(v: f64) -> String {
    // `{}` prints the shortest representation that round-trips exactly.
    format!("{v}")
}

fn write_abs_csv(m: &Mat, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format_f64(v.abs())).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a CSV of f64s written by this module (used by tests and the CLI).
pub fn read_csv_matrix(path: &Path) -> Result<Mat> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.parse().map_err(|_| Error::ParseError {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    what: format!("bad float '{f}'"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Ok(Mat::zeros(0, 0));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ParseError {
            path: path.to_path_buf(),
            line: 0,
            what: "ragged rows".into(),
        });
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Mat::from_vec(data.len() / cols, cols, data))
}

/// Writes |∂L/∂E| and |∂L/∂W1| as CSV matrices plus one SVG with both
/// panels on a shared log color scale. Returns the written paths.
pub fn grad_heatmap(grads: &Grads, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let w1_abs = {
        let mut m = grads.w1.clone();
        m.data_mut().iter_mut().for_each(|v| *v = v.abs());
        m
    };
    let w1_csv = dir.join("w1_grad.csv");
    write_abs_csv(&grads.w1, &w1_csv)?;
    written.push(w1_csv);
    let svg_path = dir.join("grad_heatmap.svg");
    match &grads.e {
        Some(e) => {
            let e_abs = {
                let mut m = e.clone();
                m.data_mut().iter_mut().for_each(|v| *v = v.abs());
                m
            };
            let e_csv = dir.join("e_grad.csv");
            write_abs_csv(e, &e_csv)?;
            written.push(e_csv);
            svg::heatmap_panels(
                &svg_path,
                "gradient magnitudes (shared log scale)",
                &[("|dL/dE|", &e_abs), ("|dL/dW1|", &w1_abs)],
            )?;
        }
        None => {
            svg::heatmap_panels(
                &svg_path,
                "gradient magnitudes (shared log scale)",
                &[("|dL/dW1|", &w1_abs)],
            )?;
        }
    }
    written.push(svg_path);
    Ok(written)
}

/// Fixed evaluation batch for curvature diagnostics, drawn once from the
/// held-out examples so per-checkpoint curves are comparable.
pub fn probe_batch(examples: &[Example], size: usize, seed: u64) -> Batch {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    let mut r = rng::chacha(rng::mix(seed, stream::PROBE));
    idx.shuffle(&mut r);
    idx.truncate(size.min(examples.len()));
    let chosen: Vec<Example> = idx.into_iter().map(|i| examples[i]).collect();
    Batch::from_examples(&chosen)
}

pub const DEFAULT_PROBE_SIZE: usize = 512;
pub const DEFAULT_EPS_FD: f64 = 1e-5;

/// One checkpoint's diagnostics.
#[derive(Debug, Clone)]
pub struct DiagReport {
    pub epoch: usize,
    pub lambda_max_e: f64,
    pub lambda_e_residual: f64,
    pub lambda_e_converged: bool,
    pub lambda_max_w: f64,
    pub lambda_w_residual: f64,
    pub lambda_w_converged: bool,
    pub sigma_max_e: f64,
    pub sigma_max_w: f64,
    pub rank_e: usize,
    pub rank_w: usize,
    pub rank_ew: usize,
    pub rank_ew_pos: [usize; SEQ_LEN],
    pub fft_norms: Vec<f64>,
}

/// Computes per-checkpoint reports, warm-starting each power-method call
/// from the previous checkpoint's eigenvector.
#[derive(Debug, Clone)]
pub struct DiagEngine {
    pub power_iters: usize,
    pub power_tol: f64,
    pub eps_fd: f64,
    pub rank_rel_tol: f64,
    pub seed: u64,
    warm_e: Option<Vec<f64>>,
    warm_w: Option<Vec<f64>>,
}

impl DiagEngine {
    pub fn new(seed: u64) -> Self {
        DiagEngine {
            power_iters: 80,
            power_tol: 1e-5,
            eps_fd: DEFAULT_EPS_FD,
            rank_rel_tol: DEFAULT_RANK_REL_TOL,
            seed,
            warm_e: None,
            warm_w: None,
        }
    }

    pub fn report(
        &mut self,
        params: &MlpParams,
        probe: &Batch,
        epoch: usize,
    ) -> Result<DiagReport> {
        if params.config.mode != Mode::WithEmbed {
            return Err(Error::InvalidConfig(
                "diagnostics require a with-embedding model".into(),
            ));
        }
        let e = params.e.as_ref().expect("with-embed model has E");

        let eig_e = power_method_max_eig(
            params,
            probe,
            Block::E,
            self.power_iters,
            self.power_tol,
            self.eps_fd,
            self.seed,
            self.warm_e.as_deref(),
        )?;
        self.warm_e = Some(eig_e.vector.clone());
        let eig_w = power_method_max_eig(
            params,
            probe,
            Block::W1,
            self.power_iters,
            self.power_tol,
            self.eps_fd,
            self.seed ^ 1,
            self.warm_w.as_deref(),
        )?;
        self.warm_w = Some(eig_w.vector.clone());

        let products = product_ranks(e, &params.w1, self.rank_rel_tol)?;
        let p = params.config.p;
        Ok(DiagReport {
            epoch,
            lambda_max_e: eig_e.lambda,
            lambda_e_residual: eig_e.residual,
            lambda_e_converged: eig_e.converged,
            lambda_max_w: eig_w.lambda,
            lambda_w_residual: eig_w.residual,
            lambda_w_converged: eig_w.converged,
            sigma_max_e: sigma_max(e),
            sigma_max_w: sigma_max(&params.w1),
            rank_e: effective_rank(e, self.rank_rel_tol),
            rank_w: effective_rank(&params.w1, self.rank_rel_tol),
            rank_ew: products.combined,
            rank_ew_pos: products.per_position,
            fft_norms: fft_spectrum(e, p)?,
        })
    }
}

/// Header for the per-checkpoint diagnostics CSV; the trailing f<k> columns
/// hold the ⌈p/2⌉ DFT norms.
pub fn write_diag_csv_header(w: &mut impl Write, p: usize) -> std::io::Result<()> {
    write!(
        w,
        "epoch,lambda_max_E,lambda_E_residual,lambda_E_converged,\
         lambda_max_W,lambda_W_residual,lambda_W_converged,\
         sigma_max_E,sigma_max_W,rank_E,rank_W,rank_EW,\
         rank_EW_pos1,rank_EW_pos2,rank_EW_pos3,rank_EW_pos4"
    )?;
    for k in 0..p.div_ceil(2) {
        write!(w, ",f{k}")?;
    }
    writeln!(w)
}

pub fn append_diag_csv_row(w: &mut impl Write, r: &DiagReport) -> std::io::Result<()> {
    write!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        format_f64(r.lambda_max_e),
        format_f64(r.lambda_e_residual),
        r.lambda_e_converged,
        format_f64(r.lambda_max_w),
        format_f64(r.lambda_w_residual),
        r.lambda_w_converged,
        format_f64(r.sigma_max_e),
        format_f64(r.sigma_max_w),
        r.rank_e,
        r.rank_w,
        r.rank_ew,
        r.rank_ew_pos[0],
        r.rank_ew_pos[1],
        r.rank_ew_pos[2],
        r.rank_ew_pos[3]
    )?;
    for f in &r.fft_norms {
        write!(w, ",{}", format_f64(*f))?;
    }
    writeln!(w)
}
