//! Sparse dictionary approximation through learnable binary masks.
//!
//! Given a target direction `v` and a dictionary `W` (`d_model × d_dict`),
//! optimizes coefficients `x` and mask logits `θ` so that `W (x ⊙ z)` points
//! along `v` while few gates `z` stay open. Gates follow the stretched and
//! clamped HardConcrete distribution:
//!
//! ```text
//! S = σ((log(U / (1 − U)) + θ) / β)          U ~ Unif(0, 1)
//! z = min(1, max(0, S (ζ − γ) + γ))
//! L = 1 − cos(W (x ⊙ z), v)  +  λ · (1/d) Σ σ(θ_i − β log(−γ / ζ))
//! ```
//!
//! The clamp passes gradient straight through inside `(0, 1)` and blocks it
//! outside. After training, the noise-free mask `z* = clamp(σ(θ/β)(ζ − γ) + γ)`
//! selects the output coefficients `x ⊙ z*`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, norm, sigmoid, AdamConfig, AdamState, Matrix};

pub const DEFAULT_BETA: f64 = 2.0 / 3.0;
pub const DEFAULT_GAMMA: f64 = -0.1;
pub const DEFAULT_ZETA: f64 = 1.1;

/// Below this reconstruction norm the cosine term is treated as undefined.
const MIN_RECON_NORM: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SdaOptimizer {
    #[default]
    Adam,
    /// Plain gradient steps `p ← p − lr · ∇p`.
    Sgd,
}

impl std::str::FromStr for SdaOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(SdaOptimizer::Adam),
            "sgd" => Ok(SdaOptimizer::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected adam or sgd)"
            ))),
        }
    }
}

impl std::fmt::Display for SdaOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SdaOptimizer::Adam => "adam",
            SdaOptimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdaProblem {
    pub target: Vec<f64>,
    /// `d_model × d_dict`; columns are the atoms.
    pub dictionary: Matrix,
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub seed: u64,
    pub optimizer: SdaOptimizer,
    /// Standard deviation of the initial coefficients.
    pub init_sigma: f64,
}

impl SdaProblem {
    /// A problem with the default hyperparameters.
    pub fn new(target: Vec<f64>, dictionary: Matrix) -> Self {
        Self {
            target,
            dictionary,
            lambda: 0.1,
            lr: 1e-2,
            iterations: 2000,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            zeta: DEFAULT_ZETA,
            seed: 0,
            optimizer: SdaOptimizer::Adam,
            init_sigma: 0.01,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_dict(&self) -> usize {
        self.dictionary.cols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.target.len() == self.dictionary.rows(),
            Shape,
            "target has {} entries, dictionary atoms have {}",
            self.target.len(),
            self.dictionary.rows()
        );
        ensure!(self.d_dict() > 0, Shape, "dictionary has no atoms");
        crate::numerics::ensure_finite(&self.target, "target")?;
        ensure!(
            norm(&self.target) > 0.0,
            Degenerate,
            "target vector is zero"
        );
        check_bounds(self.beta, self.gamma, self.zeta)?;
        ensure!(self.iterations >= 1, Config, "need at least one iteration");
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            Config,
            "lambda must be finite and >= 0"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "learning rate must be positive"
        );
        ensure!(self.init_sigma >= 0.0, Config, "init sigma must be >= 0");
        Ok(())
    }
}

fn check_bounds(beta: f64, gamma: f64, zeta: f64) -> Result<()> {
    ensure!(
        beta > 0.0 && beta.is_finite(),
        Config,
        "temperature must be positive"
    );
    ensure!(
        gamma < 0.0 && zeta > 1.0 && gamma.is_finite() && zeta.is_finite(),
        Config,
        "mask bounds need gamma < 0 < 1 < zeta (got gamma = {gamma}, zeta = {zeta})"
    );
    Ok(())
}

/// Soft mask `S` and clamped gate `z` for noise `U`.
pub fn hardconcrete_sample(
    theta: &[f64],
    u: &[f64],
    beta: f64,
    gamma: f64,
    zeta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_bounds(beta, gamma, zeta)?;
    let g = Gates::sample(theta, u, beta, gamma, zeta)?;
    Ok((g.soft, g.gate))
}

/// Noise-free gate `clamp(σ(θ/β)(ζ − γ) + γ)`.
pub fn deterministic_mask(theta: &[f64], beta: f64, gamma: f64, zeta: f64) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| (sigmoid(t / beta) * (zeta - gamma) + gamma).clamp(0.0, 1.0))
        .collect()
}

/// `(1/d) Σ σ(θ_i − β log(−γ/ζ))`: the mean probability that a gate is non-zero.
pub fn sda_regularizer(theta: &[f64], beta: f64, gamma: f64, zeta: f64) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    expected_l0(theta, beta, gamma, zeta) / theta.len() as f64
}

/// `Σ σ(θ_i − β log(−γ/ζ))`, the expected number of open gates.
pub fn expected_l0(theta: &[f64], beta: f64, gamma: f64, zeta: f64) -> f64 {
    let shift = beta * (-gamma / zeta).ln();
    theta.iter().map(|&t| sigmoid(t - shift)).sum()
}

/// Closed-form `(P(z = 0), P(z = 1))` for each gate under fresh noise.
pub fn gate_probabilities(theta: &[f64], beta: f64, gamma: f64, zeta: f64) -> Vec<(f64, f64)> {
    let closed = beta * (-gamma / zeta).ln();
    let open = beta * ((1.0 - gamma) / (zeta - 1.0)).ln();
    theta
        .iter()
        .map(|&t| (1.0 - sigmoid(t - closed), sigmoid(t - open)))
        .collect()
}

struct Gates {
    soft: Vec<f64>,
    /// Value before clamping, kept to decide where gradient passes.
    stretched: Vec<f64>,
    gate: Vec<f64>,
}

impl Gates {
    fn sample(theta: &[f64], u: &[f64], beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        ensure!(
            theta.len() == u.len(),
            Shape,
            "noise has {} entries, logits have {}",
            u.len(),
            theta.len()
        );
        let mut soft = Vec::with_capacity(theta.len());
        let mut stretched = Vec::with_capacity(theta.len());
        let mut gate = Vec::with_capacity(theta.len());
        for (&t, &ui) in theta.iter().zip(u) {
            if !(ui > 0.0 && ui < 1.0) {
                return Err(Error::Numeric(format!(
                    "gate noise {ui} outside the open interval (0, 1)"
                )));
            }
            let s = sigmoid(((ui / (1.0 - ui)).ln() + t) / beta);
            let p = s * (zeta - gamma) + gamma;
            soft.push(s);
            stretched.push(p);
            gate.push(p.clamp(0.0, 1.0));
        }
        Ok(Self {
            soft,
            stretched,
            gate,
        })
    }
}

/// Loss and gradients at fixed noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SdaEval {
    pub loss: f64,
    pub cos_loss: f64,
    pub reg: f64,
    pub grad_x: Vec<f64>,
    pub grad_theta: Vec<f64>,
    /// The reconstruction was zero, so the cosine term (set to 1) contributed no gradient.
    pub degenerate: bool,
}

/// Evaluates the objective and its analytic gradients for a given noise draw.
pub fn sda_loss_and_grads(
    problem: &SdaProblem,
    x: &[f64],
    theta: &[f64],
    u: &[f64],
) -> Result<SdaEval> {
    let d = problem.d_dict();
    ensure!(
        x.len() == d && theta.len() == d,
        Shape,
        "coefficients/logits must have {d} entries"
    );
    let (beta, gamma, zeta) = (problem.beta, problem.gamma, problem.zeta);
    let gates = Gates::sample(theta, u, beta, gamma, zeta)?;
    let masked: Vec<f64> = x.iter().zip(&gates.gate).map(|(a, z)| a * z).collect();
    let recon = problem.dictionary.matvec(&masked)?;
    let recon_norm = norm(&recon);
    let target_norm = norm(&problem.target);
    ensure!(
        recon_norm.is_finite(),
        Numeric,
        "reconstruction norm overflowed ({recon_norm})"
    );

    let mut grad_x = vec![0.0; d];
    let mut grad_theta = vec![0.0; d];
    let degenerate = recon_norm < MIN_RECON_NORM;
    let cos_loss = if degenerate {
        1.0
    } else {
        let unit: Vec<f64> = problem.target.iter().map(|t| t / target_norm).collect();
        let cos = dot(&recon, &unit) / recon_norm;
        // ∂L_cos/∂v̂ = −(u − cos · v̂/‖v̂‖) / ‖v̂‖
        let mut d_recon = unit;
        axpy(-cos / recon_norm, &recon, &mut d_recon);
        for g in d_recon.iter_mut() {
            *g /= -recon_norm;
        }
        let d_masked = problem.dictionary.transpose_matvec(&d_recon)?;
        for i in 0..d {
            grad_x[i] = d_masked[i] * gates.gate[i];
            let p = gates.stretched[i];
            if p > 0.0 && p < 1.0 {
                let s = gates.soft[i];
                grad_theta[i] = d_masked[i] * x[i] * (zeta - gamma) * s * (1.0 - s) / beta;
            }
        }
        1.0 - cos
    };

    let shift = beta * (-gamma / zeta).ln();
    let scale = problem.lambda / d as f64;
    let mut reg_sum = 0.0;
    for (g, &t) in grad_theta.iter_mut().zip(theta) {
        let s = sigmoid(t - shift);
        reg_sum += s;
        *g += scale * s * (1.0 - s);
    }
    let reg = reg_sum / d as f64;
    Ok(SdaEval {
        loss: cos_loss + problem.lambda * reg,
        cos_loss,
        reg,
        grad_x,
        grad_theta,
        degenerate,
    })
}

/// Optimizer state for one run.
pub struct SdaState {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub steps: usize,
    rng: ChaCha8Rng,
    opt: Option<[AdamState; 2]>,
    noise: Vec<f64>,
}

impl SdaState {
    /// `x ~ N(0, init_sigma²)`, `θ = 0`.
    pub fn init(problem: &SdaProblem) -> Result<Self> {
        problem.validate()?;
        let d = problem.d_dict();
        let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
        let x = if problem.init_sigma > 0.0 {
            let n =
                Normal::new(0.0, problem.init_sigma).map_err(|e| Error::Config(e.to_string()))?;
            (0..d).map(|_| n.sample(&mut rng)).collect()
        } else {
            vec![0.0; d]
        };
        let opt = match problem.optimizer {
            SdaOptimizer::Adam => {
                let cfg = AdamConfig::with_lr(problem.lr);
                Some([AdamState::new(d, cfg), AdamState::new(d, cfg)])
            }
            SdaOptimizer::Sgd => None,
        };
        Ok(Self {
            x,
            theta: vec![0.0; d],
            steps: 0,
            rng,
            opt,
            noise: vec![0.0; d],
        })
    }

    /// Noise used by the most recent step.
    pub fn last_noise(&self) -> &[f64] {
        &self.noise
    }
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub cos_loss: f64,
    pub reg: f64,
    /// Every sampled gate was closed, so only the regularizer moved.
    pub skipped_cosine: bool,
    /// The ungated reconstruction vanished and one coefficient was re-drawn.
    pub recovered: bool,
}

/// Draws fresh noise, evaluates the loss, and updates `x` and `θ`.
///
/// When every gated coefficient is zero the cosine is undefined: that step
/// only applies the regularizer gradient and re-draws one random coefficient.
pub fn sda_step(problem: &SdaProblem, state: &mut SdaState) -> Result<StepOutcome> {
    for u in state.noise.iter_mut() {
        *u = open_unit(&mut state.rng);
    }
    let eval = sda_loss_and_grads(problem, &state.x, &state.theta, &state.noise)?;
    if !eval.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became {} at step {}",
            eval.loss, state.steps
        )));
    }
    match &mut state.opt {
        Some([ox, ot]) => {
            ox.step(&mut state.x, &eval.grad_x)?;
            ot.step(&mut state.theta, &eval.grad_theta)?;
        }
        None => {
            axpy(-problem.lr, &eval.grad_x, &mut state.x);
            axpy(-problem.lr, &eval.grad_theta, &mut state.theta);
        }
    }
    if let Some(i) = state
        .x
        .iter()
        .chain(&state.theta)
        .position(|v| !v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "parameter {i} diverged at step {} (lr = {:e})",
            state.steps, problem.lr
        )));
    }
    // Gates that merely sampled closed leave `x` intact; only a vanished
    // ungated reconstruction needs a fresh coefficient.
    let recovered = eval.degenerate && norm(&problem.dictionary.matvec(&state.x)?) < MIN_RECON_NORM;
    if recovered {
        let j = state.rng.random_range(0..problem.d_dict());
        let sigma = if problem.init_sigma > 0.0 {
            problem.init_sigma
        } else {
            0.01
        };
        let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        state.x[j] = n.sample(&mut state.rng);
    }
    state.steps += 1;
    Ok(StepOutcome {
        loss: eval.loss,
        cos_loss: eval.cos_loss,
        reg: eval.reg,
        skipped_cosine: eval.degenerate,
        recovered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdaResult {
    /// Non-zero `(atom, x_i · z*_i)` pairs in atom order.
    pub coefficients: Vec<(usize, f64)>,
    pub d_dict: usize,
    /// Cosine between `W (x ⊙ z*)` and the target; 0 when nothing survives.
    pub cosine: f64,
    /// `Σ P(z_i ≠ 0)` at the final logits.
    pub expected_l0: f64,
    /// Non-zero count of `x ⊙ z*`.
    pub l0: usize,
    pub lambda: f64,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    /// Steps that re-drew a coefficient after the reconstruction vanished.
    pub recoveries: usize,
}

impl SdaResult {
    pub fn support(&self) -> Vec<usize> {
        self.coefficients.iter().map(|&(i, _)| i).collect()
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d_dict];
        for &(i, c) in &self.coefficients {
            out[i] = c;
        }
        out
    }

    /// `feature_index,coefficient,sign_group` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feature_index", "coefficient", "sign_group"])?;
        for &(i, c) in &self.coefficients {
            let group = if c > 0.0 { "positive" } else { "negative" };
            out.write_record([i.to_string(), format!("{c:e}"), group.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Summary record without the coefficient list or loss trace.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary {
            cosine: f64,
            l0: usize,
            expected_l0: f64,
            lambda: f64,
            seed: u64,
            d_dict: usize,
            final_loss: Option<f64>,
            recoveries: usize,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            cosine: self.cosine,
            l0: self.l0,
            expected_l0: self.expected_l0,
            lambda: self.lambda,
            seed: self.seed,
            d_dict: self.d_dict,
            final_loss: self.loss_trace.last().copied(),
            recoveries: self.recoveries,
        })?)
    }
}

/// Runs the full optimization and reads out the noise-free sparse solution.
pub fn sda_solve(problem: &SdaProblem) -> Result<SdaResult> {
    let mut state = SdaState::init(problem)?;
    let mut loss_trace = Vec::with_capacity(problem.iterations);
    let mut recoveries = 0;
    for _ in 0..problem.iterations {
        let out = sda_step(problem, &mut state).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "{msg}; loss trace tail: {:?}",
                &loss_trace[loss_trace.len().saturating_sub(5)..]
            )),
            other => other,
        })?;
        recoveries += usize::from(out.recovered);
        loss_trace.push(out.loss);
    }
    let (beta, gamma, zeta) = (problem.beta, problem.gamma, problem.zeta);
    let mask = deterministic_mask(&state.theta, beta, gamma, zeta);
    let coefficients: Vec<(usize, f64)> = state
        .x
        .iter()
        .zip(&mask)
        .enumerate()
        .map(|(i, (x, z))| (i, x * z))
        .filter(|&(_, c)| c != 0.0)
        .collect();
    let mut dense = vec![0.0; problem.d_dict()];
    for &(i, c) in &coefficients {
        dense[i] = c;
    }
    let recon = problem.dictionary.matvec(&dense)?;
    let cosine = crate::numerics::cosine_sim(&recon, &problem.target).unwrap_or(0.0);
    Ok(SdaResult {
        l0: coefficients.len(),
        coefficients,
        d_dict: problem.d_dict(),
        cosine,
        expected_l0: expected_l0(&state.theta, beta, gamma, zeta),
        lambda: problem.lambda,
        seed: problem.seed,
        loss_trace,
        recoveries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub l0: usize,
    pub expected_l0: f64,
    pub cosine: f64,
}

/// Independent solves over a grid of sparsity weights, sorted by λ.
pub fn sparsity_sweep(problem: &SdaProblem, lambdas: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut points = lambdas
        .par_iter()
        .map(|&lambda| {
            let r = sda_solve(&problem.clone().with_lambda(lambda))?;
            Ok(SweepPoint {
                lambda,
                l0: r.l0,
                expected_l0: r.expected_l0,
                cosine: r.cosine,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(points)
}

/// `n` values spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    ensure!(
        lo > 0.0 && hi >= lo && n >= 1,
        Config,
        "grid needs 0 < lo <= hi and n >= 1"
    );
    if n == 1 {
        return Ok(vec![lo]);
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    Ok((0..n).map(|i| lo * (ratio * i as f64).exp()).collect())
}

/// Fewest atoms among sweep points that reach `min_cosine`.
pub fn atoms_needed(points: &[SweepPoint], min_cosine: f64) -> Option<usize> {
    points
        .iter()
        .filter(|p| p.cosine >= min_cosine)
        .map(|p| p.l0)
        .min()
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "l0", "expected_l0", "cosine"])?;
    for p in points {
        out.write_record([
            format!("{:e}", p.lambda),
            p.l0.to_string(),
            format!("{:e}", p.expected_l0),
            format!("{:e}", p.cosine),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `(atom, coefficient)` pairs of one sign.
pub type SignedFeatures = Vec<(usize, f64)>;

/// Selected atoms grouped by coefficient sign: `(positive, negative)`.
pub fn split_signed_features(result: &SdaResult) -> (SignedFeatures, SignedFeatures) {
    let pos = result
        .coefficients
        .iter()
        .copied()
        .filter(|&(_, c)| c > 0.0)
        .collect();
    let neg = result
        .coefficients
        .iter()
        .copied()
        .filter(|&(_, c)| c < 0.0)
        .collect();
    (pos, neg)
}

/// The standard basis of the residual stream, one atom per neuron.
pub fn neuron_basis(d_model: usize) -> Matrix {
    Matrix::identity(d_model)
}

/// Exhaustive search over small supports, used to check the optimizer.
pub mod oracle {
    use crate::error::{ensure, Result};
    use crate::numerics::{dot, norm, Matrix};

    /// Best achievable cosine when `target` is projected onto the span of `support`.
    /// Returns `None` if the chosen atoms are linearly dependent.
    pub fn support_cosine(dictionary: &Matrix, target: &[f64], support: &[usize]) -> Option<f64> {
        let k = support.len();
        let cols: Vec<Vec<f64>> = support.iter().map(|&j| dictionary.column(j)).collect();
        // Normal equations (Aᵀ A) c = Aᵀ v with Gaussian elimination.
        let mut a = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                a[i][j] = dot(&cols[i], &cols[j]);
            }
            a[i][k] = dot(&cols[i], target);
        }
        for p in 0..k {
            let piv = (p..k).max_by(|&r, &s| a[r][p].abs().total_cmp(&a[s][p].abs()))?;
            if a[piv][p].abs() < 1e-12 {
                return None;
            }
            a.swap(p, piv);
            let pivot = a[p].clone();
            for (r, row) in a.iter_mut().enumerate() {
                if r != p {
                    let f = row[p] / pivot[p];
                    for (x, y) in row[p..].iter_mut().zip(&pivot[p..]) {
                        *x -= f * y;
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
        let mut proj = vec![0.0; target.len()];
        for (c, col) in coef.iter().zip(&cols) {
            for (p, v) in proj.iter_mut().zip(col) {
                *p += c * v;
            }
        }
        let (np, nt) = (norm(&proj), norm(target));
        if np == 0.0 || nt == 0.0 {
            return Some(0.0);
        }
        Some(dot(&proj, target) / (np * nt))
    }

    /// Support of size at most `max_atoms` maximizing [`support_cosine`].
    ///
    /// Cosines within `tie_tol` count as equal; ties go to the smaller support,
    /// then to the lexicographically first one.
    pub fn best_support(
        dictionary: &Matrix,
        target: &[f64],
        max_atoms: usize,
        tie_tol: f64,
    ) -> Result<(Vec<usize>, f64)> {
        let n = dictionary.cols();
        ensure!(
            max_atoms >= 1 && max_atoms <= n,
            Config,
            "max_atoms must be in 1..={n}"
        );
        let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
        for k in 1..=max_atoms {
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                if let Some(c) = support_cosine(dictionary, target, &idx) {
                    if c > best.1 + tie_tol {
                        best = (idx.clone(), c);
                    }
                }
                // Next combination in lexicographic order.
                let mut i = k;
                while i > 0 && idx[i - 1] == n - k + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                idx[i - 1] += 1;
                for j in i..k {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
        Ok(best)
    }
}
