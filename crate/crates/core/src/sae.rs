//! ReLU sparse autoencoder over residual-stream vectors.
//!
//! ```text
//! f  = ReLU(W_enc x + b_enc)          W_enc: d_sae × d_model
//! x̂  = W_dec f + b_dec                W_dec: d_model × d_sae, unit-norm columns
//! L  = mean_b ‖x − x̂‖² + λ ‖f‖₁
//! ```
//!
//! Gradients are derived by hand; the encoder input is the raw `x` (no
//! decoder-bias subtraction). After every optimizer step the decoder columns
//! are projected back to unit norm.
//!
//! # SAE01 checkpoint
//!
//! `"SAE01" | u32 d_model | u32 d_sae | W_enc | b_enc | W_dec | b_dec`, every
//! block little-endian `f32`, matrices row-major. A `key = value` sidecar
//! (`<path>.meta`) records the training config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, read_f32_block, read_magic, read_u32, write_f32_block};
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, ordered_chunk_sum, AdamConfig, AdamState, Matrix, Precision};
use crate::store::{BatchStream, Modality, Shard};

pub const SAE_MAGIC: &[u8; 5] = b"SAE01";

/// Rows per parallel work unit. Fixed so the reduction order never depends on
/// the thread count.
const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

/// Encoder output and reconstruction for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeOutput {
    /// Non-negative feature activations, length `d_sae`.
    pub features: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

impl SaeParams {
    /// Uniform `±1/√d_model` weights, unit decoder columns, zero biases.
    pub fn init(d_model: usize, d_sae: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (d_model as f64).sqrt();
        let w_enc = Matrix::from_fn(d_sae, d_model, |_, _| rng.random_range(-a..a));
        let mut w_dec = Matrix::from_fn(d_model, d_sae, |_, _| rng.random_range(-a..a));
        w_dec.normalize_columns();
        Self {
            w_enc,
            b_enc: vec![0.0; d_sae],
            w_dec,
            b_dec: vec![0.0; d_model],
        }
    }

    pub fn zeros(d_model: usize, d_sae: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(d_sae, d_model),
            b_enc: vec![0.0; d_sae],
            w_dec: Matrix::zeros(d_model, d_sae),
            b_dec: vec![0.0; d_model],
        }
    }

    pub fn from_parts(
        w_enc: Matrix,
        b_enc: Vec<f64>,
        w_dec: Matrix,
        b_dec: Vec<f64>,
    ) -> Result<Self> {
        let (d_sae, d_model) = w_enc.shape();
        ensure!(
            w_dec.shape() == (d_model, d_sae),
            Shape,
            "decoder is {:?}, expected ({d_model}, {d_sae})",
            w_dec.shape()
        );
        ensure!(
            b_enc.len() == d_sae,
            Shape,
            "b_enc has {} entries, expected {d_sae}",
            b_enc.len()
        );
        ensure!(
            b_dec.len() == d_model,
            Shape,
            "b_dec has {} entries, expected {d_model}",
            b_dec.len()
        );
        crate::numerics::ensure_finite(&b_enc, "b_enc")?;
        crate::numerics::ensure_finite(&b_dec, "b_dec")?;
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    pub fn d_model(&self) -> usize {
        self.b_dec.len()
    }

    pub fn d_sae(&self) -> usize {
        self.b_enc.len()
    }

    /// Feature activations only.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut f = vec![0.0; self.d_sae()];
        self.encode_into(x, &mut f);
        Ok(f)
    }

    pub fn forward(&self, x: &[f64]) -> Result<SaeOutput> {
        self.check_input(x)?;
        let mut features = vec![0.0; self.d_sae()];
        self.encode_into(x, &mut features);
        let mut reconstruction = vec![0.0; self.d_model()];
        self.decode_into(&features, &mut reconstruction);
        Ok(SaeOutput {
            features,
            reconstruction,
        })
    }

    /// Re-projects every decoder column to unit L2 norm.
    pub fn normalize_decoder(&mut self) {
        self.w_dec.normalize_columns();
    }

    /// Decoder columns as a `d_model × d_sae` dictionary.
    pub fn decoder_dictionary(&self) -> &Matrix {
        &self.w_dec
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure!(
            x.len() == self.d_model(),
            Shape,
            "input has {} entries, SAE expects d_model = {}",
            x.len(),
            self.d_model()
        );
        Ok(())
    }

    /// Writes pre-activations into `f` then applies ReLU (0 at exactly 0).
    fn encode_into(&self, x: &[f64], f: &mut [f64]) {
        for (i, fi) in f.iter_mut().enumerate() {
            let pre = dot(self.w_enc.row(i), x) + self.b_enc[i];
            *fi = if pre > 0.0 { pre } else { 0.0 };
        }
    }

    fn decode_into(&self, f: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b_dec);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.w_dec.row(r);
            let mut s = 0.0;
            for (w, &fi) in row.iter().zip(f) {
                if fi != 0.0 {
                    s += w * fi;
                }
            }
            *o += s;
        }
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.data_mut(),
            &mut self.b_enc,
            self.w_dec.data_mut(),
            &mut self.b_dec,
        ]
    }

    fn round_to(&mut self, precision: Precision) {
        for block in self.blocks_mut() {
            precision.apply(block);
        }
    }
}

/// Gradients for the four parameter blocks, laid out like [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

/// Loss value, its pieces, and per-batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeLoss {
    pub loss: f64,
    /// Mean per-vector squared error.
    pub mse: f64,
    /// Mean L1 norm of the features.
    pub l1: f64,
    /// Mean number of active features.
    pub l0: f64,
    pub grads: SaeGradients,
    /// Rows in the batch that activated each feature.
    pub fire_counts: Vec<f64>,
    /// Total squared error and total variance around the batch mean, for FVU.
    pub sq_error: f64,
    pub variance: f64,
}

/// Mean over the batch of `‖x − x̂‖² + λ‖f‖₁`, with analytic gradients.
pub fn sae_loss(params: &SaeParams, batch: &Matrix, lambda: f64) -> Result<SaeLoss> {
    let (d_model, d_sae) = (params.d_model(), params.d_sae());
    ensure!(
        batch.cols() == d_model,
        Shape,
        "batch has {} columns, SAE expects d_model = {d_model}",
        batch.cols()
    );
    ensure!(batch.rows() > 0, Shape, "empty batch");
    ensure!(
        lambda >= 0.0 && lambda.is_finite(),
        Config,
        "lambda must be finite and >= 0"
    );

    let b = batch.rows() as f64;
    // Layout: grads (enc, b_enc, dec, b_dec) | fire counts | sq_err, l1, l0, ‖x‖² | Σx
    let n_enc = d_sae * d_model;
    let off_benc = n_enc;
    let off_dec = off_benc + d_sae;
    let off_bdec = off_dec + d_model * d_sae;
    let off_fire = off_bdec + d_model;
    let off_scalar = off_fire + d_sae;
    let off_sum = off_scalar + 4;
    let len = off_sum + d_model;

    let rows: Vec<usize> = (0..batch.rows()).collect();
    let total = ordered_chunk_sum(&rows, ROW_CHUNK, len, |chunk| {
        let mut acc = vec![0.0; len];
        let mut f = vec![0.0; d_sae];
        let mut xhat = vec![0.0; d_model];
        let mut g = vec![0.0; d_model];
        let mut active = Vec::with_capacity(d_sae);
        for &r in chunk {
            let x = batch.row(r);
            params.encode_into(x, &mut f);
            params.decode_into(&f, &mut xhat);
            active.clear();
            active.extend((0..d_sae).filter(|&i| f[i] > 0.0));

            let mut sq = 0.0;
            for ((gi, xh), xi) in g.iter_mut().zip(&xhat).zip(x) {
                let resid = xh - xi;
                sq += resid * resid;
                *gi = 2.0 * resid / b;
            }
            let l1: f64 = active.iter().map(|&i| f[i]).sum();

            // Decoder.
            for (rr, &gr) in g.iter().enumerate() {
                let base = off_dec + rr * d_sae;
                for &i in &active {
                    acc[base + i] += gr * f[i];
                }
                acc[off_bdec + rr] += gr;
            }
            // Encoder, through the ReLU; inactive units get zero gradient.
            for &i in &active {
                let mut df = lambda / b;
                for (rr, &gr) in g.iter().enumerate() {
                    df += params.w_dec.get(rr, i) * gr;
                }
                let base = i * d_model;
                for (c, &xc) in x.iter().enumerate() {
                    acc[base + c] += df * xc;
                }
                acc[off_benc + i] += df;
                acc[off_fire + i] += 1.0;
            }
            acc[off_scalar] += sq;
            acc[off_scalar + 1] += l1;
            acc[off_scalar + 2] += active.len() as f64;
            acc[off_scalar + 3] += dot(x, x);
            for (s, xc) in acc[off_sum..].iter_mut().zip(x) {
                *s += xc;
            }
        }
        acc
    });

    let sq_error = total[off_scalar];
    let l1 = total[off_scalar + 1] / b;
    let sum_x = &total[off_sum..];
    let variance = (total[off_scalar + 3] - dot(sum_x, sum_x) / b).max(0.0);
    let mse = sq_error / b;
    let loss = mse + lambda * l1;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "SAE loss is not finite (mse = {mse:e}, l1 = {l1:e}, lambda = {lambda:e})"
        )));
    }
    Ok(SaeLoss {
        loss,
        mse,
        l1,
        l0: total[off_scalar + 2] / b,
        grads: SaeGradients {
            w_enc: total[..off_benc].to_vec(),
            b_enc: total[off_benc..off_dec].to_vec(),
            w_dec: total[off_dec..off_bdec].to_vec(),
            b_dec: total[off_bdec..off_fire].to_vec(),
        },
        fire_counts: total[off_fire..off_scalar].to_vec(),
        sq_error,
        variance,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainConfig {
    pub lr: f64,
    pub lambda_max: f64,
    /// Fraction of steps over which λ ramps linearly from 0.
    pub lambda_warmup_frac: f64,
    /// Fraction of steps at the end over which lr decays linearly to 0.
    pub lr_decay_frac: f64,
    pub total_tokens: u64,
    pub batch_size: usize,
    pub expansion_factor: usize,
    pub precision: Precision,
    pub seed: u64,
    /// Steps per report interval.
    pub eval_interval: usize,
    /// A feature is dead if it has not fired in this many consecutive intervals.
    pub dead_window: usize,
    pub shuffle_buffer: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            lambda_max: 5.0,
            lambda_warmup_frac: 0.05,
            lr_decay_frac: 0.20,
            total_tokens: 2_000_000,
            batch_size: 4096,
            expansion_factor: 8,
            precision: Precision::F64,
            seed: 0,
            eval_interval: 100,
            dead_window: 10,
            shuffle_buffer: crate::store::DEFAULT_SHUFFLE_BUFFER,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "lr must be positive"
        );
        ensure!(
            self.lambda_max >= 0.0 && self.lambda_max.is_finite(),
            Config,
            "lambda_max must be finite and >= 0"
        );
        for (name, v) in [
            ("lambda warm-up fraction", self.lambda_warmup_frac),
            ("lr decay fraction", self.lr_decay_frac),
        ] {
            ensure!(
                (0.0..=1.0).contains(&v),
                Config,
                "{name} must lie in [0, 1], got {v}"
            );
        }
        ensure!(
            self.total_tokens > 0,
            Config,
            "total_tokens must be positive"
        );
        ensure!(self.batch_size > 0, Config, "batch size must be positive");
        ensure!(
            self.expansion_factor > 0,
            Config,
            "expansion factor must be positive"
        );
        ensure!(
            self.eval_interval > 0,
            Config,
            "eval interval must be positive"
        );
        ensure!(self.dead_window > 0, Config, "dead window must be positive");
        Ok(())
    }

    /// Optimizer steps needed to consume `total_tokens`.
    pub fn total_steps(&self) -> usize {
        (self.total_tokens.div_ceil(self.batch_size as u64) as usize).max(1)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("lr", self.lr.to_string()),
            ("lambda-max", self.lambda_max.to_string()),
            ("lambda-warmup", self.lambda_warmup_frac.to_string()),
            ("lr-decay", self.lr_decay_frac.to_string()),
            ("total-tokens", self.total_tokens.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("expansion-factor", self.expansion_factor.to_string()),
            ("precision", self.precision.to_string()),
            ("seed", self.seed.to_string()),
            ("eval-interval", self.eval_interval.to_string()),
            ("dead-window", self.dead_window.to_string()),
            ("shuffle-buffer", self.shuffle_buffer.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `λ(t) = λ_max · min(1, t / (warmup · T))`
pub fn lambda_schedule(step: usize, total_steps: usize, lambda_max: f64, warmup_frac: f64) -> f64 {
    let ramp = warmup_frac * total_steps as f64;
    if ramp <= 0.0 {
        return lambda_max;
    }
    lambda_max * (step as f64 / ramp).min(1.0)
}

/// `lr` until `(1 − decay) · T`, then linear to zero at `T`.
pub fn lr_schedule(step: usize, total_steps: usize, lr: f64, decay_frac: f64) -> f64 {
    let t = step as f64;
    let total = total_steps as f64;
    let decay = decay_frac * total;
    if step >= total_steps {
        return 0.0;
    }
    if decay <= 0.0 || t < total - decay {
        return lr;
    }
    lr * (total - t) / decay
}

/// Metrics aggregated over one report interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalStats {
    /// Last step (exclusive) covered by the interval.
    pub step: usize,
    pub tokens: u64,
    pub mse: f64,
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub lambda: f64,
    pub lr: f64,
    pub dead_features: usize,
    pub fvu: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SaeTrainReport {
    pub total_steps: usize,
    pub intervals: Vec<IntervalStats>,
}

impl SaeTrainReport {
    pub fn last(&self) -> Option<&IntervalStats> {
        self.intervals.last()
    }

    /// One header line plus one line per interval.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,tokens,mse,mean_l0,mean_l1,lambda,lr,dead_features,fvu\n");
        for i in &self.intervals {
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.9e}\n",
                i.step,
                i.tokens,
                i.mse,
                i.mean_l0,
                i.mean_l1,
                i.lambda,
                i.lr,
                i.dead_features,
                i.fvu
            ));
        }
        s
    }
}

struct IntervalAcc {
    steps: usize,
    rows: u64,
    sq_error: f64,
    variance: f64,
    l0: f64,
    l1: f64,
    fired: Vec<bool>,
}

impl IntervalAcc {
    fn new(d_sae: usize) -> Self {
        Self {
            steps: 0,
            rows: 0,
            sq_error: 0.0,
            variance: 0.0,
            l0: 0.0,
            l1: 0.0,
            fired: vec![false; d_sae],
        }
    }
}

/// Trains an SAE with width `expansion_factor · d_model` on batches from `stream`.
pub fn train_sae(
    config: &SaeTrainConfig,
    stream: &BatchStream<'_>,
) -> Result<(SaeParams, SaeTrainReport)> {
    config.validate()?;
    ensure!(
        stream.batch_size() == config.batch_size,
        Config,
        "stream batch size {} differs from config batch size {}",
        stream.batch_size(),
        config.batch_size
    );
    let d_model = stream.d_model();
    let d_sae = config.expansion_factor * d_model;
    let mut params = SaeParams::init(d_model, d_sae, config.seed);
    params.round_to(config.precision);
    train_from(params, config, stream)
}

/// Continues training from given parameters.
pub fn train_from(
    mut params: SaeParams,
    config: &SaeTrainConfig,
    stream: &BatchStream<'_>,
) -> Result<(SaeParams, SaeTrainReport)> {
    config.validate()?;
    ensure!(
        stream.d_model() == params.d_model(),
        Shape,
        "stream d_model {} differs from SAE d_model {}",
        stream.d_model(),
        params.d_model()
    );
    let d_sae = params.d_sae();
    let total_steps = config.total_steps();
    let adam = AdamConfig::with_lr(config.lr);
    let mut opt = [
        AdamState::new(params.w_enc.data().len(), adam),
        AdamState::new(d_sae, adam),
        AdamState::new(params.w_dec.data().len(), adam),
        AdamState::new(params.d_model(), adam),
    ];

    let mut report = SaeTrainReport {
        total_steps,
        intervals: Vec::new(),
    };
    let mut acc = IntervalAcc::new(d_sae);
    // Intervals since each feature last fired.
    let mut quiet = vec![0usize; d_sae];
    let mut tokens = 0u64;

    for (step, batch) in stream.cycle().take(total_steps).enumerate() {
        let lambda = lambda_schedule(
            step,
            total_steps,
            config.lambda_max,
            config.lambda_warmup_frac,
        );
        let lr = lr_schedule(step, total_steps, config.lr, config.lr_decay_frac);
        let out = sae_loss(&params, &batch, lambda).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "training diverged at step {step} (lr = {lr:e}, lambda = {lambda:e}): {msg}; last interval: {:?}",
                report.last()
            )),
            other => other,
        })?;

        let grads = [
            &out.grads.w_enc,
            &out.grads.b_enc,
            &out.grads.w_dec,
            &out.grads.b_dec,
        ];
        for ((state, block), grad) in opt.iter_mut().zip(params.blocks_mut()).zip(grads) {
            state.set_lr(lr);
            state.step(block, grad)?;
        }
        params.normalize_decoder();
        params.round_to(config.precision);

        let rows = batch.rows() as u64;
        tokens += rows;
        acc.steps += 1;
        acc.rows += rows;
        acc.sq_error += out.sq_error;
        acc.variance += out.variance;
        acc.l0 += out.l0 * rows as f64;
        acc.l1 += out.l1 * rows as f64;
        for (f, &c) in acc.fired.iter_mut().zip(&out.fire_counts) {
            *f |= c > 0.0;
        }

        if acc.steps == config.eval_interval || step + 1 == total_steps {
            for (q, &f) in quiet.iter_mut().zip(&acc.fired) {
                *q = if f { 0 } else { *q + 1 };
            }
            let n = acc.rows as f64;
            report.intervals.push(IntervalStats {
                step: step + 1,
                tokens,
                mse: acc.sq_error / n,
                mean_l0: acc.l0 / n,
                mean_l1: acc.l1 / n,
                lambda,
                lr,
                dead_features: quiet.iter().filter(|&&q| q >= config.dead_window).count(),
                fvu: if acc.variance > 0.0 {
                    acc.sq_error / acc.variance
                } else {
                    f64::NAN
                },
            });
            acc = IntervalAcc::new(d_sae);
        }
    }
    Ok((params, report))
}

// ---------------------------------------------------------------------------
// Inference over shards
// ---------------------------------------------------------------------------

/// Sparse feature activations of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCode {
    pub sample_id: u64,
    pub token_index: u32,
    pub modality: Modality,
    /// `(feature, activation)` pairs with activation above the threshold, by feature index.
    pub features: Vec<(u32, f32)>,
}

impl TokenCode {
    pub fn l0(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes {
    pub d_sae: usize,
    pub tokens: Vec<TokenCode>,
}

impl SparseCodes {
    pub fn mean_l0(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(TokenCode::l0).sum::<usize>() as f64 / self.tokens.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "sample_id",
            "token_index",
            "modality",
            "feature",
            "activation",
        ])?;
        for t in &self.tokens {
            for &(f, a) in &t.features {
                out.write_record([
                    t.sample_id.to_string(),
                    t.token_index.to_string(),
                    t.modality.to_string(),
                    f.to_string(),
                    a.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads codes written by [`SparseCodes::write_csv`]. Tokens with no active
    /// feature are not stored in that format and do not come back.
    pub fn read_csv<R: Read>(r: R, d_sae: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut tokens: Vec<TokenCode> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ensure!(
                rec.len() == 5,
                Format,
                "codes line {}: expected 5 fields",
                i + 2
            );
            let parse_err = |what: &str| Error::Format(format!("codes line {}: bad {what}", i + 2));
            let sample_id: u64 = rec[0].parse().map_err(|_| parse_err("sample_id"))?;
            let token_index: u32 = rec[1].parse().map_err(|_| parse_err("token_index"))?;
            let modality: Modality = rec[2].parse().map_err(|_| parse_err("modality"))?;
            let feature: u32 = rec[3].parse().map_err(|_| parse_err("feature"))?;
            let activation: f32 = rec[4].parse().map_err(|_| parse_err("activation"))?;
            ensure!(
                (feature as usize) < d_sae,
                Data,
                "codes line {}: feature {feature} out of range for d_sae = {d_sae}",
                i + 2
            );
            match tokens.last_mut() {
                Some(t)
                    if t.sample_id == sample_id
                        && t.token_index == token_index
                        && t.modality == modality =>
                {
                    t.features.push((feature, activation))
                }
                _ => tokens.push(TokenCode {
                    sample_id,
                    token_index,
                    modality,
                    features: vec![(feature, activation)],
                }),
            }
        }
        Ok(Self { d_sae, tokens })
    }
}

/// Runs the encoder over every row, keeping activations above `threshold`.
pub fn encode_shard(params: &SaeParams, shard: &Shard, threshold: f64) -> Result<SparseCodes> {
    ensure!(
        shard.d_model() == params.d_model(),
        Shape,
        "shard d_model {} differs from SAE d_model {}",
        shard.d_model(),
        params.d_model()
    );
    let tokens = shard
        .rows()
        .par_iter()
        .map(|row| {
            let x = row.activation_f64();
            let mut f = vec![0.0; params.d_sae()];
            params.encode_into(&x, &mut f);
            let features = f
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > threshold)
                .map(|(i, &v)| (i as u32, v as f32))
                .collect();
            TokenCode {
                sample_id: row.sample_id,
                token_index: row.token_index,
                modality: row.modality,
                features,
            }
        })
        .collect();
    Ok(SparseCodes {
        d_sae: params.d_sae(),
        tokens,
    })
}

/// Reconstruction quality of an SAE over a whole shard.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeEval {
    pub rows: usize,
    pub mse: f64,
    pub fvu: f64,
    pub mean_l0: f64,
    pub mean_l1: f64,
    /// Features that never fire on this shard.
    pub dead_features: usize,
    /// `(modality, rows, fvu)`; FVU is NaN for a modality with constant or no rows.
    pub per_modality: Vec<(Modality, usize, f64)>,
}

pub fn evaluate_sae(params: &SaeParams, shard: &Shard) -> Result<SaeEval> {
    ensure!(!shard.is_empty(), Data, "cannot evaluate on an empty shard");
    ensure!(
        shard.d_model() == params.d_model(),
        Shape,
        "shard d_model {} differs from SAE d_model {}",
        shard.d_model(),
        params.d_model()
    );
    let x = crate::store::shard_matrix(shard);
    let stats = sae_loss(params, &x, 0.0)?;
    let mut per_modality = Vec::new();
    for m in [Modality::Text, Modality::Image] {
        let rows: Vec<Vec<f64>> = shard
            .rows()
            .iter()
            .filter(|r| r.modality == m)
            .map(|r| r.activation_f64())
            .collect();
        let fvu = if rows.is_empty() {
            f64::NAN
        } else {
            let s = sae_loss(params, &Matrix::from_rows(&rows)?, 0.0)?;
            if s.variance > 0.0 {
                s.sq_error / s.variance
            } else {
                f64::NAN
            }
        };
        per_modality.push((m, rows.len(), fvu));
    }
    Ok(SaeEval {
        rows: x.rows(),
        mse: stats.mse,
        fvu: if stats.variance > 0.0 {
            stats.sq_error / stats.variance
        } else {
            f64::NAN
        },
        mean_l0: stats.l0,
        mean_l1: stats.l1,
        dead_features: stats.fire_counts.iter().filter(|&&c| c == 0.0).count(),
        per_modality,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn write_sae<W: Write>(w: &mut W, params: &SaeParams) -> Result<()> {
    w.write_all(SAE_MAGIC)?;
    w.write_all(&(params.d_model() as u32).to_le_bytes())?;
    w.write_all(&(params.d_sae() as u32).to_le_bytes())?;
    write_f32_block(w, params.w_enc.data())?;
    write_f32_block(w, &params.b_enc)?;
    write_f32_block(w, params.w_dec.data())?;
    write_f32_block(w, &params.b_dec)?;
    Ok(())
}

pub fn read_sae<R: Read>(r: &mut R) -> Result<SaeParams> {
    read_magic(r, SAE_MAGIC)?;
    let d_model = read_u32(r, "SAE d_model")? as usize;
    let d_sae = read_u32(r, "SAE d_sae")? as usize;
    ensure!(
        d_model > 0 && d_sae > 0,
        Format,
        "SAE dimensions must be positive"
    );
    let w_enc = Matrix::new(d_sae, d_model, read_f32_block(r, d_sae * d_model, "W_enc")?)?;
    let b_enc = read_f32_block(r, d_sae, "b_enc")?;
    let w_dec = Matrix::new(d_model, d_sae, read_f32_block(r, d_model * d_sae, "W_dec")?)?;
    let b_dec = read_f32_block(r, d_model, "b_dec")?;
    codec::expect_eof(r, "SAE checkpoint")?;
    SaeParams::from_parts(w_enc, b_enc, w_dec, b_dec)
}

/// Writes the checkpoint and its `.meta` sidecar.
pub fn save_sae(
    path: &Path,
    params: &SaeParams,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sae(&mut w, params)?;
    w.flush()?;
    let mut meta = metadata.clone();
    meta.insert("d_model".into(), params.d_model().to_string());
    meta.insert("d_sae".into(), params.d_sae().to_string());
    codec::write_kv_file(&codec::sidecar_path(path), &meta)
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    read_sae(&mut BufReader::new(File::open(path)?))
}
