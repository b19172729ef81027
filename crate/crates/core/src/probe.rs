//! Multiclass linear probes over pooled residual-stream embeddings.
//!
//! A probe is a single affine layer `logits = W x + b` trained with softmax
//! cross-entropy and Adam. Class ids are arbitrary non-negative labels; the
//! model keeps them in ascending order and maps them to logit rows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, read_f32_block, read_i32, read_magic, read_u32, write_f32_block};
use crate::error::{ensure, Error, Result};
use crate::numerics::{ordered_chunk_sum, AdamConfig, AdamState, Matrix};
use crate::store::ClassEmbedding;

pub const PROBE_MAGIC: &[u8; 5] = b"PRB01";

const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `C × d_model`.
    pub w: Matrix,
    pub b: Vec<f64>,
    /// Class id for each logit row, strictly ascending.
    pub classes: Vec<i32>,
}

impl ProbeModel {
    pub fn zeros(classes: Vec<i32>, d_model: usize) -> Result<Self> {
        let m = Self {
            w: Matrix::zeros(classes.len(), d_model),
            b: vec![0.0; classes.len()],
            classes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        ensure!(
            c >= 2,
            Config,
            "a probe needs at least two classes, got {c}"
        );
        ensure!(
            self.w.rows() == c && self.b.len() == c,
            Shape,
            "probe has {c} classes but W is {}x{} and b has {}",
            self.w.rows(),
            self.w.cols(),
            self.b.len()
        );
        ensure!(
            self.classes.windows(2).all(|p| p[0] < p[1]),
            Format,
            "probe class ids must be strictly ascending"
        );
        crate::numerics::ensure_finite(self.w.data(), "probe weights")?;
        crate::numerics::ensure_finite(&self.b, "probe bias")?;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn d_model(&self) -> usize {
        self.w.cols()
    }

    pub fn class_index(&self, class: i32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w.matvec(x)?.into_inner();
        for (zi, bi) in z.iter_mut().zip(&self.b) {
            *zi += bi;
        }
        Ok(z)
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict_index(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<i32> {
        Ok(self.classes[self.predict_index(x)?])
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Coefficient of `½‖W‖²` added to the loss.
    pub weight_decay: f64,
    pub seed: u64,
    /// Share of each class held out for validation.
    pub val_fraction: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "learning rate must be positive"
        );
        ensure!(self.epochs >= 1, Config, "need at least one epoch");
        ensure!(
            self.batch_size >= 1,
            Config,
            "batch size must be at least 1"
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Config,
            "weight decay must be >= 0"
        );
        ensure!(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            Config,
            "validation fraction must lie in (0, 1), got {}",
            self.val_fraction
        );
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("weight-decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("val-fraction", self.val_fraction.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLoss {
    pub loss: f64,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

/// Mean softmax cross-entropy over rows of `xs` (one example per row) plus
/// `½ · weight_decay · ‖W‖²`, with analytic gradients.
pub fn probe_loss(
    model: &ProbeModel,
    xs: &Matrix,
    targets: &[usize],
    weight_decay: f64,
) -> Result<ProbeLoss> {
    let (c, d) = (model.n_classes(), model.d_model());
    ensure!(
        xs.cols() == d,
        Shape,
        "inputs have {} columns, probe expects {d}",
        xs.cols()
    );
    ensure!(
        xs.rows() == targets.len(),
        Shape,
        "{} inputs but {} targets",
        xs.rows(),
        targets.len()
    );
    ensure!(!targets.is_empty(), Shape, "empty batch");
    ensure!(
        targets.iter().all(|&t| t < c),
        Data,
        "target index out of range"
    );
    let n = targets.len() as f64;
    let rows: Vec<usize> = (0..targets.len()).collect();
    // Buffer: [loss, grad_w (c*d), grad_b (c)].
    let len = 1 + c * d + c;
    let total = ordered_chunk_sum(&rows, ROW_CHUNK, len, |chunk| {
        let mut acc = vec![0.0; len];
        let mut p = vec![0.0; c];
        for &r in chunk {
            let x = xs.row(r);
            model.w.matvec_into(x, &mut p);
            for (pi, bi) in p.iter_mut().zip(&model.b) {
                *pi += bi;
            }
            let t = targets[r];
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for pi in p.iter_mut() {
                *pi = (*pi - max).exp();
                z += *pi;
            }
            acc[0] += z.ln() - (p[t].ln());
            for (k, pk) in p.iter().enumerate() {
                let g = (pk / z - if k == t { 1.0 } else { 0.0 }) / n;
                let row = &mut acc[1 + k * d..1 + (k + 1) * d];
                for (a, xi) in row.iter_mut().zip(x) {
                    *a += g * xi;
                }
                acc[1 + c * d + k] += g;
            }
        }
        acc
    });
    let mut loss = total[0] / n;
    let mut gw = total[1..1 + c * d].to_vec();
    if weight_decay > 0.0 {
        let mut sq = 0.0;
        for (g, w) in gw.iter_mut().zip(model.w.data()) {
            *g += weight_decay * w;
            sq += w * w;
        }
        loss += 0.5 * weight_decay * sq;
    }
    ensure!(loss.is_finite(), Numeric, "probe loss became {loss}");
    Ok(ProbeLoss {
        loss,
        grad_w: Matrix::new(c, d, gw)?,
        grad_b: total[1 + c * d..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainReport {
    pub train_count: usize,
    pub val_count: usize,
    pub epochs: Vec<EpochStats>,
    /// Evaluation of the final model on the held-out split.
    pub validation: ProbeEval,
}

impl ProbeTrainReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "train_accuracy", "val_accuracy"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.train_loss),
                format!("{:e}", e.train_accuracy),
                format!("{:e}", e.val_accuracy),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Splits each class's examples into train and validation sets.
///
/// Every class keeps at least one training example; a class with two or more
/// examples contributes at least one validation example.
fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    frac: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(rng);
        let n = idx.len();
        let n_val = if n >= 2 {
            ((n as f64 * frac).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn gather(embeddings: &[ClassEmbedding], idx: &[usize], d: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&embeddings[i].vector);
    }
    Matrix::new(idx.len(), d, data)
}

/// Trains a probe on labelled embeddings; returns the model and a report
/// including held-out evaluation.
pub fn train_probe(
    config: &ProbeTrainConfig,
    embeddings: &[ClassEmbedding],
) -> Result<(ProbeModel, ProbeTrainReport)> {
    config.validate()?;
    ensure!(!embeddings.is_empty(), Config, "no training examples");
    let d = embeddings[0].vector.len();
    ensure!(d > 0, Shape, "embeddings are empty vectors");
    for e in embeddings {
        ensure!(
            e.vector.len() == d,
            Shape,
            "embedding lengths differ ({} vs {d})",
            e.vector.len()
        );
        ensure!(
            e.class_label >= 0,
            Data,
            "sample {} has no class label",
            e.sample_id
        );
        crate::numerics::ensure_finite(&e.vector, "embedding")?;
    }
    let classes: Vec<i32> = {
        let mut c: Vec<i32> = embeddings.iter().map(|e| e.class_label).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    ensure!(
        classes.len() >= 2,
        Config,
        "need at least two classes, found {}",
        classes.len()
    );
    let mut model = ProbeModel::zeros(classes, d)?;
    let labels: Vec<usize> = embeddings
        .iter()
        .map(|e| {
            model
                .class_index(e.class_label)
                .expect("class collected above")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, val) = stratified_split(&labels, model.n_classes(), config.val_fraction, &mut rng);
    let val_set: Vec<ClassEmbedding> = val.iter().map(|&i| embeddings[i].clone()).collect();

    let cfg = AdamConfig::with_lr(config.lr);
    let mut opt_w = AdamState::new(model.w.data().len(), cfg);
    let mut opt_b = AdamState::new(model.b.len(), cfg);
    let mut order = train.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs = gather(embeddings, batch, d)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = probe_loss(&model, &xs, &targets, config.weight_decay)?;
            loss_sum += out.loss * batch.len() as f64;
            opt_w.step(model.w.data_mut(), out.grad_w.data())?;
            opt_b.step(&mut model.b, &out.grad_b)?;
        }
        let train_correct = train
            .iter()
            .filter(|&&i| {
                model
                    .predict_index(&embeddings[i].vector)
                    .map(|p| p == labels[i])
                    .unwrap_or(false)
            })
            .count();
        let val_accuracy = if val_set.is_empty() {
            f64::NAN
        } else {
            eval_probe(&model, &val_set)?.accuracy
        };
        epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: train_correct as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    let validation = if val_set.is_empty() {
        ProbeEval::empty(&model)
    } else {
        eval_probe(&model, &val_set)?
    };
    Ok((
        model,
        ProbeTrainReport {
            train_count: train.len(),
            val_count: val.len(),
            epochs,
            validation,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEval {
    pub classes: Vec<i32>,
    pub accuracy: f64,
    /// Accuracy for each class, `NaN` when a class has no examples.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]` counts, indexed like `classes`.
    pub confusion: Vec<Vec<usize>>,
}

impl ProbeEval {
    fn empty(model: &ProbeModel) -> Self {
        let c = model.n_classes();
        Self {
            classes: model.classes.clone(),
            accuracy: f64::NAN,
            per_class: vec![f64::NAN; c],
            confusion: vec![vec![0; c]; c],
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn write_confusion_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["true_class".to_string()];
        header.extend(self.classes.iter().map(|c| format!("pred_{c}")));
        out.write_record(&header)?;
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|n| n.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Top-1 accuracy, per-class accuracy and confusion counts.
pub fn eval_probe(model: &ProbeModel, embeddings: &[ClassEmbedding]) -> Result<ProbeEval> {
    ensure!(!embeddings.is_empty(), Data, "no examples to evaluate");
    let mut ev = ProbeEval::empty(model);
    for e in embeddings {
        let t = model.class_index(e.class_label).ok_or_else(|| {
            Error::Data(format!(
                "sample {} has class {} unknown to the probe",
                e.sample_id, e.class_label
            ))
        })?;
        ensure!(
            e.vector.len() == model.d_model(),
            Shape,
            "embedding has {} entries, probe expects {}",
            e.vector.len(),
            model.d_model()
        );
        let p = model.predict_index(&e.vector)?;
        ev.confusion[t][p] += 1;
    }
    let mut correct = 0;
    for (k, row) in ev.confusion.iter().enumerate() {
        let n: usize = row.iter().sum();
        correct += row[k];
        ev.per_class[k] = if n == 0 {
            f64::NAN
        } else {
            row[k] as f64 / n as f64
        };
    }
    ev.accuracy = correct as f64 / embeddings.len() as f64;
    Ok(ev)
}

pub fn write_probe<W: Write>(w: &mut W, model: &ProbeModel) -> Result<()> {
    model.validate()?;
    w.write_all(PROBE_MAGIC)?;
    w.write_all(&(model.n_classes() as u32).to_le_bytes())?;
    w.write_all(&(model.d_model() as u32).to_le_bytes())?;
    for c in &model.classes {
        w.write_all(&c.to_le_bytes())?;
    }
    write_f32_block(w, model.w.data())?;
    write_f32_block(w, &model.b)?;
    Ok(())
}

pub fn read_probe<R: Read>(r: &mut R) -> Result<ProbeModel> {
    read_magic(r, PROBE_MAGIC)?;
    let c = read_u32(r, "class count")? as usize;
    let d = read_u32(r, "d_model")? as usize;
    ensure!(c >= 2, Format, "probe file declares {c} classes");
    ensure!(d >= 1, Format, "probe file declares d_model 0");
    let mut classes = Vec::with_capacity(c);
    for _ in 0..c {
        classes.push(read_i32(r, "class id")?);
    }
    let w = Matrix::new(c, d, read_f32_block(r, c * d, "probe weights")?)?;
    let b = read_f32_block(r, c, "probe bias")?;
    codec::expect_eof(r, "probe file")?;
    let model = ProbeModel { w, b, classes };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn save_probe(path: &Path, model: &ProbeModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_probe(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_probe(path: &Path) -> Result<ProbeModel> {
    read_probe(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
