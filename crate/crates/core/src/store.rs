//! Activation shards: the ACTS1 on-disk format, per-sample pooling, shuffled
//! batch streaming, and synthetic generators that stand in for model dumps.
//!
//! # ACTS1 layout
//!
//! All integers little-endian.
//!
//! ```text
//! header:  magic "ACTS1" | u16 version (=1) | u32 d_model | u32 layer | u64 row_count | u32 flags
//! row × row_count:
//!          u64 sample_id | u32 token_index | u8 modality | i32 class_label | f32 × d_model
//! ```
//!
//! `flags` bit 0 is set when the rows carry class labels. Modality is 0 for
//! text and 1 for image; a class label of -1 means "none".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, read_i32, read_magic, read_u16, read_u32, read_u64, read_u8};
use crate::error::{ensure, Error, Result};
use crate::numerics::{norm, Matrix};

pub const SHARD_MAGIC: &[u8; 5] = b"ACTS1";
pub const SHARD_VERSION: u16 = 1;
pub const FLAG_CLASS_LABELS: u32 = 1;
pub const HEADER_BYTES: usize = 5 + 2 + 4 + 4 + 8 + 4;
pub const NO_CLASS: i32 = -1;

/// Default number of rows held by the shuffle buffer.
pub const DEFAULT_SHUFFLE_BUFFER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub d_model: u32,
    pub layer: u32,
    pub row_count: u64,
    pub flags: u32,
}

impl ShardHeader {
    pub fn has_class_labels(&self) -> bool {
        self.flags & FLAG_CLASS_LABELS != 0
    }

    pub fn row_bytes(&self) -> usize {
        8 + 4 + 1 + 4 + 4 * self.d_model as usize
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SHARD_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.d_model.to_le_bytes())?;
        w.write_all(&self.layer.to_le_bytes())?;
        w.write_all(&self.row_count.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, SHARD_MAGIC)?;
        let version = read_u16(r, "shard version")?;
        ensure!(
            version == SHARD_VERSION,
            Format,
            "unsupported shard version {version}"
        );
        let d_model = read_u32(r, "shard d_model")?;
        ensure!(d_model > 0, Format, "shard header declares d_model = 0");
        let layer = read_u32(r, "shard layer")?;
        let row_count = read_u64(r, "shard row_count")?;
        let flags = read_u32(r, "shard flags")?;
        Ok(Self {
            version,
            d_model,
            layer,
            row_count,
            flags,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Modality {
    Text = 0,
    Image = 1,
}

impl TryFrom<u8> for Modality {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Image),
            other => Err(Error::Format(format!("invalid modality byte {other}"))),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::Config(format!(
                "unknown modality '{other}' (expected text or image)"
            ))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
        })
    }
}

/// Which rows a pooling or editing operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityFilter {
    Only(Modality),
    All,
}

impl ModalityFilter {
    pub fn accepts(self, m: Modality) -> bool {
        match self {
            ModalityFilter::Only(want) => want == m,
            ModalityFilter::All => true,
        }
    }
}

impl From<Modality> for ModalityFilter {
    fn from(m: Modality) -> Self {
        ModalityFilter::Only(m)
    }
}

impl std::str::FromStr for ModalityFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ModalityFilter::All),
            other => other.parse().map(ModalityFilter::Only),
        }
    }
}

/// One residual-stream vector at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub sample_id: u64,
    pub token_index: u32,
    pub modality: Modality,
    pub class_label: i32,
    pub activation: Vec<f32>,
}

impl TokenRow {
    fn write_to<W: Write>(&self, w: &mut W, buf: &mut Vec<u8>) -> Result<()> {
        buf.clear();
        buf.extend_from_slice(&self.sample_id.to_le_bytes());
        buf.extend_from_slice(&self.token_index.to_le_bytes());
        buf.push(self.modality as u8);
        buf.extend_from_slice(&self.class_label.to_le_bytes());
        for a in &self.activation {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        w.write_all(buf)?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R, d_model: usize, index: u64) -> Result<Self> {
        let sample_id = read_u64(r, "row sample_id")?;
        let token_index = read_u32(r, "row token_index")?;
        let modality = Modality::try_from(read_u8(r, "row modality")?)?;
        let class_label = read_i32(r, "row class_label")?;
        ensure!(
            class_label >= NO_CLASS,
            Format,
            "row {index}: class label {class_label} < -1"
        );
        let mut bytes = vec![0u8; 4 * d_model];
        codec::read_exact(r, &mut bytes, "row activation")?;
        let mut activation = Vec::with_capacity(d_model);
        for c in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            ensure!(v.is_finite(), Data, "row {index}: non-finite activation");
            activation.push(v);
        }
        Ok(Self {
            sample_id,
            token_index,
            modality,
            class_label,
            activation,
        })
    }

    pub fn activation_f64(&self) -> Vec<f64> {
        self.activation.iter().map(|&a| f64::from(a)).collect()
    }
}

/// An in-memory activation shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    header: ShardHeader,
    rows: Vec<TokenRow>,
}

impl Shard {
    /// Builds a shard, deriving `row_count` and the class-label flag from `rows`.
    pub fn new(d_model: u32, layer: u32, rows: Vec<TokenRow>) -> Result<Self> {
        let flags = if rows.iter().any(|r| r.class_label >= 0) {
            FLAG_CLASS_LABELS
        } else {
            0
        };
        let header = ShardHeader {
            version: SHARD_VERSION,
            d_model,
            layer,
            row_count: rows.len() as u64,
            flags,
        };
        Self::from_parts(header, rows)
    }

    /// Builds a shard from an explicit header, checking that every row conforms.
    pub fn from_parts(header: ShardHeader, rows: Vec<TokenRow>) -> Result<Self> {
        ensure!(header.d_model > 0, Config, "d_model must be positive");
        ensure!(
            header.row_count == rows.len() as u64,
            Truncated,
            "header declares {} rows, payload has {}",
            header.row_count,
            rows.len()
        );
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.activation.len() == header.d_model as usize,
                Shape,
                "row {i} has {} activations, shard d_model is {}",
                r.activation.len(),
                header.d_model
            );
            ensure!(
                r.class_label >= NO_CLASS,
                Data,
                "row {i}: class label {} < -1",
                r.class_label
            );
            ensure!(
                r.activation.iter().all(|a| a.is_finite()),
                Data,
                "row {i}: non-finite activation"
            );
        }
        Ok(Self { header, rows })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model as usize
    }

    pub fn layer(&self) -> u32 {
        self.header.layer
    }

    pub fn rows(&self) -> &[TokenRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_rows(self) -> Vec<TokenRow> {
        self.rows
    }

    /// Returns a copy with every activation passed through `edit`, keeping
    /// the header and row metadata.
    pub(crate) fn map_rows(&self, mut edit: impl FnMut(&TokenRow) -> Option<Vec<f32>>) -> Shard {
        let rows = self
            .rows
            .iter()
            .map(|r| match edit(r) {
                Some(activation) => TokenRow {
                    activation,
                    ..r.clone()
                },
                None => r.clone(),
            })
            .collect();
        Shard {
            header: self.header,
            rows,
        }
    }

    /// Number of (text, image) rows.
    pub fn modality_counts(&self) -> (usize, usize) {
        let image = self
            .rows
            .iter()
            .filter(|r| r.modality == Modality::Image)
            .count();
        (self.rows.len() - image, image)
    }

    /// Mean L2 norm of the activations passing `filter`, or `None` if no row matches.
    pub fn mean_norm(&self, filter: ModalityFilter) -> Option<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for r in self.rows.iter().filter(|r| filter.accepts(r.modality)) {
            total += norm(&r.activation_f64());
            n += 1;
        }
        (n > 0).then(|| total / n as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.header.write_to(w)?;
        let mut buf = Vec::with_capacity(self.header.row_bytes());
        for r in &self.rows {
            r.write_to(w, &mut buf)?;
        }
        Ok(())
    }

    /// Reads a complete shard; trailing bytes after the declared rows are an error.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = ShardHeader::read_from(r)?;
        let d = header.d_model as usize;
        let mut rows = Vec::with_capacity(header.row_count.min(1 << 20) as usize);
        for i in 0..header.row_count {
            rows.push(TokenRow::read_from(r, d, i)?);
        }
        codec::expect_eof(r, "shard")?;
        Ok(Self { header, rows })
    }
}

pub fn write_shard(path: &Path, shard: &Shard) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    shard.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let mut r = BufReader::new(File::open(path)?);
    Shard::read_from(&mut r)
}

/// Streams rows from an ACTS1 file without loading it whole.
pub struct ShardReader<R> {
    inner: R,
    header: ShardHeader,
    next: u64,
}

impl ShardReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = ShardHeader::read_from(&mut inner)?;
        Ok(Self {
            inner,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<TokenRow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.row_count {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let row = TokenRow::read_from(&mut self.inner, self.header.d_model as usize, i);
        if row.is_err() {
            self.next = self.header.row_count;
        }
        Some(row)
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Mean activation of one sample's matching tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub sample_id: u64,
    pub class_label: i32,
    pub vector: Vec<f64>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleEmbeddings {
    /// Sorted by `sample_id`.
    pub embeddings: Vec<ClassEmbedding>,
    /// Samples present in the shard with no rows passing the filter.
    pub skipped_samples: usize,
}

/// Mean-pools each sample's rows that pass `filter`.
pub fn sample_embeddings(shard: &Shard, filter: ModalityFilter) -> Result<SampleEmbeddings> {
    struct Acc {
        label: i32,
        sum: Vec<f64>,
        count: usize,
    }
    let d = shard.d_model();
    let mut seen: BTreeMap<u64, Option<Acc>> = BTreeMap::new();
    for row in shard.rows() {
        let slot = seen.entry(row.sample_id).or_insert(None);
        if !filter.accepts(row.modality) {
            continue;
        }
        let acc = slot.get_or_insert_with(|| Acc {
            label: row.class_label,
            sum: vec![0.0; d],
            count: 0,
        });
        ensure!(
            acc.label == row.class_label,
            Data,
            "sample {} mixes class labels {} and {}",
            row.sample_id,
            acc.label,
            row.class_label
        );
        for (s, &a) in acc.sum.iter_mut().zip(&row.activation) {
            *s += f64::from(a);
        }
        acc.count += 1;
    }
    let mut out = SampleEmbeddings::default();
    for (sample_id, acc) in seen {
        match acc {
            Some(acc) => {
                let n = acc.count as f64;
                out.embeddings.push(ClassEmbedding {
                    sample_id,
                    class_label: acc.label,
                    vector: acc.sum.into_iter().map(|s| s / n).collect(),
                    token_count: acc.count,
                });
            }
            None => out.skipped_samples += 1,
        }
    }
    if out.skipped_samples > 0 {
        log::warn!(
            "{} samples had no rows matching {:?}",
            out.skipped_samples,
            filter
        );
    }
    Ok(out)
}

/// Mean embedding and sample count per class label (labels < 0 ignored).
pub fn class_means(embeddings: &[ClassEmbedding]) -> BTreeMap<i32, (Vec<f64>, usize)> {
    let mut acc: BTreeMap<i32, (Vec<f64>, usize)> = BTreeMap::new();
    for e in embeddings.iter().filter(|e| e.class_label >= 0) {
        let (sum, n) = acc
            .entry(e.class_label)
            .or_insert_with(|| (vec![0.0; e.vector.len()], 0));
        for (s, v) in sum.iter_mut().zip(&e.vector) {
            *s += v;
        }
        *n += 1;
    }
    for (sum, n) in acc.values_mut() {
        let k = *n as f64;
        for s in sum.iter_mut() {
            *s /= k;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Batch streaming
// ---------------------------------------------------------------------------

/// Bounded-buffer shuffle over an arbitrary iterator.
///
/// Holds at most `capacity` items; each incoming item displaces a uniformly
/// chosen buffered one, and the remainder drains in random order.
pub struct ShuffleBuffer<I: Iterator> {
    source: I,
    buffer: Vec<I::Item>,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl<I: Iterator> ShuffleBuffer<I> {
    pub fn new(source: I, capacity: usize, rng: ChaCha8Rng) -> Self {
        let capacity = capacity.max(1);
        Self {
            source,
            buffer: Vec::new(),
            capacity,
            rng,
        }
    }
}

impl<I: Iterator> Iterator for ShuffleBuffer<I> {
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        while self.buffer.len() < self.capacity {
            match self.source.next() {
                Some(x) => self.buffer.push(x),
                None => break,
            }
        }
        if self.buffer.is_empty() {
            return None;
        }
        let j = self.rng.random_range(0..self.buffer.len());
        match self.source.next() {
            Some(x) => Some(std::mem::replace(&mut self.buffer[j], x)),
            None => Some(self.buffer.swap_remove(j)),
        }
    }
}

/// Shuffled minibatches over one or more shards.
///
/// Each epoch visits every row once; the order is a function of `(seed, epoch)`.
pub struct BatchStream<'a> {
    rows: Vec<&'a TokenRow>,
    d_model: usize,
    batch_size: usize,
    seed: u64,
    buffer_size: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(shards: &'a [Shard], batch_size: usize, seed: u64) -> Result<Self> {
        ensure!(
            !shards.is_empty(),
            Config,
            "batch stream needs at least one shard"
        );
        let d_model = shards[0].d_model();
        for s in shards {
            ensure!(
                s.d_model() == d_model,
                Shape,
                "shards disagree on d_model ({} vs {d_model})",
                s.d_model()
            );
        }
        let rows: Vec<&TokenRow> = shards.iter().flat_map(|s| s.rows()).collect();
        ensure!(batch_size > 0, Config, "batch size must be positive");
        ensure!(
            batch_size <= rows.len(),
            Config,
            "batch size {batch_size} exceeds the {} available rows",
            rows.len()
        );
        Ok(Self {
            rows,
            d_model,
            batch_size,
            seed,
            buffer_size: DEFAULT_SHUFFLE_BUFFER,
        })
    }

    pub fn with_buffer_size(mut self, rows: usize) -> Self {
        self.buffer_size = rows.max(1);
        self
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn total_rows(&self) -> usize {
        self.rows.len()
    }

    /// Row indices in the order epoch `epoch` visits them.
    pub fn epoch_order(&self, epoch: u64) -> impl Iterator<Item = usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        ShuffleBuffer::new(0..self.rows.len(), self.buffer_size, rng)
    }

    /// Batches for one epoch; the last one may be short.
    pub fn batches(&self, epoch: u64) -> impl Iterator<Item = Matrix> + '_ {
        let mut order = self.epoch_order(epoch).peekable();
        std::iter::from_fn(move || {
            order.peek()?;
            let idx: Vec<usize> = order.by_ref().take(self.batch_size).collect();
            Some(self.gather(&idx))
        })
    }

    /// Endless full-size batches, rolling over epoch boundaries.
    pub fn cycle(&self) -> impl Iterator<Item = Matrix> + '_ {
        let mut epoch = 0u64;
        let mut order = self.epoch_order(epoch);
        std::iter::from_fn(move || {
            let mut idx = Vec::with_capacity(self.batch_size);
            while idx.len() < self.batch_size {
                match order.next() {
                    Some(i) => idx.push(i),
                    None => {
                        epoch += 1;
                        order = self.epoch_order(epoch);
                    }
                }
            }
            Some(self.gather(&idx))
        })
    }

    pub fn row(&self, index: usize) -> &TokenRow {
        self.rows[index]
    }

    fn gather(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d_model);
        for &i in idx {
            data.extend(self.rows[i].activation.iter().map(|&a| f64::from(a)));
        }
        Matrix::from_fn(idx.len(), self.d_model, |r, c| data[r * self.d_model + c])
    }
}

/// Stacks every row of a shard into an `n × d_model` matrix.
pub fn shard_matrix(shard: &Shard) -> Matrix {
    let d = shard.d_model();
    let rows = shard.rows();
    Matrix::from_fn(rows.len(), d, |r, c| f64::from(rows[r].activation[c]))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Rows built as sparse positive combinations of a planted unit dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryDataConfig {
    pub d_model: usize,
    pub n_features: usize,
    /// Active features per row.
    pub k: usize,
    pub n_rows: usize,
    pub noise_sigma: f64,
    /// Coefficients are uniform in `[min, max]`; equal bounds give a constant.
    pub coef_min: f64,
    pub coef_max: f64,
    pub layer: u32,
    pub seed: u64,
}

impl Default for DictionaryDataConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_features: 32,
            k: 3,
            n_rows: 200_000,
            noise_sigma: 0.01,
            coef_min: 0.5,
            coef_max: 1.5,
            layer: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDictionary {
    pub shard: Shard,
    /// `d_model × n_features`, unit-norm columns.
    pub dictionary: Matrix,
}

pub fn gen_synthetic_dictionary_data(cfg: &DictionaryDataConfig) -> Result<SyntheticDictionary> {
    ensure!(cfg.d_model > 0, Config, "d_model must be positive");
    ensure!(
        cfg.n_features >= cfg.k && cfg.k >= 1,
        Config,
        "need n_features >= k >= 1 (got n_features = {}, k = {})",
        cfg.n_features,
        cfg.k
    );
    ensure!(
        cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite(),
        Config,
        "noise sigma must be finite and non-negative"
    );
    ensure!(
        cfg.coef_min > 0.0 && cfg.coef_min <= cfg.coef_max && cfg.coef_max.is_finite(),
        Config,
        "coefficient range must satisfy 0 < min <= max"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dictionary = Matrix::from_fn(cfg.d_model, cfg.n_features, |_, _| {
        std_normal.sample(&mut rng)
    });
    dictionary.normalize_columns();
    let columns: Vec<Vec<f64>> = (0..cfg.n_features).map(|j| dictionary.column(j)).collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::with_capacity(cfg.n_rows);
    let mut x = vec![0.0; cfg.d_model];
    for i in 0..cfg.n_rows {
        x.iter_mut().for_each(|v| *v = 0.0);
        for j in index::sample(&mut rng, cfg.n_features, cfg.k) {
            let c = if cfg.coef_min == cfg.coef_max {
                cfg.coef_min
            } else {
                rng.random_range(cfg.coef_min..cfg.coef_max)
            };
            crate::numerics::axpy(c, &columns[j], &mut x);
        }
        if cfg.noise_sigma > 0.0 {
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let modality = if rng.random_bool(0.5) {
            Modality::Image
        } else {
            Modality::Text
        };
        rows.push(TokenRow {
            sample_id: i as u64,
            token_index: 0,
            modality,
            class_label: NO_CLASS,
            activation: x.iter().map(|&v| v as f32).collect(),
        });
    }
    let shard = Shard::new(cfg.d_model as u32, cfg.layer, rows)?;
    Ok(SyntheticDictionary { shard, dictionary })
}

/// Labelled samples scattered around per-class mean directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDataConfig {
    pub class_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of image tokens around their class mean.
    pub sigma: f64,
    pub samples_per_class: usize,
    pub image_tokens_per_sample: usize,
    /// Class-independent text tokens, drawn from N(0, text_sigma²).
    pub text_tokens_per_sample: usize,
    pub text_sigma: f64,
    pub layer: u32,
    pub seed: u64,
}

impl ClassDataConfig {
    pub fn new(
        class_means: Vec<Vec<f64>>,
        sigma: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        Self {
            class_means,
            sigma,
            samples_per_class,
            image_tokens_per_sample: 4,
            text_tokens_per_sample: 0,
            text_sigma: 1.0,
            layer: 12,
            seed,
        }
    }
}

/// `scale · e_i` for the first `n_classes` basis directions.
pub fn basis_class_means(d_model: usize, n_classes: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut v = vec![0.0; d_model];
            v[c % d_model] = scale;
            v
        })
        .collect()
}

/// Gaussian directions rescaled to length `norm`.
pub fn random_class_means(
    d_model: usize,
    n_classes: usize,
    norm_len: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d_model).map(|_| n.sample(&mut rng)).collect();
            let s = norm_len / norm(&v);
            v.into_iter().map(|x| x * s).collect()
        })
        .collect()
}

pub fn gen_synthetic_class_data(cfg: &ClassDataConfig) -> Result<Shard> {
    ensure!(
        !cfg.class_means.is_empty(),
        Config,
        "need at least one class mean"
    );
    let d = cfg.class_means[0].len();
    ensure!(d > 0, Config, "class means must be non-empty");
    ensure!(
        cfg.class_means.iter().all(|m| m.len() == d),
        Shape,
        "class means have different lengths"
    );
    ensure!(
        cfg.sigma >= 0.0 && cfg.text_sigma >= 0.0,
        Config,
        "noise scales must be non-negative"
    );
    ensure!(
        cfg.image_tokens_per_sample + cfg.text_tokens_per_sample > 0,
        Config,
        "samples need at least one token"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::new();
    for (c, mean) in cfg.class_means.iter().enumerate() {
        for s in 0..cfg.samples_per_class {
            let sample_id = (c * cfg.samples_per_class + s) as u64;
            let mut token_index = 0u32;
            for _ in 0..cfg.text_tokens_per_sample {
                let activation = (0..d)
                    .map(|_| (cfg.text_sigma * unit.sample(&mut rng)) as f32)
                    .collect();
                rows.push(TokenRow {
                    sample_id,
                    token_index,
                    modality: Modality::Text,
                    class_label: c as i32,
                    activation,
                });
                token_index += 1;
            }
            for _ in 0..cfg.image_tokens_per_sample {
                let activation = mean
                    .iter()
                    .map(|&m| (m + cfg.sigma * unit.sample(&mut rng)) as f32)
                    .collect();
                rows.push(TokenRow {
                    sample_id,
                    token_index,
                    modality: Modality::Image,
                    class_label: c as i32,
                    activation,
                });
                token_index += 1;
            }
        }
    }
    Shard::new(d as u32, cfg.layer, rows)
}
