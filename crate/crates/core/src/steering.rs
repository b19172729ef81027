//! Steering vectors: construction from class activations or unembedding rows,
//! application to activation shards, and zero-ablation edits.
//!
//! # STV01 layout
//!
//! ```text
//! magic "STV01" | u32 d_model | u32 layer | u8 method | i32 pos_class | i32 neg_class | f32 × d_model
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{
    self, read_f32_block, read_i32, read_magic, read_u32, read_u8, write_f32_block,
};
use crate::error::{ensure, Error, Result};
use crate::numerics::norm;
use crate::store::{class_means, sample_embeddings, Modality, ModalityFilter, Shard, NO_CLASS};

pub const STEERING_MAGIC: &[u8; 5] = b"STV01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SteeringMethod {
    /// Difference of class-mean activations.
    Caa = 0,
    /// Normalized difference of two unembedding rows.
    LogitLens = 1,
    /// Difference of residual embeddings of two text prompts.
    TextEmbed = 2,
    Random = 3,
}

impl TryFrom<u8> for SteeringMethod {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Caa),
            1 => Ok(Self::LogitLens),
            2 => Ok(Self::TextEmbed),
            3 => Ok(Self::Random),
            other => Err(Error::Format(format!(
                "unknown steering method code {other}"
            ))),
        }
    }
}

impl std::str::FromStr for SteeringMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caa" => Ok(Self::Caa),
            "logit-lens" => Ok(Self::LogitLens),
            "text-embed" => Ok(Self::TextEmbed),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown steering method '{other}' (expected caa, logit-lens, text-embed or random)"
            ))),
        }
    }
}

impl std::fmt::Display for SteeringMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Caa => "caa",
            Self::LogitLens => "logit-lens",
            Self::TextEmbed => "text-embed",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub vector: Vec<f64>,
    pub layer: u32,
    pub pos_class: i32,
    pub neg_class: i32,
    pub method: SteeringMethod,
}

impl SteeringVector {
    pub fn d_model(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.vector.is_empty(), Shape, "steering vector is empty");
        crate::numerics::ensure_finite(&self.vector, "steering vector")?;
        if self.method == SteeringMethod::LogitLens {
            let n = self.norm();
            ensure!(
                (n - 1.0).abs() < 1e-5,
                Data,
                "logit-lens vector has norm {n}, expected 1"
            );
        }
        Ok(())
    }
}

/// How and where a vector is added.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplySpec {
    pub alpha: f64,
    pub target: ModalityFilter,
    /// Layer the edit is meant for; compared against the shard's layer.
    pub layer: Option<u32>,
}

impl ApplySpec {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            target: ModalityFilter::Only(Modality::Image),
            layer: None,
        }
    }
}

fn difference(pos: &[f64], neg: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        pos.len() == neg.len(),
        Shape,
        "vector lengths differ ({} vs {})",
        pos.len(),
        neg.len()
    );
    ensure!(!pos.is_empty(), Shape, "empty vectors");
    crate::numerics::ensure_finite(pos, "positive vector")?;
    crate::numerics::ensure_finite(neg, "negative vector")?;
    Ok(pos.iter().zip(neg).map(|(p, n)| p - n).collect())
}

/// Mean image-token embedding of `pos_class` minus that of `neg_class`.
///
/// Tokens are averaged within each sample first, then samples within each
/// class, so every sample carries equal weight.
pub fn caa_vector(shard: &Shard, pos_class: i32, neg_class: i32) -> Result<SteeringVector> {
    let pooled = sample_embeddings(shard, ModalityFilter::Only(Modality::Image))?;
    let means = class_means(&pooled.embeddings);
    let get = |c: i32| {
        means
            .get(&c)
            .map(|(m, _)| m.as_slice())
            .ok_or_else(|| Error::Data(format!("class {c} has no image tokens in the shard")))
    };
    let vector = difference(get(pos_class)?, get(neg_class)?)?;
    Ok(SteeringVector {
        vector,
        layer: shard.layer(),
        pos_class,
        neg_class,
        method: SteeringMethod::Caa,
    })
}

/// `(u_pos − u_neg) / ‖u_pos − u_neg‖`.
pub fn logit_lens_vector(u_pos: &[f64], u_neg: &[f64], layer: u32) -> Result<SteeringVector> {
    let mut vector = difference(u_pos, u_neg)?;
    let n = norm(&vector);
    ensure!(n > 0.0, Degenerate, "unembedding rows are identical");
    for v in vector.iter_mut() {
        *v /= n;
    }
    Ok(SteeringVector {
        vector,
        layer,
        pos_class: NO_CLASS,
        neg_class: NO_CLASS,
        method: SteeringMethod::LogitLens,
    })
}

/// `pos − neg` for two text embeddings; the norm is kept.
pub fn text_embed_vector(pos: &[f64], neg: &[f64], layer: u32) -> Result<SteeringVector> {
    Ok(SteeringVector {
        vector: difference(pos, neg)?,
        layer,
        pos_class: NO_CLASS,
        neg_class: NO_CLASS,
        method: SteeringMethod::TextEmbed,
    })
}

/// Mean over all rows passing `filter`, with each sample pooled first.
pub fn pooled_mean(shard: &Shard, filter: ModalityFilter) -> Result<Vec<f64>> {
    let pooled = sample_embeddings(shard, filter)?;
    ensure!(
        !pooled.embeddings.is_empty(),
        Data,
        "no rows match {filter:?}"
    );
    let mut mean = vec![0.0; shard.d_model()];
    for e in &pooled.embeddings {
        for (m, v) in mean.iter_mut().zip(&e.vector) {
            *m += v;
        }
    }
    let n = pooled.embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Gaussian direction with length `norm_len`.
pub fn random_vector_baseline(d_model: usize, norm_len: f64, seed: u64) -> Result<SteeringVector> {
    ensure!(d_model > 0, Config, "d_model must be positive");
    ensure!(
        norm_len >= 0.0 && norm_len.is_finite(),
        Config,
        "norm must be finite and >= 0"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut vector: Vec<f64> = (0..d_model).map(|_| unit.sample(&mut rng)).collect();
    let s = norm_len / norm(&vector);
    vector.iter_mut().for_each(|v| *v *= s);
    Ok(SteeringVector {
        vector,
        layer: 0,
        pos_class: NO_CLASS,
        neg_class: NO_CLASS,
        method: SteeringMethod::Random,
    })
}

/// An edited shard and whether the vector was built for a different layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Steered {
    pub shard: Shard,
    pub layer_mismatch: bool,
}

/// Adds `α · v` to every row passing the modality filter in `spec`.
pub fn apply_steering(shard: &Shard, sv: &SteeringVector, spec: &ApplySpec) -> Result<Steered> {
    ensure!(spec.alpha.is_finite(), Config, "alpha must be finite");
    ensure!(
        sv.d_model() == shard.d_model(),
        Shape,
        "steering vector has d_model {}, shard has {}",
        sv.d_model(),
        shard.d_model()
    );
    let target_layer = spec.layer.unwrap_or(sv.layer);
    let layer_mismatch = target_layer != shard.layer();
    if layer_mismatch {
        log::warn!(
            "steering vector targets layer {target_layer} but the shard was captured at layer {}",
            shard.layer()
        );
    }
    if spec.alpha == 0.0 {
        return Ok(Steered {
            shard: shard.clone(),
            layer_mismatch,
        });
    }
    let edited = shard.map_rows(|row| {
        spec.target.accepts(row.modality).then(|| {
            row.activation
                .iter()
                .zip(&sv.vector)
                .map(|(&a, &v)| (f64::from(a) + spec.alpha * v) as f32)
                .collect()
        })
    });
    crate::numerics::ensure_finite(
        &edited
            .rows()
            .iter()
            .flat_map(|r| r.activation.iter().map(|&a| f64::from(a)))
            .collect::<Vec<_>>(),
        "steered activations",
    )?;
    Ok(Steered {
        shard: edited,
        layer_mismatch,
    })
}

/// Sets every row passing `target` to the zero vector.
pub fn zero_ablate(shard: &Shard, target: ModalityFilter) -> Shard {
    let d = shard.d_model();
    shard.map_rows(|row| target.accepts(row.modality).then(|| vec![0.0; d]))
}

/// Steering strengths `g · mean_norm / ‖v‖` for `g` on a geometric grid from
/// `lo` to `hi`, so that `α‖v‖` spans the given fractions of the typical
/// activation norm.
pub fn alpha_grid(
    vector_norm: f64,
    mean_activation_norm: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>> {
    ensure!(
        vector_norm > 0.0,
        Degenerate,
        "steering vector has zero norm"
    );
    ensure!(
        mean_activation_norm > 0.0,
        Degenerate,
        "activations have zero mean norm"
    );
    let ratio = mean_activation_norm / vector_norm;
    Ok(crate::sda::geometric_grid(lo, hi, n)?
        .into_iter()
        .map(|g| g * ratio)
        .collect())
}

/// Sidecar metadata describing how an edited shard was produced.
pub fn provenance(sv: &SteeringVector, spec: &ApplySpec) -> BTreeMap<String, String> {
    let target = match spec.target {
        ModalityFilter::All => "all".to_string(),
        ModalityFilter::Only(m) => m.to_string(),
    };
    [
        ("edit", "steer".to_string()),
        ("method", sv.method.to_string()),
        ("alpha", spec.alpha.to_string()),
        ("pos-class", sv.pos_class.to_string()),
        ("neg-class", sv.neg_class.to_string()),
        ("vector-layer", sv.layer.to_string()),
        ("vector-norm", sv.norm().to_string()),
        ("target", target),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn write_steering<W: Write>(w: &mut W, sv: &SteeringVector) -> Result<()> {
    sv.validate()?;
    w.write_all(STEERING_MAGIC)?;
    w.write_all(&(sv.d_model() as u32).to_le_bytes())?;
    w.write_all(&sv.layer.to_le_bytes())?;
    w.write_all(&[sv.method as u8])?;
    w.write_all(&sv.pos_class.to_le_bytes())?;
    w.write_all(&sv.neg_class.to_le_bytes())?;
    write_f32_block(w, &sv.vector)
}

pub fn read_steering<R: Read>(r: &mut R) -> Result<SteeringVector> {
    read_magic(r, STEERING_MAGIC)?;
    let d = read_u32(r, "d_model")? as usize;
    ensure!(d > 0, Format, "steering file declares d_model 0");
    let layer = read_u32(r, "layer")?;
    let method = SteeringMethod::try_from(read_u8(r, "method")?)?;
    let pos_class = read_i32(r, "positive class")?;
    let neg_class = read_i32(r, "negative class")?;
    let vector = read_f32_block(r, d, "steering vector")?;
    codec::expect_eof(r, "steering file")?;
    Ok(SteeringVector {
        vector,
        layer,
        pos_class,
        neg_class,
        method,
    })
}

pub fn save_steering(path: &Path, sv: &SteeringVector) -> Result<()> {
    let mut buf = Vec::new();
    write_steering(&mut buf, sv)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_steering(path: &Path) -> Result<SteeringVector> {
    read_steering(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_sim;
    use crate::store::{gen_synthetic_class_data, random_class_means, ClassDataConfig, TokenRow};
    use proptest::prelude::*;

    fn row(sample_id: u64, modality: Modality, label: i32, a: Vec<f32>) -> TokenRow {
        TokenRow {
            sample_id,
            token_index: 0,
            modality,
            class_label: label,
            activation: a,
        }
    }

    fn two_class_shard() -> Shard {
        Shard::new(
            2,
            5,
            vec![
                row(0, Modality::Image, 0, vec![1.0, 0.0]),
                row(0, Modality::Text, 0, vec![9.0, 9.0]),
                row(1, Modality::Image, 1, vec![0.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn caa_simple_difference() {
        let s = two_class_shard();
        let v = caa_vector(&s, 0, 1).unwrap();
        assert_eq!(v.vector, vec![1.0, -1.0]);
        assert_eq!(v.layer, 5);
        assert_eq!(caa_vector(&s, 1, 1).unwrap().vector, vec![0.0, 0.0]);
    }

    #[test]
    fn caa_is_antisymmetric() {
        let cfg = ClassDataConfig::new(random_class_means(8, 2, 3.0, 1), 0.5, 30, 2);
        let s = gen_synthetic_class_data(&cfg).unwrap();
        let ab = caa_vector(&s, 0, 1).unwrap().vector;
        let ba = caa_vector(&s, 1, 0).unwrap().vector;
        assert!(ab.iter().zip(&ba).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn caa_weighs_samples_equally() {
        // Sample 0 has three tokens, sample 1 one; a token-level mean would give 1.5.
        let s = Shard::new(
            1,
            0,
            vec![
                row(0, Modality::Image, 0, vec![1.0]),
                row(0, Modality::Image, 0, vec![1.0]),
                row(0, Modality::Image, 0, vec![1.0]),
                row(1, Modality::Image, 0, vec![3.0]),
                row(2, Modality::Image, 1, vec![0.0]),
            ],
        )
        .unwrap();
        assert_eq!(caa_vector(&s, 0, 1).unwrap().vector, vec![2.0]);
    }

    #[test]
    fn caa_recovers_planted_direction() {
        let means = random_class_means(32, 2, 5.0, 11);
        let cfg = ClassDataConfig::new(means.clone(), 0.1, 200, 3);
        let s = gen_synthetic_class_data(&cfg).unwrap();
        let v = caa_vector(&s, 0, 1).unwrap();
        let truth: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| a - b).collect();
        assert!(cosine_sim(&v.vector, &truth).unwrap() >= 0.99);
    }

    #[test]
    fn caa_missing_class_is_data_error() {
        assert!(matches!(
            caa_vector(&two_class_shard(), 0, 7),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn logit_lens_reference() {
        let v = logit_lens_vector(&[3.0, 0.0], &[0.0, 4.0], 2).unwrap();
        assert!((v.vector[0] - 0.6).abs() < 1e-15);
        assert!((v.vector[1] + 0.8).abs() < 1e-15);
        let w = logit_lens_vector(&[0.0, 4.0], &[3.0, 0.0], 2).unwrap();
        assert!(v.vector.iter().zip(&w.vector).all(|(a, b)| *a == -*b));
        assert!(matches!(
            logit_lens_vector(&[1.0, 2.0], &[1.0, 2.0], 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn text_embed_keeps_norm() {
        let v = text_embed_vector(&[3.0, 0.0], &[0.0, 4.0], 1).unwrap();
        assert_eq!(v.vector, vec![3.0, -4.0]);
        assert_eq!(v.norm(), 5.0);
        assert_eq!(
            text_embed_vector(&[1.0], &[1.0], 1).unwrap().vector,
            vec![0.0]
        );
    }

    #[test]
    fn apply_zero_alpha_is_identity() {
        let s = two_class_shard();
        let v = caa_vector(&s, 0, 1).unwrap();
        let out = apply_steering(&s, &v, &ApplySpec::new(0.0)).unwrap();
        assert_eq!(out.shard, s);
    }

    #[test]
    fn apply_adds_to_image_rows_only() {
        let s = two_class_shard();
        let v = text_embed_vector(&[0.5, 0.25], &[0.0, 0.0], 5).unwrap();
        let out = apply_steering(&s, &v, &ApplySpec::new(2.0)).unwrap();
        assert!(!out.layer_mismatch);
        assert_eq!(out.shard.rows()[0].activation, vec![2.0, 0.5]);
        assert_eq!(out.shard.rows()[1], s.rows()[1]);
        assert_eq!(out.shard.rows()[2].activation, vec![1.0, 1.5]);
        assert_eq!(s, two_class_shard());
    }

    #[test]
    fn apply_flags_layer_mismatch() {
        let s = two_class_shard();
        let v = text_embed_vector(&[1.0, 0.0], &[0.0, 0.0], 9).unwrap();
        assert!(
            apply_steering(&s, &v, &ApplySpec::new(1.0))
                .unwrap()
                .layer_mismatch
        );
        let spec = ApplySpec {
            layer: Some(5),
            ..ApplySpec::new(1.0)
        };
        assert!(!apply_steering(&s, &v, &spec).unwrap().layer_mismatch);
    }

    #[test]
    fn apply_rejects_wrong_width() {
        let v = text_embed_vector(&[1.0; 3], &[0.0; 3], 5).unwrap();
        assert!(matches!(
            apply_steering(&two_class_shard(), &v, &ApplySpec::new(1.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ablation_zeroes_and_is_idempotent() {
        let s = two_class_shard();
        let once = zero_ablate(&s, ModalityFilter::Only(Modality::Image));
        assert_eq!(once.rows()[0].activation, vec![0.0, 0.0]);
        assert_eq!(once.rows()[1], s.rows()[1]);
        assert_eq!(once.header(), s.header());
        assert_eq!(
            zero_ablate(&once, ModalityFilter::Only(Modality::Image)),
            once
        );
        let all = zero_ablate(&s, ModalityFilter::All);
        assert!(all
            .rows()
            .iter()
            .all(|r| r.activation.iter().all(|&a| a == 0.0)));
    }

    #[test]
    fn random_baseline_norm_and_seed() {
        let a = random_vector_baseline(512, 3.5, 1).unwrap();
        assert!((a.norm() - 3.5).abs() < 1e-9);
        assert_eq!(a, random_vector_baseline(512, 3.5, 1).unwrap());
        let b = random_vector_baseline(512, 3.5, 2).unwrap();
        assert!(cosine_sim(&a.vector, &b.vector).unwrap().abs() < 0.2);
    }

    #[test]
    fn alpha_grid_scales_to_activation_norm() {
        let g = alpha_grid(2.0, 10.0, 0.5, 2.0, 3).unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[0] - 2.5).abs() < 1e-12);
        assert!((g[1] - 5.0).abs() < 1e-12);
        assert!((g[2] - 10.0).abs() < 1e-12);
        assert!(matches!(
            alpha_grid(0.0, 1.0, 0.5, 2.0, 3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn steering_file_round_trip_and_corruption() {
        let sv = SteeringVector {
            vector: vec![0.5, -1.25, 3.0],
            layer: 12,
            pos_class: 4,
            neg_class: 7,
            method: SteeringMethod::Caa,
        };
        let mut bytes = Vec::new();
        write_steering(&mut bytes, &sv).unwrap();
        assert_eq!(bytes.len(), 5 + 4 + 4 + 1 + 4 + 4 + 12);
        assert_eq!(read_steering(&mut &bytes[..]).unwrap(), sv);

        let mut bad = bytes.clone();
        bad[13] = 9;
        assert!(matches!(
            read_steering(&mut &bad[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_steering(&mut &bytes[..20]),
            Err(Error::Truncated(_))
        ));
        let mut nan = bytes.clone();
        let end = nan.len();
        nan[end - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_steering(&mut &nan[..]), Err(Error::Data(_))));
    }

    #[test]
    fn provenance_records_settings() {
        let sv = random_vector_baseline(4, 1.0, 0).unwrap();
        let p = provenance(&sv, &ApplySpec::new(1.5));
        assert_eq!(p["method"], "random");
        assert_eq!(p["alpha"], "1.5");
        assert_eq!(p["target"], "image");
    }

    proptest! {
        #[test]
        fn steering_is_additive_in_alpha(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
            let cfg = ClassDataConfig::new(random_class_means(6, 2, 2.0, seed), 0.3, 3, seed);
            let s = gen_synthetic_class_data(&cfg).unwrap();
            let v = random_vector_baseline(6, 1.0, seed + 1).unwrap();
            let v = SteeringVector { layer: s.layer(), ..v };
            let twice = apply_steering(&apply_steering(&s, &v, &ApplySpec::new(a)).unwrap().shard, &v, &ApplySpec::new(b)).unwrap().shard;
            let once = apply_steering(&s, &v, &ApplySpec::new(a + b)).unwrap().shard;
            for (r1, r2) in twice.rows().iter().zip(once.rows()) {
                for (x, y) in r1.activation.iter().zip(&r2.activation) {
                    let scale = x.abs().max(y.abs()).max(1.0);
                    prop_assert!((x - y).abs() <= 1e-5 * scale);
                }
            }
        }
    }
}
