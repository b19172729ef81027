//! One function per subcommand. Each reads its resolved config, writes
//! outputs under the run directory, and returns a one-line summary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use actlens::codec;
use actlens::metrics::{
    all_decile_profiles, min_max_normalize, pareto_frontier, profiles_from_json, profiles_to_json,
    read_score_points, write_score_points,
};
use actlens::numerics::Matrix;
use actlens::probe::{eval_probe, load_probe, save_probe, train_probe, ProbeTrainConfig};
use actlens::report::write_report;
use actlens::sae::{encode_shard, evaluate_sae, load_sae, save_sae, train_sae, SaeTrainConfig};
use actlens::sda::{
    atoms_needed, geometric_grid, neuron_basis, sda_solve, sparsity_sweep, write_sweep_csv,
    SdaOptimizer, SdaProblem,
};
use actlens::steering::{
    alpha_grid, apply_steering, caa_vector, load_steering, logit_lens_vector, pooled_mean,
    provenance, random_vector_baseline, save_steering, text_embed_vector, zero_ablate, ApplySpec,
    SteeringMethod,
};
use actlens::store::{
    gen_synthetic_class_data, gen_synthetic_dictionary_data, random_class_means, read_shard,
    sample_embeddings, write_shard, BatchStream, ClassDataConfig, DictionaryDataConfig, Modality,
    ModalityFilter, Shard,
};
use serde_json::{json, Value};

use crate::config::{key, optional, required, Key, RunConfig, OUT};
use crate::error::CliError;

type Outcome = Result<String, CliError>;

pub struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
    pub run: fn(&RunConfig, &Path) -> Outcome,
}

pub const SUBCOMMANDS: &[Subcommand] = &[
    Subcommand {
        name: "gen-synth",
        about: "Write a synthetic activation shard",
        keys: GEN_SYNTH,
        run: gen_synth,
    },
    Subcommand {
        name: "train-sae",
        about: "Train a sparse autoencoder on activation shards",
        keys: TRAIN_SAE,
        run: train_sae_cmd,
    },
    Subcommand {
        name: "eval-sae",
        about: "Reconstruction metrics of an SAE on a shard",
        keys: EVAL_SAE,
        run: eval_sae,
    },
    Subcommand {
        name: "encode",
        about: "Sparse feature codes and activation deciles for a shard",
        keys: ENCODE,
        run: encode,
    },
    Subcommand {
        name: "probe-train",
        about: "Train a linear probe on pooled sample embeddings",
        keys: PROBE_TRAIN,
        run: probe_train,
    },
    Subcommand {
        name: "probe-eval",
        about: "Evaluate a linear probe on a labelled shard",
        keys: PROBE_EVAL,
        run: probe_eval,
    },
    Subcommand {
        name: "steer-compute",
        about: "Build a steering vector",
        keys: STEER_COMPUTE,
        run: steer_compute,
    },
    Subcommand {
        name: "steer-apply",
        about: "Add a steering vector to a shard's activations",
        keys: STEER_APPLY,
        run: steer_apply,
    },
    Subcommand {
        name: "ablate",
        about: "Zero the activations of one modality",
        keys: ABLATE,
        run: ablate,
    },
    Subcommand {
        name: "sda",
        about: "Sparse dictionary approximation of a direction",
        keys: SDA,
        run: sda,
    },
    Subcommand {
        name: "sweep",
        about: "Sparse approximation over a grid of sparsity weights",
        keys: SWEEP,
        run: sweep,
    },
    Subcommand {
        name: "pareto",
        about: "Pareto frontier of coherence/steering scores",
        keys: PARETO,
        run: pareto,
    },
    Subcommand {
        name: "report",
        about: "Static feature-browser page from decile profiles",
        keys: REPORT,
        run: report,
    },
];

const SEED: Key = key(
    "seed",
    "0",
    "random seed (ACTLENS_SEED overrides the config file)",
);

const GEN_SYNTH: &[Key] = &[
    OUT,
    key(
        "kind",
        "dictionary",
        "dictionary (sparse planted features) or classes (labelled samples)",
    ),
    key("d-model", "64", "activation width"),
    key("n-features", "32", "planted dictionary size"),
    key("k", "3", "active features per row"),
    key("rows", "200000", "rows for the dictionary kind"),
    key("noise-sigma", "0.01", "per-coordinate Gaussian noise"),
    key("coef-min", "0.5", "smallest feature coefficient"),
    key("coef-max", "1.5", "largest feature coefficient"),
    key("n-classes", "2", "classes for the classes kind"),
    key("class-mean-norm", "5", "length of each random class mean"),
    key("samples-per-class", "200", "samples per class"),
    key("image-tokens", "4", "image tokens per sample"),
    key(
        "text-tokens",
        "0",
        "class-independent text tokens per sample",
    ),
    key("text-sigma", "1", "spread of text tokens"),
    key("layer", "12", "layer recorded in the shard header"),
    SEED,
];

const TRAIN_SAE: &[Key] = &[
    OUT,
    required("shards", "comma-separated ACTS1 files"),
    key("lr", "5e-5", "Adam learning rate"),
    key("lambda-max", "5", "final L1 coefficient"),
    key("lambda-warmup", "0.05", "fraction of steps for the L1 ramp"),
    key(
        "lr-decay",
        "0.2",
        "final fraction of steps with linear lr decay",
    ),
    key("total-tokens", "2000000", "training tokens"),
    key("batch-size", "4096", "rows per step"),
    key("expansion-factor", "8", "d_sae / d_model"),
    key("precision", "f64", "parameter precision: f32 or f64"),
    key("eval-interval", "100", "steps per metrics row"),
    key(
        "dead-window",
        "10",
        "intervals without firing before a feature counts as dead",
    ),
    key(
        "shuffle-buffer",
        "1000000",
        "rows held by the shuffle buffer",
    ),
    SEED,
];

const EVAL_SAE: &[Key] = &[
    OUT,
    required("sae", "SAE01 checkpoint"),
    required("shard", "ACTS1 file"),
];

const ENCODE: &[Key] = &[
    OUT,
    required("sae", "SAE01 checkpoint"),
    required("shard", "ACTS1 file"),
    key("threshold", "0", "activations at or below this are dropped"),
    key("top-k", "10", "exemplars kept per feature and modality"),
];

const PROBE_TRAIN: &[Key] = &[
    OUT,
    required("shard", "labelled ACTS1 file"),
    key(
        "modality",
        "image",
        "tokens pooled per sample: image, text or all",
    ),
    key("lr", "1e-3", "Adam learning rate"),
    key("epochs", "100", "passes over the training split"),
    key("batch-size", "32", "samples per step"),
    key("weight-decay", "0", "L2 coefficient on the weights"),
    key("val-fraction", "0.2", "share of each class held out"),
    SEED,
];

const PROBE_EVAL: &[Key] = &[
    OUT,
    required("probe", "PRB01 checkpoint"),
    required("shard", "labelled ACTS1 file"),
    key(
        "modality",
        "image",
        "tokens pooled per sample: image, text or all",
    ),
];

const STEER_COMPUTE: &[Key] = &[
    OUT,
    key("method", "caa", "caa, logit-lens, text-embed or random"),
    optional(
        "shard",
        "labelled ACTS1 file (caa); sets the alpha grid scale",
    ),
    optional("pos-class", "positive class (caa)"),
    optional("neg-class", "negative class (caa)"),
    optional(
        "unembedding",
        "ACTS1 file whose sample ids are token ids (logit-lens)",
    ),
    optional("pos-token", "positive token id (logit-lens)"),
    optional("neg-token", "negative token id (logit-lens)"),
    optional(
        "pos-shard",
        "ACTS1 file of the positive prompt (text-embed)",
    ),
    optional(
        "neg-shard",
        "ACTS1 file of the negative prompt (text-embed)",
    ),
    optional("d-model", "width (random)"),
    key("norm", "1", "length (random)"),
    optional(
        "match-norm",
        "STV01 file whose length the random vector copies",
    ),
    optional("layer", "layer recorded in the vector"),
    SEED,
];

const STEER_APPLY: &[Key] = &[
    OUT,
    required("shard", "ACTS1 file"),
    required("vector", "STV01 file"),
    key("alpha", "1", "steering strength"),
    key("target", "image", "rows edited: image, text or all"),
    optional("layer", "intended layer; defaults to the vector's"),
];

const ABLATE: &[Key] = &[
    OUT,
    required("shard", "ACTS1 file"),
    key("target", "image", "rows zeroed: image, text or all"),
];

const SDA: &[Key] = &[
    OUT,
    required("target", "STV01 file or one-line CSV of values"),
    key(
        "dictionary",
        "neurons",
        "neurons, an SAE01 checkpoint, or a CSV with one atom per line",
    ),
    key("lambda", "0.1", "sparsity weight"),
    key("lr", "0.01", "learning rate"),
    key("iterations", "2000", "optimization steps"),
    key("beta", "0.6666666666666666", "gate temperature"),
    key("gamma", "-0.1", "lower stretch bound"),
    key("zeta", "1.1", "upper stretch bound"),
    key("optimizer", "adam", "adam or sgd"),
    key("init-sigma", "0.01", "spread of the initial coefficients"),
    SEED,
];

const SWEEP: &[Key] = &[
    OUT,
    required("target", "STV01 file or one-line CSV of values"),
    key(
        "dictionary",
        "neurons",
        "neurons, an SAE01 checkpoint, or a CSV with one atom per line",
    ),
    key("lambda-min", "0.01", "smallest sparsity weight"),
    key("lambda-max", "30", "largest sparsity weight"),
    key("lambda-count", "25", "grid points, geometrically spaced"),
    key(
        "min-cosine",
        "0.95",
        "cosine at which the atom count is reported",
    ),
    key("lr", "0.01", "learning rate"),
    key("iterations", "2000", "optimization steps"),
    key("beta", "0.6666666666666666", "gate temperature"),
    key("gamma", "-0.1", "lower stretch bound"),
    key("zeta", "1.1", "upper stretch bound"),
    key("optimizer", "adam", "adam or sgd"),
    key("init-sigma", "0.01", "spread of the initial coefficients"),
    SEED,
];

const PARETO: &[Key] = &[
    OUT,
    required("scores", "CSV with coherence,steering[,layer,alpha,method]"),
    key("normalize", "false", "min-max scale both scores first"),
];

const REPORT: &[Key] = &[
    OUT,
    required("profiles", "profiles.json written by encode"),
    key("title", "Feature browser", "page title"),
];

// ---------------------------------------------------------------------------

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_shard(path: &Path) -> Result<Shard, CliError> {
    read_shard(path).map_err(|e| CliError::from(e).context(path))
}

fn filter(cfg: &RunConfig, k: &str) -> Result<ModalityFilter, CliError> {
    cfg.get::<ModalityFilter>(k)
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let seed = cfg.get("seed")?;
    let layer = cfg.get("layer")?;
    let d_model: usize = cfg.get("d-model")?;
    let shard_path = out.join("shard.acts");
    match cfg.str("kind")? {
        "dictionary" => {
            let data = gen_synthetic_dictionary_data(&DictionaryDataConfig {
                d_model,
                n_features: cfg.get("n-features")?,
                k: cfg.get("k")?,
                n_rows: cfg.get("rows")?,
                noise_sigma: cfg.get("noise-sigma")?,
                coef_min: cfg.get("coef-min")?,
                coef_max: cfg.get("coef-max")?,
                layer,
                seed,
            })?;
            write_shard(&shard_path, &data.shard)?;
            let atoms: Vec<Vec<f64>> = (0..data.dictionary.cols())
                .map(|j| data.dictionary.column(j))
                .collect();
            write_rows_csv(&out.join("true_dictionary.csv"), &atoms)?;
            Ok(format!(
                "wrote {} rows to {}",
                data.shard.len(),
                shard_path.display()
            ))
        }
        "classes" => {
            let n: usize = cfg.get("n-classes")?;
            let means = random_class_means(d_model, n, cfg.get("class-mean-norm")?, seed);
            let mut c = ClassDataConfig::new(
                means.clone(),
                cfg.get("noise-sigma")?,
                cfg.get("samples-per-class")?,
                seed,
            );
            c.image_tokens_per_sample = cfg.get("image-tokens")?;
            c.text_tokens_per_sample = cfg.get("text-tokens")?;
            c.text_sigma = cfg.get("text-sigma")?;
            c.layer = layer;
            let shard = gen_synthetic_class_data(&c)?;
            write_shard(&shard_path, &shard)?;
            write_rows_csv(&out.join("class_means.csv"), &means)?;
            Ok(format!(
                "wrote {} rows to {}",
                shard.len(),
                shard_path.display()
            ))
        }
        other => Err(CliError::usage(format!(
            "unknown kind '{other}' (expected dictionary or classes)"
        ))),
    }
}

fn write_rows_csv(path: &Path, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).context(path))?;
    let mut rows = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

fn sae_config(cfg: &RunConfig) -> Result<SaeTrainConfig, CliError> {
    Ok(SaeTrainConfig {
        lr: cfg.get("lr")?,
        lambda_max: cfg.get("lambda-max")?,
        lambda_warmup_frac: cfg.get("lambda-warmup")?,
        lr_decay_frac: cfg.get("lr-decay")?,
        total_tokens: cfg.get("total-tokens")?,
        batch_size: cfg.get("batch-size")?,
        expansion_factor: cfg.get("expansion-factor")?,
        precision: cfg.get("precision")?,
        seed: cfg.get("seed")?,
        eval_interval: cfg.get("eval-interval")?,
        dead_window: cfg.get("dead-window")?,
        shuffle_buffer: cfg.get("shuffle-buffer")?,
    })
}

fn train_sae_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let config = sae_config(cfg)?;
    config.validate()?;
    let shards = cfg
        .paths("shards")?
        .iter()
        .map(|p| load_shard(p))
        .collect::<Result<Vec<_>, _>>()?;
    let stream = BatchStream::new(&shards, config.batch_size, config.seed)?
        .with_buffer_size(config.shuffle_buffer);
    let (params, report) = train_sae(&config, &stream)?;
    save_sae(&out.join("sae.bin"), &params, &config.to_kv())?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    let last = report.last().cloned();
    let summary = json!({
        "total_steps": report.total_steps,
        "d_model": params.d_model(),
        "d_sae": params.d_sae(),
        "final": last.as_ref().map(|s| json!({
            "step": s.step,
            "tokens": s.tokens,
            "mse": finite_or_null(s.mse),
            "mean_l0": finite_or_null(s.mean_l0),
            "mean_l1": finite_or_null(s.mean_l1),
            "fvu": finite_or_null(s.fvu),
            "dead_features": s.dead_features,
        })),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(match last {
        Some(s) => format!(
            "trained {} steps: mse {:.4e}, fvu {:.4}, L0 {:.2}, dead {}",
            report.total_steps, s.mse, s.fvu, s.mean_l0, s.dead_features
        ),
        None => format!("trained {} steps", report.total_steps),
    })
}

fn eval_sae(cfg: &RunConfig, out: &Path) -> Outcome {
    let params = load_sae(&cfg.path("sae")?)
        .map_err(|e| CliError::from(e).context(&cfg.path("sae").unwrap_or_default()))?;
    let shard = load_shard(&cfg.path("shard")?)?;
    let ev = evaluate_sae(&params, &shard)?;
    let per: Vec<Value> = ev
        .per_modality
        .iter()
        .map(|(m, n, f)| json!({"modality": m.to_string(), "rows": n, "fvu": finite_or_null(*f)}))
        .collect();
    write_json(
        &out.join("eval.json"),
        &json!({
            "rows": ev.rows,
            "mse": finite_or_null(ev.mse),
            "fvu": finite_or_null(ev.fvu),
            "mean_l0": ev.mean_l0,
            "mean_l1": ev.mean_l1,
            "dead_features": ev.dead_features,
            "per_modality": per,
        }),
    )?;
    Ok(format!(
        "fvu {:.4}, L0 {:.2}, dead {}",
        ev.fvu, ev.mean_l0, ev.dead_features
    ))
}

fn encode(cfg: &RunConfig, out: &Path) -> Outcome {
    let params = load_sae(&cfg.path("sae")?)?;
    let shard = load_shard(&cfg.path("shard")?)?;
    let codes = encode_shard(&params, &shard, cfg.get("threshold")?)?;
    codes.write_csv(BufWriter::new(File::create(out.join("codes.csv"))?))?;
    let profiles = all_decile_profiles(&codes, cfg.get("top-k")?);
    fs::write(
        out.join("profiles.json"),
        profiles_to_json(&profiles)? + "\n",
    )?;
    Ok(format!(
        "encoded {} tokens, mean L0 {:.2}",
        codes.tokens.len(),
        codes.mean_l0()
    ))
}

fn probe_config(cfg: &RunConfig) -> Result<ProbeTrainConfig, CliError> {
    Ok(ProbeTrainConfig {
        lr: cfg.get("lr")?,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch-size")?,
        weight_decay: cfg.get("weight-decay")?,
        seed: cfg.get("seed")?,
        val_fraction: cfg.get("val-fraction")?,
    })
}

fn probe_train(cfg: &RunConfig, out: &Path) -> Outcome {
    let config = probe_config(cfg)?;
    let shard = load_shard(&cfg.path("shard")?)?;
    let pooled = sample_embeddings(&shard, filter(cfg, "modality")?)?;
    let (model, report) = train_probe(&config, &pooled.embeddings)?;
    save_probe(&out.join("probe.bin"), &model)?;
    codec::write_kv_file(
        &codec::sidecar_path(&out.join("probe.bin")),
        &config.to_kv(),
    )?;
    fs::write(out.join("metrics.csv"), report.to_csv()?)?;
    report
        .validation
        .write_confusion_csv(BufWriter::new(File::create(out.join("val_confusion.csv"))?))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "classes": model.classes,
            "train_count": report.train_count,
            "val_count": report.val_count,
            "val_accuracy": finite_or_null(report.validation.accuracy),
        }),
    )?;
    Ok(format!(
        "trained on {} samples, validation accuracy {:.4}",
        report.train_count, report.validation.accuracy
    ))
}

fn probe_eval(cfg: &RunConfig, out: &Path) -> Outcome {
    let model = load_probe(&cfg.path("probe")?)?;
    let shard = load_shard(&cfg.path("shard")?)?;
    let pooled = sample_embeddings(&shard, filter(cfg, "modality")?)?;
    let ev = eval_probe(&model, &pooled.embeddings)?;
    ev.write_confusion_csv(BufWriter::new(File::create(out.join("confusion.csv"))?))?;
    let per: BTreeMap<String, Value> = ev
        .classes
        .iter()
        .zip(&ev.per_class)
        .map(|(c, a)| (c.to_string(), finite_or_null(*a)))
        .collect();
    write_json(
        &out.join("eval.json"),
        &json!({"samples": ev.total(), "accuracy": ev.accuracy, "per_class": per}),
    )?;
    Ok(format!(
        "accuracy {:.4} on {} samples",
        ev.accuracy,
        ev.total()
    ))
}

fn token_row(shard: &Shard, token: u64) -> Result<Vec<f64>, CliError> {
    shard
        .rows()
        .iter()
        .find(|r| r.sample_id == token)
        .map(|r| r.activation_f64())
        .ok_or_else(|| CliError::data(format!("token {token} not found in the unembedding file")))
}

fn steer_compute(cfg: &RunConfig, out: &Path) -> Outcome {
    let method: SteeringMethod = cfg.get("method")?;
    let shard = cfg
        .get_opt::<String>("shard")?
        .map(|p| load_shard(Path::new(&p)))
        .transpose()?;
    let need = |k: &str| -> Result<(), CliError> {
        if cfg.has(k) {
            Ok(())
        } else {
            Err(CliError::usage(format!("method {method} needs '{k}'")))
        }
    };
    let layer_override: Option<u32> = cfg.get_opt("layer")?;
    let mut sv = match method {
        SteeringMethod::Caa => {
            need("shard")?;
            need("pos-class")?;
            need("neg-class")?;
            caa_vector(
                shard.as_ref().expect("checked"),
                cfg.get("pos-class")?,
                cfg.get("neg-class")?,
            )?
        }
        SteeringMethod::LogitLens => {
            need("unembedding")?;
            need("pos-token")?;
            need("neg-token")?;
            let u = load_shard(&cfg.path("unembedding")?)?;
            let layer = layer_override.unwrap_or(u.layer());
            logit_lens_vector(
                &token_row(&u, cfg.get("pos-token")?)?,
                &token_row(&u, cfg.get("neg-token")?)?,
                layer,
            )?
        }
        SteeringMethod::TextEmbed => {
            need("pos-shard")?;
            need("neg-shard")?;
            let pos = load_shard(&cfg.path("pos-shard")?)?;
            let neg = load_shard(&cfg.path("neg-shard")?)?;
            text_embed_vector(
                &pooled_mean(&pos, ModalityFilter::Only(Modality::Text))?,
                &pooled_mean(&neg, ModalityFilter::Only(Modality::Text))?,
                pos.layer(),
            )?
        }
        SteeringMethod::Random => {
            let d = match (cfg.get_opt::<usize>("d-model")?, &shard) {
                (Some(d), _) => d,
                (None, Some(s)) => s.d_model(),
                (None, None) => {
                    return Err(CliError::usage("method random needs 'd-model' or 'shard'"))
                }
            };
            let norm = match cfg.get_opt::<String>("match-norm")? {
                Some(p) => load_steering(Path::new(&p))?.norm(),
                None => cfg.get("norm")?,
            };
            let mut v = random_vector_baseline(d, norm, cfg.get("seed")?)?;
            if let Some(s) = &shard {
                v.layer = s.layer();
            }
            v
        }
    };
    if let Some(l) = layer_override {
        sv.layer = l;
    }
    save_steering(&out.join("vector.stv"), &sv)?;
    let alphas = match &shard {
        Some(s) => match s.mean_norm(ModalityFilter::Only(Modality::Image)) {
            Some(m) if sv.norm() > 0.0 => alpha_grid(sv.norm(), m, 0.125, 2.0, 5)?,
            _ => Vec::new(),
        },
        None => Vec::new(),
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "method": method.to_string(),
            "d_model": sv.d_model(),
            "layer": sv.layer,
            "pos_class": sv.pos_class,
            "neg_class": sv.neg_class,
            "norm": sv.norm(),
            "suggested_alphas": alphas,
        }),
    )?;
    Ok(format!("{method} vector, norm {:.4}", sv.norm()))
}

fn write_edited(
    out: &Path,
    shard: &Shard,
    meta: &BTreeMap<String, String>,
    name: &str,
) -> Result<(), CliError> {
    let path = out.join(name);
    write_shard(&path, shard)?;
    codec::write_kv_file(&codec::sidecar_path(&path), meta)?;
    Ok(())
}

fn steer_apply(cfg: &RunConfig, out: &Path) -> Outcome {
    let shard = load_shard(&cfg.path("shard")?)?;
    let sv = load_steering(&cfg.path("vector")?)?;
    let spec = ApplySpec {
        alpha: cfg.get("alpha")?,
        target: filter(cfg, "target")?,
        layer: cfg.get_opt("layer")?,
    };
    let steered = apply_steering(&shard, &sv, &spec)?;
    let mut meta = provenance(&sv, &spec);
    meta.insert("layer-mismatch".into(), steered.layer_mismatch.to_string());
    write_edited(out, &steered.shard, &meta, "steered.acts")?;
    let mut msg = format!("added {} x {} vector", spec.alpha, sv.method);
    if steered.layer_mismatch {
        msg.push_str(&format!(
            " (warning: vector layer {} vs shard layer {})",
            sv.layer,
            shard.layer()
        ));
    }
    Ok(msg)
}

fn ablate(cfg: &RunConfig, out: &Path) -> Outcome {
    let shard = load_shard(&cfg.path("shard")?)?;
    let target = filter(cfg, "target")?;
    let edited = zero_ablate(&shard, target);
    let meta: BTreeMap<String, String> = [
        ("edit", "zero-ablate".to_string()),
        ("target", cfg.str("target")?.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_edited(out, &edited, &meta, "ablated.acts")?;
    Ok(format!(
        "zeroed {} rows",
        shard
            .rows()
            .iter()
            .filter(|r| target.accepts(r.modality))
            .count()
    ))
}

fn load_target(path: &Path) -> Result<Vec<f64>, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut rows = read_rows_csv(path)?;
        if rows.len() != 1 {
            return Err(CliError::data(format!(
                "{}: expected one line of values",
                path.display()
            )));
        }
        Ok(rows.remove(0))
    } else {
        Ok(load_steering(path)?.vector)
    }
}

fn load_dictionary(spec: &str, d_model: usize) -> Result<Matrix, CliError> {
    if spec == "neurons" {
        return Ok(neuron_basis(d_model));
    }
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "csv") {
        let atoms = read_rows_csv(path)?;
        Ok(Matrix::from_columns(&atoms)?)
    } else {
        Ok(load_sae(path)?.decoder_dictionary().clone())
    }
}

fn sda_problem(cfg: &RunConfig, lambda: f64) -> Result<SdaProblem, CliError> {
    let mut p = SdaProblem {
        target: Vec::new(),
        dictionary: Matrix::zeros(0, 0),
        lambda,
        lr: cfg.get("lr")?,
        iterations: cfg.get("iterations")?,
        beta: cfg.get("beta")?,
        gamma: cfg.get("gamma")?,
        zeta: cfg.get("zeta")?,
        seed: cfg.get("seed")?,
        optimizer: cfg.get::<SdaOptimizer>("optimizer")?,
        init_sigma: cfg.get("init-sigma")?,
    };
    p.target = load_target(&cfg.path("target")?)?;
    p.dictionary = load_dictionary(cfg.str("dictionary")?, p.target.len())?;
    p.validate()?;
    Ok(p)
}

fn sda(cfg: &RunConfig, out: &Path) -> Outcome {
    let problem = sda_problem(cfg, cfg.get("lambda")?)?;
    let r = sda_solve(&problem)?;
    r.write_csv(BufWriter::new(File::create(out.join("coefficients.csv"))?))?;
    fs::write(out.join("summary.json"), r.summary_json()? + "\n")?;
    let mut trace = String::from("step,loss\n");
    for (i, l) in r.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{},{l:e}\n", i + 1));
    }
    fs::write(out.join("loss_trace.csv"), trace)?;
    Ok(format!(
        "{} atoms, cosine {:.6}, expected L0 {:.3}",
        r.l0, r.cosine, r.expected_l0
    ))
}

fn sweep(cfg: &RunConfig, out: &Path) -> Outcome {
    let problem = sda_problem(cfg, 0.0)?;
    let grid = geometric_grid(
        cfg.get("lambda-min")?,
        cfg.get("lambda-max")?,
        cfg.get("lambda-count")?,
    )?;
    let points = sparsity_sweep(&problem, &grid)?;
    write_sweep_csv(
        &points,
        BufWriter::new(File::create(out.join("sweep.csv"))?),
    )?;
    let min_cos: f64 = cfg.get("min-cosine")?;
    let needed = atoms_needed(&points, min_cos);
    write_json(
        &out.join("summary.json"),
        &json!({"min_cosine": min_cos, "atoms_needed": needed, "points": points.len()}),
    )?;
    Ok(match needed {
        Some(n) => format!("{n} atoms reach cosine {min_cos}"),
        None => format!("no grid point reaches cosine {min_cos}"),
    })
}

fn pareto(cfg: &RunConfig, out: &Path) -> Outcome {
    let path = cfg.path("scores")?;
    let mut points = read_score_points(BufReader::new(
        File::open(&path).map_err(|e| CliError::from(e).context(&path))?,
    ))?;
    if cfg.get::<bool>("normalize")? {
        let c = min_max_normalize(&points.iter().map(|p| p.coherence).collect::<Vec<_>>())?;
        let s = min_max_normalize(&points.iter().map(|p| p.steering).collect::<Vec<_>>())?;
        for ((p, c), s) in points.iter_mut().zip(c).zip(s) {
            p.coherence = c;
            p.steering = s;
        }
    }
    let frontier = pareto_frontier(&points);
    write_score_points(
        &frontier,
        BufWriter::new(File::create(out.join("frontier.csv"))?),
    )?;
    Ok(format!(
        "{} of {} points on the frontier",
        frontier.len(),
        points.len()
    ))
}

fn report(cfg: &RunConfig, out: &Path) -> Outcome {
    let path = cfg.path("profiles")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::from(e).context(&path))?;
    let profiles = profiles_from_json(&text)?;
    let r = write_report(&out.join("report.html"), &profiles, cfg.str("title")?)?;
    Ok(format!(
        "{} features, {} dead, {} warnings",
        profiles
            .iter()
            .map(|p| p.feature)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        r.dead_features.len(),
        r.warnings.len()
    ))
}
