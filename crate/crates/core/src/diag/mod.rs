//! Feature diagnostics: received attention per token, inter-token
//! distance, feature variance per layer, and Hessian spectra through
//! finite-difference Hessian-vector products and Lanczos.

mod hessian;
mod lanczos;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use hessian::{dense_hessian, hessian_vector_product, DenseHessian, Objective, StoreObjective, DENSE_HESSIAN_LIMIT};
pub use lanczos::{lanczos_spectrum, SpectrumSummary};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{AttentionRecord, Ctx};
use crate::ssat::{joint_loss_var, masked_branch, sample_masks};
use crate::tensor::{Float, Tensor};
use crate::train::{encode_checkpoint, hex, Checkpoint, Model, OptimizerState};
use crate::vit::{cross_entropy, forward_logits, one_hot, patch_batch};

/// Column sums of one row-stochastic `n × n` map: attention each token receives.
pub fn column_sums<T: Float>(map: &[T], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in map.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.as_f64();
        }
    }
    out
}

/// Received attention per token, averaged over heads and samples.
pub fn attention_column_sums<T: Float>(record: &AttentionRecord<T>) -> Vec<f64> {
    let (b, h, n) = (record.batch(), record.heads(), record.tokens());
    let mut acc = vec![0.0; n];
    for s in 0..b {
        for map in record.sample(s).chunks(n * n) {
            for (a, v) in acc.iter_mut().zip(column_sums(map, n)) {
                *a += v;
            }
        }
    }
    let count = (b * h).max(1) as f64;
    acc.into_iter().map(|v| v / count).collect()
}

/// Splits `[n, d]` or `[B, n, d]` into per-sample token matrices, dropping
/// the first token when `skip_first`.
fn samples<T: Float>(tokens: &Tensor<T>, skip_first: bool) -> Result<(Vec<&[T]>, usize, usize)> {
    let shape = tokens.shape();
    let (b, n, d) = match *shape {
        [n, d] => (1, n, d),
        [b, n, d] => (b, n, d),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "token diagnostics",
                shapes: vec![shape.to_vec()],
            })
        }
    };
    let skip = usize::from(skip_first);
    if n < skip + 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 tokens besides the class token, got {}",
            n.saturating_sub(skip)
        )));
    }
    let rows: Vec<&[T]> = tokens.data().chunks(n * d).map(|s| &s[skip * d..]).collect();
    debug_assert_eq!(rows.len(), b);
    Ok((rows, n - skip, d))
}

/// Mean Euclidean distance over unordered token pairs, averaged over samples.
pub fn inter_token_distance<T: Float>(tokens: &Tensor<T>, skip_class_token: bool) -> Result<f64> {
    let (rows, n, d) = samples(tokens, skip_class_token)?;
    let mut total = 0.0;
    for s in &rows {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let sq: f64 = (0..d)
                    .map(|c| {
                        let diff = s[i * d + c].as_f64() - s[j * d + c].as_f64();
                        diff * diff
                    })
                    .sum();
                sum += sq.sqrt();
            }
        }
        total += sum / (n * (n - 1) / 2) as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Per-channel variance across tokens (population form), averaged over
/// channels and samples.
pub fn feature_variance<T: Float>(tokens: &Tensor<T>, skip_class_token: bool) -> Result<f64> {
    let (rows, n, d) = samples(tokens, skip_class_token)?;
    let mut total = 0.0;
    for s in &rows {
        let mut acc = 0.0;
        for c in 0..d {
            let mean = (0..n).map(|i| s[i * d + c].as_f64()).sum::<f64>() / n as f64;
            acc += (0..n).map(|i| (s[i * d + c].as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        }
        total += acc / d as f64;
    }
    Ok(total / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianLoss {
    /// Classification loss on clean inputs.
    Cls,
    /// Joint loss with the configured weight and a fixed mask draw.
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub k: usize,
    pub iterations: usize,
    pub fd_eps: f64,
    pub seed: u64,
    pub loss: HessianLoss,
    /// Images from the slice used in the Hessian loss.
    pub samples: usize,
    pub lambda: f64,
    pub mask_ratio: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            k: 5,
            iterations: 20,
            fd_eps: 1e-4,
            seed: 0,
            loss: HessianLoss::Cls,
            samples: 16,
            lambda: 0.1,
            mask_ratio: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    /// Leading images of the dataset to analyse.
    pub slice_size: usize,
    pub batch_size: usize,
    pub spectrum: Option<SpectrumConfig>,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            slice_size: 64,
            batch_size: 32,
            spectrum: Some(SpectrumConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMassProfile {
    pub layer: usize,
    /// Attention received by each token (class token first), averaged over
    /// heads and samples.
    pub received: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the parameter names, shapes and values.
    pub params_digest: String,
    /// SHA-256 of the analysed images and labels.
    pub dataset_digest: String,
    pub slice_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub attention: Vec<AttentionMassProfile>,
    /// One entry per block output.
    pub inter_token_distance: Vec<f64>,
    pub feature_variance: Vec<f64>,
    pub spectrum: Option<SpectrumSummary>,
    pub provenance: Provenance,
}

pub fn params_digest<T: Float>(model: &Model<T>) -> String {
    // the checkpoint encoding of the bare parameters covers names, shapes and values
    let ck = Checkpoint {
        config_digest: [0; 32],
        epoch: 0,
        seed: 0,
        params: model.store.clone(),
        optimizer: OptimizerState { step: 0, m: Vec::new(), v: Vec::new() },
    };
    hex(&Sha256::digest(encode_checkpoint(&ck)))
}

pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(data.bytes());
    if let Ok(labels) = data.labels() {
        for &l in labels {
            h.update((l as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Runs the analyses over the first `slice_size` images of `data`.
pub fn build_report<T: Float>(model: &Model<T>, data: &Dataset, config: &DiagConfig) -> Result<DiagnosticsReport> {
    let count = config.slice_size.min(data.len());
    if count == 0 {
        return Err(Error::InvalidArgument("diagnostics need a nonempty slice".into()));
    }
    let slice = data.subset(&(0..count).collect::<Vec<_>>());
    let enc = &model.vit.config;
    let grid = enc.grid()?;
    let depth = enc.depth;
    let skip = enc.use_class_token;
    let mut received = vec![vec![0.0; enc.num_tokens()]; depth];
    let mut distance = vec![0.0; depth];
    let mut variance = vec![0.0; depth];
    for chunk in (0..count).collect::<Vec<_>>().chunks(config.batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|&i| slice.image(i)).collect();
        let mut ctx = Ctx::new(&model.store, false);
        ctx.set_capture(true);
        let x = ctx.tape.constant(patch_batch::<T>(&images, &grid)?);
        let (_, encoded) = forward_logits(&mut ctx, &model.vit, x)?;
        let w = chunk.len() as f64 / count as f64;
        for (layer, record) in encoded.attention.iter().enumerate() {
            for (r, v) in received[layer].iter_mut().zip(attention_column_sums(record)) {
                *r += w * v;
            }
        }
        for (layer, out) in encoded.layer_outputs.iter().enumerate() {
            distance[layer] += w * inter_token_distance(out, skip)?;
            variance[layer] += w * feature_variance(out, skip)?;
        }
    }
    let attention = received
        .into_iter()
        .enumerate()
        .map(|(layer, received)| AttentionMassProfile {
            layer,
            received,
            samples: count,
        })
        .collect();
    let spectrum = match &config.spectrum {
        Some(sc) => Some(hessian_spectrum(model, &slice, sc)?),
        None => None,
    };
    Ok(DiagnosticsReport {
        attention,
        inter_token_distance: distance,
        feature_variance: variance,
        spectrum,
        provenance: Provenance {
            params_digest: params_digest(model),
            dataset_digest: dataset_digest(&slice),
            slice_size: count,
        },
    })
}

/// Lanczos over the 64-bit Hessian of the configured loss on the slice.
pub fn hessian_spectrum<T: Float>(model: &Model<T>, data: &Dataset, sc: &SpectrumConfig) -> Result<SpectrumSummary> {
    let count = sc.samples.min(data.len());
    if count == 0 {
        return Err(Error::InvalidArgument("spectrum needs at least one image".into()));
    }
    let enc = &model.vit.config;
    let images: Vec<_> = (0..count).map(|i| data.image(i)).collect();
    let labels = (0..count).map(|i| data.label(i)).collect::<Result<Vec<_>>>()?;
    let patches = patch_batch::<f64>(&images, &enc.grid()?)?;
    let targets = one_hot::<f64>(&labels, enc.num_classes)?;
    let vit = model.vit.clone();
    let decoder = model.decoder.clone();
    if sc.loss == HessianLoss::Total && decoder.is_none() {
        return Err(Error::InvalidArgument("the joint loss needs a decoder".into()));
    }
    let masks = sample_masks(count, enc.num_patches(), sc.mask_ratio, sc.seed)?;
    let (loss_kind, lambda) = (sc.loss, sc.lambda);
    let obj = StoreObjective::new(model.store.cast::<f64>(), move |ctx: &mut Ctx<f64>| {
        let x = ctx.tape.constant(patches.clone());
        let (logits, _) = forward_logits(ctx, &vit, x)?;
        let l_cls = cross_entropy(ctx, logits, &targets, 0.0)?;
        match loss_kind {
            HessianLoss::Cls => Ok(l_cls),
            HessianLoss::Total => {
                let dec = decoder.as_ref().expect("checked above");
                let r = masked_branch(ctx, &vit, dec, &patches, &masks)?;
                joint_loss_var(ctx, l_cls, r.loss, lambda)
            }
        }
    });
    let theta = obj.params();
    let dim = theta.len();
    let iterations = sc.iterations.min(dim);
    let mut op = |v: &[f64]| hessian_vector_product(&obj, &theta, v, sc.fd_eps);
    lanczos_spectrum(&mut op, dim, sc.k.min(iterations), iterations, sc.seed)
}

/// Per-figure CSV tables: `(file name, contents)`.
pub fn report_csvs(report: &DiagnosticsReport) -> Vec<(String, String)> {
    let mut attention = String::from("layer,token,received\n");
    for p in &report.attention {
        for (t, v) in p.received.iter().enumerate() {
            attention.push_str(&format!("{},{t},{v}\n", p.layer));
        }
    }
    let per_layer = |header: &str, values: &[f64]| {
        let mut s = format!("layer,{header}\n");
        for (l, v) in values.iter().enumerate() {
            s.push_str(&format!("{l},{v}\n"));
        }
        s
    };
    let mut out = vec![
        ("attention_mass.csv".to_string(), attention),
        (
            "inter_token_distance.csv".to_string(),
            per_layer("distance", &report.inter_token_distance),
        ),
        ("feature_variance.csv".to_string(), per_layer("variance", &report.feature_variance)),
    ];
    if let Some(s) = &report.spectrum {
        let mut csv = String::from("end,rank,value\n");
        for (i, v) in s.top.iter().enumerate() {
            csv.push_str(&format!("top,{i},{v}\n"));
        }
        for (i, v) in s.bottom.iter().enumerate() {
            csv.push_str(&format!("bottom,{i},{v}\n"));
        }
        out.push(("hessian_spectrum.csv".to_string(), csv));
    }
    out
}
