//! Encoder parameters, the seeded generator, and the on-disk format: one flat
//! little-endian int8 blob plus a JSON sidecar listing name, shape, scale and
//! byte offset of every tensor.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::TileMatrix;
use crate::config::DerivedDims;
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "mevit-int8-le/1";

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub data: Vec<i8>,
}

impl QTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self, p_sys: usize) -> TileMatrix<i8> {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => panic!("tensor {} has rank {}", self.name, other.len()),
        };
        TileMatrix::from_dense(rows, cols, p_sys, &self.data).expect("shape checked at load")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: QTensor,
    pub ln1_beta: QTensor,
    pub query: Vec<QTensor>,
    pub key: Vec<QTensor>,
    pub value: Vec<QTensor>,
    pub attn_out: QTensor,
    pub ln2_gamma: QTensor,
    pub ln2_beta: QTensor,
    pub mlp_hidden: QTensor,
    pub mlp_hidden_bias: QTensor,
    pub mlp_out: QTensor,
    pub mlp_out_bias: QTensor,
}

/// Requantization targets for activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationScales {
    pub input: f64,
    pub residual: f64,
    pub ln_out: f64,
    pub query: f64,
    pub key: f64,
    pub value: f64,
    /// Score units per head, before the base-2 exponent.
    pub score: Vec<f64>,
    pub context: f64,
    pub hidden: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub dims: DerivedDims,
    pub embed: QTensor,
    pub class_token: QTensor,
    pub pos_embed: QTensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: QTensor,
    pub final_beta: QTensor,
    pub scales: ActivationScales,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn bytes(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

fn info(name: String, shape: &[usize]) -> TensorInfo {
    TensorInfo {
        name,
        shape: shape.to_vec(),
    }
}

/// Every parameter tensor of a model in load order.
pub fn param_manifest(d: &DerivedDims) -> Vec<TensorInfo> {
    let (dm, dh, hd) = (d.model_dim, d.head_dim, d.hidden_dim);
    let mut out = vec![
        info("embed.weight".into(), &[d.patch_dim, dm]),
        info("embed.class_token".into(), &[dm]),
        info("embed.pos".into(), &[d.tokens, dm]),
    ];
    for l in 0..d.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(info(p("ln1.gamma"), &[dm]));
        out.push(info(p("ln1.beta"), &[dm]));
        for kind in ["query", "key", "value"] {
            for h in 0..d.num_heads {
                out.push(info(p(&format!("attn.{kind}.{h}")), &[dm, dh]));
            }
        }
        out.push(info(p("attn.out"), &[dm, dm]));
        out.push(info(p("ln2.gamma"), &[dm]));
        out.push(info(p("ln2.beta"), &[dm]));
        out.push(info(p("mlp.hidden"), &[dm, hd]));
        out.push(info(p("mlp.hidden_bias"), &[hd]));
        out.push(info(p("mlp.out"), &[hd, dm]));
        out.push(info(p("mlp.out_bias"), &[dm]));
    }
    out.push(info("final_ln.gamma".into(), &[dm]));
    out.push(info("final_ln.beta".into(), &[dm]));
    out
}

pub fn param_bytes(d: &DerivedDims) -> u64 {
    param_manifest(d).iter().map(TensorInfo::bytes).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub dims: DerivedDims,
    pub activation_scales: ActivationScales,
    pub tensors: Vec<ManifestEntry>,
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn tensor(&mut self, info: TensorInfo, scale: f64, lo: i8, hi: i8) -> QTensor {
        let n = info.bytes() as usize;
        let data = (0..n).map(|_| self.rng.gen_range(lo..=hi)).collect();
        QTensor {
            name: info.name,
            shape: info.shape,
            scale,
            data,
        }
    }
}

/// Std of the uniform integer distribution used for matrices.
const WEIGHT_RANGE: i8 = 64;

fn weight_scale(fan_in: usize) -> f64 {
    let std = WEIGHT_RANGE as f64 / 3f64.sqrt();
    1.0 / (std * (fan_in as f64).sqrt())
}

impl EncoderWeights {
    /// Reproducible random parameters with unit-variance-preserving scales.
    pub fn random(dims: &DerivedDims, seed: u64) -> Self {
        let mut g = Gen {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let scales = ActivationScales {
            input: 1.0 / 64.0,
            residual: 1.0 / 16.0,
            ln_out: 1.0 / 32.0,
            query: 1.0 / 32.0,
            key: 1.0 / 32.0,
            value: 1.0 / 32.0,
            score: vec![1.0; dims.num_heads],
            context: 1.0 / 32.0,
            hidden: 1.0 / 32.0,
        };
        let mut manifest = param_manifest(dims).into_iter();
        let mut next = |g: &mut Gen, scale: f64, lo: i8, hi: i8| {
            let info = manifest.next().expect("manifest order");
            g.tensor(info, scale, lo, hi)
        };
        let w = WEIGHT_RANGE;
        let embed = next(&mut g, weight_scale(dims.patch_dim), -w, w);
        let class_token = next(&mut g, scales.residual, -16, 16);
        let pos_embed = next(&mut g, scales.residual, -16, 16);
        let mut layers = Vec::with_capacity(dims.num_layers);
        for _ in 0..dims.num_layers {
            let ln1_gamma = next(&mut g, 1.0 / 64.0, 48, 80);
            let ln1_beta = next(&mut g, 1.0 / 32.0, -8, 8);
            let mut heads = |g: &mut Gen| {
                (0..dims.num_heads)
                    .map(|_| next(g, weight_scale(dims.model_dim), -w, w))
                    .collect::<Vec<_>>()
            };
            let query = heads(&mut g);
            let key = heads(&mut g);
            let value = heads(&mut g);
            layers.push(LayerWeights {
                ln1_gamma,
                ln1_beta,
                query,
                key,
                value,
                attn_out: next(&mut g, weight_scale(dims.model_dim), -w, w),
                ln2_gamma: next(&mut g, 1.0 / 64.0, 48, 80),
                ln2_beta: next(&mut g, 1.0 / 32.0, -8, 8),
                mlp_hidden: next(&mut g, weight_scale(dims.model_dim), -w, w),
                mlp_hidden_bias: next(&mut g, 1.0 / 32.0, -16, 16),
                mlp_out: next(&mut g, weight_scale(dims.hidden_dim), -w, w),
                mlp_out_bias: next(&mut g, 1.0 / 32.0, -16, 16),
            });
        }
        let final_gamma = next(&mut g, 1.0 / 64.0, 48, 80);
        let final_beta = next(&mut g, 1.0 / 32.0, -8, 8);
        EncoderWeights {
            dims: *dims,
            embed,
            class_token,
            pos_embed,
            layers,
            final_gamma,
            final_beta,
            scales,
        }
    }

    /// Same model with every attention and MLP parameter zeroed.
    pub fn with_zero_blocks(mut self) -> Self {
        for layer in &mut self.layers {
            for t in layer
                .query
                .iter_mut()
                .chain(layer.key.iter_mut())
                .chain(layer.value.iter_mut())
                .chain([
                    &mut layer.attn_out,
                    &mut layer.mlp_hidden,
                    &mut layer.mlp_hidden_bias,
                    &mut layer.mlp_out,
                    &mut layer.mlp_out_bias,
                ])
            {
                t.data.iter_mut().for_each(|v| *v = 0);
            }
        }
        self
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&QTensor> {
        let mut out = vec![&self.embed, &self.class_token, &self.pos_embed];
        for l in &self.layers {
            out.push(&l.ln1_gamma);
            out.push(&l.ln1_beta);
            out.extend(l.query.iter());
            out.extend(l.key.iter());
            out.extend(l.value.iter());
            out.push(&l.attn_out);
            out.push(&l.ln2_gamma);
            out.push(&l.ln2_beta);
            out.push(&l.mlp_hidden);
            out.push(&l.mlp_hidden_bias);
            out.push(&l.mlp_out);
            out.push(&l.mlp_out_bias);
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut QTensor> {
        let mut out = vec![&mut self.embed, &mut self.class_token, &mut self.pos_embed];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.extend(l.query.iter_mut());
            out.extend(l.key.iter_mut());
            out.extend(l.value.iter_mut());
            out.push(&mut l.attn_out);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
            out.push(&mut l.mlp_hidden);
            out.push(&mut l.mlp_hidden_bias);
            out.push(&mut l.mlp_out);
            out.push(&mut l.mlp_out_bias);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn total_bytes(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    pub fn manifest(&self) -> WeightsManifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    scale: t.scale,
                    offset,
                };
                offset += t.len() as u64;
                e
            })
            .collect();
        WeightsManifest {
            format: WEIGHTS_FORMAT.to_string(),
            dims: self.dims,
            activation_scales: self.scales.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().map(|&v| v as u8))
            .collect()
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        fs::write(stem.with_extension("bin"), self.to_bytes())?;
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: WeightsManifest =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        let blob = fs::read(stem.with_extension("bin"))?;
        Self::from_parts(&manifest, &blob)
    }

    pub fn from_parts(manifest: &WeightsManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != WEIGHTS_FORMAT {
            return Err(Error::Weights(format!("unsupported format `{}`", manifest.format)));
        }
        let expected = param_manifest(&manifest.dims);
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Weights(format!(
                "{} tensors listed, model needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        // shapes come from the manifest; start from zeros and fill in place
        let mut w = EncoderWeights::random(&manifest.dims, 0);
        w.scales = manifest.activation_scales.clone();
        if w.scales.score.len() != manifest.dims.num_heads {
            return Err(Error::Weights("one score scale per head required".into()));
        }
        for ((slot, entry), want) in w.tensors_mut().into_iter().zip(&manifest.tensors).zip(&expected) {
            if entry.name != want.name || entry.shape != want.shape {
                return Err(Error::Weights(format!(
                    "expected {} {:?}, found {} {:?}",
                    want.name, want.shape, entry.name, entry.shape
                )));
            }
            if !(entry.scale > 0.0 && entry.scale.is_finite()) {
                return Err(Error::Weights(format!("{}: scale must be positive", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + want.bytes() as usize;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Weights(format!("{}: blob too short", entry.name)))?;
            slot.scale = entry.scale;
            slot.data = bytes.iter().map(|&b| b as i8).collect();
        }
        Ok(w)
    }
}

/// Quantized input image, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<i8>,
}

impl Image {
    pub fn random(size: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a9e);
        Image {
            size,
            channels,
            data: (0..size * size * channels).map(|_| rng.gen()).collect(),
        }
    }

    pub fn zeros(size: usize, channels: usize) -> Self {
        Image {
            size,
            channels,
            data: vec![0; size * size * channels],
        }
    }

    /// Token matrix fed to the embedding: row 0 is the class position (all
    /// zero), rows 1.. are patches flattened as (row, col, channel).
    pub fn patch_matrix(&self, patch: usize, p_sys: usize) -> Result<TileMatrix<i8>> {
        if !self.size.is_multiple_of(patch) || self.data.len() != self.size * self.size * self.channels {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} with patch {patch}",
                self.size, self.size, self.channels
            )));
        }
        let side = self.size / patch;
        let pd = patch * patch * self.channels;
        let mut m = TileMatrix::zeros(side * side + 1, pd, p_sys);
        for py in 0..side {
            for px in 0..side {
                let row = m.row_mut(1 + py * side + px);
                let mut i = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((py * patch + y) * self.size + px * patch + x) * self.channels;
                        row[i..i + self.channels].copy_from_slice(&self.data[base..base + self.channels]);
                        i += self.channels;
                    }
                }
            }
        }
        Ok(m)
    }
}
