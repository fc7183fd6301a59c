//! Encoder forward pass in integer arithmetic.
//!
//! Activations are int8 with per-tensor scales; every matmul accumulates in
//! i32 and is requantized with a [`FixedRatio`]. Residual adds saturate.

use super::layernorm::{layernorm_two_pass, LnAffine};
use super::matrix::{block_matmul, bmm_block, PackedMatrix, TileAccumulator, TileMatrix};
use super::softmax::{pseudo_softmax_row, PROB_FRAC_BITS};
use super::weights::{EncoderWeights, Image, LayerWeights, QTensor};
use crate::error::{Error, Result};
use crate::packed::FixedRatio;
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LnMode {
    #[default]
    Affine,
    /// Pass activations through unchanged. Test hook.
    Identity,
}

/// Loop nesting of the MLP partial-sum iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartialSumOrder {
    /// Hidden column pairs outer, token row blocks inner.
    #[default]
    HiddenOuter,
    RowOuter,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub ln_mode: LnMode,
    pub mlp_order: PartialSumOrder,
    pub exec: Execution,
}

fn ratio(num: f64, den: f64) -> FixedRatio {
    FixedRatio::from_f64(num / den)
}

/// Converts a bias vector into accumulator units.
fn bias_to_acc(bias: &QTensor, acc_scale: f64) -> Vec<i32> {
    let r = ratio(bias.scale, acc_scale);
    bias.data
        .iter()
        .map(|&b| r.apply(b as i128).clamp(i32::MIN as i128, i32::MAX as i128) as i32)
        .collect()
}

fn rescale_i8(t: &QTensor, to: f64) -> Vec<i8> {
    let r = ratio(t.scale, to);
    t.data.iter().map(|&v| r.apply_i8(v as i128)).collect()
}

/// Requantization constants for one layer.
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub ln1: LnAffine,
    pub query: Vec<FixedRatio>,
    pub key: Vec<FixedRatio>,
    pub value: Vec<FixedRatio>,
    pub score: Vec<FixedRatio>,
    pub context: FixedRatio,
    pub attn_out: FixedRatio,
    pub ln2: LnAffine,
    pub hidden: FixedRatio,
    pub hidden_bias: Vec<i32>,
    pub mlp_out: FixedRatio,
    pub mlp_out_bias: Vec<i32>,
}

/// Every constant the integer pipeline needs, derived once from the weights.
#[derive(Debug, Clone)]
pub struct QuantPlan {
    pub embed: FixedRatio,
    /// Position embedding at the residual scale, T×D row-major.
    pub pos: Vec<i8>,
    /// `sat(class_token + pos[0])` at the residual scale.
    pub class_row: Vec<i8>,
    pub layers: Vec<LayerQuant>,
    pub final_ln: LnAffine,
}

impl QuantPlan {
    pub fn new(w: &EncoderWeights) -> Self {
        let s = &w.scales;
        let d = &w.dims;
        let pos = rescale_i8(&w.pos_embed, s.residual);
        let class_row = rescale_i8(&w.class_token, s.residual)
            .iter()
            .zip(&pos[..d.model_dim])
            .map(|(&c, &p)| c.saturating_add(p))
            .collect();
        let ln = |g: &QTensor, b: &QTensor| LnAffine::new(&g.data, g.scale, &b.data, b.scale, s.ln_out);
        let layers = w
            .layers
            .iter()
            .map(|l: &LayerWeights| {
                let proj = |ts: &[QTensor], out: f64| {
                    ts.iter().map(|t| ratio(s.ln_out * t.scale, out)).collect::<Vec<_>>()
                };
                let sqrt_dh = (d.head_dim as f64).sqrt();
                LayerQuant {
                    ln1: ln(&l.ln1_gamma, &l.ln1_beta),
                    query: proj(&l.query, s.query),
                    key: proj(&l.key, s.key),
                    value: proj(&l.value, s.value),
                    score: s
                        .score
                        .iter()
                        .map(|&sc| ratio(s.query * s.key, sqrt_dh * sc))
                        .collect(),
                    context: ratio(s.value, (1u32 << PROB_FRAC_BITS) as f64 * s.context),
                    attn_out: ratio(s.context * l.attn_out.scale, s.residual),
                    ln2: ln(&l.ln2_gamma, &l.ln2_beta),
                    hidden: ratio(s.ln_out * l.mlp_hidden.scale, s.hidden),
                    hidden_bias: bias_to_acc(&l.mlp_hidden_bias, s.ln_out * l.mlp_hidden.scale),
                    mlp_out: ratio(s.hidden * l.mlp_out.scale, s.residual),
                    mlp_out_bias: bias_to_acc(&l.mlp_out_bias, s.hidden * l.mlp_out.scale),
                }
            })
            .collect();
        QuantPlan {
            embed: ratio(s.input * w.embed.scale, s.residual),
            pos,
            class_row,
            layers,
            final_ln: ln(&w.final_gamma, &w.final_beta),
        }
    }
}

pub fn requantize(acc: &TileAccumulator, r: FixedRatio) -> TileMatrix<i8> {
    acc.map(|v| r.apply_i8(v as i128))
}

pub fn score_exponent(acc: i32, r: FixedRatio) -> i32 {
    r.apply(acc as i128).clamp(-4096, 4096) as i32
}

pub fn relu_requant(acc: i32, bias: i32, r: FixedRatio) -> i8 {
    r.apply_i8(acc as i128 + bias as i128).max(0)
}

/// Row-wise LayerNorm of a T×D matrix.
pub fn layernorm_matrix(x: &TileMatrix<i8>, affine: &LnAffine, mode: LnMode, exec: Execution) -> TileMatrix<i8> {
    if mode == LnMode::Identity {
        return x.clone();
    }
    let rows = par::map_range(0..x.rows(), exec, |r| layernorm_two_pass(x.row(r), affine));
    TileMatrix::from_fn(x.rows(), x.cols(), x.p_sys(), |r, c| rows[r][c])
}

/// Saturating elementwise add of two equally shaped int8 matrices.
pub fn residual_add(a: &TileMatrix<i8>, b: &TileMatrix<i8>) -> TileMatrix<i8> {
    TileMatrix::from_fn(a.rows(), a.cols(), a.p_sys(), |r, c| a.get(r, c).saturating_add(b.get(r, c)))
}

/// `z0`: embedded patches plus position embedding, class token in row 0.
pub fn embed(patches: &TileMatrix<i8>, w: &EncoderWeights, plan: &QuantPlan, exec: Execution) -> Result<TileMatrix<i8>> {
    let p = patches.p_sys();
    let acc = block_matmul(patches, &w.embed.matrix(p), None, exec)?;
    Ok(embed_finish(&acc, plan))
}

pub fn embed_finish(acc: &TileAccumulator, plan: &QuantPlan) -> TileMatrix<i8> {
    let d = acc.cols();
    TileMatrix::from_fn(acc.rows(), d, acc.p_sys(), |r, c| {
        if r == 0 {
            plan.class_row[c]
        } else {
            plan.embed.apply_i8(acc.get(r, c) as i128).saturating_add(plan.pos[r * d + c])
        }
    })
}

fn check_input(layer_in: &TileMatrix<i8>, w: &EncoderWeights) -> Result<()> {
    if layer_in.cols() != w.dims.model_dim {
        return Err(Error::ShapeMismatch(format!(
            "layer input has {} columns, model dim is {}",
            layer_in.cols(),
            w.dims.model_dim
        )));
    }
    Ok(())
}

/// One attention head: returns the T×D_h context at the context scale.
pub fn msa_block(
    layer_in: &TileMatrix<i8>,
    w: &EncoderWeights,
    layer: usize,
    head: usize,
    exec: Execution,
) -> Result<TileMatrix<i8>> {
    check_input(layer_in, w)?;
    let p = layer_in.p_sys();
    let lw = &w.layers[layer];
    let q_plan = &QuantPlan::new(w).layers.swap_remove(layer);
    let proj = |t: &QTensor, r: FixedRatio| -> Result<TileMatrix<i8>> {
        Ok(requantize(&block_matmul(layer_in, &t.matrix(p), None, exec)?, r))
    };
    let q = proj(&lw.query[head], q_plan.query[head])?;
    let k = proj(&lw.key[head], q_plan.key[head])?;
    let v = proj(&lw.value[head], q_plan.value[head])?;
    attention_head(&q, &k, &v, q_plan.score[head], q_plan.context, exec)
}

/// `rq(softmax(rq(Q Kᵀ)) V)` for one head.
pub fn attention_head(
    q: &TileMatrix<i8>,
    k: &TileMatrix<i8>,
    v: &TileMatrix<i8>,
    score: FixedRatio,
    context: FixedRatio,
    exec: Execution,
) -> Result<TileMatrix<i8>> {
    let s = block_matmul(q, &k.transpose(), None, exec)?;
    let t = q.rows();
    let probs = par::map_range(0..t, exec, |r| {
        let row: Vec<i32> = s.row(r).iter().map(|&a| score_exponent(a, score)).collect();
        pseudo_softmax_row(&row)
    });
    let probs = probs.into_iter().collect::<Result<Vec<_>>>()?;
    let pm = TileMatrix::from_fn(t, s.cols(), q.p_sys(), |r, c| probs[r][c]);
    Ok(requantize(&block_matmul(&pm, v, None, exec)?, context))
}

/// Multi-head attention plus output projection: the residual-scale
/// contribution `rq(Concat(heads) W^O)`.
pub fn attention(
    layer_in: &TileMatrix<i8>,
    w: &EncoderWeights,
    lq: &LayerQuant,
    layer: usize,
    exec: Execution,
) -> Result<TileMatrix<i8>> {
    check_input(layer_in, w)?;
    let p = layer_in.p_sys();
    let d = &w.dims;
    let lw = &w.layers[layer];
    let mut concat = TileMatrix::zeros(d.tokens, d.model_dim, p);
    for h in 0..d.num_heads {
        let proj = |t: &QTensor, r: FixedRatio| -> Result<TileMatrix<i8>> {
            Ok(requantize(&block_matmul(layer_in, &t.matrix(p), None, exec)?, r))
        };
        let q = proj(&lw.query[h], lq.query[h])?;
        let k = proj(&lw.key[h], lq.key[h])?;
        let v = proj(&lw.value[h], lq.value[h])?;
        let head = attention_head(&q, &k, &v, lq.score[h], lq.context, exec)?;
        concat.set_column_slice(h * d.head_dim, &head);
    }
    let acc = block_matmul(&concat, &lw.attn_out.matrix(p), None, exec)?;
    Ok(requantize(&acc, lq.attn_out))
}

struct MlpRowState {
    hidden_acc: Vec<i32>,
    m: TileMatrix<i8>,
    staged: Vec<i32>,
}

/// MLP contribution at the residual scale, computed by partial sums: each
/// activated hidden block `M_ij` is multiplied against every output column
/// pair and accumulated into a staged result that starts at the output bias.
pub fn mlp_block(
    layer_in: &TileMatrix<i8>,
    w: &EncoderWeights,
    lq: &LayerQuant,
    layer: usize,
    order: PartialSumOrder,
    exec: Execution,
) -> Result<TileMatrix<i8>> {
    check_input(layer_in, w)?;
    let p = layer_in.p_sys();
    let lw = &w.layers[layer];
    let wh = PackedMatrix::new(&lw.mlp_hidden.matrix(p));
    let wo = PackedMatrix::new(&lw.mlp_out.matrix(p));
    let (t, d, dm) = (layer_in.rows(), w.dims.model_dim, w.dims.hidden_dim);
    let dm_stride = wh.cols().div_ceil(p) * p;
    let d_stride = d.div_ceil(p) * p;
    let hidden_pairs = wh.col_pairs();
    let mut rows: Vec<MlpRowState> = (0..layer_in.row_blocks())
        .map(|i| {
            let valid = (t - i * p).min(p);
            let mut staged = vec![0; p * d_stride];
            for r in 0..valid {
                staged[r * d_stride..r * d_stride + d].copy_from_slice(&lq.mlp_out_bias);
            }
            MlpRowState {
                hidden_acc: vec![0; p * dm_stride],
                m: TileMatrix::zeros(valid, dm, p),
                staged,
            }
        })
        .collect();

    let step = |i: usize, j: usize, st: &mut MlpRowState| {
        bmm_block(layer_in, &wh, i, j, 0..d, &mut st.hidden_acc, dm_stride);
        let c_end = ((j + 1) * 2 * p).min(dm);
        for r in 0..st.m.rows() {
            for c in j * 2 * p..c_end {
                let v = relu_requant(st.hidden_acc[r * dm_stride + c], lq.hidden_bias[c], lq.hidden);
                st.m.set(r, c, v);
            }
        }
        for pair in 0..wo.col_pairs() {
            bmm_block(&st.m, &wo, 0, pair, j * 2 * p..c_end, &mut st.staged, d_stride);
        }
    };

    match order {
        PartialSumOrder::HiddenOuter => {
            for j in 0..hidden_pairs {
                par::for_each_chunk_mut(&mut rows, 1, exec, |i, st| step(i, j, &mut st[0]));
            }
        }
        PartialSumOrder::RowOuter => {
            par::for_each_chunk_mut(&mut rows, 1, exec, |i, st| {
                for j in 0..hidden_pairs {
                    step(i, j, &mut st[0]);
                }
            });
        }
    }

    Ok(TileMatrix::from_fn(t, d, p, |r, c| {
        let st = &rows[r / p];
        lq.mlp_out.apply_i8(st.staged[(r % p) * d_stride + c] as i128)
    }))
}

/// Full inference: embedding, `L` pre-norm layers, final LayerNorm.
pub fn encoder_forward(image: &Image, w: &EncoderWeights, p_sys: usize, opts: ForwardOptions) -> Result<TileMatrix<i8>> {
    let d = &w.dims;
    let patch = ((d.patch_dim / image.channels) as f64).sqrt().round() as usize;
    let patches = image.patch_matrix(patch, p_sys)?;
    if patches.rows() != d.tokens || patches.cols() != d.patch_dim {
        return Err(Error::ShapeMismatch(format!(
            "image gives {}x{} patches, model expects {}x{}",
            patches.rows(),
            patches.cols(),
            d.tokens,
            d.patch_dim
        )));
    }
    let plan = QuantPlan::new(w);
    let mut z = embed(&patches, w, &plan, opts.exec)?;
    for (l, lq) in plan.layers.iter().enumerate() {
        let ln1 = layernorm_matrix(&z, &lq.ln1, opts.ln_mode, opts.exec);
        let z_mid = residual_add(&z, &attention(&ln1, w, lq, l, opts.exec)?);
        let ln2 = layernorm_matrix(&z_mid, &lq.ln2, opts.ln_mode, opts.exec);
        z = residual_add(&z_mid, &mlp_block(&ln2, w, lq, l, opts.mlp_order, opts.exec)?);
    }
    Ok(layernorm_matrix(&z, &plan.final_ln, opts.ln_mode, opts.exec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{derive_dims, lookup_model, DerivedDims, HardwareConfig};
    use crate::functional::weights::ActivationScales;

    fn tiny_dims(t: usize, d: usize, heads: usize, hidden: usize, p: usize) -> DerivedDims {
        DerivedDims {
            num_patches: t - 1,
            tokens: t,
            model_dim: d,
            num_heads: heads,
            head_dim: d / heads,
            hidden_dim: hidden,
            patch_dim: 4,
            num_layers: 1,
            p_sys: p,
        }
    }

    fn deit_t(p: usize) -> DerivedDims {
        derive_dims(&lookup_model("deit-t").unwrap(), &HardwareConfig::with_psys(p)).unwrap()
    }

    fn random_input(t: usize, d: usize, p: usize, seed: u64) -> TileMatrix<i8> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<i8> = (0..t * d).map(|_| rng.gen_range(-90..=90)).collect();
        TileMatrix::from_dense(t, d, p, &v).unwrap()
    }

    fn dense(m: &TileMatrix<i8>) -> Vec<Vec<i64>> {
        (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as i64).collect()).collect()
    }

    fn dense_t(t: &QTensor) -> Vec<Vec<i64>> {
        let (r, c) = (t.shape[0], t.shape[1]);
        (0..r).map(|i| (0..c).map(|j| t.data[i * c + j] as i64).collect()).collect()
    }

    fn matmul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        (0..n)
            .map(|i| (0..m).map(|j| (0..k).map(|x| a[i][x] * b[x][j]).sum()).collect())
            .collect()
    }

    #[test]
    fn uniform_attention_averages_values() {
        // equal scores: each output row is the mean of the value rows
        let p = 2;
        let q = TileMatrix::from_dense(2, 1, p, &[0i8, 0]).unwrap();
        let k = TileMatrix::from_dense(2, 1, p, &[3i8, 3]).unwrap();
        let v = TileMatrix::from_dense(2, 1, p, &[10i8, 30]).unwrap();
        let out = attention_head(&q, &k, &v, FixedRatio::from_f64(1.0), FixedRatio::from_f64(1.0 / 256.0), Execution::Sequential)
            .unwrap();
        assert_eq!(out.to_dense(), vec![20, 20]);
    }

    #[test]
    fn single_head_close_to_exact_softmax() {
        let d = deit_t(32);
        let w = EncoderWeights::random(&d, 5);
        let plan = QuantPlan::new(&w);
        let lq = &plan.layers[0];
        let x = random_input(d.tokens, d.model_dim, 32, 9);
        let exec = Execution::Parallel;
        let proj = |t: &QTensor, r| requantize(&block_matmul(&x, &t.matrix(32), None, exec).unwrap(), r);
        let q = proj(&w.layers[0].query[0], lq.query[0]);
        let k = proj(&w.layers[0].key[0], lq.key[0]);
        let v = proj(&w.layers[0].value[0], lq.value[0]);
        let got = msa_block(&x, &w, 0, 0, exec).unwrap();
        assert_eq!(got, attention_head(&q, &k, &v, lq.score[0], lq.context, exec).unwrap());

        // wide reference on the same integer scores with exact base-2 softmax
        let s = matmul(&dense(&q), &dense(&k.transpose()));
        let ctx_scale = lq.context.to_f64() * 256.0;
        let (mut worst_exact, mut worst_floored) = (0f64, 0f64);
        for r in 0..d.tokens {
            let e: Vec<f64> = s[r]
                .iter()
                .map(|&a| 2f64.powi(score_exponent(a as i32, lq.score[0])))
                .collect();
            let total: f64 = e.iter().sum();
            for c in 0..d.head_dim {
                let vals = (0..d.tokens).map(|k| (e[k] / total, v.get(k, c) as f64));
                let exact: f64 = vals.clone().map(|(p, x)| p * x).sum::<f64>() * ctx_scale;
                let floored: f64 = vals.clone().map(|(p, x)| (p * 256.0).floor() / 256.0 * x).sum::<f64>() * ctx_scale;
                // each probability loses less than 2^-7 to truncation
                let bound = vals.map(|(_, x)| x.abs()).sum::<f64>() * ctx_scale / 128.0 + 1.0;
                let out = got.get(r, c) as f64;
                let err = (out - exact.clamp(-128.0, 127.0)).abs();
                assert!(err <= bound, "({r},{c}) error {err} exceeds {bound}");
                worst_exact = worst_exact.max(err);
                worst_floored = worst_floored.max((out - floored.clamp(-128.0, 127.0)).abs());
            }
        }
        // against an 8-bit truncating reference the only loss is output rounding
        // and the reciprocal's last bit
        assert!(worst_floored <= 1.5, "floored reference error {worst_floored}");
        assert!(worst_exact < 8.0, "exact reference error {worst_exact}");
    }

    #[test]
    fn heads_concat_equals_dense_projection() {
        let d = tiny_dims(5, 6, 3, 12, 2);
        let w = EncoderWeights::random(&d, 2);
        let plan = QuantPlan::new(&w);
        let lq = &plan.layers[0];
        let x = random_input(5, 6, 2, 4);
        let exec = Execution::Sequential;
        let got = attention(&x, &w, lq, 0, exec).unwrap();
        let mut concat = vec![vec![0i64; 6]; 5];
        for h in 0..3 {
            let head = msa_block(&x, &w, 0, h, exec).unwrap();
            for r in 0..5 {
                for c in 0..2 {
                    concat[r][h * 2 + c] = head.get(r, c) as i64;
                }
            }
        }
        let acc = matmul(&concat, &dense_t(&w.layers[0].attn_out));
        for r in 0..5 {
            for c in 0..6 {
                assert_eq!(got.get(r, c), lq.attn_out.apply_i8(acc[r][c] as i128));
            }
        }
    }

    #[test]
    fn mlp_zero_input_gives_output_bias() {
        let d = tiny_dims(4, 4, 1, 8, 2);
        let mut w = EncoderWeights::random(&d, 8);
        w.layers[0].mlp_hidden_bias.data.iter_mut().for_each(|b| *b = 0);
        // output scale equal to the bias scale makes requantization exact
        w.layers[0].mlp_out.scale = w.scales.residual / w.scales.hidden;
        w.layers[0].mlp_out_bias.scale = w.scales.residual;
        let plan = QuantPlan::new(&w);
        let x = TileMatrix::zeros(4, 4, 2);
        let out = mlp_block(&x, &w, &plan.layers[0], 0, PartialSumOrder::HiddenOuter, Execution::Sequential).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), w.layers[0].mlp_out_bias.data.as_slice());
        }
    }

    #[test]
    fn mlp_matches_dense_oracle() {
        for (t, dm, hidden, p) in [(4, 4, 8, 2), (7, 6, 24, 4), (33, 16, 64, 8)] {
            let d = tiny_dims(t, dm, 2, hidden, p);
            let w = EncoderWeights::random(&d, t as u64);
            let lq = &QuantPlan::new(&w).layers[0];
            let x = random_input(t, dm, p, 1);
            let lw = &w.layers[0];
            let h = matmul(&dense(&x), &dense_t(&lw.mlp_hidden));
            let m: Vec<Vec<i64>> = h
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(c, &a)| relu_requant(a as i32, lq.hidden_bias[c], lq.hidden) as i64)
                        .collect()
                })
                .collect();
            let o = matmul(&m, &dense_t(&lw.mlp_out));
            for order in [PartialSumOrder::HiddenOuter, PartialSumOrder::RowOuter] {
                for exec in [Execution::Sequential, Execution::Parallel] {
                    let got = mlp_block(&x, &w, lq, 0, order, exec).unwrap();
                    for r in 0..t {
                        for c in 0..dm {
                            let want = lq.mlp_out.apply_i8(o[r][c] as i128 + lq.mlp_out_bias[c] as i128);
                            assert_eq!(got.get(r, c), want, "{order:?} ({r},{c})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_blocks_with_identity_norm_return_embedding() {
        let d = deit_t(32);
        let w = EncoderWeights::random(&d, 1).with_zero_blocks();
        let img = Image::random(224, 3, 3);
        let opts = ForwardOptions {
            ln_mode: LnMode::Identity,
            ..Default::default()
        };
        let y = encoder_forward(&img, &w, 32, opts).unwrap();
        let plan = QuantPlan::new(&w);
        let z0 = embed(&img.patch_matrix(16, 32).unwrap(), &w, &plan, opts.exec).unwrap();
        assert_eq!(y, z0);
    }

    #[test]
    fn zero_blocks_give_normalized_embedding() {
        let d = deit_t(16);
        let mut w = EncoderWeights::random(&d, 1).with_zero_blocks();
        w.final_gamma.data.iter_mut().for_each(|g| *g = 64);
        w.final_beta.data.iter_mut().for_each(|b| *b = 0);
        let img = Image::random(224, 3, 3);
        let y = encoder_forward(&img, &w, 16, ForwardOptions::default()).unwrap();
        let plan = QuantPlan::new(&w);
        let z0 = embed(&img.patch_matrix(16, 16).unwrap(), &w, &plan, Execution::Sequential).unwrap();
        let want = layernorm_matrix(&z0, &plan.final_ln, LnMode::Affine, Execution::Sequential);
        assert_eq!(y, want);
    }

    #[test]
    fn one_layer_residuals_add_exactly() {
        let mut d = deit_t(32);
        d.num_layers = 1;
        let w = EncoderWeights::random(&d, 4);
        let img = Image::random(224, 3, 8);
        let exec = Execution::Parallel;
        let plan = QuantPlan::new(&w);
        let lq = &plan.layers[0];
        let z0 = embed(&img.patch_matrix(16, 32).unwrap(), &w, &plan, exec).unwrap();
        let a = attention(&layernorm_matrix(&z0, &lq.ln1, LnMode::Affine, exec), &w, lq, 0, exec).unwrap();
        let z1 = TileMatrix::from_fn(d.tokens, d.model_dim, 32, |r, c| {
            (z0.get(r, c) as i32 + a.get(r, c) as i32).clamp(-128, 127) as i8
        });
        let m = mlp_block(
            &layernorm_matrix(&z1, &lq.ln2, LnMode::Affine, exec),
            &w,
            lq,
            0,
            PartialSumOrder::RowOuter,
            exec,
        )
        .unwrap();
        let z2 = TileMatrix::from_fn(d.tokens, d.model_dim, 32, |r, c| {
            (z1.get(r, c) as i32 + m.get(r, c) as i32).clamp(-128, 127) as i8
        });
        let want = layernorm_matrix(&z2, &plan.final_ln, LnMode::Affine, exec);
        assert_eq!(encoder_forward(&img, &w, 32, ForwardOptions::default()).unwrap(), want);
    }

    #[test]
    fn deit_t_full_forward_shape_and_determinism() {
        let d = deit_t(32);
        let w = EncoderWeights::random(&d, 77);
        let img = Image::random(224, 3, 77);
        let y = encoder_forward(&img, &w, 32, ForwardOptions::default()).unwrap();
        assert_eq!((y.rows(), y.cols()), (197, 192));
        assert!(y.padding_is_zero());
        let seq = ForwardOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let y16 = encoder_forward(&img, &w, 16, seq).unwrap();
        assert_eq!(y.to_dense(), y16.to_dense());
        // activations should not collapse to a constant
        let distinct: std::collections::BTreeSet<i8> = y.to_dense().into_iter().collect();
        assert!(distinct.len() > 32);
    }

    #[test]
    fn scales_are_serializable() {
        let s = ActivationScales {
            input: 1.0,
            residual: 1.0,
            ln_out: 1.0,
            query: 1.0,
            key: 1.0,
            value: 1.0,
            score: vec![1.0],
            context: 1.0,
            hidden: 1.0,
        };
        let back: ActivationScales = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
