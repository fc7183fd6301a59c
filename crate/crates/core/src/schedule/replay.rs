//! Executes a step program on real data.
//!
//! Every BMM pass, requantization, softmax and LayerNorm happens at the row
//! block and the point in the stream where the schedule places it. Operands
//! captured before their producers finish would show up as a mismatch against
//! the functional model.

use std::collections::HashMap;

use super::program::{MatOp, Program, Qkv, Stage, Step};
use crate::error::{Error, Result};
use crate::functional::encoder::{embed_finish, relu_requant, requantize, score_exponent, QuantPlan};
use crate::functional::layernorm::{layernorm_two_pass, LnAffine};
use crate::functional::matrix::{bmm_block, PackedMatrix, TileAccumulator, TileMatrix};
use crate::functional::softmax::pseudo_softmax_row;
use crate::functional::weights::{EncoderWeights, Image};

struct State<'a> {
    w: &'a EncoderWeights,
    plan: QuantPlan,
    p: usize,
    patches: TileMatrix<i8>,
    z: TileMatrix<i8>,
    ln: TileMatrix<i8>,
    context: TileMatrix<i8>,
    hidden: TileMatrix<i8>,
    heads: HashMap<(usize, usize, Qkv), TileMatrix<i8>>,
    probs: HashMap<(usize, usize), TileMatrix<u16>>,
    accs: HashMap<MatOp, TileAccumulator>,
    packed: HashMap<MatOp, PackedMatrix>,
}

fn copy_rows<T: crate::functional::matrix::Element>(dst: &mut TileMatrix<T>, src: &TileMatrix<T>, rb: usize, col0: usize) {
    let p = src.p_sys();
    for r in rb * p..((rb + 1) * p).min(src.rows()) {
        for c in 0..src.cols() {
            dst.set(r, col0 + c, src.get(r, c));
        }
    }
}

impl<'a> State<'a> {
    fn rows(&self, rb: usize) -> std::ops::Range<usize> {
        rb * self.p..((rb + 1) * self.p).min(self.w.dims.tokens)
    }

    fn right_operand(&self, op: MatOp) -> Result<TileMatrix<i8>> {
        let lw = |l: usize| &self.w.layers[l];
        Ok(match op {
            MatOp::Embed => self.w.embed.matrix(self.p),
            MatOp::Project { layer, head, kind } => {
                let l = lw(layer);
                match kind {
                    Qkv::Query => &l.query[head],
                    Qkv::Key => &l.key[head],
                    Qkv::Value => &l.value[head],
                }
                .matrix(self.p)
            }
            MatOp::Scores { layer, head } => self.head(layer, head, Qkv::Key)?.transpose(),
            MatOp::Context { layer, head } => self.head(layer, head, Qkv::Value)?.clone(),
            MatOp::AttnOut { layer } => lw(layer).attn_out.matrix(self.p),
            MatOp::Hidden { layer } => lw(layer).mlp_hidden.matrix(self.p),
            MatOp::MlpOut { layer } => lw(layer).mlp_out.matrix(self.p),
        })
    }

    fn head(&self, layer: usize, head: usize, kind: Qkv) -> Result<&TileMatrix<i8>> {
        self.heads
            .get(&(layer, head, kind))
            .ok_or_else(|| Error::ScheduleConflict(format!("{kind:?} of head {head} used before it was produced")))
    }

    fn acc(&mut self, op: MatOp) -> &mut TileAccumulator {
        let (rows, cols, _) = op.shape(&self.w.dims);
        let p = self.p;
        self.accs.entry(op).or_insert_with(|| TileAccumulator::zeros(rows, cols, p))
    }

    fn taken_acc(&self, op: MatOp) -> Result<&TileAccumulator> {
        self.accs
            .get(&op)
            .ok_or_else(|| Error::ScheduleConflict(format!("{op:?} consumed before any pass ran")))
    }

    fn bmm(&mut self, op: MatOp, rb: usize, pair: usize, k: std::ops::Range<usize>) -> Result<()> {
        if !self.packed.contains_key(&op) {
            let b = self.right_operand(op)?;
            self.packed.insert(op, PackedMatrix::new(&b));
        }
        self.acc(op);
        let State {
            accs,
            packed,
            patches,
            ln,
            context,
            hidden,
            heads,
            probs,
            ..
        } = self;
        let b = &packed[&op];
        let (slab, stride) = accs.get_mut(&op).expect("created above").row_block_slab(rb);
        match op {
            MatOp::Embed => bmm_block(patches, b, rb, pair, k, slab, stride),
            MatOp::Project { .. } | MatOp::Hidden { .. } => bmm_block(ln, b, rb, pair, k, slab, stride),
            MatOp::Scores { layer, head } => {
                let q = heads
                    .get(&(layer, head, Qkv::Query))
                    .ok_or_else(|| Error::ScheduleConflict("scores before query".into()))?;
                bmm_block(q, b, rb, pair, k, slab, stride)
            }
            MatOp::Context { layer, head } => {
                let pm = probs
                    .get(&(layer, head))
                    .ok_or_else(|| Error::ScheduleConflict("context before softmax".into()))?;
                bmm_block(pm, b, rb, pair, k, slab, stride)
            }
            MatOp::AttnOut { .. } => bmm_block(context, b, rb, pair, k, slab, stride),
            MatOp::MlpOut { .. } => bmm_block(hidden, b, rb, pair, k, slab, stride),
        }
        Ok(())
    }

    fn step(&mut self, s: &Step) -> Result<()> {
        let d = self.w.dims;
        let p = self.p;
        match s {
            Step::Bmm {
                op,
                row_block,
                col_pair,
                k,
            } => self.bmm(*op, *row_block, *col_pair, k.clone())?,
            Step::Requant { op, row_block } => {
                let lq = |l: usize| &self.plan.layers[l];
                match *op {
                    MatOp::Project { layer, head, kind } => {
                        let r = match kind {
                            Qkv::Query => lq(layer).query[head],
                            Qkv::Key => lq(layer).key[head],
                            Qkv::Value => lq(layer).value[head],
                        };
                        let out = requantize(self.taken_acc(*op)?, r);
                        let dst = self
                            .heads
                            .entry((layer, head, kind))
                            .or_insert_with(|| TileMatrix::zeros(d.tokens, d.head_dim, p));
                        copy_rows(dst, &out, *row_block, 0);
                    }
                    MatOp::Context { layer, head } => {
                        let out = requantize(self.taken_acc(*op)?, lq(layer).context);
                        copy_rows(&mut self.context, &out, *row_block, head * d.head_dim);
                    }
                    other => return Err(Error::ScheduleConflict(format!("requantize of {other:?}"))),
                }
            }
            Step::EmbedFinish { row_block } => {
                let z0 = embed_finish(self.taken_acc(MatOp::Embed)?, &self.plan);
                copy_rows(&mut self.z, &z0, *row_block, 0);
                let affine = self.plan.layers[0].ln1.clone();
                self.normalize_rows(*row_block, &affine);
            }
            Step::Softmax { layer, head, row_block } => {
                let op = MatOp::Scores {
                    layer: *layer,
                    head: *head,
                };
                let ratio = self.plan.layers[*layer].score[*head];
                let rows = self.rows(*row_block);
                let mut out = Vec::with_capacity(rows.len());
                {
                    let acc = self.taken_acc(op)?;
                    for r in rows.clone() {
                        let scores: Vec<i32> = acc.row(r).iter().map(|&a| score_exponent(a, ratio)).collect();
                        out.push(pseudo_softmax_row(&scores)?);
                    }
                }
                let pm = self
                    .probs
                    .entry((*layer, *head))
                    .or_insert_with(|| TileMatrix::zeros(d.tokens, d.tokens, p));
                for (r, row) in rows.zip(out) {
                    pm.row_mut(r)[..row.len()].copy_from_slice(&row);
                }
            }
            Step::Activation {
                layer,
                row_block,
                hidden_pair,
            } => {
                let op = MatOp::Hidden { layer: *layer };
                let lq = &self.plan.layers[*layer];
                let c0 = hidden_pair * 2 * p;
                let c1 = (c0 + 2 * p).min(d.hidden_dim);
                let rows = self.rows(*row_block);
                let acc = self
                    .accs
                    .get(&op)
                    .ok_or_else(|| Error::ScheduleConflict("activation before hidden pass".into()))?;
                for r in rows {
                    for c in c0..c1 {
                        let v = relu_requant(acc.get(r, c), lq.hidden_bias[c], lq.hidden);
                        self.hidden.set(r, c, v);
                    }
                }
            }
            Step::StageBias { layer } => {
                let bias = self.plan.layers[*layer].mlp_out_bias.clone();
                let acc = self.acc(MatOp::MlpOut { layer: *layer });
                for r in 0..d.tokens {
                    acc.row_mut(r).copy_from_slice(&bias);
                }
            }
            Step::ResidualNorm {
                layer,
                row_block,
                stage,
                ..
            } => {
                let lq = &self.plan.layers[*layer];
                let (op, ratio) = match stage {
                    Stage::Attn => (MatOp::AttnOut { layer: *layer }, lq.attn_out),
                    Stage::Mlp => (MatOp::MlpOut { layer: *layer }, lq.mlp_out),
                };
                let affine = match stage {
                    Stage::Attn => lq.ln2.clone(),
                    Stage::Mlp if layer + 1 < d.num_layers => self.plan.layers[layer + 1].ln1.clone(),
                    Stage::Mlp => self.plan.final_ln.clone(),
                };
                let rows = self.rows(*row_block);
                let acc = self.taken_acc(op)?;
                let add: Vec<Vec<i8>> = rows
                    .clone()
                    .map(|r| acc.row(r).iter().map(|&a| ratio.apply_i8(a as i128)).collect())
                    .collect();
                for (r, a) in rows.zip(add) {
                    for (z, v) in self.z.row_mut(r).iter_mut().zip(a) {
                        *z = z.saturating_add(v);
                    }
                }
                self.normalize_rows(*row_block, &affine);
            }
            // the final LayerNorm still consumes the last MLP result
            Step::Mode {
                mode: super::Mode::FinalLn,
                ..
            } => {}
            Step::Mode { .. } => {
                self.packed.clear();
                self.accs.clear();
                self.heads.clear();
                self.probs.clear();
            }
            Step::Alloc { .. } | Step::Free { .. } | Step::Move { .. } | Step::Load { .. } | Step::Store { .. } => {}
        }
        Ok(())
    }

    fn normalize_rows(&mut self, rb: usize, affine: &LnAffine) {
        for r in self.rows(rb) {
            let out = layernorm_two_pass(self.z.row(r), affine);
            self.ln.row_mut(r).copy_from_slice(&out);
        }
    }
}

/// Runs `program` on `image` and returns the final normalized activations.
pub fn replay_numeric(program: &Program, w: &EncoderWeights, image: &Image) -> Result<TileMatrix<i8>> {
    let d = program.dims;
    if w.dims.tokens != d.tokens || w.dims.model_dim != d.model_dim || w.dims.num_layers != d.num_layers {
        return Err(Error::ShapeMismatch("weights do not match the program".into()));
    }
    let p = d.p_sys;
    let patch = ((d.patch_dim / image.channels) as f64).sqrt().round() as usize;
    let mut st = State {
        w,
        plan: QuantPlan::new(w),
        p,
        patches: image.patch_matrix(patch, p)?,
        z: TileMatrix::zeros(d.tokens, d.model_dim, p),
        ln: TileMatrix::zeros(d.tokens, d.model_dim, p),
        context: TileMatrix::zeros(d.tokens, d.model_dim, p),
        hidden: TileMatrix::zeros(d.tokens, d.hidden_dim, p),
        heads: HashMap::new(),
        probs: HashMap::new(),
        accs: HashMap::new(),
        packed: HashMap::new(),
    };
    for s in &program.steps {
        st.step(s)?;
    }
    Ok(st.ln)
}
