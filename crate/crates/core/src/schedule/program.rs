//! Lowering of one inference into an ordered list of steps.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{BufferKind, Mode};
use crate::config::DerivedDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Qkv {
    Query,
    Key,
    Value,
}

impl Qkv {
    pub fn name(self) -> &'static str {
        match self {
            Qkv::Query => "query",
            Qkv::Key => "key",
            Qkv::Value => "value",
        }
    }
}

/// A logical matrix product. Each identifies its operands and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatOp {
    Embed,
    Project { layer: usize, head: usize, kind: Qkv },
    Scores { layer: usize, head: usize },
    Context { layer: usize, head: usize },
    AttnOut { layer: usize },
    Hidden { layer: usize },
    MlpOut { layer: usize },
}

impl MatOp {
    /// Output rows, output columns and inner dimension.
    pub fn shape(&self, d: &DerivedDims) -> (usize, usize, usize) {
        let t = d.tokens;
        match self {
            MatOp::Embed => (t, d.model_dim, d.patch_dim),
            MatOp::Project { .. } => (t, d.head_dim, d.model_dim),
            MatOp::Scores { .. } => (t, t, d.head_dim),
            MatOp::Context { .. } => (t, d.head_dim, t),
            MatOp::AttnOut { .. } => (t, d.model_dim, d.model_dim),
            MatOp::Hidden { .. } => (t, d.hidden_dim, d.model_dim),
            MatOp::MlpOut { .. } => (t, d.model_dim, d.hidden_dim),
        }
    }

    /// Whether the right operand is a model parameter streamed from DRAM.
    pub fn has_param_operand(&self) -> bool {
        !matches!(self, MatOp::Scores { .. } | MatOp::Context { .. })
    }

    pub fn weight_tensor(&self) -> Option<String> {
        Some(match *self {
            MatOp::Embed => "embed.weight".into(),
            MatOp::Project { layer, head, kind } => format!("layers.{layer}.attn.{}.{head}", kind.name()),
            MatOp::AttnOut { layer } => format!("layers.{layer}.attn.out"),
            MatOp::Hidden { layer } => format!("layers.{layer}.mlp.hidden"),
            MatOp::MlpOut { layer } => format!("layers.{layer}.mlp.out"),
            MatOp::Scores { .. } | MatOp::Context { .. } => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn whole(rows: usize, cols: usize) -> Self {
        Block {
            row0: 0,
            col0: 0,
            rows,
            cols,
        }
    }

    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Attn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Step {
    Mode {
        mode: Mode,
        layer: Option<usize>,
    },
    Alloc {
        buffer: BufferKind,
        label: &'static str,
        entries: u64,
    },
    Free {
        buffer: BufferKind,
        label: &'static str,
    },
    /// On-chip transfer. A relocation frees the source region and claims the
    /// destination; otherwise both regions already exist.
    Move {
        from: BufferKind,
        to: BufferKind,
        label: &'static str,
        entries: u64,
        relocate: bool,
    },
    /// Off-chip read. Blocking loads hold the array until the data arrives.
    Load {
        tensor: String,
        block: Block,
        dest: BufferKind,
        blocking: bool,
    },
    Store {
        tensor: String,
        block: Block,
    },
    /// One array pass: row block against a column-block pair over `k`.
    Bmm {
        op: MatOp,
        row_block: usize,
        col_pair: usize,
        k: Range<usize>,
    },
    /// Requantize a finished row block of a projection or context product.
    Requant {
        op: MatOp,
        row_block: usize,
    },
    EmbedFinish {
        row_block: usize,
    },
    Softmax {
        layer: usize,
        head: usize,
        row_block: usize,
    },
    /// Bias add and ReLU of one hidden block; stalls the array.
    Activation {
        layer: usize,
        row_block: usize,
        hidden_pair: usize,
    },
    /// Initialize the staged MLP result with the output bias.
    StageBias {
        layer: usize,
    },
    /// Residual add followed by both LayerNorm passes for one row block.
    ResidualNorm {
        layer: usize,
        row_block: usize,
        stage: Stage,
        exposed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Program {
    pub dims: DerivedDims,
    pub steps: Vec<Step>,
}

pub(crate) struct Builder {
    d: DerivedDims,
    steps: Vec<Step>,
}

fn blocks(len: usize, size: usize) -> impl Iterator<Item = Range<usize>> {
    (0..len.div_ceil(size)).map(move |i| i * size..((i + 1) * size).min(len))
}

impl Builder {
    pub(crate) fn new(d: DerivedDims) -> Self {
        Builder { d, steps: Vec::new() }
    }

    pub(crate) fn finish(self) -> Program {
        Program {
            dims: self.d,
            steps: self.steps,
        }
    }

    fn push(&mut self, s: Step) {
        self.steps.push(s);
    }

    fn mode(&mut self, mode: Mode, layer: Option<usize>) {
        self.push(Step::Mode { mode, layer });
    }

    fn alloc(&mut self, buffer: BufferKind, label: &'static str, entries: usize) {
        self.push(Step::Alloc {
            buffer,
            label,
            entries: entries as u64,
        });
    }

    fn free(&mut self, buffer: BufferKind, label: &'static str) {
        self.push(Step::Free { buffer, label });
    }

    fn relocate(&mut self, from: BufferKind, to: BufferKind, label: &'static str, entries: usize) {
        self.push(Step::Move {
            from,
            to,
            label,
            entries: entries as u64,
            relocate: true,
        });
    }

    fn copy(&mut self, from: BufferKind, to: BufferKind, label: &'static str, entries: usize) {
        self.push(Step::Move {
            from,
            to,
            label,
            entries: entries as u64,
            relocate: false,
        });
    }

    fn stream(&mut self, tensor: String, block: Block, dest: BufferKind) {
        self.push(Step::Load {
            tensor,
            block,
            dest,
            blocking: false,
        });
    }

    /// Blocking P×P tile fetches covering `rows × cols` of a weight tensor.
    fn fetch_tiles(&mut self, tensor: &str, rows: Range<usize>, cols: Range<usize>) {
        let p = self.d.p_sys;
        for r in blocks(rows.len(), p) {
            for c in blocks(cols.len(), p) {
                self.push(Step::Load {
                    tensor: tensor.to_string(),
                    block: Block {
                        row0: rows.start + r.start,
                        col0: cols.start + c.start,
                        rows: r.len(),
                        cols: c.len(),
                    },
                    dest: BufferKind::Weight,
                    blocking: true,
                });
            }
        }
    }

    fn pair_cols(&self, pair: usize, width: usize) -> Range<usize> {
        let w = 2 * self.d.p_sys;
        pair * w..((pair + 1) * w).min(width)
    }

    /// Row blocks outer, column pairs inner, full inner dimension per pass.
    /// Weight tiles are fetched on first use by row block 0.
    fn sweep(&mut self, op: MatOp, k: Range<usize>, then: impl Fn(&mut Self, usize)) {
        let (_, cols, _) = op.shape(&self.d);
        let pairs = cols.div_ceil(2 * self.d.p_sys);
        let tensor = op.weight_tensor();
        for rb in 0..self.d.row_blocks() {
            for pair in 0..pairs {
                if rb == 0 {
                    if let Some(t) = &tensor {
                        let c = self.pair_cols(pair, cols);
                        self.fetch_tiles(t, k.clone(), c);
                    }
                }
                self.push(Step::Bmm {
                    op,
                    row_block: rb,
                    col_pair: pair,
                    k: k.clone(),
                });
            }
            then(self, rb);
        }
    }

    fn ln_params(&mut self, prefix: &str) {
        let dm = self.d.model_dim;
        for part in ["gamma", "beta"] {
            self.stream(format!("{prefix}.{part}"), Block::whole(1, dm), BufferKind::Layer);
        }
    }

    pub(crate) fn embedding(&mut self) {
        let d = self.d;
        let (t, dm) = (d.tokens, d.model_dim);
        self.mode(Mode::Embedding, None);
        self.alloc(BufferKind::Result, "result", 2 * d.p_sys * d.p_sys);
        self.alloc(BufferKind::Feature, "embed.acc", t * dm);
        let chunks: Vec<Range<usize>> = blocks(d.patch_dim, dm).collect();
        let last = chunks.len() - 1;
        for (ci, chunk) in chunks.into_iter().enumerate() {
            self.alloc(BufferKind::Layer, "input", t * chunk.len());
            self.stream(
                "input".into(),
                Block {
                    row0: 0,
                    col0: chunk.start,
                    rows: d.num_patches,
                    cols: chunk.len(),
                },
                BufferKind::Layer,
            );
            self.alloc(BufferKind::Weight, "embed.weight", chunk.len() * dm);
            let final_chunk = ci == last;
            if final_chunk {
                self.alloc(BufferKind::S1, "embed.pos", d.p_sys * dm);
                self.alloc(BufferKind::S2, "embed.class_token", dm);
                self.stream("embed.class_token".into(), Block::whole(1, dm), BufferKind::S2);
                self.ln_params("layers.0.ln1");
            }
            let p = d.p_sys;
            self.sweep(MatOp::Embed, chunk, |b, rb| {
                if final_chunk {
                    let r0 = rb * p;
                    let block = Block {
                        row0: r0,
                        col0: 0,
                        rows: (t - r0).min(p),
                        cols: dm,
                    };
                    b.stream("embed.pos".into(), block, BufferKind::S1);
                    b.push(Step::EmbedFinish { row_block: rb });
                }
            });
            if final_chunk {
                self.free(BufferKind::S2, "embed.class_token");
                self.free(BufferKind::S1, "embed.pos");
            }
            self.free(BufferKind::Weight, "embed.weight");
            self.free(BufferKind::Layer, "input");
        }
        self.free(BufferKind::Feature, "embed.acc");
        self.alloc(BufferKind::Feature, "residual", t * dm);
        self.alloc(BufferKind::Layer, "ln", t * dm);
    }

    pub(crate) fn msa(&mut self, layer: usize) {
        let d = self.d;
        let (t, dm, dh) = (d.tokens, d.model_dim, d.head_dim);
        self.mode(Mode::Msa, Some(layer));
        self.relocate(BufferKind::Feature, BufferKind::Weight, "residual", t * dm);
        self.alloc(BufferKind::Feature, "context", t * dm);
        self.alloc(BufferKind::Q, "q", d.p_sys * dh);
        self.alloc(BufferKind::S1, "scores", d.p_sys * t);
        for head in 0..d.num_heads {
            for (kind, buf, label) in [
                (Qkv::Value, BufferKind::V, "v"),
                (Qkv::Key, BufferKind::K, "k"),
            ] {
                self.alloc(BufferKind::Weight, label, dm * dh);
                self.alloc(buf, label, t * dh);
                let op = MatOp::Project { layer, head, kind };
                self.sweep(op, 0..dm, |b, rb| b.push(Step::Requant { op, row_block: rb }));
                self.free(BufferKind::Weight, label);
            }
            self.alloc(BufferKind::Weight, "q", dm * dh);
            let q_op = MatOp::Project {
                layer,
                head,
                kind: Qkv::Query,
            };
            let s_op = MatOp::Scores { layer, head };
            let c_op = MatOp::Context { layer, head };
            let score_pairs = t.div_ceil(2 * d.p_sys);
            let ctx_pairs = dh.div_ceil(2 * d.p_sys);
            let q_pairs = ctx_pairs;
            for rb in 0..d.row_blocks() {
                for pair in 0..q_pairs {
                    if rb == 0 {
                        let c = self.pair_cols(pair, dh);
                        self.fetch_tiles(&q_op.weight_tensor().unwrap(), 0..dm, c);
                    }
                    self.push(Step::Bmm {
                        op: q_op,
                        row_block: rb,
                        col_pair: pair,
                        k: 0..dm,
                    });
                }
                self.push(Step::Requant { op: q_op, row_block: rb });
                for pair in 0..score_pairs {
                    self.push(Step::Bmm {
                        op: s_op,
                        row_block: rb,
                        col_pair: pair,
                        k: 0..dh,
                    });
                }
                self.push(Step::Softmax { layer, head, row_block: rb });
                for pair in 0..ctx_pairs {
                    self.push(Step::Bmm {
                        op: c_op,
                        row_block: rb,
                        col_pair: pair,
                        k: 0..t,
                    });
                }
                self.push(Step::Requant { op: c_op, row_block: rb });
            }
            self.free(BufferKind::Weight, "q");
            self.free(BufferKind::V, "v");
            self.free(BufferKind::K, "k");
        }
        self.free(BufferKind::S1, "scores");
        self.free(BufferKind::Q, "q");
        self.free(BufferKind::Layer, "ln");
        self.relocate(BufferKind::Weight, BufferKind::Layer, "residual", t * dm);
    }

    /// Output projection of attention with the residual add and LayerNorm
    /// fused into each row block.
    pub(crate) fn lp(&mut self, layer: usize) {
        let d = self.d;
        let (t, dm) = (d.tokens, d.model_dim);
        self.mode(Mode::Lp, Some(layer));
        self.alloc(BufferKind::Weight, "attn.out", dm * dm);
        self.alloc(BufferKind::S1, "sum", d.p_sys * dm);
        self.ln_params(&format!("layers.{layer}.ln2"));
        self.sweep(MatOp::AttnOut { layer }, 0..dm, |b, rb| {
            b.push(Step::ResidualNorm {
                layer,
                row_block: rb,
                stage: Stage::Attn,
                exposed: false,
            })
        });
        self.free(BufferKind::S1, "sum");
        self.free(BufferKind::Weight, "attn.out");
        // context rows now hold z', residual rows hold LN(z')
        self.free(BufferKind::Feature, "context");
        self.free(BufferKind::Layer, "residual");
        self.alloc(BufferKind::Feature, "residual", t * dm);
        self.alloc(BufferKind::Layer, "ln", t * dm);
    }

    pub(crate) fn mlp(&mut self, layer: usize) {
        let d = self.d;
        let (t, dm, dh, p) = (d.tokens, d.model_dim, d.hidden_dim, d.p_sys);
        let last_layer = layer + 1 == d.num_layers;
        self.mode(Mode::Mlp, Some(layer));
        self.relocate(BufferKind::Feature, BufferKind::Weight, "residual", t * dm);
        self.alloc(BufferKind::Feature, "staged", t * dm);
        self.stream(
            format!("layers.{layer}.mlp.out_bias"),
            Block::whole(1, dm),
            BufferKind::Feature,
        );
        self.push(Step::StageBias { layer });
        self.alloc(BufferKind::Q, "m", 2 * p * p);
        self.alloc(BufferKind::S1, "partial", p * dm);
        self.alloc(BufferKind::S2, "partial", p * dm);
        let hidden = MatOp::Hidden { layer };
        let out = MatOp::MlpOut { layer };
        let wh = hidden.weight_tensor().unwrap();
        let wo = out.weight_tensor().unwrap();
        let out_pairs = dm.div_ceil(2 * p);
        for j in 0..dh.div_ceil(2 * p) {
            let jc = self.pair_cols(j, dh);
            self.alloc(BufferKind::Weight, "mlp.hidden", dm * jc.len());
            self.alloc(BufferKind::Weight, "mlp.out", jc.len() * dm);
            self.stream(
                format!("layers.{layer}.mlp.hidden_bias"),
                Block {
                    row0: 0,
                    col0: jc.start,
                    rows: 1,
                    cols: jc.len(),
                },
                BufferKind::Weight,
            );
            for rb in 0..d.row_blocks() {
                if rb == 0 {
                    self.fetch_tiles(&wh, 0..dm, jc.clone());
                }
                self.push(Step::Bmm {
                    op: hidden,
                    row_block: rb,
                    col_pair: j,
                    k: 0..dm,
                });
                self.push(Step::Activation {
                    layer,
                    row_block: rb,
                    hidden_pair: j,
                });
                let s = if rb % 2 == 0 { BufferKind::S1 } else { BufferKind::S2 };
                let rows = (t - rb * p).min(p);
                self.copy(BufferKind::Feature, s, "partial", rows * dm);
                for q in 0..out_pairs {
                    if rb == 0 {
                        let c = self.pair_cols(q, dm);
                        self.fetch_tiles(&wo, jc.clone(), c);
                    }
                    self.push(Step::Bmm {
                        op: out,
                        row_block: rb,
                        col_pair: q,
                        k: jc.clone(),
                    });
                }
                self.copy(s, BufferKind::Feature, "partial", rows * dm);
            }
            self.free(BufferKind::Weight, "mlp.out");
            self.free(BufferKind::Weight, "mlp.hidden");
        }
        self.free(BufferKind::S2, "partial");
        self.free(BufferKind::S1, "partial");
        self.free(BufferKind::Q, "m");
        if last_layer {
            self.mode(Mode::FinalLn, None);
            self.ln_params("final_ln");
        } else {
            self.ln_params(&format!("layers.{}.ln1", layer + 1));
        }
        self.free(BufferKind::Layer, "ln");
        self.relocate(BufferKind::Weight, BufferKind::Layer, "residual", t * dm);
        for rb in 0..d.row_blocks() {
            self.push(Step::ResidualNorm {
                layer,
                row_block: rb,
                stage: Stage::Mlp,
                exposed: true,
            });
        }
        self.free(BufferKind::Feature, "staged");
        self.free(BufferKind::Layer, "residual");
        self.alloc(BufferKind::Feature, "residual", t * dm);
        self.alloc(BufferKind::Layer, "ln", t * dm);
        if last_layer {
            for rb in 0..d.row_blocks() {
                let r0 = rb * p;
                self.push(Step::Store {
                    tensor: "output".into(),
                    block: Block {
                        row0: r0,
                        col0: 0,
                        rows: (t - r0).min(p),
                        cols: dm,
                    },
                });
            }
            self.free(BufferKind::Layer, "ln");
            self.free(BufferKind::Feature, "residual");
            self.free(BufferKind::Result, "result");
        }
    }

    /// Buffer contents a mode expects on entry, for running modes alone.
    pub(crate) fn preamble(&mut self, mode: Mode) {
        let d = self.d;
        let (t, dm) = (d.tokens, d.model_dim);
        self.alloc(BufferKind::Result, "result", 2 * d.p_sys * d.p_sys);
        match mode {
            Mode::Lp => {
                self.alloc(BufferKind::Feature, "context", t * dm);
                self.alloc(BufferKind::Layer, "residual", t * dm);
            }
            _ => {
                self.alloc(BufferKind::Feature, "residual", t * dm);
                self.alloc(BufferKind::Layer, "ln", t * dm);
            }
        }
    }
}

/// Embedding, then MSA, LP and MLP for each layer; the last MLP
/// ends with the final LayerNorm and the output store.
pub fn inference_program(d: &DerivedDims) -> Program {
    let mut b = Builder::new(*d);
    b.embedding();
    for layer in 0..d.num_layers {
        b.msa(layer);
        b.lp(layer);
        b.mlp(layer);
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{derive_dims, lookup_model, HardwareConfig};

    fn dims(name: &str, p: usize) -> DerivedDims {
        derive_dims(&lookup_model(name).unwrap(), &HardwareConfig::with_psys(p)).unwrap()
    }

    #[test]
    fn block_ranges() {
        let v: Vec<_> = blocks(197, 64).collect();
        assert_eq!(v, vec![0..64, 64..128, 128..192, 192..197]);
        assert_eq!(blocks(64, 64).count(), 1);
    }

    #[test]
    fn every_weight_tile_fetched_once() {
        let d = dims("deit-s", 32);
        let prog = inference_program(&d);
        let mut seen = std::collections::HashSet::new();
        for s in &prog.steps {
            if let Step::Load { tensor, block, .. } = s {
                assert!(seen.insert((tensor.clone(), *block)), "{tensor} {block:?}");
            }
        }
    }

    #[test]
    fn op_shapes() {
        let d = dims("deit-b", 32);
        assert_eq!(MatOp::Embed.shape(&d), (197, 768, 768));
        assert_eq!(MatOp::Scores { layer: 0, head: 0 }.shape(&d), (197, 197, 64));
        assert_eq!(MatOp::Hidden { layer: 0 }.shape(&d), (197, 3072, 768));
        assert!(!MatOp::Context { layer: 0, head: 0 }.has_param_operand());
        assert_eq!(MatOp::AttnOut { layer: 3 }.weight_tensor().unwrap(), "layers.3.attn.out");
    }
}
