//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough saved state
//! to compute a vector-Jacobian product. `backward` walks the nodes in
//! reverse creation order, so gradients of values used several times are
//! summed before they are propagated further.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::gemm::{gemm, gemm_strided};
use crate::layers::Activation;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        b: Var,
    },
    AddSeqBias {
        x: Var,
        b: Var,
        len: usize,
    },
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        len: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Im2Col {
        x: Var,
        batch: usize,
        len: usize,
        ch: usize,
        kernel: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatLast {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    AvgPool2 {
        x: Var,
        ch: usize,
    },
    Upsample2 {
        x: Var,
        ch: usize,
    },
    Reshape(Var),
    Sum(Var),
    WrappedAngleSq {
        pred: Var,
        delta: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter bound on the tape, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(move |(id, v)| self.grads[v.0].as_deref().map(|g| (*id, g)))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(NnError::shape(
                "constant",
                format!("{shape:?}"),
                &[value.len()],
            ));
        }
        Ok(self.push(value, shape, Op::Constant))
    }

    /// Binds a parameter onto the tape; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    fn check_same(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(
                what,
                format!("{:?}", self.shape(a)),
                self.shape(b),
            ));
        }
        Ok(())
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = last_dim(&sa);
        if sb.len() != 2 || sb[0] != k {
            return Err(NnError::shape("matmul", format!("[{k}, n]"), &sb));
        }
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b)))
    }

    /// Adds a `[c]` vector to every row of `[.., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = last_dim(self.shape(x));
        if self.shape(b) != [c] {
            return Err(NnError::shape("add_bias", format!("[{c}]"), self.shape(b)));
        }
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c)
            .for_each(|row| row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b));
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias { x, b }))
    }

    /// `[b, l, c] + [b, c]` broadcast over the sequence axis.
    pub fn add_seq_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(b) != [sx[0], sx[2]] {
            return Err(NnError::shape(
                "add_seq_bias",
                format!("[{}, {}]", sx[0], sx[2]),
                self.shape(b),
            ));
        }
        let (len, c) = (sx[1], sx[2]);
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let bi = i / len;
            row.iter_mut()
                .zip(&bv[bi * c..(bi + 1) * c])
                .for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, sx, Op::AddSeqBias { x, b, len }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(out, self.shape(x).to_vec(), Op::Scale(x, s))
    }

    /// Elementwise product with a constant (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(NnError::shape(
                "mul_const",
                format!("{:?}", self.shape(x)),
                &[c.len()],
            ));
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::MulConst(x, c)))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).iter().map(|&v| act.apply(v)).collect();
        self.push(out, self.shape(x).to_vec(), Op::Act(x, act))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[c]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = last_dim(self.shape(x));
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(NnError::shape(
                    "layer_norm",
                    format!("[{c}]"),
                    self.shape(p),
                ));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % c] + b[i % c])
            .collect();
        Ok(self.push(
            out,
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Group normalization of `[b, l, c]` over `(l, c / groups)` per batch and group.
    pub fn group_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || groups == 0 || !sx[2].is_multiple_of(groups) {
            return Err(NnError::shape(
                "group_norm",
                format!("[b, l, c] with c divisible by {groups}"),
                &sx,
            ));
        }
        let (bsz, len, c) = (sx[0], sx[1], sx[2]);
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(NnError::shape(
                    "group_norm",
                    format!("[{c}]"),
                    self.shape(p),
                ));
            }
        }
        let cg = c / groups;
        let count = (len * cg) as f64;
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; bsz * groups];
        for b in 0..bsz {
            for g in 0..groups {
                let idx = |l: usize, j: usize| (b * len + l) * c + g * cg + j;
                let mut mean = 0.0;
                for l in 0..len {
                    for j in 0..cg {
                        mean += xv[idx(l, j)];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for l in 0..len {
                    for j in 0..cg {
                        let d = xv[idx(l, j)] - mean;
                        var += d * d;
                    }
                }
                let rs = 1.0 / (var / count + eps).sqrt();
                rstd[b * groups + g] = rs;
                for l in 0..len {
                    for j in 0..cg {
                        xhat[idx(l, j)] = (xv[idx(l, j)] - mean) * rs;
                    }
                }
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * gv[i % c] + bv[i % c])
            .collect();
        Ok(self.push(
            out,
            sx,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                len,
                xhat,
                rstd,
            },
        ))
    }

    /// `[b, l, c] -> [b, l, kernel * c]` with zero "same" padding.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || kernel.is_multiple_of(2) {
            return Err(NnError::shape(
                "im2col",
                format!("[b, l, c] and odd kernel (got {kernel})"),
                &sx,
            ));
        }
        let (batch, len, ch) = (sx[0], sx[1], sx[2]);
        let pad = kernel / 2;
        let xv = self.value(x);
        let w = kernel * ch;
        let mut out = vec![0.0; batch * len * w];
        for b in 0..batch {
            for l in 0..len {
                let dst = &mut out[(b * len + l) * w..(b * len + l + 1) * w];
                for kk in 0..kernel {
                    let src = l as isize + kk as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = (b * len + src as usize) * ch;
                    dst[kk * ch..(kk + 1) * ch].copy_from_slice(&xv[s..s + ch]);
                }
            }
        }
        Ok(self.push(
            out,
            vec![batch, len, w],
            Op::Im2Col {
                x,
                batch,
                len,
                ch,
                kernel,
            },
        ))
    }

    /// Row lookup into a `[vocab, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(NnError::shape("embedding", "[vocab, width]", &st));
        }
        let (vocab, w) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NnError::shape(
                "embedding",
                format!("ids < {vocab}"),
                &[*bad],
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        Ok(self.push(
            out,
            vec![ids.len(), w],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal multi-head attention core, `softmax(QKᵀ/√d + mask)·V` for
    /// `q, k, v` of shape `[batch, seq, width]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 {
            return Err(NnError::shape("attention", "[batch, seq, width]", &sq));
        }
        self.check_same("attention.k", q, k)?;
        self.check_same("attention.v", q, v)?;
        let (batch, seq, width) = (sq[0], sq[1], sq[2]);
        if heads == 0 || width % heads != 0 {
            return Err(NnError::shape(
                "attention",
                format!("width divisible by {heads} heads"),
                &sq,
            ));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                unsafe {
                    // scores = scale * Q Kᵀ, [seq, seq]
                    gemm_strided(
                        seq,
                        dh,
                        seq,
                        scale,
                        qv.as_ptr().add(off),
                        width as isize,
                        1,
                        kv.as_ptr().add(off),
                        1,
                        width as isize,
                        0.0,
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mx = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row[..=i].iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row[..=i].iter_mut() {
                        *r /= z;
                    }
                    row[i + 1..].iter_mut().for_each(|r| *r = 0.0);
                }
                unsafe {
                    gemm_strided(
                        seq,
                        seq,
                        dh,
                        1.0,
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vv.as_ptr().add(off),
                        width as isize,
                        1,
                        0.0,
                        out.as_mut_ptr().add(off),
                        width as isize,
                        1,
                    );
                }
            }
        }
        Ok(self.push(
            out,
            sq,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(NnError::shape("concat_last", format!("{lead:?} + [w]"), s));
            }
            widths.push((p, last_dim(s)));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for &(p, w) in &widths {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(out, shape, Op::ConcatLast { parts: widths }))
    }

    /// Stacks `[r_i, w]` matrices into `[Σ r_i, w]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let w = last_dim(self.shape(parts[0]));
        let mut out = Vec::new();
        for &p in parts {
            if last_dim(self.shape(p)) != w {
                return Err(NnError::shape(
                    "concat_rows",
                    format!("[.., {w}]"),
                    self.shape(p),
                ));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / w.max(1);
        Ok(self.push(out, vec![rows, w], Op::ConcatRows(parts.to_vec())))
    }

    /// Selects rows of `x` viewed as `[rows, last]`; output `[idx.len(), last]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let w = last_dim(self.shape(x));
        let rows = self.value(x).len() / w.max(1);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NnError::shape(
                "gather_rows",
                format!("row < {rows}"),
                &[*bad],
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xv[i * w..(i + 1) * w]);
        }
        Ok(self.push(
            out,
            vec![idx.len(), w],
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width: w,
            },
        ))
    }

    /// `[b, l, c] -> [b, l/2, c]` averaging adjacent positions.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) {
            return Err(NnError::shape("avg_pool2", "[b, even l, c]", &s));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * (l / 2) * c];
        for (o, chunk) in out.chunks_mut(c).zip(xv.chunks(2 * c)) {
            for j in 0..c {
                o[j] = 0.5 * (chunk[j] + chunk[c + j]);
            }
        }
        Ok(self.push(out, vec![b, l / 2, c], Op::AvgPool2 { x, ch: c }))
    }

    /// `[b, l, c] -> [b, 2l, c]` by repeating each position.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NnError::shape("upsample2", "[b, l, c]", &s));
        }
        let c = s[2];
        let mut out = Vec::with_capacity(2 * self.value(x).len());
        for row in self.value(x).chunks(c) {
            out.extend_from_slice(row);
            out.extend_from_slice(row);
        }
        Ok(self.push(out, vec![s[0], 2 * s[1], c], Op::Upsample2 { x, ch: c }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(NnError::shape(
                "reshape",
                format!("{shape:?}"),
                self.shape(x),
            ));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(v, shape, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ (x - target)² / rows`, i.e. the squared norm per row averaged over rows.
    pub fn mse_rows(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let rows = self.value(x).len() / last_dim(self.shape(x)).max(1);
        let t = self.constant(self.shape(x).to_vec(), target.to_vec())?;
        let d = self.sub(x, t)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / rows.max(1) as f64))
    }

    /// Mean of squared wrapped angular differences `wrap(pred - target)²`,
    /// where `wrap` maps into `(-π, π]`.
    pub fn wrapped_angle_mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(NnError::shape(
                "wrapped_angle_mse",
                format!("{:?}", self.shape(pred)),
                &[target.len()],
            ));
        }
        let delta: Vec<f64> = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| wrap_angle(p - t))
            .collect();
        let n = delta.len().max(1) as f64;
        let loss = delta.iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.push(vec![loss], vec![1], Op::WrappedAngleSq { pred, delta }))
    }

    /// Reverse pass from `out`. `seed` defaults to ones.
    pub fn backward(&self, out: Var, seed: Option<&[f64]>) -> Result<Gradients> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(NnError::NoRecordedForward);
        }
        let n_out = self.nodes[out.0].value.len();
        let seed = match seed {
            Some(s) if s.len() != n_out => {
                return Err(NnError::SeedMismatch {
                    expected: n_out,
                    got: s.len(),
                })
            }
            Some(s) => s.to_vec(),
            None => vec![1.0; n_out],
        };
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.bound.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_by_key(|(_, v)| v.0);
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(a) => a.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, self.value(*b), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, self.value(*a), true, g, false, 0.0, &mut db);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddBias { x, b } => {
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                acc(grads, *x, g.to_vec());
                acc(grads, *b, db);
            }
            Op::AddSeqBias { x, b, len } => {
                let sb = self.shape(*b);
                let c = sb[1];
                let mut db = vec![0.0; sb[0] * c];
                for (r, row) in g.chunks(c).enumerate() {
                    let bi = r / len;
                    db[bi * c..(bi + 1) * c]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, v)| *d += v);
                }
                acc(grads, *x, g.to_vec());
                acc(grads, *b, db);
            }
            Op::Scale(x, s) => acc(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::MulConst(x, c) => acc(grads, *x, g.iter().zip(c).map(|(a, b)| a * b).collect()),
            Op::Act(x, act) => {
                let xv = self.value(*x);
                let d = g
                    .iter()
                    .zip(xv.iter().zip(&node.value))
                    .map(|(gv, (&xi, &yi))| gv * act.derivative(xi, yi))
                    .collect();
                acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[r * c + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                len,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let cg = c / groups;
                let bsz = rstd.len() / groups;
                let count = (len * cg) as f64;
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                    dg[i % c] += gi * hi;
                    db[i % c] += gi;
                }
                for b in 0..bsz {
                    for grp in 0..*groups {
                        let idx = |l: usize, j: usize| (b * len + l) * c + grp * cg + j;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for l in 0..*len {
                            for j in 0..cg {
                                let p = idx(l, j);
                                let dh = g[p] * gv[grp * cg + j];
                                m1 += dh;
                                m2 += dh * xhat[p];
                            }
                        }
                        m1 /= count;
                        m2 /= count;
                        let rs = rstd[b * groups + grp];
                        for l in 0..*len {
                            for j in 0..cg {
                                let p = idx(l, j);
                                let dh = g[p] * gv[grp * cg + j];
                                dx[p] = rs * (dh - m1 - xhat[p] * m2);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::Im2Col {
                x,
                batch,
                len,
                ch,
                kernel,
            } => {
                let (len, ch, kernel) = (*len, *ch, *kernel);
                let pad = kernel / 2;
                let w = kernel * ch;
                let mut dx = vec![0.0; batch * len * ch];
                for b in 0..*batch {
                    for l in 0..len {
                        let src = &g[(b * len + l) * w..(b * len + l + 1) * w];
                        for kk in 0..kernel {
                            let t = l as isize + kk as isize - pad as isize;
                            if t < 0 || t >= len as isize {
                                continue;
                            }
                            let d = (b * len + t as usize) * ch;
                            dx[d..d + ch]
                                .iter_mut()
                                .zip(&src[kk * ch..(kk + 1) * ch])
                                .for_each(|(a, s)| *a += s);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let w = last_dim(self.shape(*table));
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * w..(id + 1) * w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(a, b)| *a += b);
                }
                acc(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let width = last_dim(&node.shape);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..*batch {
                    for h in 0..heads {
                        let off = b * seq * width + h * dh;
                        let p =
                            &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        unsafe {
                            // dV = Pᵀ dO
                            gemm_strided(
                                seq,
                                seq,
                                dh,
                                1.0,
                                p.as_ptr(),
                                1,
                                seq as isize,
                                g.as_ptr().add(off),
                                width as isize,
                                1,
                                0.0,
                                dv.as_mut_ptr().add(off),
                                width as isize,
                                1,
                            );
                            // dP = dO Vᵀ
                            gemm_strided(
                                seq,
                                dh,
                                seq,
                                1.0,
                                g.as_ptr().add(off),
                                width as isize,
                                1,
                                vv.as_ptr().add(off),
                                1,
                                width as isize,
                                0.0,
                                dp.as_mut_ptr(),
                                seq as isize,
                                1,
                            );
                        }
                        // dS = P ∘ (dP - rowsum(dP ∘ P)), scaled for the 1/√d factor.
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                dr[j] = if j <= i {
                                    pr[j] * (dr[j] - dot) * scale
                                } else {
                                    0.0
                                };
                            }
                        }
                        unsafe {
                            // dQ = dS K
                            gemm_strided(
                                seq,
                                seq,
                                dh,
                                1.0,
                                dp.as_ptr(),
                                seq as isize,
                                1,
                                kv.as_ptr().add(off),
                                width as isize,
                                1,
                                0.0,
                                dq.as_mut_ptr().add(off),
                                width as isize,
                                1,
                            );
                            // dK = dSᵀ Q
                            gemm_strided(
                                seq,
                                seq,
                                dh,
                                1.0,
                                dp.as_ptr(),
                                1,
                                seq as isize,
                                qv.as_ptr().add(off),
                                width as isize,
                                1,
                                0.0,
                                dk.as_mut_ptr().add(off),
                                width as isize,
                                1,
                            );
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::ConcatLast { parts } => {
                let total = last_dim(&node.shape);
                let rows = g.len() / total.max(1);
                let mut col = 0;
                for &(p, w) in parts {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    acc(grads, p, d);
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, g[start..start + n].to_vec());
                    start += n;
                }
            }
            Op::GatherRows { x, idx, width } => {
                let w = *width;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(a, b)| *a += b);
                }
                acc(grads, *x, dx);
            }
            Op::AvgPool2 { x, ch } => {
                let c = *ch;
                let mut dx = Vec::with_capacity(2 * g.len());
                for row in g.chunks(c) {
                    let half: Vec<f64> = row.iter().map(|v| 0.5 * v).collect();
                    dx.extend_from_slice(&half);
                    dx.extend_from_slice(&half);
                }
                acc(grads, *x, dx);
            }
            Op::Upsample2 { x, ch } => {
                let c = *ch;
                let dx = g
                    .chunks(2 * c)
                    .flat_map(|pair| (0..c).map(move |j| pair[j] + pair[c + j]))
                    .collect();
                acc(grads, *x, dx);
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Sum(x) => acc(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::WrappedAngleSq { pred, delta } => {
                let n = delta.len().max(1) as f64;
                acc(
                    grads,
                    *pred,
                    delta.iter().map(|d| g[0] * 2.0 * d / n).collect(),
                );
            }
        }
    }
}

/// Maps an angle difference into `(-π, π]`.
pub fn wrap_angle(d: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = d.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}
