//! A small reverse-mode autodiff tape over dense row-major matrices.
//!
//! Only the operations the forecaster needs are provided. The sparse
//! attention op covers every attention variant in the model: each query row
//! owns a contiguous run of edges (key row indices), heads split the feature
//! columns into equal blocks, and softmax normalises over a row's edges.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;

pub(crate) type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

/// Edge lists for sparse attention: query row `i` attends to
/// `keys[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone)]
pub(crate) struct AttnPlan {
    pub offsets: Vec<usize>,
    pub keys: Vec<usize>,
}

impl AttnPlan {
    pub fn from_lists(lists: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut offsets = vec![0];
        let mut keys = Vec::new();
        for l in lists {
            keys.extend(l);
            offsets.push(keys.len());
        }
        AttnPlan { offsets, keys }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edges(&self, row: usize) -> &[usize] {
        &self.keys[self.offsets[row]..self.offsets[row + 1]]
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Arc<AttnPlan>,
        heads: usize,
        /// Softmax weights, one row per edge, one column per head.
        weights: Mat,
    },
    ReplaceRows {
        x: Var,
        rows: Vec<usize>,
    },
    L1Loss {
        x: Var,
        target: Arc<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sg = 1.0 / (1.0 + (-x).exp());
    sg * (1.0 + x * (1.0 - sg))
}

/// Row-major copy when `m` is not already row-major (BLAS-style products of
/// transposed views can come back column-major).
fn standard(m: Mat) -> Mat {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = standard(value);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Overwrite `rows` of `x` with `values`; gradients do not flow into the
    /// replaced rows.
    pub fn replace_rows(&mut self, x: Var, rows: Vec<usize>, values: &Mat) -> Var {
        let mut v = self.value(x).clone();
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(r).assign(&values.row(i));
        }
        self.push(v, Op::ReplaceRows { x, rows })
    }

    pub fn l1_loss(&mut self, x: Var, target: Arc<Mat>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), target.dim());
        let n = xv.len() as f64;
        let loss = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::L1Loss { x, target })
    }

    /// Multi-head sparse scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Arc<AttnPlan>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dv = vv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(plan.rows(), qv.nrows());
        assert!(d % heads == 0 && dv % heads == 0);
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = qv.as_standard_layout();
        let ks = kv.as_standard_layout();
        let vs = vv.as_standard_layout();
        let (qs, ks, vs) = (
            qs.as_slice().unwrap(),
            ks.as_slice().unwrap(),
            vs.as_slice().unwrap(),
        );

        let rows = plan.rows();
        let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
            .into_par_iter()
            .map(|i| {
                let edges = plan.edges(i);
                let mut w = vec![0.0; edges.len() * heads];
                let mut out = vec![0.0; dv];
                for h in 0..heads {
                    let qrow = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (e, &kr) in edges.iter().enumerate() {
                        let krow = &ks[kr * d + h * dh..kr * d + (h + 1) * dh];
                        let sc = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        w[e * heads + h] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for e in 0..edges.len() {
                        let ex = (w[e * heads + h] - max).exp();
                        w[e * heads + h] = ex;
                        z += ex;
                    }
                    for e in 0..edges.len() {
                        w[e * heads + h] /= z;
                    }
                    let o = &mut out[h * dvh..(h + 1) * dvh];
                    for (e, &kr) in edges.iter().enumerate() {
                        let we = w[e * heads + h];
                        let vrow = &vs[kr * dv + h * dvh..kr * dv + (h + 1) * dvh];
                        for (oc, vc) in o.iter_mut().zip(vrow) {
                            *oc += we * vc;
                        }
                    }
                }
                (w, out)
            })
            .collect();

        let mut weights = Array2::zeros((plan.keys.len(), heads));
        let mut out = Array2::zeros((rows, dv));
        {
            let ws = weights.as_slice_mut().unwrap();
            for (i, (w, o)) in per_row.into_iter().enumerate() {
                ws[plan.offsets[i] * heads..plan.offsets[i + 1] * heads].copy_from_slice(&w);
                out.row_mut(i).assign(&ndarray::ArrayView1::from(&o));
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                plan,
                heads,
                weights,
            },
        )
    }

    /// Softmax weights recorded by an attention node (edges × heads).
    pub fn attention_weights(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => weights,
            _ => panic!("not an attention node"),
        }
    }

    /// Reverse pass from a scalar node; returns the gradient of every
    /// parameter node keyed by parameter index.
    pub fn backward(&self, loss: Var, num_params: usize) -> Vec<Option<Mat>> {
        assert_eq!(self.value(loss).len(), 1);
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Option<Mat>> = (0..num_params).map(|_| None).collect();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(standard(g)),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *bias, gb);
                }
                Op::Silu(a) => {
                    let mut ga = self.value(*a).mapv(silu_grad);
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ReplaceRows { x, rows } => {
                    let mut gx = g;
                    for &r in rows {
                        gx.row_mut(r).fill(0.0);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L1Loss { x, target } => {
                    let xv = self.value(*x);
                    let scale = g[[0, 0]] / xv.len() as f64;
                    let mut gx = xv - &**target;
                    gx.mapv_inplace(|d| {
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    plan,
                    heads,
                    weights,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, plan, *heads, weights, &g);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
        }
        param_grads
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &AttnPlan,
        heads: usize,
        weights: &Mat,
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dv = vv.ncols();
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            qv.as_slice().unwrap(),
            kv.as_slice().unwrap(),
            vv.as_slice().unwrap(),
        );
        let gs = g.as_slice().unwrap();
        let ws = weights.as_slice().unwrap();

        // Query gradients are row-local; key/value gradients scatter, so the
        // per-row pieces are computed in parallel and summed serially.
        struct RowGrad {
            gq: Vec<f64>,
            gk: Vec<(usize, Vec<f64>)>,
            gv: Vec<(usize, Vec<f64>)>,
        }
        let rows: Vec<RowGrad> = (0..plan.rows())
            .into_par_iter()
            .map(|i| {
                let edges = plan.edges(i);
                let off = plan.offsets[i];
                let mut gq = vec![0.0; d];
                let mut gk: Vec<(usize, Vec<f64>)> =
                    edges.iter().map(|&kr| (kr, vec![0.0; d])).collect();
                let mut gv: Vec<(usize, Vec<f64>)> =
                    edges.iter().map(|&kr| (kr, vec![0.0; dv])).collect();
                let mut dw = vec![0.0; edges.len()];
                for h in 0..heads {
                    let gout = &gs[i * dv + h * dvh..i * dv + (h + 1) * dvh];
                    let mut dot = 0.0;
                    for (e, &kr) in edges.iter().enumerate() {
                        let w = ws[(off + e) * heads + h];
                        let vrow = &vs[kr * dv + h * dvh..kr * dv + (h + 1) * dvh];
                        dw[e] = gout.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dot += w * dw[e];
                        for (c, go) in gout.iter().enumerate() {
                            gv[e].1[h * dvh + c] += w * go;
                        }
                    }
                    let qrow = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                    for (e, &kr) in edges.iter().enumerate() {
                        let w = ws[(off + e) * heads + h];
                        let ds = w * (dw[e] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &ks[kr * d + h * dh..kr * d + (h + 1) * dh];
                        for c in 0..dh {
                            gq[h * dh + c] += ds * krow[c];
                            gk[e].1[h * dh + c] += ds * qrow[c];
                        }
                    }
                }
                RowGrad { gq, gk, gv }
            })
            .collect();

        let mut gq = Array2::zeros(qv.dim());
        let mut gk = Array2::<f64>::zeros(kv.dim());
        let mut gv = Array2::<f64>::zeros(vv.dim());
        {
            let gqs = gq.as_slice_mut().unwrap();
            let gks = gk.as_slice_mut().unwrap();
            let gvs = gv.as_slice_mut().unwrap();
            for (i, r) in rows.into_iter().enumerate() {
                gqs[i * d..(i + 1) * d].copy_from_slice(&r.gq);
                for (kr, vals) in r.gk {
                    for (dst, val) in gks[kr * d..(kr + 1) * d].iter_mut().zip(vals) {
                        *dst += val;
                    }
                }
                for (kr, vals) in r.gv {
                    for (dst, val) in gvs[kr * dv..(kr + 1) * dv].iter_mut().zip(vals) {
                        *dst += val;
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}
