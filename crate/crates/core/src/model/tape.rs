//! Reverse-mode differentiation over row-major matrices.
//!
//! Batches are packed: the rows of every example sit in one matrix, and ops
//! that mix rows (attention, copy scoring, pooling) take explicit segment
//! boundaries so examples never see each other.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row ranges of one example: `q` rows attend over `k` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Target and weight of one decoder row for [`Tape::action_xent`].
#[derive(Debug, Clone, Copy)]
pub struct RowTarget {
    pub target: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Gather { src: Var, rows: Vec<Option<usize>> },
    Attention { q: Var, k: Var, v: Var, segs: Vec<Segment>, heads: usize, probs: Vec<Mat> },
    MeanPool { x: Var, segs: Vec<(usize, usize)> },
    ActionXent { logits: Var, query: Var, keys: Var, segs: Vec<Segment>, rows: Vec<RowTarget>, probs: Vec<Vec<f64>>, norm: f64 },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed like the parameter store.
pub struct ParamGrads {
    pub grads: Vec<Option<Mat>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf; `index` is its position in the parameter store.
    pub fn param(&mut self, index: usize, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let out = self.value(a) + &r;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let out = &xhat * &g + &b;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// `out[i] = src[rows[i]]`, or zeros where the row is `None`.
    pub fn gather(&mut self, src: Var, rows: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let mut out = Mat::zeros((rows.len(), sv.ncols()));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                out.row_mut(i).assign(&sv.row(*r));
            }
        }
        self.push(out, Op::Gather { src, rows })
    }

    /// Scaled dot-product attention per segment and head. With `causal`, query
    /// row `i` of a segment sees key rows `0..=i` of the same segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: Vec<Segment>, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "model dimension must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for seg in &segs {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![seg.q_start..seg.q_start + seg.q_len, cols.clone()]);
                let kh = kv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let vh = vv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let visible = if causal { (i + 1).min(seg.k_len) } else { seg.k_len };
                    softmax_in_place(row.as_slice_mut().expect("contiguous"), visible, scale);
                }
                out.slice_mut(s![seg.q_start..seg.q_start + seg.q_len, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, segs, heads, probs })
    }

    /// Mean over the rows `[start, start + len)` of each segment.
    pub fn mean_pool(&mut self, x: Var, segs: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((segs.len(), xv.ncols()));
        for (i, &(start, len)) in segs.iter().enumerate() {
            let m = xv.slice(s![start..start + len, ..]).sum_axis(Axis(0)) / len.max(1) as f64;
            out.row_mut(i).assign(&m);
        }
        self.push(out, Op::MeanPool { x, segs })
    }

    /// Weighted mean negative log-likelihood over decoder rows, where the
    /// candidates of a row are its `logits` followed by copy scores
    /// `query[row] · keys[j]` for every key row `j` of its segment. Rows with
    /// zero weight contribute neither loss nor gradient.
    pub fn action_xent(&mut self, logits: Var, query: Var, keys: Var, segs: Vec<Segment>, rows: Vec<RowTarget>) -> Var {
        let scores = action_scores(self.value(logits), self.value(query), self.value(keys), &segs);
        let total_weight: f64 = rows.iter().map(|r| r.weight).sum();
        let norm = if total_weight > 0.0 { total_weight } else { 1.0 };
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(scores.len());
        for (sc, rt) in scores.into_iter().zip(&rows) {
            let mut p = sc;
            log_softmax_in_place(&mut p);
            if rt.weight != 0.0 {
                loss -= rt.weight * p[rt.target];
            }
            p.iter_mut().for_each(|x| *x = x.exp());
            probs.push(p);
        }
        let out = Mat::from_elem((1, 1), loss / norm);
        self.push(out, Op::ActionXent { logits, query, keys, segs, rows, probs, norm })
    }

    /// Mean softmax cross-entropy of `logits` rows against class targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let r = row.as_slice_mut().expect("contiguous");
            log_softmax_in_place(r);
            loss -= r[t];
            r.iter_mut().for_each(|x| *x = x.exp());
        }
        let n = targets.len().max(1) as f64;
        self.push(Mat::from_elem((1, 1), loss / n), Op::SoftmaxXent { logits, targets, probs })
    }

    /// Backpropagates from the scalar `root` and returns gradients for every
    /// parameter leaf, accumulated per store index.
    pub fn backward(&self, root: Var, n_params: usize) -> ParamGrads {
        self.backward_keeping(root, n_params, &[]).0
    }

    /// Like [`Tape::backward`], also returning the gradients of `keep`.
    pub fn backward_keeping(&self, root: Var, n_params: usize, keep: &[Var]) -> (ParamGrads, Vec<Option<Mat>>) {
        let mut kept: Vec<Option<Mat>> = vec![None; keep.len()];
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));
        let mut out = ParamGrads { grads: (0..n_params).map(|_| None).collect() };
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            for (slot, k) in kept.iter_mut().zip(keep) {
                if k.0 == idx {
                    *slot = Some(g.clone());
                }
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut out.grads[*p], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gx, &y| {
                        if y <= 0.0 {
                            *gx = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).row(0).to_owned();
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let d = xhat.ncols() as f64;
                    let mut gx = &g * &gv;
                    for ((mut row, xh), &is) in gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let mean_g = row.sum() / d;
                        let mean_gx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        Zip::from(&mut row).and(&xh).for_each(|r, &h| *r = is * (*r - mean_g - h * mean_gx));
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { src, rows } => {
                    let mut gs = Mat::zeros(self.value(*src).raw_dim());
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            let mut dst = gs.row_mut(*r);
                            dst += &g.row(i);
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Attention { q, k, v, segs, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gk = Mat::zeros(kv.raw_dim());
                    let mut gvv = Mat::zeros(vv.raw_dim());
                    let mut pi = 0;
                    for seg in segs {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let qr = seg.q_start..seg.q_start + seg.q_len;
                            let kr = seg.k_start..seg.k_start + seg.k_len;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![qr.clone(), cols.clone()]);
                            let qh = qv.slice(s![qr.clone(), cols.clone()]);
                            let kh = kv.slice(s![kr.clone(), cols.clone()]);
                            let vh = vv.slice(s![kr.clone(), cols.clone()]);
                            let mut gvh = gvv.slice_mut(s![kr.clone(), cols.clone()]);
                            gvh += &p.t().dot(&go);
                            let gp = go.dot(&vh.t());
                            let gs = softmax_backward(p, &gp) * scale;
                            let mut gqh = gq.slice_mut(s![qr.clone(), cols.clone()]);
                            gqh += &gs.dot(&kh);
                            let mut gkh = gk.slice_mut(s![kr, cols]);
                            gkh += &gs.t().dot(&qh);
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
                Op::MeanPool { x, segs } => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (i, &(start, len)) in segs.iter().enumerate() {
                        let share = g.row(i).to_owned() / len.max(1) as f64;
                        for r in start..start + len {
                            let mut dst = gx.row_mut(r);
                            dst += &share;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ActionXent { logits, query, keys, segs, rows, probs, norm } => {
                    let upstream = g[[0, 0]] / norm;
                    let lv = self.value(*logits);
                    let (qv, kv) = (self.value(*query), self.value(*keys));
                    let n_vocab = lv.ncols();
                    let mut gl = Mat::zeros(lv.raw_dim());
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gk = Mat::zeros(kv.raw_dim());
                    for seg in segs {
                        for r in seg.q_start..seg.q_start + seg.q_len {
                            let rt = rows[r];
                            if rt.weight == 0.0 {
                                continue;
                            }
                            let mut ds = probs[r].clone();
                            ds[rt.target] -= 1.0;
                            let w = rt.weight * upstream;
                            ds.iter_mut().for_each(|x| *x *= w);
                            gl.row_mut(r).iter_mut().zip(&ds[..n_vocab]).for_each(|(a, b)| *a = *b);
                            for (j, &dc) in ds[n_vocab..].iter().enumerate() {
                                let kr = seg.k_start + j;
                                let mut gqr = gq.row_mut(r);
                                gqr.scaled_add(dc, &kv.row(kr));
                                let mut gkr = gk.row_mut(kr);
                                gkr.scaled_add(dc, &qv.row(r));
                            }
                        }
                    }
                    acc(&mut grads, *logits, gl);
                    acc(&mut grads, *query, gq);
                    acc(&mut grads, *keys, gk);
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    let n = targets.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    gl *= g[[0, 0]] / n;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        (out, kept)
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    accumulate(&mut grads[v.0], g);
}

/// Scales the first `visible` entries, softmaxes them and zeroes the rest.
fn softmax_in_place(row: &mut [f64], visible: usize, scale: f64) {
    let (vis, hidden) = row.split_at_mut(visible);
    let mut max = f64::NEG_INFINITY;
    for x in vis.iter_mut() {
        *x *= scale;
        max = max.max(*x);
    }
    let mut sum = 0.0;
    for x in vis.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in vis.iter_mut() {
        *x /= sum;
    }
    hidden.iter_mut().for_each(|x| *x = 0.0);
}

/// Replaces `row` with its log-softmax and returns the log-sum-exp.
pub fn log_softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|x| *x -= lse);
    lse
}

fn softmax_backward(p: &Mat, gp: &Mat) -> Mat {
    let mut gs = p * gp;
    for (mut row, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|r, &pv| *r -= pv * dot);
    }
    gs
}

/// Candidate scores per decoder row: vocabulary logits then copy scores.
pub fn action_scores(logits: &Mat, query: &Mat, keys: &Mat, segs: &[Segment]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); logits.nrows()];
    for seg in segs {
        let kb: ArrayView2<f64> = keys.slice(s![seg.k_start..seg.k_start + seg.k_len, ..]);
        let qb = query.slice(s![seg.q_start..seg.q_start + seg.q_len, ..]);
        let copy = qb.dot(&kb.t());
        for (i, r) in (seg.q_start..seg.q_start + seg.q_len).enumerate() {
            let mut sc = logits.row(r).to_vec();
            sc.extend(copy.row(i).iter());
            out[r] = sc;
        }
    }
    out
}
