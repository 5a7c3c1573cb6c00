//! Reverse-mode tape. Forward runs eagerly as ops are recorded; `backward`
//! walks the tape in reverse, accumulating gradients into every node that
//! needs them. Repeated backward calls accumulate (the documented rule).

use crate::error::{Error, Result};
use crate::net::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Attention visibility pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Keys/queries share a layout of `prefix` freely-visible tokens followed
    /// by a causal region: query i in the causal region sees the prefix and
    /// causal positions <= i; prefix queries see only the prefix.
    PrefixCausal { prefix: usize },
}

impl AttnMask {
    fn visible(self, qi: usize, kj: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::PrefixCausal { prefix } => {
                if qi < prefix {
                    kj < prefix
                } else {
                    kj < prefix || kj <= qi
                }
            }
        }
    }
}

enum Op<S: Scalar> {
    Leaf,
    /// y = x.w + b, x:[n,k] w:[k,m] b:[m]
    Linear { x: Var, w: Var, b: Var },
    /// y[i] = table[ids[i]]
    Embed { table: Var, ids: Vec<u32> },
    /// Per-sample row concatenation of same-width parts.
    Interleave { parts: Vec<Var>, counts: Vec<usize>, batch: usize },
    /// Rows lo..hi of each sample's block of t_total rows.
    TakeRows { x: Var, t_total: usize, lo: usize, hi: usize, batch: usize },
    Add { a: Var, b: Var },
    /// y[s*t + i] = x[s*t + i] + per_sample[s]
    AddPerSample { x: Var, per_sample: Var, t: usize },
    Scale { x: Var, c: S },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, saved: Vec<(S, S)> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        tq: usize,
        tk: usize,
        probs: Vec<S>,
    },
    /// Mean cross-entropy over rows with target >= 0; saves probabilities.
    CeMean { logits: Var, targets: Vec<i64>, probs: Vec<S>, n_valid: usize },
    /// Mean squared error against a constant target.
    MseMean { pred: Var, target: Tensor<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<String>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Graph<S> {
        Graph {
            nodes: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor<S>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    /// Leaf that participates in backward without a parameter name (used by
    /// tests probing input gradients).
    pub fn leaf_with_grad(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, k) = (xv.shape[0], xv.shape[1]);
        let m = wv.shape[1];
        assert_eq!(wv.shape[0], k, "linear: x cols {k} != w rows {}", wv.shape[0]);
        assert_eq!(bv.len(), m, "linear: bias length");
        let mut out = Tensor::zeros(&[n, m]);
        unsafe {
            S::gemm(
                n,
                k,
                m,
                S::ONE,
                xv.data.as_ptr(),
                k as isize,
                1,
                wv.data.as_ptr(),
                m as isize,
                1,
                S::ZERO,
                out.data.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        for row in 0..n {
            for j in 0..m {
                out.data[row * m + j] += bv.data[j];
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = &self.nodes[table.0].value;
        let d = tv.shape[1];
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, id) in ids.iter().enumerate() {
            let r = *id as usize;
            assert!(r < tv.shape[0], "embedding id {r} out of range");
            out.data[i * d..(i + 1) * d].copy_from_slice(&tv.data[r * d..(r + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Stitch per-modality row blocks into per-sample token sequences.
    /// `parts[p]` has shape [batch * counts[p], d]; output row layout is
    /// sample-major: for each sample, part 0's rows, then part 1's, ...
    pub fn interleave(&mut self, parts: &[Var], counts: &[usize], batch: usize) -> Var {
        assert_eq!(parts.len(), counts.len());
        let d = self.nodes[parts[0].0].value.shape[1];
        let t: usize = counts.iter().sum();
        let mut out = Tensor::zeros(&[batch * t, d]);
        for s in 0..batch {
            let mut row = s * t;
            for (p, cnt) in parts.iter().zip(counts) {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.shape[0], batch * cnt, "interleave part rows");
                assert_eq!(pv.shape[1], d);
                let src = s * cnt;
                out.data[row * d..(row + cnt) * d]
                    .copy_from_slice(&pv.data[src * d..(src + cnt) * d]);
                row += cnt;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            out,
            Op::Interleave {
                parts: parts.to_vec(),
                counts: counts.to_vec(),
                batch,
            },
            needs,
        )
    }

    /// Rows lo..hi from each sample's block of `t_total` rows.
    pub fn take_rows(&mut self, x: Var, t_total: usize, lo: usize, hi: usize, batch: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.shape[1];
        assert_eq!(xv.shape[0], batch * t_total, "take_rows source shape");
        let span = hi - lo;
        let mut out = Tensor::zeros(&[batch * span, d]);
        for s in 0..batch {
            let src = (s * t_total + lo) * d;
            let dst = s * span * d;
            out.data[dst..dst + span * d].copy_from_slice(&xv.data[src..src + span * d]);
        }
        let needs = self.needs(x);
        self.push(
            out,
            Op::TakeRows {
                x,
                t_total,
                lo,
                hi,
                batch,
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape, bv.shape, "add shapes");
        let mut out = av.clone();
        for (o, x) in out.data.iter_mut().zip(&bv.data) {
            *o += *x;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn add_per_sample(&mut self, x: Var, per_sample: Var, t: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[per_sample.0].value;
        let d = xv.shape[1];
        let batch = sv.shape[0];
        assert_eq!(xv.shape[0], batch * t, "add_per_sample rows");
        assert_eq!(sv.shape[1], d);
        let mut out = xv.clone();
        for s in 0..batch {
            for i in 0..t {
                let row = (s * t + i) * d;
                for j in 0..d {
                    out.data[row + j] += sv.data[s * d + j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(per_sample);
        self.push(out, Op::AddPerSample { x, per_sample, t }, needs)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data.iter_mut() {
            *v = gelu_fwd(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, d) = (xv.shape[0], xv.shape[1]);
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let eps = S::from_f64(1e-5);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = Tensor::zeros(&[n, d]);
        let mut saved = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv.data[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for v in row {
                mean += *v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = S::ONE / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                out.data[r * d + j] = xhat * gv.data[j] + bv.data[j];
            }
            saved.push((mean, rstd));
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention over per-sample blocks.
    /// q: [batch*tq, d], k/v: [batch*tk, d].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        tq: usize,
        tk: usize,
        mask: AttnMask,
    ) -> Var {
        let d = self.nodes[q.0].value.shape[1];
        assert_eq!(d % heads, 0, "d_model must divide heads");
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        assert_eq!(self.nodes[q.0].value.shape[0], batch * tq);
        assert_eq!(self.nodes[k.0].value.shape[0], batch * tk);
        assert_eq!(self.nodes[v.0].value.shape[0], batch * tk);
        let mut out: Tensor<S> = Tensor::zeros(&[batch * tq, d]);
        let mut probs = vec![S::ZERO; batch * heads * tq * tk];
        let qd = &self.nodes[q.0].value.data;
        let kd = &self.nodes[k.0].value.data;
        let vd = &self.nodes[v.0].value.data;
        let neg_inf = S::from_f64(f64::NEG_INFINITY);
        for b in 0..batch {
            for h in 0..heads {
                let scores_base = (b * heads + h) * tq * tk;
                // scores = Q_bh (tq, dh) x K_bh^T (dh, tk)
                unsafe {
                    S::gemm(
                        tq,
                        dh,
                        tk,
                        scale,
                        qd.as_ptr().add((b * tq) * d + h * dh),
                        d as isize,
                        1,
                        kd.as_ptr().add((b * tk) * d + h * dh),
                        1,
                        d as isize,
                        S::ZERO,
                        probs.as_mut_ptr().add(scores_base),
                        tk as isize,
                        1,
                    );
                }
                for i in 0..tq {
                    let row = &mut probs[scores_base + i * tk..scores_base + (i + 1) * tk];
                    let mut max = neg_inf;
                    for (j, s) in row.iter_mut().enumerate() {
                        if !mask.visible(i, j) {
                            *s = neg_inf;
                        } else if *s > max {
                            max = *s;
                        }
                    }
                    let mut sum = S::ZERO;
                    for s in row.iter_mut() {
                        if *s == neg_inf {
                            *s = S::ZERO;
                        } else {
                            *s = (*s - max).exp();
                            sum += *s;
                        }
                    }
                    let inv = S::ONE / sum;
                    for s in row.iter_mut() {
                        *s *= inv;
                    }
                }
                // ctx = P (tq, tk) x V_bh (tk, dh)
                unsafe {
                    S::gemm(
                        tq,
                        tk,
                        dh,
                        S::ONE,
                        probs.as_ptr().add(scores_base),
                        tk as isize,
                        1,
                        vd.as_ptr().add((b * tk) * d + h * dh),
                        d as isize,
                        1,
                        S::ZERO,
                        out.data.as_mut_ptr().add((b * tq) * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                tq,
                tk,
                probs,
            },
            needs,
        )
    }

    /// Mean next-token cross entropy; rows with target < 0 are ignored.
    pub fn ce_mean(&mut self, logits: Var, targets: &[i64]) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (n, vsize) = (lv.shape[0], lv.shape[1]);
        assert_eq!(targets.len(), n, "one target per logits row");
        let mut probs = vec![S::ZERO; n * vsize];
        let mut loss = S::ZERO;
        let mut n_valid = 0usize;
        for r in 0..n {
            let row = &lv.data[r * vsize..(r + 1) * vsize];
            let mut max = row[0];
            for v in row {
                if *v > max {
                    max = *v;
                }
            }
            let mut sum = S::ZERO;
            for (j, v) in row.iter().enumerate() {
                let e = (*v - max).exp();
                probs[r * vsize + j] = e;
                sum += e;
            }
            let inv = S::ONE / sum;
            for j in 0..vsize {
                probs[r * vsize + j] *= inv;
            }
            let t = targets[r];
            if t >= 0 {
                n_valid += 1;
                loss += -(probs[r * vsize + t as usize]).ln();
            }
        }
        assert!(n_valid > 0, "cross-entropy needs at least one valid target");
        loss *= S::from_f64(1.0 / n_valid as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CeMean {
                logits,
                targets: targets.to_vec(),
                probs,
                n_valid,
            },
            needs,
        )
    }

    /// Softmax probabilities saved by a `ce_mean` node, for inspection.
    pub fn ce_probs(&self, loss: Var) -> Option<(&[S], usize)> {
        match &self.nodes[loss.0].op {
            Op::CeMean { probs, logits, .. } => {
                let v = self.nodes[logits.0].value.shape[1];
                Some((probs.as_slice(), v))
            }
            _ => None,
        }
    }

    pub fn mse_mean(&mut self, pred: Var, target: &Tensor<S>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape, target.shape, "mse shapes");
        let mut loss = S::ZERO;
        for (p, t) in pv.data.iter().zip(&target.data) {
            let d = *p - *t;
            loss += d * d;
        }
        loss *= S::from_f64(1.0 / pv.len() as f64);
        let needs = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::MseMean {
                pred,
                target: target.clone(),
            },
            needs,
        )
    }

    pub fn add_scalars(&mut self, a: Var, b: Var) -> Var {
        self.add(a, b)
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor<S> {
        if self.nodes[v.0].grad.is_none() {
            let shape = self.nodes[v.0].value.shape.clone();
            self.nodes[v.0].grad = Some(Tensor::zeros(&shape));
        }
        self.nodes[v.0].grad.as_mut().unwrap()
    }

    fn add_grad(&mut self, v: Var, g: &[S]) {
        if !self.needs(v) {
            return;
        }
        let buf = self.grad_buf(v);
        for (b, x) in buf.data.iter_mut().zip(g) {
            *b += *x;
        }
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; interior node gradients are reset per call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        if !self.needs(loss) {
            return Err(Error::contract(
                "backward on a graph with no trainable leaves",
            ));
        }
        self.ran_backward = true;
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let buf = self.grad_buf(loss);
            buf.data[0] += S::ONE;
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let grad = self.nodes[idx].grad.clone().unwrap();
        let g = &grad.data;
        // Clone light op metadata; heavy saved buffers are moved out in match
        // arms that need them via references into self.nodes (re-borrowed).
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let (n, k) = (xv.shape[0], xv.shape[1]);
                let m = wv.shape[1];
                if self.needs(x) {
                    // dx = dy . w^T
                    let mut dx = vec![S::ZERO; n * k];
                    unsafe {
                        S::gemm(
                            n,
                            m,
                            k,
                            S::ONE,
                            g.as_ptr(),
                            m as isize,
                            1,
                            wv.data.as_ptr(),
                            1,
                            m as isize,
                            S::ZERO,
                            dx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    self.add_grad(x, &dx);
                }
                if self.needs(w) {
                    // dw = x^T . dy
                    let mut dw = vec![S::ZERO; k * m];
                    unsafe {
                        S::gemm(
                            k,
                            n,
                            m,
                            S::ONE,
                            xv.data.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            m as isize,
                            1,
                            S::ZERO,
                            dw.as_mut_ptr(),
                            m as isize,
                            1,
                        );
                    }
                    self.add_grad(w, &dw);
                }
                if self.needs(b) {
                    let mut db = vec![S::ZERO; m];
                    for r in 0..n {
                        for j in 0..m {
                            db[j] += g[r * m + j];
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Embed { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                if self.needs(table) {
                    let d = self.nodes[table.0].value.shape[1];
                    let rows = self.nodes[table.0].value.shape[0];
                    let mut dt = vec![S::ZERO; rows * d];
                    for (i, id) in ids.iter().enumerate() {
                        let r = *id as usize;
                        for j in 0..d {
                            dt[r * d + j] += g[i * d + j];
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::Interleave { parts, counts, batch } => {
                let (parts, counts, batch) = (parts.clone(), counts.clone(), *batch);
                let d = self.nodes[parts[0].0].value.shape[1];
                let t: usize = counts.iter().sum();
                for (pi, part) in parts.iter().enumerate() {
                    if !self.needs(*part) {
                        continue;
                    }
                    let cnt = counts[pi];
                    let before: usize = counts[..pi].iter().sum();
                    let mut dp = vec![S::ZERO; batch * cnt * d];
                    for s in 0..batch {
                        let src = (s * t + before) * d;
                        let dst = s * cnt * d;
                        dp[dst..dst + cnt * d].copy_from_slice(&g[src..src + cnt * d]);
                    }
                    self.add_grad(*part, &dp);
                }
            }
            Op::TakeRows {
                x,
                t_total,
                lo,
                hi,
                batch,
            } => {
                let (x, t_total, lo, hi, batch) = (*x, *t_total, *lo, *hi, *batch);
                if self.needs(x) {
                    let d = self.nodes[x.0].value.shape[1];
                    let span = hi - lo;
                    let mut dx = vec![S::ZERO; batch * t_total * d];
                    for s in 0..batch {
                        let dst = (s * t_total + lo) * d;
                        let src = s * span * d;
                        dx[dst..dst + span * d].copy_from_slice(&g[src..src + span * d]);
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddPerSample { x, per_sample, t } => {
                let (x, per_sample, t) = (*x, *per_sample, *t);
                self.add_grad(x, g);
                if self.needs(per_sample) {
                    let d = self.nodes[per_sample.0].value.shape[1];
                    let batch = self.nodes[per_sample.0].value.shape[0];
                    let mut ds = vec![S::ZERO; batch * d];
                    for s in 0..batch {
                        for i in 0..t {
                            let row = (s * t + i) * d;
                            for j in 0..d {
                                ds[s * d + j] += g[row + j];
                            }
                        }
                    }
                    self.add_grad(per_sample, &ds);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let dx: Vec<S> = g.iter().map(|v| *v * c).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<S> = xv
                        .data
                        .iter()
                        .zip(g)
                        .map(|(v, gi)| gelu_bwd(*v) * *gi)
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let saved = saved.clone();
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                let (n, d) = (xv.shape[0], xv.shape[1]);
                let inv_d = S::from_f64(1.0 / d as f64);
                let mut dx = vec![S::ZERO; n * d];
                let mut dg = vec![S::ZERO; d];
                let mut db = vec![S::ZERO; d];
                for r in 0..n {
                    let (mean, rstd) = saved[r];
                    let row = &xv.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_gy = S::ZERO;
                    let mut sum_gy_xhat = S::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gy = gr[j] * gv.data[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dg[j] += gr[j] * xhat;
                        db[j] += gr[j];
                    }
                    sum_gy *= inv_d;
                    sum_gy_xhat *= inv_d;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gy = gr[j] * gv.data[j];
                        dx[r * d + j] = (gy - sum_gy - xhat * sum_gy_xhat) * rstd;
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dg);
                self.add_grad(bias, &db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                tq,
                tk,
                probs,
                ..
            } => {
                let (q, k, v, heads, batch, tq, tk) = (*q, *k, *v, *heads, *batch, *tq, *tk);
                let probs = probs.clone();
                let d = self.nodes[q.0].value.shape[1];
                let dh = d / heads;
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let qd = self.nodes[q.0].value.data.clone();
                let kd = self.nodes[k.0].value.data.clone();
                let vd = self.nodes[v.0].value.data.clone();
                let mut dq = vec![S::ZERO; batch * tq * d];
                let mut dk = vec![S::ZERO; batch * tk * d];
                let mut dv = vec![S::ZERO; batch * tk * d];
                let mut dp = vec![S::ZERO; tq * tk];
                let mut ds = vec![S::ZERO; tq * tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * tq * tk;
                        let p = &probs[pbase..pbase + tq * tk];
                        unsafe {
                            // dV_bh += P^T (tk, tq) x dctx (tq, dh)
                            S::gemm(
                                tk,
                                tq,
                                dh,
                                S::ONE,
                                p.as_ptr(),
                                1,
                                tk as isize,
                                g.as_ptr().add((b * tq) * d + h * dh),
                                d as isize,
                                1,
                                S::ONE,
                                dv.as_mut_ptr().add((b * tk) * d + h * dh),
                                d as isize,
                                1,
                            );
                            // dP = dctx (tq, dh) x V^T (dh, tk)
                            S::gemm(
                                tq,
                                dh,
                                tk,
                                S::ONE,
                                g.as_ptr().add((b * tq) * d + h * dh),
                                d as isize,
                                1,
                                vd.as_ptr().add((b * tk) * d + h * dh),
                                1,
                                d as isize,
                                S::ZERO,
                                dp.as_mut_ptr(),
                                tk as isize,
                                1,
                            );
                        }
                        // dS = P o (dP - rowsum(dP o P))
                        for i in 0..tq {
                            let mut dot = S::ZERO;
                            for j in 0..tk {
                                dot += dp[i * tk + j] * p[i * tk + j];
                            }
                            for j in 0..tk {
                                ds[i * tk + j] = p[i * tk + j] * (dp[i * tk + j] - dot);
                            }
                        }
                        unsafe {
                            // dQ += dS (tq, tk) x K (tk, dh) * scale
                            S::gemm(
                                tq,
                                tk,
                                dh,
                                scale,
                                ds.as_ptr(),
                                tk as isize,
                                1,
                                kd.as_ptr().add((b * tk) * d + h * dh),
                                d as isize,
                                1,
                                S::ONE,
                                dq.as_mut_ptr().add((b * tq) * d + h * dh),
                                d as isize,
                                1,
                            );
                            // dK += dS^T (tk, tq) x Q (tq, dh) * scale
                            S::gemm(
                                tk,
                                tq,
                                dh,
                                scale,
                                ds.as_ptr(),
                                1,
                                tk as isize,
                                qd.as_ptr().add((b * tq) * d + h * dh),
                                d as isize,
                                1,
                                S::ONE,
                                dk.as_mut_ptr().add((b * tk) * d + h * dh),
                                d as isize,
                                1,
                            );
                        }
                    }
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
            }
            Op::CeMean {
                logits,
                targets,
                probs,
                n_valid,
            } => {
                let (logits, targets, probs, n_valid) =
                    (*logits, targets.clone(), probs.clone(), *n_valid);
                if self.needs(logits) {
                    let vsize = self.nodes[logits.0].value.shape[1];
                    let n = targets.len();
                    let gscale = g[0] * S::from_f64(1.0 / n_valid as f64);
                    let mut dl = vec![S::ZERO; n * vsize];
                    for r in 0..n {
                        let t = targets[r];
                        if t < 0 {
                            continue;
                        }
                        for j in 0..vsize {
                            let onehot = if j as i64 == t { S::ONE } else { S::ZERO };
                            dl[r * vsize + j] = (probs[r * vsize + j] - onehot) * gscale;
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
            Op::MseMean { pred, target } => {
                let (pred, target) = (*pred, target.clone());
                if self.needs(pred) {
                    let pv = &self.nodes[pred.0].value;
                    let n = pv.len();
                    let gscale = g[0] * S::from_f64(2.0 / n as f64);
                    let dp: Vec<S> = pv
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(p, t)| (*p - *t) * gscale)
                        .collect();
                    self.add_grad(pred, &dp);
                }
            }
        }
    }

    /// Drain (name, gradient) pairs for every bound parameter that received
    /// gradient. `backward` must have run.
    pub fn param_grads(&self) -> Result<Vec<(String, &Tensor<S>)>> {
        if !self.ran_backward {
            return Err(Error::contract("param_grads before backward"));
        }
        let mut out = Vec::new();
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.param, &node.grad) {
                out.push((name.clone(), grad));
            }
        }
        Ok(out)
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}
