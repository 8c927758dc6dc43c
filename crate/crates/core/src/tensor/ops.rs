//! Differentiable operations recorded on a [`Graph`].
//!
//! Only the operations the model family needs are provided. Broadcasting is
//! limited to a right operand whose shape is a suffix of the left operand's
//! shape (e.g. a bias `[d]` against activations `[B, L, d]`).

use serde::{Deserialize, Serialize};

use super::graph::{grad_buf, Node};
use super::kernels::{self, gemm};
use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::mamba::scan;

/// Which linear-recurrence evaluator a Mamba layer uses.
///
/// `Sequential` runs the fused single-pass recurrence, which is the fastest
/// choice on few cores. `Parallel` builds the scan from the Blelloch
/// up/down-sweep so each level can be split across threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

pub(crate) enum Op<T> {
    Leaf,
    Released,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        inner: usize,
    },
    Mul {
        a: Var,
        b: Var,
        inner: usize,
    },
    Exp {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    CausalSoftmax {
        x: Var,
        len: usize,
        scale: T,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        d: usize,
        inv_rms: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Var,
        batch: usize,
        len: usize,
        channels: usize,
        k: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        v: usize,
    },
    Reshape {
        x: Var,
    },
    SliceLast {
        x: Var,
        start: usize,
        width: usize,
        last: usize,
    },
    TransposeLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Permute0213 {
        x: Var,
        dims: [usize; 4],
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    PickColumns {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
        width: usize,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    OuterExpand {
        delta: Var,
        a: Var,
        c: usize,
        s: usize,
    },
    Outer {
        x: Var,
        b: Var,
        c: usize,
        s: usize,
    },
    ContractState {
        h: Var,
        cv: Var,
        c: usize,
        s: usize,
    },
    Scan {
        a: Var,
        b: Var,
        batch: usize,
        len: usize,
        lanes: usize,
        mode: ScanMode,
    },
    Rope {
        x: Var,
        len: usize,
        dh: usize,
        base: f64,
    },
    SelectiveScan {
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        u: Var,
        dims: [usize; 4],
        h: Vec<T>,
        abar: Vec<T>,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Released => vec![],
            MatMul { a, b, .. } | Add { a, b, .. } | Mul { a, b, .. } => vec![*a, *b],
            Exp { x }
            | Softplus { x }
            | Silu { x }
            | Sigmoid { x }
            | Scale { x, .. }
            | SumAll { x }
            | MeanAll { x }
            | Softmax { x, .. }
            | CausalSoftmax { x, .. }
            | Reshape { x }
            | SliceLast { x, .. }
            | TransposeLast2 { x, .. }
            | Permute0213 { x, .. }
            | GatherRows { x, .. }
            | ScatterRows { x, .. }
            | PickColumns { x, .. }
            | MeanRows { x, .. }
            | Rope { x, .. } => vec![*x],
            RmsNorm { x, gain, .. } => vec![*x, *gain],
            Conv { x, w, bias, .. } => vec![*x, *w, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatRows { parts } => parts.clone(),
            ScaleRows { x, s, .. } => vec![*x, *s],
            OuterExpand { delta, a, .. } => vec![*delta, *a],
            Outer { x, b, .. } => vec![*x, *b],
            ContractState { h, cv, .. } => vec![*h, *cv],
            Scan { a, b, .. } => vec![*a, *b],
            SelectiveScan {
                delta, a, b, c, u, ..
            } => vec![*delta, *a, *b, *c, *u],
        }
    }

    /// Accumulates input gradients given the output gradient `g`.
    pub(crate) fn backward(
        &self,
        nodes: &[Node<'_, T>],
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: &Var| nodes[v.0].value.data();
        match self {
            Op::Leaf | Op::Released => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (val(a), val(b));
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for i in 0..batch {
                        let bi = if *shared_b {
                            bv
                        } else {
                            &bv[i * k * n..(i + 1) * k * n]
                        };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            bi,
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            T::one(),
                        );
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    if *shared_b {
                        gemm(k, batch * m, n, av, true, g, false, db, T::one());
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                T::one(),
                            );
                        }
                    }
                }
            }
            Op::Add { a, b, inner } => {
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    for chunk in g.chunks(*inner) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul { a, b, inner } => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for (dchunk, gchunk) in da.chunks_mut(*inner).zip(g.chunks(*inner)) {
                        for ((d, &gv), &bb) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                            *d = *d + gv * bb;
                        }
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    for (gchunk, achunk) in g.chunks(*inner).zip(av.chunks(*inner)) {
                        for ((d, &gv), &aa) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d = *d + gv * aa;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    zip3(dx, g, out.data(), |gv, y| gv * y);
                }
            }
            Op::Softplus { x } => {
                let xv = val(x);
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    zip3(dx, g, xv, |gv, xx| gv * kernels::sigmoid(xx));
                }
            }
            Op::Silu { x } => {
                let xv = val(x);
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    zip3(dx, g, xv, |gv, xx| {
                        let s = kernels::sigmoid(xx);
                        gv * (s + xx * s * (T::one() - s))
                    });
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    zip3(dx, g, out.data(), |gv, y| gv * y * (T::one() - y));
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + *c * gv;
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let s = g[0] / T::c(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Softmax { x, n } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for ((y, gr), d) in out
                        .data()
                        .chunks(*n)
                        .zip(g.chunks(*n))
                        .zip(dx.chunks_mut(*n))
                    {
                        kernels::softmax_row_backward(y, gr, d, T::one());
                    }
                }
            }
            Op::CausalSoftmax { x, len, scale } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let len = *len;
                    for ((y, gr), d) in out
                        .data()
                        .chunks(len)
                        .zip(g.chunks(len))
                        .zip(dx.chunks_mut(len))
                    {
                        kernels::softmax_row_backward(y, gr, d, *scale);
                    }
                }
            }
            Op::RmsNorm {
                x,
                gain,
                d,
                inv_rms,
            } => {
                let d = *d;
                let (xv, gv) = (val(x), val(gain));
                if let Some(dgain) = grad_buf(grads, nodes, *gain) {
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            dgain[j] = dgain[j] + gr[j] * xr[j] * r;
                        }
                    }
                }
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let inv_d = T::one() / T::c(d as f64);
                    for (((xr, gr), dr), &r) in xv
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .zip(inv_rms)
                    {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + gr[j] * gv[j] * xr[j] * r;
                        }
                        let m = dot * inv_d;
                        for j in 0..d {
                            let xh = xr[j] * r;
                            dr[j] = dr[j] + r * (gr[j] * gv[j] - xh * m);
                        }
                    }
                }
            }
            Op::Conv {
                x,
                w,
                bias,
                batch,
                len,
                channels,
                k,
            } => {
                let (len, ch, k) = (*len, *channels, *k);
                let (xv, wv) = (val(x), val(w));
                let seq = len * ch;
                if let Some(dbias) = grad_buf(grads, nodes, *bias) {
                    for row in g.chunks(ch) {
                        add_into(dbias, row);
                    }
                }
                if let Some(dw) = grad_buf(grads, nodes, *w) {
                    for b in 0..*batch {
                        let (xs, gs) = (&xv[b * seq..(b + 1) * seq], &g[b * seq..(b + 1) * seq]);
                        for t in 0..len {
                            for j in 0..k.min(t + 1) {
                                for c in 0..ch {
                                    dw[c * k + j] =
                                        dw[c * k + j] + gs[t * ch + c] * xs[(t - j) * ch + c];
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for b in 0..*batch {
                        let gs = &g[b * seq..(b + 1) * seq];
                        let ds = &mut dx[b * seq..(b + 1) * seq];
                        for t in 0..len {
                            for j in 0..k.min(t + 1) {
                                for c in 0..ch {
                                    ds[(t - j) * ch + c] =
                                        ds[(t - j) * ch + c] + wv[c * k + j] * gs[t * ch + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                v,
            } => {
                if let Some(dl) = grad_buf(grads, nodes, *logits) {
                    let s = g[0] / T::c(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..*v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * v + j] = dl[r * v + j] + s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    add_into(dx, g);
                }
            }
            Op::SliceLast {
                x,
                start,
                width,
                last,
            } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (drow, grow) in dx.chunks_mut(*last).zip(g.chunks(*width)) {
                        add_into(&mut drow[*start..*start + *width], grow);
                    }
                }
            }
            Op::TransposeLast2 {
                x,
                batch,
                rows,
                cols,
            } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let (r, c) = (*rows, *cols);
                    for b in 0..*batch {
                        for i in 0..r {
                            for j in 0..c {
                                let d = &mut dx[b * r * c + i * c + j];
                                *d = *d + g[b * r * c + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Permute0213 { x, dims } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let [a, b, c, d] = *dims;
                    for i in 0..a {
                        for j in 0..b {
                            for l in 0..c {
                                let src = ((i * c + l) * b + j) * d;
                                let dst = ((i * b + j) * c + l) * d;
                                add_into(&mut dx[dst..dst + d], &g[src..src + d]);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx, width } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(
                            &mut dx[i * width..(i + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                }
            }
            Op::ScatterRows { x, idx, width } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(
                            &mut dx[r * width..(r + 1) * width],
                            &g[i * width..(i + 1) * width],
                        );
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(dp) = grad_buf(grads, nodes, *p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::PickColumns { x, idx, cols } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        dx[r * cols + c] = dx[r * cols + c] + g[r];
                    }
                }
            }
            Op::ScaleRows { x, s, width } => {
                let (xv, sv) = (val(x), val(s));
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for ((drow, grow), &sc) in dx.chunks_mut(*width).zip(g.chunks(*width)).zip(sv) {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv * sc;
                        }
                    }
                }
                if let Some(ds) = grad_buf(grads, nodes, *s) {
                    for ((d, grow), xrow) in
                        ds.iter_mut().zip(g.chunks(*width)).zip(xv.chunks(*width))
                    {
                        *d = *d + dot(grow, xrow);
                    }
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let inv = T::one() / T::c(*rows as f64);
                    for drow in dx.chunks_mut(*cols) {
                        for (d, &gv) in drow.iter_mut().zip(g) {
                            *d = *d + gv * inv;
                        }
                    }
                }
            }
            Op::OuterExpand { delta, a, c, s } => {
                let (c, s) = (*c, *s);
                let (dv, av) = (val(delta), val(a));
                if let Some(dd) = grad_buf(grads, nodes, *delta) {
                    for (drow, grow) in dd.chunks_mut(c).zip(g.chunks(c * s)) {
                        for ci in 0..c {
                            drow[ci] = drow[ci]
                                + dot(&grow[ci * s..(ci + 1) * s], &av[ci * s..(ci + 1) * s]);
                        }
                    }
                }
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for (drow, grow) in dv.chunks(c).zip(g.chunks(c * s)) {
                        for ci in 0..c {
                            let dval = drow[ci];
                            for (d, &gv) in da[ci * s..(ci + 1) * s]
                                .iter_mut()
                                .zip(&grow[ci * s..(ci + 1) * s])
                            {
                                *d = *d + gv * dval;
                            }
                        }
                    }
                }
            }
            Op::Outer { x, b, c, s } => {
                let (c, s) = (*c, *s);
                let (xv, bv) = (val(x), val(b));
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for ((drow, grow), brow) in
                        dx.chunks_mut(c).zip(g.chunks(c * s)).zip(bv.chunks(s))
                    {
                        for ci in 0..c {
                            drow[ci] = drow[ci] + dot(&grow[ci * s..(ci + 1) * s], brow);
                        }
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    for ((drow, grow), xrow) in
                        db.chunks_mut(s).zip(g.chunks(c * s)).zip(xv.chunks(c))
                    {
                        for ci in 0..c {
                            let xval = xrow[ci];
                            for (d, &gv) in drow.iter_mut().zip(&grow[ci * s..(ci + 1) * s]) {
                                *d = *d + gv * xval;
                            }
                        }
                    }
                }
            }
            Op::ContractState { h, cv, c, s } => {
                let (c, s) = (*c, *s);
                let (hv, cvv) = (val(h), val(cv));
                if let Some(dh) = grad_buf(grads, nodes, *h) {
                    for ((drow, grow), crow) in
                        dh.chunks_mut(c * s).zip(g.chunks(c)).zip(cvv.chunks(s))
                    {
                        for ci in 0..c {
                            let gval = grow[ci];
                            for (d, &cc) in drow[ci * s..(ci + 1) * s].iter_mut().zip(crow) {
                                *d = *d + gval * cc;
                            }
                        }
                    }
                }
                if let Some(dc) = grad_buf(grads, nodes, *cv) {
                    for ((drow, grow), hrow) in
                        dc.chunks_mut(s).zip(g.chunks(c)).zip(hv.chunks(c * s))
                    {
                        for ci in 0..c {
                            let gval = grow[ci];
                            for (d, &hh) in drow.iter_mut().zip(&hrow[ci * s..(ci + 1) * s]) {
                                *d = *d + gval * hh;
                            }
                        }
                    }
                }
            }
            Op::Scan {
                a,
                b,
                batch,
                len,
                lanes,
                mode,
            } => {
                let (batch, len, lanes) = (*batch, *len, *lanes);
                let av = val(a);
                let h = out.data();
                // Reverse-time recurrence: gh_t = g_t + a_{t+1} ⊙ gh_{t+1}.
                let seq = len * lanes;
                let mut ra = vec![T::zero(); av.len()];
                let mut rg = vec![T::zero(); g.len()];
                for bi in 0..batch {
                    for s in 0..len {
                        let t = len - 1 - s;
                        let dst = bi * seq + s * lanes;
                        rg[dst..dst + lanes]
                            .copy_from_slice(&g[bi * seq + t * lanes..bi * seq + (t + 1) * lanes]);
                        if s > 0 {
                            let src = bi * seq + (t + 1) * lanes;
                            ra[dst..dst + lanes].copy_from_slice(&av[src..src + lanes]);
                        }
                    }
                }
                let mut rgh = vec![T::zero(); g.len()];
                match mode {
                    ScanMode::Sequential => {
                        scan::scan_sequential(&ra, &rg, batch, len, lanes, &mut rgh)
                    }
                    ScanMode::Parallel => {
                        scan::scan_parallel(&ra, &rg, batch, len, lanes, &mut rgh)
                    }
                }
                let gh_at = |bi: usize, t: usize| {
                    let s = len - 1 - t;
                    &rgh[bi * seq + s * lanes..bi * seq + (s + 1) * lanes]
                };
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    for bi in 0..batch {
                        for t in 0..len {
                            add_into(
                                &mut db[bi * seq + t * lanes..bi * seq + (t + 1) * lanes],
                                gh_at(bi, t),
                            );
                        }
                    }
                }
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for bi in 0..batch {
                        for t in 1..len {
                            let hp = &h[bi * seq + (t - 1) * lanes..bi * seq + t * lanes];
                            let d = &mut da[bi * seq + t * lanes..bi * seq + (t + 1) * lanes];
                            for ((dd, &gg), &hh) in d.iter_mut().zip(gh_at(bi, t)).zip(hp) {
                                *dd = *dd + gg * hh;
                            }
                        }
                    }
                }
            }
            Op::SelectiveScan {
                delta,
                a,
                b,
                c,
                u,
                dims,
                h,
                abar,
            } => {
                let [batch, len, ed, ds] = *dims;
                let (dv, av, bv, cv, uv) = (val(delta), val(a), val(b), val(c), val(u));
                let mut g_delta = vec![T::zero(); dv.len()];
                let mut g_a = vec![T::zero(); av.len()];
                let mut g_b = vec![T::zero(); bv.len()];
                let mut g_c = vec![T::zero(); cv.len()];
                let mut g_u = vec![T::zero(); uv.len()];
                let mut gh = vec![T::zero(); ed * ds];
                let zeros = vec![T::zero(); ed * ds];
                for bi in 0..batch {
                    gh.fill(T::zero());
                    for t in (0..len).rev() {
                        let row = bi * len + t;
                        let (brow, crow) =
                            (&bv[row * ds..(row + 1) * ds], &cv[row * ds..(row + 1) * ds]);
                        let h_cur = &h[row * ed * ds..(row + 1) * ed * ds];
                        let h_prev = if t > 0 {
                            &h[(row - 1) * ed * ds..row * ed * ds]
                        } else {
                            &zeros[..]
                        };
                        let ab_all = &abar[row * ed * ds..(row + 1) * ed * ds];
                        let gb = &mut g_b[row * ds..(row + 1) * ds];
                        let gc = &mut g_c[row * ds..(row + 1) * ds];
                        for ch in 0..ed {
                            let gy = g[row * ed + ch];
                            let dl = dv[row * ed + ch];
                            let uu = uv[row * ed + ch];
                            let du = dl * uu;
                            let r = ch * ds..(ch + 1) * ds;
                            let (hs, hp, ab) =
                                (&h_cur[r.clone()], &h_prev[r.clone()], &ab_all[r.clone()]);
                            let arow = &av[r.clone()];
                            let ga = &mut g_a[r.clone()];
                            let ghs = &mut gh[r];
                            let (mut gd, mut gu) = (T::zero(), T::zero());
                            for s in 0..ds {
                                let gss = ghs[s] + gy * crow[s];
                                gc[s] = gc[s] + gy * hs[s];
                                let gab = gss * hp[s] * ab[s];
                                gd = gd + gab * arow[s] + gss * uu * brow[s];
                                ga[s] = ga[s] + gab * dl;
                                gu = gu + gss * dl * brow[s];
                                gb[s] = gb[s] + gss * du;
                                ghs[s] = gss * ab[s];
                            }
                            g_delta[row * ed + ch] = gd;
                            g_u[row * ed + ch] = gu;
                        }
                    }
                }
                for (v, gv) in [(delta, g_delta), (a, g_a), (b, g_b), (c, g_c), (u, g_u)] {
                    if let Some(buf) = grad_buf(grads, nodes, *v) {
                        add_into(buf, &gv);
                    }
                }
            }
            Op::Rope { x, len, dh, base } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    let table = rope_table::<T>(*len, *dh, *base);
                    for (drow, grow) in dx.chunks_mut(*len * *dh).zip(g.chunks(*len * *dh)) {
                        rope_apply(grow, drow, &table, *len, *dh, true);
                    }
                }
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn zip3<T: Element>(dst: &mut [T], g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d = *d + f(gv, o);
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `(cos, sin)` per position and rotation pair.
fn rope_table<T: Element>(len: usize, dh: usize, base: f64) -> Vec<(T, T)> {
    let half = dh / 2;
    let mut table = Vec::with_capacity(len * half);
    for pos in 0..len {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / dh as f64);
            let angle = pos as f64 * theta;
            table.push((T::c(angle.cos()), T::c(angle.sin())));
        }
    }
    table
}

/// Rotates interleaved pairs `(2i, 2i+1)`; `inverse` rotates by the negated angle
/// and accumulates into `out` instead of overwriting.
fn rope_apply<T: Element>(
    x: &[T],
    out: &mut [T],
    table: &[(T, T)],
    len: usize,
    dh: usize,
    inverse: bool,
) {
    let half = dh / 2;
    for pos in 0..len {
        for i in 0..half {
            let (cos, sin) = table[pos * half + i];
            let j = pos * dh + 2 * i;
            let (x0, x1) = (x[j], x[j + 1]);
            if inverse {
                out[j] = out[j] + x0 * cos + x1 * sin;
                out[j + 1] = out[j + 1] - x0 * sin + x1 * cos;
            } else {
                out[j] = x0 * cos - x1 * sin;
                out[j + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'a, T: Element> Graph<'a, T> {
    /// Contraction `[.., m, k] · [k, n]` (shared right operand) or
    /// `[.., m, k] · [.., k, n]` (matching leading dimensions).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, T::zero());
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        T::zero(),
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o = *o + v;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b, inner }))
    }

    /// `a ⊙ b`, where `b`'s shape is a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o = *o * v;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b, inner }))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        self.push(out, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, kernels::softplus, Op::Softplus { x })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * kernels::sigmoid(v), Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        self.map(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let c = -T::one();
        self.map(x, |v| -v, Op::Scale { x, c })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |acc, &e| acc + e) / T::c(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { x })
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op,
                msg: format!("non-finite input {bad}"),
            });
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis whose normalizer is summed in ascending
    /// order, so permuting a row's entries permutes the output bit-exactly.
    pub fn softmax_canonical(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, canonical: bool) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let v = self.value(x);
        let n = last_dim(v.shape());
        let mut out = vec![T::zero(); v.numel()];
        for (row, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(row, o, canonical);
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, n }))
    }

    /// Row softmax of `scale · x` over `[.., L, L]` with entries above the
    /// diagonal masked out (their outputs are exactly zero).
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.check_finite("causal_softmax", x)?;
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal_softmax", s, &[]));
        }
        let len = s[s.len() - 1];
        let scale = T::c(scale);
        let mut out = vec![T::zero(); v.numel()];
        let mut scaled = vec![T::zero(); len];
        for (r, (row, o)) in v.data().chunks(len).zip(out.chunks_mut(len)).enumerate() {
            let i = r % len;
            for j in 0..=i {
                scaled[j] = row[j] * scale;
            }
            kernels::softmax_row(&scaled[..=i], &mut o[..=i], false);
        }
        let shape = s.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::CausalSoftmax { x, len, scale },
        ))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        let d = last_dim(sx);
        if sg != [d] {
            return Err(Error::shape("rmsnorm", sx, sg));
        }
        let eps = T::c(eps);
        let (xv, gv) = (self.value(x).data(), self.value(gain).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::c(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            for j in 0..d {
                o[j] = row[j] * r * gv[j];
            }
            inv_rms.push(r);
        }
        let shape = sx.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::RmsNorm {
                x,
                gain,
                d,
                inv_rms,
            },
        ))
    }

    /// Depthwise causal convolution of `x: [B, L, C]` with `kernel: [C, k]` and
    /// `bias: [C]`: `y[t] = bias + Σ_j kernel[:, j] ⊙ x[t − j]`.
    pub fn conv1d_depthwise_causal(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[2] || sb != [sx[2]] {
            return Err(Error::shape("conv1d_depthwise_causal", sx, sk));
        }
        let (batch, len, channels, k) = (sx[0], sx[1], sx[2], sk[1]);
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); xv.len()];
        let seq = len * channels;
        for b in 0..batch {
            kernels::conv_causal_seq(
                &xv[b * seq..(b + 1) * seq],
                wv,
                bv,
                len,
                channels,
                k,
                &mut out[b * seq..(b + 1) * seq],
            );
        }
        let shape = sx.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv {
                x,
                w: kernel,
                bias,
                batch,
                len,
                channels,
                k,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits: [N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, (row, p)) in lv.chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
            let lse = max + sum.ln();
            total += (lse - row[targets[r]]).f64();
            kernels::softmax_row(row, p, false);
        }
        let loss = T::c(total / targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                v,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = last_dim(&s);
        if width == 0 || start + width > last {
            return Err(Error::shape("slice_last", &s, &[start, width]));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("nonempty") = width;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SliceLast {
                x,
                start,
                width,
                last,
            },
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            for i in 0..rows {
                for j in 0..cols {
                    out[b * rows * cols + j * rows + i] = v[b * rows * cols + i * cols + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::TransposeLast2 {
                x,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// `[A, B, C, D] → [A, C, B, D]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [a, b, c, d] = s[..] else {
            return Err(Error::shape("permute_0213", &s, &[]));
        };
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for i in 0..a {
            for j in 0..b {
                for l in 0..c {
                    let src = ((i * b + j) * c + l) * d;
                    let dst = ((i * c + l) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&v[src..src + d]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![a, c, b, d], out),
            Op::Permute0213 {
                x,
                dims: [a, b, c, d],
            },
        ))
    }

    /// Rows `idx` of `x: [R, ..]`, stacked into `[idx.len(), ..]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = s[0];
        let width: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[rows, ..]` tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s[0] != idx.len() {
            return Err(Error::shape("scatter_rows", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "scatter_rows",
                index: bad,
                bound: rows,
            });
        }
        let width: usize = s[1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &e) in out[i * width..(i + 1) * width]
                .iter_mut()
                .zip(&v[r * width..(r + 1) * width])
            {
                *o = *o + e;
            }
        }
        let mut shape = s;
        shape[0] = rows;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Stacks tensors with equal trailing shape along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// `out[n] = x[n, idx[n]]` for `x: [N, C]`.
    pub fn pick_columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape("pick_columns", &s, &[idx.len()]));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Index {
                op: "pick_columns",
                index: bad,
                bound: cols,
            });
        }
        let v = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| v[r * cols + c])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::PickColumns {
                x,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// `out[n, :] = x[n, :] · s[n]` for `x: [N, ..]`, `s: [N]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if ss != [sx[0]] {
            return Err(Error::shape("scale_rows", &sx, &ss));
        }
        let width: usize = sx[1..].iter().product();
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &c) in out.chunks_mut(width).zip(sv) {
            for o in row {
                *o = *o * c;
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::ScaleRows { x, s, width }))
    }

    /// Column means of `x: [N, C]`, shape `[C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![T::zero(); cols];
        for row in self.value(x).data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::c(rows as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        Ok(self.push(
            Tensor::from_parts(vec![cols], out),
            Op::MeanRows { x, rows, cols },
        ))
    }

    /// `out[.., c, s] = delta[.., c] · a[c, s]`.
    pub fn outer_expand(&mut self, delta: Var, a: Var) -> Result<Var> {
        let (sd, sa) = (self.shape(delta).to_vec(), self.shape(a).to_vec());
        if sa.len() != 2 || last_dim(&sd) != sa[0] {
            return Err(Error::shape("outer_expand", &sd, &sa));
        }
        let (c, s) = (sa[0], sa[1]);
        let (dv, av) = (self.value(delta).data(), self.value(a).data());
        let mut out = Vec::with_capacity(dv.len() * s);
        for row in dv.chunks(c) {
            for ci in 0..c {
                out.extend(av[ci * s..(ci + 1) * s].iter().map(|&x| row[ci] * x));
            }
        }
        let mut shape = sd;
        shape.push(s);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::OuterExpand { delta, a, c, s },
        ))
    }

    /// Per-position outer product `out[.., c, s] = x[.., c] · b[.., s]`.
    pub fn outer(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != sb.len() || sx[..sx.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("outer", &sx, &sb));
        }
        let (c, s) = (last_dim(&sx), last_dim(&sb));
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xv.len() * s);
        for (xrow, brow) in xv.chunks(c).zip(bv.chunks(s)) {
            for &xc in xrow {
                out.extend(brow.iter().map(|&bb| xc * bb));
            }
        }
        let mut shape = sx;
        shape.push(s);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Outer { x, b, c, s }))
    }

    /// `out[.., c] = Σ_s h[.., c, s] · cv[.., s]`.
    pub fn contract_state(&mut self, h: Var, cv: Var) -> Result<Var> {
        let (sh, sc) = (self.shape(h).to_vec(), self.shape(cv).to_vec());
        if sh.len() != sc.len() + 1
            || sh[..sh.len() - 2] != sc[..sc.len() - 1]
            || last_dim(&sh) != last_dim(&sc)
        {
            return Err(Error::shape("contract_state", &sh, &sc));
        }
        let (c, s) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let (hv, cvv) = (self.value(h).data(), self.value(cv).data());
        let mut out = Vec::with_capacity(hv.len() / s);
        for (hrow, crow) in hv.chunks(c * s).zip(cvv.chunks(s)) {
            for ci in 0..c {
                out.push(dot(&hrow[ci * s..(ci + 1) * s], crow));
            }
        }
        let shape = sh[..sh.len() - 1].to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ContractState { h, cv, c, s },
        ))
    }

    /// Linear recurrence `h_t = a_t ⊙ h_{t−1} + b_t`, `h_{−1} = 0`, along axis 1
    /// of `[B, L, ..]` tensors.
    pub fn scan(&mut self, a: Var, b: Var, mode: ScanMode) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() < 2 {
            return Err(Error::shape("scan", &sa, &sb));
        }
        let (batch, len) = (sa[0], sa[1]);
        let lanes: usize = sa[2..].iter().product();
        let mut h = vec![T::zero(); self.value(a).numel()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        match mode {
            ScanMode::Sequential => scan::scan_sequential(av, bv, batch, len, lanes, &mut h),
            ScanMode::Parallel => scan::scan_parallel(av, bv, batch, len, lanes, &mut h),
        }
        Ok(self.push(
            Tensor::from_parts(sa, h),
            Op::Scan {
                a,
                b,
                batch,
                len,
                lanes,
                mode,
            },
        ))
    }

    /// Fused selective scan: with `Abar = exp(delta ⊗ a)` and
    /// `Bbar_u = (delta ⊙ u) ⊗ b`, runs `h_t = Abar_t ⊙ h_{t−1} + Bbar_u_t` and
    /// returns `y_t = Σ_s h_t ⊙ c_t`, without materializing the discretized
    /// tensors. `delta, u: [B, L, Ed]`, `a: [Ed, ds]`, `b, c: [B, L, ds]`.
    pub fn selective_scan(&mut self, delta: Var, a: Var, b: Var, c: Var, u: Var) -> Result<Var> {
        let sd = self.shape(delta).to_vec();
        let sa = self.shape(a).to_vec();
        if sd.len() != 3 || sa.len() != 2 || sa[0] != sd[2] || self.shape(u) != sd.as_slice() {
            return Err(Error::shape("selective_scan", &sd, &sa));
        }
        let (batch, len, ed, ds) = (sd[0], sd[1], sd[2], sa[1]);
        for v in [b, c] {
            if self.shape(v) != [batch, len, ds] {
                return Err(Error::shape(
                    "selective_scan",
                    self.shape(v),
                    &[batch, len, ds],
                ));
            }
        }
        let (dv, av, bv, cv, uv) = (
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(u).data(),
        );
        let mut h = vec![T::zero(); batch * len * ed * ds];
        let mut abar = vec![T::zero(); batch * len * ed * ds];
        let mut y = vec![T::zero(); batch * len * ed];
        let zeros = vec![T::zero(); ds];
        for bi in 0..batch {
            for t in 0..len {
                let row = bi * len + t;
                let (brow, crow) = (&bv[row * ds..(row + 1) * ds], &cv[row * ds..(row + 1) * ds]);
                let (past, rest) = h.split_at_mut(row * ed * ds);
                let cur_all = &mut rest[..ed * ds];
                let prev_all = if t > 0 {
                    &past[(row - 1) * ed * ds..]
                } else {
                    &past[..0]
                };
                let ab_all = &mut abar[row * ed * ds..(row + 1) * ed * ds];
                for ch in 0..ed {
                    let dl = dv[row * ed + ch];
                    let du = dl * uv[row * ed + ch];
                    let arow = &av[ch * ds..(ch + 1) * ds];
                    let prev = if t > 0 {
                        &prev_all[ch * ds..(ch + 1) * ds]
                    } else {
                        &zeros[..]
                    };
                    let ab = &mut ab_all[ch * ds..(ch + 1) * ds];
                    for s in 0..ds {
                        ab[s] = (dl * arow[s]).exp();
                    }
                    let cur = &mut cur_all[ch * ds..(ch + 1) * ds];
                    let mut acc = T::zero();
                    for s in 0..ds {
                        let hs = ab[s] * prev[s] + du * brow[s];
                        cur[s] = hs;
                        acc = acc + hs * crow[s];
                    }
                    y[row * ed + ch] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, len, ed], y),
            Op::SelectiveScan {
                delta,
                a,
                b,
                c,
                u,
                dims: [batch, len, ed, ds],
                h,
                abar,
            },
        ))
    }

    /// Rotary position embedding over `[.., L, dh]`, positions taken from axis −2.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || last_dim(&s) % 2 != 0 {
            return Err(Error::shape("rope", &s, &[]));
        }
        let (len, dh) = (s[s.len() - 2], s[s.len() - 1]);
        let table = rope_table::<T>(len, dh, base);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for (row, o) in v.chunks(len * dh).zip(out.chunks_mut(len * dh)) {
            rope_apply(row, o, &table, len, dh, false);
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Rope { x, len, dh, base }))
    }
}
