//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations in topological order as they execute.
//! In [`Mode::Infer`] the same kernels run but nothing needed for a
//! backward pass is saved, so per-example losses can be computed at
//! forward-only cost (backward on an infer tape is an error).
//!
//! Per-example losses are the reduction primitive: [`Tape::cross_entropy`]
//! returns one loss per batch row, and optimizers reduce explicitly with
//! [`Tape::mean_subset`] over whichever index subset they selected.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Identity of a parameter tensor, stable across steps. Gradients are keyed
/// by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-parameter gradients from one backward pass, in parameter
/// registration order.
#[derive(Debug, Clone)]
pub struct GradientMap<E: Element = f64> {
    entries: Vec<(ParamId, Tensor<E>)>,
}

impl<E: Element> GradientMap<E> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(ParamId, Tensor<E>)] {
        &self.entries
    }
}

enum BackStep<E: Element> {
    MatMul { a: usize, b: usize },
    BiasAdd { x: usize, b: usize },
    Relu { x: usize },
    Conv2d { x: usize, w: usize, pad: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Reshape { x: usize },
    MeanSubset { x: usize, indices: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<E> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    needs_grad: bool,
    param: Option<ParamId>,
    back: Option<BackStep<E>>,
}

/// Records a computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in execution order, so every node's inputs
/// precede it and the backward pass is a single reverse sweep that visits
/// each node exactly once.
pub struct Tape<E: Element = f64> {
    mode: Mode,
    nodes: Vec<Node<E>>,
}

impl<E: Element> Tape<E> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Registers an input value. Gradients do not flow into leaves.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(Node {
            value,
            needs_grad: false,
            param: None,
            back: None,
        })
    }

    /// Registers a trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<E>) -> Var {
        let needs_grad = self.mode == Mode::Train;
        self.push(Node {
            value,
            needs_grad,
            param: Some(id),
            back: None,
        })
    }

    fn push(&mut self, node: Node<E>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<E>, needs_grad: bool, back: BackStep<E>, op: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {op}")));
        }
        let keep = self.mode == Mode::Train && needs_grad;
        Ok(self.push(Node {
            value,
            needs_grad: keep,
            param: None,
            back: if keep { Some(back) } else { None },
        }))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![E::ZERO; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bkn) in orow.iter_mut().zip(brow) {
                    *o += aik * bkn;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.record(
            Tensor::new(vec![m, n], out)?,
            needs,
            BackStep::MatMul { a: a.0, b: b.0 },
            "matmul",
        )
    }

    /// Adds a rank-1 bias to a `[B,F]` matrix (per column) or a `[B,C,H,W]`
    /// feature map (per channel).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if bv.rank() != 1 {
            return Err(Error::shape("bias_add", format!("bias rank {}", bv.rank())));
        }
        let blen = bv.shape()[0];
        let mut out = xv.data().to_vec();
        match xv.rank() {
            2 if xv.shape()[1] == blen => {
                let bd = bv.data();
                for row in out.chunks_mut(blen) {
                    for (o, &bj) in row.iter_mut().zip(bd) {
                        *o += bj;
                    }
                }
            }
            4 if xv.shape()[1] == blen => {
                let plane = xv.shape()[2] * xv.shape()[3];
                let bd = bv.data();
                for img in out.chunks_mut(blen * plane) {
                    for (c, &bc) in bd.iter().enumerate() {
                        for o in &mut img[c * plane..(c + 1) * plane] {
                            *o += bc;
                        }
                    }
                }
            }
            _ => {
                return Err(Error::shape(
                    "bias_add",
                    format!("input {:?} with bias [{}]", xv.shape(), blen),
                ))
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(b);
        self.record(
            Tensor::new(shape, out)?,
            needs,
            BackStep::BiasAdd { x: x.0, b: b.0 },
            "bias_add",
        )
    }

    /// Elementwise `max(0, x)`. The subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<E> = xv
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(shape, out)?, needs, BackStep::Relu { x: x.0 }, "relu")
    }

    /// 2-D convolution, stride 1, symmetric zero padding `pad`.
    /// Input `[B,Cin,H,W]`, kernel `[Cout,Cin,KH,KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (bsz, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let (ksize, osize) = (cin * kh * kw, oh * ow);
        let mut out = vec![E::ZERO; bsz * cout * osize];
        let (xd, kd) = (xv.data(), wv.data());
        // Convolution as matrix product per image: unroll receptive fields
        // into a [ksize, osize] column buffer (reused across images), then
        // out[co, :] = kernel_row[co, :] * cols. Long contiguous inner rows
        // vectorize far better than per-pixel taps.
        let mut cols = vec![E::ZERO; ksize * osize];
        for bi in 0..bsz {
            im2col(xd, &mut cols, bi, cin, h, wd, kh, kw, pad, oh, ow);
            for co in 0..cout {
                let krow = &kd[co * ksize..(co + 1) * ksize];
                let obase = (bi * cout + co) * osize;
                let orow = &mut out[obase..obase + osize];
                for (r, &kval) in krow.iter().enumerate() {
                    let crow = &cols[r * osize..(r + 1) * osize];
                    for (o, &c) in orow.iter_mut().zip(crow) {
                        *o += kval * c;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.record(
            Tensor::new(vec![bsz, cout, oh, ow], out)?,
            needs,
            BackStep::Conv2d { x: x.0, w: w.0, pad },
            "conv2d",
        )
    }

    /// 2x2 max pooling with stride 2. Height and width must be even.
    /// Ties resolve to the first maximum in row-major scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 || !xv.shape()[2].is_multiple_of(2) || !xv.shape()[3].is_multiple_of(2) {
            return Err(Error::shape(
                "max_pool2",
                format!("need [B,C,even,even], got {:?}", xv.shape()),
            ));
        }
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = vec![E::ZERO; bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane_idx in 0..bsz * c {
            let base = plane_idx * h * w;
            let obase = plane_idx * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + du) * w + 2 * ox + dv;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        self.record(
            Tensor::new(vec![bsz, c, oh, ow], out)?,
            needs,
            BackStep::MaxPool2 { x: x.0, argmax },
            "max_pool2",
        )
    }

    /// Reinterprets the data with a new shape of the same total length.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", xv.shape(), shape),
            ));
        }
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        let needs = self.needs(x);
        self.record(out, needs, BackStep::Reshape { x: x.0 }, "reshape")
    }

    /// Mean of the entries of a rank-1 tensor over an index subset.
    /// Returns a rank-0 scalar. Indices must be strictly ascending and in
    /// range; summation follows index order so results are reproducible.
    pub fn mean_subset(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 1 {
            return Err(Error::shape(
                "mean_subset",
                format!("need rank-1 losses, got {:?}", xv.shape()),
            ));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("mean_subset: empty index set".into()));
        }
        let n = xv.shape()[0];
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "mean_subset: index {i} out of range for length {n}"
                )));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(Error::InvalidArgument(
                        "mean_subset: indices must be strictly ascending".into(),
                    ));
                }
            }
            prev = Some(i);
        }
        let xd = xv.data();
        let mut acc = E::ZERO;
        for &i in indices {
            acc += xd[i];
        }
        let mean = acc / E::from_f64(indices.len() as f64);
        let needs = self.needs(x);
        self.record(
            Tensor::scalar(mean),
            needs,
            BackStep::MeanSubset {
                x: x.0,
                indices: indices.to_vec(),
            },
            "mean_subset",
        )
    }

    /// Per-example cross-entropy from logits `[B,C]` and class targets.
    /// Returns one loss per row; the log-sum-exp subtracts the row maximum
    /// so large logits do not overflow.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: target {t} out of range for {c} classes (row {i})"
                )));
            }
        }
        let ld = lv.data();
        let mut losses = vec![E::ZERO; b];
        let mut probs = vec![E::ZERO; b * c];
        for i in 0..b {
            let row = &ld[i * c..(i + 1) * c];
            let mut m = row[0];
            for &z in &row[1..] {
                m = m.maximum(z);
            }
            let mut denom = E::ZERO;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - m).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / denom;
            }
            // loss = log(sum exp(z - m)) + m - z_target
            losses[i] = denom.ln() + m - row[targets[i]];
        }
        let needs = self.needs(logits);
        self.record(
            Tensor::new(vec![b], losses)?,
            needs,
            BackStep::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Reverse pass from a rank-0 loss. Returns gradients for every
    /// parameter reachable from it. Errors on infer tapes and non-scalar
    /// inputs; output gradients are checked finite.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<E>> {
        if self.mode != Mode::Train {
            return Err(Error::NoTape);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.rank() != 0 {
            return Err(Error::shape(
                "backward",
                format!("loss must be rank-0, got {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[i].back {
                None => {
                    // Parameter or leaf: keep its gradient for collection.
                    grads[i] = Some(g);
                }
                Some(BackStep::MatMul { a, b }) => {
                    let (m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].needs_grad {
                        let bd = self.nodes[b].value.data();
                        let ga = ensure(&mut grads[a], m * k);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[kk * n..(kk + 1) * n];
                                let mut acc = E::ZERO;
                                for (gg, bb) in grow.iter().zip(brow) {
                                    acc += *gg * *bb;
                                }
                                ga[i2 * k + kk] += acc;
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.nodes[a].value.data();
                        let gb = ensure(&mut grads[b], k * n);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for kk in 0..k {
                                let aik = ad[i2 * k + kk];
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for (o, gg) in brow.iter_mut().zip(grow) {
                                    *o += aik * *gg;
                                }
                            }
                        }
                    }
                }
                Some(BackStep::BiasAdd { x, b }) => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    if self.nodes[x].needs_grad {
                        let gx = ensure(&mut grads[x], g.len());
                        for (o, gg) in gx.iter_mut().zip(&g) {
                            *o += *gg;
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let blen = self.nodes[b].value.len();
                        let gb = ensure(&mut grads[b], blen);
                        match xshape.len() {
                            2 => {
                                for row in g.chunks(blen) {
                                    for (o, gg) in gb.iter_mut().zip(row) {
                                        *o += *gg;
                                    }
                                }
                            }
                            _ => {
                                let plane = xshape[2] * xshape[3];
                                for img in g.chunks(blen * plane) {
                                    for (c, o) in gb.iter_mut().enumerate() {
                                        for gg in &img[c * plane..(c + 1) * plane] {
                                            *o += *gg;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Some(BackStep::Relu { x }) => {
                    if self.nodes[x].needs_grad {
                        let xd = self.nodes[x].value.data();
                        let gx = ensure(&mut grads[x], g.len());
                        for ((o, gg), xv) in gx.iter_mut().zip(&g).zip(xd) {
                            if *xv > E::ZERO {
                                *o += *gg;
                            }
                        }
                    }
                }
                Some(BackStep::Conv2d { x, w, pad }) => {
                    let xshape = self.nodes[x].value.shape().to_vec();
                    let wshape = self.nodes[w].value.shape().to_vec();
                    let (bsz, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                    let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
                    let need_x = self.nodes[x].needs_grad;
                    let need_w = self.nodes[w].needs_grad;
                    let xd = self.nodes[x].value.data();
                    let kd = self.nodes[w].value.data();
                    let (ksize, osize) = (cin * kh * kw, oh * ow);
                    let mut gx = vec![E::ZERO; if need_x { xd.len() } else { 0 }];
                    let mut gw = vec![E::ZERO; if need_w { kd.len() } else { 0 }];
                    // Reverse of the im2col product: dw accumulates row dot
                    // products against the rebuilt column buffer, dx gathers
                    // kernel-weighted gradient rows scattered back col2im.
                    let mut cols = vec![E::ZERO; ksize * osize];
                    let mut dcols = vec![E::ZERO; ksize * osize];
                    for bi in 0..bsz {
                        let gbase = bi * cout * osize;
                        if need_w {
                            im2col(xd, &mut cols, bi, cin, h, wd, kh, kw, pad, oh, ow);
                            for co in 0..cout {
                                let grow = &g[gbase + co * osize..gbase + (co + 1) * osize];
                                let wrow = &mut gw[co * ksize..(co + 1) * ksize];
                                for (r, wslot) in wrow.iter_mut().enumerate() {
                                    let crow = &cols[r * osize..(r + 1) * osize];
                                    let mut acc = E::ZERO;
                                    for (&gg, &cc) in grow.iter().zip(crow) {
                                        acc += gg * cc;
                                    }
                                    *wslot += acc;
                                }
                            }
                        }
                        if need_x {
                            for e in dcols.iter_mut() {
                                *e = E::ZERO;
                            }
                            for co in 0..cout {
                                let grow = &g[gbase + co * osize..gbase + (co + 1) * osize];
                                let krow = &kd[co * ksize..(co + 1) * ksize];
                                for (r, &kval) in krow.iter().enumerate() {
                                    let drow = &mut dcols[r * osize..(r + 1) * osize];
                                    for (d, &gg) in drow.iter_mut().zip(grow) {
                                        *d += kval * gg;
                                    }
                                }
                            }
                            col2im_add(&dcols, &mut gx, bi, cin, h, wd, kh, kw, pad, oh, ow);
                        }
                    }
                    if need_x {
                        let dst = ensure(&mut grads[x], gx.len());
                        for (o, v) in dst.iter_mut().zip(&gx) {
                            *o += *v;
                        }
                    }
                    if need_w {
                        let dst = ensure(&mut grads[w], gw.len());
                        for (o, v) in dst.iter_mut().zip(&gw) {
                            *o += *v;
                        }
                    }
                }
                Some(BackStep::MaxPool2 { x, ref argmax }) => {
                    if self.nodes[x].needs_grad {
                        let xlen = self.nodes[x].value.len();
                        let gx = ensure(&mut grads[x], xlen);
                        for (gg, &src) in g.iter().zip(argmax) {
                            gx[src] += *gg;
                        }
                    }
                }
                Some(BackStep::Reshape { x }) => {
                    if self.nodes[x].needs_grad {
                        let gx = ensure(&mut grads[x], g.len());
                        for (o, gg) in gx.iter_mut().zip(&g) {
                            *o += *gg;
                        }
                    }
                }
                Some(BackStep::MeanSubset { x, ref indices }) => {
                    if self.nodes[x].needs_grad {
                        let share = g[0] / E::from_f64(indices.len() as f64);
                        let xlen = self.nodes[x].value.len();
                        let gx = ensure(&mut grads[x], xlen);
                        for &i2 in indices {
                            gx[i2] += share;
                        }
                    }
                }
                Some(BackStep::CrossEntropy {
                    logits,
                    ref targets,
                    ref probs,
                }) => {
                    if self.nodes[logits].needs_grad {
                        let c = probs.len() / targets.len();
                        let gl = ensure(&mut grads[logits], probs.len());
                        for (i2, &t) in targets.iter().enumerate() {
                            let u = g[i2];
                            for j in 0..c {
                                let indicator = if j == t { E::ONE } else { E::ZERO };
                                gl[i2 * c + j] += u * (probs[i2 * c + j] - indicator);
                            }
                        }
                    }
                }
            }
        }

        // Collect parameter gradients in registration order, accumulating if
        // a parameter appears in the graph more than once. Buffers are moved
        // out of the tape, not copied.
        let mut entries: Vec<(ParamId, Tensor<E>)> = Vec::new();
        for (idx, slot) in grads.iter_mut().enumerate() {
            let pid = match self.nodes[idx].param {
                Some(pid) => pid,
                None => continue,
            };
            let buf = match slot.take() {
                Some(buf) => buf,
                None => continue,
            };
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {}", pid.0)));
            }
            if let Some(existing) = entries.iter_mut().find(|(p, _)| *p == pid) {
                let dst = existing.1.data_mut();
                for (o, v) in dst.iter_mut().zip(&buf) {
                    *o += *v;
                }
            } else {
                let shape = self.nodes[idx].value.shape().to_vec();
                entries.push((pid, Tensor::new(shape, buf)?));
            }
        }
        Ok(GradientMap { entries })
    }
}

/// Unrolls the receptive field of every output position of image `bi` into
/// `cols[ksize, oh*ow]` row-major; positions that fall into the zero padding
/// stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    xd: &[E],
    cols: &mut [E],
    bi: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let osize = oh * ow;
    for e in cols.iter_mut() {
        *e = E::ZERO;
    }
    for ci in 0..cin {
        let xbase = (bi * cin + ci) * h * w;
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let (oy0, oy1, ox0, ox1) = tap_bounds(u, v, pad, h, w, oh, ow);
                for oy in oy0..oy1 {
                    let iy = oy + u - pad;
                    let xoff = xbase + iy * w + ox0 + v - pad;
                    let coff = row * osize + oy * ow + ox0;
                    cols[coff..coff + (ox1 - ox0)]
                        .copy_from_slice(&xd[xoff..xoff + (ox1 - ox0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column-buffer gradients back onto the
/// input gradient of image `bi`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    dcols: &[E],
    gx: &mut [E],
    bi: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let osize = oh * ow;
    for ci in 0..cin {
        let xbase = (bi * cin + ci) * h * w;
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let (oy0, oy1, ox0, ox1) = tap_bounds(u, v, pad, h, w, oh, ow);
                for oy in oy0..oy1 {
                    let iy = oy + u - pad;
                    let xoff = xbase + iy * w + ox0 + v - pad;
                    let doff = row * osize + oy * ow + ox0;
                    for (o, &d) in gx[xoff..xoff + (ox1 - ox0)]
                        .iter_mut()
                        .zip(&dcols[doff..doff + (ox1 - ox0)])
                    {
                        *o += d;
                    }
                }
            }
        }
    }
}

/// Valid output row/column ranges for one convolution kernel tap (u, v):
/// output positions whose corresponding input index lands inside the
/// unpadded image.
fn tap_bounds(
    u: usize,
    v: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> (usize, usize, usize, usize) {
    let oy0 = pad.saturating_sub(u);
    let oy1 = (h + pad).saturating_sub(u).min(oh);
    let ox0 = pad.saturating_sub(v);
    let ox1 = (w + pad).saturating_sub(v).min(ow);
    (oy0, oy1.max(oy0), ox0, ox1.max(ox0))
}

fn ensure<E: Element>(slot: &mut Option<Vec<E>>, len: usize) -> &mut Vec<E> {
    if slot.is_none() {
        *slot = Some(vec![E::ZERO; len]);
    }
    slot.as_mut().unwrap()
}

/// Which coordinates a finite-difference check probes.
#[derive(Debug, Clone, Copy)]
pub enum CoordSample {
    All,
    /// Deterministic random subset, for large parameter vectors.
    Random { count: usize, seed: u64 },
}

/// Central-difference validation of an autodiff gradient.
///
/// Evaluates `(f(w+he) - f(w-he)) / 2h` per probed coordinate and returns
/// the maximum relative deviation from `autodiff_grad`. The denominator is
/// floored at 1e-4 so near-zero coordinates do not blow up the ratio.
pub fn finite_difference_check<E, F>(
    mut loss: F,
    params: &[E],
    autodiff_grad: &[E],
    step: E,
    coords: CoordSample,
) -> Result<f64>
where
    E: Element,
    F: FnMut(&[E]) -> Result<E>,
{
    let h = step.to_f64();
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument("invalid step".into()));
    }
    if params.len() != autodiff_grad.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{} params vs {} gradient entries", params.len(), autodiff_grad.len()),
        ));
    }
    let selected: Vec<usize> = match coords {
        CoordSample::All => (0..params.len()).collect(),
        CoordSample::Random { count, seed } => {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let mut idx: Vec<usize> = (0..params.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(count.min(params.len()));
            idx.sort_unstable();
            idx
        }
    };
    let mut scratch = params.to_vec();
    let mut worst = 0.0f64;
    for &i in &selected {
        let orig = scratch[i];
        scratch[i] = orig + step;
        let f_plus = loss(&scratch)?;
        scratch[i] = orig - step;
        let f_minus = loss(&scratch)?;
        scratch[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite("finite-difference loss evaluation".into()));
        }
        let fd = (f_plus.to_f64() - f_minus.to_f64()) / (2.0 * h);
        let ad = autodiff_grad[i].to_f64();
        let denom = fd.abs().max(ad.abs()).max(1e-4);
        let rel = (fd - ad).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new(Mode::Train);
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(t2(&[vec![3.0, 4.0]]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn infer_backward_is_no_tape() {
        let mut tape = Tape::new(Mode::Infer);
        let w = tape.param(ParamId(0), t2(&[vec![3.0]]));
        let y = tape.matmul(w, w).unwrap();
        let y = tape.reshape(y, &[1]).unwrap();
        let loss = tape.mean_subset(y, &[0]).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::NoTape)));
    }

    #[test]
    fn backward_quadratic() {
        // loss = w*w at w=3 -> d/dw = 6
        let mut tape = Tape::new(Mode::Train);
        let w = tape.param(ParamId(0), t2(&[vec![3.0]]));
        let y = tape.matmul(w, w).unwrap();
        let y = tape.reshape(y, &[1]).unwrap();
        let loss = tape.mean_subset(y, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new(Mode::Train);
        let w = tape.param(ParamId(0), t2(&[vec![3.0]]));
        let y = tape.matmul(w, w).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new(Mode::Train);
        let logits = tape.leaf(Tensor::new(vec![1, 10], vec![0.0f64; 10]).unwrap());
        let l = tape.cross_entropy(logits, &[4]).unwrap();
        let expected = (10.0f64).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_softmax() {
        // logits [0, ln 3], target 1: p(target) = 3/4, loss = -ln(0.75)
        let mut tape = Tape::new(Mode::Train);
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let l = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_no_overflow() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let l = tape.cross_entropy(logits, &[0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new(Mode::Train);
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        assert!(tape.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn mean_subset_gradient_shares() {
        let mut tape = Tape::new(Mode::Train);
        // Treat a 1x4 param as four per-example losses.
        let w = tape.param(ParamId(0), Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.reshape(w, &[4]).unwrap();
        let loss = tape.mean_subset(v, &[1, 3]).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 3.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn mean_subset_rejects_unsorted() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(tape.mean_subset(x, &[2, 1]).is_err());
        assert!(tape.mean_subset(x, &[]).is_err());
        assert!(tape.mean_subset(x, &[3]).is_err());
    }

    #[test]
    fn train_and_infer_values_match_bitwise() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let run = |mode: Mode| {
            let mut tape = Tape::new(mode);
            let xv = tape.leaf(x.clone());
            let wv = tape.param(ParamId(0), w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.relu(h).unwrap();
            tape.value(h).data().to_vec()
        };
        assert_eq!(run(Mode::Train), run(Mode::Infer));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new(Mode::Train);
            let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
            let w = tape.param(ParamId(0), Tensor::new(vec![2, 2], vec![0.5, 0.25, -0.125, 1.5]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let l = tape.cross_entropy(h, &[0, 1]).unwrap();
            let loss = tape.mean_subset(l, &[0, 1]).unwrap();
            let g = tape.backward(loss).unwrap();
            g.get(ParamId(0)).unwrap().data().to_vec()
        };
        let (a, b) = (run(), run());
        // Bitwise identical.
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fd_check_quadratic() {
        // f(w) = sum w_i^2, grad = 2w. Central differences are exact for
        // quadratics up to roundoff.
        let params = [1.0, -2.0, 0.5];
        let grad = [2.0, -4.0, 1.0];
        let err = finite_difference_check(
            |w: &[f64]| Ok(w.iter().map(|x| x * x).sum()),
            &params,
            &grad,
            1e-5,
            CoordSample::All,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn fd_check_invalid_step() {
        let err = finite_difference_check(
            |_: &[f64]| Ok(0.0),
            &[1.0],
            &[0.0],
            0.0,
            CoordSample::All,
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv2d_hand_value() {
        // 1x1x3x3 input, single 2x2 kernel, no padding.
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(
            Tensor::new(vec![1, 1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap(),
        );
        let k = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, k, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        // y[i,j] = x[i,j] + x[i+1,j+1]
        assert_eq!(tape.value(y).data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv2d_padding_preserves_size() {
        let mut tape = Tape::<f64>::new(Mode::Infer);
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 8, 8]));
        let k = tape.leaf(Tensor::zeros(vec![4, 3, 3, 3]));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn max_pool2_ties_take_first() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.param(
            ParamId(0),
            Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap(),
        );
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let flat = tape.reshape(y, &[1]).unwrap();
        let loss = tape.mean_subset(flat, &[0]).unwrap();
        let g = tape.backward(loss).unwrap();
        // All of the gradient goes to the first element of the window.
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool2_requires_even_dims() {
        let mut tape = Tape::<f64>::new(Mode::Infer);
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let big = tape.leaf(Tensor::new(vec![1, 1], vec![1e308]).unwrap());
        let big2 = tape.leaf(Tensor::new(vec![1, 1], vec![1e308]).unwrap());
        assert!(matches!(tape.matmul(big, big2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn subset_gradient_equals_mean_of_per_example_gradients() {
        // Linearity of the mean reduction, brute force for |Q| <= 8.
        let b = 8;
        let c = 3;
        let feat = 4;
        let mut rng = crate::rng::SplitMix64::new(99);
        let x = Tensor::new(
            vec![b, feat],
            (0..b * feat).map(|_| rng.next_symmetric(1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![feat, c],
            (0..feat * c).map(|_| rng.next_symmetric(1.0)).collect(),
        )
        .unwrap();
        let targets: Vec<usize> = (0..b).map(|_| rng.next_below(c)).collect();

        let grad_for = |subset: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new(Mode::Train);
            let xv = tape.leaf(x.clone());
            let wv = tape.param(ParamId(0), w.clone());
            let logits = tape.matmul(xv, wv).unwrap();
            let losses = tape.cross_entropy(logits, &targets).unwrap();
            let loss = tape.mean_subset(losses, subset).unwrap();
            let g = tape.backward(loss).unwrap();
            g.get(ParamId(0)).unwrap().data().to_vec()
        };

        // Per-example gradients, computed independently.
        let singles: Vec<Vec<f64>> = (0..b).map(|i| grad_for(&[i])).collect();
        // Every subset size up to the full batch of 8, a few subsets each.
        let mut subset_rng = crate::rng::SplitMix64::new(5);
        for size in 1..=b {
            for _ in 0..4 {
                let mut q: Vec<usize> = (0..b).collect();
                subset_rng.shuffle(&mut q);
                q.truncate(size);
                q.sort_unstable();
                let combined = grad_for(&q);
                let mut mean = vec![0.0; feat * c];
                for &i in &q {
                    for (m, v) in mean.iter_mut().zip(&singles[i]) {
                        *m += v / size as f64;
                    }
                }
                for (a, b2) in combined.iter().zip(&mean) {
                    assert!((a - b2).abs() < 1e-12, "|Q|={size}: {a} vs {b2}");
                }
            }
        }
    }

    #[test]
    fn f32_engine_works() {
        let mut tape = Tape::<f32>::new(Mode::Train);
        let w = tape.param(ParamId(0), Tensor::new(vec![1, 1], vec![3.0f32]).unwrap());
        let y = tape.matmul(w, w).unwrap();
        let y = tape.reshape(y, &[1]).unwrap();
        let loss = tape.mean_subset(y, &[0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[6.0f32]);
    }
}
