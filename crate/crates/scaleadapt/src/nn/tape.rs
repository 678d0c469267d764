//! Reverse-mode autodiff tape.
//!
//! Forward calls record nodes eagerly; `backward` walks the tape in reverse
//! and accumulates gradients only into subgraphs that reach a trainable leaf,
//! so frozen networks cost a forward pass plus input gradients only.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::types::IGNORE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Probability floor applied before logarithms of softmax outputs.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op<F> {
    Leaf,
    /// parents: [x, w] or [x, w, b]; `cols` is the stored im2col matrix for
    /// the whole batch.
    Conv2d { stride: usize, pad: usize, dilation: usize, kh: usize, kw: usize, cols: Vec<F> },
    /// Training-mode batch norm; parents: [x, gamma, beta].
    BatchNorm { mean: Vec<F>, invstd: Vec<F> },
    /// Eval-mode batch norm folded into per-channel y = scale * x + shift.
    ChannelAffine { scale: Vec<F> },
    LeakyRelu { slope: F },
    Add,
    /// Concatenate 4-D tensors along the channel axis.
    ConcatC,
    /// Bilinear resize of a 4-D tensor (half-pixel centers, edge clamp).
    Bilinear { oh: usize, ow: usize },
    AdaptiveAvgPool { oh: usize, ow: usize },
    /// Zero padding on the bottom/right of a 4-D tensor.
    PadBR,
    /// Top-left crop of a 4-D tensor.
    Crop { oh: usize, ow: usize },
    Reshape,
    /// Batched matmul over 3-D tensors [B, ., .] with optional transposes.
    BatchMatmul { ta: bool, tb: bool },
    /// Softmax over the last axis.
    SoftmaxLast,
    /// Softmax over the channel axis of a 4-D tensor.
    SoftmaxC,
    /// Mean over non-IGNORE pixels of -ln(clamp(p[label])); input is a
    /// 4-D probability tensor, labels are per batch pixel.
    NllProbs { labels: Vec<u8>, scored: usize },
    /// Mean binary cross-entropy toward the constant target z, computed
    /// from logits in the numerically stable form.
    BceLogitsMean { z: f64 },
    /// Scalar-weighted sum of same-shaped parents.
    WeightedSum { weights: Vec<f64> },
    /// N x C x H x W -> N x C spatial mean.
    GlobalAvgPool,
    /// Scalar projection sum_i coeffs[i] * x[i].
    DotConst { coeffs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    parents: Vec<Var>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    bound: HashMap<String, Var>,
    bound_order: Vec<String>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: HashMap::new(), bound_order: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, parents: Vec<Var>, op: Op<F>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter once per tape; repeated binds return the same
    /// leaf so gradients from multiple forward passes accumulate.
    pub fn bind_param(&mut self, name: &str, value: &Tensor<F>, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = if trainable { self.variable(value.clone()) } else { self.constant(value.clone()) };
        self.bound.insert(name.to_string(), v);
        self.bound_order.push(name.to_string());
        v
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Names of all bound parameters, in first-bind order.
    pub fn bound_names(&self) -> &[String] {
        &self.bound_order
    }

    // ---- forward ops ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let wshape = &self.value(w).shape;
        assert_eq!(wshape.len(), 4);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(cin, wcin, "conv input channels");
        let oh = conv_out(h, kh, stride, pad, dilation);
        let ow = conv_out(wd, kw, stride, pad, dilation);
        assert!(oh > 0 && ow > 0, "conv output degenerate");
        let ckk = cin * kh * kw;
        let osp = oh * ow;
        let mut cols = vec![F::zero(); n * ckk * osp];
        for i in 0..n {
            let xoff = i * cin * h * wd;
            im2col(
                &self.value(x).data[xoff..xoff + cin * h * wd],
                cin, h, wd, kh, kw, stride, pad, dilation, oh, ow,
                &mut cols[i * ckk * osp..(i + 1) * ckk * osp],
            );
        }
        let mut out = vec![F::zero(); n * cout * osp];
        {
            let wdata = &self.value(w).value_data();
            for i in 0..n {
                F::gemm(
                    cout, ckk, osp, F::one(),
                    wdata,
                    &cols[i * ckk * osp..(i + 1) * ckk * osp],
                    F::zero(),
                    &mut out[i * cout * osp..(i + 1) * cout * osp],
                );
            }
        }
        if let Some(bv) = b {
            let bd = self.value(bv).data.clone();
            assert_eq!(bd.len(), cout);
            for i in 0..n {
                for o in 0..cout {
                    let base = (i * cout + o) * osp;
                    for s in 0..osp {
                        out[base + s] += bd[o];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.push(
            Tensor::new(vec![n, cout, oh, ow], out),
            parents,
            Op::Conv2d { stride, pad, dilation, kh, kw, cols },
        )
    }

    /// Training-mode batch norm; returns (output, batch_mean, batch_var)
    /// so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<F>, Vec<F>) {
        let (n, c, h, w) = self.value(x).dims4();
        let m = n * h * w;
        assert!(m > 1, "batch norm needs more than one sample per channel");
        let sp = h * w;
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        {
            let xd = &self.value(x).data;
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * sp;
                    for s in 0..sp {
                        mean[ch] += xd[base + s];
                    }
                }
            }
            let inv_m = F::one() / F::from_f64(m as f64);
            for ch in 0..c {
                mean[ch] *= inv_m;
            }
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * sp;
                    for s in 0..sp {
                        let d = xd[base + s] - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for ch in 0..c {
                var[ch] *= inv_m;
            }
        }
        let invstd: Vec<F> =
            var.iter().map(|&v| F::one() / (v + F::from_f64(eps)).sqrt()).collect();
        let gd = self.value(gamma).data.clone();
        let bd = self.value(beta).data.clone();
        let mut out = vec![F::zero(); n * c * sp];
        {
            let xd = &self.value(x).data;
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * sp;
                    for s in 0..sp {
                        out[base + s] = gd[ch] * (xd[base + s] - mean[ch]) * invstd[ch] + bd[ch];
                    }
                }
            }
        }
        let shape = self.value(x).shape.clone();
        let v = self.push(
            Tensor::new(shape, out),
            vec![x, gamma, beta],
            Op::BatchNorm { mean: mean.clone(), invstd },
        );
        (v, mean, var)
    }

    /// Eval-mode batch norm as a per-channel affine map.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<F>, shift: Vec<F>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(scale.len(), c);
        let sp = h * w;
        let mut out = vec![F::zero(); n * c * sp];
        let xd = &self.value(x).data;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * sp;
                for s in 0..sp {
                    out[base + s] = scale[ch] * xd[base + s] + shift[ch];
                }
            }
        }
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, out), vec![x], Op::ChannelAffine { scale })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.push(out, vec![x], Op::LeakyRelu { slope: s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape);
        let data: Vec<F> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), vec![a, b], Op::Add)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let ctot: usize = xs.iter().map(|&v| self.value(v).shape[1]).sum();
        let sp = h * w;
        let mut out = vec![F::zero(); n * ctot * sp];
        for i in 0..n {
            let mut coff = 0usize;
            for &v in xs {
                let t = self.value(v);
                let (tn, tc, th, tw) = t.dims4();
                assert_eq!((tn, th, tw), (n, h, w), "concat spatial dims");
                let src = &t.data[i * tc * sp..(i + 1) * tc * sp];
                out[(i * ctot + coff) * sp..(i * ctot + coff + tc) * sp].copy_from_slice(src);
                coff += tc;
            }
        }
        self.push(Tensor::new(vec![n, ctot, h, w], out), xs.to_vec(), Op::ConcatC)
    }

    /// Bilinear resize at the half-pixel-center convention with edge clamp,
    /// matching the resample module.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        if (oh, ow) == (h, w) {
            // still record a node so shapes stay explicit
        }
        let ytaps = axis_taps::<F>(oh, h);
        let xtaps = axis_taps::<F>(ow, w);
        let mut out = vec![F::zero(); n * c * oh * ow];
        let xd = &self.value(x).data;
        for i in 0..n {
            for ch in 0..c {
                let src = &xd[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let dst = &mut out[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                        let v00 = src[y0 * w + x0];
                        let v01 = src[y0 * w + x1];
                        let v10 = src[y1 * w + x0];
                        let v11 = src[y1 * w + x1];
                        let top = v00 + (v01 - v00) * fx;
                        let bot = v10 + (v11 - v10) * fx;
                        dst[oy * ow + ox] = top + (bot - top) * fy;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), vec![x], Op::Bilinear { oh, ow })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = vec![F::zero(); n * c * oh * ow];
        let xd = &self.value(x).data;
        for i in 0..n {
            for ch in 0..c {
                let src = &xd[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let dst = &mut out[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                for oy in 0..oh {
                    let (ys, ye) = pool_bin(oy, oh, h);
                    for ox in 0..ow {
                        let (xs, xe) = pool_bin(ox, ow, w);
                        let mut acc = F::zero();
                        for y in ys..ye {
                            for xp in xs..xe {
                                acc += src[y * w + xp];
                            }
                        }
                        dst[oy * ow + ox] =
                            acc / F::from_f64(((ye - ys) * (xe - xs)) as f64);
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), vec![x], Op::AdaptiveAvgPool { oh, ow })
    }

    pub fn pad_bottom_right(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        if ph == 0 && pw == 0 {
            return x;
        }
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h + ph, w + pw);
        let mut out = vec![F::zero(); n * c * oh * ow];
        let xd = &self.value(x).data;
        for nc in 0..n * c {
            for y in 0..h {
                let src = &xd[nc * h * w + y * w..nc * h * w + (y + 1) * w];
                out[nc * oh * ow + y * ow..nc * oh * ow + y * ow + w].copy_from_slice(src);
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), vec![x], Op::PadBR)
    }

    pub fn crop_top_left(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        if (oh, ow) == (h, w) {
            return x;
        }
        assert!(oh <= h && ow <= w);
        let mut out = vec![F::zero(); n * c * oh * ow];
        let xd = &self.value(x).data;
        for nc in 0..n * c {
            for y in 0..oh {
                let src = &xd[nc * h * w + y * w..nc * h * w + y * w + ow];
                out[nc * oh * ow + y * ow..nc * oh * ow + (y + 1) * ow].copy_from_slice(src);
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), vec![x], Op::Crop { oh, ow })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), shape.iter().product::<usize>());
        let data = t.data.clone();
        self.push(Tensor::new(shape, data), vec![x], Op::Reshape)
    }

    /// Batched matrix product of 3-D tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = self.value(a).dims3();
        let (bb, rb, cb) = self.value(b).dims3();
        assert_eq!(ba, bb, "batch dims");
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, nn) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(ka, kb, "inner dims");
        let mut out = vec![F::zero(); ba * m * nn];
        for i in 0..ba {
            let ad = &self.value(a).data[i * ra * ca..(i + 1) * ra * ca];
            let bd = &self.value(b).data[i * rb * cb..(i + 1) * rb * cb];
            let (rsa, csa) = strides(ra, ca, ta);
            let (rsb, csb) = strides(rb, cb, tb);
            // borrow rules: copy output slice bounds first
            let co = &mut out[i * m * nn..(i + 1) * m * nn];
            F::gemm_strided(m, ka, nn, F::one(), ad, rsa, csa, bd, rsb, csb, F::zero(), co);
        }
        self.push(Tensor::new(vec![ba, m, nn], out), vec![a, b], Op::BatchMatmul { ta, tb })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape.last().expect("softmax needs at least 1-D");
        let rows = t.numel() / cols;
        let mut out = t.data.clone();
        for r in 0..rows {
            softmax_inplace(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, out), vec![x], Op::SoftmaxLast)
    }

    /// Per-pixel softmax over the channel axis of a 4-D tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let sp = h * w;
        let mut out = self.value(x).data.clone();
        for i in 0..n {
            for s in 0..sp {
                let mut mx = F::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(out[(i * c + ch) * sp + s]);
                }
                let mut sum = F::zero();
                for ch in 0..c {
                    let e = (out[(i * c + ch) * sp + s] - mx).exp();
                    out[(i * c + ch) * sp + s] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[(i * c + ch) * sp + s] /= sum;
                }
            }
        }
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, out), vec![x], Op::SoftmaxC)
    }

    /// Cross-entropy over probabilities: mean over non-IGNORE pixels of
    /// -ln(max(p[label], PROB_FLOOR)). `labels` is batch-major H*W per item.
    pub fn nll_probs(&mut self, probs: Var, labels: Vec<u8>) -> Var {
        let (n, c, h, w) = self.value(probs).dims4();
        let sp = h * w;
        assert_eq!(labels.len(), n * sp, "label count");
        let mut scored = 0usize;
        let mut acc = 0.0f64;
        let pd = &self.value(probs).data;
        for i in 0..n {
            for s in 0..sp {
                let l = labels[i * sp + s];
                if l == IGNORE {
                    continue;
                }
                assert!((l as usize) < c, "label {l} out of range for {c} classes");
                let p = pd[(i * c + l as usize) * sp + s].to_f64();
                // max() would swallow a NaN probability; let it propagate
                acc += if p.is_nan() { p } else { -(p.max(PROB_FLOOR)).ln() };
                scored += 1;
            }
        }
        assert!(scored > 0, "all pixels IGNORE: segmentation loss undefined");
        let v = Tensor::scalar(F::from_f64(acc / scored as f64));
        self.push(v, vec![probs], Op::NllProbs { labels, scored })
    }

    /// Stable mean BCE of logits toward the constant target z.
    pub fn bce_logits_mean(&mut self, logits: Var, z: f64) -> Var {
        let t = self.value(logits);
        let n = t.numel();
        let mut acc = 0.0f64;
        for &x in &t.data {
            let x = x.to_f64();
            acc += x.max(0.0) - x * z + (-x.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(F::from_f64(acc / n as f64));
        self.push(v, vec![logits], Op::BceLogitsMean { z })
    }

    /// weights[i] * parents[i], summed; shapes must match.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape.clone();
        let n = self.value(terms[0].0).numel();
        let mut data = vec![F::zero(); n];
        for &(v, wt) in terms {
            assert_eq!(self.value(v).shape, shape);
            let w = F::from_f64(wt);
            for (o, &x) in data.iter_mut().zip(&self.value(v).data) {
                *o += w * x;
            }
        }
        let (parents, weights): (Vec<Var>, Vec<f64>) = terms.iter().cloned().unzip();
        self.push(Tensor::new(shape, data), parents, Op::WeightedSum { weights })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let sp = h * w;
        let inv = F::from_f64(1.0 / sp as f64);
        let mut out = vec![F::zero(); n * c];
        let xd = &self.value(x).data;
        for nc in 0..n * c {
            let mut acc = F::zero();
            for s in 0..sp {
                acc += xd[nc * sp + s];
            }
            out[nc] = acc * inv;
        }
        self.push(Tensor::new(vec![n, c], out), vec![x], Op::GlobalAvgPool)
    }

    /// Project a tensor to a scalar with fixed coefficients.
    pub fn dot_const(&mut self, x: Var, coeffs: Vec<F>) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), coeffs.len());
        let v: F = t.data.iter().zip(&coeffs).map(|(&a, &c)| a * c).sum();
        self.push(Tensor::scalar(v), vec![x], Op::DotConst { coeffs })
    }

    // ---- backward ----

    /// Run backward from a scalar node; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn parent_needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, pad, dilation, kh, kw, cols } => {
                let x = node.parents[0];
                let w = node.parents[1];
                let b = node.parents.get(2).copied();
                let (n, cin, h, wd) = self.value(x).dims4();
                let (cout, _, _, _) = {
                    let s = &self.value(w).shape;
                    (s[0], s[1], s[2], s[3])
                };
                let (oh, ow) = (node.value.shape[2], node.value.shape[3]);
                let osp = oh * ow;
                let ckk = cin * kh * kw;
                if let Some(bv) = b {
                    if self.parent_needs(bv) {
                        let mut db = vec![F::zero(); cout];
                        for i in 0..n {
                            for o in 0..cout {
                                let base = (i * cout + o) * osp;
                                for s in 0..osp {
                                    db[o] += gout.data[base + s];
                                }
                            }
                        }
                        self.accum(grads, bv, Tensor::new(vec![cout], db));
                    }
                }
                if self.parent_needs(w) {
                    let mut dw = vec![F::zero(); cout * ckk];
                    for i in 0..n {
                        // dW += dY (cout x osp) * cols_i^T (osp x ckk)
                        F::gemm_strided(
                            cout, osp, ckk, F::one(),
                            &gout.data[i * cout * osp..(i + 1) * cout * osp],
                            osp as isize, 1,
                            &cols[i * ckk * osp..(i + 1) * ckk * osp],
                            1, osp as isize,
                            F::one(),
                            &mut dw,
                        );
                    }
                    let wshape = self.value(w).shape.clone();
                    self.accum(grads, w, Tensor::new(wshape, dw));
                }
                if self.parent_needs(x) {
                    let wdata = &self.value(w).data;
                    let mut dx = vec![F::zero(); n * cin * h * wd];
                    let mut dcols = vec![F::zero(); ckk * osp];
                    for i in 0..n {
                        // dcols = W^T (ckk x cout) * dY (cout x osp)
                        F::gemm_strided(
                            ckk, cout, osp, F::one(),
                            wdata, 1, ckk as isize,
                            &gout.data[i * cout * osp..(i + 1) * cout * osp],
                            osp as isize, 1,
                            F::zero(),
                            &mut dcols,
                        );
                        col2im(
                            &dcols, cin, h, wd, *kh, *kw, *stride, *pad, *dilation, oh, ow,
                            &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd],
                        );
                    }
                    let xshape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(xshape, dx));
                }
            }
            Op::BatchNorm { mean, invstd } => {
                let (x, gamma, beta) = (node.parents[0], node.parents[1], node.parents[2]);
                let (n, c, h, w) = self.value(x).dims4();
                let sp = h * w;
                let m = (n * sp) as f64;
                let xd = &self.value(x).data;
                let gd = &self.value(gamma).data;
                // per-channel sums of dy and dy * xhat
                let mut sum_dy = vec![F::zero(); c];
                let mut sum_dy_xhat = vec![F::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * sp;
                        for s in 0..sp {
                            let dy = gout.data[base + s];
                            let xhat = (xd[base + s] - mean[ch]) * invstd[ch];
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * xhat;
                        }
                    }
                }
                if self.parent_needs(gamma) {
                    self.accum(grads, gamma, Tensor::new(vec![c], sum_dy_xhat.clone()));
                }
                if self.parent_needs(beta) {
                    self.accum(grads, beta, Tensor::new(vec![c], sum_dy.clone()));
                }
                if self.parent_needs(x) {
                    let inv_m = F::from_f64(1.0 / m);
                    let mut dx = vec![F::zero(); n * c * sp];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * sp;
                            let k = gd[ch] * invstd[ch];
                            for s in 0..sp {
                                let dy = gout.data[base + s];
                                let xhat = (xd[base + s] - mean[ch]) * invstd[ch];
                                dx[base + s] = k
                                    * (dy - inv_m * (sum_dy[ch] + xhat * sum_dy_xhat[ch]));
                            }
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::ChannelAffine { scale } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let sp = h * w;
                    let mut dx = vec![F::zero(); n * c * sp];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * sp;
                            for s in 0..sp {
                                dx[base + s] = gout.data[base + s] * scale[ch];
                            }
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::LeakyRelu { slope } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let xd = &self.value(x).data;
                    let dx: Vec<F> = gout
                        .data
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > F::zero() { g } else { g * *slope })
                        .collect();
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::Add => {
                for &p in &node.parents {
                    if self.parent_needs(p) {
                        self.accum(grads, p, gout.clone());
                    }
                }
            }
            Op::ConcatC => {
                let (n, ctot, h, w) = node.value.dims4();
                let sp = h * w;
                let mut coff = 0usize;
                for &p in &node.parents {
                    let tc = self.value(p).shape[1];
                    if self.parent_needs(p) {
                        let mut dp = vec![F::zero(); n * tc * sp];
                        for i in 0..n {
                            let src = &gout.data
                                [(i * ctot + coff) * sp..(i * ctot + coff + tc) * sp];
                            dp[i * tc * sp..(i + 1) * tc * sp].copy_from_slice(src);
                        }
                        let shape = self.value(p).shape.clone();
                        self.accum(grads, p, Tensor::new(shape, dp));
                    }
                    coff += tc;
                }
            }
            Op::Bilinear { oh, ow } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let ytaps = axis_taps::<F>(*oh, h);
                    let xtaps = axis_taps::<F>(*ow, w);
                    let mut dx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let dsrc = &mut dx[nc * h * w..(nc + 1) * h * w];
                        let gdst = &gout.data[nc * oh * ow..(nc + 1) * oh * ow];
                        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                                let g = gdst[oy * ow + ox];
                                let one = F::one();
                                dsrc[y0 * w + x0] += g * (one - fy) * (one - fx);
                                dsrc[y0 * w + x1] += g * (one - fy) * fx;
                                dsrc[y1 * w + x0] += g * fy * (one - fx);
                                dsrc[y1 * w + x1] += g * fy * fx;
                            }
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::AdaptiveAvgPool { oh, ow } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let mut dx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let dsrc = &mut dx[nc * h * w..(nc + 1) * h * w];
                        let gdst = &gout.data[nc * oh * ow..(nc + 1) * oh * ow];
                        for oy in 0..*oh {
                            let (ys, ye) = pool_bin(oy, *oh, h);
                            for ox in 0..*ow {
                                let (xs, xe) = pool_bin(ox, *ow, w);
                                let g = gdst[oy * ow + ox]
                                    / F::from_f64(((ye - ys) * (xe - xs)) as f64);
                                for y in ys..ye {
                                    for xp in xs..xe {
                                        dsrc[y * w + xp] += g;
                                    }
                                }
                            }
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::PadBR => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let (oh, ow) = (node.value.shape[2], node.value.shape[3]);
                    let mut dx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..h {
                            let src = &gout.data[nc * oh * ow + y * ow..nc * oh * ow + y * ow + w];
                            dx[nc * h * w + y * w..nc * h * w + (y + 1) * w].copy_from_slice(src);
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::Crop { oh, ow } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let mut dx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..*oh {
                            let src = &gout.data[nc * oh * ow + y * ow..nc * oh * ow + (y + 1) * ow];
                            dx[nc * h * w + y * w..nc * h * w + y * w + ow].copy_from_slice(src);
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::Reshape => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, gout.data.clone()));
                }
            }
            Op::BatchMatmul { ta, tb } => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let (ba, ra, ca) = self.value(a).dims3();
                let (_, rb, cb) = self.value(b).dims3();
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let nn = if *tb { rb } else { cb };
                let ad = &self.value(a).data;
                let bd = &self.value(b).data;
                if self.parent_needs(a) {
                    let mut da = vec![F::zero(); ba * ra * ca];
                    for i in 0..ba {
                        let g = &gout.data[i * m * nn..(i + 1) * m * nn];
                        let bi = &bd[i * rb * cb..(i + 1) * rb * cb];
                        let dai = &mut da[i * ra * ca..(i + 1) * ra * ca];
                        let (rsb, csb) = strides(rb, cb, *tb);
                        if !*ta {
                            // dA (m x k) = dC (m x nn) * B'(k x nn)^T
                            F::gemm_strided(m, nn, k, F::one(), g, nn as isize, 1, bi, csb, rsb, F::zero(), dai);
                        } else {
                            // A stored (k x m): dA_stored = B'(k x nn) * dC^T (nn x m)
                            F::gemm_strided(k, nn, m, F::one(), bi, rsb, csb, g, 1, nn as isize, F::zero(), dai);
                        }
                    }
                    self.accum(grads, a, Tensor::new(vec![ba, ra, ca], da));
                }
                if self.parent_needs(b) {
                    let mut db = vec![F::zero(); ba * rb * cb];
                    for i in 0..ba {
                        let g = &gout.data[i * m * nn..(i + 1) * m * nn];
                        let ai = &ad[i * ra * ca..(i + 1) * ra * ca];
                        let dbi = &mut db[i * rb * cb..(i + 1) * rb * cb];
                        let (rsa, csa) = strides(ra, ca, *ta);
                        if !*tb {
                            // dB (k x nn) = A'(m x k)^T * dC (m x nn)
                            F::gemm_strided(k, m, nn, F::one(), ai, csa, rsa, g, nn as isize, 1, F::zero(), dbi);
                        } else {
                            // B stored (nn x k): dB_stored = dC^T (nn x m) * A'(m x k)
                            F::gemm_strided(nn, m, k, F::one(), g, 1, nn as isize, ai, rsa, csa, F::zero(), dbi);
                        }
                    }
                    self.accum(grads, b, Tensor::new(vec![ba, rb, cb], db));
                }
            }
            Op::SoftmaxLast => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let cols = *node.value.shape.last().unwrap();
                    let rows = node.value.numel() / cols;
                    let p = &node.value.data;
                    let mut dx = vec![F::zero(); p.len()];
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &gout.data[r * cols..(r + 1) * cols];
                        let dot: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::SoftmaxC => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = node.value.dims4();
                    let sp = h * w;
                    let p = &node.value.data;
                    let mut dx = vec![F::zero(); p.len()];
                    for i in 0..n {
                        for s in 0..sp {
                            let mut dot = F::zero();
                            for ch in 0..c {
                                let o = (i * c + ch) * sp + s;
                                dot += p[o] * gout.data[o];
                            }
                            for ch in 0..c {
                                let o = (i * c + ch) * sp + s;
                                dx[o] = p[o] * (gout.data[o] - dot);
                            }
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::NllProbs { labels, scored } => {
                let probs = node.parents[0];
                if self.parent_needs(probs) {
                    let (n, c, h, w) = self.value(probs).dims4();
                    let sp = h * w;
                    let pd = &self.value(probs).data;
                    let g = gout.item().to_f64();
                    let mut dx = vec![F::zero(); pd.len()];
                    for i in 0..n {
                        for s in 0..sp {
                            let l = labels[i * sp + s];
                            if l == IGNORE {
                                continue;
                            }
                            let o = (i * c + l as usize) * sp + s;
                            let p = pd[o].to_f64();
                            if p >= PROB_FLOOR {
                                dx[o] = F::from_f64(-g / (p * *scored as f64));
                            }
                        }
                    }
                    let shape = self.value(probs).shape.clone();
                    self.accum(grads, probs, Tensor::new(shape, dx));
                }
            }
            Op::BceLogitsMean { z } => {
                let logits = node.parents[0];
                if self.parent_needs(logits) {
                    let t = self.value(logits);
                    let n = t.numel() as f64;
                    let g = gout.item().to_f64();
                    let dx: Vec<F> = t
                        .data
                        .iter()
                        .map(|&x| {
                            let s = 1.0 / (1.0 + (-x.to_f64()).exp());
                            F::from_f64(g * (s - z) / n)
                        })
                        .collect();
                    let shape = t.shape.clone();
                    self.accum(grads, logits, Tensor::new(shape, dx));
                }
            }
            Op::WeightedSum { weights } => {
                for (&p, &wt) in node.parents.iter().zip(weights) {
                    if self.parent_needs(p) {
                        let delta = gout.map(|g| g * F::from_f64(wt));
                        self.accum(grads, p, delta);
                    }
                }
            }
            Op::DotConst { coeffs } => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let g = gout.item();
                    let dx: Vec<F> = coeffs.iter().map(|&c| c * g).collect();
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
            Op::GlobalAvgPool => {
                let x = node.parents[0];
                if self.parent_needs(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let sp = h * w;
                    let inv = F::from_f64(1.0 / sp as f64);
                    let mut dx = vec![F::zero(); n * c * sp];
                    for nc in 0..n * c {
                        let g = gout.data[nc] * inv;
                        for s in 0..sp {
                            dx[nc * sp + s] = g;
                        }
                    }
                    let shape = self.value(x).shape.clone();
                    self.accum(grads, x, Tensor::new(shape, dx));
                }
            }
        }
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

trait ValueData<F> {
    fn value_data(&self) -> &[F];
}

impl<F: Scalar> ValueData<F> for Tensor<F> {
    fn value_data(&self) -> &[F] {
        &self.data
    }
}

pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff = dilation * (k - 1) + 1;
    (n + 2 * pad - eff) / stride + 1
}

fn strides(rows: usize, cols: usize, transpose: bool) -> (isize, isize) {
    let _ = rows;
    if transpose {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn softmax_inplace<F: Scalar>(row: &mut [F]) {
    let mut mx = F::neg_infinity();
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Half-pixel-center taps, matching the resample module's convention.
fn axis_taps<F: Scalar>(out_n: usize, in_n: usize) -> Vec<(usize, usize, F)> {
    let ratio = out_n as f64 / in_n as f64;
    (0..out_n)
        .map(|i| {
            let s = ((i as f64 + 0.5) / ratio - 0.5).clamp(0.0, (in_n - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_n - 1);
            (lo, hi, F::from_f64(s - lo as f64))
        })
        .collect()
}

/// PyTorch-style adaptive pooling bin for output index `i` of `out_n` over
/// an input axis of `in_n`.
fn pool_bin(i: usize, out_n: usize, in_n: usize) -> (usize, usize) {
    let start = i * in_n / out_n;
    let end = ((i + 1) * in_n).div_ceil(out_n);
    (start, end)
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    let osp = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * osp..(row + 1) * osp];
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for d in dst[oy * ow..(oy + 1) * ow].iter_mut() {
                            *d = F::zero();
                        }
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            x[(ch * h + iy) * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
    x: &mut [F],
) {
    let osp = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * osp..(row + 1) * osp];
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ch * h + iy) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
