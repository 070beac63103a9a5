//! Reverse-mode autodiff tape used by every trainable network in the crate.
//!
//! Nodes are appended eagerly in topological order, so the backward pass is
//! one reverse sweep. Values are `f64` throughout; shape conventions are
//! `[h, w, c]` for feature maps, `[d]` for vectors and `[1]` for scalars.
//! Convolutions run as im2col + gemm; the backward pass rebuilds the column
//! matrix instead of caching it, trading a little compute for memory.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Ix1, Ix3, Ix4};

pub type NodeId = usize;

const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    BroadcastHw { x: NodeId },
    AvgPool2 { x: NodeId },
    UpsampleNearest2 { x: NodeId },
    ResizeBilinear { x: NodeId },
    ConcatC { xs: Vec<NodeId> },
    SliceC { x: NodeId, start: usize },
    BlockWrite { mem: NodeId, patch: NodeId, top: usize, left: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    ExpNeg { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    BceMap { pred: NodeId, target: Array3<f64> },
    MeanAll { x: NodeId },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. node `id`; zeros if the node does not influence the
    /// root.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> ArrayD<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.nodes[id].value.raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, f64> {
        self.nodes[id].value.view()
    }

    /// Value viewed as an `[h, w, c]` map.
    pub fn value3(&self, id: NodeId) -> ArrayView3<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("node is not a rank-3 map")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0]]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> NodeId {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.push(Array1::from_elem(1, v).into_dyn(), Op::Leaf)
    }

    /// 2-D convolution: `x [h,w,cin]`, `w [kh,kw,cin,cout]`, `b [cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value3(x).to_owned();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let out = conv2d_forward(&xv, &wv, &bv, stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    /// Fully-connected layer over the flattened input: `w [n, d]`, `b [d]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.iter().copied().collect::<Array1<f64>>();
        let wv = self.nodes[w].value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let out = xv.dot(&wv) + &bv;
        self.push(out.into_dyn(), Op::Dense { x, w, b })
    }

    /// Replicates a `[d]` vector over an `h x w` grid.
    pub fn broadcast_hw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let v = self.nodes[x].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let d = v.len();
        let out = Array3::from_shape_fn((h, w, d), |(_, _, c)| v[c]);
        self.push(out.into_dyn(), Op::BroadcastHw { x })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value3(x);
        let (h, w, c) = xv.dim();
        let mut out = Array3::zeros((h / 2, w / 2, c));
        for y in 0..h / 2 {
            for xcol in 0..w / 2 {
                for ch in 0..c {
                    out[[y, xcol, ch]] = 0.25
                        * (xv[[2 * y, 2 * xcol, ch]]
                            + xv[[2 * y, 2 * xcol + 1, ch]]
                            + xv[[2 * y + 1, 2 * xcol, ch]]
                            + xv[[2 * y + 1, 2 * xcol + 1, ch]]);
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool2 { x })
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value3(x);
        let (h, w, c) = xv.dim();
        let out = Array3::from_shape_fn((2 * h, 2 * w, c), |(y, xcol, ch)| xv[[y / 2, xcol / 2, ch]]);
        self.push(out.into_dyn(), Op::UpsampleNearest2 { x })
    }

    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let out = bilinear_resize(&self.value3(x).to_owned(), out_h, out_w);
        self.push(out.into_dyn(), Op::ResizeBilinear { x })
    }

    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView3<f64>> = xs.iter().map(|&id| self.value3(id)).collect();
        let (h, w, _) = views[0].dim();
        let total: usize = views.iter().map(|v| v.dim().2).sum();
        let mut out = Array3::zeros((h, w, total));
        let mut off = 0;
        for v in &views {
            let c = v.dim().2;
            out.slice_mut(s![.., .., off..off + c]).assign(v);
            off += c;
        }
        self.push(out.into_dyn(), Op::ConcatC { xs: xs.to_vec() })
    }

    pub fn slice_c(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let out = self.value3(x).slice(s![.., .., start..end]).to_owned();
        self.push(out.into_dyn(), Op::SliceC { x, start })
    }

    /// Functional memory write: copies `mem` and overwrites the block at
    /// `(top, left)` with `patch` (newest wins).
    pub fn block_write(&mut self, mem: NodeId, patch: NodeId, top: usize, left: usize) -> NodeId {
        let mut out = self.value3(mem).to_owned();
        let p = self.value3(patch);
        let (ph, pw, _) = p.dim();
        out.slice_mut(s![top..top + ph, left..left + pw, ..]).assign(&p);
        self.push(out.into_dyn(), Op::BlockWrite { mem, patch, top, left })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn exp_neg(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| (-v).exp());
        self.push(out, Op::ExpNeg { x })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a].value * &self.nodes[b].value;
        self.push(out, Op::Mul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a].value + &self.nodes[b].value;
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| c * v);
        self.push(out, Op::Scale { x, c })
    }

    /// Per-pixel binary cross-entropy averaged over class channels:
    /// `pred [h,w,k]` against a one-hot `target [h,w,k]`, output `[h,w,1]`.
    pub fn bce_map(&mut self, pred: NodeId, target: Array3<f64>) -> NodeId {
        let p = self.value3(pred);
        let (h, w, k) = p.dim();
        assert_eq!((h, w, k), target.dim(), "bce target shape mismatch");
        let mut out = Array3::zeros((h, w, 1));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..k {
                    let pc = p[[y, x, ch]].clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                    let t = target[[y, x, ch]];
                    acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                }
                out[[y, x, 0]] = acc / k as f64;
            }
        }
        self.push(out.into_dyn(), Op::BceMap { pred, target })
    }

    /// Mean over all elements, as a `[1]` scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let m = v.sum() / v.len() as f64;
        self.push(Array1::from_elem(1, m).into_dyn(), Op::MeanAll { x })
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let gout = g.view().into_dimensionality::<Ix3>().unwrap();
                    let xv = self.value3(*x);
                    let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                    let (gx, gw, gb) = conv2d_backward(&xv, &wv, &gout, *stride, *pad);
                    accumulate(&mut grads, *x, gx.into_dyn());
                    accumulate(&mut grads, *w, gw.into_dyn());
                    accumulate(&mut grads, *b, gb.into_dyn());
                }
                Op::Dense { x, w, b } => {
                    let gout = g.view().into_dimensionality::<Ix1>().unwrap();
                    let xv = self.nodes[*x].value.iter().copied().collect::<Array1<f64>>();
                    let wv = self.nodes[*w].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gw = xv
                        .view()
                        .insert_axis(ndarray::Axis(1))
                        .dot(&gout.view().insert_axis(ndarray::Axis(0)));
                    let gx_flat = wv.dot(&gout);
                    let gx = ArrayD::from_shape_vec(self.nodes[*x].value.raw_dim(), gx_flat.to_vec()).unwrap();
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw.into_dyn());
                    accumulate(&mut grads, *b, gout.to_owned().into_dyn());
                }
                Op::BroadcastHw { x } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (h, w, d) = gv.dim();
                    let mut gx = Array1::<f64>::zeros(d);
                    for y in 0..h {
                        for xcol in 0..w {
                            for c in 0..d {
                                gx[c] += gv[[y, xcol, c]];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::AvgPool2 { x } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (ho, wo, c) = gv.dim();
                    let mut gx = Array3::<f64>::zeros((2 * ho, 2 * wo, c));
                    for y in 0..ho {
                        for xcol in 0..wo {
                            for ch in 0..c {
                                let v = 0.25 * gv[[y, xcol, ch]];
                                gx[[2 * y, 2 * xcol, ch]] += v;
                                gx[[2 * y, 2 * xcol + 1, ch]] += v;
                                gx[[2 * y + 1, 2 * xcol, ch]] += v;
                                gx[[2 * y + 1, 2 * xcol + 1, ch]] += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::UpsampleNearest2 { x } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (ho, wo, c) = gv.dim();
                    let mut gx = Array3::<f64>::zeros((ho / 2, wo / 2, c));
                    for y in 0..ho {
                        for xcol in 0..wo {
                            for ch in 0..c {
                                gx[[y / 2, xcol / 2, ch]] += gv[[y, xcol, ch]];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::ResizeBilinear { x } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (ho, wo, c) = gv.dim();
                    let (h, w, _) = self.value3(*x).dim();
                    let rows = bilinear_taps(h, ho);
                    let cols = bilinear_taps(w, wo);
                    let mut gx = Array3::<f64>::zeros((h, w, c));
                    for y in 0..ho {
                        let (y0, y1, ty) = rows[y];
                        for xcol in 0..wo {
                            let (x0, x1, tx) = cols[xcol];
                            for ch in 0..c {
                                let gg = gv[[y, xcol, ch]];
                                gx[[y0, x0, ch]] += gg * (1.0 - ty) * (1.0 - tx);
                                gx[[y0, x1, ch]] += gg * (1.0 - ty) * tx;
                                gx[[y1, x0, ch]] += gg * ty * (1.0 - tx);
                                gx[[y1, x1, ch]] += gg * ty * tx;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::ConcatC { xs } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut off = 0;
                    for &xid in xs {
                        let c = self.value3(xid).dim().2;
                        let part = gv.slice(s![.., .., off..off + c]).to_owned();
                        accumulate(&mut grads, xid, part.into_dyn());
                        off += c;
                    }
                }
                Op::SliceC { x, start } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (h, w, c) = gv.dim();
                    let full_c = self.value3(*x).dim().2;
                    let mut gx = Array3::<f64>::zeros((h, w, full_c));
                    gx.slice_mut(s![.., .., *start..*start + c]).assign(&gv);
                    accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::BlockWrite { mem, patch, top, left } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (ph, pw, _) = self.value3(*patch).dim();
                    let gpatch = gv.slice(s![*top..*top + ph, *left..*left + pw, ..]).to_owned();
                    let mut gmem = gv.to_owned();
                    gmem.slice_mut(s![*top..*top + ph, *left..*left + pw, ..]).fill(0.0);
                    accumulate(&mut grads, *patch, gpatch.into_dyn());
                    accumulate(&mut grads, *mem, gmem.into_dyn());
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[*x].value, |gv, xv| {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[id].value, |gv, ov| *gv *= ov * (1.0 - ov));
                    accumulate(&mut grads, *x, gx);
                }
                Op::ExpNeg { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[id].value, |gv, ov| *gv *= -ov);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mul { a, b } => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, g.mapv(|v| v * c));
                }
                Op::BceMap { pred, target } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let p = self.value3(*pred);
                    let (h, w, k) = p.dim();
                    let mut gp = Array3::<f64>::zeros((h, w, k));
                    for y in 0..h {
                        for x in 0..w {
                            let go = gv[[y, x, 0]] / k as f64;
                            for ch in 0..k {
                                let raw = p[[y, x, ch]];
                                if raw <= BCE_CLIP || raw >= 1.0 - BCE_CLIP {
                                    continue;
                                }
                                let t = target[[y, x, ch]];
                                gp[[y, x, ch]] = go * (-t / raw + (1.0 - t) / (1.0 - raw));
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, gp.into_dyn());
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[*x].value.len() as f64;
                    let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), g[[0]] / n);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, g: ArrayD<f64>) {
    let g = if g.is_standard_layout() {
        g
    } else {
        g.as_standard_layout().to_owned()
    };
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// im2col: rows indexed by output position, columns by `(ky, kx, cin)`.
fn im2col(x: &ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let xs = x.as_slice().expect("conv input must be contiguous");
    let mut cols = Array2::<f64>::zeros((ho * wo, kh * kw * cin));
    let cs = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * row_len;
            for ky in 0..kh {
                let sy = (oy * stride + ky) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    let dst = row + (ky * kw + kx) * cin;
                    cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn conv2d_forward(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (h, wid, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(cin, wcin, "conv input channels mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wid, kw, stride, pad);
    let cols = im2col(&x.view(), kh, kw, stride, pad);
    let wmat = w.view().into_shape_with_order((kh * kw * cin, cout)).unwrap();
    let mut out = cols.dot(&wmat);
    for mut row in out.rows_mut() {
        row += b;
    }
    out.into_shape_with_order((ho, wo, cout)).unwrap()
}

fn conv2d_backward(
    x: &ArrayView3<f64>,
    w: &ndarray::ArrayView4<f64>,
    gout: &ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>) {
    let (h, wid, cin) = x.dim();
    let (kh, kw, _, cout) = w.dim();
    let (ho, wo, _) = gout.dim();
    let gmat = gout.into_shape_with_order((ho * wo, cout)).unwrap();
    let cols = im2col(x, kh, kw, stride, pad);

    let gw_mat = cols.t().dot(&gmat);
    let gw = gw_mat.into_shape_with_order((kh, kw, cin, cout)).unwrap();
    let gb = gmat.sum_axis(ndarray::Axis(0));

    let wmat: ArrayView2<f64> = w.into_shape_with_order((kh * kw * cin, cout)).unwrap();
    let gcols = gmat.dot(&wmat.t());

    // col2im scatter-add.
    let mut gx = Array3::<f64>::zeros((h, wid, cin));
    let gxs = gx.as_slice_mut().unwrap();
    let gcs = gcols.as_slice().unwrap();
    let row_len = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * row_len;
            for ky in 0..kh {
                let sy = (oy * stride + ky) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= wid as isize {
                        continue;
                    }
                    let dst = (sy as usize * wid + sx as usize) * cin;
                    let src = row + (ky * kw + kx) * cin;
                    for c in 0..cin {
                        gxs[dst + c] += gcs[src + c];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Source taps for 1-D bilinear resampling with the half-pixel convention.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 + 1 >= in_len {
                    (in_len - 1, in_len - 1, 0.0)
                } else {
                    (i0, i0 + 1, src - i0 as f64)
                }
            }
        })
        .collect()
}

/// Bilinear resize of an `[h, w, c]` map, half-pixel centers.
pub fn bilinear_resize(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, ty) = rows[y];
        for xcol in 0..out_w {
            let (x0, x1, tx) = cols[xcol];
            for ch in 0..c {
                out[[y, xcol, ch]] = (1.0 - ty) * ((1.0 - tx) * x[[y0, x0, ch]] + tx * x[[y0, x1, ch]])
                    + ty * ((1.0 - tx) * x[[y1, x0, ch]] + tx * x[[y1, x1, ch]]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() - 0.5)
    }

    /// Central finite differences on every element of every leaf against the
    /// backward pass of `build`, which must return a scalar root.
    fn check_grads(leaves: &[ArrayD<f64>], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, tol: f64) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.wrt(&tape, ids[li]);
            for flat in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<ArrayD<f64>> = leaves.to_vec();
                    bumped[li].as_slice_mut().unwrap()[flat] += delta;
                    let mut t = Tape::new();
                    let bids: Vec<NodeId> = bumped.iter().map(|l| t.leaf(l.clone())).collect();
                    let r = build(&mut t, &bids);
                    t.scalar(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = g.as_slice().unwrap()[flat];
                let denom = fd.abs().max(ad.abs()).max(1e-4);
                assert!(
                    (fd - ad).abs() / denom < tol,
                    "leaf {li} elem {flat}: fd={fd:.8e} ad={ad:.8e}"
                );
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((5, 6, 3), |_| rng.gen::<f64>() - 0.5);
        let w = Array4::from_shape_fn((3, 3, 3, 2), |_| rng.gen::<f64>() - 0.5);
        let b = Array1::from_shape_fn(2, |_| rng.gen::<f64>() - 0.5);
        let out = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(out.dim(), (5, 6, 2));
        // Direct loop at a few positions.
        for &(oy, ox, oc) in &[(0usize, 0usize, 0usize), (2, 3, 1), (4, 5, 0)] {
            let mut acc = b[oc];
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = oy as isize + ky as isize - 1;
                    let sx = ox as isize + kx as isize - 1;
                    if sy < 0 || sy >= 5 || sx < 0 || sx >= 6 {
                        continue;
                    }
                    for c in 0..3 {
                        acc += x[[sy as usize, sx as usize, c]] * w[[ky, kx, c, oc]];
                    }
                }
            }
            assert!((out[[oy, ox, oc]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_array(&[5, 6, 2], &mut rng),
            rand_array(&[3, 3, 2, 3], &mut rng),
            rand_array(&[3], &mut rng),
        ];
        check_grads(
            &leaves,
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], ids[2], 1, 1);
                t.mean_all(c)
            },
            1e-5,
        );
    }

    #[test]
    fn strided_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_array(&[6, 8, 2], &mut rng),
            rand_array(&[3, 3, 2, 2], &mut rng),
            rand_array(&[2], &mut rng),
        ];
        check_grads(
            &leaves,
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], ids[2], 2, 1);
                t.mean_all(c)
            },
            1e-5,
        );
    }

    #[test]
    fn dense_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_array(&[2, 3, 2], &mut rng), rand_array(&[12, 4], &mut rng), rand_array(&[4], &mut rng)];
        check_grads(
            &leaves,
            |t, ids| {
                let d = t.dense(ids[0], ids[1], ids[2]);
                let b = t.broadcast_hw(d, 2, 3);
                let s = t.sigmoid(b);
                t.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn pool_upsample_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_array(&[4, 6, 2], &mut rng)];
        check_grads(
            &leaves,
            |t, ids| {
                let p = t.avg_pool2(ids[0]);
                let u = t.upsample_nearest2(p);
                let r = t.resize_bilinear(u, 7, 9);
                t.mean_all(r)
            },
            1e-5,
        );
    }

    #[test]
    fn concat_slice_blockwrite_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            rand_array(&[4, 4, 2], &mut rng),
            rand_array(&[4, 4, 1], &mut rng),
            rand_array(&[2, 2, 3], &mut rng),
        ];
        check_grads(
            &leaves,
            |t, ids| {
                let cat = t.concat_c(&[ids[0], ids[1]]);
                let wr = t.block_write(cat, ids[2], 1, 1);
                let sl = t.slice_c(wr, 1, 3);
                let r = t.relu(sl);
                t.mean_all(r)
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut target = Array3::<f64>::zeros((3, 3, 2));
        for y in 0..3 {
            for x in 0..3 {
                let k = rng.gen_range(0..2);
                target[[y, x, k]] = 1.0;
            }
        }
        let leaves = vec![rand_array(&[3, 3, 2], &mut rng), rand_array(&[3, 3, 1], &mut rng)];
        let tgt = target.clone();
        check_grads(
            &leaves,
            move |t, ids| {
                let p = t.sigmoid(ids[0]);
                let e = t.bce_map(p, tgt.clone());
                let c = ids[1];
                let weighted = t.mul(c, e);
                let u = t.exp_neg(c);
                let sum = t.add(weighted, u);
                let sc = t.scale(sum, 1.7);
                t.mean_all(sc)
            },
            1e-5,
        );
    }

    #[test]
    fn backward_is_zero_for_unrelated_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_array(&[2, 2, 1], &mut rng));
        let b = tape.leaf(rand_array(&[2, 2, 1], &mut rng));
        let m = tape.mean_all(a);
        let grads = tape.backward(m);
        assert!(grads.wrt(&tape, b).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array3::from_shape_fn((5, 7, 2), |_| rng.gen::<f64>());
        let same = bilinear_resize(&x, 5, 7);
        assert!(x.iter().zip(same.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = Array3::from_elem((4, 4, 1), 0.6);
        let up = bilinear_resize(&c, 9, 13);
        assert!(up.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }
}
