//! Reverse-mode differentiation over a flat record of executed primitives.
//!
//! Every forward method appends one node holding the result tensor plus the
//! op descriptor needed to replay it backwards. `backward` walks the record
//! in exact reverse execution order and accumulates gradients additively, so
//! a node consumed several times receives the sum of its consumers' terms.
//! A tape lives for one forward pass; training builds a fresh tape per
//! sample.

use crate::correlation::{correlate_backward_kernel, correlate_forward_kernel, window_offsets};
use crate::error::{Error, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

/// Handle to one recorded tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    PointwiseConv { x: usize, w: usize, b: usize },
    DepthwiseConv2d { x: usize, k: usize },
    DepthwiseConvTime { x: usize, k: usize },
    AvgPool2 { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    MulConst { x: usize, factor: Tensor<T> },
    MulBroadcastTime { x: usize, w: usize },
    GapSpatial { x: usize },
    GapToTime { x: usize },
    TimeMeanSorted { x: usize },
    SoftmaxAxis { x: usize, axis: usize },
    MaxWindow { x: usize, winners: Vec<usize> },
    Correlate { a: usize, b: usize, radius: usize },
    SelectTime { x: usize, t: usize },
    SliceAxis0 { x: usize, index: usize },
    WindowCentroid { probs: usize, radius: usize },
    Conv1dTimeClamped { x: usize, w: usize },
    Stack { parts: Vec<usize> },
    Reshape { x: usize },
    Sum { x: usize },
    SoftmaxXent { scores: usize, label: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value (zeros if unreached).
    pub fn tensor(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        let shape = tape.value(id).shape().to_vec();
        match self.get(id) {
            Some(buf) => Tensor::new(shape, buf.to_vec()).expect("gradient length matches value"),
            None => Tensor::zeros(&shape),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// 1x1 convolution over the leading (channel) axis: `out[o, ..] =
    /// sum_c w[o, c] * x[c, ..] + b[o]`. Trailing axes are untouched, so the
    /// same op serves `[C,T,H,W]` feature maps and plain `[C]` vectors.
    pub fn conv_pointwise(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let (cout, cin) = ws.dims2()?;
        if xs.ndim() < 1 || xs.shape()[0] != cin {
            return Err(Error::dim(
                "conv_pointwise",
                format!("input with leading extent {cin} to match weights {:?}", ws.shape()),
                shape_string(xs.shape()),
            ));
        }
        if bs.dims1()? != cout {
            return Err(Error::dim(
                "conv_pointwise",
                format!("bias [{cout}]"),
                shape_string(bs.shape()),
            ));
        }
        let rest = xs.len() / cin;
        let mut out_shape = xs.shape().to_vec();
        out_shape[0] = cout;
        let mut out = vec![T::zero(); cout * rest];
        let (xd, wd, bd) = (xs.data(), ws.data(), bs.data());
        for o in 0..cout {
            let row = &mut out[o * rest..(o + 1) * rest];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let wv = wd[o * cin + c];
                let xrow = &xd[c * rest..(c + 1) * rest];
                for (ov, xv) in row.iter_mut().zip(xrow) {
                    *ov = *ov + wv * *xv;
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::PointwiseConv { x: x.0, w: w.0, b: b.0 }))
    }

    /// Per-channel spatial convolution with odd kernels and zero padding;
    /// applied frame by frame, the temporal axis is never mixed.
    pub fn conv_depthwise2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let (xs, ks) = (self.value(x), self.value(k));
        let (c, t, h, w) = xs.dims4()?;
        let (kc, kh, kw) = ks.dims3()?;
        if kc != c {
            return Err(Error::dim(
                "conv_depthwise_2d",
                format!("kernels for {c} channels"),
                shape_string(ks.shape()),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let out = depthwise2d_forward(xs.data(), ks.data(), c, t, h, w, kh, kw);
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(value, Op::DepthwiseConv2d { x: x.0, k: k.0 }))
    }

    /// Per-channel 1D convolution over the temporal axis, zero padded.
    pub fn conv_depthwise_time(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let (xs, ks) = (self.value(x), self.value(k));
        let (c, t, h, w) = xs.dims4()?;
        let (kc, kt) = ks.dims2()?;
        if kc != c {
            return Err(Error::dim(
                "conv_depthwise_time",
                format!("kernels for {c} channels"),
                shape_string(ks.shape()),
            ));
        }
        if kt % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel extent must be odd, got {kt}"
            )));
        }
        let pt = kt / 2;
        let hw = h * w;
        let (xd, kd) = (xs.data(), ks.data());
        let mut out = vec![T::zero(); xd.len()];
        for ci in 0..c {
            for ti in 0..t {
                let orow = &mut out[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
                for j in 0..kt {
                    let src = ti as isize + j as isize - pt as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let kv = kd[ci * kt + j];
                    let xrow = &xd[(ci * t + src as usize) * hw..(ci * t + src as usize + 1) * hw];
                    for (ov, xv) in orow.iter_mut().zip(xrow) {
                        *ov = *ov + kv * *xv;
                    }
                }
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(value, Op::DepthwiseConvTime { x: x.0, k: k.0 }))
    }

    /// 2x2 mean pooling with stride 2 over the spatial axes.
    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        let (c, t, h, w) = xs.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "avgpool2",
                "even spatial extents",
                shape_string(xs.shape()),
            ));
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let xd = xs.data();
        let mut out = vec![T::zero(); c * t * h2 * w2];
        for ct in 0..c * t {
            let src = &xd[ct * h * w..(ct + 1) * h * w];
            let dst = &mut out[ct * h2 * w2..(ct + 1) * h2 * w2];
            for y in 0..h2 {
                for xcol in 0..w2 {
                    let s = src[2 * y * w + 2 * xcol]
                        + src[2 * y * w + 2 * xcol + 1]
                        + src[(2 * y + 1) * w + 2 * xcol]
                        + src[(2 * y + 1) * w + 2 * xcol + 1];
                    dst[y * w2 + xcol] = s * quarter;
                }
            }
        }
        let value = Tensor::new(vec![c, t, h2, w2], out)?;
        Ok(self.push(value, Op::AvgPool2 { x: x.0 }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| sigmoid_stable(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x: x.0 })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "add",
                shape_string(av.shape()),
                shape_string(bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor<T>) -> Result<NodeId> {
        let xs = self.value(x);
        if xs.shape() != factor.shape() {
            return Err(Error::dim(
                "mul_const",
                shape_string(xs.shape()),
                shape_string(factor.shape()),
            ));
        }
        let data = xs.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(xs.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { x: x.0, factor }))
    }

    /// Scale each temporal slice of `x: [C,T,H,W]` by `w[t]`.
    pub fn mul_broadcast_time(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.value(x), self.value(w));
        let (_, t, _, _) = xs.dims4()?;
        if ws.dims1()? != t {
            return Err(Error::dim(
                "mul_broadcast_time",
                format!("weights [{t}]"),
                shape_string(ws.shape()),
            ));
        }
        let (c, _, h, wd4) = xs.dims4()?;
        let hw = h * wd4;
        let (xd, wdat) = (xs.data(), ws.data());
        let mut out = vec![T::zero(); xd.len()];
        for ci in 0..c {
            for ti in 0..t {
                let wv = wdat[ti];
                let base = (ci * t + ti) * hw;
                for s in 0..hw {
                    out[base + s] = xd[base + s] * wv;
                }
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MulBroadcastTime { x: x.0, w: w.0 }))
    }

    /// Spatial mean per channel and frame: `[C,T,H,W] -> [C,T]`.
    pub fn gap_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        let (c, t, h, w) = xs.dims4()?;
        let hw = T::from_f64((h * w) as f64);
        let xd = xs.data();
        let mut out = vec![T::zero(); c * t];
        for ct in 0..c * t {
            let mut acc = T::zero();
            for v in &xd[ct * h * w..(ct + 1) * h * w] {
                acc = acc + *v;
            }
            out[ct] = acc / hw;
        }
        let value = Tensor::new(vec![c, t], out)?;
        Ok(self.push(value, Op::GapSpatial { x: x.0 }))
    }

    /// Mean over channels and space, one scalar per frame: `[C,T,H,W] -> [T]`.
    pub fn gap_to_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        let (c, t, h, w) = xs.dims4()?;
        let hw = h * w;
        let denom = T::from_f64((c * hw) as f64);
        let xd = xs.data();
        let mut out = vec![T::zero(); t];
        for ti in 0..t {
            let mut acc = T::zero();
            for ci in 0..c {
                let base = (ci * t + ti) * hw;
                for s in 0..hw {
                    acc = acc + xd[base + s];
                }
            }
            out[ti] = acc / denom;
        }
        let value = Tensor::new(vec![t], out)?;
        Ok(self.push(value, Op::GapToTime { x: x.0 }))
    }

    /// Temporal mean of `[C,T]` accumulated in value order (sorted), so the
    /// result is bit-identical under any permutation of the frames.
    pub fn time_mean_sorted(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        let (c, t) = xs.dims2()?;
        let denom = T::from_f64(t as f64);
        let xd = xs.data();
        let mut out = vec![T::zero(); c];
        let mut lane = vec![T::zero(); t];
        for ci in 0..c {
            lane.copy_from_slice(&xd[ci * t..(ci + 1) * t]);
            lane.sort_unstable_by(|a, b| a.total_cmp(b));
            let mut acc = T::zero();
            for v in &lane {
                acc = acc + *v;
            }
            out[ci] = acc / denom;
        }
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::TimeMeanSorted { x: x.0 }))
    }

    /// Softmax along one axis with per-lane max subtraction.
    pub fn softmax_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x);
        if axis >= xs.ndim() {
            return Err(Error::dim(
                "softmax_axis",
                format!("axis < {}", xs.ndim()),
                format!("axis {axis}"),
            ));
        }
        let n = xs.shape()[axis];
        let inner: usize = xs.shape()[axis + 1..].iter().product();
        let outer: usize = xs.shape()[..axis].iter().product();
        let xd = xs.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..n {
                    let v = xd[base + j * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xd[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / z;
                }
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxAxis { x: x.0, axis }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let axis = self.value(x).ndim() - 1;
        self.softmax_axis(x, axis)
    }

    /// Max over the leading (window) axis; ties resolve to the first index
    /// and the subgradient flows there.
    pub fn max_window(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        if xs.ndim() < 1 || xs.shape()[0] < 1 {
            return Err(Error::dim("max_window", "leading window axis", shape_string(xs.shape())));
        }
        let n = xs.shape()[0];
        let rest = xs.len() / n;
        let xd = xs.data();
        let mut out = vec![T::zero(); rest];
        let mut winners = vec![0usize; rest];
        for lane in 0..rest {
            let mut best = xd[lane];
            let mut arg = 0usize;
            for j in 1..n {
                let v = xd[j * rest + lane];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            out[lane] = best;
            winners[lane] = arg;
        }
        let out_shape = if xs.ndim() == 1 { vec![1] } else { xs.shape()[1..].to_vec() };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MaxWindow { x: x.0, winners }))
    }

    /// Local correlation of two `[C,H,W]` maps over displacements in
    /// `[-radius, radius]^2`; out-of-frame targets contribute exact zeros.
    pub fn correlate(&mut self, a: NodeId, b: NodeId, radius: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "correlate",
                shape_string(av.shape()),
                shape_string(bv.shape()),
            ));
        }
        let (c, h, w) = av.dims3()?;
        let side = 2 * radius + 1;
        let out = correlate_forward_kernel(av.data(), bv.data(), c, h, w, radius);
        let value = Tensor::new(vec![side * side, h, w], out)?;
        Ok(self.push(value, Op::Correlate { a: a.0, b: b.0, radius }))
    }

    /// Extract frame `t`: `[C,T,H,W] -> [C,H,W]`.
    pub fn select_time(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let (c, tdim, h, w) = xs.dims4()?;
        if t >= tdim {
            return Err(Error::dim(
                "select_time",
                format!("frame index < {tdim}"),
                format!("{t}"),
            ));
        }
        let hw = h * w;
        let xd = xs.data();
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            let src = (ci * tdim + t) * hw;
            out[ci * hw..(ci + 1) * hw].copy_from_slice(&xd[src..src + hw]);
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::SelectTime { x: x.0, t }))
    }

    /// Extract one slice of the leading axis.
    pub fn slice_axis0(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let n = xs.shape()[0];
        if index >= n {
            return Err(Error::dim(
                "slice_axis0",
                format!("index < {n}"),
                format!("{index}"),
            ));
        }
        let rest = xs.len() / n;
        let out = xs.data()[index * rest..(index + 1) * rest].to_vec();
        let out_shape = if xs.ndim() == 1 { vec![1] } else { xs.shape()[1..].to_vec() };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SliceAxis0 { x: x.0, index }))
    }

    /// Expected displacement under per-position window weights:
    /// `[(2R+1)^2, H, W] -> [2, H, W]` with plane 0 = dx and plane 1 = dy.
    /// Opposite offsets are accumulated as pairs, so a symmetric weight
    /// window yields exact zeros.
    pub fn window_centroid(&mut self, probs: NodeId, radius: usize) -> Result<NodeId> {
        let ps = self.value(probs);
        let (n, h, w) = ps.dims3()?;
        let side = 2 * radius + 1;
        if n != side * side {
            return Err(Error::dim(
                "window_centroid",
                format!("window axis {} for radius {radius}", side * side),
                format!("{n}"),
            ));
        }
        let offsets = window_offsets(radius);
        let hw = h * w;
        let pd = ps.data();
        let mut out = vec![T::zero(); 2 * hw];
        for lane in 0..hw {
            let mut dx = T::zero();
            let mut dy = T::zero();
            for i in 0..n / 2 {
                let j = n - 1 - i;
                let (ody, odx) = offsets[i];
                let diff = pd[i * hw + lane] - pd[j * hw + lane];
                dx = dx + T::from_f64(odx as f64) * diff;
                dy = dy + T::from_f64(ody as f64) * diff;
            }
            out[lane] = dx;
            out[hw + lane] = dy;
        }
        let value = Tensor::new(vec![2, h, w], out)?;
        Ok(self.push(value, Op::WindowCentroid { probs: probs.0, radius }))
    }

    /// 1D convolution of a `[T]` vector with odd-length weights `[k]`,
    /// boundary handled by clamping (edge replication) so constant inputs
    /// produce constant outputs.
    pub fn conv1d_time_clamped(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.value(x), self.value(w));
        let t = xs.dims1()?;
        let k = ws.dims1()?;
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal attention kernel must be odd, got {k}"
            )));
        }
        if k > t {
            return Err(Error::Config(format!(
                "temporal attention kernel {k} exceeds temporal extent {t}"
            )));
        }
        let half = (k / 2) as isize;
        let (xd, wdat) = (xs.data(), ws.data());
        let mut out = vec![T::zero(); t];
        for ti in 0..t {
            let mut acc = T::zero();
            for j in 0..k {
                let src = (ti as isize + j as isize - half).clamp(0, t as isize - 1) as usize;
                acc = acc + wdat[j] * xd[src];
            }
            out[ti] = acc;
        }
        let value = Tensor::new(vec![t], out)?;
        Ok(self.push(value, Op::Conv1dTimeClamped { x: x.0, w: w.0 }))
    }

    /// Stack same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("stack needs at least one part".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        for p in parts {
            if self.value(*p).shape() != first.as_slice() {
                return Err(Error::dim(
                    "stack",
                    shape_string(&first),
                    shape_string(self.value(*p).shape()),
                ));
            }
        }
        let each: usize = first.iter().product();
        let mut out = Vec::with_capacity(parts.len() * each);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let value = Tensor::new(shape, out)?;
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Stack { parts: ids }))
    }

    /// Reinterpret the buffer under a new shape of identical volume.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xs = self.value(x);
        let n: usize = shape.iter().product();
        if n != xs.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "reshape",
                format!("shape with volume {}", xs.len()),
                shape_string(shape),
            ));
        }
        let value = Tensor::new(shape.to_vec(), xs.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for v in self.value(x).data() {
            acc = acc + *v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 })
    }

    /// Cross-entropy of a `[K]` score vector against an integer label.
    pub fn softmax_xent(&mut self, scores: NodeId, label: usize) -> Result<NodeId> {
        let sv = self.value(scores);
        let k = sv.dims1()?;
        if label >= k {
            return Err(Error::Config(format!("label {label} out of range for {k} classes")));
        }
        let sd = sv.data();
        let mut m = T::neg_infinity();
        for &v in sd {
            if v > m {
                m = v;
            }
        }
        let mut z = T::zero();
        let mut probs = vec![T::zero(); k];
        for (p, &v) in probs.iter_mut().zip(sd) {
            *p = (v - m).exp();
            z = z + *p;
        }
        for p in probs.iter_mut() {
            *p = *p / z;
        }
        let loss = z.ln() - (sd[label] - m);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { scores: scores.0, label, probs },
        ))
    }

    /// Reverse sweep from `root`. `upstream` seeds the output gradient and
    /// must match the root shape; when omitted the root must be scalar and
    /// is seeded with one.
    pub fn backward(&self, root: NodeId, upstream: Option<&Tensor<T>>) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Lookup(format!("node {} not on tape", root.0)));
        }
        let root_val = &self.nodes[root.0].value;
        let seed: Vec<T> = match upstream {
            Some(u) => {
                if u.shape() != root_val.shape() {
                    return Err(Error::dim(
                        "backward",
                        shape_string(root_val.shape()),
                        shape_string(u.shape()),
                    ));
                }
                u.data().to_vec()
            }
            None => {
                if root_val.len() != 1 {
                    return Err(Error::dim(
                        "backward",
                        "scalar root (or explicit upstream gradient)",
                        shape_string(root_val.shape()),
                    ));
                }
                vec![T::one()]
            }
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(up) = hi[0].as_deref() else { continue };
            self.backprop_node(i, up, lo)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, up: &[T], lo: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::PointwiseConv { x, w, b } => {
                let xs = &self.nodes[*x].value;
                let ws = &self.nodes[*w].value;
                let (cout, cin) = ws.dims2()?;
                let rest = xs.len() / cin;
                let (xd, wd) = (xs.data(), ws.data());
                {
                    let gx = grad_buf(lo, *x, xs.len());
                    for o in 0..cout {
                        let urow = &up[o * rest..(o + 1) * rest];
                        for c in 0..cin {
                            let wv = wd[o * cin + c];
                            let gxrow = &mut gx[c * rest..(c + 1) * rest];
                            for (g, u) in gxrow.iter_mut().zip(urow) {
                                *g = *g + wv * *u;
                            }
                        }
                    }
                }
                {
                    let gw = grad_buf(lo, *w, cout * cin);
                    for o in 0..cout {
                        let urow = &up[o * rest..(o + 1) * rest];
                        for c in 0..cin {
                            let xrow = &xd[c * rest..(c + 1) * rest];
                            let mut acc = T::zero();
                            for (u, xv) in urow.iter().zip(xrow) {
                                acc = acc + *u * *xv;
                            }
                            gw[o * cin + c] = gw[o * cin + c] + acc;
                        }
                    }
                }
                {
                    let gb = grad_buf(lo, *b, cout);
                    for o in 0..cout {
                        let mut acc = T::zero();
                        for u in &up[o * rest..(o + 1) * rest] {
                            acc = acc + *u;
                        }
                        gb[o] = gb[o] + acc;
                    }
                }
            }
            Op::DepthwiseConv2d { x, k } => {
                let xs = &self.nodes[*x].value;
                let ks = &self.nodes[*k].value;
                let (c, t, h, w) = xs.dims4()?;
                let (_, kh, kw) = ks.dims3()?;
                let (gx_data, gk_data) =
                    depthwise2d_backward(up, xs.data(), ks.data(), c, t, h, w, kh, kw);
                add_assign(grad_buf(lo, *x, xs.len()), &gx_data);
                add_assign(grad_buf(lo, *k, ks.len()), &gk_data);
            }
            Op::DepthwiseConvTime { x, k } => {
                let xs = &self.nodes[*x].value;
                let ks = &self.nodes[*k].value;
                let (c, t, h, w) = xs.dims4()?;
                let (_, kt) = ks.dims2()?;
                let pt = (kt / 2) as isize;
                let hw = h * w;
                let (xd, kd) = (xs.data(), ks.data());
                let mut gx = vec![T::zero(); xs.len()];
                let mut gk = vec![T::zero(); ks.len()];
                for ci in 0..c {
                    for ti in 0..t {
                        let urow = &up[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
                        for j in 0..kt {
                            let src = ti as isize + j as isize - pt;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let sbase = (ci * t + src as usize) * hw;
                            let kv = kd[ci * kt + j];
                            let mut acc = T::zero();
                            for s in 0..hw {
                                gx[sbase + s] = gx[sbase + s] + kv * urow[s];
                                acc = acc + urow[s] * xd[sbase + s];
                            }
                            gk[ci * kt + j] = gk[ci * kt + j] + acc;
                        }
                    }
                }
                add_assign(grad_buf(lo, *x, xs.len()), &gx);
                add_assign(grad_buf(lo, *k, ks.len()), &gk);
            }
            Op::AvgPool2 { x } => {
                let xs = &self.nodes[*x].value;
                let (c, t, h, w) = xs.dims4()?;
                let (h2, w2) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let gx = grad_buf(lo, *x, xs.len());
                for ct in 0..c * t {
                    for y in 0..h2 {
                        for xcol in 0..w2 {
                            let g = up[ct * h2 * w2 + y * w2 + xcol] * quarter;
                            let base = ct * h * w;
                            gx[base + 2 * y * w + 2 * xcol] = gx[base + 2 * y * w + 2 * xcol] + g;
                            gx[base + 2 * y * w + 2 * xcol + 1] =
                                gx[base + 2 * y * w + 2 * xcol + 1] + g;
                            gx[base + (2 * y + 1) * w + 2 * xcol] =
                                gx[base + (2 * y + 1) * w + 2 * xcol] + g;
                            gx[base + (2 * y + 1) * w + 2 * xcol + 1] =
                                gx[base + (2 * y + 1) * w + 2 * xcol + 1] + g;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let od = out_val.data();
                let gx = grad_buf(lo, *x, od.len());
                for (s, (g, u)) in gx.iter_mut().zip(up).enumerate() {
                    if od[s] > T::zero() {
                        *g = *g + *u;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let od = out_val.data();
                let gx = grad_buf(lo, *x, od.len());
                for (s, (g, u)) in gx.iter_mut().zip(up).enumerate() {
                    let y = od[s];
                    *g = *g + *u * y * (T::one() - y);
                }
            }
            Op::Add { a, b } => {
                add_assign(grad_buf(lo, *a, up.len()), up);
                add_assign(grad_buf(lo, *b, up.len()), up);
            }
            Op::MulConst { x, factor } => {
                let fd = factor.data();
                let gx = grad_buf(lo, *x, up.len());
                for s in 0..up.len() {
                    gx[s] = gx[s] + up[s] * fd[s];
                }
            }
            Op::MulBroadcastTime { x, w } => {
                let xs = &self.nodes[*x].value;
                let (c, t, h, wd4) = xs.dims4()?;
                let hw = h * wd4;
                let wdat = self.nodes[*w].value.data().to_vec();
                let xd = xs.data();
                {
                    let gx = grad_buf(lo, *x, xs.len());
                    for ci in 0..c {
                        for ti in 0..t {
                            let base = (ci * t + ti) * hw;
                            let wv = wdat[ti];
                            for s in 0..hw {
                                gx[base + s] = gx[base + s] + up[base + s] * wv;
                            }
                        }
                    }
                }
                {
                    let gw = grad_buf(lo, *w, t);
                    for ci in 0..c {
                        for ti in 0..t {
                            let base = (ci * t + ti) * hw;
                            let mut acc = T::zero();
                            for s in 0..hw {
                                acc = acc + up[base + s] * xd[base + s];
                            }
                            gw[ti] = gw[ti] + acc;
                        }
                    }
                }
            }
            Op::GapSpatial { x } => {
                let xs = &self.nodes[*x].value;
                let (c, t, h, w) = xs.dims4()?;
                let hw = h * w;
                let denom = T::from_f64(hw as f64);
                let gx = grad_buf(lo, *x, xs.len());
                for ct in 0..c * t {
                    let g = up[ct] / denom;
                    for s in 0..hw {
                        gx[ct * hw + s] = gx[ct * hw + s] + g;
                    }
                }
            }
            Op::GapToTime { x } => {
                let xs = &self.nodes[*x].value;
                let (c, t, h, w) = xs.dims4()?;
                let hw = h * w;
                let denom = T::from_f64((c * hw) as f64);
                let gx = grad_buf(lo, *x, xs.len());
                for ci in 0..c {
                    for ti in 0..t {
                        let g = up[ti] / denom;
                        let base = (ci * t + ti) * hw;
                        for s in 0..hw {
                            gx[base + s] = gx[base + s] + g;
                        }
                    }
                }
            }
            Op::TimeMeanSorted { x } => {
                let xs = &self.nodes[*x].value;
                let (c, t) = xs.dims2()?;
                let denom = T::from_f64(t as f64);
                let gx = grad_buf(lo, *x, xs.len());
                for ci in 0..c {
                    let g = up[ci] / denom;
                    for ti in 0..t {
                        gx[ci * t + ti] = gx[ci * t + ti] + g;
                    }
                }
            }
            Op::SoftmaxAxis { x, axis } => {
                let y = out_val;
                let n = y.shape()[*axis];
                let inner: usize = y.shape()[*axis + 1..].iter().product();
                let outer: usize = y.shape()[..*axis].iter().product();
                let yd = y.data();
                let gx = grad_buf(lo, *x, yd.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + up[base + j * inner] * yd[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = gx[idx] + yd[idx] * (up[idx] - dot);
                        }
                    }
                }
            }
            Op::MaxWindow { x, winners } => {
                let xs = &self.nodes[*x].value;
                let n = xs.shape()[0];
                let rest = xs.len() / n;
                let gx = grad_buf(lo, *x, xs.len());
                for lane in 0..rest {
                    let idx = winners[lane] * rest + lane;
                    gx[idx] = gx[idx] + up[lane];
                }
            }
            Op::Correlate { a, b, radius } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (c, h, w) = av.dims3()?;
                let (ga_data, gb_data) =
                    correlate_backward_kernel(up, av.data(), bv.data(), c, h, w, *radius);
                add_assign(grad_buf(lo, *a, av.len()), &ga_data);
                add_assign(grad_buf(lo, *b, bv.len()), &gb_data);
            }
            Op::SelectTime { x, t } => {
                let xs = &self.nodes[*x].value;
                let (c, tdim, h, w) = xs.dims4()?;
                let hw = h * w;
                let gx = grad_buf(lo, *x, xs.len());
                for ci in 0..c {
                    let dst = (ci * tdim + t) * hw;
                    for s in 0..hw {
                        gx[dst + s] = gx[dst + s] + up[ci * hw + s];
                    }
                }
            }
            Op::SliceAxis0 { x, index } => {
                let xs = &self.nodes[*x].value;
                let n = xs.shape()[0];
                let rest = xs.len() / n;
                let gx = grad_buf(lo, *x, xs.len());
                for s in 0..rest {
                    gx[index * rest + s] = gx[index * rest + s] + up[s];
                }
            }
            Op::WindowCentroid { probs, radius } => {
                let ps = &self.nodes[*probs].value;
                let (n, h, w) = ps.dims3()?;
                let hw = h * w;
                let offsets = window_offsets(*radius);
                let gp = grad_buf(lo, *probs, ps.len());
                for lane in 0..hw {
                    let ux = up[lane];
                    let uy = up[hw + lane];
                    for (i, (ody, odx)) in offsets.iter().enumerate().take(n) {
                        let g = ux * T::from_f64(*odx as f64) + uy * T::from_f64(*ody as f64);
                        gp[i * hw + lane] = gp[i * hw + lane] + g;
                    }
                }
            }
            Op::Conv1dTimeClamped { x, w } => {
                let xs = &self.nodes[*x].value;
                let ws = &self.nodes[*w].value;
                let t = xs.len();
                let k = ws.len();
                let half = (k / 2) as isize;
                let xd = xs.data();
                let wd = ws.data();
                let mut gx = vec![T::zero(); t];
                let mut gw = vec![T::zero(); k];
                for ti in 0..t {
                    for j in 0..k {
                        let src = (ti as isize + j as isize - half).clamp(0, t as isize - 1) as usize;
                        gx[src] = gx[src] + wd[j] * up[ti];
                        gw[j] = gw[j] + xd[src] * up[ti];
                    }
                }
                add_assign(grad_buf(lo, *x, t), &gx);
                add_assign(grad_buf(lo, *w, k), &gw);
            }
            Op::Stack { parts } => {
                let each = up.len() / parts.len();
                for (pi, part) in parts.iter().enumerate() {
                    let chunk = &up[pi * each..(pi + 1) * each];
                    add_assign(grad_buf(lo, *part, each), chunk);
                }
            }
            Op::Reshape { x } => {
                add_assign(grad_buf(lo, *x, up.len()), up);
            }
            Op::Sum { x } => {
                let xs = &self.nodes[*x].value;
                let g = up[0];
                let gx = grad_buf(lo, *x, xs.len());
                for v in gx.iter_mut() {
                    *v = *v + g;
                }
            }
            Op::SoftmaxXent { scores, label, probs } => {
                let g = up[0];
                let gs = grad_buf(lo, *scores, probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let delta = if j == *label { T::one() } else { T::zero() };
                    gs[j] = gs[j] + g * (*p - delta);
                }
            }
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Scalar>(lo: &'a mut [Option<Vec<T>>], idx: usize, len: usize) -> &'a mut [T] {
    lo[idx].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn sigmoid_stable<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn depthwise2d_forward<T: Scalar>(
    xd: &[T],
    kd: &[T],
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut out = vec![T::zero(); xd.len()];
    for ci in 0..c {
        for ti in 0..t {
            let base = (ci * t + ti) * hw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kd[(ci * kh + ky) * kw + kx];
                    let oy = ky as isize - ph;
                    let ox = kx as isize - pw;
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = 0.max(-ox);
                        let x_hi = (w as isize).min(w as isize - ox);
                        let orow = base + (y as usize) * w;
                        let srow = base + (sy as usize) * w;
                        for x in x_lo..x_hi {
                            let sx = (x + ox) as usize;
                            out[orow + x as usize] =
                                out[orow + x as usize] + kv * xd[srow + sx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise2d_backward<T: Scalar>(
    up: &[T],
    xd: &[T],
    kd: &[T],
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<T>) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut gx = vec![T::zero(); xd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    for ci in 0..c {
        for ti in 0..t {
            let base = (ci * t + ti) * hw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kd[(ci * kh + ky) * kw + kx];
                    let oy = ky as isize - ph;
                    let ox = kx as isize - pw;
                    let mut acc = T::zero();
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = 0.max(-ox);
                        let x_hi = (w as isize).min(w as isize - ox);
                        let orow = base + (y as usize) * w;
                        let srow = base + (sy as usize) * w;
                        for x in x_lo..x_hi {
                            let sx = (x + ox) as usize;
                            let u = up[orow + x as usize];
                            gx[srow + sx] = gx[srow + sx] + kv * u;
                            acc = acc + u * xd[srow + sx];
                        }
                    }
                    let kidx = (ci * kh + ky) * kw + kx;
                    gk[kidx] = gk[kidx] + acc;
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Naive quintuple-loop pointwise conv used as an independent oracle.
    fn pointwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c, t, h, wd) = x.dims4().unwrap();
        let (cout, _) = w.dims2().unwrap();
        let mut out = Tensor::zeros(&[cout, t, h, wd]);
        for o in 0..cout {
            for ti in 0..t {
                for y in 0..h {
                    for xc in 0..wd {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            acc += w.data()[o * c + ci]
                                * x.data()[((ci * t + ti) * h + y) * wd + xc];
                        }
                        out.data_mut()[((o * t + ti) * h + y) * wd + xc] = acc;
                    }
                }
            }
        }
        out
    }

    /// Literal per-element depthwise conv oracle with explicit zero padding.
    fn depthwise_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (c, t, h, w) = x.dims4().unwrap();
        let (_, kh, kw) = k.dims3().unwrap();
        let mut out = Tensor::zeros(&[c, t, h, w]);
        for ci in 0..c {
            for ti in 0..t {
                for y in 0..h as isize {
                    for xc in 0..w as isize {
                        let mut acc = 0.0;
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let sy = y + ky - (kh / 2) as isize;
                                let sx = xc + kx - (kw / 2) as isize;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += k.data()[(ci * kh + ky as usize) * kw + kx as usize]
                                    * x.data()[((ci * t + ti) * h + sy as usize) * w
                                        + sx as usize];
                            }
                        }
                        out.data_mut()[((ci * t + ti) * h + y as usize) * w + xc as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_sums_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor4([2, 1, 1, 1], vec![1.0, 1.0]));
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        let y = tape.conv_pointwise(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn pointwise_identity_is_bitwise() {
        let mut rng = crate::rng::rng_for(7, "pw-id");
        let xv = Tensor::<f64>::uniform(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let mut ident = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            ident.data_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(ident);
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv_pointwise(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn pointwise_matches_loop_oracle() {
        let mut rng = crate::rng::rng_for(42, "pw-oracle");
        let x = Tensor::<f64>::uniform(&mut rng, &[4, 2, 3, 3], -1.0, 1.0);
        let w = Tensor::<f64>::uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let b = Tensor::<f64>::uniform(&mut rng, &[5], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv_pointwise(xi, wi, bi).unwrap();
        let want = pointwise_oracle(&x, &w, &b);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn pointwise_rejects_mismatched_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[4, 2]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let err = tape.conv_pointwise(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 1, 2, 2]") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = crate::rng::rng_for(3, "dw-delta");
        let x = Tensor::<f64>::uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let mut k = Tensor::zeros(&[2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[9 + 4] = 1.0;
        let mut tape = Tape::new();
        let (xi, ki) = (tape.leaf(x.clone()), tape.leaf(k));
        let y = tape.conv_depthwise2d(xi, ki).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn depthwise_box_kernel_sums_interior() {
        let x = Tensor::filled(&[1, 1, 5, 5], 1.0f64);
        let k = Tensor::filled(&[1, 3, 3], 1.0f64);
        let mut tape = Tape::new();
        let (xi, ki) = (tape.leaf(x), tape.leaf(k));
        let y = tape.conv_depthwise2d(xi, ki).unwrap();
        // interior pixel (2,2) sees the full 3x3 box
        assert_eq!(tape.value(y).data()[2 * 5 + 2], 9.0);
        // corner keeps only the 2x2 in-bounds part
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut rng = crate::rng::rng_for(11, "dw-oracle");
        let x = Tensor::<f64>::uniform(&mut rng, &[3, 2, 6, 5], -1.0, 1.0);
        let k = Tensor::<f64>::uniform(&mut rng, &[3, 3, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xi, ki) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv_depthwise2d(xi, ki).unwrap();
        let want = depthwise_oracle(&x, &k);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn depthwise_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            tape.conv_depthwise2d(x, k),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0f64]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0f64, 0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::rng_for(5, "softmax");
        let x = Tensor::<f64>::uniform(&mut rng, &[4, 7], -3.0, 3.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.softmax_last(xi).unwrap();
        let yd = tape.value(y).data();
        for r in 0..4 {
            let s: f64 = yd[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_spatial_of_constant_is_constant() {
        let x = Tensor::filled(&[2, 3, 4, 4], 2.5f64);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.gap_spatial(xi).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 2.5);
        }
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Dim { .. })));
    }

    #[test]
    fn mul_broadcast_time_rejects_bad_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(tape.mul_broadcast_time(x, w), Err(Error::Dim { .. })));
    }

    #[test]
    fn backward_accumulates_over_consumers() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0f64]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s, None).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn stack_routes_gradients_to_repeated_parts() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![3.0f64, 4.0]));
        let s = tape.stack(&[a, b, a]).unwrap();
        assert_eq!(tape.value(s).shape(), &[3, 2]);
        let total = tape.sum(s);
        let grads = tape.backward(total, None).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn max_window_breaks_ties_toward_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0f64, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap());
        let y = tape.max_window(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s, None).unwrap();
        // lane 0 ties between window index 0 and 1: gradient goes to index 0
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1d_clamped_keeps_constant_input_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0f64; 6]));
        let w = tape.leaf(Tensor::from_vec(vec![0.25f64, 0.5, -0.125]));
        let y = tape.conv1d_time_clamped(x, w).unwrap();
        let first = tape.value(y).data()[0];
        for v in tape.value(y).data() {
            assert_eq!(*v, first);
        }
    }

    #[test]
    fn softmax_xent_matches_manual_value() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0, 0.5]));
        let loss = tape.softmax_xent(s, 1).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| (v - 2.0).exp()).sum();
        let want = z.ln();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }
}
