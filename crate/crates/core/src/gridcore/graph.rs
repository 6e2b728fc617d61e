//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`GraphBuilder`] appends nodes; every node's inputs are earlier nodes, so
//! the node list is already a topological order. [`DiffGraph::forward`] binds
//! named leaves to grids and evaluates every node once, caching outputs.
//! [`DiffGraph::backward`] seeds the terminal node and walks the list in
//! reverse, visiting each node exactly once, and returns the adjoint of every
//! named leaf. A backward call consumes the cached forward state; calling it
//! again without a fresh forward is an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::grid::{resize_bilinear, resize_bilinear_adjoint, Grid};

pub type NodeId = usize;

/// Named leaf values fed to [`DiffGraph::forward`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Grid>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grid: Grid) {
        self.map.insert(name.into(), grid);
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.map.get(name)
    }
}

/// Adjoints of every named leaf, keyed by leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Grid>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn insert(&mut self, name: String, grid: Grid) {
        self.map.insert(name, grid);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    Conv2d { stride: usize, pad: usize },
    Sigmoid,
    Relu,
    Add,
    Mul,
    Concat,
    ChannelSum,
    SpatialMean,
    SpatialSubBroadcast,
    GlobalAvgPool,
    FullyConnected,
    ResizeBilinear { out_h: usize, out_w: usize },
    Scale { factor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat",
            Op::ChannelSum => "channel_sum",
            Op::SpatialMean => "spatial_mean",
            Op::SpatialSubBroadcast => "spatial_sub_broadcast",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::FullyConnected => "fully_connected",
            Op::ResizeBilinear { .. } => "resize_bilinear",
            Op::Scale { .. } => "scale",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

/// Records a computation as an append-only node list.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "graph input references a later node");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    /// Named input. If the same name is used for several leaves they all read
    /// the same binding and their adjoints are summed.
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into() }, vec![])
    }

    /// 2-d convolution with zero padding.
    ///
    /// `x` is `Cin x H x W`; the kernel grid `w` packs `Cout*Cin` planes of
    /// `Kh x Kw` (plane `oc*Cin + ic`); `b` is `Cout x 1 x 1`. Output spatial
    /// size is `(H + 2*pad - Kh)/stride + 1` and likewise for width.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        assert!(stride > 0, "conv2d stride must be positive");
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    /// Concatenates along the channel axis; all inputs share H and W.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat needs at least one input");
        self.push(Op::Concat, xs.to_vec())
    }

    /// Collapses all channels into one plane by summation.
    pub fn channel_sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::ChannelSum, vec![x])
    }

    /// Per-channel mean over all spatial positions, to `C x 1 x 1`.
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SpatialMean, vec![x])
    }

    /// `x - m` where `m` is `C x 1 x 1`, broadcast over space.
    pub fn spatial_sub_broadcast(&mut self, x: NodeId, m: NodeId) -> NodeId {
        self.push(Op::SpatialSubBroadcast, vec![x, m])
    }

    /// Global average pool to `C x 1 x 1` (same arithmetic as
    /// [`GraphBuilder::spatial_mean`], kept as its own kind for clarity at
    /// call sites).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    /// Fully-connected layer over a channel vector: `x` is `Cin x 1 x 1`,
    /// `w` is `Cout x Cin x 1`, `b` is `Cout x 1 x 1`.
    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::FullyConnected, vec![x, w, b])
    }

    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        assert!(out_h > 0 && out_w > 0, "resize target must be nonzero");
        self.push(Op::ResizeBilinear { out_h, out_w }, vec![x])
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        assert!(factor.is_finite(), "scale factor must be finite");
        self.push(Op::Scale { factor }, vec![x])
    }

    /// Freezes the graph with `terminal` as the differentiated output.
    pub fn finish(self, terminal: NodeId) -> DiffGraph {
        assert!(terminal < self.nodes.len(), "terminal node does not exist");
        let n = self.nodes.len();
        DiffGraph {
            nodes: self.nodes,
            terminal,
            outs: vec![None; n],
            state: State::Fresh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Fresh,
    Forwarded,
    Backwarded,
}

/// A frozen recorded graph. Holds per-node cached outputs between a forward
/// and the matching backward call.
#[derive(Debug)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    terminal: NodeId,
    outs: Vec<Option<Grid>>,
    state: State,
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output index range `[lo, hi)` whose sampled input `o*stride - pad + k`
/// stays inside `[0, in_len)`.
#[inline]
fn conv_valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_len as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

impl DiffGraph {
    pub fn terminal(&self) -> NodeId {
        self.terminal
    }

    /// Cached output of a node from the last forward pass.
    pub fn node_output(&self, id: NodeId) -> Result<&Grid> {
        if self.state != State::Forwarded {
            return Err(Error::State("node_output requires a completed forward pass".into()));
        }
        self.outs
            .get(id)
            .and_then(|o| o.as_ref())
            .ok_or_else(|| Error::State(format!("node {id} has no cached output")))
    }

    /// Evaluates every node in order and returns the terminal output.
    ///
    /// Any previous cached state is discarded, so forward can always be
    /// called again with new bindings.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<Grid> {
        for o in &mut self.outs {
            *o = None;
        }
        for id in 0..self.nodes.len() {
            let out = self.eval_node(id, bindings)?;
            if let Some(i) = out.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "node {id} ({}) output at flat index {i}",
                    self.nodes[id].op.name()
                )));
            }
            self.outs[id] = Some(out);
        }
        self.state = State::Forwarded;
        Ok(self.outs[self.terminal].clone().unwrap())
    }

    fn input_out(&self, id: NodeId, slot: usize) -> &Grid {
        let src = self.nodes[id].inputs[slot];
        self.outs[src].as_ref().expect("inputs evaluated before node")
    }

    fn shape_err(&self, id: NodeId, expected: String, actual: String) -> Error {
        Error::shape(
            format!("node {id} ({})", self.nodes[id].op.name()),
            expected,
            actual,
        )
    }

    fn eval_node(&self, id: NodeId, bindings: &Bindings) -> Result<Grid> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { name } => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::State(format!("leaf \"{name}\" (node {id}) is not bound"))),
            Op::Sigmoid => self.input_out(id, 0).map(stable_sigmoid),
            Op::Relu => self.input_out(id, 0).map(|v| v.max(0.0)),
            Op::Scale { factor } => self.input_out(id, 0).map(|v| v * factor),
            Op::Add | Op::Mul => {
                let a = self.input_out(id, 0);
                let b = self.input_out(id, 1);
                if !a.same_shape(b) {
                    return Err(self.shape_err(id, a.shape_str(), b.shape_str()));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| if matches!(node.op, Op::Add) { x + y } else { x * y })
                    .collect();
                Grid::new(a.channels(), a.height(), a.width(), data)
            }
            Op::Concat => {
                let first = self.input_out(id, 0);
                let (h, w) = (first.height(), first.width());
                let mut channels = 0;
                for slot in 0..node.inputs.len() {
                    let g = self.input_out(id, slot);
                    if g.height() != h || g.width() != w {
                        return Err(self.shape_err(
                            id,
                            format!("spatial size {h}x{w}"),
                            g.shape_str(),
                        ));
                    }
                    channels += g.channels();
                }
                let mut data = Vec::with_capacity(channels * h * w);
                for slot in 0..node.inputs.len() {
                    data.extend_from_slice(self.input_out(id, slot).data());
                }
                Grid::new(channels, h, w, data)
            }
            Op::ChannelSum => {
                let x = self.input_out(id, 0);
                let (c_n, h, w) = x.shape();
                let mut data = vec![0.0; h * w];
                for c in 0..c_n {
                    for (acc, &v) in data.iter_mut().zip(x.channel(c)) {
                        *acc += v;
                    }
                }
                Grid::new(1, h, w, data)
            }
            Op::SpatialMean | Op::GlobalAvgPool => {
                let x = self.input_out(id, 0);
                let (c_n, h, w) = x.shape();
                let inv = 1.0 / (h * w) as f64;
                let data = (0..c_n)
                    .map(|c| x.channel(c).iter().sum::<f64>() * inv)
                    .collect();
                Grid::new(c_n, 1, 1, data)
            }
            Op::SpatialSubBroadcast => {
                let x = self.input_out(id, 0);
                let m = self.input_out(id, 1);
                if m.channels() != x.channels() || m.height() != 1 || m.width() != 1 {
                    return Err(self.shape_err(
                        id,
                        format!("{}x1x1 broadcast operand", x.channels()),
                        m.shape_str(),
                    ));
                }
                let (c_n, h, w) = x.shape();
                let mut data = Vec::with_capacity(c_n * h * w);
                for c in 0..c_n {
                    let mv = m.at(c, 0, 0);
                    data.extend(x.channel(c).iter().map(|&v| v - mv));
                }
                Grid::new(c_n, h, w, data)
            }
            Op::FullyConnected => {
                let x = self.input_out(id, 0);
                let w = self.input_out(id, 1);
                let b = self.input_out(id, 2);
                let c_in = x.channels();
                if x.height() != 1 || x.width() != 1 {
                    return Err(self.shape_err(id, format!("{c_in}x1x1 input"), x.shape_str()));
                }
                let c_out = w.channels();
                if w.height() != c_in || w.width() != 1 {
                    return Err(self.shape_err(id, format!("{c_out}x{c_in}x1 weight"), w.shape_str()));
                }
                if b.shape() != (c_out, 1, 1) {
                    return Err(self.shape_err(id, format!("{c_out}x1x1 bias"), b.shape_str()));
                }
                let data = (0..c_out)
                    .map(|o| {
                        let row = w.channel(o);
                        let dot: f64 = row.iter().zip(x.data()).map(|(&wi, &xi)| wi * xi).sum();
                        dot + b.at(o, 0, 0)
                    })
                    .collect();
                Grid::new(c_out, 1, 1, data)
            }
            Op::ResizeBilinear { out_h, out_w } => resize_bilinear(self.input_out(id, 0), *out_h, *out_w),
            Op::Conv2d { stride, pad } => {
                let x = self.input_out(id, 0);
                let w = self.input_out(id, 1);
                let b = self.input_out(id, 2);
                let (c_in, in_h, in_w) = x.shape();
                let (kh, kw) = (w.height(), w.width());
                if w.channels() % c_in != 0 {
                    return Err(self.shape_err(
                        id,
                        format!("kernel channels divisible by input channels {c_in}"),
                        w.shape_str(),
                    ));
                }
                let c_out = w.channels() / c_in;
                if b.shape() != (c_out, 1, 1) {
                    return Err(self.shape_err(id, format!("{c_out}x1x1 bias"), b.shape_str()));
                }
                if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
                    return Err(self.shape_err(
                        id,
                        format!("input at least {kh}x{kw} after padding"),
                        x.shape_str(),
                    ));
                }
                let out_h = (in_h + 2 * pad - kh) / stride + 1;
                let out_w = (in_w + 2 * pad - kw) / stride + 1;
                let mut out = vec![0.0; c_out * out_h * out_w];
                for oc in 0..c_out {
                    let bias = b.at(oc, 0, 0);
                    let plane = &mut out[oc * out_h * out_w..(oc + 1) * out_h * out_w];
                    for v in plane.iter_mut() {
                        *v = bias;
                    }
                    for ic in 0..c_in {
                        let xp = x.channel(ic);
                        let kp = w.channel(oc * c_in + ic);
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = conv_valid_range(out_h, in_h, *stride, *pad, ky);
                            for kx in 0..kw {
                                let wv = kp[ky * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (ox_lo, ox_hi) = conv_valid_range(out_w, in_w, *stride, *pad, kx);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = &xp[iy * in_w..(iy + 1) * in_w];
                                    let orow = &mut plane[oy * out_w..(oy + 1) * out_w];
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * stride + kx - pad;
                                        orow[ox] += wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
                Grid::new(c_out, out_h, out_w, out)
            }
        }
    }

    /// Reverse pass from the terminal node.
    ///
    /// `seed` must match the terminal output shape. Consumes the cached
    /// forward state: a second backward without a new forward is rejected.
    pub fn backward(&mut self, seed: &Grid) -> Result<Gradients> {
        match self.state {
            State::Fresh => return Err(Error::State("backward called before forward".into())),
            State::Backwarded => {
                return Err(Error::State(
                    "backward called twice without an intervening forward".into(),
                ))
            }
            State::Forwarded => {}
        }
        let term_out = self.outs[self.terminal].as_ref().unwrap();
        if !seed.same_shape(term_out) {
            return Err(Error::shape("backward seed", term_out.shape_str(), seed.shape_str()));
        }

        let mut grads: Vec<Option<Grid>> = vec![None; self.nodes.len()];
        grads[self.terminal] = Some(seed.clone());

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[id] = Some(dy); // collected below
                    continue;
                }
                Op::Sigmoid => {
                    let y = self.outs[id].as_ref().unwrap();
                    let d = mul_elem(&dy, &y.map(|v| v * (1.0 - v))?);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                Op::Relu => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let d = mul_elem(&dy, &x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                Op::Scale { factor } => {
                    accumulate(&mut grads, node.inputs[0], dy.map(|v| v * factor)?);
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[0], dy.clone());
                    accumulate(&mut grads, node.inputs[1], dy);
                }
                Op::Mul => {
                    let a = self.outs[node.inputs[0]].as_ref().unwrap();
                    let b = self.outs[node.inputs[1]].as_ref().unwrap();
                    accumulate(&mut grads, node.inputs[0], mul_elem(&dy, b));
                    accumulate(&mut grads, node.inputs[1], mul_elem(&dy, a));
                }
                Op::Concat => {
                    let mut start = 0;
                    for &src in &node.inputs {
                        let c = self.outs[src].as_ref().unwrap().channels();
                        let part = dy.extract_channels(start, c)?;
                        accumulate(&mut grads, src, part);
                        start += c;
                    }
                }
                Op::ChannelSum => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let (c_n, h, w) = x.shape();
                    let mut d = Grid::zeros(c_n, h, w);
                    for c in 0..c_n {
                        let dst = &mut d.data_mut()[c * h * w..(c + 1) * h * w];
                        dst.copy_from_slice(dy.data());
                    }
                    accumulate(&mut grads, node.inputs[0], d);
                }
                Op::SpatialMean | Op::GlobalAvgPool => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let (c_n, h, w) = x.shape();
                    let inv = 1.0 / (h * w) as f64;
                    let mut d = Grid::zeros(c_n, h, w);
                    for c in 0..c_n {
                        let g = dy.at(c, 0, 0) * inv;
                        for v in &mut d.data_mut()[c * h * w..(c + 1) * h * w] {
                            *v = g;
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], d);
                }
                Op::SpatialSubBroadcast => {
                    let c_n = dy.channels();
                    let mut dm = Grid::zeros(c_n, 1, 1);
                    for c in 0..c_n {
                        dm.data_mut()[c] = -dy.channel(c).iter().sum::<f64>();
                    }
                    accumulate(&mut grads, node.inputs[0], dy.clone());
                    accumulate(&mut grads, node.inputs[1], dm);
                }
                Op::FullyConnected => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let w = self.outs[node.inputs[1]].as_ref().unwrap();
                    let c_in = x.channels();
                    let c_out = w.channels();
                    let mut dx = Grid::zeros(c_in, 1, 1);
                    let mut dw = Grid::zeros(c_out, c_in, 1);
                    for o in 0..c_out {
                        let g = dy.at(o, 0, 0);
                        let row = w.channel(o);
                        for c in 0..c_in {
                            dx.data_mut()[c] += g * row[c];
                            dw.data_mut()[o * c_in + c] = g * x.data()[c];
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                    accumulate(&mut grads, node.inputs[1], dw);
                    accumulate(&mut grads, node.inputs[2], dy);
                }
                Op::ResizeBilinear { .. } => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let d = resize_bilinear_adjoint(&dy, x.height(), x.width());
                    accumulate(&mut grads, node.inputs[0], d);
                }
                Op::Conv2d { stride, pad } => {
                    let x = self.outs[node.inputs[0]].as_ref().unwrap();
                    let w = self.outs[node.inputs[1]].as_ref().unwrap();
                    let (c_in, in_h, in_w) = x.shape();
                    let (kh, kw) = (w.height(), w.width());
                    let c_out = w.channels() / c_in;
                    let (out_h, out_w) = (dy.height(), dy.width());

                    let mut dx = Grid::zeros(c_in, in_h, in_w);
                    let mut dw = Grid::zeros(w.channels(), kh, kw);
                    let mut db = Grid::zeros(c_out, 1, 1);
                    for oc in 0..c_out {
                        let dyp = dy.channel(oc);
                        db.data_mut()[oc] = dyp.iter().sum();
                        for ic in 0..c_in {
                            let xp = x.channel(ic);
                            let kp = w.channel(oc * c_in + ic);
                            let kplane = (oc * c_in + ic) * kh * kw;
                            for ky in 0..kh {
                                let (oy_lo, oy_hi) = conv_valid_range(out_h, in_h, *stride, *pad, ky);
                                for kx in 0..kw {
                                    let (ox_lo, ox_hi) = conv_valid_range(out_w, in_w, *stride, *pad, kx);
                                    let wv = kp[ky * kw + kx];
                                    let mut wg = 0.0;
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        let dyrow = &dyp[oy * out_w..(oy + 1) * out_w];
                                        let xrow = &xp[iy * in_w..(iy + 1) * in_w];
                                        let dxrow =
                                            &mut dx.data_mut()[ic * in_h * in_w + iy * in_w..ic * in_h * in_w + (iy + 1) * in_w];
                                        for ox in ox_lo..ox_hi {
                                            let ix = ox * stride + kx - pad;
                                            let g = dyrow[ox];
                                            wg += g * xrow[ix];
                                            dxrow[ix] += g * wv;
                                        }
                                    }
                                    dw.data_mut()[kplane + ky * kw + kx] = wg;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                    accumulate(&mut grads, node.inputs[1], dw);
                    accumulate(&mut grads, node.inputs[2], db);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name } = &node.op {
                let g = match grads[id].take() {
                    Some(g) => g,
                    // Leaf not reachable from the terminal: zero adjoint.
                    None => {
                        let shape = self.outs[id].as_ref().unwrap();
                        Grid::zeros(shape.channels(), shape.height(), shape.width())
                    }
                };
                match out.map.get_mut(name) {
                    Some(existing) => {
                        let sum = add_elem(existing, &g);
                        *existing = sum;
                    }
                    None => out.insert(name.clone(), g),
                }
            }
        }
        self.state = State::Backwarded;
        Ok(out)
    }
}

fn mul_elem(a: &Grid, b: &Grid) -> Grid {
    debug_assert!(a.same_shape(b));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Grid::new(a.channels(), a.height(), a.width(), data).expect("finite product")
}

fn add_elem(a: &Grid, b: &Grid) -> Grid {
    debug_assert!(a.same_shape(b));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Grid::new(a.channels(), a.height(), a.width(), data).expect("finite sum")
}

fn accumulate(grads: &mut [Option<Grid>], id: NodeId, g: Grid) {
    match &mut grads[id] {
        Some(existing) => *existing = add_elem(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Grid)]) -> Bindings {
        let mut b = Bindings::new();
        for (n, g) in pairs {
            b.insert(*n, g.clone());
        }
        b
    }

    #[test]
    fn sigmoid_of_zeros_is_half() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.sigmoid(x);
        let mut g = gb.finish(y);
        let out = g.forward(&bind(&[("x", Grid::zeros(1, 2, 2))])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn channel_sum_collapses() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.channel_sum(x);
        let mut g = gb.finish(y);
        let input = Grid::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = g.forward(&bind(&[("x", input)])).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let w = gb.leaf("w");
        let b = gb.leaf("b");
        let y = gb.conv2d(x, w, b, 1, 0);
        let mut g = gb.finish(y);
        let input = Grid::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = g
            .forward(&bind(&[
                ("x", input.clone()),
                ("w", Grid::constant(1, 1, 1, 1.0).unwrap()),
                ("b", Grid::zeros(1, 1, 1)),
            ]))
            .unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_shape_rule() {
        // 3x8x8 input, 4 output channels, 3x3 kernel, stride 2, pad 1 -> 4x4x4.
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let w = gb.leaf("w");
        let b = gb.leaf("b");
        let y = gb.conv2d(x, w, b, 2, 1);
        let mut g = gb.finish(y);
        let out = g
            .forward(&bind(&[
                ("x", Grid::constant(3, 8, 8, 0.5).unwrap()),
                ("w", Grid::constant(12, 3, 3, 0.01).unwrap()),
                ("b", Grid::zeros(4, 1, 1)),
            ]))
            .unwrap();
        assert_eq!(out.shape(), (4, 4, 4));
    }

    #[test]
    fn backward_of_channel_sum_is_ones() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.channel_sum(x);
        let mut g = gb.finish(y);
        g.forward(&bind(&[("x", Grid::new(2, 1, 2, vec![1., 2., 3., 4.]).unwrap())]))
            .unwrap();
        let grads = g.backward(&Grid::constant(1, 1, 2, 1.0).unwrap()).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero_is_quarter() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.sigmoid(x);
        let mut g = gb.finish(y);
        g.forward(&bind(&[("x", Grid::zeros(1, 1, 1))])).unwrap();
        let grads = g.backward(&Grid::constant(1, 1, 1, 1.0).unwrap()).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.25]);
    }

    #[test]
    fn chained_scales_multiply_gradients() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let a = gb.scale(x, 2.0);
        let y = gb.scale(a, 3.0);
        let mut g = gb.finish(y);
        g.forward(&bind(&[("x", Grid::constant(1, 1, 1, 1.0).unwrap())])).unwrap();
        let grads = g.backward(&Grid::constant(1, 1, 1, 1.0).unwrap()).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn fan_out_adjoints_accumulate() {
        // y = x * x: dy/dx = 2x.
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.mul(x, x);
        let mut g = gb.finish(y);
        g.forward(&bind(&[("x", Grid::constant(1, 1, 1, 3.0).unwrap())])).unwrap();
        let grads = g.backward(&Grid::constant(1, 1, 1, 1.0).unwrap()).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn concat_routes_seed_to_sources() {
        let mut gb = GraphBuilder::new();
        let a = gb.leaf("a");
        let b = gb.leaf("b");
        let y = gb.concat(&[a, b]);
        let mut g = gb.finish(y);
        g.forward(&bind(&[
            ("a", Grid::constant(1, 1, 2, 1.0).unwrap()),
            ("b", Grid::constant(2, 1, 2, 2.0).unwrap()),
        ]))
        .unwrap();
        let seed = Grid::new(3, 1, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let grads = g.backward(&seed).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[1., 2.]);
        assert_eq!(grads.get("b").unwrap().data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.sigmoid(x);
        let mut g = gb.finish(y);
        assert!(g.backward(&Grid::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("x");
        let y = gb.sigmoid(x);
        let mut g = gb.finish(y);
        g.forward(&bind(&[("x", Grid::zeros(1, 1, 1))])).unwrap();
        let seed = Grid::constant(1, 1, 1, 1.0).unwrap();
        assert!(g.backward(&seed).is_ok());
        assert!(g.backward(&seed).is_err());
        // A new forward re-arms backward.
        g.forward(&bind(&[("x", Grid::zeros(1, 1, 1))])).unwrap();
        assert!(g.backward(&seed).is_ok());
    }

    #[test]
    fn unbound_leaf_is_reported_by_name() {
        let mut gb = GraphBuilder::new();
        let x = gb.leaf("missing");
        let y = gb.sigmoid(x);
        let mut g = gb.finish(y);
        let err = g.forward(&Bindings::new()).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn add_shape_mismatch_names_node() {
        let mut gb = GraphBuilder::new();
        let a = gb.leaf("a");
        let b = gb.leaf("b");
        let y = gb.add(a, b);
        let mut g = gb.finish(y);
        let err = g
            .forward(&bind(&[
                ("a", Grid::zeros(1, 2, 2)),
                ("b", Grid::zeros(1, 3, 3)),
            ]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 2"), "{msg}");
        assert!(msg.contains("add"), "{msg}");
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut gb = GraphBuilder::new();
            let x = gb.leaf("x");
            let w = gb.leaf("w");
            let b = gb.leaf("b");
            let c = gb.conv2d(x, w, b, 1, 1);
            let r = gb.relu(c);
            let s = gb.sigmoid(r);
            gb.finish(s)
        };
        let input = Grid::from_fn(2, 5, 5, |c, y, x| ((c + 2 * y + 3 * x) as f64 * 0.13).sin()).unwrap();
        let w = Grid::from_fn(6, 3, 3, |c, y, x| ((c * 9 + y * 3 + x) as f64 * 0.07).cos()).unwrap();
        let b = Grid::new(3, 1, 1, vec![0.1, -0.2, 0.3]).unwrap();
        let binds = bind(&[("x", input), ("w", w), ("b", b)]);
        let o1 = build().forward(&binds).unwrap();
        let o2 = build().forward(&binds).unwrap();
        assert_eq!(o1, o2);
    }
}
