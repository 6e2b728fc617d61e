//! The saliency network: a small strided encoder, squeeze-excitation
//! feature fusion, and an activation head that centers the fused features,
//! squashes them to [0, 1], and flips maps whose corners look salient.
//!
//! The whole forward lives on one recorded graph whose terminal is the
//! stride-4 sigmoid plane. Corner inversion and the resize back to input
//! resolution happen outside the graph; `ForwardPass::backward` chains their
//! adjoints (a sign flip and the resize transpose) in front of the graph
//! backward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gridcore::{
    resize_bilinear, resize_bilinear_adjoint, Bindings, DiffGraph, Gradients, GraphBuilder, Grid,
    NodeId,
};

/// Encoder stage output widths at strides 4, 8, 16.
const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];
const SE_REDUCTION: usize = 4;
/// Input sides must divide by this: two stem halvings and three stage strides.
pub const SIDE_MULTIPLE: usize = 16;

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: (usize, usize, usize),
    /// 0 marks a bias: initialized to zero instead of a fan-in-scaled draw.
    fan_in: usize,
}

fn se_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let red = (channels / SE_REDUCTION).max(1);
    vec![
        ParamSpec {
            name: format!("{prefix}.fc1.w"),
            shape: (red, channels, 1),
            fan_in: channels,
        },
        ParamSpec {
            name: format!("{prefix}.fc1.b"),
            shape: (red, 1, 1),
            fan_in: 0,
        },
        ParamSpec {
            name: format!("{prefix}.fc2.w"),
            shape: (channels, red, 1),
            fan_in: red,
        },
        ParamSpec {
            name: format!("{prefix}.fc2.b"),
            shape: (channels, 1, 1),
            fan_in: 0,
        },
    ]
}

fn param_specs() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut in_c = 3;
    for (i, &out_c) in STAGE_WIDTHS.iter().enumerate() {
        let s = i + 1;
        specs.push(ParamSpec {
            name: format!("enc.s{s}.c1.w"),
            shape: (out_c * in_c, 4, 4),
            fan_in: in_c * 16,
        });
        specs.push(ParamSpec {
            name: format!("enc.s{s}.c1.b"),
            shape: (out_c, 1, 1),
            fan_in: 0,
        });
        specs.push(ParamSpec {
            name: format!("enc.s{s}.c2.w"),
            shape: (out_c * out_c, 3, 3),
            fan_in: out_c * 9,
        });
        specs.push(ParamSpec {
            name: format!("enc.s{s}.c2.b"),
            shape: (out_c, 1, 1),
            fan_in: 0,
        });
        in_c = out_c;
    }
    for (prefix, c) in [("se.e3", 16), ("se.e4", 32), ("se.e5", 64)] {
        specs.extend(se_specs(prefix, c));
    }
    specs.extend(se_specs("se.fuse", STAGE_WIDTHS.iter().sum()));
    specs
}

/// The full trainable state: 28 named grids in a fixed order plus the
/// optimizer step count.
#[derive(Debug, Clone)]
pub struct ModelParams {
    params: Vec<(String, Grid)>,
    step: u64,
}

impl ModelParams {
    /// Fresh parameters: weights uniform in ±1/sqrt(fan-in), biases zero.
    /// Draw order is the canonical parameter order, so one seeded generator
    /// reproduces the same model bitwise.
    pub fn init(rng: &mut impl Rng) -> ModelParams {
        let params = param_specs()
            .into_iter()
            .map(|s| {
                let (c, h, w) = s.shape;
                let grid = if s.fan_in == 0 {
                    Grid::zeros(c, h, w)
                } else {
                    let bound = 1.0 / (s.fan_in as f64).sqrt();
                    let data = (0..c * h * w).map(|_| rng.gen_range(-bound..bound)).collect();
                    Grid::new(c, h, w, data).expect("init draws are finite")
                };
                (s.name, grid)
            })
            .collect();
        ModelParams { params, step: 0 }
    }

    /// Rebuilds params from named grids, e.g. a decoded checkpoint. The
    /// grids must match the canonical set exactly: same names, same order,
    /// same shapes.
    pub fn from_parts(params: Vec<(String, Grid)>, step: u64) -> Result<ModelParams> {
        let specs = param_specs();
        if params.len() != specs.len() {
            return Err(Error::param(
                "params",
                format!("expected {} grids, got {}", specs.len(), params.len()),
            ));
        }
        for ((name, grid), spec) in params.iter().zip(&specs) {
            if name != &spec.name {
                return Err(Error::param(
                    "params",
                    format!("expected \"{}\" in canonical order, got \"{name}\"", spec.name),
                ));
            }
            if grid.shape() != spec.shape {
                return Err(Error::shape(
                    format!("param {name}"),
                    format!("{}x{}x{}", spec.shape.0, spec.shape.1, spec.shape.2),
                    grid.shape_str(),
                ));
            }
        }
        Ok(ModelParams { params, step })
    }

    /// Canonical parameter names, in checkpoint order.
    pub fn names() -> Vec<String> {
        param_specs().into_iter().map(|s| s.name).collect()
    }

    pub fn grids(&self) -> &[(String, Grid)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// In-place `p += scale * g` on one named parameter.
    pub fn add_scaled(&mut self, name: &str, g: &Grid, scale: f64) -> Result<()> {
        let (_, p) = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::param("name", format!("unknown parameter \"{name}\"")))?;
        if !p.same_shape(g) {
            return Err(Error::shape(format!("update of {name}"), p.shape_str(), g.shape_str()));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv += scale * gv;
        }
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Leaf bindings for every parameter; graph inputs are added by the
    /// caller.
    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        for (name, grid) in &self.params {
            b.insert(name.clone(), grid.clone());
        }
        b
    }
}

/// One squeeze-excitation gate: pool, bottleneck, and channelwise rescale.
#[derive(Debug, Clone)]
pub struct SeBlockSpec {
    pub channels: usize,
    pub reduction: usize,
    pub fc1_w: Grid,
    pub fc1_b: Grid,
    pub fc2_w: Grid,
    pub fc2_b: Grid,
}

impl SeBlockSpec {
    pub fn new(
        channels: usize,
        reduction: usize,
        fc1_w: Grid,
        fc1_b: Grid,
        fc2_w: Grid,
        fc2_b: Grid,
    ) -> Result<SeBlockSpec> {
        if reduction == 0 || channels == 0 {
            return Err(Error::param("reduction", "channels and reduction must be positive"));
        }
        let red = (channels / reduction).max(1);
        for (what, grid, shape) in [
            ("fc1 weight", &fc1_w, (red, channels, 1)),
            ("fc1 bias", &fc1_b, (red, 1, 1)),
            ("fc2 weight", &fc2_w, (channels, red, 1)),
            ("fc2 bias", &fc2_b, (channels, 1, 1)),
        ] {
            if grid.shape() != shape {
                return Err(Error::shape(
                    format!("se {what}"),
                    format!("{}x{}x{}", shape.0, shape.1, shape.2),
                    grid.shape_str(),
                ));
            }
        }
        Ok(SeBlockSpec {
            channels,
            reduction,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }
}

/// Applies one squeeze-excitation gate to a feature grid.
pub fn se_block(features: &Grid, spec: &SeBlockSpec) -> Result<Grid> {
    if features.channels() != spec.channels {
        return Err(Error::shape(
            "se_block",
            format!("{} channels", spec.channels),
            features.shape_str(),
        ));
    }
    let mut b = GraphBuilder::new();
    let f = b.leaf("f");
    let out = build_se(&mut b, f, "se", features.height(), features.width());
    let mut graph = b.finish(out);
    let mut bindings = Bindings::new();
    bindings.insert("f", features.clone());
    bindings.insert("se.fc1.w", spec.fc1_w.clone());
    bindings.insert("se.fc1.b", spec.fc1_b.clone());
    bindings.insert("se.fc2.w", spec.fc2_w.clone());
    bindings.insert("se.fc2.b", spec.fc2_b.clone());
    graph.forward(&bindings)
}

/// SE subgraph: gate computed at 1x1, broadcast back over space by resize
/// (bilinear resize of a 1x1 plane replicates the constant exactly).
fn build_se(b: &mut GraphBuilder, f: NodeId, prefix: &str, h: usize, w: usize) -> NodeId {
    let pooled = b.global_avg_pool(f);
    let w1 = b.leaf(format!("{prefix}.fc1.w"));
    let b1 = b.leaf(format!("{prefix}.fc1.b"));
    let z1 = b.fully_connected(pooled, w1, b1);
    let a1 = b.relu(z1);
    let w2 = b.leaf(format!("{prefix}.fc2.w"));
    let b2 = b.leaf(format!("{prefix}.fc2.b"));
    let z2 = b.fully_connected(a1, w2, b2);
    let gate = b.sigmoid(z2);
    let spread = b.resize_bilinear(gate, h, w);
    b.mul(f, spread)
}

/// Encoder: a parameter-free 2x downsample, then three stages of
/// (stride-2 4x4 conv, stride-1 3x3 conv), relu after each conv. Feature
/// taps land at strides 4, 8, 16.
fn build_encoder(b: &mut GraphBuilder, x: NodeId, h: usize, w: usize) -> [NodeId; 3] {
    let mut cur = b.resize_bilinear(x, h / 2, w / 2);
    let mut taps = [0; 3];
    for (i, tap) in taps.iter_mut().enumerate() {
        let s = i + 1;
        let w1 = b.leaf(format!("enc.s{s}.c1.w"));
        let b1 = b.leaf(format!("enc.s{s}.c1.b"));
        let c1 = b.conv2d(cur, w1, b1, 2, 1);
        let a1 = b.relu(c1);
        let w2 = b.leaf(format!("enc.s{s}.c2.w"));
        let b2 = b.leaf(format!("enc.s{s}.c2.b"));
        let c2 = b.conv2d(a1, w2, b2, 1, 1);
        cur = b.relu(c2);
        *tap = cur;
    }
    taps
}

/// Head: per-stage SE, merge everything at stride 4, fusion SE, then center
/// the fused features by their per-channel spatial mean, collapse channels,
/// and squash. Returns the sigmoid terminal, the pre-sigmoid plane, and the
/// fused features.
fn build_head(
    b: &mut GraphBuilder,
    e3: NodeId,
    e4: NodeId,
    e5: NodeId,
    h4: usize,
    w4: usize,
) -> (NodeId, NodeId, NodeId) {
    let f3 = build_se(b, e3, "se.e3", h4, w4);
    let f4 = build_se(b, e4, "se.e4", h4 / 2, w4 / 2);
    let f5 = build_se(b, e5, "se.e5", h4 / 4, w4 / 4);
    let f4r = b.resize_bilinear(f4, h4, w4);
    let f5r = b.resize_bilinear(f5, h4, w4);
    let cat = b.concat(&[f3, f4r, f5r]);
    let fused = build_se(b, cat, "se.fuse", h4, w4);
    let mean = b.spatial_mean(fused);
    let centered = b.spatial_sub_broadcast(fused, mean);
    let plane = b.channel_sum(centered);
    let y = b.sigmoid(plane);
    (y, plane, fused)
}

fn check_input(x: &Grid) -> Result<()> {
    if x.channels() != 3 {
        return Err(Error::shape("model input", "3 channels", x.shape_str()));
    }
    if x.height() % SIDE_MULTIPLE != 0 || x.width() % SIDE_MULTIPLE != 0 {
        return Err(Error::shape(
            "model input",
            format!("height and width divisible by {SIDE_MULTIPLE}"),
            x.shape_str(),
        ));
    }
    Ok(())
}

/// Mean of the map over its four corner patches, each
/// `max(1, H/8) x max(1, W/8)`.
pub fn corner_mean(y: &Grid) -> Result<f64> {
    if y.channels() != 1 {
        return Err(Error::shape("corner_mean", "single channel", y.shape_str()));
    }
    let (h, w) = (y.height(), y.width());
    let ph = (h / 8).max(1);
    let pw = (w / 8).max(1);
    let mut sum = 0.0;
    for (y0, x0) in [(0, 0), (0, w - pw), (h - ph, 0), (h - ph, w - pw)] {
        for yy in y0..y0 + ph {
            for xx in x0..x0 + pw {
                sum += y.at(0, yy, xx);
            }
        }
    }
    Ok(sum / (4 * ph * pw) as f64)
}

/// Flips a map to `1 - y` when its corner mean is strictly above 0.5;
/// maps whose corners already read as background pass through unchanged.
pub fn corner_inversion(y: &Grid) -> Result<Grid> {
    if corner_mean(y)? > 0.5 {
        y.map(|v| 1.0 - v)
    } else {
        Ok(y.clone())
    }
}

/// Standardizes an image to zero mean and unit-ish variance over all its
/// values. Kills the shared brightness component that zero-padded convs
/// would otherwise turn into a content-free spatial pattern; the floor on
/// the variance keeps near-constant inputs from exploding.
fn standardize(x: &Grid) -> Grid {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-4).sqrt();
    x.map(|v| (v - mean) * inv).expect("standardized values are finite")
}

fn run_raw(params: &ModelParams, x: &Grid) -> Result<(DiffGraph, Grid)> {
    check_input(x)?;
    let (h, w) = (x.height(), x.width());
    let mut b = GraphBuilder::new();
    let xn = b.leaf("x");
    let [e3, e4, e5] = build_encoder(&mut b, xn, h, w);
    let (y, _, _) = build_head(&mut b, e3, e4, e5, h / 4, w / 4);
    let mut graph = b.finish(y);
    let mut bindings = params.bindings();
    bindings.insert("x", standardize(x));
    let raw = graph.forward(&bindings)?;
    Ok((graph, raw))
}

/// One recorded forward: the stride-4 saliency plane after inversion, the
/// full-resolution map, and everything needed to run the exact backward.
pub struct ForwardPass {
    model: DiffGraph,
    stride4: Grid,
    flipped: bool,
    output: Grid,
}

impl ForwardPass {
    /// Saliency at input resolution, values in [0, 1].
    pub fn output(&self) -> &Grid {
        &self.output
    }

    /// Post-inversion saliency at stride 4.
    pub fn stride4(&self) -> &Grid {
        &self.stride4
    }

    /// Whether corner inversion fired on this pass.
    pub fn flipped(&self) -> bool {
        self.flipped
    }

    /// Parameter gradients for a loss gradient taken at the full-resolution
    /// output. The resize transpose and the inversion sign are applied, then
    /// the recorded graph runs in reverse. One backward per forward.
    pub fn backward(&mut self, d_output: &Grid) -> Result<Gradients> {
        if !d_output.same_shape(&self.output) {
            return Err(Error::shape(
                "backward seed",
                self.output.shape_str(),
                d_output.shape_str(),
            ));
        }
        let mut d4 = resize_bilinear_adjoint(d_output, self.stride4.height(), self.stride4.width());
        if self.flipped {
            d4 = d4.map(|v| -v)?;
        }
        self.model.backward(&d4)
    }
}

/// Full model forward on a 3-channel input whose sides divide by 16.
pub fn forward_pass(params: &ModelParams, x: &Grid) -> Result<ForwardPass> {
    let (model, raw) = run_raw(params, x)?;
    let flipped = corner_mean(&raw)? > 0.5;
    let stride4 = if flipped { raw.map(|v| 1.0 - v)? } else { raw };
    let output = resize_bilinear(&stride4, x.height(), x.width())?;
    Ok(ForwardPass {
        model,
        stride4,
        flipped,
        output,
    })
}

/// Encoder features at strides 4, 8, 16 with widths 16, 32, 64.
pub fn encoder_forward(params: &ModelParams, x: &Grid) -> Result<(Grid, Grid, Grid)> {
    check_input(x)?;
    let (h, w) = (x.height(), x.width());
    let mut b = GraphBuilder::new();
    let xn = b.leaf("x");
    let [e3, e4, e5] = build_encoder(&mut b, xn, h, w);
    let mut graph = b.finish(e5);
    let mut bindings = params.bindings();
    bindings.insert("x", standardize(x));
    let out5 = graph.forward(&bindings)?;
    let out3 = graph.node_output(e3)?.clone();
    let out4 = graph.node_output(e4)?.clone();
    Ok((out3, out4, out5))
}

/// Head alone: fuses one encoder's features into a saliency map at input
/// resolution (4x the stride-4 grid), inversion included.
pub fn activation_head(params: &ModelParams, e3: &Grid, e4: &Grid, e5: &Grid) -> Result<Grid> {
    let (h4, w4) = (e3.height(), e3.width());
    let stage_ok = e3.channels() == 16
        && e4.shape() == (32, h4 / 2, w4 / 2)
        && e5.shape() == (64, h4 / 4, w4 / 4)
        && h4 % 4 == 0
        && w4 % 4 == 0;
    if !stage_ok {
        return Err(Error::shape(
            "activation_head",
            format!("stages 16x{h4}x{w4}, 32x{}x{}, 64x{}x{}", h4 / 2, w4 / 2, h4 / 4, w4 / 4),
            format!("{}, {}, {}", e3.shape_str(), e4.shape_str(), e5.shape_str()),
        ));
    }
    let mut b = GraphBuilder::new();
    let n3 = b.leaf("e3");
    let n4 = b.leaf("e4");
    let n5 = b.leaf("e5");
    let (y, _, _) = build_head(&mut b, n3, n4, n5, h4, w4);
    let mut graph = b.finish(y);
    let mut bindings = params.bindings();
    bindings.insert("e3", e3.clone());
    bindings.insert("e4", e4.clone());
    bindings.insert("e5", e5.clone());
    let raw = graph.forward(&bindings)?;
    let inverted = corner_inversion(&raw)?;
    resize_bilinear(&inverted, h4 * 4, w4 * 4)
}
