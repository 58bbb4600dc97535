use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Samples per parallel work unit. Fixed so gradient sums do not depend on
/// the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Stride-1 convolution with same padding (extra row/column at the
    /// bottom/right for even kernels).
    Conv { filters: usize, kernel: usize, relu: bool },
    MaxPool { size: usize, stride: usize },
    /// `fixed` widths are not divided by the scale factor.
    Dense {
        units: usize,
        relu: bool,
        #[serde(default)]
        fixed: bool,
    },
    Flatten,
    /// Concatenate flat outputs of the listed layers.
    Concat { inputs: Vec<usize> },
    /// Inverted dropout.
    Dropout { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Source layer; `None` means the previous layer (or the network input).
    #[serde(default)]
    pub input: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            input: None,
        }
    }

    pub fn from(mut self, layer: usize) -> Self {
        self.input = Some(layer);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Map { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }
}

impl std::fmt::Display for Shape {
    /// `H×W×C` for maps, plain length for vectors.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Map { c, h, w } => write!(f, "{h}x{w}x{c}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Divides every non-fixed channel and unit count.
    pub scale_factor: usize,
}

fn conv(name: &str, filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Conv { filters, kernel, relu: true })
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { size: 2, stride: 2 })
}

fn drop(name: &str, rate: f64) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dropout { rate })
}

fn dense(name: &str, units: usize, relu: bool, fixed: bool) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dense { units, relu, fixed })
}

impl NetworkSpec {
    /// Landmark regressor: 96×96 input and 110 outputs at full scale.
    pub fn landmark(scale_factor: usize, input_size: usize) -> Self {
        Self::table1("landmark", scale_factor, input_size, 110)
    }

    /// The landmark architecture with a two-way left/right output.
    pub fn side_classifier(scale_factor: usize, input_size: usize) -> Self {
        Self::table1("side", scale_factor, input_size, 2)
    }

    fn table1(name: &str, scale_factor: usize, input_size: usize, outputs: usize) -> Self {
        NetworkSpec {
            name: name.to_string(),
            input: [1, input_size, input_size],
            scale_factor,
            layers: vec![
                conv("conv1", 32, 3),
                pool("pool2"),
                drop("drop2", 0.1),
                conv("conv3", 64, 2),
                pool("pool4"),
                drop("drop4", 0.2),
                conv("conv5", 128, 2),
                pool("pool6"),
                drop("drop6", 0.3),
                LayerSpec::new("flatten", LayerKind::Flatten),
                dense("fc7", 1000, true, false),
                drop("drop7", 0.5),
                dense("fc8", 1000, true, false),
                dense("fc9", outputs, false, true),
            ],
        }
    }

    /// Descriptor network: 128×128 input and a 512-wide output at full scale.
    pub fn descriptor(scale_factor: usize, input_size: usize) -> Self {
        let mut layers = vec![
            conv("conv1", 128, 3),
            conv("conv2", 128, 3),
            pool("pool3"),
            drop("drop3", 0.1),
            conv("conv4", 128, 3),
            pool("pool5"),
            drop("drop5", 0.2),
            conv("conv6", 256, 3),
            pool("pool7"),
            drop("drop7", 0.3),
            conv("conv8", 256, 3),
            pool("pool9"),
            conv("conv10", 256, 3),
        ];
        let pool9 = layers.len() - 2;
        let conv10 = layers.len() - 1;
        layers.push(LayerSpec::new("flatten9", LayerKind::Flatten).from(pool9));
        layers.push(LayerSpec::new("flatten10", LayerKind::Flatten).from(conv10));
        layers.push(LayerSpec::new(
            "concat",
            LayerKind::Concat {
                inputs: vec![conv10 + 1, conv10 + 2],
            },
        ));
        layers.push(dense("fc11", 512, false, false));
        NetworkSpec {
            name: "descriptor".into(),
            input: [1, input_size, input_size],
            scale_factor,
            layers,
        }
    }

    /// Copy with an extra classification layer on top (descriptor training).
    pub fn with_head(&self, classes: usize) -> Self {
        let mut s = self.clone();
        s.layers.push(dense("head", classes, false, true));
        s
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    fn width(&self, units: usize, fixed: bool) -> usize {
        if fixed {
            units
        } else {
            (units / self.scale_factor.max(1)).max(1)
        }
    }

    fn source(&self, i: usize) -> Option<usize> {
        self.layers[i].input.or(if i == 0 { None } else { Some(i - 1) })
    }

    /// Output shape of every layer, checking the chain end to end.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.scale_factor == 0 {
            return Err(Error::ShapeMismatch("scale_factor must be at least 1".into()));
        }
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("empty network input".into()));
        }
        let input = Shape::Map { c, h, w };
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let src = match self.source(i) {
                Some(j) if j >= i => {
                    return Err(Error::ShapeMismatch(format!("layer `{}` reads a later layer", layer.name)))
                }
                Some(j) => shapes[j],
                None => input,
            };
            let bad = |what: &str| Error::ShapeMismatch(format!("layer `{}`: {what}, got {src}", layer.name));
            let out = match &layer.kind {
                LayerKind::Conv { filters, kernel, .. } => match src {
                    Shape::Map { h, w, .. } if *kernel >= 1 => Shape::Map {
                        c: self.width(*filters, false),
                        h,
                        w,
                    },
                    _ => return Err(bad("convolution needs a feature map and a positive kernel")),
                },
                LayerKind::MaxPool { size, stride } => match src {
                    Shape::Map { c, h, w } if *size >= 1 && *stride >= 1 && h >= *size && w >= *size => Shape::Map {
                        c,
                        h: (h - size) / stride + 1,
                        w: (w - size) / stride + 1,
                    },
                    _ => return Err(bad("pooling window does not fit")),
                },
                LayerKind::Dense { units, fixed, .. } => match src {
                    Shape::Flat(_) => Shape::Flat(self.width(*units, *fixed)),
                    _ => return Err(bad("dense layer needs a flat input")),
                },
                LayerKind::Flatten => Shape::Flat(src.len()),
                LayerKind::Concat { inputs } => {
                    let mut n = 0;
                    for &j in inputs {
                        match shapes.get(j) {
                            Some(Shape::Flat(k)) if j < i => n += k,
                            _ => return Err(bad("concat inputs must be earlier flat layers")),
                        }
                    }
                    if inputs.is_empty() {
                        return Err(bad("concat needs inputs"));
                    }
                    Shape::Flat(n)
                }
                LayerKind::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(bad("dropout rate must lie in [0, 1)"));
                    }
                    src
                }
            };
            shapes.push(out);
        }
        if shapes.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        Ok(shapes)
    }

    pub fn output_width(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(Shape::len).unwrap_or(0))
    }

    /// `(name, output shape)` rows.
    pub fn shape_table(&self) -> Result<Vec<(String, String)>> {
        Ok(self
            .layers
            .iter()
            .zip(self.shapes()?)
            .map(|(l, s)| (l.name.clone(), s.to_string()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations and per-layer caches of one forward pass.
pub struct Trace<T> {
    pub acts: Vec<Tensor<T>>,
    pool_argmax: Vec<Vec<u32>>,
    masks: Vec<Vec<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("non-empty network")
    }
}

/// Network parameters plus the spec they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    /// Weight and bias tensors of parametric layers, in layer order.
    params: Vec<Tensor<T>>,
    /// Layer → index of its weight in `params` (bias follows).
    slots: Vec<Option<usize>>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Network<T> {
    /// He-initialized weights for ReLU layers, Glorot-style for linear ones,
    /// zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in net.spec.layers.iter().enumerate() {
            let Some(slot) = net.slots[i] else { continue };
            let (fan_in, relu) = match (&layer.kind, net.input_shape(i)) {
                (LayerKind::Conv { kernel, relu, .. }, Shape::Map { c, .. }) => (c * kernel * kernel, *relu),
                (LayerKind::Dense { relu, .. }, s) => (s.len(), *relu),
                _ => unreachable!("parametric layers are conv or dense"),
            };
            let gain = if relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for v in net.params[slot].data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut params = Vec::new();
        let mut slots = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let src = match spec.source(i) {
                Some(j) => shapes[j],
                None => Shape::Map {
                    c: spec.input[0],
                    h: spec.input[1],
                    w: spec.input[2],
                },
            };
            match (&layer.kind, shapes[i], src) {
                (LayerKind::Conv { kernel, .. }, Shape::Map { c: out_c, .. }, Shape::Map { c: in_c, .. }) => {
                    slots.push(Some(params.len()));
                    params.push(Tensor::zeros(vec![out_c, in_c, *kernel, *kernel]));
                    params.push(Tensor::zeros(vec![out_c]));
                }
                (LayerKind::Dense { .. }, Shape::Flat(out), s) => {
                    slots.push(Some(params.len()));
                    params.push(Tensor::zeros(vec![out, s.len()]));
                    params.push(Tensor::zeros(vec![out]));
                }
                _ => slots.push(None),
            }
        }
        Ok(Network {
            spec,
            shapes,
            params,
            slots,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// `(name, tensor)` pairs for serialization.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(s) = slot {
                let name = &self.spec.layers[i].name;
                out.push((format!("{name}.weight"), &self.params[*s]));
                out.push((format!("{name}.bias"), &self.params[s + 1]));
            }
        }
        out
    }

    /// Replace parameters by name; every tensor must be present with the right shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != self.params[k].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params[k].shape()
                )));
            }
            self.params[k] = t.clone();
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.shapes.last().map(Shape::len).unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.iter().product()
    }

    fn input_shape(&self, i: usize) -> Shape {
        match self.spec.source(i) {
            Some(j) => self.shapes[j],
            None => Shape::Map {
                c: self.spec.input[0],
                h: self.spec.input[1],
                w: self.spec.input[2],
            },
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let b = x.batch();
        let mut want = vec![b];
        want.extend_from_slice(&self.spec.input);
        if x.shape() != want.as_slice() || b == 0 {
            return Err(Error::ShapeMismatch(format!(
                "network `{}` expects input [batch, {}, {}, {}], got {:?}",
                self.spec.name,
                self.spec.input[0],
                self.spec.input[1],
                self.spec.input[2],
                x.shape()
            )));
        }
        Ok(b)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let mut trace = self.trace(x, mode, seed)?;
        Ok(trace.acts.pop().expect("non-empty network"))
    }

    /// Forward pass keeping every activation. Dropout masks derive from
    /// `seed`, the layer and the sample index.
    pub fn trace(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Trace<T>> {
        let b = self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut pool_argmax = vec![Vec::new(); n];
        let mut masks = vec![Vec::new(); n];
        for i in 0..n {
            let src = match self.spec.source(i) {
                Some(j) => &acts[j],
                None => x,
            };
            let in_shape = self.input_shape(i);
            let out_shape = self.shapes[i];
            let mut dims = vec![b];
            dims.extend(out_shape.dims());
            let out = match &self.spec.layers[i].kind {
                LayerKind::Conv { kernel, relu, .. } => {
                    let slot = self.slots[i].expect("conv has params");
                    let mut y = Tensor::zeros(dims);
                    conv_forward(src, &self.params[slot], &self.params[slot + 1], in_shape, *kernel, *relu, &mut y);
                    y
                }
                LayerKind::MaxPool { size, stride } => {
                    let (y, arg) = pool_forward(src, in_shape, out_shape, *size, *stride);
                    pool_argmax[i] = arg;
                    Tensor::new(dims, y)?
                }
                LayerKind::Dense { relu, .. } => {
                    let slot = self.slots[i].expect("dense has params");
                    let (w, bias) = (&self.params[slot], &self.params[slot + 1]);
                    let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
                    let mut y = vec![T::zero(); b * out_n];
                    for row in y.chunks_exact_mut(out_n) {
                        row.copy_from_slice(bias.data());
                    }
                    T::gemm(b, in_n, out_n, T::one(), src.data(), false, w.data(), true, T::one(), &mut y);
                    if *relu {
                        y.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    }
                    Tensor::new(dims, y)?
                }
                LayerKind::Flatten => Tensor::new(dims, src.data().to_vec())?,
                LayerKind::Concat { inputs } => {
                    let mut y = Vec::with_capacity(b * out_shape.len());
                    for s in 0..b {
                        for &j in inputs {
                            y.extend_from_slice(acts[j].sample(s));
                        }
                    }
                    Tensor::new(dims, y)?
                }
                LayerKind::Dropout { rate } => {
                    if mode == Mode::Eval || *rate == 0.0 {
                        Tensor::new(dims, src.data().to_vec())?
                    } else {
                        let keep = 1.0 - rate;
                        let scale = T::of(1.0 / keep);
                        let len = in_shape.len();
                        let mut mask = vec![T::zero(); b * len];
                        for (s, m) in mask.chunks_exact_mut(len).enumerate() {
                            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64, s as u64));
                            for v in m.iter_mut() {
                                if rng.gen::<f64>() < keep {
                                    *v = scale;
                                }
                            }
                        }
                        let y = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                        masks[i] = mask;
                        Tensor::new(dims, y)?
                    }
                }
            };
            acts.push(out);
        }
        Ok(Trace {
            acts,
            pool_argmax,
            masks,
        })
    }

    /// Back-propagate gradients injected at any layers' outputs. Returns the
    /// parameter gradients (aligned with `params`) and the input gradient.
    pub fn backward(&self, x: &Tensor<T>, trace: &Trace<T>, seeds: Vec<(usize, Tensor<T>)>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let b = self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (layer, g) in seeds {
            if layer >= n || g.shape() != trace.acts[layer].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for layer {layer} has shape {:?}",
                    g.shape()
                )));
            }
            accumulate(&mut grads[layer], g);
        }
        let mut pgrads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let mut input_grad: Option<Tensor<T>> = None;
        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let src_idx = self.spec.source(i);
            let src = match src_idx {
                Some(j) => &trace.acts[j],
                None => x,
            };
            let in_shape = self.input_shape(i);
            let mut in_dims = vec![b];
            in_dims.extend(in_shape.dims());
            let y = &trace.acts[i];
            let gx: Option<Tensor<T>> = match &self.spec.layers[i].kind {
                LayerKind::Conv { kernel, relu, .. } => {
                    let slot = self.slots[i].expect("conv has params");
                    let mut gy = gy;
                    if *relu {
                        relu_mask(gy.data_mut(), y.data());
                    }
                    let (gw, gb, gx) = conv_backward(src, &self.params[slot], &gy, in_shape, *kernel);
                    add_into(&mut pgrads[slot], &gw);
                    add_into(&mut pgrads[slot + 1], &gb);
                    Some(Tensor::new(in_dims, gx)?)
                }
                LayerKind::MaxPool { .. } => {
                    let mut gx = vec![T::zero(); b * in_shape.len()];
                    let out_len = self.shapes[i].len();
                    let in_len = in_shape.len();
                    for s in 0..b {
                        let arg = &trace.pool_argmax[i][s * out_len..(s + 1) * out_len];
                        let g = gy.sample(s);
                        let dst = &mut gx[s * in_len..(s + 1) * in_len];
                        for (k, &a) in arg.iter().enumerate() {
                            dst[a as usize] = dst[a as usize] + g[k];
                        }
                    }
                    Some(Tensor::new(in_dims, gx)?)
                }
                LayerKind::Dense { relu, .. } => {
                    let slot = self.slots[i].expect("dense has params");
                    let w = &self.params[slot];
                    let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
                    let mut gy = gy;
                    if *relu {
                        relu_mask(gy.data_mut(), y.data());
                    }
                    let gyd = gy.data();
                    T::gemm(out_n, b, in_n, T::one(), gyd, true, src.data(), false, T::one(), pgrads[slot].data_mut());
                    let gb = pgrads[slot + 1].data_mut();
                    for row in gyd.chunks_exact(out_n) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    let mut gx = vec![T::zero(); b * in_n];
                    T::gemm(b, out_n, in_n, T::one(), gyd, false, w.data(), false, T::zero(), &mut gx);
                    Some(Tensor::new(in_dims, gx)?)
                }
                LayerKind::Flatten => Some(Tensor::new(in_dims, gy.into_data())?),
                LayerKind::Concat { inputs } => {
                    let mut offset = 0;
                    let total = self.shapes[i].len();
                    for &j in inputs {
                        let len = self.shapes[j].len();
                        let mut part = Vec::with_capacity(b * len);
                        for s in 0..b {
                            part.extend_from_slice(&gy.data()[s * total + offset..s * total + offset + len]);
                        }
                        offset += len;
                        let mut dims = vec![b];
                        dims.extend(self.shapes[j].dims());
                        accumulate(&mut grads[j], Tensor::new(dims, part)?);
                    }
                    None
                }
                LayerKind::Dropout { .. } => {
                    let mask = &trace.masks[i];
                    if mask.is_empty() {
                        Some(Tensor::new(in_dims, gy.into_data())?)
                    } else {
                        let g = gy.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                        Some(Tensor::new(in_dims, g)?)
                    }
                }
            };
            if let Some(gx) = gx {
                match src_idx {
                    Some(j) => accumulate(&mut grads[j], gx),
                    None => accumulate(&mut input_grad, gx),
                }
            }
        }
        let input_grad = input_grad.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((pgrads, input_grad))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + v;
    }
}

fn relu_mask<T: Scalar>(g: &mut [T], y: &[T]) {
    for (g, &y) in g.iter_mut().zip(y) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `cols[(ci·k + ky)·k + kx][y·w + x] = x[ci][y + ky - pad][x + kx - pad]`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xx, v) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + shift;
                        *v = if sx >= 0 && sx < w as isize { src[sx as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xx, &v) in src.iter().enumerate() {
                        let sx = xx as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, in_shape: Shape, k: usize, relu: bool, y: &mut Tensor<T>) {
    let Shape::Map { c, h, w: width } = in_shape else { unreachable!("checked by shape propagation") };
    let out_c = w.shape()[0];
    let hw = h * width;
    let ckk = c * k * k;
    let in_len = c * hw;
    y.data_mut()
        .par_chunks_mut(out_c * hw * CHUNK)
        .enumerate()
        .for_each(|(chunk, out)| {
            let mut cols = vec![T::zero(); ckk * hw];
            for (s, o) in out.chunks_exact_mut(out_c * hw).enumerate() {
                let idx = chunk * CHUNK + s;
                im2col(&x.data()[idx * in_len..(idx + 1) * in_len], c, h, width, k, &mut cols);
                for (oc, plane) in o.chunks_exact_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias.data()[oc]);
                }
                T::gemm(out_c, ckk, hw, T::one(), w.data(), false, &cols, false, T::one(), o);
                if relu {
                    o.iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
            }
        });
}

/// Gradients of weight, bias and input given the pre-activation gradient.
fn conv_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gy: &Tensor<T>, in_shape: Shape, k: usize) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let Shape::Map { c, h, w: width } = in_shape else { unreachable!("checked by shape propagation") };
    let out_c = w.shape()[0];
    let hw = h * width;
    let ckk = c * k * k;
    let in_len = c * hw;
    let b = x.batch();
    let mut gx = vec![T::zero(); b * in_len];
    let partials: Vec<(Vec<T>, Vec<T>)> = gx
        .par_chunks_mut(in_len * CHUNK)
        .enumerate()
        .map(|(chunk, gxc)| {
            let mut gw = vec![T::zero(); out_c * ckk];
            let mut gb = vec![T::zero(); out_c];
            let mut cols = vec![T::zero(); ckk * hw];
            let mut gcols = vec![T::zero(); ckk * hw];
            for (s, gxs) in gxc.chunks_exact_mut(in_len).enumerate() {
                let idx = chunk * CHUNK + s;
                let g = gy.sample(idx);
                im2col(&x.data()[idx * in_len..(idx + 1) * in_len], c, h, width, k, &mut cols);
                T::gemm(out_c, hw, ckk, T::one(), g, false, &cols, true, T::one(), &mut gw);
                for (oc, plane) in g.chunks_exact(hw).enumerate() {
                    gb[oc] = gb[oc] + plane.iter().copied().sum::<T>();
                }
                T::gemm(ckk, out_c, hw, T::one(), w.data(), true, g, false, T::zero(), &mut gcols);
                col2im(&gcols, c, h, width, k, gxs);
            }
            (gw, gb)
        })
        .collect();
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros(vec![out_c]);
    for (pw, pb) in partials {
        for (a, v) in gw.data_mut().iter_mut().zip(pw) {
            *a = *a + v;
        }
        for (a, v) in gb.data_mut().iter_mut().zip(pb) {
            *a = *a + v;
        }
    }
    (gw, gb, gx)
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, in_shape: Shape, out_shape: Shape, size: usize, stride: usize) -> (Vec<T>, Vec<u32>) {
    let (Shape::Map { c, h, w }, Shape::Map { h: oh, w: ow, .. }) = (in_shape, out_shape) else {
        unreachable!("checked by shape propagation")
    };
    let b = x.batch();
    let out_len = c * oh * ow;
    let mut y = vec![T::zero(); b * out_len];
    let mut arg = vec![0u32; b * out_len];
    for s in 0..b {
        let xs = x.sample(s);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = s * out_len + (ch * oh + oy) * ow + ox;
                    y[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (y, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Network::<f32>::zeros(NetworkSpec::landmark(8, 32)).unwrap();
        let x = Tensor::new(vec![2, 1, 32, 32], (0..2048).map(|i| (i % 7) as f32).collect()).unwrap();
        let y = net.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(y.shape(), &[2, 110]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::<f32>::zeros(NetworkSpec::landmark(8, 32)).unwrap();
        let x = Tensor::zeros(vec![1, 1, 30, 32]);
        assert!(matches!(net.forward(&x, Mode::Eval, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn same_padding_for_even_kernel() {
        // 2×2 kernel of ones sums the pixel, its right, lower and diagonal neighbours.
        let spec = NetworkSpec {
            name: "t".into(),
            input: [1, 3, 3],
            scale_factor: 1,
            layers: vec![LayerSpec::new("c", LayerKind::Conv { filters: 1, kernel: 2, relu: false })],
        };
        let mut net = Network::<f64>::zeros(spec).unwrap();
        net.params_mut()[0].data_mut().iter_mut().for_each(|v| *v = 1.0);
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = net.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(y.data(), &[12.0, 16.0, 9.0, 24.0, 28.0, 15.0, 15.0, 17.0, 9.0]);
    }

    #[test]
    fn serde_round_trip_of_spec() {
        let spec = NetworkSpec::descriptor(4, 32);
        let text = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
