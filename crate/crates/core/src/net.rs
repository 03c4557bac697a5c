//! The two segmentation architectures as declarative layer graphs, and whole-network
//! forward and backward passes over them.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, activation_backward, activation_forward, bilinear_upsample, bilinear_upsample_backward, concat_channels,
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, split_channels, tconv2_backward,
    tconv2_forward, ActCache, Activation, ConvCache, LayerKind, LayerParams, LayerSpec, PoolCache, TConvCache,
    UpsampleCache,
};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Number of encoder groups; the first `ENCODER_GROUPS - 1` end in a 2x2 max pool.
pub const ENCODER_GROUPS: usize = 5;
/// Total downsampling factor of the encoder.
pub const ENCODER_STRIDE: usize = 1 << (ENCODER_GROUPS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Encoder-decoder with transposed-convolution upsampling and skip concatenations.
    Flynet,
    /// The same encoder followed by a 1x1 convolution and one bilinear upsampling.
    Fcn,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flynet" => Ok(Arch::Flynet),
            "fcn" => Ok(Arch::Fcn),
            other => Err(Error::invalid(format!("unknown architecture '{other}' (expected flynet or fcn)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Flynet => "flynet",
            Arch::Fcn => "fcn",
        })
    }
}

/// Where a node reads one of its inputs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub layer: LayerSpec,
    pub inputs: Vec<Source>,
}

/// A network as an ordered list of nodes; every node only reads the network input or
/// earlier nodes, so list order is a valid evaluation order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub arch: Arch,
    pub input_size: usize,
    pub base_width: usize,
    pub nodes: Vec<Node>,
}

struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    fn push(&mut self, id: String, layer: LayerSpec, inputs: Vec<Source>) -> Source {
        self.nodes.push(Node { id, layer, inputs });
        Source::Node(self.nodes.len() - 1)
    }

    fn conv_relu(&mut self, prefix: &str, idx: usize, from: Source, cin: usize, cout: usize) -> Source {
        let c = self.push(format!("{prefix}.conv{idx}"), LayerSpec::new(LayerKind::Conv3x3, cin, cout), vec![from]);
        self.push(format!("{prefix}.relu{idx}"), LayerSpec::new(LayerKind::Relu, cout, cout), vec![c])
    }

    /// Five two-conv groups, pooling after the first four. Returns each group's output.
    fn encoder(&mut self, base: usize) -> Vec<(Source, usize)> {
        let mut skips = Vec::with_capacity(ENCODER_GROUPS);
        let (mut from, mut cin) = (Source::Input, 1);
        for g in 1..=ENCODER_GROUPS {
            let ch = base << (g - 1);
            let prefix = format!("enc{g}");
            let a = self.conv_relu(&prefix, 1, from, cin, ch);
            let b = self.conv_relu(&prefix, 2, a, ch, ch);
            skips.push((b, ch));
            from = if g < ENCODER_GROUPS {
                self.push(format!("{prefix}.pool"), LayerSpec::new(LayerKind::Maxpool2, ch, ch), vec![b])
            } else {
                b
            };
            cin = ch;
        }
        skips
    }
}

fn check_geometry(input_size: usize, base_width: usize) -> Result<()> {
    if input_size == 0 || input_size % ENCODER_STRIDE != 0 {
        return Err(Error::invalid(format!("input size {input_size} must be a positive multiple of {ENCODER_STRIDE}")));
    }
    if base_width == 0 {
        return Err(Error::invalid("base width must be at least 1"));
    }
    Ok(())
}

impl NetworkSpec {
    pub fn new(arch: Arch, input_size: usize, base_width: usize) -> Result<Self> {
        match arch {
            Arch::Flynet => Self::flynet(input_size, base_width),
            Arch::Fcn => Self::fcn(input_size, base_width),
        }
    }

    pub fn flynet(input_size: usize, base_width: usize) -> Result<Self> {
        check_geometry(input_size, base_width)?;
        let mut g = GraphBuilder { nodes: Vec::new() };
        let skips = g.encoder(base_width);
        let (mut from, mut cin) = skips[ENCODER_GROUPS - 1];
        for d in 1..ENCODER_GROUPS {
            let (skip, skip_ch) = skips[ENCODER_GROUPS - 1 - d];
            let prefix = format!("dec{d}");
            let up_ch = cin / 2;
            let up = g.push(format!("{prefix}.up"), LayerSpec::new(LayerKind::Tconv2, cin, up_ch), vec![from]);
            let cat = g.push(
                format!("{prefix}.concat"),
                LayerSpec::new(LayerKind::Concat, up_ch + skip_ch, up_ch + skip_ch),
                vec![up, skip],
            );
            let a = g.conv_relu(&prefix, 1, cat, up_ch + skip_ch, skip_ch);
            from = g.conv_relu(&prefix, 2, a, skip_ch, skip_ch);
            cin = skip_ch;
        }
        let head = g.push("head.conv".into(), LayerSpec::new(LayerKind::Conv1x1, cin, 1), vec![from]);
        g.push("head.sigmoid".into(), LayerSpec::new(LayerKind::Sigmoid, 1, 1), vec![head]);
        Ok(NetworkSpec { name: "flynet".into(), arch: Arch::Flynet, input_size, base_width, nodes: g.nodes })
    }

    pub fn fcn(input_size: usize, base_width: usize) -> Result<Self> {
        check_geometry(input_size, base_width)?;
        let mut g = GraphBuilder { nodes: Vec::new() };
        let skips = g.encoder(base_width);
        let (from, cin) = skips[ENCODER_GROUPS - 1];
        let head = g.push("head.conv".into(), LayerSpec::new(LayerKind::Conv1x1, cin, 1), vec![from]);
        let up = g.push("head.up".into(), LayerSpec::bilinear(1, ENCODER_STRIDE), vec![head]);
        g.push("head.sigmoid".into(), LayerSpec::new(LayerKind::Sigmoid, 1, 1), vec![up]);
        Ok(NetworkSpec { name: "fcn".into(), arch: Arch::Fcn, input_size, base_width, nodes: g.nodes })
    }

    /// Nodes that own weights, in evaluation order.
    pub fn param_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.layer.kind.has_params())
    }

    pub fn param_count(&self) -> usize {
        self.param_nodes().map(|n| n.layer.param_count()).sum()
    }

    pub fn node(&self, id: &str) -> Option<(usize, &Node)> {
        self.nodes.iter().enumerate().find(|(_, n)| n.id == id)
    }

    /// Spatial side of the deepest feature maps.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size / ENCODER_STRIDE
    }

    /// Draw fresh parameters for every parameterized node, in node order.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        let mut layers = BTreeMap::new();
        for node in self.param_nodes() {
            layers.insert(node.id.clone(), layers::init_params(&node.layer, rng)?);
        }
        Ok(ParamSet::from_map(layers))
    }

    pub fn zero_params<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet::from_map(
            self.param_nodes()
                .map(|n| (n.id.clone(), LayerParams::zeros(n.layer.weight_shape().expect("parameterized"))))
                .collect(),
        )
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Check that `params` covers exactly the parameterized nodes with matching shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let mut expected = 0;
        for node in self.param_nodes() {
            expected += 1;
            let p =
                params.get(&node.id).ok_or_else(|| Error::shape(format!("no parameters for layer '{}'", node.id)))?;
            p.check_shape(node.layer.weight_shape().expect("parameterized"), &node.id)?;
        }
        if params.len() != expected {
            return Err(Error::shape(format!(
                "parameter set has {} layers, network '{}' has {expected}",
                params.len(),
                self.name
            )));
        }
        Ok(())
    }
}

/// Learnable parameters keyed by layer id.
#[derive(Clone, Debug)]
pub struct ParamSet<T = f32> {
    layers: BTreeMap<String, LayerParams<T>>,
    // Bumped on every mutable access so forward caches can detect stale parameters.
    version: u64,
}

impl<T: Scalar> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn from_map(layers: BTreeMap<String, LayerParams<T>>) -> Self {
        ParamSet { layers, version: 0 }
    }

    pub fn get(&self, id: &str) -> Option<&LayerParams<T>> {
        self.layers.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut LayerParams<T>> {
        self.version += 1;
        self.layers.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LayerParams<T>)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut LayerParams<T>)> {
        self.version += 1;
        self.layers.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(LayerParams::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet::from_map(self.layers.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet::from_map(self.layers.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(LayerParams::is_finite)
    }

    /// True when both sets have the same keys and per-layer shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((ka, a), (kb, b))| {
                ka == kb && a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len()
            })
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    Conv(ConvCache<T>),
    Pool(PoolCache),
    TConv(TConvCache<T>),
    Act(ActCache<T>),
    Concat { first_channels: usize },
    Up(UpsampleCache),
}

/// Everything [`backward`] needs from the matching [`forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    spec_fingerprint: u64,
    params_version: u64,
    input_shape: Shape4,
    output_shape: Shape4,
    nodes: Vec<NodeCache<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// ReLU on/off pattern and pooling winners; a finite-difference probe is only
    /// valid while this pattern is unchanged.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                NodeCache::Act(c) if c.kind == Activation::Relu => {
                    out.extend(c.output.data().iter().map(|&v| (v > T::zero()) as u8));
                }
                NodeCache::Pool(c) => out.extend_from_slice(&c.argmax),
                _ => {}
            }
        }
        out
    }
}

fn fetch<'a, T>(input: &'a Tensor4<T>, values: &'a [Tensor4<T>], src: Source) -> &'a Tensor4<T> {
    match src {
        Source::Input => input,
        Source::Node(i) => &values[i],
    }
}

/// Run the network on a `n x 1 x S x S` batch; returns per-pixel heart probabilities.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    batch: &Tensor4<T>,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    let s = batch.shape();
    if s.c != 1 || s.h != spec.input_size || s.w != spec.input_size {
        return Err(Error::shape(format!(
            "network '{}' takes Nx1x{}x{} input, got {s}",
            spec.name, spec.input_size, spec.input_size
        )));
    }
    let mut values: Vec<Tensor4<T>> = Vec::with_capacity(spec.nodes.len());
    let mut caches = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let x = fetch(batch, &values, node.inputs[0]);
        let param = |id: &str| params.get(id).ok_or_else(|| Error::shape(format!("no parameters for layer '{id}'")));
        let (y, cache) = match node.layer.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let k = node.layer.kind.kernel_size().expect("conv");
                let (y, c) = conv2d_forward(x, param(&node.id)?, k)?;
                (y, NodeCache::Conv(c))
            }
            LayerKind::Tconv2 => {
                let (y, c) = tconv2_forward(x, param(&node.id)?)?;
                (y, NodeCache::TConv(c))
            }
            LayerKind::Maxpool2 => {
                let (y, c) = maxpool2_forward(x)?;
                (y, NodeCache::Pool(c))
            }
            LayerKind::Relu => {
                let (y, c) = activation_forward(x, Activation::Relu);
                (y, NodeCache::Act(c))
            }
            LayerKind::Sigmoid => {
                let (y, c) = activation_forward(x, Activation::Sigmoid);
                (y, NodeCache::Act(c))
            }
            LayerKind::Concat => {
                let b = fetch(batch, &values, node.inputs[1]);
                (concat_channels(x, b)?, NodeCache::Concat { first_channels: x.shape().c })
            }
            LayerKind::BilinearUp => {
                let f = node.layer.factor.unwrap_or(2);
                let (y, c) = bilinear_upsample(x, f)?;
                (y, NodeCache::Up(c))
            }
        };
        values.push(y);
        caches.push(cache);
    }
    let out = values.pop().ok_or_else(|| Error::invalid("network has no layers"))?;
    Ok((
        out.clone(),
        ForwardCache {
            spec_fingerprint: spec.fingerprint(),
            params_version: params.version(),
            input_shape: s,
            output_shape: out.shape(),
            nodes: caches,
        },
    ))
}

/// Gradients of the network output, plus the gradient with respect to the input batch.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamSet<T>,
    pub input: Tensor4<T>,
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse-mode pass: gradients of `sum(dprobs * probs)` with respect to every parameter.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    dprobs: &Tensor4<T>,
) -> Result<ParamSet<T>> {
    backward_with_input(spec, params, cache, dprobs).map(|g| g.params)
}

pub fn backward_with_input<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    dprobs: &Tensor4<T>,
) -> Result<Gradients<T>> {
    if cache.spec_fingerprint != spec.fingerprint() || cache.nodes.len() != spec.nodes.len() {
        return Err(Error::StaleCache(format!("cache was produced by a different network than '{}'", spec.name)));
    }
    if cache.params_version != params.version() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    if dprobs.shape() != cache.output_shape {
        return Err(Error::shape(format!(
            "output gradient is {}, network output was {}",
            dprobs.shape(),
            cache.output_shape
        )));
    }
    let mut grads = spec.zero_params::<T>();
    let mut node_grads: Vec<Option<Tensor4<T>>> = vec![None; spec.nodes.len()];
    let mut input_grad: Option<Tensor4<T>> = None;
    *node_grads.last_mut().expect("non-empty") = Some(dprobs.clone());

    for (i, node) in spec.nodes.iter().enumerate().rev() {
        let Some(dy) = node_grads[i].take() else {
            continue;
        };
        let mut dinputs: Vec<Tensor4<T>> = Vec::with_capacity(2);
        match &cache.nodes[i] {
            NodeCache::Conv(c) => {
                let p = params.get(&node.id).ok_or_else(|| Error::StaleCache(format!("missing '{}'", node.id)))?;
                let (dx, g) = conv2d_backward(c, p, &dy)?;
                *grads.layers.get_mut(&node.id).expect("zero params") = g;
                dinputs.push(dx);
            }
            NodeCache::TConv(c) => {
                let p = params.get(&node.id).ok_or_else(|| Error::StaleCache(format!("missing '{}'", node.id)))?;
                let (dx, g) = tconv2_backward(c, p, &dy)?;
                *grads.layers.get_mut(&node.id).expect("zero params") = g;
                dinputs.push(dx);
            }
            NodeCache::Pool(c) => dinputs.push(maxpool2_backward(c, &dy)?),
            NodeCache::Act(c) => dinputs.push(activation_backward(c, &dy)?),
            NodeCache::Up(c) => dinputs.push(bilinear_upsample_backward(c, &dy)?),
            NodeCache::Concat { first_channels } => {
                let (da, db) = split_channels(&dy, *first_channels)?;
                dinputs.push(da);
                dinputs.push(db);
            }
        }
        for (src, g) in node.inputs.iter().zip(dinputs) {
            match *src {
                Source::Input => accumulate(&mut input_grad, g)?,
                Source::Node(j) => accumulate(&mut node_grads[j], g)?,
            }
        }
    }
    Ok(Gradients { params: grads, input: input_grad.unwrap_or_else(|| Tensor4::zeros(cache.input_shape)) })
}

/// Spec plus freshly initialised parameters for the encoder-decoder network.
pub fn build_flynet<T: Scalar, R: Rng + ?Sized>(
    input_size: usize,
    base_width: usize,
    rng: &mut R,
) -> Result<(NetworkSpec, ParamSet<T>)> {
    let spec = NetworkSpec::flynet(input_size, base_width)?;
    let params = spec.init_params(rng)?;
    Ok((spec, params))
}

/// Spec plus freshly initialised parameters for the single-upsampling baseline.
pub fn build_fcn_baseline<T: Scalar, R: Rng + ?Sized>(
    input_size: usize,
    base_width: usize,
    rng: &mut R,
) -> Result<(NetworkSpec, ParamSet<T>)> {
    let spec = NetworkSpec::fcn(input_size, base_width)?;
    let params = spec.init_params(rng)?;
    Ok((spec, params))
}

pub fn build<T: Scalar, R: Rng + ?Sized>(
    arch: Arch,
    input_size: usize,
    base_width: usize,
    rng: &mut R,
) -> Result<(NetworkSpec, ParamSet<T>)> {
    match arch {
        Arch::Flynet => build_flynet(input_size, base_width, rng),
        Arch::Fcn => build_fcn_baseline(input_size, base_width, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Shapes of every node output, by walking the spec without running it.
    fn node_shapes(spec: &NetworkSpec, n: usize) -> Vec<Shape4> {
        let input = Tensor4::<f32>::zeros([n, 1, spec.input_size, spec.input_size]);
        let mut shapes = Vec::new();
        let mut values: Vec<Tensor4<f32>> = Vec::new();
        for node in &spec.nodes {
            let x = fetch(&input, &values, node.inputs[0]).shape();
            let y = match node.layer.kind {
                LayerKind::Maxpool2 => Shape4::new(x.n, x.c, x.h / 2, x.w / 2),
                LayerKind::Tconv2 => Shape4::new(x.n, node.layer.out_channels, x.h * 2, x.w * 2),
                LayerKind::BilinearUp => {
                    let f = node.layer.factor.unwrap();
                    Shape4::new(x.n, x.c, x.h * f, x.w * f)
                }
                LayerKind::Concat => {
                    let b = fetch(&input, &values, node.inputs[1]).shape();
                    Shape4::new(x.n, x.c + b.c, x.h, x.w)
                }
                _ => Shape4::new(x.n, node.layer.out_channels, x.h, x.w),
            };
            shapes.push(y);
            values.push(Tensor4::zeros(y));
        }
        shapes
    }

    #[test]
    fn flynet_128_has_8x8_bottleneck_and_full_resolution_output() {
        let spec = NetworkSpec::flynet(128, 2).unwrap();
        assert_eq!(spec.bottleneck_size(), 8);
        let shapes = node_shapes(&spec, 1);
        let (i, _) = spec.node("enc5.relu2").unwrap();
        assert_eq!((shapes[i].h, shapes[i].w), (8, 8));
        assert_eq!(*shapes.last().unwrap(), Shape4::new(1, 1, 128, 128));
        let (p, _) = forward(&spec, &spec.zero_params::<f32>(), &Tensor4::zeros([1, 1, 128, 128])).unwrap();
        assert_eq!(p.shape(), Shape4::new(1, 1, 128, 128));
    }

    #[test]
    fn encoder_channel_ladder_doubles() {
        let spec = NetworkSpec::flynet(128, 64).unwrap();
        let ladder: Vec<usize> =
            (1..=5).map(|g| spec.node(&format!("enc{g}.conv2")).unwrap().1.layer.out_channels).collect();
        assert_eq!(ladder, vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn decoder_concat_merges_mirror_encoder_group() {
        let spec = NetworkSpec::flynet(64, 4).unwrap();
        for d in 1..5 {
            let (_, cat) = spec.node(&format!("dec{d}.concat")).unwrap();
            let Source::Node(skip) = cat.inputs[1] else { panic!("skip from input") };
            assert_eq!(spec.nodes[skip].id, format!("enc{}.relu2", 5 - d));
            let (_, up) = spec.node(&format!("dec{d}.up")).unwrap();
            let (_, conv) = spec.node(&format!("dec{d}.conv1")).unwrap();
            let skip_ch = 4 << (4 - d);
            assert_eq!(up.layer.out_channels, up.layer.in_channels / 2);
            assert_eq!(conv.layer.in_channels, up.layer.out_channels + skip_ch);
        }
    }

    #[test]
    fn indivisible_sizes_rejected() {
        assert!(NetworkSpec::flynet(100, 8).is_err());
        assert!(NetworkSpec::fcn(0, 8).is_err());
        assert!(NetworkSpec::flynet(64, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_one_half() {
        for arch in [Arch::Flynet, Arch::Fcn] {
            let spec = NetworkSpec::new(arch, 32, 2).unwrap();
            let params = spec.zero_params::<f32>();
            let (p, _) = forward(&spec, &params, &Tensor4::zeros([2, 1, 32, 32])).unwrap();
            assert_eq!(p.shape(), Shape4::new(2, 1, 32, 32));
            assert!(p.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn builds_and_forwards_are_deterministic() {
        let (spec, a) = build_flynet::<f32, _>(32, 3, &mut rng(7)).unwrap();
        let (_, b) = build_flynet::<f32, _>(32, 3, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        let x = Tensor4::from_fn([2, 1, 32, 32], |n, _, y, x| ((n * 3 + y * 5 + x * 7) % 17) as f32 / 17.0);
        let (p1, _) = forward(&spec, &a, &x).unwrap();
        let (p2, _) = forward(&spec, &a, &x).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fcn_is_smaller_and_outputs_probabilities() {
        let (fcn, params) = build_fcn_baseline::<f32, _>(32, 4, &mut rng(1)).unwrap();
        let flynet = NetworkSpec::flynet(32, 4).unwrap();
        assert!(fcn.param_count() < flynet.param_count());
        let x = Tensor4::from_fn([1, 1, 32, 32], |_, _, y, x| ((y * x) % 5) as f32 * 0.2);
        let (p, _) = forward(&fcn, &params, &x).unwrap();
        assert_eq!(p.shape(), Shape4::new(1, 1, 32, 32));
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let spec = NetworkSpec::flynet(32, 2).unwrap();
        let params = spec.zero_params::<f32>();
        assert!(forward(&spec, &params, &Tensor4::zeros([1, 1, 16, 16])).is_err());
        assert!(forward(&spec, &params, &Tensor4::zeros([1, 2, 32, 32])).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients_with_matching_layout() {
        let (spec, params) = build_flynet::<f32, _>(16, 2, &mut rng(3)).unwrap();
        let x = Tensor4::from_fn([1, 1, 16, 16], |_, _, y, x| (y as f32 - x as f32) / 16.0);
        let (p, cache) = forward(&spec, &params, &x).unwrap();
        let g = backward(&spec, &params, &cache, &Tensor4::zeros(p.shape())).unwrap();
        assert!(g.same_layout(&params));
        assert!(g.iter().all(|(_, l)| l.values().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_or_foreign_cache_rejected() {
        let (spec, mut params) = build_flynet::<f32, _>(16, 2, &mut rng(3)).unwrap();
        let x = Tensor4::<f32>::zeros([1, 1, 16, 16]);
        let (p, cache) = forward(&spec, &params, &x).unwrap();
        let fcn = NetworkSpec::fcn(16, 2).unwrap();
        assert!(matches!(backward(&fcn, &fcn.zero_params(), &cache, &p), Err(Error::StaleCache(_))));
        params.get_mut("head.conv").unwrap().bias[0] = 1.0;
        assert!(matches!(backward(&spec, &params, &cache, &p), Err(Error::StaleCache(_))));
    }

    /// Per-layer `out_c * in_c * kh * kw + out_c`, written out from the architecture description.
    fn flynet_param_oracle(base: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let mut total = 0;
        let mut cin = 1;
        for g in 0..5 {
            let ch = base << g;
            total += conv(cin, ch, 3) + conv(ch, ch, 3);
            cin = ch;
        }
        for d in (0..4).rev() {
            let ch = base << d;
            total += conv(cin, cin / 2, 2);
            total += conv(cin / 2 + ch, ch, 3) + conv(ch, ch, 3);
            cin = ch;
        }
        total + conv(base, 1, 1)
    }

    #[test]
    fn parameter_count_matches_oracle() {
        let (spec, params) = build_flynet::<f32, _>(64, 8, &mut rng(0)).unwrap();
        assert_eq!(spec.param_count(), flynet_param_oracle(8));
        assert_eq!(params.scalar_count(), flynet_param_oracle(8));
        assert_eq!(NetworkSpec::flynet(128, 64).unwrap().param_count(), flynet_param_oracle(64));
    }
}
