use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, bn_update_running, conv_backward, conv_forward, conv_out_dim,
    dense_backward, dense_forward, gap_backward, gap_forward, maxpool_backward, maxpool_forward, pool_window,
    BatchNorm, BnBatchStats, BnCache, Conv, ConvKind, Dense, Geometry,
};
use super::loss::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Mini-batch statistics in BN; running statistics are updated.
    Train,
    /// Running statistics in BN; the network is not modified.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<F> {
    Input,
    Conv(Conv<F>),
    BatchNorm(BatchNorm<F>),
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense(Dense<F>),
    Add,
}

impl<F> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv(c) if c.kind == ConvKind::Depthwise => "depthwise_conv",
            Op::Conv(_) => "conv",
            Op::BatchNorm(_) => "batch_norm",
            Op::Relu => "relu",
            Op::MaxPool => "max_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dense(_) => "dense",
            Op::Add => "add",
        }
    }

    /// Ops whose output channel `c` depends only on input channel `c`.
    pub fn preserves_channels(&self) -> bool {
        matches!(self, Op::Relu | Op::MaxPool | Op::GlobalAvgPool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<F> {
    pub op: Op<F>,
    pub inputs: Vec<usize>,
}

/// Output extent of a node, excluding the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl NodeShape {
    pub fn channels(self) -> usize {
        match self {
            NodeShape::Spatial { c, .. } => c,
            NodeShape::Flat(n) => n,
        }
    }

    fn numel(self) -> usize {
        match self {
            NodeShape::Spatial { c, h, w } => c * h * w,
            NodeShape::Flat(n) => n,
        }
    }

    fn dims(self, n: usize) -> Vec<usize> {
        match self {
            NodeShape::Spatial { c, h, w } => vec![n, c, h, w],
            NodeShape::Flat(f) => vec![n, f],
        }
    }
}

/// An ordered layer graph: node `i` only reads from nodes `< i`, node 0 is
/// the input and the last node is the classifier.
///
/// Every convolution at index `i` is immediately followed by the batch
/// normalization at `i + 1` that owns its output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F = f32> {
    nodes: Vec<Node<F>>,
    input_shape: [usize; 3],
    num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    DepthwiseWeight,
    Gamma,
    Beta,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv.weight",
            ParamKind::DepthwiseWeight => "depthwise.weight",
            ParamKind::Gamma => "bn.gamma",
            ParamKind::Beta => "bn.beta",
            ParamKind::DenseWeight => "dense.weight",
            ParamKind::DenseBias => "dense.bias",
        }
    }

    /// Decoupled weight decay skips the BN affine parameters so the L1 term
    /// is the only pressure on γ.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Gamma | ParamKind::Beta)
    }
}

pub struct ParamView<'a, F> {
    pub node: usize,
    pub kind: ParamKind,
    pub values: &'a [F],
}

pub struct ParamViewMut<'a, F> {
    pub node: usize,
    pub kind: ParamKind,
    pub values: &'a mut [F],
}

pub fn param_name(node: usize, kind: ParamKind) -> String {
    format!("{node}.{}", kind.as_str())
}

#[derive(Clone, Debug)]
pub struct ParamGrad<F> {
    pub node: usize,
    pub kind: ParamKind,
    pub values: Vec<F>,
}

/// Gradients for every trainable parameter (in [`Network::params`] order)
/// plus the gradient with respect to the input batch.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub params: Vec<ParamGrad<F>>,
    pub input: Tensor<F>,
}

enum Aux<F> {
    None,
    Conv(Option<Vec<F>>),
    Bn(BnCache<F>),
    Pool(Vec<u32>),
}

pub(crate) struct Tape<F> {
    outputs: Vec<Tensor<F>>,
    aux: Vec<Aux<F>>,
    mode: Mode,
}

/// Logits plus, when requested, the activations needed by [`Network::backward`].
pub struct ForwardPass<F> {
    pub logits: Tensor<F>,
    tape: Option<Tape<F>>,
}

impl<F> ForwardPass<F> {
    pub fn has_cache(&self) -> bool {
        self.tape.is_some()
    }

    /// Output of node `index`, available when the pass was cached.
    pub fn activation(&self, index: usize) -> Option<&Tensor<F>> {
        self.tape.as_ref().and_then(|t| t.outputs.get(index))
    }
}

struct RunOutput<F> {
    logits: Tensor<F>,
    tape: Option<Tape<F>>,
    stats: Vec<(usize, BnBatchStats<F>)>,
}

impl<F: Scalar> Network<F> {
    /// Assembles a network from raw nodes, validating the whole graph.
    pub fn from_nodes(nodes: Vec<Node<F>>, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let net = Self {
            nodes,
            input_shape,
            num_classes,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn nodes(&self) -> &[Node<F>] {
        &self.nodes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(ordinal, node index, layer)` for every BN layer in graph order.
    pub fn batch_norms(&self) -> impl Iterator<Item = (usize, usize, &BatchNorm<F>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::BatchNorm(bn) => Some((i, bn)),
                _ => None,
            })
            .enumerate()
            .map(|(ord, (i, bn))| (ord, i, bn))
    }

    pub fn batch_norm_count(&self) -> usize {
        self.batch_norms().count()
    }

    pub fn batch_norm_node(&self, ordinal: usize) -> Option<usize> {
        self.batch_norms().nth(ordinal).map(|(_, i, _)| i)
    }

    pub fn batch_norm_mut(&mut self, ordinal: usize) -> Option<&mut BatchNorm<F>> {
        let idx = self.batch_norm_node(ordinal)?;
        match &mut self.nodes[idx].op {
            Op::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }

    pub fn node_mut(&mut self, index: usize) -> Option<&mut Node<F>> {
        self.nodes.get_mut(index)
    }

    /// Indices of the nodes reading from `node`.
    pub fn consumers(&self, node: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&node))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        let conv = |c: &Conv<F>| Conv {
            kind: c.kind,
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            weight: c.weight.cast(),
        };
        let v = |xs: &[F]| xs.iter().map(|&x| G::of(x.as_f64())).collect::<Vec<G>>();
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                inputs: n.inputs.clone(),
                op: match &n.op {
                    Op::Input => Op::Input,
                    Op::Conv(c) => Op::Conv(conv(c)),
                    Op::BatchNorm(b) => Op::BatchNorm(BatchNorm {
                        gamma: v(&b.gamma),
                        beta: v(&b.beta),
                        running_mean: v(&b.running_mean),
                        running_var: v(&b.running_var),
                        eps: G::of(b.eps.as_f64()),
                        momentum: G::of(b.momentum.as_f64()),
                        channel_ids: b.channel_ids.clone(),
                    }),
                    Op::Relu => Op::Relu,
                    Op::MaxPool => Op::MaxPool,
                    Op::GlobalAvgPool => Op::GlobalAvgPool,
                    Op::Dense(d) => Op::Dense(Dense {
                        in_features: d.in_features,
                        out_features: d.out_features,
                        weight: d.weight.cast(),
                        bias: v(&d.bias),
                    }),
                    Op::Add => Op::Add,
                },
            })
            .collect();
        Network {
            nodes,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }

    /// Per-node output shapes for the configured input, checking channel
    /// consistency along every edge.
    pub fn infer_shapes(&self) -> Result<Vec<NodeShape>> {
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let shape = node_shape(i, node, &shapes, self.input_shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Checks the structural invariants: consistent shapes, conv→BN pairing,
    /// and a dense classifier with `num_classes` outputs at the end.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::shape(0, "non-empty graph", 0));
        }
        self.infer_shapes()?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Conv(conv) = &node.op {
                let paired = matches!(
                    self.nodes.get(i + 1),
                    Some(Node { op: Op::BatchNorm(bn), inputs }) if inputs == &[i] && bn.channels() == conv.out_channels
                );
                if !paired || self.consumers(i) != [i + 1] {
                    return Err(Error::shape(i, "conv followed by its own BN layer", "unpaired conv"));
                }
            }
        }
        let last = self.nodes.len() - 1;
        match &self.nodes[last].op {
            Op::Dense(d) if d.out_features == self.num_classes => Ok(()),
            other => Err(Error::shape(
                last,
                format!("dense classifier with {} outputs", self.num_classes),
                other.name(),
            )),
        }
    }

    fn check_input(&self, x: &Tensor<F>, mode: Mode) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape(0, format!("[N, {c}, {h}, {w}]"), format!("{shape:?}")));
        }
        if mode == Mode::Train && shape[0] < 2 {
            return Err(Error::BatchTooSmall(shape[0]));
        }
        Ok(shape[0])
    }

    fn run(&self, x: &Tensor<F>, mode: Mode, record: bool) -> Result<RunOutput<F>> {
        let n = self.check_input(x, mode)?;
        let shapes = self.infer_shapes()?;
        let count = self.nodes.len();
        let mut last_use = vec![0usize; count];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        let mut outputs: Vec<Option<Tensor<F>>> = (0..count).map(|_| None).collect();
        let mut aux: Vec<Aux<F>> = Vec::with_capacity(count);
        let mut stats = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let out_dims = shapes[i].dims(n);
            let input = node
                .inputs
                .first()
                .map(|&j| outputs[j].as_ref().expect("topological order"));
            let geometry = || match input.map(|t| t.shape()) {
                Some([n, c, h, w]) => Geometry {
                    n: *n,
                    c: *c,
                    h: *h,
                    w: *w,
                },
                _ => unreachable!("shape inference guarantees spatial input"),
            };
            let (data, extra) = match &node.op {
                Op::Input => (x.data().to_vec(), Aux::None),
                Op::Conv(conv) => {
                    let g = geometry();
                    let (y, cols) =
                        conv_forward(input.expect("arity").data(), &g, conv, out_dims[2], out_dims[3], record);
                    (y, Aux::Conv(cols))
                }
                Op::BatchNorm(bn) => {
                    let g = geometry();
                    let xin = input.expect("arity").data();
                    match mode {
                        Mode::Train => {
                            let (y, cache, st) = bn_forward_train(xin, &g, bn);
                            stats.push((i, st));
                            (y, if record { Aux::Bn(cache) } else { Aux::None })
                        }
                        Mode::Eval => (bn_forward_eval(xin, &g, bn), Aux::None),
                    }
                }
                Op::Relu => (
                    input
                        .expect("arity")
                        .data()
                        .iter()
                        .map(|&v| if v > F::zero() { v } else { F::zero() })
                        .collect(),
                    Aux::None,
                ),
                Op::MaxPool => {
                    let (y, arg, _, _) = maxpool_forward(input.expect("arity").data(), &geometry());
                    (y, if record { Aux::Pool(arg) } else { Aux::None })
                }
                Op::GlobalAvgPool => (gap_forward(input.expect("arity").data(), &geometry()), Aux::None),
                Op::Dense(d) => (dense_forward(input.expect("arity").data(), n, d), Aux::None),
                Op::Add => {
                    let a = outputs[node.inputs[0]].as_ref().expect("topological order");
                    let b = outputs[node.inputs[1]].as_ref().expect("topological order");
                    (a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect(), Aux::None)
                }
            };
            outputs[i] = Some(Tensor::from_parts(out_dims, data));
            aux.push(extra);
            if !record {
                for &j in &node.inputs {
                    if last_use[j] == i {
                        outputs[j] = None;
                    }
                }
            }
        }
        let logits = outputs[count - 1].clone().expect("last node computed");
        let tape = record.then(|| Tape {
            outputs: outputs.into_iter().map(|o| o.expect("recorded")).collect(),
            aux,
            mode,
        });
        Ok(RunOutput { logits, tape, stats })
    }

    /// Runs the network. Train mode uses mini-batch BN statistics and
    /// updates running statistics; `cache` keeps activations for backward.
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode, cache: bool) -> Result<ForwardPass<F>> {
        let out = self.run(x, mode, cache)?;
        for (node, st) in &out.stats {
            if let Op::BatchNorm(bn) = &mut self.nodes[*node].op {
                bn_update_running(bn, st);
            }
        }
        Ok(ForwardPass {
            logits: out.logits,
            tape: out.tape,
        })
    }

    /// Eval-mode logits. Pure: never touches the network.
    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.run(x, Mode::Eval, false)?.logits)
    }

    /// Eval-mode pass that keeps every intermediate activation.
    pub fn forward_eval_cached(&self, x: &Tensor<F>) -> Result<ForwardPass<F>> {
        let out = self.run(x, Mode::Eval, true)?;
        Ok(ForwardPass {
            logits: out.logits,
            tape: out.tape,
        })
    }

    /// Train-mode pass that leaves the running statistics untouched.
    pub fn forward_train_pure(&self, x: &Tensor<F>, cache: bool) -> Result<ForwardPass<F>> {
        let out = self.run(x, Mode::Train, cache)?;
        Ok(ForwardPass {
            logits: out.logits,
            tape: out.tape,
        })
    }

    /// Gradients of mean softmax cross-entropy plus `lambda · Σ|γ|`.
    ///
    /// The L1 subgradient at `γ = 0` is 0.
    pub fn backward(&self, pass: &ForwardPass<F>, labels: &Tensor<F>, lambda: f64) -> Result<Gradients<F>> {
        let tape = pass.tape.as_ref().ok_or(Error::NoTape)?;
        if tape.mode != Mode::Train || tape.outputs.len() != self.nodes.len() {
            return Err(Error::NoTape);
        }
        let (_, dlogits) = softmax_cross_entropy(&pass.logits, labels)?;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..count).map(|_| None).collect();
        grads[count - 1] = Some(dlogits.into_data());
        let mut param_grads: Vec<Vec<ParamGrad<F>>> = (0..count).map(|_| Vec::new()).collect();
        let lambda = F::of(lambda);

        let accumulate = |slot: &mut Option<Vec<F>>, g: Vec<F>| match slot {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g),
        };

        for i in (1..count).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x = node.inputs.first().map(|&j| &tape.outputs[j]);
            let geometry = || match x.map(|t| t.shape()) {
                Some([n, c, h, w]) => Geometry {
                    n: *n,
                    c: *c,
                    h: *h,
                    w: *w,
                },
                _ => unreachable!("spatial input"),
            };
            match &node.op {
                Op::Input => {}
                Op::Conv(conv) => {
                    let out = tape.outputs[i].shape();
                    let cols = match &tape.aux[i] {
                        Aux::Conv(c) => c.as_deref(),
                        _ => None,
                    };
                    let (dx, dw) =
                        conv_backward(x.expect("arity").data(), cols, &geometry(), conv, out[2], out[3], &dy);
                    let kind = match conv.kind {
                        ConvKind::Standard => ParamKind::ConvWeight,
                        ConvKind::Depthwise => ParamKind::DepthwiseWeight,
                    };
                    param_grads[i].push(ParamGrad {
                        node: i,
                        kind,
                        values: dw,
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::BatchNorm(bn) => {
                    let Aux::Bn(cache) = &tape.aux[i] else {
                        return Err(Error::NoTape);
                    };
                    let (dx, mut dgamma, dbeta) = bn_backward(&dy, &geometry(), bn, cache);
                    for (g, &gamma) in dgamma.iter_mut().zip(&bn.gamma) {
                        let sign = if gamma > F::zero() {
                            F::one()
                        } else if gamma < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *g = *g + lambda * sign;
                    }
                    param_grads[i].push(ParamGrad {
                        node: i,
                        kind: ParamKind::Gamma,
                        values: dgamma,
                    });
                    param_grads[i].push(ParamGrad {
                        node: i,
                        kind: ParamKind::Beta,
                        values: dbeta,
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Relu => {
                    let y = tape.outputs[i].data();
                    let dx = dy
                        .iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::MaxPool => {
                    let Aux::Pool(arg) = &tape.aux[i] else {
                        return Err(Error::NoTape);
                    };
                    let dx = maxpool_backward(&dy, arg, x.expect("arity").len());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::GlobalAvgPool => {
                    let dx = gap_backward(&dy, &geometry());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Dense(d) => {
                    let xin = x.expect("arity");
                    let (dx, dw, db) = dense_backward(xin.data(), xin.shape()[0], d, &dy);
                    param_grads[i].push(ParamGrad {
                        node: i,
                        kind: ParamKind::DenseWeight,
                        values: dw,
                    });
                    param_grads[i].push(ParamGrad {
                        node: i,
                        kind: ParamKind::DenseBias,
                        values: db,
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], dy.clone());
                    accumulate(&mut grads[node.inputs[1]], dy);
                }
            }
        }
        let input_grad = grads[0]
            .take()
            .unwrap_or_else(|| vec![F::zero(); tape.outputs[0].len()]);
        Ok(Gradients {
            params: param_grads.into_iter().flatten().collect(),
            input: Tensor::from_parts(tape.outputs[0].shape().to_vec(), input_grad),
        })
    }

    /// Trainable parameters in node order (weight; γ, β; weight, bias).
    pub fn params(&self) -> Vec<ParamView<'_, F>> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Conv(c) => out.push(ParamView {
                    node: i,
                    kind: match c.kind {
                        ConvKind::Standard => ParamKind::ConvWeight,
                        ConvKind::Depthwise => ParamKind::DepthwiseWeight,
                    },
                    values: c.weight.data(),
                }),
                Op::BatchNorm(bn) => {
                    out.push(ParamView {
                        node: i,
                        kind: ParamKind::Gamma,
                        values: &bn.gamma,
                    });
                    out.push(ParamView {
                        node: i,
                        kind: ParamKind::Beta,
                        values: &bn.beta,
                    });
                }
                Op::Dense(d) => {
                    out.push(ParamView {
                        node: i,
                        kind: ParamKind::DenseWeight,
                        values: d.weight.data(),
                    });
                    out.push(ParamView {
                        node: i,
                        kind: ParamKind::DenseBias,
                        values: &d.bias,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamViewMut<'_, F>> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            match &mut node.op {
                Op::Conv(c) => {
                    let kind = match c.kind {
                        ConvKind::Standard => ParamKind::ConvWeight,
                        ConvKind::Depthwise => ParamKind::DepthwiseWeight,
                    };
                    out.push(ParamViewMut {
                        node: i,
                        kind,
                        values: c.weight.data_mut(),
                    });
                }
                Op::BatchNorm(bn) => {
                    let BatchNorm { gamma, beta, .. } = bn;
                    out.push(ParamViewMut {
                        node: i,
                        kind: ParamKind::Gamma,
                        values: gamma,
                    });
                    out.push(ParamViewMut {
                        node: i,
                        kind: ParamKind::Beta,
                        values: beta,
                    });
                }
                Op::Dense(d) => {
                    let Dense { weight, bias, .. } = d;
                    out.push(ParamViewMut {
                        node: i,
                        kind: ParamKind::DenseWeight,
                        values: weight.data_mut(),
                    });
                    out.push(ParamViewMut {
                        node: i,
                        kind: ParamKind::DenseBias,
                        values: bias,
                    });
                }
                _ => {}
            }
        }
        out
    }
}

fn node_shape<F: Scalar>(i: usize, node: &Node<F>, shapes: &[NodeShape], input_shape: [usize; 3]) -> Result<NodeShape> {
    let [c0, h0, w0] = input_shape;
    let arity = match node.op {
        Op::Input => 0,
        Op::Add => 2,
        _ => 1,
    };
    if node.inputs.len() != arity || node.inputs.iter().any(|&j| j >= i) {
        return Err(Error::shape(
            i,
            format!("{arity} inputs from earlier nodes"),
            format!("{:?}", node.inputs),
        ));
    }
    if matches!(node.op, Op::Input) != (i == 0) {
        return Err(Error::shape(i, "input node only at index 0", node.op.name()));
    }
    let input = node.inputs.first().map(|&j| shapes[j]);
    let spatial = |s: Option<NodeShape>| match s {
        Some(NodeShape::Spatial { c, h, w }) => Ok((c, h, w)),
        other => Err(Error::shape(i, "spatial input", format!("{other:?}"))),
    };
    let shape = match &node.op {
        Op::Input => NodeShape::Spatial { c: c0, h: h0, w: w0 },
        Op::Conv(conv) => {
            let (c, h, w) = spatial(input)?;
            if c != conv.in_channels {
                return Err(Error::shape(i, conv.in_channels, c));
            }
            let per_group = match conv.kind {
                ConvKind::Standard => conv.in_channels,
                ConvKind::Depthwise => {
                    if conv.out_channels != conv.in_channels {
                        return Err(Error::shape(i, conv.in_channels, conv.out_channels));
                    }
                    1
                }
            };
            let wshape = [conv.out_channels, per_group, conv.kernel, conv.kernel];
            if conv.weight.shape() != wshape {
                return Err(Error::shape(
                    i,
                    format!("{wshape:?}"),
                    format!("{:?}", conv.weight.shape()),
                ));
            }
            if conv.stride == 0 {
                return Err(Error::shape(i, "stride >= 1", 0));
            }
            let ho = conv_out_dim(h, conv.kernel, conv.stride, conv.padding);
            let wo = conv_out_dim(w, conv.kernel, conv.stride, conv.padding);
            match (ho, wo) {
                (Some(h), Some(w)) => NodeShape::Spatial {
                    c: conv.out_channels,
                    h,
                    w,
                },
                _ => return Err(Error::shape(i, "input at least as large as kernel", h.min(w))),
            }
        }
        Op::BatchNorm(bn) => {
            let (c, h, w) = spatial(input)?;
            let len = bn.channels();
            if c != len
                || bn.beta.len() != len
                || bn.running_mean.len() != len
                || bn.running_var.len() != len
                || bn.channel_ids.len() != len
            {
                return Err(Error::shape(i, c, len));
            }
            NodeShape::Spatial { c, h, w }
        }
        Op::Relu => input.expect("arity checked"),
        Op::MaxPool => {
            let (c, h, w) = spatial(input)?;
            NodeShape::Spatial {
                c,
                h: h / pool_window(h),
                w: w / pool_window(w),
            }
        }
        Op::GlobalAvgPool => NodeShape::Flat(spatial(input)?.0),
        Op::Dense(d) => {
            let n = input.expect("arity checked").numel();
            if n != d.in_features {
                return Err(Error::shape(i, d.in_features, n));
            }
            if d.weight.shape() != [d.out_features, d.in_features] || d.bias.len() != d.out_features {
                return Err(Error::shape(i, "dense weight out×in and bias", d.out_features));
            }
            NodeShape::Flat(d.out_features)
        }
        Op::Add => {
            let (a, b) = (shapes[node.inputs[0]], shapes[node.inputs[1]]);
            if a != b {
                return Err(Error::shape(i, format!("{a:?}"), format!("{b:?}")));
            }
            a
        }
    };
    Ok(shape)
}

/// Appends layers to a graph with He-style initialization and BN γ = 0.5.
pub struct NetworkBuilder<F> {
    nodes: Vec<Node<F>>,
    shapes: Vec<NodeShape>,
    input_shape: [usize; 3],
    num_classes: usize,
    gamma_init: F,
    rng: ChaCha8Rng,
}

impl<F: Scalar> NetworkBuilder<F> {
    pub const INPUT: usize = 0;

    pub fn new(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        let [c, h, w] = input_shape;
        Self {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
            }],
            shapes: vec![NodeShape::Spatial { c, h, w }],
            input_shape,
            num_classes,
            gamma_init: F::of(0.5),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_gamma_init(mut self, gamma: F) -> Self {
        self.gamma_init = gamma;
        self
    }

    pub fn channels(&self, node: usize) -> usize {
        self.shapes[node].channels()
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<usize>) -> Result<usize> {
        let idx = self.nodes.len();
        let node = Node { op, inputs };
        let shape = node_shape(idx, &node, &self.shapes, self.input_shape)?;
        self.nodes.push(node);
        self.shapes.push(shape);
        Ok(idx)
    }

    fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
    }

    fn conv(
        &mut self,
        from: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        kind: ConvKind,
    ) -> Result<usize> {
        let cin = self.channels(from);
        let out = if kind == ConvKind::Depthwise { cin } else { out };
        let per_group = if kind == ConvKind::Depthwise { 1 } else { cin };
        let fan_in = (per_group * kernel * kernel) as f64;
        let weight = self.gaussian(&[out, per_group, kernel, kernel], (2.0 / fan_in).sqrt());
        let conv = self.push(
            Op::Conv(Conv {
                kind,
                in_channels: cin,
                out_channels: out,
                kernel,
                stride,
                padding,
                weight,
            }),
            vec![from],
        )?;
        self.push(Op::BatchNorm(BatchNorm::new(out, self.gamma_init)), vec![conv])
    }

    /// Standard convolution followed by its BN layer; returns the BN node.
    pub fn conv_bn(&mut self, from: usize, out: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        self.conv(from, out, kernel, stride, padding, ConvKind::Standard)
    }

    /// Depthwise convolution followed by its BN layer; returns the BN node.
    pub fn depthwise_bn(&mut self, from: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        self.conv(from, 0, kernel, stride, padding, ConvKind::Depthwise)
    }

    pub fn relu(&mut self, from: usize) -> Result<usize> {
        self.push(Op::Relu, vec![from])
    }

    pub fn max_pool(&mut self, from: usize) -> Result<usize> {
        self.push(Op::MaxPool, vec![from])
    }

    pub fn global_avg_pool(&mut self, from: usize) -> Result<usize> {
        self.push(Op::GlobalAvgPool, vec![from])
    }

    pub fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn dense(&mut self, from: usize, out: usize) -> Result<usize> {
        let fin = match self.shapes[from] {
            NodeShape::Spatial { c, h, w } => c * h * w,
            NodeShape::Flat(n) => n,
        };
        let weight = self.gaussian(&[out, fin], (2.0 / fin as f64).sqrt());
        self.push(
            Op::Dense(Dense {
                in_features: fin,
                out_features: out,
                weight,
                bias: vec![F::zero(); out],
            }),
            vec![from],
        )
    }

    pub fn finish(self) -> Result<Network<F>> {
        Network::from_nodes(self.nodes, self.input_shape, self.num_classes)
    }
}
