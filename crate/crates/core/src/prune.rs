//! Channel ranking by BN scaling-factor magnitude, structural channel
//! removal and the iterative prune / fine-tune / evaluate loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::count_parameters;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, ConvKind, Dense, Network, Node, NodeShape, Op};
use crate::tensor::{Scalar, Tensor};

/// A channel addressed by BN layer ordinal and original channel id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRef {
    pub layer_index: usize,
    pub channel_index: usize,
    pub gamma_value: f64,
}

impl ChannelRef {
    pub fn new(layer_index: usize, channel_index: usize) -> Self {
        Self {
            layer_index,
            channel_index,
            gamma_value: 0.0,
        }
    }
}

impl fmt::Display for ChannelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer_index, self.channel_index)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Ascending `|γ|` over the whole network.
    #[default]
    GlobalGamma,
    /// Ascending `|γ|` inside each layer, interleaved so every layer loses
    /// the same fraction of its channels.
    LayerQuota,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::GlobalGamma => "global_gamma",
            StrategyKind::LayerQuota => "layer_quota",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_gamma" | "global" => Ok(StrategyKind::GlobalGamma),
            "layer_quota" | "layer" => Ok(StrategyKind::LayerQuota),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected global_gamma or layer_quota)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneStrategy {
    pub kind: StrategyKind,
    /// BN layer ordinals that are never ranked.
    pub protected_layers: BTreeSet<usize>,
    pub min_channels_per_layer: usize,
}

impl Default for PruneStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::GlobalGamma,
            protected_layers: BTreeSet::new(),
            min_channels_per_layer: 1,
        }
    }
}

impl PruneStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Structural role of one BN layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub layer_index: usize,
    pub node: usize,
    pub channels: usize,
    /// `None` when the layer's channels can be removed independently.
    pub blocked: Option<String>,
    /// Depthwise BN layers whose channels are removed together with this
    /// layer's.
    pub coupled: Vec<usize>,
}

impl LayerInfo {
    pub fn prunable(&self) -> bool {
        self.blocked.is_none()
    }
}

/// Classifies every BN layer. A layer is prunable when its convolution is
/// standard and its output reaches only convolutions or the classifier,
/// possibly through ReLU, pooling and depthwise stages. Anything that feeds
/// a residual add is protected.
pub fn layer_structure<F: Scalar>(net: &Network<F>) -> Vec<LayerInfo> {
    let nodes = net.nodes();
    let ordinal: HashMap<usize, usize> = net.batch_norms().map(|(ord, node, _)| (node, ord)).collect();
    net.batch_norms()
        .map(|(ord, node, bn)| {
            let mut info = LayerInfo {
                layer_index: ord,
                node,
                channels: bn.channels(),
                blocked: None,
                coupled: Vec::new(),
            };
            if let Some(Node { op: Op::Conv(c), .. }) = node.checked_sub(1).and_then(|p| nodes.get(p)) {
                if c.kind == ConvKind::Depthwise {
                    info.blocked = Some("depthwise layers follow their producer".into());
                    return info;
                }
            }
            let mut stack = vec![node];
            while let Some(n) = stack.pop() {
                for consumer in net.consumers(n) {
                    match &nodes[consumer].op {
                        Op::Relu | Op::MaxPool | Op::GlobalAvgPool => stack.push(consumer),
                        Op::Conv(c) if c.kind == ConvKind::Depthwise => {
                            info.coupled.push(ordinal[&(consumer + 1)]);
                            stack.push(consumer + 1);
                        }
                        Op::Conv(_) | Op::Dense(_) => {}
                        Op::Add => {
                            info.blocked = Some("output feeds a residual add".into());
                            return info;
                        }
                        other => {
                            info.blocked = Some(format!("output feeds unsupported {}", other.name()));
                            return info;
                        }
                    }
                }
            }
            info
        })
        .collect()
}

fn magnitude_order(a: &ChannelRef, b: &ChannelRef) -> std::cmp::Ordering {
    a.gamma_value
        .abs()
        .total_cmp(&b.gamma_value.abs())
        .then(a.layer_index.cmp(&b.layer_index))
        .then(a.channel_index.cmp(&b.channel_index))
}

/// Pruning order under `strategy`, least important first. Each layer
/// contributes at most `channels − min_channels_per_layer` entries (its
/// largest `|γ|` channels are left out).
pub fn rank_channels<F: Scalar>(net: &Network<F>, strategy: &PruneStrategy) -> Vec<ChannelRef> {
    let floor = strategy.min_channels_per_layer.max(1);
    let mut per_layer: Vec<Vec<ChannelRef>> = Vec::new();
    for info in layer_structure(net) {
        if !info.prunable() || strategy.protected_layers.contains(&info.layer_index) {
            continue;
        }
        let bn = bn_at(net, info.node);
        let mut chans: Vec<ChannelRef> = bn
            .gamma
            .iter()
            .zip(&bn.channel_ids)
            .map(|(g, &id)| ChannelRef {
                layer_index: info.layer_index,
                channel_index: id as usize,
                gamma_value: g.as_f64(),
            })
            .collect();
        chans.sort_by(magnitude_order);
        chans.truncate(info.channels.saturating_sub(floor));
        per_layer.push(chans);
    }
    match strategy.kind {
        StrategyKind::GlobalGamma => {
            let mut all: Vec<ChannelRef> = per_layer.into_iter().flatten().collect();
            all.sort_by(magnitude_order);
            all
        }
        StrategyKind::LayerQuota => {
            let mut keyed: Vec<(f64, ChannelRef)> = Vec::new();
            for chans in per_layer {
                let size = bn_channels(net, chans.first().map(|c| c.layer_index)) as f64;
                for (rank, c) in chans.into_iter().enumerate() {
                    keyed.push(((rank + 1) as f64 / size, c));
                }
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| magnitude_order(&a.1, &b.1)));
            keyed.into_iter().map(|(_, c)| c).collect()
        }
    }
}

fn bn_at<F: Scalar>(net: &Network<F>, node: usize) -> &BatchNorm<F> {
    match &net.nodes()[node].op {
        Op::BatchNorm(bn) => bn,
        _ => unreachable!("layer_structure only reports BN nodes"),
    }
}

fn bn_channels<F: Scalar>(net: &Network<F>, layer: Option<usize>) -> usize {
    layer
        .and_then(|l| net.batch_norms().nth(l))
        .map_or(1, |(_, _, bn)| bn.channels())
}

/// Every channel that leaves the network together with `victim`: the
/// victim itself plus its depthwise-coupled followers.
pub fn coupled_channels<F: Scalar>(net: &Network<F>, victim: &ChannelRef) -> Result<Vec<ChannelRef>> {
    let layers = layer_structure(net);
    let info = layers.get(victim.layer_index).ok_or_else(|| Error::Structural {
        channel: *victim,
        reason: "no such BN layer".into(),
    })?;
    let pos = channel_position(net, info, victim)?;
    let mut out = vec![*victim];
    for &ord in &info.coupled {
        let bn = bn_at(net, layers[ord].node);
        out.push(ChannelRef {
            layer_index: ord,
            channel_index: bn.channel_ids[pos] as usize,
            gamma_value: bn.gamma[pos].as_f64(),
        });
    }
    Ok(out)
}

fn channel_position<F: Scalar>(net: &Network<F>, info: &LayerInfo, victim: &ChannelRef) -> Result<usize> {
    bn_at(net, info.node)
        .channel_ids
        .iter()
        .position(|&id| id as usize == victim.channel_index)
        .ok_or_else(|| Error::Structural {
            channel: *victim,
            reason: "no such channel".into(),
        })
}

/// Rebuilds `net` without the victim channels. Surviving weights are copied
/// bit for bit; consumers lose the matching input slices.
pub fn prune_channels<F: Scalar>(net: &Network<F>, victims: &[ChannelRef]) -> Result<Network<F>> {
    let layers = layer_structure(net);
    let mut removed: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for v in victims {
        let info = layers.get(v.layer_index).ok_or_else(|| Error::Structural {
            channel: *v,
            reason: "no such BN layer".into(),
        })?;
        if let Some(reason) = &info.blocked {
            return Err(Error::Structural {
                channel: *v,
                reason: reason.clone(),
            });
        }
        let pos = channel_position(net, info, v)?;
        if !removed.entry(v.layer_index).or_default().insert(pos) {
            return Err(Error::Structural {
                channel: *v,
                reason: "listed twice".into(),
            });
        }
        for &ord in &info.coupled {
            removed.entry(ord).or_default().insert(pos);
        }
        if removed[&v.layer_index].len() >= info.channels {
            return Err(Error::Structural {
                channel: *v,
                reason: "would remove every channel of the layer".into(),
            });
        }
    }
    if removed.is_empty() {
        return Ok(net.clone());
    }
    let removed_by_node: HashMap<usize, &BTreeSet<usize>> =
        removed.iter().map(|(ord, set)| (layers[*ord].node, set)).collect();

    let shapes = net.infer_shapes()?;
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(net.nodes().len());
    let mut nodes = Vec::with_capacity(net.nodes().len());
    for (i, node) in net.nodes().iter().enumerate() {
        let input_keep = node.inputs.first().map(|&j| kept[j].clone());
        let (op, keep) = match &node.op {
            Op::Input => (Op::Input, (0..shapes[0].channels()).collect()),
            Op::Conv(conv) => {
                let in_keep = input_keep.expect("conv has an input");
                let out_keep: Vec<usize> = match conv.kind {
                    ConvKind::Depthwise => in_keep.clone(),
                    ConvKind::Standard => {
                        let gone = removed_by_node.get(&(i + 1));
                        (0..conv.out_channels)
                            .filter(|c| gone.is_none_or(|g| !g.contains(c)))
                            .collect()
                    }
                };
                (Op::Conv(slice_conv(conv, &out_keep, &in_keep)), out_keep)
            }
            Op::BatchNorm(bn) => {
                let keep = input_keep.expect("bn has an input");
                let pick = |v: &[F]| keep.iter().map(|&c| v[c]).collect::<Vec<F>>();
                let bn = BatchNorm {
                    gamma: pick(&bn.gamma),
                    beta: pick(&bn.beta),
                    running_mean: pick(&bn.running_mean),
                    running_var: pick(&bn.running_var),
                    eps: bn.eps,
                    momentum: bn.momentum,
                    channel_ids: keep.iter().map(|&c| bn.channel_ids[c]).collect(),
                };
                (Op::BatchNorm(bn), keep)
            }
            Op::Relu => (Op::Relu, input_keep.expect("arity")),
            Op::MaxPool => (Op::MaxPool, input_keep.expect("arity")),
            Op::GlobalAvgPool => (Op::GlobalAvgPool, input_keep.expect("arity")),
            Op::Add => {
                let (a, b) = (&kept[node.inputs[0]], &kept[node.inputs[1]]);
                if a != b {
                    return Err(Error::shape(i, "equal channel sets at residual add", "diverging sets"));
                }
                (Op::Add, a.clone())
            }
            Op::Dense(d) => {
                let in_keep = input_keep.expect("arity");
                let per_channel = match shapes[node.inputs[0]] {
                    NodeShape::Spatial { h, w, .. } => h * w,
                    NodeShape::Flat(_) => 1,
                };
                let cols: Vec<usize> = in_keep
                    .iter()
                    .flat_map(|&c| (0..per_channel).map(move |p| c * per_channel + p))
                    .collect();
                (Op::Dense(slice_dense(d, &cols)), (0..d.out_features).collect())
            }
        };
        kept.push(keep);
        nodes.push(Node {
            op,
            inputs: node.inputs.clone(),
        });
    }
    Network::from_nodes(nodes, net.input_shape(), net.num_classes())
}

fn slice_conv<F: Scalar>(conv: &Conv<F>, out_keep: &[usize], in_keep: &[usize]) -> Conv<F> {
    let kk = conv.kernel * conv.kernel;
    let (per_group, in_sel): (usize, Vec<usize>) = match conv.kind {
        ConvKind::Standard => (conv.in_channels, in_keep.to_vec()),
        ConvKind::Depthwise => (1, vec![0]),
    };
    let src = conv.weight.data();
    let mut data = Vec::with_capacity(out_keep.len() * in_sel.len() * kk);
    for &o in out_keep {
        for &c in &in_sel {
            let base = (o * per_group + c) * kk;
            data.extend_from_slice(&src[base..base + kk]);
        }
    }
    let in_channels = match conv.kind {
        ConvKind::Standard => in_keep.len(),
        ConvKind::Depthwise => out_keep.len(),
    };
    Conv {
        kind: conv.kind,
        in_channels,
        out_channels: out_keep.len(),
        kernel: conv.kernel,
        stride: conv.stride,
        padding: conv.padding,
        weight: Tensor::from_parts(vec![out_keep.len(), in_sel.len(), conv.kernel, conv.kernel], data),
    }
}

fn slice_dense<F: Scalar>(d: &Dense<F>, cols: &[usize]) -> Dense<F> {
    let src = d.weight.data();
    let mut data = Vec::with_capacity(d.out_features * cols.len());
    for row in src.chunks(d.in_features) {
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Dense {
        in_features: cols.len(),
        out_features: d.out_features,
        weight: Tensor::from_parts(vec![d.out_features, cols.len()], data),
        bias: d.bias.clone(),
    }
}

/// `1 − trainable(pruned) / trainable(original)`.
pub fn param_prune_fraction<F: Scalar>(original: &Network<F>, pruned: &Network<F>) -> Result<f64> {
    let a = count_parameters(original).trainable;
    let b = count_parameters(pruned).trainable;
    if b > a {
        return Err(Error::PrunedLarger { original: a, pruned: b });
    }
    Ok(if a == 0 { 0.0 } else { 1.0 - b as f64 / a as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step_index: usize,
    pub channel_prune_fraction: f64,
    pub param_prune_fraction: f64,
    pub accuracy: f64,
    pub accuracy_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningCurve {
    pub points: Vec<CurvePoint>,
    /// False when evaluation or fine-tuning failed part way.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

const CURVE_HEADER: [&str; 5] = [
    "step_index",
    "channels_pruned_frac",
    "params_pruned_frac",
    "accuracy",
    "accuracy_loss",
];

#[derive(Deserialize)]
struct CurveRow {
    step_index: usize,
    channels_pruned_frac: f64,
    params_pruned_frac: f64,
    accuracy: f64,
    accuracy_loss: f64,
}

impl PruningCurve {
    pub fn baseline_accuracy(&self) -> Option<f64> {
        self.points.first().map(|p| p.accuracy)
    }

    /// Checks the ordering invariants: fractions start at 0, the channel
    /// fraction strictly increases and the parameter fraction never drops.
    pub fn validate(&self) -> Result<()> {
        let first = self.points.first().ok_or(Error::TooFewValues { needed: 1, got: 0 })?;
        if first.channel_prune_fraction != 0.0 || first.param_prune_fraction != 0.0 || first.accuracy_loss != 0.0 {
            return Err(Error::InvalidArgument(
                "curve must start at the unpruned baseline".into(),
            ));
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if w[1].channel_prune_fraction <= w[0].channel_prune_fraction {
                return Err(Error::NonMonotoneX(i + 1));
            }
            if w[1].param_prune_fraction < w[0].param_prune_fraction {
                return Err(Error::InvalidArgument(format!(
                    "parameter fraction decreases at point {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// CSV with six-decimal fixed-point values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CURVE_HEADER)?;
        for p in &self.points {
            w.write_record([
                p.step_index.to_string(),
                format!("{:.6}", p.channel_prune_fraction),
                format!("{:.6}", p.param_prune_fraction),
                format!("{:.6}", p.accuracy),
                format!("{:.6}", p.accuracy_loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<curve csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CURVE_HEADER {
            return Err(Error::InvalidArgument(format!("unexpected curve header {header:?}")));
        }
        let mut points = Vec::new();
        for row in r.deserialize() {
            let row: CurveRow = row?;
            points.push(CurvePoint {
                step_index: row.step_index,
                channel_prune_fraction: row.channels_pruned_frac,
                param_prune_fraction: row.params_pruned_frac,
                accuracy: row.accuracy,
                accuracy_loss: row.accuracy_loss,
            });
        }
        Ok(Self {
            points,
            complete: true,
            failure: None,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeConfig {
    /// Channels removed per step, as a fraction of the original rankable
    /// channel count.
    pub step_fraction: f64,
    pub finetune_epochs: usize,
    pub strategy: PruneStrategy,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            step_fraction: 0.05,
            finetune_epochs: 5,
            strategy: PruneStrategy::default(),
        }
    }
}

pub struct PruneOutcome<F> {
    pub curve: PruningCurve,
    pub final_network: Network<F>,
}

/// Repeats rank → remove → fine-tune → evaluate until the floors leave
/// nothing to rank. `eval_fn` returns validation accuracy; `finetune` is
/// called with the epoch count after each removal when it is nonzero.
///
/// A failing evaluation or fine-tune after the baseline ends the loop and
/// returns the curve so far, marked incomplete.
pub fn iterative_prune<F: Scalar>(
    net: &Network<F>,
    cfg: &IterativeConfig,
    mut eval_fn: impl FnMut(&Network<F>) -> Result<f64>,
    mut finetune: impl FnMut(&mut Network<F>, usize) -> Result<()>,
) -> Result<PruneOutcome<F>> {
    if !(cfg.step_fraction > 0.0 && cfg.step_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "step fraction must lie in (0, 1), got {}",
            cfg.step_fraction
        )));
    }
    let rankable: usize = layer_structure(net)
        .iter()
        .filter(|l| l.prunable() && !cfg.strategy.protected_layers.contains(&l.layer_index))
        .map(|l| l.channels)
        .sum();
    if rankable == 0 {
        return Err(Error::InvalidArgument("network has no prunable channels".into()));
    }
    let quota = ((cfg.step_fraction * rankable as f64).round() as usize).max(1);
    let baseline = eval_fn(net).map_err(|e| Error::Evaluation(format!("baseline: {e}")))?;
    let mut curve = PruningCurve {
        points: vec![CurvePoint {
            step_index: 0,
            channel_prune_fraction: 0.0,
            param_prune_fraction: 0.0,
            accuracy: baseline,
            accuracy_loss: 0.0,
        }],
        complete: true,
        failure: None,
    };
    let mut current = net.clone();
    let mut removed = 0usize;
    loop {
        let ranking = rank_channels(&current, &cfg.strategy);
        if ranking.is_empty() {
            break;
        }
        let take = quota.min(ranking.len());
        current = prune_channels(&current, &ranking[..take])?;
        removed += take;
        let step = curve.points.len();
        let result = if cfg.finetune_epochs > 0 {
            finetune(&mut current, cfg.finetune_epochs).map_err(|e| format!("fine-tune at step {step}: {e}"))
        } else {
            Ok(())
        }
        .and_then(|()| eval_fn(&current).map_err(|e| format!("evaluation at step {step}: {e}")));
        let accuracy = match result {
            Ok(a) => a,
            Err(msg) => {
                curve.complete = false;
                curve.failure = Some(msg);
                break;
            }
        };
        curve.points.push(CurvePoint {
            step_index: step,
            channel_prune_fraction: removed as f64 / rankable as f64,
            param_prune_fraction: param_prune_fraction(net, &current)?,
            accuracy,
            accuracy_loss: baseline - accuracy,
        });
    }
    Ok(PruneOutcome {
        curve,
        final_network: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, ArchSpec};
    use crate::nn::NetworkBuilder;
    use crate::sparsity::collect_gammas;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(widths: &[usize], seed: u64) -> Network<f32> {
        let mut b = NetworkBuilder::<f32>::new([2, 6, 6], 3, seed);
        let mut x = 0;
        for &w in widths {
            x = b.conv_bn(x, w, 3, 1, 1).unwrap();
            x = b.relu(x).unwrap();
        }
        let x = b.global_avg_pool(x).unwrap();
        b.dense(x, 3).unwrap();
        b.finish().unwrap()
    }

    fn set_gammas(net: &mut Network<f32>, layer: usize, gammas: &[f32]) {
        net.batch_norm_mut(layer).unwrap().gamma = gammas.to_vec();
    }

    fn batch(net: &Network<f32>, n: usize, seed: u64) -> Tensor<f32> {
        let [c, h, w] = net.input_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn ranking_sorts_by_magnitude_and_applies_floor() {
        let mut net = chain(&[3], 0);
        set_gammas(&mut net, 0, &[0.9, 0.0, -0.5]);
        let strategy = PruneStrategy::default();
        let ids: Vec<usize> = rank_channels(&net, &strategy).iter().map(|c| c.channel_index).collect();
        // Channel 0 is the floor survivor.
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn ties_break_on_lower_layer() {
        let mut net = chain(&[2, 2], 0);
        set_gammas(&mut net, 0, &[0.3, 0.8]);
        set_gammas(&mut net, 1, &[0.3, 0.9]);
        let r = rank_channels(&net, &PruneStrategy::default());
        assert_eq!((r[0].layer_index, r[1].layer_index), (0, 1));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn two_channel_layer_contributes_one() {
        let net = chain(&[2], 0);
        assert_eq!(rank_channels(&net, &PruneStrategy::default()).len(), 1);
        let strategy = PruneStrategy {
            min_channels_per_layer: 2,
            ..Default::default()
        };
        assert!(rank_channels(&net, &strategy).is_empty());
    }

    #[test]
    fn layer_quota_interleaves() {
        let mut net = chain(&[4, 2], 0);
        set_gammas(&mut net, 0, &[0.1, 0.2, 0.3, 0.4]);
        set_gammas(&mut net, 1, &[0.9, 0.8]);
        let r = rank_channels(&net, &PruneStrategy::new(StrategyKind::LayerQuota));
        let order: Vec<(usize, usize)> = r.iter().map(|c| (c.layer_index, c.channel_index)).collect();
        // keys: layer 0 → 1/4, 2/4, 3/4; layer 1 → 1/2
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 1), (0, 2)]);
    }

    #[test]
    fn empty_prune_is_bitwise_identity() {
        let net = build_network::<f32>(&ArchSpec::vgg(11).with_input([1, 16, 16]), 3).unwrap();
        let pruned = prune_channels(&net, &[]).unwrap();
        let x = batch(&net, 3, 1);
        assert_eq!(net.forward_eval(&x).unwrap(), pruned.forward_eval(&x).unwrap());
    }

    #[test]
    fn dead_channel_removal_preserves_logits() {
        let mut net = chain(&[4, 5], 2);
        let bn = net.batch_norm_mut(0).unwrap();
        bn.gamma[2] = 0.0;
        bn.beta[2] = 0.0;
        let pruned = prune_channels(&net, &[ChannelRef::new(0, 2)]).unwrap();
        let x = batch(&net, 4, 9);
        let diff = net
            .forward_eval(&x)
            .unwrap()
            .max_abs_diff(&pruned.forward_eval(&x).unwrap());
        assert!(diff < 1e-5, "{diff}");
        let snap = collect_gammas(&pruned).unwrap();
        assert!(!snap.contains(0, 2));
        assert!(snap.contains(0, 3));
    }

    #[test]
    fn closed_form_parameter_drop() {
        let cout = 5;
        let net = chain(&[4, cout], 0);
        let pruned = prune_channels(&net, &[ChannelRef::new(0, 0), ChannelRef::new(0, 3)]).unwrap();
        let before = count_parameters(&net).total();
        let after = count_parameters(&pruned).total();
        assert_eq!(before - after, 3 * 3 * 2 * 2 + 8 + 3 * 3 * 2 * cout);
        assert!(param_prune_fraction(&net, &pruned).unwrap() > 0.0);
        assert_eq!(param_prune_fraction(&net, &net).unwrap(), 0.0);
        assert!(matches!(
            param_prune_fraction(&pruned, &net),
            Err(Error::PrunedLarger { .. })
        ));
    }

    #[test]
    fn surviving_weights_copied_exactly() {
        let net = chain(&[3, 2], 4);
        let pruned = prune_channels(&net, &[ChannelRef::new(0, 1)]).unwrap();
        let (Op::Conv(a), Op::Conv(b)) = (&net.nodes()[1].op, &pruned.nodes()[1].op) else {
            panic!("conv expected")
        };
        assert_eq!(&b.weight.data()[..18], &a.weight.data()[..18]);
        assert_eq!(&b.weight.data()[18..], &a.weight.data()[36..]);
        let (Op::Conv(a), Op::Conv(b)) = (&net.nodes()[4].op, &pruned.nodes()[4].op) else {
            panic!("conv expected")
        };
        // Consumer keeps input channels 0 and 2 of each filter.
        assert_eq!(&b.weight.data()[..9], &a.weight.data()[..9]);
        assert_eq!(&b.weight.data()[9..18], &a.weight.data()[18..27]);
    }

    #[test]
    fn structural_rejections() {
        let net = build_network::<f32>(&ArchSpec::resnet(11).with_input([1, 8, 8]), 0).unwrap();
        let layers = layer_structure(&net);
        // stem, block-first convs prunable only for the first conv of each block
        let prunable: Vec<usize> = layers.iter().filter(|l| l.prunable()).map(|l| l.layer_index).collect();
        assert_eq!(prunable, vec![1, 3, 6]);
        let err = prune_channels(&net, &[ChannelRef::new(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::Structural { .. }), "{err}");
        let err = prune_channels(&net, &[ChannelRef::new(1, 999)]).unwrap_err();
        assert!(matches!(err, Error::Structural { .. }));
        let err = prune_channels(&net, &[ChannelRef::new(40, 0)]).unwrap_err();
        assert!(matches!(err, Error::Structural { .. }));
        let all: Vec<ChannelRef> = (0..16).map(|c| ChannelRef::new(1, c)).collect();
        assert!(prune_channels(&net, &all).is_err());
    }

    #[test]
    fn mobilenet_coupling_removes_depthwise_channel() {
        let net = build_network::<f32>(&ArchSpec::mobilenet(0.25).with_input([1, 8, 8]), 0).unwrap();
        let layers = layer_structure(&net);
        assert!(!layers[1].prunable());
        assert_eq!(layers[0].coupled, vec![1]);
        let victim = ChannelRef::new(0, 2);
        let coupled = coupled_channels(&net, &victim).unwrap();
        assert_eq!(coupled.len(), 2);
        let pruned = prune_channels(&net, &[victim]).unwrap();
        let snap = collect_gammas(&pruned).unwrap();
        assert!(!snap.contains(0, 2) && !snap.contains(1, 2));
        pruned.forward_eval(&batch(&net, 2, 0)).unwrap();
        assert!(prune_channels(&net, &[ChannelRef::new(1, 0)]).is_err());
    }

    #[test]
    fn spatial_dense_columns_sliced() {
        let mut b = NetworkBuilder::<f32>::new([1, 4, 4], 2, 0);
        let x = b.conv_bn(0, 3, 3, 1, 1).unwrap();
        let x = b.relu(x).unwrap();
        let x = b.max_pool(x).unwrap();
        b.dense(x, 2).unwrap();
        let mut net = b.finish().unwrap();
        let bn = net.batch_norm_mut(0).unwrap();
        bn.gamma[1] = 0.0;
        bn.beta[1] = 0.0;
        let pruned = prune_channels(&net, &[ChannelRef::new(0, 1)]).unwrap();
        let x = batch(&net, 2, 3);
        assert!(
            net.forward_eval(&x)
                .unwrap()
                .max_abs_diff(&pruned.forward_eval(&x).unwrap())
                < 1e-6
        );
    }

    #[test]
    fn single_step_sweep_gives_two_points() {
        let net = chain(&[4, 4], 0);
        let cfg = IterativeConfig {
            step_fraction: 0.9,
            finetune_epochs: 0,
            strategy: PruneStrategy::default(),
        };
        let out = iterative_prune(&net, &cfg, |_| Ok(0.5), |_, _| unreachable!()).unwrap();
        assert_eq!(out.curve.points.len(), 2);
        assert_eq!(out.curve.points[1].channel_prune_fraction, 6.0 / 8.0);
        out.curve.validate().unwrap();
    }

    #[test]
    fn default_step_on_two_hundred_channels() {
        let net = chain(&[50, 50, 50, 50], 1);
        let cfg = IterativeConfig {
            finetune_epochs: 0,
            ..Default::default()
        };
        let mut calls = 0;
        let out = iterative_prune(
            &net,
            &cfg,
            |_| {
                calls += 1;
                Ok(1.0)
            },
            |_, _| Ok(()),
        )
        .unwrap();
        let pts = &out.curve.points;
        assert!(pts.len() <= 21, "{}", pts.len());
        assert_eq!(pts[1].channel_prune_fraction, 10.0 / 200.0);
        assert_eq!(calls, pts.len());
        out.curve.validate().unwrap();
        // every step strictly shrinks the network
        assert!(pts
            .windows(2)
            .all(|w| w[1].param_prune_fraction > w[0].param_prune_fraction));
    }

    #[test]
    fn failing_evaluation_marks_curve_incomplete() {
        let net = chain(&[4, 4], 0);
        let cfg = IterativeConfig {
            step_fraction: 0.25,
            finetune_epochs: 0,
            ..Default::default()
        };
        let mut n = 0;
        let out = iterative_prune(
            &net,
            &cfg,
            |_| {
                n += 1;
                if n == 3 {
                    Err(Error::Evaluation("boom".into()))
                } else {
                    Ok(0.9)
                }
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert!(!out.curve.complete);
        assert_eq!(out.curve.points.len(), 2);
        assert!(out.curve.failure.as_deref().unwrap().contains("boom"));
    }

    #[test]
    fn curve_csv_format() {
        let curve = PruningCurve {
            points: vec![
                CurvePoint {
                    step_index: 0,
                    channel_prune_fraction: 0.0,
                    param_prune_fraction: 0.0,
                    accuracy: 0.9,
                    accuracy_loss: 0.0,
                },
                CurvePoint {
                    step_index: 1,
                    channel_prune_fraction: 0.05,
                    param_prune_fraction: 1.0 / 3.0,
                    accuracy: 0.85,
                    accuracy_loss: 0.05,
                },
            ],
            complete: true,
            failure: None,
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "step_index,channels_pruned_frac,params_pruned_frac,accuracy,accuracy_loss\n\
             0,0.000000,0.000000,0.900000,0.000000\n\
             1,0.050000,0.333333,0.850000,0.050000\n"
        );
        let back = PruningCurve::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points[1].param_prune_fraction, 0.333333);
    }

    fn random_net(seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = match rng.random_range(0..3) {
            0 => ArchSpec::vgg(11),
            1 => ArchSpec::resnet(11),
            _ => ArchSpec::mobilenet(0.25),
        };
        let spec = spec
            .with_input([1, rng.random_range(4..10), rng.random_range(4..10)])
            .with_base_channels(rng.random_range(2..6))
            .with_classes(3);
        build_network(&spec, seed).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_victims_keep_network_runnable(seed in 0u64..1000, take in 0usize..64) {
            let net = random_net(seed);
            let ranking = rank_channels(&net, &PruneStrategy::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let victims: Vec<ChannelRef> = ranking
                .iter()
                .filter(|_| rng.random_bool(0.5))
                .take(take)
                .copied()
                .collect();
            let pruned = prune_channels(&net, &victims).unwrap();
            let logits = pruned.forward_eval(&batch(&net, 2, seed)).unwrap();
            prop_assert_eq!(logits.shape(), &[2, 3]);
            if !victims.is_empty() {
                prop_assert!(count_parameters(&pruned).trainable < count_parameters(&net).trainable);
            }
        }

        #[test]
        fn global_ranking_is_nondecreasing(seed in 0u64..1000) {
            let mut net = random_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for ord in 0..net.batch_norm_count() {
                for g in &mut net.batch_norm_mut(ord).unwrap().gamma {
                    *g = rng.random_range(-1.0..1.0);
                }
            }
            let r = rank_channels(&net, &PruneStrategy::default());
            prop_assert!(r.windows(2).all(|w| w[0].gamma_value.abs() <= w[1].gamma_value.abs()));
        }
    }
}
