//! Builders for the three architecture families: VGG-style plain stacks,
//! ResNet-style residual stacks and MobileNet-style depthwise-separable
//! stacks, all at a configurable (desk-scale by default) channel budget.
//!
//! The stage templates are tabulated in `docs/architectures.md`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvKind, Network, NetworkBuilder, Op};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vgg,
    Resnet,
    Mobilenet,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Vgg => "vgg",
            Family::Resnet => "resnet",
            Family::Mobilenet => "mobilenet",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg" => Ok(Family::Vgg),
            "resnet" => Ok(Family::Resnet),
            "mobilenet" => Ok(Family::Mobilenet),
            other => Err(Error::InvalidSpec(format!("unknown family {other:?}"))),
        }
    }
}

pub const VGG_DEPTHS: [usize; 4] = [11, 13, 16, 19];
pub const RESNET_DEPTHS: [usize; 4] = [11, 20, 29, 38];
pub const MOBILENET_WIDTHS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    /// VGG and ResNet only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// MobileNet only, in `(0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_multiplier: Option<f64>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// `(channels, mel bands, frames)`.
    #[serde(default = "default_input")]
    pub input_shape: [usize; 3],
    #[serde(default = "default_base")]
    pub base_channels: usize,
}

fn default_classes() -> usize {
    10
}

fn default_input() -> [usize; 3] {
    [1, 40, 128]
}

fn default_base() -> usize {
    16
}

impl ArchSpec {
    pub fn vgg(depth: usize) -> Self {
        Self::with_family(Family::Vgg, Some(depth), None)
    }

    pub fn resnet(depth: usize) -> Self {
        Self::with_family(Family::Resnet, Some(depth), None)
    }

    pub fn mobilenet(width_multiplier: f64) -> Self {
        Self::with_family(Family::Mobilenet, None, Some(width_multiplier))
    }

    fn with_family(family: Family, depth: Option<usize>, width_multiplier: Option<f64>) -> Self {
        Self {
            family,
            depth,
            width_multiplier,
            num_classes: default_classes(),
            input_shape: default_input(),
            base_channels: default_base(),
        }
    }

    pub fn with_input(mut self, input_shape: [usize; 3]) -> Self {
        self.input_shape = input_shape;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input extents must be positive, got {:?}", self.input_shape));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        match (self.family, self.depth, self.width_multiplier) {
            (Family::Vgg, Some(d), None) if d >= 8 => Ok(()),
            (Family::Resnet, Some(d), None) if d >= 8 => Ok(()),
            (Family::Mobilenet, None, Some(w)) if w > 0.0 && w <= 1.0 => Ok(()),
            (Family::Mobilenet, _, _) => bad(format!(
                "mobilenet needs width_multiplier in (0, 1] and no depth, got depth {:?}, width {:?}",
                self.depth, self.width_multiplier
            )),
            (family, _, _) => bad(format!(
                "{} needs depth >= 8 and no width_multiplier, got depth {:?}, width {:?}",
                family.as_str(),
                self.depth,
                self.width_multiplier
            )),
        }
    }

    /// Whether the variant is one of the four tabulated per family.
    pub fn is_standard(&self) -> bool {
        match self.family {
            Family::Vgg => self.depth.is_some_and(|d| VGG_DEPTHS.contains(&d)),
            Family::Resnet => self.depth.is_some_and(|d| RESNET_DEPTHS.contains(&d)),
            Family::Mobilenet => self
                .width_multiplier
                .is_some_and(|w| MOBILENET_WIDTHS.iter().any(|&s| (s - w).abs() < 1e-12)),
        }
    }

    /// Short label, e.g. `vgg11`, `resnet20`, `mobilenet0.50`.
    pub fn label(&self) -> String {
        match self.family {
            Family::Mobilenet => format!("mobilenet{:.2}", self.width_multiplier.unwrap_or(0.0)),
            f => format!("{}{}", f.as_str(), self.depth.unwrap_or(0)),
        }
    }

    /// `v1`..`v4` for standard variants, `custom` otherwise.
    pub fn variant(&self) -> String {
        let pos = match self.family {
            Family::Vgg => self.depth.and_then(|d| VGG_DEPTHS.iter().position(|&x| x == d)),
            Family::Resnet => self.depth.and_then(|d| RESNET_DEPTHS.iter().position(|&x| x == d)),
            Family::Mobilenet => self
                .width_multiplier
                .and_then(|w| MOBILENET_WIDTHS.iter().position(|&s| (s - w).abs() < 1e-12)),
        };
        pos.map_or_else(|| "custom".to_string(), |p| format!("v{}", p + 1))
    }
}

/// Convolutions per stage for a VGG of the given depth (conv count = depth − 3,
/// spread over five stages the way the classic 11/13/16/19 layouts are).
pub fn vgg_stage_convs(depth: usize) -> [usize; 5] {
    let mut stages = [1usize; 5];
    let extra = depth.saturating_sub(3).saturating_sub(5);
    let first_pass = [2, 3, 4, 0, 1];
    for i in 0..extra {
        let stage = if i < first_pass.len() {
            first_pass[i]
        } else {
            2 + (i - first_pass.len()) % 3
        };
        stages[stage] += 1;
    }
    stages
}

/// Per-stage widths as multiples of the base channel count.
pub const VGG_STAGE_WIDTHS: [usize; 5] = [1, 2, 4, 4, 4];

/// Basic blocks per stage (three stages, widths 1×, 2×, 4× base).
pub fn resnet_blocks(depth: usize) -> usize {
    match depth {
        11 => 1,
        20 => 3,
        29 => 4,
        38 => 6,
        d => ((d.saturating_sub(2)) / 6).max(1),
    }
}

/// Depthwise-separable blocks as `(width multiple of base, stride)`.
pub const MOBILENET_BLOCKS: [(usize, usize); 5] = [(1, 1), (2, 2), (2, 1), (4, 2), (4, 1)];

/// `ceil(channels · multiplier)`, at least 1.
pub fn scaled_width(channels: usize, multiplier: f64) -> usize {
    ((channels as f64 * multiplier - 1e-9).ceil() as usize).max(1)
}

/// Builds a freshly initialized network: He-scaled Gaussian conv and dense
/// weights, BN γ = 0.5 and β = 0, no dropout. Deterministic in `seed`.
pub fn build_network<F: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Network<F>> {
    spec.validate()?;
    let mut b = NetworkBuilder::<F>::new(spec.input_shape, spec.num_classes, seed);
    let base = spec.base_channels;
    let mut x = NetworkBuilder::<F>::INPUT;
    match spec.family {
        Family::Vgg => {
            let convs = vgg_stage_convs(spec.depth.expect("validated"));
            for (stage, &n) in convs.iter().enumerate() {
                for _ in 0..n {
                    x = b.conv_bn(x, base * VGG_STAGE_WIDTHS[stage], 3, 1, 1)?;
                    x = b.relu(x)?;
                }
                x = b.max_pool(x)?;
            }
        }
        Family::Resnet => {
            let blocks = resnet_blocks(spec.depth.expect("validated"));
            x = b.conv_bn(x, base, 3, 1, 1)?;
            x = b.relu(x)?;
            for stage in 0..3 {
                let width = base << stage;
                for block in 0..blocks {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let h = b.conv_bn(x, width, 3, stride, 1)?;
                    let h = b.relu(h)?;
                    let h = b.conv_bn(h, width, 3, 1, 1)?;
                    let shortcut = if stride != 1 || b.channels(x) != width {
                        b.conv_bn(x, width, 1, stride, 0)?
                    } else {
                        x
                    };
                    let sum = b.add(h, shortcut)?;
                    x = b.relu(sum)?;
                }
            }
        }
        Family::Mobilenet => {
            let w = spec.width_multiplier.expect("validated");
            x = b.conv_bn(x, scaled_width(base, w), 3, 1, 1)?;
            x = b.relu(x)?;
            for &(mult, stride) in &MOBILENET_BLOCKS {
                x = b.depthwise_bn(x, 3, stride, 1)?;
                x = b.relu(x)?;
                x = b.conv_bn(x, scaled_width(base * mult, w), 1, 1, 0)?;
                x = b.relu(x)?;
            }
        }
    }
    let pooled = b.global_avg_pool(x)?;
    b.dense(pooled, spec.num_classes)?;
    b.finish()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Conv and dense weights, dense biases, BN γ and β.
    pub trainable: usize,
    /// BN running mean and variance.
    pub buffers: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.buffers
    }
}

pub fn count_parameters<F: Scalar>(net: &Network<F>) -> ParamCount {
    let mut count = ParamCount::default();
    for node in net.nodes() {
        match &node.op {
            Op::Conv(c) => {
                let per_group = match c.kind {
                    ConvKind::Standard => c.in_channels,
                    ConvKind::Depthwise => 1,
                };
                count.trainable += c.kernel * c.kernel * per_group * c.out_channels;
            }
            Op::BatchNorm(bn) => {
                count.trainable += 2 * bn.channels();
                count.buffers += 2 * bn.channels();
            }
            Op::Dense(d) => count.trainable += d.in_features * d.out_features + d.out_features,
            _ => {}
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NodeShape;

    /// Conv output channel counts in graph order.
    fn conv_widths(net: &Network<f32>) -> Vec<usize> {
        net.nodes()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Conv(c) => Some(c.out_channels),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn vgg_templates_match_documented_table() {
        assert_eq!(vgg_stage_convs(11), [1, 1, 2, 2, 2]);
        assert_eq!(vgg_stage_convs(13), [2, 2, 2, 2, 2]);
        assert_eq!(vgg_stage_convs(16), [2, 2, 3, 3, 3]);
        assert_eq!(vgg_stage_convs(19), [2, 2, 4, 4, 4]);
        let net = build_network::<f32>(&ArchSpec::vgg(11), 0).unwrap();
        assert_eq!(conv_widths(&net), vec![16, 32, 64, 64, 64, 64, 64, 64]);
        assert_eq!(net.batch_norm_count(), 8);
        for d in VGG_DEPTHS {
            let net = build_network::<f32>(&ArchSpec::vgg(d), 0).unwrap();
            assert_eq!(conv_widths(&net).len(), d - 3);
        }
    }

    #[test]
    fn resnet_templates() {
        for (d, blocks) in [(11, 1), (20, 3), (29, 4), (38, 6)] {
            let net = build_network::<f32>(&ArchSpec::resnet(d), 0).unwrap();
            let adds = net.nodes().iter().filter(|n| matches!(n.op, Op::Add)).count();
            assert_eq!(adds, 3 * blocks);
            // stem + two per block + two projection shortcuts
            assert_eq!(conv_widths(&net).len(), 1 + 6 * blocks + 2);
        }
    }

    #[test]
    fn mobilenet_half_width_halves_every_layer() {
        let full = build_network::<f32>(&ArchSpec::mobilenet(1.0), 0).unwrap();
        let half = build_network::<f32>(&ArchSpec::mobilenet(0.5), 0).unwrap();
        let (f, h) = (conv_widths(&full), conv_widths(&half));
        assert_eq!(f.len(), h.len());
        for (a, b) in f.iter().zip(&h) {
            assert_eq!(*b, a.div_ceil(2).max(1));
        }
    }

    #[test]
    fn mobilenet_count_monotone_in_width() {
        let counts: Vec<usize> = MOBILENET_WIDTHS
            .iter()
            .map(|&w| count_parameters(&build_network::<f32>(&ArchSpec::mobilenet(w), 0).unwrap()).trainable)
            .collect();
        assert!(counts.windows(2).all(|p| p[0] < p[1]), "{counts:?}");
    }

    #[test]
    fn fresh_networks_have_gamma_half_and_are_deterministic() {
        for spec in [ArchSpec::vgg(13), ArchSpec::resnet(11), ArchSpec::mobilenet(0.25)] {
            let a = build_network::<f32>(&spec, 9).unwrap();
            let b = build_network::<f32>(&spec, 9).unwrap();
            assert_eq!(a, b);
            for (_, _, bn) in a.batch_norms() {
                assert!(bn.gamma.iter().all(|&g| g == 0.5));
                assert!(bn.beta.iter().all(|&v| v == 0.0));
            }
            let c = build_network::<f32>(&spec, 10).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn single_conv_count() {
        let mut b = NetworkBuilder::<f32>::new([2, 5, 5], 2, 0);
        let x = b.conv_bn(0, 4, 3, 1, 1).unwrap();
        let x = b.global_avg_pool(x).unwrap();
        b.dense(x, 2).unwrap();
        let net = b.finish().unwrap();
        let count = count_parameters(&net);
        // 72 conv weights, 8 trainable BN parameters, 4·2 + 2 dense.
        assert_eq!(count.trainable, 72 + 8 + 10);
        assert_eq!(count.buffers, 8);
    }

    #[test]
    fn depthwise_count() {
        let mut b = NetworkBuilder::<f32>::new([8, 5, 5], 2, 0);
        let x = b.depthwise_bn(0, 3, 1, 1).unwrap();
        let x = b.global_avg_pool(x).unwrap();
        b.dense(x, 2).unwrap();
        let net = b.finish().unwrap();
        assert_eq!(count_parameters(&net).trainable, 72 + 16 + 18);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ArchSpec::vgg(11);
        s.width_multiplier = Some(0.5);
        assert!(build_network::<f32>(&s, 0).is_err());
        assert!(build_network::<f32>(&ArchSpec::mobilenet(1.5), 0).is_err());
        let mut s = ArchSpec::mobilenet(0.5);
        s.depth = Some(11);
        assert!(s.validate().is_err());
        assert!(ArchSpec::vgg(11).with_classes(1).validate().is_err());
        assert!(!ArchSpec::vgg(12).is_standard());
        assert!(ArchSpec::vgg(12).validate().is_ok());
    }

    #[test]
    fn every_conv_is_paired_with_bn() {
        for spec in [ArchSpec::vgg(19), ArchSpec::resnet(20), ArchSpec::mobilenet(0.75)] {
            let net = build_network::<f32>(&spec, 1).unwrap();
            let shapes = net.infer_shapes().unwrap();
            for (i, n) in net.nodes().iter().enumerate() {
                if let Op::Conv(c) = &n.op {
                    match &net.nodes()[i + 1].op {
                        Op::BatchNorm(bn) => assert_eq!(bn.channels(), c.out_channels),
                        other => panic!("conv {i} followed by {}", other.name()),
                    }
                }
            }
            assert_eq!(*shapes.last().unwrap(), NodeShape::Flat(10));
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = ArchSpec::mobilenet(0.75).with_input([1, 40, 64]);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(!json.contains("depth"));
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let parsed: ArchSpec = serde_json::from_str(r#"{"family":"vgg","depth":16}"#).unwrap();
        assert_eq!(parsed, ArchSpec::vgg(16));
    }
}
