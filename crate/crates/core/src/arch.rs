//! Architecture descriptions and the graph builders for U-Net, ResUnet and
//! U-Net3+, with or without dual skip connections.
//!
//! An [`ArchSpec`] is a small value describing a network. [`build`] expands
//! it into a [`Graph`]: a topologically ordered list of layer nodes whose
//! parameters are counted without being allocated.
//!
//! Levels are numbered `1..=depth` from the full-resolution encoder level
//! down to the bottleneck. A level in [`ArchSpec::dual_scales`] feeds two
//! skip maps to its decoder instead of one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::config::FlatConfig;
use crate::error::{Error, Result};

/// The base architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    UNet,
    ResUNet,
    UNet3Plus,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::UNet, Family::ResUNet, Family::UNet3Plus];

    pub fn name(self) -> &'static str {
        match self {
            Family::UNet => "unet",
            Family::ResUNet => "resunet",
            Family::UNet3Plus => "unet3plus",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "unet" => Ok(Family::UNet),
            "resunet" => Ok(Family::ResUNet),
            "unet3plus" | "unet3+" => Ok(Family::UNet3Plus),
            _ => Err(Error::Arch(format!(
                "unknown family `{s}` (expected unet, resunet or unet3plus)"
            ))),
        }
    }
}

/// Which skip levels get a second skip connection.
///
/// With `k = depth - 1` skip levels, `Small` covers the lower half
/// `1..=k/2` (the high-resolution levels), `Large` the upper half and `All`
/// every level. For depth 5 that is S = {1, 2}, L = {3, 4}, A = {1, 2, 3, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    Large,
    Small,
    All,
    Scales(BTreeSet<usize>),
}

impl Variant {
    /// The dual-skip level set for a network of the given depth.
    pub fn resolve(&self, depth: usize) -> Result<BTreeSet<usize>> {
        if depth < 2 {
            return Err(Error::Arch(format!("depth must be at least 2, got {depth}")));
        }
        let k = depth - 1;
        let set: BTreeSet<usize> = match self {
            Variant::Vanilla => BTreeSet::new(),
            Variant::Small => (1..=k / 2).collect(),
            Variant::Large => (k / 2 + 1..=k).collect(),
            Variant::All => (1..=k).collect(),
            Variant::Scales(s) => s.clone(),
        };
        if *self != Variant::Vanilla && set.is_empty() {
            return Err(Error::Arch(format!("variant {self} selects no levels at depth {depth}")));
        }
        if let Some(&bad) = set.iter().find(|&&s| s == 0 || s > k) {
            return Err(Error::Arch(format!(
                "dual-skip level {bad} is outside 1..={k} for depth {depth}"
            )));
        }
        Ok(set)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Vanilla => f.write_str("vanilla"),
            Variant::Large => f.write_str("L"),
            Variant::Small => f.write_str("S"),
            Variant::All => f.write_str("A"),
            Variant::Scales(s) => {
                let items: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                write!(f, "scale={}", items.join(","))
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "none" => Ok(Variant::Vanilla),
            "L" | "l" => Ok(Variant::Large),
            "S" | "s" => Ok(Variant::Small),
            "A" | "a" => Ok(Variant::All),
            _ => {
                let list = s
                    .strip_prefix("scale=")
                    .ok_or_else(|| Error::Arch(format!("unknown variant `{s}` (expected vanilla, L, S, A or scale=<n>)")))?;
                let scales = list
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Arch(format!("bad scale `{v}`"))))
                    .collect::<Result<BTreeSet<_>>>()?;
                Ok(Variant::Scales(scales))
            }
        }
    }
}

/// A complete, serialisable description of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    /// Number of encoder levels including the bottleneck.
    pub depth: usize,
    /// Filters per encoder level, `depth` entries.
    pub filters: Vec<usize>,
    /// Levels (`1..depth`) with a dual skip connection.
    pub dual_scales: BTreeSet<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Dropout rate applied once, at the bottleneck.
    pub dropout: f32,
    /// Adds batch norm after the first convolution of each U-Net-style
    /// encoder level (off by default: only the second one has it).
    pub bn_on_first_conv: bool,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    /// Width every source map is projected to in a U-Net3+ decoder.
    pub unified_channels: usize,
}

impl ArchSpec {
    /// The standard configuration: filters `64·2^i`, RGB input, one sigmoid
    /// output channel.
    pub fn new(family: Family, depth: usize, variant: &Variant) -> Result<Self> {
        let spec = ArchSpec {
            family,
            depth,
            filters: doubling_filters(64, depth),
            dual_scales: variant.resolve(depth)?,
            in_channels: 3,
            out_channels: 1,
            dropout: 0.5,
            bn_on_first_conv: false,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
            unified_channels: 64,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Replaces the filter schedule with `base·2^i`; U-Net3+ decoder widths
    /// follow `base`.
    pub fn with_base_filters(mut self, base: usize) -> Self {
        self.filters = doubling_filters(base, self.depth);
        self.unified_channels = base;
        self
    }

    pub fn base_filters(&self) -> usize {
        self.filters[0]
    }

    /// Divisor every input height and width must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn is_dual(&self, level: usize) -> bool {
        self.dual_scales.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Arch(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.depth > 16 {
            return Err(Error::Arch(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.filters.len() != self.depth {
            return Err(Error::Arch(format!(
                "{} filter widths given for depth {}",
                self.filters.len(),
                self.depth
            )));
        }
        if self.filters.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Arch("channel counts must be positive".into()));
        }
        if self.family == Family::UNet3Plus && self.unified_channels == 0 {
            return Err(Error::Arch("unified_channels must be positive".into()));
        }
        if let Some(&bad) = self.dual_scales.iter().find(|&&s| s == 0 || s >= self.depth) {
            return Err(Error::Arch(format!(
                "dual-skip level {bad} is outside 1..={}",
                self.depth - 1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Arch(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Arch("batch-norm eps must be positive and momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Flat text form, parseable by [`ArchSpec::from_config`].
    pub fn to_config(&self) -> FlatConfig {
        let list = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut c = FlatConfig::new();
        c.set("family", self.family.name());
        c.set("depth", self.depth.to_string());
        c.set("filters", list(&mut self.filters.iter().copied()));
        c.set("dual_scales", list(&mut self.dual_scales.iter().copied()));
        c.set("in_channels", self.in_channels.to_string());
        c.set("out_channels", self.out_channels.to_string());
        c.set("dropout", self.dropout.to_string());
        c.set("bn_on_first_conv", self.bn_on_first_conv.to_string());
        c.set("bn_eps", self.bn_eps.to_string());
        c.set("bn_momentum", self.bn_momentum.to_string());
        c.set("unified_channels", self.unified_channels.to_string());
        c
    }

    pub const CONFIG_KEYS: &'static [&'static str] = &[
        "family",
        "depth",
        "filters",
        "base_filters",
        "dual_scales",
        "variant",
        "in_channels",
        "out_channels",
        "dropout",
        "bn_on_first_conv",
        "bn_eps",
        "bn_momentum",
        "unified_channels",
    ];

    /// Reads the architecture keys of a flat config. `variant` and
    /// `base_filters` are accepted as shorthands for `dual_scales` and
    /// `filters`; other keys are ignored so the same file can hold run
    /// settings.
    pub fn from_config(c: &FlatConfig) -> Result<Self> {
        let family: Family = c
            .get("family")
            .ok_or_else(|| Error::Config("missing key `family`".into()))?
            .parse()?;
        let depth = c.get_parsed::<usize>("depth")?.unwrap_or(5);
        let variant = match (c.get("variant"), c.get_list::<usize>("dual_scales")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `variant` or `dual_scales`, not both".into()))
            }
            (Some(v), None) => v.parse()?,
            (None, Some(s)) if s.is_empty() => Variant::Vanilla,
            (None, Some(s)) => Variant::Scales(s.into_iter().collect()),
            (None, None) => Variant::Vanilla,
        };
        let mut spec = ArchSpec::new(family, depth, &variant)?;
        match (c.get_list::<usize>("filters")?, c.get_parsed::<usize>("base_filters")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `filters` or `base_filters`, not both".into()))
            }
            (Some(f), None) => spec.filters = f,
            (None, Some(b)) => spec = spec.with_base_filters(b),
            (None, None) => {}
        }
        if let Some(v) = c.get_parsed("in_channels")? {
            spec.in_channels = v;
        }
        if let Some(v) = c.get_parsed("out_channels")? {
            spec.out_channels = v;
        }
        if let Some(v) = c.get_parsed("dropout")? {
            spec.dropout = v;
        }
        if let Some(v) = c.get_parsed("bn_on_first_conv")? {
            spec.bn_on_first_conv = v;
        }
        if let Some(v) = c.get_parsed("bn_eps")? {
            spec.bn_eps = v;
        }
        if let Some(v) = c.get_parsed("bn_momentum")? {
            spec.bn_momentum = v;
        }
        if let Some(v) = c.get_parsed("unified_channels")? {
            spec.unified_channels = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Short human label such as `DS-UNet(L)` or `ResUnet`.
    pub fn label(&self) -> String {
        let base = match self.family {
            Family::UNet => "UNet",
            Family::ResUNet => "ResUnet",
            Family::UNet3Plus => "UNet3+",
        };
        if self.dual_scales.is_empty() {
            return base.to_string();
        }
        let levels: Vec<String> = self.dual_scales.iter().map(|s| s.to_string()).collect();
        format!("DS-{base}{{{}}}", levels.join(","))
    }
}

fn doubling_filters(base: usize, depth: usize) -> Vec<usize> {
    (0..depth).map(|i| base << i).collect()
}

/// Index of a node within its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// The structural part of the network a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Input,
    Encoder(usize),
    Bridge,
    Decoder(usize),
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    /// Stride-1 "same" convolution.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    /// Transposed convolution with stride equal to the kernel size.
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    MaxPool {
        factor: usize,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    Add,
    Dropout {
        rate: f32,
    },
}

/// Parameter totals. Batch-norm running statistics are stored with the
/// model and counted as non-trainable parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }

    /// Total in millions.
    pub fn millions(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            trainable: self.trainable + o.trainable,
            non_trainable: self.non_trainable + o.non_trainable,
        }
    }
}

impl LayerKind {
    pub fn params(&self) -> ParamCount {
        let trainable = |n| ParamCount {
            trainable: n,
            non_trainable: 0,
        };
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
            }
            | LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => trainable(in_channels * out_channels * kernel * kernel + if bias { out_channels } else { 0 }),
            LayerKind::BatchNorm { channels } => ParamCount {
                trainable: 2 * channels,
                non_trainable: 2 * channels,
            },
            _ => ParamCount::default(),
        }
    }

    fn type_name(&self) -> String {
        match self {
            LayerKind::Input { .. } => "Input".into(),
            LayerKind::Conv { kernel, .. } => format!("Conv{kernel}x{kernel}"),
            LayerKind::ConvTranspose { kernel, .. } => format!("ConvT{kernel}x{kernel}"),
            LayerKind::BatchNorm { .. } => "BatchNorm".into(),
            LayerKind::Relu => "ReLU".into(),
            LayerKind::Sigmoid => "Sigmoid".into(),
            LayerKind::MaxPool { factor } => format!("MaxPool/{factor}"),
            LayerKind::Upsample { factor } => format!("Upsample*{factor}"),
            LayerKind::Concat => "Concat".into(),
            LayerKind::Add => "Add".into(),
            LayerKind::Dropout { rate } => format!("Dropout({rate})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub block: Block,
    /// Output channels.
    pub channels: usize,
    /// Output downsampling factor relative to the network input.
    pub scale: usize,
}

/// A built network: nodes in topological order, input first, output last.
#[derive(Clone, Debug)]
pub struct Graph {
    spec: ArchSpec,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn output(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn param_count(&self) -> ParamCount {
        self.nodes
            .iter()
            .map(|n| n.kind.params())
            .fold(ParamCount::default(), |a, b| a + b)
    }

    /// Number of edges leading from nodes in `from` to nodes in `to`.
    pub fn edges_between(&self, from: Block, to: Block) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.block == to)
            .flat_map(|n| &n.inputs)
            .filter(|i| self.nodes[i.0].block == from)
            .count()
    }

    /// Checks that an `h`×`w` input can pass through every pooling stage.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InputSize {
                height: h,
                width: w,
                factor: m,
            });
        }
        Ok(())
    }

    /// Per-layer table (name, type, output shape, parameters) for a batch of
    /// one `h`×`w` image, followed by the totals.
    pub fn summarize(&self, h: usize, w: usize) -> Result<String> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        self.check_input(h, w)?;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:<14} {:<22} {:>12}\n",
            "layer", "type", "output shape", "params"
        ));
        for n in &self.nodes {
            let shape = format!("[1, {}, {}, {}]", n.channels, h / n.scale, w / n.scale);
            out.push_str(&format!(
                "{:<28} {:<14} {:<22} {:>12}\n",
                n.name,
                n.kind.type_name(),
                shape,
                group_thousands(n.kind.params().total())
            ));
        }
        let c = self.param_count();
        out.push_str(&format!(
            "total parameters: {} ({:.3} M)\ntrainable: {}  non-trainable: {}\n",
            group_thousands(c.total()),
            c.millions(),
            group_thousands(c.trainable),
            group_thousands(c.non_trainable)
        ));
        Ok(out)
    }
}

pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Incremental graph construction with shape checking.
///
/// The first node must be an input. Every other node's channel count and
/// scale are derived from its inputs, and inconsistent wiring is an error.
pub struct GraphBuilder {
    spec: ArchSpec,
    nodes: Vec<Node>,
    block: Block,
}

impl GraphBuilder {
    pub fn new(spec: ArchSpec) -> Self {
        GraphBuilder {
            spec,
            nodes: Vec::new(),
            block: Block::Input,
        }
    }

    /// Sets the block tag for subsequently added nodes.
    pub fn block(&mut self, block: Block) -> &mut Self {
        self.block = block;
        self
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        let fail = |msg: String| Error::Arch(format!("node `{name}`: {msg}"));
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(fail(format!("input {} does not exist yet", bad.0)));
        }
        let ins: Vec<&Node> = inputs.iter().map(|i| &self.nodes[i.0]).collect();
        let single = || -> Result<&Node> {
            match ins.as_slice() {
                [one] => Ok(one),
                _ => Err(fail(format!("expects one input, got {}", ins.len()))),
            }
        };
        let (channels, scale) = match &kind {
            LayerKind::Input { channels } => {
                if !self.nodes.is_empty() || !inputs.is_empty() {
                    return Err(fail("an input must be the first node and take no inputs".into()));
                }
                (*channels, 1)
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let x = single()?;
                if x.channels != *in_channels {
                    return Err(fail(format!("expects {in_channels} channels, input has {}", x.channels)));
                }
                if kernel % 2 == 0 {
                    return Err(fail("same-padding convolutions need an odd kernel".into()));
                }
                (*out_channels, x.scale)
            }
            LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let x = single()?;
                if x.channels != *in_channels {
                    return Err(fail(format!("expects {in_channels} channels, input has {}", x.channels)));
                }
                if *kernel == 0 || x.scale % kernel != 0 {
                    return Err(fail(format!("cannot upsample scale {} by {kernel}", x.scale)));
                }
                (*out_channels, x.scale / kernel)
            }
            LayerKind::BatchNorm { channels } => {
                let x = single()?;
                if x.channels != *channels {
                    return Err(fail(format!("expects {channels} channels, input has {}", x.channels)));
                }
                (x.channels, x.scale)
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Dropout { .. } => {
                let x = single()?;
                (x.channels, x.scale)
            }
            LayerKind::MaxPool { factor } => {
                let x = single()?;
                if *factor == 0 {
                    return Err(fail("pool factor must be positive".into()));
                }
                (x.channels, x.scale * factor)
            }
            LayerKind::Upsample { factor } => {
                let x = single()?;
                if *factor == 0 || x.scale % factor != 0 {
                    return Err(fail(format!("cannot upsample scale {} by {factor}", x.scale)));
                }
                (x.channels, x.scale / factor)
            }
            LayerKind::Concat => {
                let first = ins.first().ok_or_else(|| fail("concat needs inputs".into()))?;
                if ins.iter().any(|n| n.scale != first.scale) {
                    return Err(fail("concat inputs have different resolutions".into()));
                }
                (ins.iter().map(|n| n.channels).sum(), first.scale)
            }
            LayerKind::Add => match ins.as_slice() {
                [a, b] if a.channels == b.channels && a.scale == b.scale => (a.channels, a.scale),
                [_, _] => return Err(fail("add inputs differ in shape".into())),
                _ => return Err(fail("add takes exactly two inputs".into())),
            },
        };
        if self.nodes.is_empty() && !matches!(kind, LayerKind::Input { .. }) {
            return Err(fail("the first node must be an input".into()));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(fail("duplicate node name".into()));
        }
        self.nodes.push(Node {
            name,
            kind,
            inputs: inputs.to_vec(),
            block: self.block,
            channels,
            scale,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn channels(&self, id: NodeId) -> usize {
        self.nodes[id.0].channels
    }

    pub fn input(&mut self, channels: usize) -> Result<NodeId> {
        self.add("input", LayerKind::Input { channels }, &[])
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out: usize, kernel: usize) -> Result<NodeId> {
        let kind = LayerKind::Conv {
            in_channels: self.channels(x),
            out_channels: out,
            kernel,
            bias: true,
        };
        self.add(name, kind, &[x])
    }

    pub fn conv_transpose(&mut self, name: &str, x: NodeId, out: usize, kernel: usize) -> Result<NodeId> {
        let kind = LayerKind::ConvTranspose {
            in_channels: self.channels(x),
            out_channels: out,
            kernel,
            bias: true,
        };
        self.add(name, kind, &[x])
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let channels = self.channels(x);
        self.add(name, LayerKind::BatchNorm { channels }, &[x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.add(name, LayerKind::Relu, &[x])
    }

    pub fn max_pool(&mut self, name: &str, x: NodeId, factor: usize) -> Result<NodeId> {
        self.add(name, LayerKind::MaxPool { factor }, &[x])
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize) -> Result<NodeId> {
        self.add(name, LayerKind::Upsample { factor }, &[x])
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        self.add(name, LayerKind::Concat, xs)
    }

    pub fn sum(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add(name, LayerKind::Add, &[a, b])
    }

    /// conv → [BN] → ReLU
    fn conv_unit(&mut self, name: &str, x: NodeId, out: usize, kernel: usize, bn: bool) -> Result<NodeId> {
        let mut y = self.conv(&format!("{name}.conv"), x, out, kernel)?;
        if bn {
            y = self.batch_norm(&format!("{name}.bn"), y)?;
        }
        self.relu(&format!("{name}.relu"), y)
    }

    /// Pre-activation unit: BN → ReLU → conv3×3.
    fn preact_unit(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let y = self.batch_norm(&format!("{name}.bn"), x)?;
        let y = self.relu(&format!("{name}.relu"), y)?;
        self.conv(&format!("{name}.conv"), y, out, 3)
    }

    /// conv1×1 → BN shortcut.
    fn projection(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let y = self.conv(&format!("{name}.conv"), x, out, 1)?;
        self.batch_norm(&format!("{name}.bn"), y)
    }

    fn dropout(&mut self, name: &str, x: NodeId, rate: f32) -> Result<NodeId> {
        if rate > 0.0 {
            self.add(name, LayerKind::Dropout { rate }, &[x])
        } else {
            Ok(x)
        }
    }

    pub fn finish(self) -> Graph {
        Graph {
            spec: self.spec,
            nodes: self.nodes,
        }
    }
}

/// Builds the graph described by `spec`.
pub fn build(spec: &ArchSpec) -> Result<Graph> {
    spec.validate()?;
    match spec.family {
        Family::UNet => build_unet(spec),
        Family::ResUNet => build_resunet(spec),
        Family::UNet3Plus => build_unet3plus(spec),
    }
}

/// U-Net-style encoder shared by U-Net and U-Net3+.
///
/// Each level is conv3×3-ReLU followed by conv3×3-BN-ReLU (the first skip
/// map); a dual level adds a further conv3×3-BN-ReLU whose output is the
/// second skip map. Pooling always consumes the first skip map, and the
/// bottleneck output passes through dropout.
///
/// Returns the skip maps of each level (index 0 is level 1) and the
/// bottleneck output.
fn plain_encoder(b: &mut GraphBuilder, spec: &ArchSpec, input: NodeId) -> Result<(Vec<Vec<NodeId>>, NodeId)> {
    let mut skips = Vec::new();
    let mut x = input;
    for level in 1..=spec.depth {
        b.block(Block::Encoder(level));
        let f = spec.filters[level - 1];
        if level > 1 {
            x = b.max_pool(&format!("enc{level}.pool"), x, 2)?;
        }
        let c1 = b.conv_unit(&format!("enc{level}.c1"), x, f, 3, spec.bn_on_first_conv)?;
        let g1 = b.conv_unit(&format!("enc{level}.g1"), c1, f, 3, true)?;
        if level == spec.depth {
            let out = b.dropout(&format!("enc{level}.dropout"), g1, spec.dropout)?;
            skips.push(vec![out]);
            return Ok((skips, out));
        }
        let mut maps = vec![g1];
        if spec.is_dual(level) {
            maps.push(b.conv_unit(&format!("enc{level}.g2"), g1, f, 3, true)?);
        }
        skips.push(maps);
        x = g1;
    }
    unreachable!("depth is at least 2")
}

fn build_unet(spec: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new(spec.clone());
    let input = b.input(spec.in_channels)?;
    let (skips, mut x) = plain_encoder(&mut b, spec, input)?;
    for level in (1..spec.depth).rev() {
        b.block(Block::Decoder(level));
        let f = spec.filters[level - 1];
        let up = b.conv_transpose(&format!("dec{level}.up"), x, f, 2)?;
        let up = b.relu(&format!("dec{level}.up.relu"), up)?;
        let mut parts = vec![up];
        parts.extend(&skips[level - 1]);
        let cat = b.concat(&format!("dec{level}.cat"), &parts)?;
        let d1 = b.conv_unit(&format!("dec{level}.d1"), cat, f, 3, false)?;
        x = b.conv_unit(&format!("dec{level}.d2"), d1, f, 3, false)?;
    }
    b.block(Block::Head);
    let h = b.conv_unit("head.c1", x, 2, 3, false)?;
    let out = b.conv("head.out", h, spec.out_channels, 1)?;
    b.add("head.sigmoid", LayerKind::Sigmoid, &[out])?;
    Ok(b.finish())
}

/// ResUnet with pre-activation residual units.
///
/// Encoder level: two BN-ReLU-conv units (the very first conv sees the raw
/// input) plus a conv1×1-BN projection of the level input, summed into the
/// first skip map. A dual level adds a third unit on that sum and a second
/// projection of the level input, summed into the second skip map. A bridge
/// of two units follows the deepest level. Decoder levels upsample
/// bilinearly, concatenate the skip maps and apply a residual block of
/// width twice the encoder width at that level.
fn build_resunet(spec: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new(spec.clone());
    let input = b.input(spec.in_channels)?;
    let mut skips: Vec<Vec<NodeId>> = Vec::new();
    let mut x = input;
    for level in 1..=spec.depth {
        b.block(Block::Encoder(level));
        let f = spec.filters[level - 1];
        let block_in = if level > 1 {
            b.max_pool(&format!("enc{level}.pool"), x, 2)?
        } else {
            x
        };
        let u1 = if level == 1 {
            b.conv("enc1.u1.conv", block_in, f, 3)?
        } else {
            b.preact_unit(&format!("enc{level}.u1"), block_in, f)?
        };
        let u2 = b.preact_unit(&format!("enc{level}.u2"), u1, f)?;
        let r1 = b.projection(&format!("enc{level}.r1"), block_in, f)?;
        let s1 = b.sum(&format!("enc{level}.s1"), u2, r1)?;
        let mut maps = vec![s1];
        if level < spec.depth && spec.is_dual(level) {
            let u3 = b.preact_unit(&format!("enc{level}.u3"), s1, f)?;
            let r2 = b.projection(&format!("enc{level}.r2"), block_in, f)?;
            maps.push(b.sum(&format!("enc{level}.s2"), u3, r2)?);
        }
        skips.push(maps);
        x = s1;
    }
    b.block(Block::Bridge);
    let f = spec.filters[spec.depth - 1];
    let y = b.preact_unit("bridge.u1", x, f)?;
    let y = b.preact_unit("bridge.u2", y, f)?;
    x = b.dropout("bridge.dropout", y, spec.dropout)?;
    for level in (1..spec.depth).rev() {
        b.block(Block::Decoder(level));
        let w = 2 * spec.filters[level - 1];
        let up = b.upsample(&format!("dec{level}.up"), x, 2)?;
        let mut parts = vec![up];
        parts.extend(&skips[level - 1]);
        let cat = b.concat(&format!("dec{level}.cat"), &parts)?;
        let u1 = b.preact_unit(&format!("dec{level}.u1"), cat, w)?;
        let u2 = b.preact_unit(&format!("dec{level}.u2"), u1, w)?;
        let r = b.projection(&format!("dec{level}.r"), cat, w)?;
        x = b.sum(&format!("dec{level}.s"), u2, r)?;
    }
    b.block(Block::Head);
    let out = b.conv("head.out", x, spec.out_channels, 1)?;
    b.add("head.sigmoid", LayerKind::Sigmoid, &[out])?;
    Ok(b.finish())
}

/// U-Net3+ with full-scale skip connections.
///
/// Decoder level `n` projects every encoder skip map at levels `s ≤ n`
/// (max-pooled by `2^(n-s)`) and every deeper decoder output (bilinearly
/// upsampled; the bottleneck stands in for decoder level `depth`) to
/// `unified_channels` with conv3×3-BN-ReLU, concatenates them and fuses the
/// result with one more conv3×3-BN-ReLU. A dual encoder level therefore
/// contributes two unified maps to every decoder level it reaches.
fn build_unet3plus(spec: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new(spec.clone());
    let input = b.input(spec.in_channels)?;
    let (skips, bottleneck) = plain_encoder(&mut b, spec, input)?;
    let u = spec.unified_channels;
    let n_levels = spec.depth;
    // decoded[m - 1] is the output of decoder level m (bottleneck for m = depth).
    let mut decoded: Vec<Option<NodeId>> = vec![None; n_levels];
    decoded[n_levels - 1] = Some(bottleneck);
    for level in (1..n_levels).rev() {
        b.block(Block::Decoder(level));
        let mut parts = Vec::new();
        for s in 1..=level {
            for (k, &map) in skips[s - 1].iter().enumerate() {
                let tag = format!("dec{level}.from_enc{s}{}", if k == 0 { "" } else { "b" });
                let src = if s < level {
                    b.max_pool(&format!("{tag}.pool"), map, 1 << (level - s))?
                } else {
                    map
                };
                parts.push(b.conv_unit(&tag, src, u, 3, true)?);
            }
        }
        for m in level + 1..=n_levels {
            let tag = format!("dec{level}.from_dec{m}");
            let src = decoded[m - 1].expect("deeper levels are decoded first");
            let up = b.upsample(&format!("{tag}.up"), src, 1 << (m - level))?;
            parts.push(b.conv_unit(&tag, up, u, 3, true)?);
        }
        let cat = b.concat(&format!("dec{level}.cat"), &parts)?;
        let fused = b.conv_unit(&format!("dec{level}.fuse"), cat, u, 3, true)?;
        decoded[level - 1] = Some(fused);
    }
    b.block(Block::Head);
    let top = decoded[0].expect("level 1 decoded");
    let out = b.conv("head.out", top, spec.out_channels, 3)?;
    b.add("head.sigmoid", LayerKind::Sigmoid, &[out])?;
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, depth: usize, v: Variant) -> ArchSpec {
        ArchSpec::new(family, depth, &v).unwrap()
    }

    #[test]
    fn variant_level_sets() {
        let set = |v: Variant, d| v.resolve(d).unwrap().into_iter().collect::<Vec<_>>();
        assert_eq!(set(Variant::Large, 5), vec![3, 4]);
        assert_eq!(set(Variant::Small, 5), vec![1, 2]);
        assert_eq!(set(Variant::All, 5), vec![1, 2, 3, 4]);
        assert_eq!(set(Variant::Large, 3), vec![2]);
        assert_eq!(set(Variant::Small, 3), vec![1]);
        assert!(Variant::Small.resolve(2).is_err());
        assert!("scale=5".parse::<Variant>().unwrap().resolve(5).is_err());
        assert!("Z".parse::<Variant>().is_err());
    }

    #[test]
    fn single_conv_bn_has_1920_parameters() {
        let mut b = GraphBuilder::new(spec(Family::UNet, 2, Variant::Vanilla));
        let x = b.input(3).unwrap();
        let c = b.conv("c", x, 64, 3).unwrap();
        b.batch_norm("bn", c).unwrap();
        let c = b.finish().param_count();
        assert_eq!(c.trainable, 1920);
        // Running mean and variance are stored too.
        assert_eq!(c.total(), 2048);
    }

    #[test]
    fn empty_graph_cannot_be_summarised() {
        let g = GraphBuilder::new(spec(Family::UNet, 2, Variant::Vanilla)).finish();
        assert!(matches!(g.summarize(16, 16), Err(Error::EmptyGraph)));
    }

    #[test]
    fn builder_rejects_bad_wiring() {
        let mut b = GraphBuilder::new(spec(Family::UNet, 2, Variant::Vanilla));
        assert!(b.relu("r", NodeId(0)).is_err());
        let x = b.input(3).unwrap();
        let c = b.conv("c", x, 8, 3).unwrap();
        let p = b.max_pool("p", c, 2).unwrap();
        assert!(b.concat("cat", &[c, p]).is_err());
        assert!(b.sum("add", x, c).is_err());
    }

    #[test]
    fn vanilla_unet_count() {
        let g = build(&spec(Family::UNet, 5, Variant::Vanilla)).unwrap();
        assert_eq!(g.param_count().total(), 31_040_773);
    }

    #[test]
    fn vanilla_resunet_count() {
        let g = build(&spec(Family::ResUNet, 5, Variant::Vanilla)).unwrap();
        assert_eq!(g.param_count().total(), 75_346_369);
    }

    #[test]
    fn dual_levels_double_the_skip_edges() {
        for family in Family::ALL {
            let g = build(&spec(family, 5, Variant::Large)).unwrap();
            for level in 1..5 {
                let want = if level >= 3 { 2 } else { 1 };
                assert_eq!(
                    g.edges_between(Block::Encoder(level), Block::Decoder(level)),
                    want,
                    "{family} level {level}"
                );
            }
        }
    }

    #[test]
    fn config_round_trip() {
        let s = spec(Family::UNet3Plus, 4, Variant::Small).with_base_filters(16);
        let back = ArchSpec::from_config(&FlatConfig::parse(&s.to_config().to_text()).unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn summary_lists_shapes_and_total() {
        let g = build(&spec(Family::UNet, 2, Variant::Vanilla)).unwrap();
        let text = g.summarize(32, 32).unwrap();
        assert!(text.contains("[1, 128, 16, 16]"));
        assert!(text.lines().last().unwrap().starts_with("trainable"));
        assert!(g.summarize(31, 32).is_err());
    }

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(1920), "1,920");
        assert_eq!(group_thousands(31_040_773), "31,040,773");
    }
}
