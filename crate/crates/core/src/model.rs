//! Parameter storage and graph execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{build, ArchSpec, Graph, LayerKind};
use crate::autograd::{BatchStats, Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::update_running_stats;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    /// `<node name>.<role>`
    pub name: String,
    pub role: ParamRole,
    /// Index of the owning graph node.
    pub node: usize,
    pub value: Tensor,
}

/// All tensors owned by a network, in graph order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    /// First parameter index of each graph node, if it has parameters.
    first: Vec<Option<usize>>,
}

impl ParamStore {
    /// Zero weights and biases, γ = 1, β = 0, running mean 0 and variance 1.
    pub fn new(graph: &Graph) -> Result<Self> {
        let mut params = Vec::new();
        let mut first = Vec::with_capacity(graph.nodes().len());
        for (i, node) in graph.nodes().iter().enumerate() {
            let start = params.len();
            let mut push = |role: ParamRole, t: Tensor| {
                params.push(Param {
                    name: format!("{}.{}", node.name, role.suffix()),
                    role,
                    node: i,
                    value: t,
                })
            };
            match node.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                } => {
                    push(ParamRole::Weight, Tensor::zeros(&[out_channels, in_channels, kernel, kernel])?);
                    if bias {
                        push(ParamRole::Bias, Tensor::zeros(&[out_channels])?);
                    }
                }
                LayerKind::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                } => {
                    push(ParamRole::Weight, Tensor::zeros(&[in_channels, out_channels, kernel, kernel])?);
                    if bias {
                        push(ParamRole::Bias, Tensor::zeros(&[out_channels])?);
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    push(ParamRole::Gamma, Tensor::full(&[channels], 1.0)?);
                    push(ParamRole::Beta, Tensor::zeros(&[channels])?);
                    push(ParamRole::RunningMean, Tensor::zeros(&[channels])?);
                    push(ParamRole::RunningVar, Tensor::full(&[channels], 1.0)?);
                }
                _ => {}
            }
            first.push((params.len() > start).then_some(start));
        }
        Ok(ParamStore { params, first })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of scalar values held, trainable or not.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn slot(&self, node: usize) -> usize {
        self.first[node].expect("node has parameters")
    }
}

/// He-normal initialisation: convolution weights ~ N(0, 2 / fan_in), biases
/// zero, γ = 1, β = 0. For a transposed convolution with stride equal to its
/// kernel each output sees one tap per input channel, so its fan-in is the
/// input channel count.
pub fn he_init(graph: &Graph, params: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.params.iter_mut() {
        let node = &graph.nodes()[p.node];
        match (p.role, &node.kind) {
            (ParamRole::Weight, LayerKind::Conv { in_channels, kernel, .. }) => {
                fill_normal(&mut p.value, in_channels * kernel * kernel, &mut rng)?
            }
            (ParamRole::Weight, LayerKind::ConvTranspose { in_channels, .. }) => {
                fill_normal(&mut p.value, *in_channels, &mut rng)?
            }
            (ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean, _) => p.value.data_mut().fill(0.0),
            (ParamRole::Gamma | ParamRole::RunningVar, _) => p.value.data_mut().fill(1.0),
            (ParamRole::Weight, kind) => {
                return Err(Error::Arch(format!("weight on unexpected layer {kind:?}")));
            }
        }
    }
    Ok(())
}

fn fill_normal(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Arch(format!("bad init std: {e}")))?;
    for v in t.data_mut() {
        *v = dist.sample(rng) as f32;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; dropout masks derived from `seed`.
    Train { seed: u64 },
    /// Running statistics; dropout disabled.
    Eval,
}

/// What one forward pass recorded.
pub struct ForwardPass {
    pub output: VarId,
    /// Tape handle of every node output, by node index.
    pub node_vars: Vec<VarId>,
    /// Tape handle of every parameter, by parameter index. Running
    /// statistics are recorded as constants.
    pub param_vars: Vec<VarId>,
    /// Batch statistics of each training-mode batch norm, keyed by the
    /// index of its running-mean parameter.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// A network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    graph: Graph,
    params: ParamStore,
}

impl Model {
    /// Builds `spec` with He-initialised parameters.
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let graph = build(spec)?;
        let mut params = ParamStore::new(&graph)?;
        he_init(&graph, &mut params, seed)?;
        Ok(Model { graph, params })
    }

    pub fn from_parts(graph: Graph, params: ParamStore) -> Result<Self> {
        let expected = ParamStore::new(&graph)?;
        if expected.len() != params.len()
            || expected
                .params
                .iter()
                .zip(&params.params)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Incompatible("parameter layout does not match the graph".into()));
        }
        Ok(Model { graph, params })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn spec(&self) -> &ArchSpec {
        self.graph.spec()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records a forward pass of `input` (`[N, C, H, W]`) on `tape`.
    /// Trainable parameters are recorded as gradient-tracking leaves when
    /// `track_grads` is set.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, mode: Mode, track_grads: bool) -> Result<ForwardPass> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.spec().in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, network expects {}", self.spec().in_channels),
            ));
        }
        self.graph.check_input(h, w)?;
        let param_vars: Vec<VarId> = self
            .params
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track_grads && p.role.trainable()))
            .collect();
        let eps = self.spec().bn_eps;
        let mut node_vars: Vec<VarId> = Vec::with_capacity(self.graph.nodes().len());
        let mut bn_stats = Vec::new();
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let arg = |k: usize| node_vars[node.inputs[k].0];
            let v = match &node.kind {
                LayerKind::Input { .. } => tape.constant(input.clone()),
                LayerKind::Conv { kernel, bias, .. } => {
                    let s = self.params.slot(i);
                    let b = bias.then(|| param_vars[s + 1]);
                    tape.conv2d(arg(0), param_vars[s], b, 1, kernel / 2)?
                }
                LayerKind::ConvTranspose { bias, .. } => {
                    let s = self.params.slot(i);
                    let b = bias.then(|| param_vars[s + 1]);
                    tape.conv_transpose2d(arg(0), param_vars[s], b)?
                }
                LayerKind::BatchNorm { .. } => {
                    let s = self.params.slot(i);
                    let (gamma, beta) = (param_vars[s], param_vars[s + 1]);
                    match mode {
                        Mode::Train { .. } => {
                            let (v, stats) = tape.batch_norm(arg(0), gamma, beta, None, eps)?;
                            bn_stats.push((s + 2, stats.expect("training mode returns statistics")));
                            v
                        }
                        Mode::Eval => {
                            let rm = self.params.params[s + 2].value.data();
                            let rv = self.params.params[s + 3].value.data();
                            tape.batch_norm(arg(0), gamma, beta, Some((rm, rv)), eps)?.0
                        }
                    }
                }
                LayerKind::Relu => tape.relu(arg(0)),
                LayerKind::Sigmoid => tape.sigmoid(arg(0)),
                LayerKind::MaxPool { factor } => tape.max_pool(arg(0), *factor)?,
                LayerKind::Upsample { factor } => tape.upsample(arg(0), *factor)?,
                LayerKind::Concat => {
                    let xs: Vec<VarId> = node.inputs.iter().map(|id| node_vars[id.0]).collect();
                    tape.concat(&xs)?
                }
                LayerKind::Add => tape.add(arg(0), arg(1))?,
                LayerKind::Dropout { rate } => match mode {
                    Mode::Train { seed } => tape.dropout(arg(0), *rate, node_seed(seed, i))?,
                    Mode::Eval => arg(0),
                },
            };
            node_vars.push(v);
        }
        Ok(ForwardPass {
            output: *node_vars.last().ok_or(Error::EmptyGraph)?,
            node_vars,
            param_vars,
            bn_stats,
        })
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, Mode::Eval, false)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let momentum = self.spec().bn_momentum;
        for (slot, s) in stats {
            let (lo, hi) = self.params.params.split_at_mut(slot + 1);
            update_running_stats(lo[*slot].value.data_mut(), hi[0].value.data_mut(), s, momentum);
        }
    }

    /// Name of the first node (in execution order) whose output holds a
    /// non-finite value.
    pub fn first_non_finite(&self, tape: &Tape, pass: &ForwardPass) -> Option<String> {
        pass.node_vars
            .iter()
            .position(|&v| !tape.value(v).all_finite())
            .map(|i| self.graph.nodes()[i].name.clone())
    }
}

fn node_seed(seed: u64, node: usize) -> u64 {
    seed ^ (node as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
