//! The three volumetric architectures: a simple fully convolutional network,
//! a densely connected network, and a shifted-window attention transformer.
//!
//! A [`Network`] is a configuration plus named parameter tensors and batch
//! norm running statistics. Forward passes inject the parameters as tape
//! leaves and return the output id together with the leaf-id map, so a
//! trainer can fetch the gradient of every parameter after `backward`.
//! Every architecture ends in a single-output head: one logit for sex or
//! generic binary classification, one scalar for age.

pub mod check;
mod densenet;
mod init;
mod sfcn;
mod swin;

pub use densenet::channel_trace;
pub use sfcn::expected_param_count as sfcn_expected_param_count;
pub use swin::{shifted_attention_mask, window_partition, window_unpartition, RelPosIndex};

use crate::tensor::{Element, Mode, RunningStats, Tape, Tensor, TensorError, TensorId};
use init::Init;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("network geometry collapsed: {0}")]
    Geometry(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Prediction target. Sex and generic binary tasks emit one logit; age
/// emits one scalar in years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sex,
    Age,
    BinaryGeneric,
}

impl Task {
    pub fn is_classification(self) -> bool {
        matches!(self, Task::Sex | Task::BinaryGeneric)
    }
}

fn default_dropout() -> f64 {
    0.5
}

fn default_compression() -> f64 {
    0.5
}

/// Architecture selection and every hyperparameter that determines the
/// parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetConfig {
    Sfcn {
        input_extent: usize,
        /// Channels per stage; all but the last stage are 3³ conv + pool
        /// blocks, the last is a 1³ conv block.
        channels: Vec<usize>,
        task: Task,
        #[serde(default = "default_dropout")]
        dropout_p: f64,
    },
    Densenet3d {
        input_extent: usize,
        growth: usize,
        depths: Vec<usize>,
        /// Stem output channels; defaults to 2·growth.
        #[serde(default)]
        init_features: Option<usize>,
        #[serde(default = "default_compression")]
        compression: f64,
        task: Task,
    },
    Swin3d {
        input_extent: usize,
        patch: usize,
        window: usize,
        depths: Vec<usize>,
        dims: Vec<usize>,
        heads: Vec<usize>,
        task: Task,
    },
}

impl NetConfig {
    pub fn task(&self) -> Task {
        match self {
            NetConfig::Sfcn { task, .. } | NetConfig::Densenet3d { task, .. } | NetConfig::Swin3d { task, .. } => *task,
        }
    }

    pub fn input_extent(&self) -> usize {
        match self {
            NetConfig::Sfcn { input_extent, .. }
            | NetConfig::Densenet3d { input_extent, .. }
            | NetConfig::Swin3d { input_extent, .. } => *input_extent,
        }
    }

    pub fn arch_name(&self) -> &'static str {
        match self {
            NetConfig::Sfcn { .. } => "sfcn",
            NetConfig::Densenet3d { .. } => "densenet3d",
            NetConfig::Swin3d { .. } => "swin3d",
        }
    }

    /// Full-scale SFCN for 180³ inputs, channels per the lightweight
    /// brain-age family this architecture follows.
    pub fn sfcn_full(task: Task) -> Self {
        NetConfig::Sfcn { input_extent: 180, channels: vec![32, 64, 128, 256, 256, 64], task, dropout_p: 0.5 }
    }

    /// Full-scale 121-layer dense network: growth 32, depths [6,12,24,16].
    pub fn densenet_full(task: Task) -> Self {
        NetConfig::Densenet3d {
            input_extent: 180,
            growth: 32,
            depths: vec![6, 12, 24, 16],
            init_features: Some(64),
            compression: 0.5,
            task,
        }
    }

    /// Full-scale Swin for 180³ inputs: patch 4, window 5. Token grids that
    /// stop dividing evenly deeper in the hierarchy are padded with masked
    /// tokens.
    pub fn swin_full(task: Task) -> Self {
        NetConfig::Swin3d {
            input_extent: 180,
            patch: 4,
            window: 5,
            depths: vec![2, 2, 6, 2],
            dims: vec![48, 96, 192, 384],
            heads: vec![3, 6, 12, 24],
            task,
        }
    }
}

/// Ordered parameter and buffer plan derived from a config: names, shapes
/// and initializers. The order fixes RNG consumption during init.
pub(crate) struct Plan {
    pub params: Vec<(String, Vec<usize>, Init)>,
    pub buffers: Vec<(String, usize)>,
}

impl Plan {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn param(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.params.push((name.into(), shape, init));
    }

    pub fn bn(&mut self, prefix: &str, channels: usize) {
        self.param(format!("{prefix}.gamma"), vec![channels], Init::Ones);
        self.param(format!("{prefix}.beta"), vec![channels], Init::Zeros);
        self.buffers.push((prefix.to_string(), channels));
    }

    /// Convolution weight only: every conv in these architectures feeds a
    /// normalization layer that would cancel a bias term exactly, so the
    /// bias is not a parameter.
    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k * k;
        self.param(format!("{prefix}.weight"), vec![cout, cin, k, k, k], Init::KaimingUniform { fan_in });
    }

    pub fn linear(&mut self, prefix: &str, out_f: usize, in_f: usize) {
        self.param(format!("{prefix}.weight"), vec![out_f, in_f], Init::KaimingUniform { fan_in: in_f });
        self.param(format!("{prefix}.bias"), vec![out_f], Init::Zeros);
    }

    /// Transformer-style linear: truncated-normal weight, zero bias.
    pub fn linear_tn(&mut self, prefix: &str, out_f: usize, in_f: usize) {
        self.param(format!("{prefix}.weight"), vec![out_f, in_f], Init::TruncNormal { std: 0.02 });
        self.param(format!("{prefix}.bias"), vec![out_f], Init::Zeros);
    }
}

/// An architecture instance: config, named parameters, named running stats.
#[derive(Debug, Clone)]
pub struct Network<E: Element> {
    pub config: NetConfig,
    pub params: BTreeMap<String, Tensor<E>>,
    pub buffers: BTreeMap<String, RunningStats<E>>,
}

/// Output of one forward call: the head output id plus the tape leaf id of
/// every parameter, keyed by name.
pub struct ForwardPass {
    pub output: TensorId,
    pub param_ids: BTreeMap<String, TensorId>,
}

impl<E: Element> Network<E> {
    /// Build a freshly initialized network. Parameters are created in plan
    /// order from a ChaCha stream seeded with `seed`, so identical
    /// (config, seed) yields identical parameters.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        let plan = plan_for(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in &plan.params {
            let t = init::materialize::<E>(*init, shape, &mut rng);
            if params.insert(name.clone(), t).is_some() {
                return Err(NetError::Config(format!("duplicate parameter name {name}")));
            }
        }
        let mut buffers = BTreeMap::new();
        for (name, channels) in &plan.buffers {
            buffers.insert(name.clone(), RunningStats::identity(*channels));
        }
        Ok(Self { config, params, buffers })
    }

    /// Rebuild from externally supplied parts (checkpoint load), failing
    /// loudly on any name or shape mismatch against the config's plan.
    pub fn from_parts(
        config: NetConfig,
        params: BTreeMap<String, Tensor<E>>,
        buffers: BTreeMap<String, RunningStats<E>>,
    ) -> Result<Self> {
        let plan = plan_for(&config)?;
        if plan.params.len() != params.len() {
            return Err(NetError::ParamMismatch(format!(
                "expected {} parameters, got {}",
                plan.params.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &plan.params {
            match params.get(name) {
                None => return Err(NetError::ParamMismatch(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(NetError::ParamMismatch(format!(
                        "parameter {name}: expected shape {:?}, got {:?}",
                        shape,
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if plan.buffers.len() != buffers.len() {
            return Err(NetError::ParamMismatch(format!(
                "expected {} buffers, got {}",
                plan.buffers.len(),
                buffers.len()
            )));
        }
        for (name, channels) in &plan.buffers {
            match buffers.get(name) {
                None => return Err(NetError::ParamMismatch(format!("missing buffer {name}"))),
                Some(s) if s.mean.len() != *channels || s.var.len() != *channels => {
                    return Err(NetError::ParamMismatch(format!(
                        "buffer {name}: expected {channels} channels"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { config, params, buffers })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Inject every parameter as a tape leaf. Parameters require grad only
    /// in train mode.
    fn inject_params(&self, tape: &mut Tape<E>, mode: Mode) -> BTreeMap<String, TensorId> {
        let rg = mode == Mode::Train;
        self.params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone(), rg))).collect()
    }

    /// Run the architecture forward. `x` must already be on the tape with
    /// shape `[N, 1, e, e, e]` where `e` is the configured input extent.
    /// Eval mode is a pure function of (params, buffers, input); train mode
    /// consumes `rng` for dropout and updates batch-norm running stats.
    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let xs = tape.shape(x).to_vec();
        let e = self.config.input_extent();
        if xs.len() != 5 || xs[1] != 1 || xs[2] != e || xs[3] != e || xs[4] != e {
            return Err(NetError::Config(format!(
                "input shape {xs:?} does not match configured extent {e}"
            )));
        }
        let ids = self.inject_params(tape, mode);
        let config = self.config.clone();
        let output = match &config {
            NetConfig::Sfcn { channels, dropout_p, .. } => {
                sfcn::forward(tape, x, &ids, &mut self.buffers, channels, *dropout_p, mode, rng)?
            }
            NetConfig::Densenet3d { growth, depths, init_features, compression, .. } => densenet::forward(
                tape,
                x,
                &ids,
                &mut self.buffers,
                *growth,
                depths,
                init_features.unwrap_or(2 * growth),
                *compression,
                mode,
            )?,
            NetConfig::Swin3d { patch, window, depths, dims, heads, .. } => {
                swin::forward(tape, x, &ids, patch, window, depths, dims, heads)?
            }
        };
        Ok(ForwardPass { output, param_ids: ids })
    }

    /// Eval-mode forward on a fresh no-grad tape, returning the raw head
    /// outputs (one row per batch element).
    pub fn predict(&mut self, x: Tensor<E>) -> Result<Vec<E>> {
        let mut tape = Tape::no_grad();
        let xid = tape.leaf(x, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, xid, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.output).as_slice().to_vec())
    }
}

pub(crate) fn plan_for(config: &NetConfig) -> Result<Plan> {
    match config {
        NetConfig::Sfcn { input_extent, channels, dropout_p, .. } => {
            sfcn::plan(*input_extent, channels, *dropout_p)
        }
        NetConfig::Densenet3d { input_extent, growth, depths, init_features, compression, .. } => {
            densenet::plan(*input_extent, *growth, depths, init_features.unwrap_or(2 * growth), *compression)
        }
        NetConfig::Swin3d { input_extent, patch, window, depths, dims, heads, .. } => {
            swin::plan(*input_extent, *patch, *window, depths, dims, heads)
        }
    }
}

/// Spatial extents seen by each SFCN stage, by floor-division pooling.
pub fn sfcn_spatial_trace(input_extent: usize, stages: usize) -> Vec<usize> {
    let mut trace = vec![input_extent];
    let mut e = input_extent;
    for _ in 1..stages {
        e /= 2;
        trace.push(e);
    }
    trace
}
