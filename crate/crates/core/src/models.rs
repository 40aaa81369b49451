//! The three network variants: 3D ResNet18, 3D ResNet18 with tabular fusion
//! and 3D ResNet34 with tabular fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, BatchNormConfig, Graph, Mode, Var};
use crate::blocks::{
    make_stage, prep_block, unit_forward, Forward, LinearParam, NamedStats, ParamStore, Parameter,
    PrepBlock, ResidualUnit, StageSpec, STEM_CHANNELS,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const TABULAR_WIDTH: usize = 19;
pub const FUSION_HIDDEN: usize = 84;
pub const POOLED_FEATURES: usize = 512;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["progressive", "non_progressive", "immotile"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "resnet18_3d")]
    Resnet18,
    #[serde(rename = "resnet18_3d_tab")]
    Resnet18Tab,
    #[serde(rename = "resnet34_3d_tab")]
    Resnet34Tab,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::Resnet18, ArchId::Resnet18Tab, ArchId::Resnet34Tab];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Resnet18 => "resnet18_3d",
            ArchId::Resnet18Tab => "resnet18_3d_tab",
            ArchId::Resnet34Tab => "resnet34_3d_tab",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

/// Declarative description of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: ArchId,
    pub stages: [usize; 4],
    pub uses_tabular: bool,
    pub tabular_width: usize,
    pub fusion_hidden: usize,
    pub num_classes: usize,
    /// ReLU between the two fusion-head dense layers.
    pub fusion_relu: bool,
}

impl ArchSpec {
    pub fn new(arch: ArchId) -> Self {
        let (stages, uses_tabular) = match arch {
            ArchId::Resnet18 => ([2, 2, 2, 2], false),
            ArchId::Resnet18Tab => ([2, 2, 2, 2], true),
            ArchId::Resnet34Tab => ([3, 4, 6, 3], true),
        };
        ArchSpec {
            arch,
            stages,
            uses_tabular,
            tabular_width: TABULAR_WIDTH,
            fusion_hidden: FUSION_HIDDEN,
            num_classes: NUM_CLASSES,
            fusion_relu: true,
        }
    }

    pub fn stage_specs(&self) -> [StageSpec; 4] {
        let channels = [64, 128, 256, 512];
        std::array::from_fn(|i| StageSpec {
            block_count: self.stages[i],
            out_channels: channels[i],
            downsample: i > 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// pooled 512 -> classes
    Plain { fc: LinearParam },
    /// concat(512, tabular) -> hidden -> [relu] -> classes
    Fusion {
        fc1: LinearParam,
        fc2: LinearParam,
        relu: bool,
    },
}

/// Layer layout; parameter indices point into the model's [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub prep: PrepBlock,
    pub stages: Vec<Vec<ResidualUnit>>,
    pub head: Head,
}

impl Network {
    fn build<T: Scalar>(spec: &ArchSpec, store: &mut ParamStore<T>) -> Result<Network> {
        let prep = PrepBlock::build(store, "prep");
        let mut stages = Vec::with_capacity(4);
        let mut channels = STEM_CHANNELS;
        for (i, stage) in spec.stage_specs().iter().enumerate() {
            stages.push(make_stage(store, stage, channels, &format!("layer{}", i + 1))?);
            channels = stage.out_channels;
        }
        let head = if spec.uses_tabular {
            let fused = POOLED_FEATURES + spec.tabular_width;
            Head::Fusion {
                fc1: store.add_linear("fc1", fused, spec.fusion_hidden),
                fc2: store.add_linear("fc2", spec.fusion_hidden, spec.num_classes),
                relu: spec.fusion_relu,
            }
        } else {
            Head::Plain {
                fc: store.add_linear("fc", POOLED_FEATURES, spec.num_classes),
            }
        };
        Ok(Network { prep, stages, head })
    }

    pub fn stage_unit_counts(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

/// Activation shapes `(C, T, H, W)` along the network for one input size,
/// computed without running any arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub stem: [usize; 4],
    pub prep: [usize; 4],
    pub stages: [[usize; 4]; 4],
    pub pooled: usize,
    pub fused: Option<usize>,
    pub hidden: Option<usize>,
    pub logits: usize,
}

impl ShapeTrace {
    /// Kernel extents of the final average pool.
    pub fn pool_kernel(&self) -> [usize; 3] {
        let [_, t, h, w] = self.stages[3];
        [t, h, w]
    }
}

pub struct Forwarded {
    pub logits: Var,
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: [f64; NUM_CLASSES],
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let p = softmax(logits);
        let mut class = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[class] {
                class = i;
            }
        }
        Prediction {
            class,
            probabilities: [p[0], p[1], p[2]],
        }
    }

    pub fn class_name(&self) -> &'static str {
        CLASS_NAMES[self.class]
    }
}

/// Learnable parameters, batch-norm statistics and the layout that uses them.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    spec: ArchSpec,
    store: ParamStore<T>,
    net: Network,
    bn: BatchNormConfig,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic in `(spec, seed)`: He-normal conv/linear weights, unit
    /// batch-norm scale, zero shifts and biases.
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::seeded(seed);
        let net = Network::build(&spec, &mut store)?;
        Ok(ModelParams {
            spec,
            store,
            net,
            bn: BatchNormConfig::default(),
        })
    }

    /// Reassemble from stored tensors; names and shapes must match the
    /// layout `spec` produces.
    pub fn from_tensors(
        spec: ArchSpec,
        params: Vec<(String, Tensor<T>)>,
        stats: Vec<NamedStats<T>>,
    ) -> Result<Self> {
        let mut template = ParamStore::<T>::from_parts(vec![], vec![]);
        let net = Network::build(&spec, &mut template)?;
        if params.len() != template.params().len() || stats.len() != template.stats().len() {
            return Err(Error::CheckpointIntegrity(format!(
                "{} expects {} parameters and {} statistics, found {} and {}",
                spec.arch,
                template.params().len(),
                template.stats().len(),
                params.len(),
                stats.len()
            )));
        }
        let mut out = Vec::with_capacity(params.len());
        for ((name, value), expect) in params.into_iter().zip(template.params()) {
            if name != expect.name || value.shape() != expect.value.shape() {
                return Err(Error::CheckpointIntegrity(format!(
                    "tensor '{name}' {:?} does not match expected '{}' {:?}",
                    value.shape(),
                    expect.name,
                    expect.value.shape()
                )));
            }
            out.push(Parameter {
                name,
                value: value.into(),
                grad: None,
            });
        }
        for (s, expect) in stats.iter().zip(template.stats()) {
            if s.name != expect.name || s.stats.channels() != expect.stats.channels() {
                return Err(Error::CheckpointIntegrity(format!(
                    "statistics '{}' do not match expected '{}'",
                    s.name, expect.name
                )));
            }
        }
        Ok(ModelParams {
            spec,
            store: ParamStore::from_parts(out, stats),
            net,
            bn: BatchNormConfig::default(),
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn params(&self) -> &[Parameter<T>] {
        self.store.params()
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        self.store.params_mut()
    }

    pub fn stats(&self) -> &[NamedStats<T>] {
        self.store.stats()
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }

    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        self.store.accumulate_grads(g, vars);
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec,
            store: self.store.cast(),
            net: self.net.clone(),
            bn: self.bn,
        }
    }

    fn check_inputs(&self, clip: &Tensor<T>, tabular: Option<&Tensor<T>>) -> Result<()> {
        let [n, c, _, _, _] = clip.dims5("forward")?;
        if c != 1 {
            return Err(Error::shape(
                "forward",
                format!("clips must have 1 grayscale channel, got {c}"),
            ));
        }
        match (self.spec.uses_tabular, tabular) {
            (true, None) => Err(Error::InvalidArgument(format!(
                "{} requires a tabular input",
                self.spec.arch
            ))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!(
                "{} takes no tabular input",
                self.spec.arch
            ))),
            (true, Some(t)) if t.shape() != [n, self.spec.tabular_width] => Err(Error::shape(
                "forward",
                format!(
                    "tabular input must be ({n}, {}), got {:?}",
                    self.spec.tabular_width,
                    t.shape()
                ),
            )),
            _ => Ok(()),
        }
    }

    /// Record a forward pass with every parameter as a learnable leaf.
    /// Training mode updates the batch-norm running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        clip: &Tensor<T>,
        tabular: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Forwarded> {
        self.check_inputs(clip, tabular)?;
        let vars = self.store.bind(g, true);
        let x = g.constant(clip.clone());
        let tab = tabular.map(|t| g.constant(t.clone()));
        let net = &self.net;
        let bn = self.bn;
        let logits = run_network(
            net,
            &mut Forward {
                graph: g,
                vars: &vars,
                stats: self.store.stats_mut(),
                mode,
                bn,
            },
            x,
            tab,
        )?;
        Ok(Forwarded { logits, vars })
    }

    /// Forward with caller-supplied parameter, input and statistics
    /// bindings. Used for finite-difference checks with respect to any leaf.
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        stats: &mut [NamedStats<T>],
        clip: Var,
        tabular: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        if vars.len() != self.store.params().len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter bindings for {} parameters",
                vars.len(),
                self.store.params().len()
            )));
        }
        run_network(
            &self.net,
            &mut Forward {
                graph: g,
                vars,
                stats,
                mode,
                bn: self.bn,
            },
            clip,
            tabular,
        )
    }

    /// Inference-mode logits as `(N, classes)`; never touches running
    /// statistics.
    pub fn infer(&self, clip: &Tensor<T>, tabular: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check_inputs(clip, tabular)?;
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g, false);
        let x = g.constant(clip.clone());
        let tab = tabular.map(|t| g.constant(t.clone()));
        let mut stats = self.store.stats().to_vec();
        let logits = self.forward_bound(&mut g, &vars, &mut stats, x, tab, Mode::Inference)?;
        Ok(g.value(logits).clone())
    }

    /// Class and softmax probabilities for each clip in the batch.
    pub fn predict(&self, clip: &Tensor<T>, tabular: Option<&Tensor<T>>) -> Result<Vec<Prediction>> {
        let logits = self.infer(clip, tabular)?;
        Ok(logits
            .data()
            .chunks(self.spec.num_classes)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
                Prediction::from_logits(&row)
            })
            .collect())
    }
}

fn run_network<T: Scalar>(
    net: &Network,
    fwd: &mut Forward<'_, T>,
    clip: Var,
    tabular: Option<Var>,
) -> Result<Var> {
    let mut x = prep_block(fwd, &net.prep, clip)?;
    for stage in &net.stages {
        for unit in stage {
            x = unit_forward(fwd, unit, x)?;
        }
    }
    let pooled = fwd.graph.global_avgpool3d(x)?;
    let n = fwd.graph.value(pooled).shape()[0];
    let c = fwd.graph.value(pooled).shape()[1];
    let flat = fwd.graph.reshape(pooled, &[n, c])?;
    match (&net.head, tabular) {
        (Head::Plain { fc }, None) => fwd.linear(fc, flat),
        (Head::Fusion { fc1, fc2, relu }, Some(tab)) => {
            let fused = fwd.graph.concat(flat, tab)?;
            let mut h = fwd.linear(fc1, fused)?;
            if *relu {
                h = fwd.graph.relu(h)?;
            }
            fwd.linear(fc2, h)
        }
        (Head::Plain { .. }, Some(_)) => Err(Error::InvalidArgument(
            "model takes no tabular input".into(),
        )),
        (Head::Fusion { .. }, None) => Err(Error::InvalidArgument(
            "model requires a tabular input".into(),
        )),
    }
}

/// Activation shapes for a `(1, T, H, W)` clip, derived from the same
/// geometry the operations use.
pub fn shape_trace(spec: &ArchSpec, input: [usize; 4]) -> Result<ShapeTrace> {
    let mut layout = ParamStore::<f32>::from_parts(vec![], vec![]);
    let net = Network::build(spec, &mut layout)?;
    let (stem, prep) = PrepBlock::output_shapes(input)?;
    let mut shape = prep;
    let mut stages = [[0; 4]; 4];
    for (i, stage) in net.stages.iter().enumerate() {
        for unit in stage {
            shape = unit.output_shape(shape)?;
        }
        stages[i] = shape;
    }
    let pooled = shape[0];
    let (fused, hidden) = if spec.uses_tabular {
        (Some(pooled + spec.tabular_width), Some(spec.fusion_hidden))
    } else {
        (None, None)
    };
    Ok(ShapeTrace {
        stem,
        prep,
        stages,
        pooled,
        fused,
        hidden,
        logits: spec.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_ids_round_trip() {
        for a in ArchId::ALL {
            assert_eq!(a.as_str().parse::<ArchId>().unwrap(), a);
        }
        assert!(matches!("resnet50_3d".parse::<ArchId>(), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn spec_invariants() {
        assert_eq!(ArchSpec::new(ArchId::Resnet18).stages, [2, 2, 2, 2]);
        assert!(!ArchSpec::new(ArchId::Resnet18).uses_tabular);
        assert!(ArchSpec::new(ArchId::Resnet18Tab).uses_tabular);
        assert_eq!(ArchSpec::new(ArchId::Resnet34Tab).stages, [3, 4, 6, 3]);
    }

    #[test]
    fn prediction_from_logits() {
        let p = Prediction::from_logits(&[5.0, 0.0, 0.0]);
        assert_eq!(p.class, 0);
        assert!((p.probabilities[0] - 0.986_703_291_042_268).abs() < 1e-9);
        assert!((p.probabilities[1] - 0.006_648_354_478_866).abs() < 1e-9);
        let p = Prediction::from_logits(&[1.5, 1.5, 1.5]);
        assert_eq!(p.class, 0);
        assert!(p.probabilities.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = Prediction::from_logits(&[-3.0, 7.0, 7.0]);
        assert_eq!(p.class, 1);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
