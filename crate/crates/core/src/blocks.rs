//! Residual building blocks: the preparation stem, basic residual blocks and
//! downsampling units, plus the parameter store they draw from.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormConfig, ConvGeometry, Graph, Mode, PoolGeometry, RunningStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    /// Mutable access to the value; copies only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Ordered, named parameters and batch-norm statistics.
///
/// Insertion order is the canonical order used for checkpoints and
/// initialisation, so names are stable across runs.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    stats: Vec<NamedStats<T>>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> ParamStore<T> {
    /// A store whose new weights are drawn from a seeded scaled normal.
    pub fn seeded(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn from_parts(params: Vec<Parameter<T>>, stats: Vec<NamedStats<T>>) -> Self {
        ParamStore {
            params,
            stats,
            rng: None,
        }
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad: None,
        });
        self.params.len() - 1
    }

    fn he_normal(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        match self.rng.as_mut() {
            Some(rng) => Tensor::randn(shape, std, rng),
            None => Tensor::zeros(shape),
        }
    }

    pub fn add_conv(&mut self, name: &str, geom: ConvGeometry) -> ConvParam {
        let w = self.he_normal(geom.weight_shape().to_vec(), geom.fan_in());
        ConvParam {
            weight: self.push(format!("{name}.weight"), w),
            geom,
        }
    }

    pub fn add_norm(&mut self, name: &str, channels: usize) -> NormParam {
        let gamma = self.push(format!("{name}.weight"), Tensor::full(vec![channels], T::one()));
        let beta = self.push(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        self.stats.push(NamedStats {
            name: name.to_string(),
            stats: RunningStats::new(channels),
        });
        NormParam {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    pub fn add_linear(&mut self, name: &str, f_in: usize, f_out: usize) -> LinearParam {
        let w = self.he_normal(vec![f_out, f_in], f_in);
        LinearParam {
            weight: self.push(format!("{name}.weight"), w),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(vec![f_out])),
            f_in,
            f_out,
        }
    }

    fn add_conv_bn(&mut self, conv: &str, bn: &str, geom: ConvGeometry) -> ConvBn {
        ConvBn {
            conv: self.add_conv(conv, geom),
            bn: self.add_norm(bn, geom.out_channels),
        }
    }

    /// Bind every parameter as a graph leaf, sharing storage.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Add the graph's leaf gradients into each parameter's buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(grad),
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| NamedStats {
                    name: s.name.clone(),
                    stats: s.stats.cast(),
                })
                .collect(),
            rng: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParam {
    pub weight: usize,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParam {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParam {
    pub weight: usize,
    pub bias: usize,
    pub f_in: usize,
    pub f_out: usize,
}

/// Convolution immediately followed by batch norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParam,
    pub bn: NormParam,
}

/// Everything one forward pass needs besides the layer layout.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub stats: &'a mut [NamedStats<T>],
    pub mode: Mode,
    pub bn: BatchNormConfig,
}

impl<T: Scalar> Forward<'_, T> {
    fn conv_bn(&mut self, layer: &ConvBn, x: Var) -> Result<Var> {
        let y = self
            .graph
            .conv3d(x, self.vars[layer.conv.weight], &layer.conv.geom)?;
        self.graph.batchnorm3d(
            y,
            self.vars[layer.bn.gamma],
            self.vars[layer.bn.beta],
            &mut self.stats[layer.bn.stats].stats,
            self.bn,
            self.mode,
        )
    }

    pub fn linear(&mut self, layer: &LinearParam, x: Var) -> Result<Var> {
        self.graph
            .linear(x, self.vars[layer.weight], self.vars[layer.bias])
    }
}

/// Stem: 7x7x7 conv (stride 1,2,2) to 64 channels, batch norm, ReLU, then
/// 3x3x3 max pool with stride 2 and padding 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepBlock {
    pub stem: ConvBn,
    pub pool: PoolGeometry,
}

pub const STEM_CHANNELS: usize = 64;

impl PrepBlock {
    pub fn geometry() -> (ConvGeometry, PoolGeometry) {
        (
            ConvGeometry::new(1, STEM_CHANNELS, [7, 7, 7], [1, 2, 2], [3, 3, 3]),
            PoolGeometry::cubic(3, 2, 1),
        )
    }

    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) -> Self {
        let (conv, pool) = Self::geometry();
        PrepBlock {
            stem: store.add_conv_bn(&format!("{prefix}.conv"), &format!("{prefix}.bn"), conv),
            pool,
        }
    }

    /// `(C, T, H, W)` after the stem convolution and after the pool.
    pub fn output_shapes(input: [usize; 4]) -> Result<([usize; 4], [usize; 4])> {
        let (conv, pool) = Self::geometry();
        if input[0] != 1 {
            return Err(Error::InvalidGeometry(format!(
                "preparation block expects 1 grayscale channel, got {}",
                input[0]
            )));
        }
        let [t, h, w] = conv.output_extents([input[1], input[2], input[3]])?;
        let [tp, hp, wp] = pool.output_extents([t, h, w])?;
        Ok(([STEM_CHANNELS, t, h, w], [STEM_CHANNELS, tp, hp, wp]))
    }
}

pub fn prep_block<T: Scalar>(fwd: &mut Forward<'_, T>, block: &PrepBlock, x: Var) -> Result<Var> {
    let c = fwd.graph.value(x).dims5("prep_block")?[1];
    if c != 1 {
        return Err(Error::InvalidGeometry(format!(
            "preparation block expects 1 grayscale channel, got {c}"
        )));
    }
    let y = fwd.conv_bn(&block.stem, x)?;
    let y = fwd.graph.relu(y)?;
    fwd.graph.maxpool3d(y, &block.pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block_count: usize,
    pub out_channels: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Basic,
    Downsample,
}

/// Two 3x3x3 conv+BN layers with a skip connection. The skip is the
/// identity for a basic residual block and a strided 1x1x1 conv+BN
/// projection (the intermediate conv block) for a downsampling unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualUnit {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl ResidualUnit {
    pub fn basic<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        let g = ConvGeometry::cubic(channels, channels, 3, 1, 1);
        ResidualUnit {
            conv1: store.add_conv_bn(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), g),
            conv2: store.add_conv_bn(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), g),
            shortcut: None,
        }
    }

    pub fn downsample<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, in_channels: usize) -> Self {
        let out = 2 * in_channels;
        let g1 = ConvGeometry::cubic(in_channels, out, 3, 2, 1);
        let g2 = ConvGeometry::cubic(out, out, 3, 1, 1);
        let gs = ConvGeometry::cubic(in_channels, out, 1, 2, 0);
        ResidualUnit {
            conv1: store.add_conv_bn(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), g1),
            conv2: store.add_conv_bn(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), g2),
            shortcut: Some(store.add_conv_bn(
                &format!("{prefix}.shortcut.conv"),
                &format!("{prefix}.shortcut.bn"),
                gs,
            )),
        }
    }

    pub fn kind(&self) -> UnitKind {
        if self.shortcut.is_some() {
            UnitKind::Downsample
        } else {
            UnitKind::Basic
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.conv.geom.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.conv.geom.out_channels
    }

    /// `(C, T, H, W)` after this unit.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        if input[0] != self.in_channels() {
            return Err(Error::InvalidGeometry(format!(
                "unit expects {} channels, got {}",
                self.in_channels(),
                input[0]
            )));
        }
        let [t, h, w] = self.conv1.conv.geom.output_extents([input[1], input[2], input[3]])?;
        let [t, h, w] = self.conv2.conv.geom.output_extents([t, h, w])?;
        Ok([self.out_channels(), t, h, w])
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + x)`.
pub fn basic_residual_block<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    unit: &ResidualUnit,
    x: Var,
) -> Result<Var> {
    let c = fwd.graph.value(x).dims5("basic_residual_block")?[1];
    if unit.shortcut.is_some() || c != unit.in_channels() || c != unit.out_channels() {
        return Err(Error::InvalidGeometry(format!(
            "basic residual block maps {} -> {} channels, input has {c}",
            unit.in_channels(),
            unit.out_channels()
        )));
    }
    let main = main_path(fwd, unit, x)?;
    let sum = fwd.graph.add(main, x)?;
    fwd.graph.relu(sum)
}

/// `relu(main(x) + bn(conv1x1_stride2(x)))` with the main path's first conv
/// striding by 2 and doubling channels.
pub fn downsample_unit<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    unit: &ResidualUnit,
    x: Var,
) -> Result<Var> {
    let c = fwd.graph.value(x).dims5("downsample_unit")?[1];
    let shortcut = unit.shortcut.as_ref().ok_or_else(|| {
        Error::InvalidGeometry("downsampling unit needs a projection shortcut".into())
    })?;
    if c != unit.in_channels() || unit.out_channels() != 2 * c {
        return Err(Error::InvalidGeometry(format!(
            "downsampling unit maps {} -> {} channels, input has {c}",
            unit.in_channels(),
            unit.out_channels()
        )));
    }
    let main = main_path(fwd, unit, x)?;
    let skip = fwd.conv_bn(shortcut, x)?;
    let sum = fwd.graph.add(main, skip)?;
    fwd.graph.relu(sum)
}

fn main_path<T: Scalar>(fwd: &mut Forward<'_, T>, unit: &ResidualUnit, x: Var) -> Result<Var> {
    let y = fwd.conv_bn(&unit.conv1, x)?;
    let y = fwd.graph.relu(y)?;
    fwd.conv_bn(&unit.conv2, y)
}

pub fn unit_forward<T: Scalar>(fwd: &mut Forward<'_, T>, unit: &ResidualUnit, x: Var) -> Result<Var> {
    match unit.kind() {
        UnitKind::Basic => basic_residual_block(fwd, unit, x),
        UnitKind::Downsample => downsample_unit(fwd, unit, x),
    }
}

/// Units for one stage: a downsampling unit first when the stage
/// downsamples, basic residual blocks otherwise.
pub fn make_stage<T: Scalar>(
    store: &mut ParamStore<T>,
    spec: &StageSpec,
    in_channels: usize,
    prefix: &str,
) -> Result<Vec<ResidualUnit>> {
    if spec.block_count == 0 {
        return Err(Error::InvalidArgument("a stage needs at least one unit".into()));
    }
    let expected = if spec.downsample { 2 * in_channels } else { in_channels };
    if spec.out_channels != expected {
        return Err(Error::InvalidGeometry(format!(
            "stage with {in_channels} input channels cannot produce {} (downsample = {})",
            spec.out_channels, spec.downsample
        )));
    }
    let mut units = Vec::with_capacity(spec.block_count);
    for i in 0..spec.block_count {
        let name = format!("{prefix}.{i}");
        units.push(if i == 0 && spec.downsample {
            ResidualUnit::downsample(store, &name, in_channels)
        } else {
            ResidualUnit::basic(store, &name, spec.out_channels)
        });
    }
    Ok(units)
}
