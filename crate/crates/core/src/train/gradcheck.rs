//! Finite-difference checks of every differentiable operation and of a
//! small end-to-end network, in 64-bit.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check, grad_check_at, BatchNormConfig, ConvGeometry, GradCheckReport, Graph, Mode,
    PoolGeometry, Reduction, RunningStats, Var,
};
use crate::error::Result;
use crate::models::{ArchId, ArchSpec, ModelParams, TABULAR_WIDTH};
use crate::tensor::Tensor;

pub const PRIMITIVE_THRESHOLD: f64 = 1e-6;
pub const END_TO_END_THRESHOLD: f64 = 1e-4;
const EPS: f64 = 1e-6;
// for operations linear in the checked input, where only roundoff matters
const EPS_LINEAR: f64 = 1e-1;
const E2E_EPS: f64 = 1e-5;
/// Input of the end-to-end check: `(N, C, T, H, W)`.
pub const E2E_INPUT: [usize; 5] = [1, 1, 8, 16, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl CheckLine {
    fn new(name: impl Into<String>, report: GradCheckReport, threshold: f64) -> Self {
        CheckLine {
            name: name.into(),
            max_rel_error: report.max_rel_error,
            threshold,
            checked: report.checked,
            excluded: report.excluded,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.threshold
    }
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

struct Probe<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Probe<'_> {
    fn extent(&mut self) -> usize {
        self.rng.random_range(1..=6)
    }

    fn extents(&mut self) -> [usize; 3] {
        [self.extent(), self.extent(), self.extent()]
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, ConvGeometry) {
    let mut p = Probe { rng };
    let ext = p.extents();
    let n = p.rng.random_range(1..=2);
    let cin = p.rng.random_range(1..=3);
    let cout = p.rng.random_range(1..=3);
    let mut kernel = [0; 3];
    let mut stride = [0; 3];
    let mut pad = [0; 3];
    for a in 0..3 {
        pad[a] = p.rng.random_range(0..=1);
        kernel[a] = p.rng.random_range(1..=3.min(ext[a] + 2 * pad[a]));
        stride[a] = p.rng.random_range(1..=2);
    }
    let geom = ConvGeometry::new(cin, cout, kernel, stride, pad);
    let x = randn(vec![n, cin, ext[0], ext[1], ext[2]], p.rng);
    let w = randn(geom.weight_shape().to_vec(), p.rng);
    (x, w, geom)
}

/// Every primitive on random shapes with extents up to 6.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckLine>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let t = PRIMITIVE_THRESHOLD;

    let (x, w, geom) = conv_case(rng);
    let out_shape = {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv3d(xv, wv, &geom)?;
        g.value(y).shape().to_vec()
    };
    let r = randn(out_shape, rng);
    let wc = w.clone();
    let rep = grad_check(
        |g, v| {
            let wv = g.constant(wc.clone());
            let y = g.conv3d(v, wv, &geom)?;
            project(g, y, &r)
        },
        &x,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("conv3d (input)", rep, t));
    let xc = x.clone();
    let rep = grad_check(
        |g, v| {
            let xv = g.constant(xc.clone());
            let y = g.conv3d(xv, v, &geom)?;
            project(g, y, &r)
        },
        &w,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("conv3d (weight)", rep, t));

    // max pool
    let mut p = Probe { rng };
    let ext = p.extents();
    let k = p.rng.random_range(1..=3.min(*ext.iter().min().unwrap()));
    let s = p.rng.random_range(1..=2);
    let pad = p.rng.random_range(0..=k / 2);
    let geom = PoolGeometry::cubic(k, s, pad);
    let c = p.rng.random_range(1..=3);
    let x = randn(vec![1, c, ext[0], ext[1], ext[2]], p.rng);
    let out = geom.output_extents(ext)?;
    let r = randn(vec![1, c, out[0], out[1], out[2]], rng);
    let rep = grad_check(
        |g, v| {
            let y = g.maxpool3d(v, &geom)?;
            project(g, y, &r)
        },
        &x,
        EPS,
    )?;
    lines.push(CheckLine::new("maxpool3d", rep, t));

    // average pool
    let ext = Probe { rng }.extents();
    let x = randn(vec![2, 2, ext[0], ext[1], ext[2]], rng);
    let r = randn(vec![2, 2, 1, 1, 1], rng);
    let rep = grad_check(
        |g, v| {
            let y = g.avgpool3d(v, ext)?;
            project(g, y, &r)
        },
        &x,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("avgpool3d", rep, t));

    // batch norm, training and inference
    let ext = Probe { rng }.extents();
    let c = rng.random_range(1..=3);
    let shape = vec![2, c, ext[0], ext[1], ext[2]];
    let x = randn(shape.clone(), rng);
    let gamma = randn(vec![c], rng);
    let beta = randn(vec![c], rng);
    let r = randn(shape.clone(), rng);
    let mut running = RunningStats::<f64>::new(c);
    for v in running.var.iter_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    for m in running.mean.iter_mut() {
        *m = rng.random_range(-1.0..1.0);
    }
    let cfg = BatchNormConfig::default();
    for mode in [Mode::Training, Mode::Inference] {
        let label = match mode {
            Mode::Training => "training",
            Mode::Inference => "inference",
        };
        let bn = |g: &mut Graph<f64>, x: Var, gm: Var, bt: Var| -> Result<Var> {
            let mut stats = running.clone();
            let y = g.batchnorm3d(x, gm, bt, &mut stats, cfg, mode)?;
            project(g, y, &r)
        };
        let rep = grad_check(
            |g, v| {
                let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                bn(g, v, gm, bt)
            },
            &x,
            EPS,
        )?;
        lines.push(CheckLine::new(format!("batchnorm3d {label} (input)"), rep, t));
        let rep = grad_check(
            |g, v| {
                let (xv, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
                bn(g, xv, v, bt)
            },
            &gamma,
            EPS,
        )?;
        lines.push(CheckLine::new(format!("batchnorm3d {label} (gamma)"), rep, t));
        let rep = grad_check(
            |g, v| {
                let (xv, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
                bn(g, xv, gm, v)
            },
            &beta,
            EPS,
        )?;
        lines.push(CheckLine::new(format!("batchnorm3d {label} (beta)"), rep, t));
    }

    // relu
    let ext = Probe { rng }.extents();
    let x = randn(vec![1, 2, ext[0], ext[1], ext[2]], rng);
    let r = randn(x.shape().to_vec(), rng);
    let rep = grad_check(
        |g, v| {
            let y = g.relu(v)?;
            project(g, y, &r)
        },
        &x,
        EPS,
    )?;
    lines.push(CheckLine::new("relu", rep, t));

    // linear
    let n = rng.random_range(1..=4);
    let fi = rng.random_range(1..=6);
    let fo = rng.random_range(1..=6);
    let x = randn(vec![n, fi], rng);
    let w = randn(vec![fo, fi], rng);
    let b = randn(vec![fo], rng);
    let r = randn(vec![n, fo], rng);
    let lin = |g: &mut Graph<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = g.linear(x, w, b)?;
        project(g, y, &r)
    };
    let rep = grad_check(
        |g, v| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            lin(g, v, wv, bv)
        },
        &x,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("linear (input)", rep, t));
    let rep = grad_check(
        |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            lin(g, xv, v, bv)
        },
        &w,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("linear (weight)", rep, t));
    let rep = grad_check(
        |g, v| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            lin(g, xv, wv, v)
        },
        &b,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("linear (bias)", rep, t));

    // concat, add, mul, reshape
    let n = rng.random_range(1..=3);
    let (f1, f2) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let a = randn(vec![n, f1], rng);
    let other = randn(vec![n, f2], rng);
    let r = randn(vec![n, f1 + f2], rng);
    let rep = grad_check(
        |g, v| {
            let o = g.constant(other.clone());
            let y = g.concat(v, o)?;
            project(g, y, &r)
        },
        &a,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("concat", rep, t));
    let same = randn(vec![n, f1], rng);
    let r = randn(vec![n, f1], rng);
    let rep = grad_check(
        |g, v| {
            let o = g.constant(same.clone());
            let y = g.add(v, o)?;
            project(g, y, &r)
        },
        &a,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("add", rep, t));
    let rep = grad_check(
        |g, v| {
            let o = g.constant(same.clone());
            let y = g.mul(v, o)?;
            let y = g.mul(y, v)?;
            project(g, y, &r)
        },
        &a,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("mul", rep, t));
    let r = randn(vec![n * f1], rng);
    let rep = grad_check(
        |g, v| {
            let y = g.reshape(v, &[n * f1])?;
            project(g, y, &r)
        },
        &a,
        EPS_LINEAR,
    )?;
    lines.push(CheckLine::new("reshape", rep, t));
    let rep = grad_check(|g, v| g.sum(v), &a, EPS_LINEAR)?;
    lines.push(CheckLine::new("sum", rep, t));

    // weighted cross entropy
    let n = rng.random_range(1..=5);
    let logits = randn(vec![n, 3], rng).map(|v| 3.0 * v);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..4.0)).collect();
    for (label, reduction) in [("weighted mean", Reduction::WeightedMean), ("sum", Reduction::Sum)] {
        let rep = grad_check(
            |g, v| g.weighted_cross_entropy(v, &targets, &weights, reduction),
            &logits,
            EPS,
        )?;
        lines.push(CheckLine::new(format!("cross entropy ({label})"), rep, t));
    }
    Ok(lines)
}

fn sampled(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = sample(rng, len, k.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Loss of a small `arch` network with respect to its inputs and selected
/// parameters. Batch norm runs in inference mode: at this input size the
/// last stage has one value per channel, too few for batch statistics.
pub fn end_to_end_checks(arch: ArchId, seed: u64) -> Result<Vec<CheckLine>> {
    let spec = ArchSpec::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::<f64>::build(spec, seed)?;
    // non-trivial statistics and affine terms so that every path matters
    for s in model.store_mut().stats_mut() {
        for v in s.stats.var.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for m in s.stats.mean.iter_mut() {
            *m = rng.random_range(-0.1..0.1);
        }
    }
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            let b = p.value_mut();
            for v in b.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let clip = Tensor::randn(E2E_INPUT.to_vec(), 1.0, &mut rng);
    let tab = spec
        .uses_tabular
        .then(|| Tensor::randn(vec![1, TABULAR_WIDTH], 1.0, &mut rng));
    let target = rng.random_range(0..3);
    let weights = [0.5448717948717948, 3.1481481481481484, 1.1805555555555556];

    // which leaf the checked variable replaces
    #[derive(Clone, Copy)]
    enum Slot {
        Clip,
        Tabular,
        Param(usize),
    }
    let run = |g: &mut Graph<f64>, v: Var, slot: Slot| -> Result<Var> {
        let mut vars = model.store().bind(g, false);
        let mut x = None;
        let mut t = None;
        match slot {
            Slot::Clip => x = Some(v),
            Slot::Tabular => t = Some(v),
            Slot::Param(i) => vars[i] = v,
        }
        let x = match x {
            Some(x) => x,
            None => g.constant(clip.clone()),
        };
        let t = match (t, &tab) {
            (Some(t), _) => Some(t),
            (None, Some(tab)) => Some(g.constant(tab.clone())),
            (None, None) => None,
        };
        let mut stats = model.stats().to_vec();
        let logits = model.forward_bound(g, &vars, &mut stats, x, t, Mode::Inference)?;
        g.weighted_cross_entropy(logits, &[target], &weights, Reduction::Sum)
    };

    let t = END_TO_END_THRESHOLD;
    let mut lines = Vec::new();
    let idx = sampled(clip.numel(), 48, &mut rng);
    let rep = grad_check_at(|g, v| run(g, v, Slot::Clip), &clip, &idx, E2E_EPS)?;
    lines.push(CheckLine::new(format!("{arch} end-to-end (clip)"), rep, t));
    if let Some(tab) = &tab {
        let rep = grad_check(|g, v| run(g, v, Slot::Tabular), tab, E2E_EPS)?;
        lines.push(CheckLine::new(format!("{arch} end-to-end (tabular)"), rep, t));
    }
    let names: Vec<String> = {
        let mut n = vec!["prep.conv.weight".to_string(), "layer2.0.shortcut.conv.weight".into()];
        n.push("layer4.1.bn2.weight".into());
        if spec.uses_tabular {
            n.extend(["fc1.weight".into(), "fc2.bias".into()]);
        } else {
            n.push("fc.weight".into());
        }
        n
    };
    for name in names {
        let Some(i) = model.store().index_of(&name) else {
            continue;
        };
        let value = (*model.params()[i].value).clone();
        let idx = sampled(value.numel(), 12, &mut rng);
        let rep = grad_check_at(|g, v| run(g, v, Slot::Param(i)), &value, &idx, E2E_EPS)?;
        lines.push(CheckLine::new(format!("{arch} end-to-end ({name})"), rep, t));
    }
    Ok(lines)
}

/// Primitive checks for `seed` followed by the end-to-end checks.
pub fn gradcheck_suite(arch: ArchId, seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = primitive_checks(seed)?;
    lines.extend(end_to_end_checks(arch, seed)?);
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for seed in 0..3 {
            for line in primitive_checks(seed).unwrap() {
                assert!(line.passed(), "seed {seed}: {line:?}");
            }
        }
    }

    #[test]
    fn linear_is_exact() {
        let lines = primitive_checks(5).unwrap();
        let lin = lines.iter().find(|l| l.name == "linear (bias)").unwrap();
        assert!(lin.max_rel_error < 1e-10, "{lin:?}");
    }

    #[test]
    fn end_to_end_plain_passes() {
        let lines = end_to_end_checks(ArchId::Resnet18, 1).unwrap();
        assert!(lines.iter().any(|l| l.name.contains("fc.weight")));
        for line in lines {
            assert!(line.passed(), "{line:?}");
        }
    }
}
