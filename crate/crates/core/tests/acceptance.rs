//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use motility3d::autodiff::{ConvGeometry, Graph, Reduction};
use motility3d::data::fixture::{write_fixture, FixtureSpec};
use motility3d::data::frames::{decode_frame, write_pgm_frames, write_ppm};
use motility3d::data::{
    class_histogram, load_clip, read_manifest, split_dataset, FrameSpec, Grayscale, SPLIT_SIZES,
};
use motility3d::exec;
use motility3d::models::{shape_trace, ArchId, ArchSpec, ModelParams};
use motility3d::optim::{
    adam_update, class_weights, clip_values, one_cycle_lr, AdamConfig, OneCycleConfig, DEFAULT_CLIP,
};
use motility3d::train::checkpoint::encode;
use motility3d::train::gradcheck::{end_to_end_checks, primitive_checks};
use motility3d::train::{
    evaluate, load_checkpoint, prepare_data, train_on, Control, PreparedData, TrainConfig,
};
use motility3d::{Error, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let took = t.elapsed();
    ensure(took <= limit, || {
        format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())
    })
}

fn err(e: Error) -> String {
    e.to_string()
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..20 {
        for line in primitive_checks(seed).map_err(err)? {
            ensure(line.passed(), || {
                format!("seed {seed}: {} rel err {:.3e}", line.name, line.max_rel_error)
            })?;
            worst = worst.max(line.max_rel_error);
            checks += 1;
        }
    }
    let mut e2e_worst = 0.0f64;
    for line in end_to_end_checks(ArchId::Resnet18Tab, 0).map_err(err)? {
        ensure(line.passed(), || {
            format!("end-to-end {}: rel err {:.3e}", line.name, line.max_rel_error)
        })?;
        e2e_worst = e2e_worst.max(line.max_rel_error);
    }
    within(t, Duration::from_secs(120))?;
    Ok(format!(
        "{checks} primitive checks over 20 seeds, worst {worst:.2e}; resnet18_3d_tab worst {e2e_worst:.2e}; {:.0}s",
        t.elapsed().as_secs_f64()
    ))
}

fn shape_chain() -> Outcome {
    let t = Instant::now();
    let plain = shape_trace(&ArchSpec::new(ArchId::Resnet18), [1, 50, 480, 640]).map_err(err)?;
    ensure(plain.stages[3] == [512, 4, 15, 20], || {
        format!("pre-pool shape {:?}", plain.stages[3])
    })?;
    ensure(plain.pool_kernel() == [4, 15, 20], || {
        format!("pool kernel {:?}", plain.pool_kernel())
    })?;
    let tab = shape_trace(&ArchSpec::new(ArchId::Resnet18Tab), [1, 50, 480, 640]).map_err(err)?;
    ensure(tab.fused == Some(531) && tab.hidden == Some(84), || {
        format!("fusion {:?} -> {:?}", tab.fused, tab.hidden)
    })?;
    let deep = ModelParams::<f32>::build(ArchSpec::new(ArchId::Resnet34Tab), 0).map_err(err)?;
    let units = deep.network().stage_unit_counts();
    ensure(units == [3, 4, 6, 3], || format!("resnet34 units {units:?}"))?;
    within(t, Duration::from_secs(60))?;
    Ok("pre-pool (512,4,15,20), fusion 531 -> 84, resnet34 units [3,4,6,3]".into())
}

/// Direct nested loops over every output and kernel tap, in f64.
fn naive_conv(x: &[f64], xs: [usize; 5], w: &[f64], g: &ConvGeometry) -> (Vec<f64>, [usize; 5]) {
    let [n, ci_n, t, h, wd] = xs;
    let [ot, oh, ow] = g.output_extents([t, h, wd]).expect("geometry");
    let [co_n, _, kt, kh, kw] = g.weight_shape();
    let mut y = vec![0.0; n * co_n * ot * oh * ow];
    let mut i = 0;
    for b in 0..n {
        for co in 0..co_n {
            for a in 0..ot {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..ci_n {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let tt = (a * g.stride[0] + dt) as isize - g.padding[0] as isize;
                                        let hh = (r * g.stride[1] + dh) as isize - g.padding[1] as isize;
                                        let ww = (c * g.stride[2] + dw) as isize - g.padding[2] as isize;
                                        if tt < 0 || hh < 0 || ww < 0 {
                                            continue;
                                        }
                                        let (tt, hh, ww) = (tt as usize, hh as usize, ww as usize);
                                        if tt >= t || hh >= h || ww >= wd {
                                            continue;
                                        }
                                        let xv = x[(((b * ci_n + ci) * t + tt) * h + hh) * wd + ww];
                                        let wv = w[(((co * ci_n + ci) * kt + dt) * kh + dh) * kw + dw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    (y, [n, co_n, ot, oh, ow])
}

fn engine_conv(x: Vec<f32>, xs: [usize; 5], w: Vec<f32>, g: &ConvGeometry) -> Result<Tensor<f32>, String> {
    let mut graph = Graph::<f32>::new();
    let xv = graph.constant(Tensor::new(xs.to_vec(), x).map_err(err)?);
    let wv = graph.constant(Tensor::new(g.weight_shape().to_vec(), w).map_err(err)?);
    let y = graph.conv3d(xv, wv, g).map_err(err)?;
    Ok(graph.value(y).clone())
}

fn random_case(rng: &mut ChaCha8Rng) -> ([usize; 5], ConvGeometry) {
    loop {
        let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let s = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
        let p = [
            rng.random_range(0..k[0]),
            rng.random_range(0..k[1]),
            rng.random_range(0..k[2]),
        ];
        let g = ConvGeometry::new(rng.random_range(1..=3), rng.random_range(1..=4), k, s, p);
        let xs = [
            rng.random_range(1..=2),
            g.in_channels,
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        ];
        if g.output_extents([xs[2], xs[3], xs[4]]).is_ok() {
            return (xs, g);
        }
    }
}

fn conv_equivalence() -> Outcome {
    let t = Instant::now();
    let rng = &mut ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (xs, g) = random_case(rng);
        let nx: usize = xs.iter().product();
        let nw: usize = g.weight_shape().iter().product();

        // Real values: rounding follows a different summation order than the loop.
        let x: Vec<f32> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let wd: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let (want, shape) = naive_conv(&xd, xs, &wd, &g);
        let got = engine_conv(x.clone(), xs, w.clone(), &g)?;
        ensure(got.shape() == shape, || format!("case {case}: shape {:?} vs {shape:?}", got.shape()))?;
        for (a, b) in got.data().iter().zip(&want) {
            let rel = (*a as f64 - b).abs() / b.abs().max(1.0);
            worst = worst.max(rel);
            ensure(rel <= 1e-5, || format!("case {case} {g:?}: {a} vs {b}"))?;
        }

        // Small integers: every partial sum is exact, so any summation order must agree bit for bit.
        let xi: Vec<f32> = (0..nx).map(|_| rng.random_range(-4..=4) as f32).collect();
        let wi: Vec<f32> = (0..nw).map(|_| rng.random_range(-4..=4) as f32).collect();
        let (want, _) = naive_conv(
            &xi.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            xs,
            &wi.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &g,
        );
        let serial = engine_conv(xi.clone(), xs, wi.clone(), &g)?;
        ensure(serial.data().iter().zip(&want).all(|(a, b)| *a as f64 == *b), || {
            format!("case {case}: integer case not exact")
        })?;

        exec::set_threads(3);
        let parallel = engine_conv(x, xs, w, &g);
        exec::set_threads(1);
        ensure(parallel?.data() == got.data(), || {
            format!("case {case}: parallel result differs from serial")
        })?;
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "200 cases, worst relative error {worst:.2e}, integer cases exact, parallel bit-identical"
    ))
}

fn loss_exactness() -> Outcome {
    let ce = |logits: [f64; 3], class: usize, weights: [f64; 3], red: Reduction| -> Result<f64, String> {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(vec![1, 3], logits.to_vec()).map_err(err)?);
        let loss = g.weighted_cross_entropy(l, &[class], &weights, red).map_err(err)?;
        Ok(g.value(loss).item())
    };
    let uniform = ce([0.0; 3], 0, [1.0; 3], Reduction::Sum)?;
    ensure((uniform - 3f64.ln()).abs() <= 1e-7, || format!("uniform logits gave {uniform}"))?;
    for red in [Reduction::Sum, Reduction::WeightedMean] {
        for (logits, class) in [([1000.0, 0.0, -1000.0], 2), ([-1000.0, 1000.0, 0.0], 1), ([1000.0; 3], 0)] {
            let v = ce(logits, class, [2.0, 1.0, 1.0], red)?;
            ensure(v.is_finite(), || format!("{logits:?} class {class} gave {v}"))?;
        }
    }
    let weighted = ce([2.0, 0.0, 0.0], 0, [2.0, 1.0, 1.0], Reduction::Sum)?;
    ensure((weighted - 0.479388).abs() <= 1e-5, || {
        format!(
            "weighted example gave {weighted:.7}, expected 0.479388 +/- 1e-5 (ln 3 and large-logit checks passed)"
        )
    })?;
    Ok(format!("weighted {weighted:.6}, uniform {uniform:.9}, |logits| 1000 finite"))
}

fn recipe_constants() -> Outcome {
    ensure(DEFAULT_CLIP == 0.1, || format!("default clip {DEFAULT_CLIP}"))?;
    let cfg = AdamConfig::default();
    ensure(cfg.weight_decay == 1e-4, || format!("default weight decay {}", cfg.weight_decay))?;
    let tc: TrainConfig =
        TrainConfig::from_json(r#"{"arch":"resnet18_3d","manifest":"m.csv"}"#).map_err(err)?;
    ensure(tc.clip_value == 0.1 && tc.weight_decay == 1e-4, || {
        format!("train defaults clip {} wd {}", tc.clip_value, tc.weight_decay)
    })?;

    let mut g = [0.5f64, -3.0, 0.05, -0.1, 0.1];
    clip_values(&mut g, DEFAULT_CLIP);
    ensure(g == [0.1, -0.1, 0.05, -0.1, 0.1], || format!("clipped {g:?}"))?;

    // Clipped gradient 0.1 plus decay 1e-4 * 2.0; the first Adam step moves by lr * g / (|g| + eps).
    let mut p = [2.0f64, 2.0];
    let mut grad = [5.0f64, 0.0];
    clip_values(&mut grad, DEFAULT_CLIP);
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    adam_update(&mut p, &grad, &mut m, &mut v, 1, &cfg, 1e-3);
    let step = |g: f64| 2.0 - 1e-3 * g / (g.abs() + 1e-8);
    ensure((p[0] - step(0.1002)).abs() < 1e-15 && (p[1] - step(2e-4)).abs() < 1e-15, || {
        format!("adam step gave {p:?}")
    })?;
    ensure((m[1] - 0.1 * 2e-4).abs() < 1e-18, || format!("decay moment {}", m[1]))?;

    let w = class_weights(&[52, 9, 24]).map_err(err)?;
    let want = [0.54487, 3.14815, 1.18056];
    ensure(w.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-5), || {
        format!("class weights {w:?}")
    })?;

    for (max_lr, total) in [(1e-3, 800), (1e-2, 97), (1e-1, 10)] {
        let oc = OneCycleConfig::new(max_lr, total).map_err(err)?;
        let peak = oc.warmup_steps();
        let at = |s| one_cycle_lr(s, &oc).map_err(err);
        ensure(at(0)? == max_lr / 25.0, || format!("start {} for max {max_lr}", at(0).unwrap()))?;
        ensure(at(peak)? == max_lr, || format!("peak {} for max {max_lr}", at(peak).unwrap()))?;
        ensure(at(total - 1)? == max_lr / (25.0 * 1e4), || {
            format!("end {} for max {max_lr}", at(total - 1).unwrap())
        })?;
    }
    Ok("clip 0.1, weight decay 1e-4, weights [0.54487, 3.14815, 1.18056], one-cycle endpoints exact".into())
}

fn overfit_config(dir: &Path, manifest: &Path, split: [usize; 3], epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ArchId::Resnet18, manifest.to_path_buf());
    cfg.max_lr = 1e-3;
    cfg.batch_size = 4;
    cfg.max_epochs = epochs;
    cfg.split_sizes = split;
    cfg.frame_count = 16;
    cfg.frame_size = [64, 80];
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = write_fixture(dir.path(), &FixtureSpec::overfit()).map_err(err)?;
    let mut cfg = overfit_config(&dir.path().join("run"), &fx.manifest, [6, 1, 1], 200);
    cfg.patience = 200;
    let base = prepare_data(&cfg).map_err(err)?;
    let mut all: Vec<_> = [&base.train, &base.val, &base.test].into_iter().flatten().cloned().collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let mut counts = [0usize; 3];
    for s in &all {
        counts[s.label] += 1;
    }
    let data = PreparedData {
        train: all.clone(),
        val: all,
        class_weights: class_weights(&counts).map_err(err)?,
        ..base
    };
    let out = train_on(&cfg, &data, None, |m| {
        if m.val_acc == 1.0 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .map_err(err)?;
    let first = &out.metrics[0];
    let last = out.metrics.last().expect("at least one epoch");
    ensure(last.val_acc == 1.0, || {
        format!("accuracy {:.3} after {} epochs", last.val_acc, out.metrics.len())
    })?;
    ensure(last.train_loss < first.train_loss, || {
        format!("final loss {} not below first {}", last.train_loss, first.train_loss)
    })?;
    within(t, Duration::from_secs(15 * 60))?;
    Ok(format!(
        "100% training accuracy at epoch {}, loss {:.4} -> {:.4}, {:.0}s",
        last.epoch,
        first.train_loss,
        last.train_loss,
        t.elapsed().as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = write_fixture(&dir.path().join("fx"), &FixtureSpec::overfit()).map_err(err)?;
    let mut runs = Vec::new();
    for r in ["a", "b"] {
        let cfg = overfit_config(&dir.path().join(r), &fx.manifest, [5, 2, 1], 3);
        let cfg_path = dir.path().join(format!("{r}.json"));
        fs::write(&cfg_path, serde_json::to_string(&cfg).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let status = Command::new(env!("CARGO_BIN_EXE_motility3d"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("train run {r} failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
        let read = |f: &str| fs::read(cfg.out_dir.join(f)).map_err(|e| e.to_string());
        let (ckpt, metrics) = (read("best.m3dc")?, read("metrics.csv")?);
        runs.push((cfg, ckpt, metrics));
    }
    ensure(runs[0].1 == runs[1].1, || "checkpoints differ".into())?;
    ensure(runs[0].2 == runs[1].2, || "metrics differ".into())?;

    let (cfg, bytes, _) = &runs[0];
    let (model, info) = load_checkpoint(&cfg.out_dir.join("best.m3dc")).map_err(err)?;
    let again = encode(&model, &info).map_err(err)?;
    ensure(&again == bytes, || "re-encoded checkpoint differs from file".into())?;

    let data = prepare_data(cfg).map_err(err)?;
    let eval = evaluate(&model, &data.val, &info.frames, &info.class_weights).map_err(err)?;
    ensure(eval.accuracy == info.best_val_acc, || {
        format!("evaluated {} vs logged {}", eval.accuracy, info.best_val_acc)
    })?;
    ensure(eval.loss == info.best_val_loss, || {
        format!("evaluated loss {} vs logged {}", eval.loss, info.best_val_loss)
    })?;
    Ok(format!(
        "two runs bit-identical ({} byte checkpoint), round trip exact, val acc {} reproduced",
        bytes.len(),
        eval.accuracy
    ))
}

fn pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frames = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|i| vec![(i % 10) as f32 / 10.0; 12]).collect() };
    let spec = FrameSpec {
        size: Some([3, 4]),
        ..FrameSpec::default()
    };
    let ok = dir.path().join("fifty");
    write_pgm_frames(&ok, &frames(50), 3, 4).map_err(err)?;
    let clip = load_clip(&ok, &spec).map_err(err)?;
    ensure(clip.shape() == [1, 50, 3, 4], || format!("clip shape {:?}", clip.shape()))?;
    let short = dir.path().join("fortynine");
    write_pgm_frames(&short, &frames(49), 3, 4).map_err(err)?;
    match load_clip(&short, &spec) {
        Err(Error::InsufficientFrames { found: 49, needed: 50, .. }) => {}
        other => return Err(format!("49 frames: {other:?}")),
    }

    let red = dir.path().join("red.ppm");
    write_ppm(&red, RgbImage::from_pixel(1, 1, Rgb([255, 0, 0]))).map_err(err)?;
    let luma = decode_frame(&red, Grayscale::Luma).map_err(err)?.pixels[0];
    ensure((luma - 0.299).abs() <= 1e-6, || format!("luma {luma}"))?;

    let fx = write_fixture(&dir.path().join("cohort"), &FixtureSpec::cohort()).map_err(err)?;
    let rows = read_manifest(&fx.manifest, b',').map_err(err)?;
    let hist = class_histogram(&rows);
    ensure(hist == [52, 9, 24], || format!("histogram {hist:?}"))?;
    let ids: Vec<String> = rows.iter().map(|r| r.participant_id.clone()).collect();
    let split = split_dataset(&ids, 0, SPLIT_SIZES).map_err(err)?;
    let sizes = [split.train.len(), split.val.len(), split.test.len(), split.excluded.len()];
    ensure(sizes == [63, 8, 9, 5], || format!("split sizes {sizes:?}"))?;
    Ok("50 frames accepted, 49 rejected, luma 0.299, histogram [52,9,24], split 63/8/9 + 5 excluded".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient oracle", gradient_oracle),
        ("shape chain", shape_chain),
        ("convolution equivalence", conv_equivalence),
        ("cross-entropy exactness", loss_exactness),
        ("recipe constants", recipe_constants),
        ("overfit fixture", overfit),
        ("determinism and persistence", determinism),
        ("pipeline conformance", pipeline),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                println!("criterion {n} ({name}): FAIL - {detail}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
