//! Synthetic labeled clips with class-distinct motion: blobs that travel
//! (progressive), circle in place (non-progressive) or stay put (immotile).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::frames::write_pgm_frames;
use crate::data::tabular::FEATURES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub per_class: [usize; 3],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    pub seed: u64,
    pub tabular: bool,
    /// Write manifest rows only, without frame files.
    pub manifest_only: bool,
}

impl FixtureSpec {
    /// Eight 16x64x80 clips.
    pub fn overfit() -> Self {
        FixtureSpec {
            per_class: [3, 3, 2],
            frames: 16,
            height: 64,
            width: 80,
            blobs: 4,
            seed: 7,
            tabular: false,
            manifest_only: false,
        }
    }

    /// 85 participants in the 52/9/24 class ratio.
    pub fn cohort() -> Self {
        FixtureSpec {
            per_class: [52, 9, 24],
            frames: 50,
            height: 24,
            width: 32,
            blobs: 2,
            seed: 11,
            tabular: true,
            manifest_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub manifest: PathBuf,
    pub tabular: Option<PathBuf>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Random percentages summing to 100 whose strict maximum is `class`.
pub fn motility_for<R: Rng + ?Sized>(class: usize, rng: &mut R) -> [f64; 3] {
    let top = rng.random_range(510..800) as f64 / 10.0;
    let rest = 100.0 - top;
    let a = (rng.random_range(0.0..rest) * 10.0).round() / 10.0;
    let b = ((rest - a) * 10.0).round() / 10.0;
    let mut m = [0.0; 3];
    m[class] = top;
    let others: Vec<usize> = (0..3).filter(|&i| i != class).collect();
    m[others[0]] = a;
    m[others[1]] = b;
    m
}

/// Frames of one clip, each `height * width` values in `[0, 1]`.
pub fn synth_clip<R: Rng + ?Sized>(class: usize, spec: &FixtureSpec, rng: &mut R) -> Vec<Vec<f32>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let noise = Normal::new(0.0, 0.03).expect("noise");
    let sigma = 3.0f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..spec.blobs)
        .map(|_| {
            let y = rng.random_range(0.2 * h..0.8 * h);
            let x = rng.random_range(0.2 * w..0.8 * w);
            let angle = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (y, x, angle, phase)
        })
        .collect();
    (0..spec.frames)
        .map(|t| {
            let t = t as f64;
            let centers: Vec<(f64, f64)> = blobs
                .iter()
                .map(|&(y, x, angle, phase)| match class {
                    0 => (
                        (y + 2.5 * t * angle.sin()).rem_euclid(h),
                        (x + 2.5 * t * angle.cos()).rem_euclid(w),
                    ),
                    1 => {
                        let a = phase + t * PI / 2.0;
                        (y + 4.0 * a.sin(), x + 4.0 * a.cos())
                    }
                    _ => (y, x),
                })
                .collect();
            let mut frame = Vec::with_capacity(spec.height * spec.width);
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let mut v = 0.1 + noise.sample(rng);
                    for &(cy, cx) in &centers {
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        v += 0.8 * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    frame.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            frame
        })
        .collect()
}

/// Write `manifest.csv`, optional `tabular.csv` and `clips/<id>/` under
/// `root`. Deterministic in `spec`.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::new();
    for (class, &n) in spec.per_class.iter().enumerate() {
        labels.extend(std::iter::repeat_n(class, n));
    }
    // interleave classes so that ids do not reveal labels
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let ids: Vec<String> = (0..labels.len()).map(|i| format!("s{:03}", i + 1)).collect();

    let mut manifest = String::from("participant_id,frames_dir,progressive,non_progressive,immotile\n");
    for (id, &class) in ids.iter().zip(&labels) {
        let m = motility_for(class, &mut rng);
        let dir = format!("clips/{id}");
        writeln!(manifest, "{id},{dir},{:.1},{:.1},{:.1}", m[0], m[1], m[2]).unwrap();
        if !spec.manifest_only {
            let frames = synth_clip(class, spec, &mut rng);
            write_pgm_frames(&root.join(&dir), &frames, spec.height, spec.width)?;
        }
    }
    let manifest_path = root.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let tabular = if spec.tabular {
        let path = root.join("tabular.csv");
        let mut text = String::from("ID");
        for f in FEATURES {
            write!(text, ";{f}").unwrap();
        }
        text.push('\n');
        let normal = Normal::new(0.0, 1.0).expect("normal");
        for (id, &class) in ids.iter().zip(&labels) {
            text.push_str(id);
            for j in 0..FEATURES.len() {
                let shift = if j % 3 == class { 1.5 } else { 0.0 };
                let v: f64 = 10.0 + shift + normal.sample(&mut rng);
                write!(text, ";{v:.4}").unwrap();
            }
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(Fixture {
        manifest: manifest_path,
        tabular,
        ids,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_histogram, derive_label, load_clip, read_manifest, read_tabular, FrameSpec};

    #[test]
    fn motility_matches_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..300 {
            let class = i % 3;
            let m = motility_for(class, &mut rng);
            assert_eq!(derive_label(m), class, "{m:?}");
            let total: f64 = m.iter().sum();
            assert!((total - 100.0).abs() < 0.2, "{m:?}");
        }
    }

    #[test]
    fn overfit_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            frames: 4,
            ..FixtureSpec::overfit()
        };
        let fx = write_fixture(dir.path(), &spec).unwrap();
        let rows = read_manifest(&fx.manifest, b',').unwrap();
        assert_eq!(class_histogram(&rows), [3, 3, 2]);
        let frames = FrameSpec {
            count: 4,
            size: Some([64, 80]),
            ..FrameSpec::default()
        };
        let clip = load_clip(&rows[0].frames_dir, &frames).unwrap();
        assert_eq!(clip.shape(), [1, 4, 64, 80]);
        assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = tempfile::tempdir().unwrap();
        let fx2 = write_fixture(again.path(), &spec).unwrap();
        assert_eq!(fx.labels, fx2.labels);
        let clip2 = load_clip(&read_manifest(&fx2.manifest, b',').unwrap()[0].frames_dir, &frames).unwrap();
        assert_eq!(clip.data(), clip2.data());
    }

    #[test]
    fn cohort_fixture_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let fx = write_fixture(dir.path(), &FixtureSpec::cohort()).unwrap();
        let rows = read_manifest(&fx.manifest, b',').unwrap();
        assert_eq!(class_histogram(&rows), [52, 9, 24]);
        let table = read_tabular(fx.tabular.as_ref().unwrap(), b';').unwrap();
        assert_eq!(table.records.len(), 85);
    }

    #[test]
    fn motion_patterns_differ() {
        let spec = FixtureSpec {
            frames: 6,
            blobs: 1,
            ..FixtureSpec::overfit()
        };
        let motion = |class| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let f = synth_clip(class, &spec, &mut rng);
            let d: f32 = f[0].iter().zip(&f[5]).map(|(a, b)| (a - b).abs()).sum();
            d
        };
        let still = motion(2);
        assert!(motion(0) > still + 40.0, "{} vs {still}", motion(0));
        assert!(motion(1) > still + 40.0, "{} vs {still}", motion(1));
    }
}
