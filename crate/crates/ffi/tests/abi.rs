use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use motility3d::data::frames::write_pgm_frames;
use motility3d_ffi::*;

fn last_error() -> String {
    let p = m3d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn build(arch: &str, seed: u64) -> *mut M3dModel {
    let arch = CString::new(arch).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { m3d_model_build(arch.as_ptr(), seed, &mut m) }, M3dStatus::Ok);
    assert!(!m.is_null());
    m
}

fn small_clip(seed: u32) -> *mut M3dClip {
    let (t, h, w) = (4, 16, 16);
    let vals: Vec<f32> = (0..t * h * w)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0)
        .collect();
    let mut c = ptr::null_mut();
    assert_eq!(
        unsafe { m3d_clip_from_values(vals.as_ptr(), t, h, w, &mut c) },
        M3dStatus::Ok
    );
    c
}

#[test]
fn build_reports_param_count_and_arch() {
    for (arch, count, tab) in [
        ("resnet18_3d", 33_161_539u64, 0),
        ("resnet18_3d_tab", 33_204_943, 1),
    ] {
        let m = build(arch, 0);
        let mut n = 0u64;
        let mut uses = -1;
        unsafe {
            assert_eq!(m3d_model_param_count(m, &mut n), M3dStatus::Ok);
            assert_eq!(m3d_model_uses_tabular(m, &mut uses), M3dStatus::Ok);
            assert_eq!(CStr::from_ptr(m3d_model_arch(m)).to_str().unwrap(), arch);
            m3d_model_free(m);
        }
        assert_eq!(n, count);
        assert_eq!(uses, tab);
    }
}

#[test]
fn unknown_arch_and_null_pointers() {
    let bad = CString::new("resnet50_3d").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { m3d_model_build(bad.as_ptr(), 0, &mut m) },
        M3dStatus::InvalidArgument
    );
    assert!(m.is_null());
    assert!(last_error().contains("resnet50_3d"));

    assert_eq!(
        unsafe { m3d_model_build(ptr::null(), 0, &mut m) },
        M3dStatus::NullPointer
    );
    let mut n = 0u64;
    assert_eq!(
        unsafe { m3d_model_param_count(ptr::null(), &mut n) },
        M3dStatus::NullPointer
    );
    unsafe {
        m3d_model_free(ptr::null_mut());
        m3d_clip_free(ptr::null_mut());
        assert!(m3d_model_arch(ptr::null()).is_null());
    }
}

#[test]
fn predict_probabilities_and_tabular_contract() {
    let m = build("resnet18_3d", 3);
    let c = small_clip(1);
    let mut p = M3dPrediction::default();
    unsafe {
        assert_eq!(m3d_model_predict(m, c, ptr::null(), 0, &mut p), M3dStatus::Ok);
        let s: f64 = p.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(p.class_index < 3);
        let best = p.probabilities[p.class_index as usize];
        assert!(p.probabilities.iter().all(|&q| q <= best));

        let row = [0.0f32; 19];
        assert_eq!(
            m3d_model_predict(m, c, row.as_ptr(), 19, &mut p),
            M3dStatus::InvalidArgument
        );
        m3d_model_free(m);

        let m = build("resnet18_3d_tab", 3);
        assert_eq!(
            m3d_model_predict(m, c, ptr::null(), 0, &mut p),
            M3dStatus::InvalidArgument
        );
        assert_eq!(m3d_model_predict(m, c, row.as_ptr(), 19, &mut p), M3dStatus::Ok);
        assert_eq!(
            m3d_model_predict(m, c, row.as_ptr(), 18, &mut p),
            M3dStatus::InvalidArgument
        );
        m3d_model_free(m);
        m3d_clip_free(c);
    }
}

#[test]
fn save_load_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.m3dc").to_str().unwrap()).unwrap();
    let m = build("resnet18_3d", 9);
    let c = small_clip(4);
    let (mut a, mut b) = (M3dPrediction::default(), M3dPrediction::default());
    unsafe {
        assert_eq!(m3d_model_save(m, path.as_ptr()), M3dStatus::Ok);
        let mut l = ptr::null_mut();
        assert_eq!(m3d_model_load(path.as_ptr(), &mut l), M3dStatus::Ok);
        assert_eq!(m3d_model_predict(m, c, ptr::null(), 0, &mut a), M3dStatus::Ok);
        assert_eq!(m3d_model_predict(l, c, ptr::null(), 0, &mut b), M3dStatus::Ok);
        m3d_model_free(l);
        m3d_model_free(m);
        m3d_clip_free(c);
    }
    assert_eq!(a.class_index, b.class_index);
    assert_eq!(a.probabilities, b.probabilities);
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.m3dc");
    std::fs::write(&p, b"not a checkpoint at all").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { m3d_model_load(path.as_ptr(), &mut m) },
        M3dStatus::Checkpoint
    );
    assert!(m.is_null());
    assert!(last_error().contains("M3DC"));
}

#[test]
fn clip_load_from_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<Vec<f32>> = (0..5).map(|i| vec![(i * 50) as f32 / 255.0; 6 * 8]).collect();
    write_pgm_frames(dir.path(), &frames, 6, 8).unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    let mut shape = [0usize; 4];
    unsafe {
        assert_eq!(m3d_clip_load(d.as_ptr(), 5, 0, 0, &mut c), M3dStatus::Ok);
        assert_eq!(m3d_clip_shape(c, shape.as_mut_ptr()), M3dStatus::Ok);
        assert_eq!(shape, [1, 5, 6, 8]);
        let v = std::slice::from_raw_parts(m3d_clip_data(c), 5 * 6 * 8);
        assert_eq!(v[0], 0.0);
        assert!((v[4 * 48] - 200.0 / 255.0).abs() < 1e-6);
        m3d_clip_free(c);

        assert_eq!(m3d_clip_load(d.as_ptr(), 6, 0, 0, &mut c), M3dStatus::Data);
        assert!(c.is_null());
        assert_eq!(m3d_clip_load(d.as_ptr(), 5, 6, 0, &mut c), M3dStatus::InvalidArgument);
    }
}

#[test]
fn schedule_and_class_weight_helpers() {
    let mut lr = 0.0;
    unsafe {
        assert_eq!(m3d_one_cycle_lr(1e-3, 100, 0, &mut lr), M3dStatus::Ok);
        assert!((lr - 4e-5).abs() < 1e-15);
        assert_eq!(m3d_one_cycle_lr(1e-3, 100, 30, &mut lr), M3dStatus::Ok);
        assert_eq!(lr, 1e-3);
        assert_eq!(m3d_one_cycle_lr(1.0, 100, 0, &mut lr), M3dStatus::InvalidArgument);
    }
    let counts = [52usize, 9, 24];
    let mut w = [0.0f64; 3];
    unsafe {
        assert_eq!(m3d_class_weights(counts.as_ptr(), 3, w.as_mut_ptr()), M3dStatus::Ok);
    }
    for (wi, ni) in w.iter().zip(counts) {
        assert!((wi - 85.0 / (3.0 * ni as f64)).abs() < 1e-12);
    }
    let zero = [3usize, 0, 2];
    assert_eq!(
        unsafe { m3d_class_weights(zero.as_ptr(), 3, w.as_mut_ptr()) },
        M3dStatus::Data
    );
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/motility3d.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\n\
             int main(void) {{\n\
               M3dModel *m = 0; M3dPrediction p; uint64_t n;\n\
               if (m3d_model_build(\"resnet18_3d\", 0, &m) != M3D_STATUS_OK) return 1;\n\
               m3d_model_param_count(m, &n); (void)p; m3d_model_free(m);\n\
               return 0;\n\
             }}\n"
        ),
    )
    .unwrap();
    let out = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
