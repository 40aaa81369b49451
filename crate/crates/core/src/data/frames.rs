//! Frame-directory decoding into grayscale clips.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const FRAME_COUNT: usize = 50;
pub const FRAME_SIZE: [usize; 2] = [480, 640];

/// Color to gray conversion for P6 frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grayscale {
    /// `0.299 R + 0.587 G + 0.114 B`
    #[default]
    Luma,
    /// `(R + G + B) / 3`
    Mean,
}

/// What to do when frames do not have the target size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Reject frames of any other size.
    #[default]
    Exact,
    /// Center-crop larger axes and zero-pad smaller ones.
    CenterFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub count: usize,
    /// `[height, width]`; `None` accepts the native size of the first frame.
    pub size: Option<[usize; 2]>,
    pub policy: FramePolicy,
    pub grayscale: Grayscale,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            count: FRAME_COUNT,
            size: Some(FRAME_SIZE),
            policy: FramePolicy::Exact,
            grayscale: Grayscale::Luma,
        }
    }
}

/// Ordinal-sorted `frame_NNNNN.pgm|ppm` files in `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some((stem, ext)) = name.rsplit_once('.') else {
            continue;
        };
        if ext != "pgm" && ext != "ppm" {
            continue;
        }
        let Some(ordinal) = stem.strip_prefix("frame_") else {
            continue;
        };
        if let Ok(n) = ordinal.parse::<u64>() {
            frames.push((n, path));
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// A decoded frame as row-major gray values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

/// Decode one binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn decode_frame(path: &Path, grayscale: Grayscale) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |detail: String| Error::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| decode_err(e.to_string()))?;
    match decoder.subtype() {
        PnmSubtype::Graymap(SampleEncoding::Binary) | PnmSubtype::Pixmap(SampleEncoding::Binary) => {}
        other => {
            return Err(decode_err(format!(
                "unsupported netpbm subtype {:?}, expected binary P5 or P6",
                other
            )))
        }
    }
    let maxval = decoder.header().maximal_sample();
    if maxval != 255 {
        return Err(decode_err(format!("maxval {maxval}, expected 255")));
    }
    let image = DynamicImage::from_decoder(decoder).map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = (image.width() as usize, image.height() as usize);
    let pixels = match image {
        DynamicImage::ImageLuma8(img) => img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb8(img) => img
            .into_raw()
            .chunks_exact(3)
            .map(|c| gray(c[0], c[1], c[2], grayscale))
            .collect(),
        other => return Err(decode_err(format!("unexpected pixel layout {:?}", other.color()))),
    };
    Ok(Frame {
        height,
        width,
        pixels,
    })
}

fn gray(r: u8, g: u8, b: u8, mode: Grayscale) -> f32 {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = match mode {
        Grayscale::Luma => 0.299 * r + 0.587 * g + 0.114 * b,
        Grayscale::Mean => (r + g + b) / 3.0,
    };
    (y / 255.0) as f32
}

// Copy the centered overlap of `src` into a zeroed `h x w` buffer.
fn center_fit(frame: &Frame, h: usize, w: usize, out: &mut [f32]) {
    let (sy, dy) = offsets(frame.height, h);
    let (sx, dx) = offsets(frame.width, w);
    let rows = frame.height.min(h);
    let cols = frame.width.min(w);
    for r in 0..rows {
        let src = &frame.pixels[(sy + r) * frame.width + sx..][..cols];
        out[(dy + r) * w + dx..][..cols].copy_from_slice(src);
    }
}

// (source offset, destination offset) along one axis
fn offsets(src: usize, dst: usize) -> (usize, usize) {
    if src >= dst {
        ((src - dst) / 2, 0)
    } else {
        (0, (dst - src) / 2)
    }
}

/// The first `spec.count` frames of `dir` as a `(1, count, H, W)` clip.
pub fn load_clip(dir: &Path, spec: &FrameSpec) -> Result<Tensor<f32>> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("frame count must be at least 1".into()));
    }
    let files = list_frames(dir)?;
    if files.len() < spec.count {
        return Err(Error::InsufficientFrames {
            dir: dir.to_path_buf(),
            found: files.len(),
            needed: spec.count,
        });
    }
    let frames = exec::map_indices(spec.count, |i| decode_frame(&files[i], spec.grayscale))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (h0, w0) = (frames[0].height, frames[0].width);
    if let Some((i, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| (f.height, f.width) != (h0, w0))
    {
        return Err(Error::InconsistentFrames {
            dir: dir.to_path_buf(),
            detail: format!(
                "frame {i} is {}x{}, frame 0 is {h0}x{w0}",
                f.height, f.width
            ),
        });
    }
    let [h, w] = spec.size.unwrap_or([h0, w0]);
    if (h0, w0) != (h, w) && spec.policy == FramePolicy::Exact {
        return Err(Error::InconsistentFrames {
            dir: dir.to_path_buf(),
            detail: format!("frames are {h0}x{w0}, expected {h}x{w}"),
        });
    }
    let mut data = vec![0.0f32; spec.count * h * w];
    for (frame, out) in frames.iter().zip(data.chunks_mut(h * w)) {
        if (frame.height, frame.width) == (h, w) {
            out.copy_from_slice(&frame.pixels);
        } else {
            center_fit(frame, h, w, out);
        }
    }
    Tensor::new(vec![1, spec.count, h, w], data)
}

/// Write `frames` (each `h*w` values in `[0, 1]`) as `frame_NNNNN.pgm`.
pub fn write_pgm_frames(dir: &Path, frames: &[Vec<f32>], h: usize, w: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in frames.iter().enumerate() {
        let raw: Vec<u8> = frame
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = GrayImage::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {i} is not {h}x{w}")))?;
        save_pnm(&DynamicImage::ImageLuma8(img), &dir.join(format!("frame_{i:05}.pgm")))?;
    }
    Ok(())
}

/// Write one RGB frame as binary PPM.
pub fn write_ppm(path: &Path, img: RgbImage) -> Result<()> {
    save_pnm(&DynamicImage::ImageRgb8(img), path)
}

fn save_pnm(img: &DynamicImage, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let subtype = match img {
        DynamicImage::ImageRgb8(_) => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => PnmSubtype::Graymap(SampleEncoding::Binary),
    };
    let encoder = image::codecs::pnm::PnmEncoder::new(&mut buf).with_subtype(subtype);
    img.write_with_encoder(encoder).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
