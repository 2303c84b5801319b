//! On-disk video sequence layout and lossless image IO.
//!
//! A sequence directory holds `frames/00001.png ...` (8-bit RGB) and
//! `masks/00001.png ...` (8-bit indexed, palette entry 0 = background,
//! entry i = object i). Frame numbering starts at 1 and must be contiguous;
//! the mask for frame 1 is mandatory, later masks are optional ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub name: String,
    /// [3, H, W] f32 in [0, 1], one per frame.
    pub frames: Vec<Tensor<f32>>,
    /// Ground-truth masks where available; index 0 always Some.
    pub masks: Vec<Option<Mask<f32>>>,
    pub objects: usize,
}

impl VideoSequence {
    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_mask(&self) -> &Mask<f32> {
        self.masks[0].as_ref().expect("sequence without a first mask")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub split: String,
    pub objects: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub height: usize,
    pub width: usize,
    pub sequences: Vec<SuiteEntry>,
}

impl SuiteManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        fs::write(dir.join("suite.json"), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SuiteManifest> {
        let s = fs::read_to_string(dir.join("suite.json"))?;
        serde_json::from_str(&s).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a SuiteEntry> + 'a {
        self.sequences.iter().filter(move |e| e.split == split)
    }
}

fn frame_name(t: usize) -> String {
    format!("{:05}.png", t + 1)
}

/// A fixed 255-entry palette with visually distinct object colors; index 0 is
/// black background. Only indices up to the object count are ever written.
fn mask_palette() -> Vec<u8> {
    let mut pal = vec![0u8, 0, 0];
    for i in 1..=255usize {
        // low-discrepancy hue walk, constant brightness
        let hue = (i as f64 * 0.618_033_988_75) % 1.0;
        let (r, g, b) = hsv_to_rgb(hue, 0.85, 0.95);
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    ((r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

fn write_rgb_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(rgb)?;
    Ok(())
}

fn write_indexed_png(path: &Path, w: usize, h: usize, labels: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(mask_palette());
    enc.write_header()?.write_image_data(labels)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::Format(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Write frames, available masks, and nothing else.
pub fn save_sequence(root: &Path, seq: &VideoSequence) -> Result<()> {
    let dir = root.join(&seq.name);
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let (h, w) = (seq.height(), seq.width());
    for (t, frame) in seq.frames.iter().enumerate() {
        assert_eq!(frame.shape(), &[3, h, w], "inconsistent frame shape");
        let hw = h * w;
        let mut rgb = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                rgb[3 * i + c] = (frame.data()[c * hw + i] * 255.0).round() as u8;
            }
        }
        write_rgb_png(&dir.join("frames").join(frame_name(t)), w, h, &rgb)?;
    }
    for (t, mask) in seq.masks.iter().enumerate() {
        if let Some(m) = mask {
            write_indexed_png(&dir.join("masks").join(frame_name(t)), w, h, &m.label_map())?;
        }
    }
    Ok(())
}

/// Numbered PNGs from a directory, verified contiguous starting at 00001.
fn numbered_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let stem = match (path.extension(), path.file_stem()) {
            (Some(ext), Some(stem)) if ext == "png" => stem.to_string_lossy().to_string(),
            _ => continue,
        };
        let n: usize = stem.parse().map_err(|_| {
            CoreError::Dataset(format!("non-numeric frame name {}", path.display()))
        })?;
        found.insert(n, path);
    }
    if found.is_empty() {
        return Err(CoreError::Dataset(format!("no PNGs in {}", dir.display())));
    }
    for (want, (&got, _)) in (1..).zip(found.iter()) {
        if got != want {
            return Err(CoreError::Dataset(format!(
                "{}: expected frame {:05}, found {:05}",
                dir.display(),
                want,
                got
            )));
        }
    }
    Ok(found.into_iter().collect())
}

pub fn load_sequence(root: &Path, name: &str) -> Result<VideoSequence> {
    let dir = root.join(name);
    let frame_files = numbered_pngs(&dir.join("frames"))?;

    let mut frames = Vec::with_capacity(frame_files.len());
    let (mut h0, mut w0) = (0usize, 0usize);
    for (_, path) in &frame_files {
        let (w, h, color, buf) = read_png(path)?;
        if color != png::ColorType::Rgb {
            return Err(CoreError::Format(format!(
                "{}: frames must be 8-bit RGB",
                path.display()
            )));
        }
        if frames.is_empty() {
            (h0, w0) = (h, w);
        } else if (h, w) != (h0, w0) {
            return Err(CoreError::Dataset(format!(
                "{}: frame size {}x{} differs from {}x{}",
                path.display(),
                w,
                h,
                w0,
                h0
            )));
        }
        let hw = h * w;
        let mut data = vec![0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = buf[3 * i + c] as f32 / 255.0;
            }
        }
        frames.push(Tensor::new(vec![3, h, w], data));
    }

    // masks: present for any subset of frames, labels decide the object count
    let masks_dir = dir.join("masks");
    let mut labels_by_frame: Vec<Option<Vec<u8>>> = vec![None; frames.len()];
    let mut objects = 0usize;
    if masks_dir.is_dir() {
        for entry in fs::read_dir(&masks_dir)? {
            let path = entry?.path();
            if path.extension().map_or(true, |e| e != "png") {
                continue;
            }
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            let n: usize = stem.parse().map_err(|_| {
                CoreError::Dataset(format!("non-numeric mask name {}", path.display()))
            })?;
            if n == 0 || n > frames.len() {
                return Err(CoreError::Dataset(format!(
                    "mask {:05} has no matching frame (sequence has {})",
                    n,
                    frames.len()
                )));
            }
            let (w, h, color, buf) = read_png(&path)?;
            if (h, w) != (h0, w0) {
                return Err(CoreError::Dataset(format!(
                    "{}: mask size differs from frames",
                    path.display()
                )));
            }
            let labels = match color {
                png::ColorType::Indexed | png::ColorType::Grayscale => buf,
                other => {
                    return Err(CoreError::Format(format!(
                        "{}: masks must be indexed or grayscale, got {:?}",
                        path.display(),
                        other
                    )))
                }
            };
            objects = objects.max(*labels.iter().max().unwrap_or(&0) as usize);
            labels_by_frame[n - 1] = Some(labels);
        }
    }
    if labels_by_frame[0].is_none() {
        return Err(CoreError::Dataset(format!(
            "{}: first-frame mask masks/00001.png is mandatory",
            dir.display()
        )));
    }
    if objects == 0 {
        return Err(CoreError::Dataset(format!(
            "{}: first-frame mask has no objects",
            dir.display()
        )));
    }
    let masks = labels_by_frame
        .into_iter()
        .map(|l| l.map(|labels| Mask::from_label_map(&labels, h0, w0, objects)))
        .collect();

    Ok(VideoSequence {
        name: name.to_string(),
        frames,
        masks,
        objects,
    })
}

/// Read a single indexed/grayscale PNG back as a label map.
pub fn load_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_png(path)?;
    match color {
        png::ColorType::Indexed | png::ColorType::Grayscale => Ok((h, w, buf)),
        other => Err(CoreError::Format(format!(
            "{}: expected indexed or grayscale PNG, got {:?}",
            path.display(),
            other
        ))),
    }
}

/// 8-bit binary PGM (P5), used for soft-mask and heat-map exports.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    fs::write(path, out)?;
    Ok(())
}

/// Raw f32 dump with a one-line text header: `dims d0 d1 ...\n` followed by
/// little-endian values. Keeps full precision next to the viewable PGM.
pub fn write_raw_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), shape.iter().product::<usize>());
    let mut out = format!(
        "dims {}\n",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    )
    .into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Predicted label maps as indexed PNGs under `<out>/<seq>/NNNNN.png`.
pub fn save_predictions(out: &Path, name: &str, preds: &[Mask<f32>]) -> Result<()> {
    let dir = out.join(name);
    fs::create_dir_all(&dir)?;
    for (t, m) in preds.iter().enumerate() {
        write_indexed_png(&dir.join(frame_name(t)), m.width(), m.height(), &m.label_map())?;
    }
    Ok(())
}
