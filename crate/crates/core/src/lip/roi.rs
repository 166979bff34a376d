use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a sequence of mouth crops is stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiFormat {
    /// Directory of 8-bit grayscale PNG frames, read in file-name order.
    Png,
    /// Single file: `M, H, W` as little-endian `u32`, then `M·H·W` bytes.
    Raw,
}

/// Grayscale mouth crops with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSequence {
    frames: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    frame_rate_hz: f64,
}

impl RoiSequence {
    pub fn new(frames: Vec<Vec<f64>>, height: usize, width: usize, frame_rate_hz: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Precondition("ROI sequence has no frames".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Precondition("ROI frames must be non-empty".into()));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::Precondition("frame rate must be positive".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.len() != height * width {
                return Err(Error::Precondition(format!(
                    "frame {i} has {} pixels, expected {height}x{width}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Precondition(format!("frame {i} has pixels outside [0, 1]")));
            }
        }
        Ok(Self {
            frames,
            height,
            width,
            frame_rate_hz,
        })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

/// Resized, normalised crops ready for the encoder. Pixel values are
/// zero-mean and unit-variance over the whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRois {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `frames · height · width` values, frame-major then row-major.
    pub pixels: Vec<f64>,
}

/// Bilinear resize (half-pixel centres) to `target_hw`, then per-sequence
/// mean/std normalisation.
pub fn preprocess_rois(rois: &RoiSequence, target_hw: (usize, usize)) -> Result<PreparedRois> {
    if rois.is_empty() {
        return Err(Error::Precondition("ROI sequence has no frames".into()));
    }
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::Precondition("target size must be non-zero".into()));
    }
    let mut pixels = Vec::with_capacity(rois.len() * th * tw);
    for f in rois.frames() {
        pixels.extend(resize_bilinear(f, rois.height(), rois.width(), th, tw));
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let inv = if std > 1e-8 { 1.0 / std } else { 0.0 };
    for p in &mut pixels {
        *p = (*p - mean) * inv;
    }
    Ok(PreparedRois {
        frames: rois.len(),
        height: th,
        width: tw,
        pixels,
    })
}

pub fn resize_bilinear(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

pub fn write_raw_rois(path: &Path, rois: &RoiSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + rois.len() * rois.height() * rois.width());
    for d in [rois.len(), rois.height(), rois.width()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in rois.frames() {
        buf.extend(f.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_rois(path: &Path, frame_rate_hz: f64) -> Result<RoiSequence> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Precondition(format!("{}: truncated ROI header", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (m, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[12..];
    if body.len() != m * h * w {
        return Err(Error::Precondition(format!(
            "{}: header says {m}x{h}x{w} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let frames = body
        .chunks(h * w.max(1))
        .take(m)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    RoiSequence::new(frames, h, w, frame_rate_hz)
}

/// Reads every `.png` in `dir`, sorted by file name.
pub fn read_png_rois(dir: &Path, frame_rate_hz: f64) -> Result<RoiSequence> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    let mut size = None;
    for p in &paths {
        let file = File::open(p).map_err(|e| Error::io(p, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", p.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(format!("{}: {e}", p.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let data = &buf[..info.buffer_size()];
        // luminance from the first channel; grayscale input is the documented format
        let frame: Vec<f64> = data.chunks(channels).map(|px| px[0] as f64 / 255.0).collect();
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::Precondition(format!(
                    "{}: frame is {h}x{w}, expected {}x{}",
                    p.display(),
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        frames.push(frame);
    }
    let (h, w) = size.ok_or_else(|| Error::Precondition(format!("{}: no PNG frames", dir.display())))?;
    RoiSequence::new(frames, h, w, frame_rate_hz)
}

pub fn write_png_rois(dir: &Path, rois: &RoiSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in rois.frames().iter().enumerate() {
        let p = dir.join(format!("{i:05}.png"));
        let file = File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), rois.width() as u32, rois.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = f.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(())
}

pub fn read_rois(path: &Path, format: RoiFormat, frame_rate_hz: f64) -> Result<RoiSequence> {
    match format {
        RoiFormat::Png => read_png_rois(path, frame_rate_hz),
        RoiFormat::Raw => read_raw_rois(path, frame_rate_hz),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_frame(h: usize, w: usize, phase: f64) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.3 * ((x / w as f64) * 2.0 + phase).sin() * ((y / h as f64) * 1.5).cos()
            })
            .collect()
    }

    #[test]
    fn constant_frames_normalise_to_zero() {
        let rois = RoiSequence::new(vec![vec![0.4; 64]; 3], 8, 8, 25.0).unwrap();
        let p = preprocess_rois(&rois, (8, 8)).unwrap();
        assert_eq!(p.frames, 3);
        assert!(p.pixels.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frame_count_is_preserved() {
        for m in [1, 4, 9] {
            let rois = RoiSequence::new(vec![smooth_frame(10, 12, 0.3); m], 10, 12, 25.0).unwrap();
            let p = preprocess_rois(&rois, (16, 16)).unwrap();
            assert_eq!(p.frames, m);
            assert_eq!(p.pixels.len(), m * 256);
        }
    }

    #[test]
    fn up_then_down_resize_is_close() {
        let f = smooth_frame(22, 22, 0.7);
        let up = resize_bilinear(&f, 22, 22, 44, 44);
        let down = resize_bilinear(&up, 44, 44, 22, 22);
        let worst = f.iter().zip(&down).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn invalid_sequences_are_rejected() {
        assert!(RoiSequence::new(vec![], 4, 4, 25.0).is_err());
        assert!(RoiSequence::new(vec![vec![1.5; 16]], 4, 4, 25.0).is_err());
        assert!(RoiSequence::new(vec![vec![0.5; 15]], 4, 4, 25.0).is_err());
    }

    #[test]
    fn raw_and_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Vec<f64>> = (0..3)
            .map(|i| smooth_frame(6, 5, i as f64).iter().map(|v| (v * 255.0).round() / 255.0).collect())
            .collect();
        let rois = RoiSequence::new(frames, 6, 5, 25.0).unwrap();
        let raw = dir.path().join("x.roi");
        write_raw_rois(&raw, &rois).unwrap();
        assert_eq!(read_rois(&raw, RoiFormat::Raw, 25.0).unwrap(), rois);
        let pngs = dir.path().join("frames");
        write_png_rois(&pngs, &rois).unwrap();
        assert_eq!(read_rois(&pngs, RoiFormat::Png, 25.0).unwrap(), rois);

        std::fs::write(&raw, [1u8, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        assert!(read_raw_rois(&raw, 25.0).is_err());
    }
}
