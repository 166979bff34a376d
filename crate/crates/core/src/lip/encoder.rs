use serde::{Deserialize, Serialize};

use super::roi::{preprocess_rois, PreparedRois, RoiSequence};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Binder, ConvGeom, Graph, Initializer, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipEncoderConfig {
    /// Square crop size fed to the stem.
    pub roi_size: usize,
    pub stem_channels: usize,
    pub stem_kernel_t: usize,
    pub stem_kernel_s: usize,
    pub blocks: usize,
    pub tcn_levels: usize,
    pub tcn_kernel: usize,
    /// Width of each output step.
    pub lip_dim: usize,
    /// Number of output steps, independent of the frame count.
    pub lip_len: usize,
}

impl Default for LipEncoderConfig {
    fn default() -> Self {
        Self {
            roi_size: 88,
            stem_channels: 32,
            stem_kernel_t: 3,
            stem_kernel_s: 5,
            blocks: 2,
            tcn_levels: 2,
            tcn_kernel: 3,
            lip_dim: 64,
            lip_len: 16,
        }
    }
}

impl LipEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("lip encoder: {m}")));
        if self.roi_size == 0 || self.lip_dim == 0 || self.lip_len == 0 {
            return bad("roi_size, lip_dim and lip_len must be positive");
        }
        if self.stem_channels < 2 || self.stem_channels % 2 != 0 {
            return bad("stem_channels must be even and at least 2");
        }
        if self.stem_kernel_t % 2 == 0 || self.stem_kernel_s % 2 == 0 || self.tcn_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        Ok(())
    }

    fn stem_geom(&self, frames: usize, height: usize, width: usize) -> ConvGeom {
        ConvGeom {
            frames,
            height,
            width,
            c_in: 1,
            kt: self.stem_kernel_t,
            kh: self.stem_kernel_s,
            kw: self.stem_kernel_s,
            stride_h: 2,
            stride_w: 2,
            pad_t: self.stem_kernel_t / 2,
            pad_h: self.stem_kernel_s / 2,
            pad_w: self.stem_kernel_s / 2,
            dilation_t: 1,
        }
    }
}

/// The `V × C_lip` lip feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipFeature {
    pub e: Tensor,
}

impl LipFeature {
    pub fn new(e: Tensor) -> Result<Self> {
        if !e.is_finite() {
            return Err(Error::Numeric("lip feature has non-finite entries".into()));
        }
        Ok(Self { e })
    }

    pub fn len(&self) -> usize {
        self.e.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.e.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }
}

/// Seeded parameters, all named `lip.*`.
pub fn init_lip_params(cfg: &LipEncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let init = Initializer::new(seed);
    let mut p = ParamSet::new();
    let weight = |p: &mut ParamSet, name: String, rows: usize, cols: usize| {
        p.insert(format!("{name}.w"), init.fan_in(&format!("{name}.w"), rows, cols, rows));
        p.insert(format!("{name}.b"), init.fan_in(&format!("{name}.b"), 1, cols, rows));
    };
    let c = cfg.stem_channels;
    let h = c / 2;
    let k = cfg.stem_kernel_s;
    weight(&mut p, "lip.stem".into(), cfg.stem_kernel_t * k * k, c);
    for i in 0..cfg.blocks {
        weight(&mut p, format!("lip.block{i}.pw1"), h, h);
        weight(&mut p, format!("lip.block{i}.dw"), 9, h);
        weight(&mut p, format!("lip.block{i}.pw2"), h, h);
    }
    weight(&mut p, "lip.tcn.proj".into(), c, cfg.lip_dim);
    for l in 0..cfg.tcn_levels {
        for j in 1..=2 {
            weight(&mut p, format!("lip.tcn{l}.conv{j}"), cfg.tcn_kernel * cfg.lip_dim, cfg.lip_dim);
        }
    }
    Ok(p)
}

/// Interpolation weights mapping `m` steps onto `v` equispaced steps with
/// both endpoints aligned. Row `j` samples position `j·(m−1)/(v−1)`.
pub fn resample_matrix(m: usize, v: usize) -> Tensor {
    assert!(m >= 1 && v >= 1, "resample_matrix needs m, v >= 1");
    let mut r = Tensor::zeros(v, m);
    for j in 0..v {
        let pos = if v == 1 {
            (m - 1) as f64 / 2.0
        } else {
            j as f64 * (m - 1) as f64 / (v - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(m - 1);
        let frac = pos - i0 as f64;
        if frac > 0.0 && i0 + 1 < m {
            r.set(j, i0, 1.0 - frac);
            r.set(j, i0 + 1, frac);
        } else {
            r.set(j, i0, 1.0);
        }
    }
    r
}

/// Linear interpolation of an `M' × C` sequence onto `v` steps.
pub fn resample_temporal(seq: &Tensor, v: usize) -> Result<Tensor> {
    if seq.rows() == 0 || v == 0 {
        return Err(Error::Precondition("resampling needs non-empty input and output".into()));
    }
    if seq.rows() == v {
        return Ok(seq.clone());
    }
    Ok(resample_matrix(seq.rows(), v).matmul(seq))
}

/// Pads a short sequence on the left by repeating its first frame.
fn pad_frames(rois: &PreparedRois, min_frames: usize) -> (usize, Vec<f64>) {
    if rois.frames >= min_frames {
        return (rois.frames, rois.pixels.clone());
    }
    let per = rois.height * rois.width;
    let extra = min_frames - rois.frames;
    let mut px = Vec::with_capacity(min_frames * per);
    for _ in 0..extra {
        px.extend_from_slice(&rois.pixels[..per]);
    }
    px.extend_from_slice(&rois.pixels);
    (min_frames, px)
}

/// Builds the encoder on `g`: 3-D conv stem, channel-shuffle blocks,
/// spatial mean, residual dilated TCN, resampling to `lip_len` steps.
pub fn encode_graph(g: &mut Graph, b: &mut Binder<'_>, cfg: &LipEncoderConfig, rois: &PreparedRois) -> Result<Var> {
    cfg.validate()?;
    if rois.frames == 0 || rois.pixels.len() != rois.frames * rois.height * rois.width {
        return Err(Error::Precondition("prepared ROIs are inconsistent".into()));
    }
    let (frames, pixels) = pad_frames(rois, cfg.stem_kernel_t);
    let x = g.constant(Tensor::new(pixels.len(), 1, pixels));
    let geom = cfg.stem_geom(frames, rois.height, rois.width);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (w, bias) = (b.var(g, "lip.stem.w"), b.var(g, "lip.stem.b"));
    let stem = g.conv(x, w, bias, geom);
    let mut h = g.gelu(stem);

    let c = cfg.stem_channels;
    let half = c / 2;
    let left: Vec<usize> = (0..half).collect();
    let right: Vec<usize> = (half..c).collect();
    // interleave the two halves: output 2i+s comes from input s·half+i
    let shuffle: Vec<usize> = (0..half).flat_map(|i| [i, half + i]).collect();
    for i in 0..cfg.blocks {
        let keep = g.select_cols(h, left.clone());
        let mut y = g.select_cols(h, right.clone());
        let p = |s: &str| format!("lip.block{i}.{s}");
        let (w1, b1) = (b.var(g, &p("pw1.w")), b.var(g, &p("pw1.b")));
        y = g.linear(y, w1, Some(b1));
        y = g.gelu(y);
        let (wd, bd) = (b.var(g, &p("dw.w")), b.var(g, &p("dw.b")));
        y = g.depthwise(y, wd, bd, frames, oh, ow, 3);
        let (w2, b2) = (b.var(g, &p("pw2.w")), b.var(g, &p("pw2.b")));
        y = g.linear(y, w2, Some(b2));
        y = g.gelu(y);
        let joined = g.concat_cols(keep, y);
        h = g.select_cols(joined, shuffle.clone());
    }

    let pooled = g.group_mean(h, oh * ow);
    let (wp, bp) = (b.var(g, "lip.tcn.proj.w"), b.var(g, "lip.tcn.proj.b"));
    let mut t = g.linear(pooled, wp, Some(bp));
    for l in 0..cfg.tcn_levels {
        let geom = ConvGeom::temporal(frames, cfg.lip_dim, cfg.tcn_kernel, 1 << l);
        let mut y = t;
        for j in 1..=2 {
            let (w, bb) = (
                b.var(g, &format!("lip.tcn{l}.conv{j}.w")),
                b.var(g, &format!("lip.tcn{l}.conv{j}.b")),
            );
            y = g.conv(y, w, bb, geom);
            y = g.gelu(y);
        }
        t = g.add(t, y);
    }
    if frames == cfg.lip_len {
        return Ok(t);
    }
    let r = g.constant(resample_matrix(frames, cfg.lip_len));
    Ok(g.matmul(r, t))
}

/// Encodes already-prepared crops with inference-only bindings.
pub fn encode_prepared(rois: &PreparedRois, params: &ParamSet, cfg: &LipEncoderConfig) -> Result<LipFeature> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, &no_grad);
    let e = encode_graph(&mut g, &mut b, cfg, rois)?;
    LipFeature::new(g.value(e).clone())
}

/// Resizes and normalises `rois` to the configured crop size, then encodes.
pub fn encode(rois: &RoiSequence, params: &ParamSet, cfg: &LipEncoderConfig) -> Result<LipFeature> {
    let prepared = preprocess_rois(rois, (cfg.roi_size, cfg.roi_size))?;
    encode_prepared(&prepared, params, cfg)
}
