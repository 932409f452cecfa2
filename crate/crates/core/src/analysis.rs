//! Behavioural analyses of a trained network: prediction-error trajectories,
//! error-derived saliency maps and the cosine between each recurrent update
//! and the classification-loss gradient, plus their file formats.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{PcnError, Result};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::Model;

/// `values[layer][cycle]`; layers and cycles are written 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCycleMatrix {
    pub values: Vec<Vec<f64>>,
}

impl LayerCycleMatrix {
    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn cycles(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `layer,cycle,value` with one row per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,cycle,value\n");
        for (l, row) in self.values.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", l + 1, t + 1, v);
            }
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |d: String| PcnError::Format {
            what: "layer/cycle csv",
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next() != Some("layer,cycle,value") {
            return Err(bad("missing header".into()));
        }
        let mut values: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let [l, t, v] = f[..] else {
                return Err(bad(format!("bad row `{line}`")));
            };
            let (l, t): (usize, usize) = match (l.parse(), t.parse()) {
                (Ok(l), Ok(t)) if l >= 1 && t >= 1 => (l, t),
                _ => return Err(bad(format!("bad indices in `{line}`"))),
            };
            let v: f64 = v.parse().map_err(|_| bad(format!("bad value in `{line}`")))?;
            if values.len() < l {
                values.resize(l, Vec::new());
            }
            let row = &mut values[l - 1];
            if row.len() != t - 1 {
                return Err(bad(format!("rows out of order at `{line}`")));
            }
            row.push(v);
        }
        Ok(Self { values })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PcnError::io(path, e))
    }
}

/// Per-example L2 norms over each example's `[C, H, W]` slice.
fn example_norms<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    t.data()
        .chunks_exact(per)
        .map(|c| c.iter().map(|&v| v.to_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Mean over examples of `||e_l(t)||_2` for every block `l` and cycle
/// `t = 1..=cycles`, computed in batches of `batch_size`.
pub fn error_trajectory<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    cycles: usize,
    batch_size: usize,
) -> Result<LayerCycleMatrix> {
    let [n, c, h, w] = images.dims4("error_trajectory")?;
    let per = c * h * w;
    let mut sums = vec![vec![0.0f64; cycles]; model.blocks.len()];
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let x = Tensor::from_vec(&[end - start, c, h, w], images.data()[start * per..end * per].to_vec())?;
        let traces = model
            .forward(&x, Some(cycles), true)?
            .traces
            .expect("traces requested");
        for (l, tr) in traces.iter().enumerate() {
            for (t, e) in tr.e.iter().enumerate() {
                sums[l][t] += example_norms(e).iter().sum::<f64>();
            }
        }
    }
    Ok(LayerCycleMatrix {
        values: sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / n as f64).collect())
            .collect(),
    })
}

/// Bilinear resize of an `[h, w]` map to `[out_h, out_w]` with half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max normalize to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &mut [f64]) {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12) || !range.is_finite() {
        map.fill(0.0);
        return;
    }
    for v in map {
        *v = (*v - lo) / range;
    }
}

/// Combine final-cycle error maps `[1, C, h, w]` into an `[H, W]` map:
/// channel L2 norm per location, bilinear resize, mean over maps, min-max
/// normalization.
pub fn saliency_from_errors<T: Scalar>(errors: &[&Tensor<T>], out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; out_h * out_w];
    for e in errors {
        let [n, c, h, w] = e.dims4("saliency")?;
        if n != 1 {
            return Err(PcnError::shape("saliency", "expected a single image"));
        }
        let plane = h * w;
        let mut norms = vec![0.0; plane];
        for ch in 0..c {
            for (acc, &v) in norms.iter_mut().zip(&e.data()[ch * plane..(ch + 1) * plane]) {
                *acc += v.to_f64().powi(2);
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        for (a, v) in acc.iter_mut().zip(resize_bilinear(&norms, h, w, out_h, out_w)) {
            *a += v;
        }
    }
    if !errors.is_empty() {
        let k = errors.len() as f64;
        acc.iter_mut().for_each(|v| *v /= k);
    }
    min_max_normalize(&mut acc);
    Ok(acc)
}

/// Saliency map `[H, W]` in `[0, 1]` of one image `[1, 3, H, W]` using the
/// model's own cycle count. Zero cycles give an all-zero map.
pub fn saliency_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<f64>> {
    let [n, _, h, w] = image.dims4("saliency_map")?;
    if n != 1 {
        return Err(PcnError::shape("saliency_map", format!("expected one image, got {n}")));
    }
    let traces = model
        .forward(image, None, true)?
        .traces
        .expect("traces requested");
    let finals: Vec<&Tensor<T>> = traces.iter().filter_map(|t| t.e.last()).collect();
    Tensor::from_vec(&[h, w], saliency_from_errors(&finals, h, w)?)
}

/// `<a, b> / (|a| |b|)`, or `None` when either norm is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = aa.sqrt() * bb.sqrt();
    (denom > 0.0 && denom.is_finite()).then(|| (ab / denom).clamp(-1.0, 1.0))
}

/// Batch-mean cosine between each update `r_l(t+1) - r_l(t)` and the
/// gradient of the classification loss with respect to `r_l(t)`, for
/// `t = 0..cycles-1` (written as cycles `1..=cycles`).
///
/// The gradient comes from restarting the network at `r_l(t)`: the block's
/// bypass merge and pool follow, then every downstream block runs its full
/// cycles. Examples whose update or gradient vanishes are excluded; an
/// entry with no remaining examples is NaN.
pub fn cosine_diagnostic<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cycles: usize,
) -> Result<LayerCycleMatrix> {
    let n = x.dims4("cosine_diagnostic")?[0];
    if labels.len() != n {
        return Err(PcnError::shape("cosine_diagnostic", "one label per example"));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let full = model.forward_tape(&mut tape, &vars, xv, cycles)?;

    let mut values = Vec::with_capacity(model.blocks.len());
    for (l, (block, bt)) in model.blocks.iter().zip(&full.blocks).enumerate() {
        let x_bn = tape.value(bt.x_bn).clone();
        let mut row = Vec::with_capacity(cycles);
        for t in 0..cycles {
            let r_t = tape.value(bt.r[t]);
            let delta = tape.value(bt.r[t + 1]).zip_map(r_t, "cosine_diagnostic", |a, b| a - b)?;

            let mut sub = Tape::new();
            let sv = model.register(&mut sub);
            let r_leaf = sub.leaf(r_t.clone());
            let xbn_leaf = sub.leaf(x_bn.clone());
            let y = block.merge_tape(&mut sub, &sv.blocks[l], r_leaf, xbn_leaf)?;
            let logits = model.tail_tape(&mut sub, &sv, l + 1, y, cycles)?;
            let loss = sub.softmax_cross_entropy(logits, labels)?;
            let grad = sub.backward(loss)?.get_or_zeros(&sub, r_leaf);

            let per = delta.numel() / n;
            let cos: Vec<f64> = delta
                .data()
                .chunks_exact(per)
                .zip(grad.data().chunks_exact(per))
                .filter_map(|(d, g)| cosine(d, g))
                .collect();
            row.push(if cos.is_empty() {
                f64::NAN
            } else {
                cos.iter().sum::<f64>() / cos.len() as f64
            });
        }
        values.push(row);
    }
    Ok(LayerCycleMatrix { values })
}

/// Fraction of finite entries that are negative, and how many were finite.
pub fn negative_fraction(m: &LayerCycleMatrix) -> (f64, usize) {
    let finite: Vec<f64> = m.values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (0.0, 0);
    }
    let neg = finite.iter().filter(|&&v| v < 0.0).count();
    (neg as f64 / finite.len() as f64, finite.len())
}

/// Binary PGM (P5, maxval 255) of a map in `[0, 1]`.
pub fn to_pgm(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Raw dump: `u32` H, `u32` W, then `f32` values, all little-endian.
pub fn to_raw_f32(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.len());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in map {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// A decoded netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Samples in file order (interleaved RGB for P6).
    pub samples: Vec<u16>,
}

fn netpbm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Netpbm> {
    let bad = |d: &str| PcnError::Format {
        what: "netpbm",
        detail: d.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let per = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let raster = bytes
        .get(pos..pos + count * per)
        .ok_or_else(|| bad("raster is truncated"))?;
    let samples: Vec<u16> = if per == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(Netpbm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// Parse a binary greyscale PGM (P5).
pub fn parse_pgm(bytes: &[u8]) -> Result<Netpbm> {
    netpbm(bytes, b"P5", 1)
}

/// Parse a binary PPM (P6) into `[1, 3, H, W]` with samples scaled to `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = netpbm(bytes, b"P6", 3)?;
    let plane = img.width * img.height;
    let scale = img.maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.samples.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / scale;
        }
    }
    Tensor::from_vec(&[1, 3, img.height, img.width], data)
}
