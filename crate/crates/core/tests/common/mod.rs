//! Reference implementations shared by the integration tests. They are
//! written from the textbook definitions with plain loops and f64
//! accumulation, independent of the library's im2col/GEMM kernels.

#![allow(dead_code)]

use pcn::data::{self, Dataset};
use pcn::Tensor;

/// `y[n, o, i, j] = sum_{c, a, b} x[n, c, i*s - p + a, j*s - p + b] * w[o, c, a, b]`.
pub fn naive_conv2d(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0f64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + yy as usize) * wd + xx as usize];
                                let wv = w.data()[((oc * c + ic) * k + ki) * k + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    y[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

/// Scatter form of the transposed convolution with kernel layout
/// `[C_out, C_in, k, k]`: every input element `x[n, o, i, j]` adds
/// `x * w[o, c, a, b]` to `y[n, c, i*s - p + a, j*s - p + b]`.
pub fn naive_conv_transpose2d(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, o, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c, k) = (ws[1], ws[2]);
    let mut y = vec![0.0f64; n * c * out_h * out_w];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data()[((b * o + oc) * h + i) * wd + j] as f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= out_h as isize || xx >= out_w as isize {
                                    continue;
                                }
                                let wv = w.data()[((oc * c + ic) * k + ki) * k + kj] as f64;
                                y[((b * c + ic) * out_h + yy as usize) * out_w + xx as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Minimal P5 reader written from the netpbm specification: magic `P5`,
/// whitespace-separated decimal width, height and maxval (comments start
/// with `#` and run to end of line), exactly one whitespace byte, then
/// `width * height` samples of one byte each when maxval < 256.
pub fn read_p5(bytes: &[u8]) -> Option<(usize, usize, usize, Vec<u8>)> {
    if bytes.get(..2)? != b"P5" {
        return None;
    }
    let mut i = 2;
    let mut nums = Vec::new();
    while nums.len() < 3 {
        let b = *bytes.get(i)?;
        if b == b'#' {
            while *bytes.get(i)? != b'\n' {
                i += 1;
            }
        } else if b.is_ascii_whitespace() {
            i += 1;
        } else if b.is_ascii_digit() {
            let start = i;
            while bytes.get(i)?.is_ascii_digit() {
                i += 1;
            }
            nums.push(std::str::from_utf8(&bytes[start..i]).ok()?.parse::<usize>().ok()?);
        } else {
            return None;
        }
    }
    if !bytes.get(i)?.is_ascii_whitespace() {
        return None;
    }
    i += 1;
    let (w, h, maxval) = (nums[0], nums[1], nums[2]);
    if maxval == 0 || maxval >= 256 {
        return None;
    }
    let raster = bytes.get(i..i + w * h)?.to_vec();
    if i + w * h != bytes.len() {
        return None;
    }
    Some((w, h, maxval, raster))
}

/// Synthetic train/test splits of side `side`, normalized with train moments.
pub fn synthetic_splits(classes: usize, n_train: usize, n_test: usize, side: usize, seed: u64) -> (Dataset, Dataset) {
    let train = data::synthetic_dataset_sized(classes, n_train, side, seed).unwrap();
    let test = data::synthetic_dataset_sized(classes, n_test, side, seed + 1).unwrap();
    (data::normalize(&train, &train), data::normalize(&test, &train))
}

/// Bytes of a CIFAR file with `n` records and `label_bytes` label bytes
/// each, filled from a simple LCG so every byte value appears.
pub fn cifar_bytes(n: usize, label_bytes: usize, classes: &[u8], seed: u32) -> Vec<u8> {
    let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    let mut next = || {
        state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        (state >> 24) as u8
    };
    let mut out = Vec::new();
    for _ in 0..n {
        for &limit in classes.iter().take(label_bytes) {
            out.push(next() % limit);
        }
        for _ in 0..3072 {
            out.push(next());
        }
    }
    out
}
