//! Feature normalization and dihedral (square-symmetry) augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Per-channel z-score statistics of the training features.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose raw std was below the floor (constant channels).
    pub floored: Vec<usize>,
}

/// Smallest allowed per-channel std; constant channels are floored here.
pub const STD_FLOOR: f64 = 1e-8;

/// Two-pass per-channel mean/std over `[C,H,W]` feature stacks.
pub fn compute_norm_stats(cases: &[&Tensor]) -> Result<NormStats, String> {
    if cases.is_empty() {
        return Err("norm stats need at least one case".into());
    }
    let shape = cases[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(format!("expected [C,H,W] features, got {shape:?}"));
    }
    let c = shape[0];
    let plane = shape[1] * shape[2];
    for t in cases {
        if t.shape() != shape {
            return Err(format!("inconsistent feature shapes {:?} vs {shape:?}", t.shape()));
        }
    }
    let n = (cases.len() * plane) as f64;
    let mut mean = alloc::vec![0.0; c];
    for t in cases {
        for ch in 0..c {
            mean[ch] += t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = alloc::vec![0.0; c];
    for t in cases {
        for ch in 0..c {
            std[ch] += t.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    let mut floored = Vec::new();
    for (ch, s) in std.iter_mut().enumerate() {
        *s = libm::sqrt(*s / n);
        if *s < STD_FLOOR {
            *s = STD_FLOOR;
            floored.push(ch);
        }
    }
    Ok(NormStats { mean, std, floored })
}

/// (x - mean) / std per channel.
pub fn apply_zscore(features: &Tensor, stats: &NormStats) -> Result<Tensor, String> {
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != stats.mean.len() {
        return Err(format!(
            "features {shape:?} vs stats for {} channels",
            stats.mean.len()
        ));
    }
    let plane = shape[1] * shape[2];
    let mut out = features.clone();
    for ch in 0..shape[0] {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// The eight symmetries of the square. Codes: 0 identity, 1 horizontal
/// flip, 2 vertical flip, 3/4/5 rotations by 90/180/270 degrees
/// (counterclockwise), 6 transpose, 7 anti-transpose.
pub const DIHEDRAL_CODES: u8 = 8;

/// Output dims and the source cell feeding output cell (i, j).
fn dihedral_index(code: u8, h: usize, w: usize) -> Result<(usize, usize, fn(usize, usize, usize, usize) -> (usize, usize)), String> {
    let needs_square = matches!(code, 3 | 5 | 6 | 7);
    if needs_square && h != w {
        return Err(format!("transform code {code} needs square maps, got {h}x{w}"));
    }
    let f: fn(usize, usize, usize, usize) -> (usize, usize) = match code {
        0 => |i, j, _h, _w| (i, j),
        1 => |i, j, _h, w| (i, w - 1 - j),
        2 => |i, j, h, _w| (h - 1 - i, j),
        // out(i,j) = in(j, w-1-i): 90-degree counterclockwise rotation.
        3 => |i, j, _h, w| (j, w - 1 - i),
        4 => |i, j, h, w| (h - 1 - i, w - 1 - j),
        5 => |i, j, h, _w| (h - 1 - j, i),
        6 => |i, j, _h, _w| (j, i),
        7 => |i, j, h, w| (h - 1 - j, w - 1 - i),
        _ => return Err(format!("dihedral code must be 0..8, got {code}")),
    };
    Ok((h, w, f))
}

fn transform_planes(t: &Tensor, code: u8) -> Result<Tensor, String> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(format!("expected [C,H,W], got {shape:?}"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (_, _, src) = dihedral_index(code, h, w)?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = src(i, j, h, w);
                out.data_mut()[base + i * w + j] = t.data()[base + si * w + sj];
            }
        }
    }
    Ok(out)
}

/// Applies the same square symmetry to the feature stack and the target.
pub fn dihedral_augment(
    features: &Tensor,
    target: &Tensor,
    code: u8,
) -> Result<(Tensor, Tensor), String> {
    Ok((transform_planes(features, code)?, transform_planes(target, code)?))
}
