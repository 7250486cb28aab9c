//! Separable Lanczos-3 resampling with edge clamping, used when ingesting
//! or emitting maps whose native resolution differs from the model's
//! working resolution. The kernel footprint is widened by the scale factor
//! when downsampling so it acts as a proper low-pass filter.

use waca_core::Tensor;

use crate::error::WacaError;

const A: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn lanczos3(x: f64) -> f64 {
    if x.abs() >= A {
        0.0
    } else {
        sinc(x) * sinc(x / A)
    }
}

/// Per-output-pixel taps: (first source index, normalized weights).
fn build_taps(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    // Footprint scale: 1 for upsampling, `scale` for downsampling.
    let fs = scale.max(1.0);
    let radius = A * fs;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius).ceil() as i64;
            let hi = (center + radius).floor() as i64;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for s in lo..=hi {
                let w = lanczos3((s as f64 - center) / fs);
                sum += w;
                weights.push(w);
            }
            for w in &mut weights {
                *w /= sum;
            }
            // Edge clamp: fold out-of-range taps onto the border samples.
            let mut first = lo.clamp(0, n_in as i64 - 1) as usize;
            let mut clamped = vec![0.0; n_in];
            for (k, w) in weights.iter().enumerate() {
                let s = (lo + k as i64).clamp(0, n_in as i64 - 1) as usize;
                clamped[s] += w;
            }
            let last = (hi.clamp(0, n_in as i64 - 1)) as usize;
            first = first.min(last);
            (first, clamped[first..=last].to_vec())
        })
        .collect()
}

/// Applies `taps` along the last axis of a [lanes, lane_stride] buffer.
fn resample_rows(data: &[f64], lanes: usize, lane_stride: usize, taps: &[(usize, Vec<f64>)], out: &mut Vec<f64>) {
    for lane in 0..lanes {
        let base = lane * lane_stride;
        for (first, ws) in taps {
            let mut acc = 0.0;
            for (k, w) in ws.iter().enumerate() {
                acc += w * data[base + first + k];
            }
            out.push(acc);
        }
    }
}

/// Resizes the trailing two axes of a [C,H,W] or [N,C,H,W] tensor.
pub fn resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, WacaError> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(WacaError::Data(format!(
            "lanczos resize needs at least 2 axes, got shape {s:?}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(WacaError::Data("lanczos resize target must be nonzero".into()));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes: usize = s[..s.len() - 2].iter().product();

    // Rows first: [planes, h, w] -> [planes, h, out_w]; the row pass writes
    // lanes in (plane, row) order so the layout is preserved.
    let row_taps = build_taps(w, out_w);
    let mut rows = Vec::with_capacity(planes * h * out_w);
    resample_rows(t.data(), planes * h, w, &row_taps, &mut rows);

    // Columns: for each plane and output column is awkward in-place, so walk
    // planes explicitly.
    let col_taps = build_taps(h, out_h);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let base = p * h * out_w;
        for (oi, (first, ws)) in col_taps.iter().enumerate() {
            for j in 0..out_w {
                let mut acc = 0.0;
                for (k, wgt) in ws.iter().enumerate() {
                    acc += wgt * rows[base + (first + k) * out_w + j];
                }
                out[p * out_h * out_w + oi * out_w + j] = acc;
            }
        }
    }

    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = out_h;
    shape[n - 1] = out_w;
    Tensor::from_vec(&shape, out).map_err(|e| WacaError::Data(e.to_string()))
}
