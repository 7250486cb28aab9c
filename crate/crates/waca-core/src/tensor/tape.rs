//! The op tape: forward builders plus the reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvDims};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Pow(Var, f64),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, groups: usize },
    Gap(Var),
    Gmp { x: Var, argmax: Vec<u32> },
    ChannelPool { x: Var, argmax: Vec<u32> },
    LayerNormChan { x: Var, gamma: Var, beta: Var, eps: f64 },
    ResizeBilinear(Var),
    Concat2(Var, Var),
    MulChan { x: Var, s: Var },
    MulCvec { x: Var, v: Var },
    AddCvec { x: Var, v: Var },
    MulSpatial { x: Var, m: Var },
    DivChan { x: Var, s: Var },
    MeanChan(Var),
    DivRow { a: Var, b: Var },
    SumAll(Var),
    MeanAll(Var),
    Dft2Re(Var),
    Dft2Im(Var),
    Huber { pred: Var, target: Var, delta: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of one forward pass. Ops are appended in execution order,
/// so parents always precede children and a single reverse sweep suffices.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).unwrap()
    }

    /// Gradient of the last backward pass; zeros for vars it never reached.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::from_vec(&self.nodes[v.0].shape, g.clone()).unwrap(),
            None => Tensor::zeros(&self.nodes[v.0].shape),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4], TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 4-axis tensor, got {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::AddScalar(a))
    }

    /// 1 - a, used for the complementary suppression weight.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Sigmoid(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| libm::pow(x, p)).collect();
        self.push(self.nodes[a.0].shape.clone(), v, Op::Pow(a, p))
    }

    // ── dense / conv ───────────────────────────────────────────────────

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs:?}, w {ws:?}, b {bs:?}; need x[N,Cin], w[Cout,Cin], b[Cout]"),
            });
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let v = kernels::linear_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            n,
            cin,
            cout,
        );
        Ok(self.push(vec![n, cout], v, Op::Linear { x, w, b }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, wd] = self.dims4("conv2d", x)?;
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if ws.len() != 4 || groups == 0 || cin % groups != 0 || ws[1] != cin / groups {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input channels {cin} with groups {groups} need kernel axis 1 == {}, kernel is {ws:?}",
                    if groups > 0 { cin / groups.max(1) } else { 0 }
                ),
            });
        }
        if ws[0] % groups != 0 || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {ws:?} / bias {bs:?} inconsistent with groups {groups}"),
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "spatial {h}x{wd} with padding {pad} too small for kernel {kh}x{kw} (stride {stride})"
                ),
            });
        }
        let d = ConvDims {
            n,
            cin,
            h,
            w: wd,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let v = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &d,
        );
        Ok(self.push(
            vec![n, d.cout, d.ho, d.wo],
            v,
            Op::Conv2d { x, w, b, stride, pad, groups },
        ))
    }

    // ── pooling / reductions ───────────────────────────────────────────

    pub fn gap(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("global_avg_pool", x)?;
        if h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("empty spatial extent {h}x{w}"),
            });
        }
        let hw = (h * w) as f64;
        let xv = &self.nodes[x.0].value;
        let v: Vec<f64> = (0..n * c)
            .map(|i| xv[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(vec![n, c], v, Op::Gap(x)))
    }

    /// Global max pool. Gradient routes to the first maximum in row-major order.
    pub fn gmp(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("global_max_pool", x)?;
        if h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "global_max_pool",
                detail: format!("empty spatial extent {h}x{w}"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut v = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let row = &xv[i * h * w..(i + 1) * h * w];
            let mut best = row[0];
            let mut bi = 0usize;
            for (j, &r) in row.iter().enumerate().skip(1) {
                if r > best {
                    best = r;
                    bi = j;
                }
            }
            v.push(best);
            argmax.push(bi as u32);
        }
        Ok(self.push(vec![n, c], v, Op::Gmp { x, argmax }))
    }

    /// Per-pixel mean (plane 0) and max (plane 1) across channels.
    pub fn channel_pool_spatial(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("channel_pool_spatial", x)?;
        let xv = &self.nodes[x.0].value;
        let hw = h * w;
        let mut v = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0u32; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ci in 0..c {
                    let val = xv[(ni * c + ci) * hw + p];
                    sum += val;
                    if val > best {
                        best = val;
                        bi = ci;
                    }
                }
                v[(ni * 2) * hw + p] = sum / c as f64;
                v[(ni * 2 + 1) * hw + p] = best;
                argmax[ni * hw + p] = bi as u32;
            }
        }
        Ok(self.push(vec![n, 2, h, w], v, Op::ChannelPool { x, argmax }))
    }

    pub fn mean_chan(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_chan",
                detail: format!("expected [N,C], got {s:?}"),
            });
        }
        let (n, c) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let v: Vec<f64> = (0..n)
            .map(|i| xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        Ok(self.push(vec![n, 1], v, Op::MeanChan(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().sum::<f64>();
        self.push(vec![1], vec![v], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let v = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![v], Op::MeanAll(x))
    }

    // ── normalization ──────────────────────────────────────────────────

    /// Layer norm across the channel axis, independently per (n, h, w).
    pub fn layer_norm_chan(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("layer_norm_chan", x)?;
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_chan",
                detail: format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        assert!(eps > 0.0, "layer norm eps must be positive");
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for p in 0..hw {
                let mut mu = 0.0;
                for ci in 0..c {
                    mu += xv[(ni * c + ci) * hw + p];
                }
                mu /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xv[(ni * c + ci) * hw + p] - mu;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / libm::sqrt(var + eps);
                for ci in 0..c {
                    let xh = (xv[(ni * c + ci) * hw + p] - mu) * inv;
                    out[(ni * c + ci) * hw + p] = gv[ci] * xh + bv[ci];
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], out, Op::LayerNormChan { x, gamma, beta, eps }))
    }

    /// Global response normalization with residual:
    /// y = x + gamma * (x * n_c) + beta, where n_c is the per-channel spatial
    /// L2 norm divided by the cross-channel mean of those norms.
    /// Built from primitives so the gradient comes out of the reverse sweep.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        assert!(eps > 0.0, "grn eps must be positive");
        let [_, _, h, w] = self.dims4("grn", x)?;
        let sq = self.mul(x, x)?;
        let mean_sq = self.gap(sq)?;
        let sum_sq = self.scale(mean_sq, (h * w) as f64);
        let l2 = self.powf(sum_sq, 0.5); // [N,C] per-channel norms
        let mean_l2 = self.mean_chan(l2)?;
        let mean_l2 = self.add_scalar(mean_l2, eps);
        let nrm = self.div_row(l2, mean_l2)?;
        let xn = self.mul_chan(x, nrm)?;
        let scaled = self.mul_cvec(xn, gamma)?;
        let shifted = self.add_cvec(scaled, beta)?;
        self.add(x, shifted)
    }

    // ── resize / concat ────────────────────────────────────────────────

    /// Bilinear resize, align-corners-false with edge clamp. Exact identity
    /// when the target size equals the source size.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("resize_bilinear", x)?;
        assert!(ho >= 1 && wo >= 1, "resize target must be at least 1x1");
        if ho == h && wo == w {
            // Identity resize still records a node so gradients pass through.
            let v = self.nodes[x.0].value.clone();
            return Ok(self.push(vec![n, c, h, w], v, Op::ResizeBilinear(x)));
        }
        let v = kernels::resize_bilinear_forward(&self.nodes[x.0].value, n, c, h, w, ho, wo);
        Ok(self.push(vec![n, c, ho, wo], v, Op::ResizeBilinear(x)))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, ca, h, w] = self.dims4("concat_channels", a)?;
        let [nb, cb, hb, wb] = self.dims4("concat_channels", b)?;
        if n != nb || h != hb || w != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!(
                    "{:?} vs {:?}: batch/spatial axes must agree",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        let hw = h * w;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            v.extend_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            v.extend_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], v, Op::Concat2(a, b)))
    }

    // ── broadcast ops ──────────────────────────────────────────────────

    /// x[N,C,H,W] * s[N,C], s broadcast over the spatial axes.
    pub fn mul_chan(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("mul_chan", x)?;
        if self.nodes[s.0].shape != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_chan",
                detail: format!("scale {:?} must be [{n},{c}]", self.nodes[s.0].shape),
            });
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut v = vec![0.0; xv.len()];
        for i in 0..n * c {
            let sc = sv[i];
            for p in 0..hw {
                v[i * hw + p] = xv[i * hw + p] * sc;
            }
        }
        Ok(self.push(vec![n, c, h, w], v, Op::MulChan { x, s }))
    }

    /// x[N,C,H,W] / s[N,C].
    pub fn div_chan(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("div_chan", x)?;
        if self.nodes[s.0].shape != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "div_chan",
                detail: format!("divisor {:?} must be [{n},{c}]", self.nodes[s.0].shape),
            });
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut v = vec![0.0; xv.len()];
        for i in 0..n * c {
            let sc = sv[i];
            for p in 0..hw {
                v[i * hw + p] = xv[i * hw + p] / sc;
            }
        }
        Ok(self.push(vec![n, c, h, w], v, Op::DivChan { x, s }))
    }

    /// x[N,C,H,W] * v[C], per-channel learned scale.
    pub fn mul_cvec(&mut self, x: Var, cv: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("mul_cvec", x)?;
        if self.nodes[cv.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_cvec",
                detail: format!("vector {:?} must be [{c}]", self.nodes[cv.0].shape),
            });
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[cv.0].value;
        let mut v = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let sc = vv[ci];
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    v[base + p] = xv[base + p] * sc;
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], v, Op::MulCvec { x, v: cv }))
    }

    /// x[N,C,H,W] + v[C].
    pub fn add_cvec(&mut self, x: Var, cv: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("add_cvec", x)?;
        if self.nodes[cv.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_cvec",
                detail: format!("vector {:?} must be [{c}]", self.nodes[cv.0].shape),
            });
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[cv.0].value;
        let mut v = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let sc = vv[ci];
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    v[base + p] = xv[base + p] + sc;
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], v, Op::AddCvec { x, v: cv }))
    }

    /// x[N,C,H,W] * m[N,1,H,W], the spatial-attention broadcast.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("mul_spatial", x)?;
        if self.nodes[m.0].shape != [n, 1, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_spatial",
                detail: format!("mask {:?} must be [{n},1,{h},{w}]", self.nodes[m.0].shape),
            });
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[m.0].value;
        let mut v = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mbase = ni * hw;
                for p in 0..hw {
                    v[base + p] = xv[base + p] * mv[mbase + p];
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], v, Op::MulSpatial { x, m }))
    }

    /// a[N,C] / b[N,1].
    pub fn div_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || self.nodes[b.0].shape != [s[0], 1] {
            return Err(TensorError::ShapeMismatch {
                op: "div_row",
                detail: format!("a {s:?}, b {:?}; need [N,C] and [N,1]", self.nodes[b.0].shape),
            });
        }
        let (n, c) = (s[0], s[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = vec![0.0; av.len()];
        for ni in 0..n {
            for ci in 0..c {
                v[ni * c + ci] = av[ni * c + ci] / bv[ni];
            }
        }
        Ok(self.push(vec![n, c], v, Op::DivRow { a, b }))
    }

    // ── frequency domain ───────────────────────────────────────────────

    pub fn dft2_re(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("dft2_re", x)?;
        let (re, _) = kernels::dft2(&self.nodes[x.0].value, n * c, h, w);
        Ok(self.push(vec![n, c, h, w], re, Op::Dft2Re(x)))
    }

    pub fn dft2_im(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4("dft2_im", x)?;
        let (_, im) = kernels::dft2(&self.nodes[x.0].value, n * c, h, w);
        Ok(self.push(vec![n, c, h, w], im, Op::Dft2Im(x)))
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Mean Huber loss over all elements.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var, TensorError> {
        self.same_shape("huber", pred, target)?;
        assert!(delta > 0.0, "huber delta must be positive");
        let n = self.nodes[pred.0].value.len();
        let mut acc = 0.0;
        for (p, t) in self.nodes[pred.0].value.iter().zip(&self.nodes[target.0].value) {
            let e = (p - t).abs();
            acc += if e <= delta { 0.5 * e * e } else { delta * (e - 0.5 * delta) };
        }
        Ok(self.push(vec![1], vec![acc / n as f64], Op::Huber { pred, target, delta }))
    }

    // ── backward ───────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn add_grad_scaled(&mut self, v: Var, contrib: &[f64], scale: f64) {
        let node = &mut self.nodes[v.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci * scale;
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that the loss depends on; everything else reads back as zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(TensorError::NonScalarLoss { numel: n });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_op(Var(i), &op, &g);
        }
        Ok(())
    }

    fn backprop_op(&mut self, out: Var, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, g);
                self.add_grad_scaled(b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> =
                    g.iter().zip(&self.nodes[b.0].value).map(|(g, v)| g * v).collect();
                let gb: Vec<f64> =
                    g.iter().zip(&self.nodes[a.0].value).map(|(g, v)| g * v).collect();
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::Div(a, b) => {
                let ga: Vec<f64> =
                    g.iter().zip(&self.nodes[b.0].value).map(|(g, v)| g / v).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value))
                    .map(|(g, (av, bv))| -g * av / (bv * bv))
                    .collect();
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::Scale(a, c) => self.add_grad_scaled(a, g, c),
            Op::AddScalar(a) => self.add_grad(a, g),
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(a, &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.add_grad(a, &ga);
            }
            Op::Sigmoid(a) => {
                // Use the stored output: d sigma = s (1 - s).
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].value)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.add_grad(a, &ga);
            }
            Op::Pow(a, p) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(g, &v)| if v == 0.0 { 0.0 } else { g * p * libm::pow(v, p - 1.0) })
                    .collect();
                self.add_grad(a, &ga);
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (n, cin) = (xs[0], xs[1]);
                let cout = self.nodes[w.0].shape[0];
                let (gx, gw, gb) = kernels::linear_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    n,
                    cin,
                    cout,
                );
                self.add_grad(x, &gx);
                self.add_grad(w, &gw);
                self.add_grad(b, &gb);
            }
            Op::Conv2d { x, w, b, stride, pad, groups } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let os = &self.nodes[out.0].shape;
                let d = ConvDims {
                    n: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    cout: ws[0],
                    kh: ws[2],
                    kw: ws[3],
                    stride,
                    pad,
                    groups,
                    ho: os[2],
                    wo: os[3],
                };
                let (gx, gw, gb) =
                    kernels::conv2d_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, g, &d);
                self.add_grad(x, &gx);
                self.add_grad(w, &gw);
                self.add_grad(b, &gb);
            }
            Op::Gap(x) => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f64;
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (i, &gv) in g.iter().enumerate() {
                    let base = i * hw;
                    for p in 0..hw {
                        gx[base + p] = gv * inv;
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::Gmp { x, ref argmax } => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (i, &gv) in g.iter().enumerate() {
                    gx[i * hw + argmax[i] as usize] = gv;
                }
                self.add_grad(x, &gx);
            }
            Op::ChannelPool { x, ref argmax } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let inv = 1.0 / c as f64;
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for ni in 0..n {
                    for p in 0..hw {
                        let gmean = g[(ni * 2) * hw + p] * inv;
                        for ci in 0..c {
                            gx[(ni * c + ci) * hw + p] += gmean;
                        }
                        let gmax = g[(ni * 2 + 1) * hw + p];
                        gx[(ni * c + argmax[ni * hw + p] as usize) * hw + p] += gmax;
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::LayerNormChan { x, gamma, beta, eps } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let mut gx = vec![0.0; xv.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ni in 0..n {
                    for p in 0..hw {
                        let mut mu = 0.0;
                        for ci in 0..c {
                            mu += xv[(ni * c + ci) * hw + p];
                        }
                        mu /= c as f64;
                        let mut var = 0.0;
                        for ci in 0..c {
                            let d = xv[(ni * c + ci) * hw + p] - mu;
                            var += d * d;
                        }
                        var /= c as f64;
                        let inv = 1.0 / libm::sqrt(var + eps);
                        // Standard layer-norm gradient over the C-vector.
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * hw + p;
                            let xh = (xv[idx] - mu) * inv;
                            let dxh = g[idx] * gv[ci];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                            ggamma[ci] += g[idx] * xh;
                            gbeta[ci] += g[idx];
                        }
                        mean_dxh /= c as f64;
                        mean_dxh_xh /= c as f64;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * hw + p;
                            let xh = (xv[idx] - mu) * inv;
                            let dxh = g[idx] * gv[ci];
                            gx[idx] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                self.add_grad(x, &gx);
                self.add_grad(gamma, &ggamma);
                self.add_grad(beta, &gbeta);
            }
            Op::ResizeBilinear(x) => {
                let xs = &self.nodes[x.0].shape;
                let os = &self.nodes[out.0].shape;
                if xs[2] == os[2] && xs[3] == os[3] {
                    self.add_grad(x, g);
                } else {
                    let gx = kernels::resize_bilinear_backward(
                        g, xs[0], xs[1], xs[2], xs[3], os[2], os[3],
                    );
                    self.add_grad(x, &gx);
                }
            }
            Op::Concat2(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let hw = sa[2] * sa[3];
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                let mut gb = vec![0.0; self.nodes[b.0].value.len()];
                for ni in 0..n {
                    let base = ni * (ca + cb) * hw;
                    ga[ni * ca * hw..(ni + 1) * ca * hw]
                        .copy_from_slice(&g[base..base + ca * hw]);
                    gb[ni * cb * hw..(ni + 1) * cb * hw]
                        .copy_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::MulChan { x, s } => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; sv.len()];
                for i in 0..sv.len() {
                    let sc = sv[i];
                    let mut acc = 0.0;
                    for p in 0..hw {
                        gx[i * hw + p] = g[i * hw + p] * sc;
                        acc += g[i * hw + p] * xv[i * hw + p];
                    }
                    gs[i] = acc;
                }
                self.add_grad(x, &gx);
                self.add_grad(s, &gs);
            }
            Op::DivChan { x, s } => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; sv.len()];
                for i in 0..sv.len() {
                    let sc = sv[i];
                    let mut acc = 0.0;
                    for p in 0..hw {
                        gx[i * hw + p] = g[i * hw + p] / sc;
                        acc -= g[i * hw + p] * xv[i * hw + p] / (sc * sc);
                    }
                    gs[i] = acc;
                }
                self.add_grad(x, &gx);
                self.add_grad(s, &gs);
            }
            Op::MulCvec { x, v } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let xv = &self.nodes[x.0].value;
                let vv = &self.nodes[v.0].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gv = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let sc = vv[ci];
                        let mut acc = 0.0;
                        for p in 0..hw {
                            gx[base + p] = g[base + p] * sc;
                            acc += g[base + p] * xv[base + p];
                        }
                        gv[ci] += acc;
                    }
                }
                self.add_grad(x, &gx);
                self.add_grad(v, &gv);
            }
            Op::AddCvec { x, v } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let mut gv = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            gv[ci] += g[base + p];
                        }
                    }
                }
                self.add_grad(x, g);
                self.add_grad(v, &gv);
            }
            Op::MulSpatial { x, m } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let xv = &self.nodes[x.0].value;
                let mv = &self.nodes[m.0].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gm = vec![0.0; mv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mbase = ni * hw;
                        for p in 0..hw {
                            gx[base + p] = g[base + p] * mv[mbase + p];
                            gm[mbase + p] += g[base + p] * xv[base + p];
                        }
                    }
                }
                self.add_grad(x, &gx);
                self.add_grad(m, &gm);
            }
            Op::MeanChan(x) => {
                let xs = &self.nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let inv = 1.0 / c as f64;
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        gx[ni * c + ci] = g[ni] * inv;
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::DivRow { a, b } => {
                let s = &self.nodes[a.0].shape;
                let (n, c) = (s[0], s[1]);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; n];
                for ni in 0..n {
                    for ci in 0..c {
                        let idx = ni * c + ci;
                        ga[idx] = g[idx] / bv[ni];
                        gb[ni] -= g[idx] * av[idx] / (bv[ni] * bv[ni]);
                    }
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::SumAll(x) => {
                let gv = g[0];
                let n = self.nodes[x.0].value.len();
                self.add_grad(x, &vec![gv; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                let gv = g[0] / n as f64;
                self.add_grad(x, &vec![gv; n]);
            }
            Op::Dft2Re(x) => {
                let xs = &self.nodes[x.0].shape;
                let gx = kernels::dft2_adjoint_re(g, xs[0] * xs[1], xs[2], xs[3]);
                self.add_grad(x, &gx);
            }
            Op::Dft2Im(x) => {
                let xs = &self.nodes[x.0].shape;
                let gx = kernels::dft2_adjoint_im(g, xs[0] * xs[1], xs[2], xs[3]);
                self.add_grad(x, &gx);
            }
            Op::Huber { pred, target, delta } => {
                let n = self.nodes[pred.0].value.len();
                let scale = g[0] / n as f64;
                let gp: Vec<f64> = self.nodes[pred.0]
                    .value
                    .iter()
                    .zip(&self.nodes[target.0].value)
                    .map(|(p, t)| scale * (p - t).clamp(-delta, delta))
                    .collect();
                let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                self.add_grad(pred, &gp);
                self.add_grad(target, &gt);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let phi = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * phi
}
