//! Channel and spatial attention: SE, CBAM channel attention, their
//! weakness-aware two-stage extensions (WACA), CBAM spatial attention, the
//! combined WAA module, and the skip-connection attention gate.
//!
//! WACA runs the base channel attention twice with the SAME parameters: the
//! second pass sees the input modulated by the complement of the first gate
//! (1 - a1), so channels that stage 1 amplified are suppressed and the weak
//! ones drive stage 2. The two gates are blended with a fixed weight alpha.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Visitor over the named tensors of a parameter block, used to flatten
/// models into a `ParamSet` and back.
pub trait ParamBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

/// Shared FC pair of the channel attention bottleneck (C -> C/r -> C).
/// Both WACA stages use this same instance; that is the mechanism's
/// zero-extra-parameter property.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttnParams {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub r: usize,
}

impl ChannelAttnParams {
    pub fn init(c: usize, r: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(c, r);
        fill_trunc_normal(&mut p.fc1_w, rng);
        fill_trunc_normal(&mut p.fc2_w, rng);
        p
    }

    pub fn zeros(c: usize, r: usize) -> Self {
        assert!(r >= 1 && c % r == 0, "reduction ratio {r} must divide channel count {c}");
        let cr = c / r;
        ChannelAttnParams {
            fc1_w: Tensor::zeros(&[cr, c]),
            fc1_b: Tensor::zeros(&[cr]),
            fc2_w: Tensor::zeros(&[c, cr]),
            fc2_b: Tensor::zeros(&[c]),
            r,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> ChannelAttnVars {
        self.bind_recorded(tape, "", &mut alloc::vec::Vec::new())
    }

    /// Binds the tensors as tape leaves and records (name, var) pairs under
    /// `prefix`, so models can map gradients back to named parameters.
    pub fn bind_recorded(
        &self,
        tape: &mut Tape,
        prefix: &str,
        rec: &mut Vec<(String, Var)>,
    ) -> ChannelAttnVars {
        let fc1_w = tape.leaf(self.fc1_w.clone());
        let fc1_b = tape.leaf(self.fc1_b.clone());
        let fc2_w = tape.leaf(self.fc2_w.clone());
        let fc2_b = tape.leaf(self.fc2_b.clone());
        rec.push((format!("{prefix}fc1_w"), fc1_w));
        rec.push((format!("{prefix}fc1_b"), fc1_b));
        rec.push((format!("{prefix}fc2_w"), fc2_w));
        rec.push((format!("{prefix}fc2_b"), fc2_b));
        ChannelAttnVars { fc1_w, fc1_b, fc2_w, fc2_b, channels: self.channels() }
    }
}

impl ParamBlock for ChannelAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}fc1_w"), &self.fc1_w);
        f(&format!("{prefix}fc1_b"), &self.fc1_b);
        f(&format!("{prefix}fc2_w"), &self.fc2_w);
        f(&format!("{prefix}fc2_b"), &self.fc2_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}fc1_w"), &mut self.fc1_w);
        f(&format!("{prefix}fc1_b"), &mut self.fc1_b);
        f(&format!("{prefix}fc2_w"), &mut self.fc2_w);
        f(&format!("{prefix}fc2_b"), &mut self.fc2_b);
    }
}

/// Tape-bound channel attention parameters.
#[derive(Clone, Copy)]
pub struct ChannelAttnVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    channels: usize,
}

/// Blend weight between the two WACA gates. alpha = 1 degenerates to the
/// baseline attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 0.5 }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0,1], got {alpha}");
        FusionConfig { alpha }
    }
}

/// CBAM spatial attention: a k x k conv over the stacked per-pixel
/// channel mean/max planes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttnParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
}

impl SpatialAttnParams {
    pub fn init(k: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(k);
        fill_trunc_normal(&mut p.conv_w, rng);
        p
    }

    pub fn zeros(k: usize) -> Self {
        assert!(k % 2 == 1, "spatial attention kernel must be odd, got {k}");
        SpatialAttnParams {
            conv_w: Tensor::zeros(&[1, 2, k, k]),
            conv_b: Tensor::zeros(&[1]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.conv_w.shape()[2]
    }

    pub fn bind(&self, tape: &mut Tape) -> SpatialAttnVars {
        self.bind_recorded(tape, "", &mut alloc::vec::Vec::new())
    }

    pub fn bind_recorded(
        &self,
        tape: &mut Tape,
        prefix: &str,
        rec: &mut Vec<(String, Var)>,
    ) -> SpatialAttnVars {
        let conv_w = tape.leaf(self.conv_w.clone());
        let conv_b = tape.leaf(self.conv_b.clone());
        rec.push((format!("{prefix}conv_w"), conv_w));
        rec.push((format!("{prefix}conv_b"), conv_b));
        SpatialAttnVars { conv_w, conv_b, pad: (self.kernel() - 1) / 2 }
    }
}

impl ParamBlock for SpatialAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}conv_w"), &self.conv_w);
        f(&format!("{prefix}conv_b"), &self.conv_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}conv_w"), &mut self.conv_w);
        f(&format!("{prefix}conv_b"), &mut self.conv_b);
    }
}

#[derive(Clone, Copy)]
pub struct SpatialAttnVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pad: usize,
}

/// Attention gate on a skip connection: 1x1 convs on the gating signal and
/// the skip features to a shared intermediate width, then a 1x1 conv to a
/// single-channel sigmoid coefficient map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGateParams {
    pub wg_w: Tensor,
    pub wg_b: Tensor,
    pub wx_w: Tensor,
    pub wx_b: Tensor,
    pub psi_w: Tensor,
    pub psi_b: Tensor,
}

impl AttnGateParams {
    /// Intermediate width defaults to ceil(Cx / 2).
    pub fn init(cg: usize, cx: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cg, cx);
        fill_trunc_normal(&mut p.wg_w, rng);
        fill_trunc_normal(&mut p.wx_w, rng);
        fill_trunc_normal(&mut p.psi_w, rng);
        p
    }

    pub fn zeros(cg: usize, cx: usize) -> Self {
        let f_int = cx.div_ceil(2).max(1);
        AttnGateParams {
            wg_w: Tensor::zeros(&[f_int, cg, 1, 1]),
            wg_b: Tensor::zeros(&[f_int]),
            wx_w: Tensor::zeros(&[f_int, cx, 1, 1]),
            wx_b: Tensor::zeros(&[f_int]),
            psi_w: Tensor::zeros(&[1, f_int, 1, 1]),
            psi_b: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttnGateVars {
        self.bind_recorded(tape, "", &mut alloc::vec::Vec::new())
    }

    pub fn bind_recorded(
        &self,
        tape: &mut Tape,
        prefix: &str,
        rec: &mut Vec<(String, Var)>,
    ) -> AttnGateVars {
        let wg_w = tape.leaf(self.wg_w.clone());
        let wg_b = tape.leaf(self.wg_b.clone());
        let wx_w = tape.leaf(self.wx_w.clone());
        let wx_b = tape.leaf(self.wx_b.clone());
        let psi_w = tape.leaf(self.psi_w.clone());
        let psi_b = tape.leaf(self.psi_b.clone());
        rec.push((format!("{prefix}wg_w"), wg_w));
        rec.push((format!("{prefix}wg_b"), wg_b));
        rec.push((format!("{prefix}wx_w"), wx_w));
        rec.push((format!("{prefix}wx_b"), wx_b));
        rec.push((format!("{prefix}psi_w"), psi_w));
        rec.push((format!("{prefix}psi_b"), psi_b));
        AttnGateVars { wg_w, wg_b, wx_w, wx_b, psi_w, psi_b }
    }
}

impl ParamBlock for AttnGateParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}wg_w"), &self.wg_w);
        f(&format!("{prefix}wg_b"), &self.wg_b);
        f(&format!("{prefix}wx_w"), &self.wx_w);
        f(&format!("{prefix}wx_b"), &self.wx_b);
        f(&format!("{prefix}psi_w"), &self.psi_w);
        f(&format!("{prefix}psi_b"), &self.psi_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}wg_w"), &mut self.wg_w);
        f(&format!("{prefix}wg_b"), &mut self.wg_b);
        f(&format!("{prefix}wx_w"), &mut self.wx_w);
        f(&format!("{prefix}wx_b"), &mut self.wx_b);
        f(&format!("{prefix}psi_w"), &mut self.psi_w);
        f(&format!("{prefix}psi_b"), &mut self.psi_b);
    }
}

#[derive(Clone, Copy)]
pub struct AttnGateVars {
    pub wg_w: Var,
    pub wg_b: Var,
    pub wx_w: Var,
    pub wx_b: Var,
    pub psi_w: Var,
    pub psi_b: Var,
}

/// Which base attention the WACA stages wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    /// Global average pooling only (SE style).
    Se,
    /// Average plus max pooling (CBAM style).
    Cbam,
}

/// Per-invocation record of a WACA forward pass, for introspection.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// Stage-1 pooled descriptors (one for SE, avg and max for CBAM).
    pub s1: Vec<Tensor>,
    pub a1: Tensor,
    pub w1: Tensor,
    /// Stage-2 suppressed-feature descriptors.
    pub s2: Vec<Tensor>,
    pub a2: Tensor,
    pub fused: Tensor,
}

fn check_channels(op: &'static str, tape: &Tape, x: Var, p: &ChannelAttnVars) -> Result<(), TensorError> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != p.channels {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("input {s:?} vs attention parameters for {} channels", p.channels),
        });
    }
    Ok(())
}

/// FC2(ReLU(FC1(s))), the shared bottleneck MLP.
fn mlp(tape: &mut Tape, s: Var, p: &ChannelAttnVars) -> Result<Var, TensorError> {
    let h = tape.linear(s, p.fc1_w, p.fc1_b)?;
    let h = tape.relu(h);
    tape.linear(h, p.fc2_w, p.fc2_b)
}

/// Standard SE channel gate: sigma(FC2(ReLU(FC1(GAP(x))))).
pub fn se_channel_gate(
    tape: &mut Tape,
    x: Var,
    p: &ChannelAttnVars,
) -> Result<Var, TensorError> {
    check_channels("se_channel_gate", tape, x, p)?;
    let s = tape.gap(x)?;
    let z = mlp(tape, s, p)?;
    Ok(tape.sigmoid(z))
}

/// CBAM channel gate: sigma(MLP(GAP(x)) + MLP(GMP(x))) with a shared MLP.
pub fn cbam_channel_gate(
    tape: &mut Tape,
    x: Var,
    p: &ChannelAttnVars,
) -> Result<Var, TensorError> {
    check_channels("cbam_channel_gate", tape, x, p)?;
    let sa = tape.gap(x)?;
    let sm = tape.gmp(x)?;
    let za = mlp(tape, sa, p)?;
    let zm = mlp(tape, sm, p)?;
    let z = tape.add(za, zm)?;
    Ok(tape.sigmoid(z))
}

/// Stage 2 of WACA: re-gate the features suppressed by (1 - a1), reusing
/// the stage-1 parameters. In CBAM mode the avg and max descriptors of the
/// suppressed features are summed into one descriptor before the MLP.
pub fn waca_stage2(
    tape: &mut Tape,
    x: Var,
    a1: Var,
    p: &ChannelAttnVars,
    mode: PoolingMode,
) -> Result<Var, TensorError> {
    check_channels("waca_stage2", tape, x, p)?;
    let w1 = tape.one_minus(a1);
    let suppressed = tape.mul_chan(x, w1)?;
    let s2 = match mode {
        PoolingMode::Se => tape.gap(suppressed)?,
        PoolingMode::Cbam => {
            let sa = tape.gap(suppressed)?;
            let sm = tape.gmp(suppressed)?;
            tape.add(sa, sm)?
        }
    };
    let z = mlp(tape, s2, p)?;
    Ok(tape.sigmoid(z))
}

/// fused = alpha * a1 + (1 - alpha) * a2.
pub fn waca_fuse(
    tape: &mut Tape,
    a1: Var,
    a2: Var,
    cfg: FusionConfig,
) -> Result<Var, TensorError> {
    let sa = tape.scale(a1, cfg.alpha);
    let sb = tape.scale(a2, 1.0 - cfg.alpha);
    tape.add(sa, sb)
}

fn waca_channel(
    tape: &mut Tape,
    x: Var,
    p: &ChannelAttnVars,
    cfg: FusionConfig,
    mode: PoolingMode,
) -> Result<(Var, AttentionState), TensorError> {
    let (s1, a1) = match mode {
        PoolingMode::Se => {
            let s = tape.gap(x)?;
            let z = mlp(tape, s, p)?;
            (alloc::vec![tape.tensor(s)], tape.sigmoid(z))
        }
        PoolingMode::Cbam => {
            let sa = tape.gap(x)?;
            let sm = tape.gmp(x)?;
            let za = mlp(tape, sa, p)?;
            let zm = mlp(tape, sm, p)?;
            let z = tape.add(za, zm)?;
            (alloc::vec![tape.tensor(sa), tape.tensor(sm)], tape.sigmoid(z))
        }
    };
    let w1 = tape.one_minus(a1);
    let suppressed = tape.mul_chan(x, w1)?;
    let (s2_rec, s2) = match mode {
        PoolingMode::Se => {
            let s = tape.gap(suppressed)?;
            (alloc::vec![tape.tensor(s)], s)
        }
        PoolingMode::Cbam => {
            let sa = tape.gap(suppressed)?;
            let sm = tape.gmp(suppressed)?;
            let sw = tape.add(sa, sm)?;
            (alloc::vec![tape.tensor(sa), tape.tensor(sm)], sw)
        }
    };
    let z2 = mlp(tape, s2, p)?;
    let a2 = tape.sigmoid(z2);
    let fused = waca_fuse(tape, a1, a2, cfg)?;
    let y = tape.mul_chan(x, fused)?;
    let state = AttentionState {
        s1,
        a1: tape.tensor(a1),
        w1: tape.tensor(w1),
        s2: s2_rec,
        a2: tape.tensor(a2),
        fused: tape.tensor(fused),
    };
    Ok((y, state))
}

/// WACA with the SE base: y = x (.) (alpha a1 + (1-alpha) a2).
pub fn waca_se(
    tape: &mut Tape,
    x: Var,
    p: &ChannelAttnVars,
    cfg: FusionConfig,
) -> Result<(Var, AttentionState), TensorError> {
    waca_channel(tape, x, p, cfg, PoolingMode::Se)
}

/// WACA with the CBAM multi-pooling base.
pub fn waca_cbam(
    tape: &mut Tape,
    x: Var,
    p: &ChannelAttnVars,
    cfg: FusionConfig,
) -> Result<(Var, AttentionState), TensorError> {
    waca_channel(tape, x, p, cfg, PoolingMode::Cbam)
}

/// CBAM spatial attention: y = x (.) sigma(conv(channel mean/max planes)).
pub fn spatial_attention(
    tape: &mut Tape,
    x: Var,
    p: &SpatialAttnVars,
) -> Result<Var, TensorError> {
    let pooled = tape.channel_pool_spatial(x)?;
    let z = tape.conv2d(pooled, p.conv_w, p.conv_b, 1, p.pad, 1)?;
    let m = tape.sigmoid(z);
    tape.mul_spatial(x, m)
}

/// WAA: spatial attention applied to the WACA output. Returns the channel
/// stage's attention state.
pub fn waa(
    tape: &mut Tape,
    x: Var,
    chan: &ChannelAttnVars,
    spat: &SpatialAttnVars,
    cfg: FusionConfig,
) -> Result<(Var, AttentionState), TensorError> {
    let (y, state) = waca_cbam(tape, x, chan, cfg)?;
    let y = spatial_attention(tape, y, spat)?;
    Ok((y, state))
}

/// Skip-connection gate: x (.) sigma(psi(ReLU(Wg g + Wx x))).
/// The gating signal must already be upsampled to the skip resolution.
pub fn attention_gate(
    tape: &mut Tape,
    g: Var,
    x: Var,
    p: &AttnGateVars,
) -> Result<Var, TensorError> {
    let gs = tape.shape(g).to_vec();
    let xs = tape.shape(x).to_vec();
    if gs.len() != 4 || xs.len() != 4 || gs[0] != xs[0] || gs[2..] != xs[2..] {
        return Err(TensorError::ShapeMismatch {
            op: "attention_gate",
            detail: format!("gating signal {gs:?} and skip features {xs:?} must align spatially"),
        });
    }
    let pg = tape.conv2d(g, p.wg_w, p.wg_b, 1, 0, 1)?;
    let px = tape.conv2d(x, p.wx_w, p.wx_b, 1, 0, 1)?;
    let sum = tape.add(pg, px)?;
    let act = tape.relu(sum);
    let z = tape.conv2d(act, p.psi_w, p.psi_b, 1, 0, 1)?;
    let beta = tape.sigmoid(z);
    tape.mul_spatial(x, beta)
}

pub(crate) fn fill_trunc_normal(t: &mut Tensor, rng: &mut Rng) {
    for v in t.data_mut() {
        *v = rng.trunc_normal(0.02);
    }
}
