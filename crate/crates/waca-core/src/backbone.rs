//! Encoder-decoder backbone: ConvNeXtV2-style residual blocks, composite
//! blocks that append an attention module, and the full U-shaped model with
//! attention-gated skip connections.
//!
//! The attention flavor is an ablation axis: `none`, plain channel attention
//! (`se`, `cbam`), or the weakness-aware two-stage variants (`waca_se`,
//! `waca_cbam`). The waca variants reuse the base parameters, so swapping a
//! base kind for its waca counterpart never changes the parameter count.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{
    attention_gate, cbam_channel_gate, se_channel_gate, spatial_attention, waca_cbam, waca_se,
    AttentionState, AttnGateParams, AttnGateVars, ChannelAttnParams, ChannelAttnVars,
    FusionConfig, ParamBlock, SpatialAttnParams, SpatialAttnVars,
};
use crate::rng::Rng;
use crate::tensor::{ParamSet, Tape, Tensor, TensorError, Var};

/// The attention module attached to each composite block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
    WacaSe,
    WacaCbam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::None,
        AttentionKind::Se,
        AttentionKind::Cbam,
        AttentionKind::WacaSe,
        AttentionKind::WacaCbam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::WacaSe => "waca_se",
            AttentionKind::WacaCbam => "waca_cbam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the kind carries channel-attention parameters.
    pub fn has_channel(self) -> bool {
        !matches!(self, AttentionKind::None)
    }

    /// Whether the kind adds the spatial-attention conv (CBAM family).
    pub fn has_spatial(self) -> bool {
        matches!(self, AttentionKind::Cbam | AttentionKind::WacaCbam)
    }
}

/// Model hyperparameters. `widths` are the per-stage channel counts from
/// the top (full-resolution) stage down.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UNetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_kind: AttentionKind,
    pub alpha: f64,
    pub r: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 6,
            widths: alloc::vec![16, 32, 64],
            blocks_per_stage: 1,
            attention_kind: AttentionKind::WacaCbam,
            alpha: 0.5,
            r: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.in_channels == 0 {
            return Err("in_channels must be positive".into());
        }
        if self.widths.is_empty() {
            return Err("widths must be nonempty".into());
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("widths must be strictly increasing, got {:?}", self.widths));
        }
        if self.blocks_per_stage == 0 {
            return Err("blocks_per_stage must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha must lie in [0,1], got {}", self.alpha));
        }
        if self.r == 0 {
            return Err("reduction ratio r must be positive".into());
        }
        if self.attention_kind.has_channel() {
            for &w in &self.widths {
                if w % self.r != 0 {
                    return Err(format!("width {w} is not divisible by reduction ratio {}", self.r));
                }
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

/// Parameters of one ConvNeXtV2-style block at channel count C:
/// depthwise 7x7 conv, channel LayerNorm, 1x1 expand to 4C, GELU, global
/// response normalization, 1x1 project back to C, residual add.
#[derive(Debug, Clone, PartialEq)]
pub struct CnxBlockParams {
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    pub grn_gamma: Tensor,
    pub grn_beta: Tensor,
    pub project_w: Tensor,
    pub project_b: Tensor,
}

impl CnxBlockParams {
    pub fn zeros(c: usize) -> Self {
        CnxBlockParams {
            dw_w: Tensor::zeros(&[c, 1, 7, 7]),
            dw_b: Tensor::zeros(&[c]),
            ln_gamma: Tensor::zeros(&[c]),
            ln_beta: Tensor::zeros(&[c]),
            expand_w: Tensor::zeros(&[4 * c, c, 1, 1]),
            expand_b: Tensor::zeros(&[4 * c]),
            grn_gamma: Tensor::zeros(&[4 * c]),
            grn_beta: Tensor::zeros(&[4 * c]),
            project_w: Tensor::zeros(&[c, 4 * c, 1, 1]),
            project_b: Tensor::zeros(&[c]),
        }
    }

    pub fn init(c: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(c);
        crate::attention::fill_trunc_normal(&mut p.dw_w, rng);
        crate::attention::fill_trunc_normal(&mut p.expand_w, rng);
        crate::attention::fill_trunc_normal(&mut p.project_w, rng);
        for v in p.ln_gamma.data_mut() {
            *v = 1.0;
        }
        for v in p.grn_gamma.data_mut() {
            *v = 1.0;
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.dw_w.shape()[0]
    }

    pub fn bind_recorded(
        &self,
        tape: &mut Tape,
        prefix: &str,
        rec: &mut Vec<(String, Var)>,
    ) -> CnxBlockVars {
        let leaf = |name: &str, t: &Tensor, tape: &mut Tape, rec: &mut Vec<(String, Var)>| {
            let v = tape.leaf(t.clone());
            rec.push((format!("{prefix}{name}"), v));
            v
        };
        CnxBlockVars {
            dw_w: leaf("dw_w", &self.dw_w, tape, rec),
            dw_b: leaf("dw_b", &self.dw_b, tape, rec),
            ln_gamma: leaf("ln_gamma", &self.ln_gamma, tape, rec),
            ln_beta: leaf("ln_beta", &self.ln_beta, tape, rec),
            expand_w: leaf("expand_w", &self.expand_w, tape, rec),
            expand_b: leaf("expand_b", &self.expand_b, tape, rec),
            grn_gamma: leaf("grn_gamma", &self.grn_gamma, tape, rec),
            grn_beta: leaf("grn_beta", &self.grn_beta, tape, rec),
            project_w: leaf("project_w", &self.project_w, tape, rec),
            project_b: leaf("project_b", &self.project_b, tape, rec),
            channels: self.channels(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> CnxBlockVars {
        self.bind_recorded(tape, "", &mut Vec::new())
    }
}

impl ParamBlock for CnxBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}dw_w"), &self.dw_w);
        f(&format!("{prefix}dw_b"), &self.dw_b);
        f(&format!("{prefix}ln_gamma"), &self.ln_gamma);
        f(&format!("{prefix}ln_beta"), &self.ln_beta);
        f(&format!("{prefix}expand_w"), &self.expand_w);
        f(&format!("{prefix}expand_b"), &self.expand_b);
        f(&format!("{prefix}grn_gamma"), &self.grn_gamma);
        f(&format!("{prefix}grn_beta"), &self.grn_beta);
        f(&format!("{prefix}project_w"), &self.project_w);
        f(&format!("{prefix}project_b"), &self.project_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}dw_w"), &mut self.dw_w);
        f(&format!("{prefix}dw_b"), &mut self.dw_b);
        f(&format!("{prefix}ln_gamma"), &mut self.ln_gamma);
        f(&format!("{prefix}ln_beta"), &mut self.ln_beta);
        f(&format!("{prefix}expand_w"), &mut self.expand_w);
        f(&format!("{prefix}expand_b"), &mut self.expand_b);
        f(&format!("{prefix}grn_gamma"), &mut self.grn_gamma);
        f(&format!("{prefix}grn_beta"), &mut self.grn_beta);
        f(&format!("{prefix}project_w"), &mut self.project_w);
        f(&format!("{prefix}project_b"), &mut self.project_b);
    }
}

#[derive(Clone, Copy)]
pub struct CnxBlockVars {
    pub dw_w: Var,
    pub dw_b: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub expand_w: Var,
    pub expand_b: Var,
    pub grn_gamma: Var,
    pub grn_beta: Var,
    pub project_w: Var,
    pub project_b: Var,
    channels: usize,
}

const NORM_EPS: f64 = 1e-6;

/// x + project(GRN(GELU(expand(LN(dwconv7x7(x)))))).
pub fn cnx_block(tape: &mut Tape, x: Var, p: &CnxBlockVars) -> Result<Var, TensorError> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != p.channels {
        return Err(TensorError::ShapeMismatch {
            op: "cnx_block",
            detail: format!("input {s:?} vs block parameters for {} channels", p.channels),
        });
    }
    let c = p.channels;
    let d = tape.conv2d(x, p.dw_w, p.dw_b, 1, 3, c)?;
    let n = tape.layer_norm_chan(d, p.ln_gamma, p.ln_beta, NORM_EPS)?;
    let e = tape.conv2d(n, p.expand_w, p.expand_b, 1, 0, 1)?;
    let g = tape.gelu(e);
    let r = tape.grn(g, p.grn_gamma, p.grn_beta, NORM_EPS)?;
    let proj = tape.conv2d(r, p.project_w, p.project_b, 1, 0, 1)?;
    tape.add(x, proj)
}

/// A composite block's attention parameters; which fields are present is
/// fixed by the `AttentionKind`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub cnx: CnxBlockParams,
    pub chan: Option<ChannelAttnParams>,
    pub spat: Option<SpatialAttnParams>,
}

impl BlockParams {
    pub fn init(c: usize, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        BlockParams {
            cnx: CnxBlockParams::init(c, rng),
            chan: cfg
                .attention_kind
                .has_channel()
                .then(|| ChannelAttnParams::init(c, cfg.r, rng)),
            spat: cfg
                .attention_kind
                .has_spatial()
                .then(|| SpatialAttnParams::init(7, rng)),
        }
    }

    fn bind_recorded(
        &self,
        tape: &mut Tape,
        prefix: &str,
        rec: &mut Vec<(String, Var)>,
    ) -> BlockVars {
        BlockVars {
            cnx: self.cnx.bind_recorded(tape, &format!("{prefix}cnx."), rec),
            chan: self
                .chan
                .as_ref()
                .map(|p| p.bind_recorded(tape, &format!("{prefix}attn."), rec)),
            spat: self
                .spat
                .as_ref()
                .map(|p| p.bind_recorded(tape, &format!("{prefix}spat."), rec)),
        }
    }
}

impl ParamBlock for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cnx.visit(&format!("{prefix}cnx."), f);
        if let Some(p) = &self.chan {
            p.visit(&format!("{prefix}attn."), f);
        }
        if let Some(p) = &self.spat {
            p.visit(&format!("{prefix}spat."), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cnx.visit_mut(&format!("{prefix}cnx."), f);
        if let Some(p) = &mut self.chan {
            p.visit_mut(&format!("{prefix}attn."), f);
        }
        if let Some(p) = &mut self.spat {
            p.visit_mut(&format!("{prefix}spat."), f);
        }
    }
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub cnx: CnxBlockVars,
    pub chan: Option<ChannelAttnVars>,
    pub spat: Option<SpatialAttnVars>,
}

/// ConvNeXt block followed by the configured attention module. Returns the
/// channel-attention state when one exists; for the single-stage kinds the
/// state's stage-2 fields mirror stage 1.
pub fn cnx_waa_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockVars,
    kind: AttentionKind,
    fusion: FusionConfig,
) -> Result<(Var, Option<AttentionState>), TensorError> {
    let y = cnx_block(tape, x, &p.cnx)?;
    let chan = || p.chan.as_ref().expect("attention kind requires channel params");
    let spat = || p.spat.as_ref().expect("attention kind requires spatial params");
    match kind {
        AttentionKind::None => Ok((y, None)),
        AttentionKind::Se => {
            let a = se_channel_gate(tape, y, chan())?;
            let out = tape.mul_chan(y, a)?;
            Ok((out, Some(single_stage_state(tape, a))))
        }
        AttentionKind::Cbam => {
            let a = cbam_channel_gate(tape, y, chan())?;
            let gated = tape.mul_chan(y, a)?;
            let out = spatial_attention(tape, gated, spat())?;
            Ok((out, Some(single_stage_state(tape, a))))
        }
        AttentionKind::WacaSe => {
            let (out, st) = waca_se(tape, y, chan(), fusion)?;
            Ok((out, Some(st)))
        }
        AttentionKind::WacaCbam => {
            let (mid, st) = waca_cbam(tape, y, chan(), fusion)?;
            let out = spatial_attention(tape, mid, spat())?;
            Ok((out, Some(st)))
        }
    }
}

fn single_stage_state(tape: &Tape, a: Var) -> AttentionState {
    let at = tape.tensor(a);
    let mut w1 = at.clone();
    for v in w1.data_mut() {
        *v = 1.0 - *v;
    }
    AttentionState {
        s1: Vec::new(),
        a1: at.clone(),
        w1,
        s2: Vec::new(),
        a2: at.clone(),
        fused: at,
    }
}

/// One decoder stage: skip-connection gate, 1x1 fuse conv after concat,
/// then the composite blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecStageParams {
    pub gate: AttnGateParams,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl ParamBlock for DecStageParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gate.visit(&format!("{prefix}gate."), f);
        f(&format!("{prefix}fuse_w"), &self.fuse_w);
        f(&format!("{prefix}fuse_b"), &self.fuse_b);
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{k}."), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gate.visit_mut(&format!("{prefix}gate."), f);
        f(&format!("{prefix}fuse_w"), &mut self.fuse_w);
        f(&format!("{prefix}fuse_b"), &mut self.fuse_b);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{k}."), f);
        }
    }
}

struct DecStageVars {
    gate: AttnGateVars,
    fuse_w: Var,
    fuse_b: Var,
    blocks: Vec<BlockVars>,
}

/// The full model: stem, encoder stages with strided-conv downsampling,
/// mirrored decoder with bilinear upsampling and gated skips, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    /// `enc[i]` holds the blocks of encoder stage i (width `widths[i]`).
    pub enc: Vec<Vec<BlockParams>>,
    /// `down[i]` maps stage i to stage i+1 (strided 2x2 conv).
    pub down: Vec<(Tensor, Tensor)>,
    /// `dec[j]` consumes the skip of stage `stages-2-j`.
    pub dec: Vec<DecStageParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Model {
    /// Deterministic initialization: truncated-normal (std 0.02) weights,
    /// zero biases, unit norm gammas, traversal order fixed by the config.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Model, String> {
        config.validate()?;
        let mut rng = Rng::keyed(&[0x6d6f64656c, seed]);
        let w = &config.widths;
        let stages = config.stages();

        let mut stem_w = Tensor::zeros(&[w[0], config.in_channels, 1, 1]);
        crate::attention::fill_trunc_normal(&mut stem_w, &mut rng);
        let stem_b = Tensor::zeros(&[w[0]]);

        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..stages {
            let blocks = (0..config.blocks_per_stage)
                .map(|_| BlockParams::init(w[i], &config, &mut rng))
                .collect();
            enc.push(blocks);
            if i + 1 < stages {
                let mut dw = Tensor::zeros(&[w[i + 1], w[i], 2, 2]);
                crate::attention::fill_trunc_normal(&mut dw, &mut rng);
                down.push((dw, Tensor::zeros(&[w[i + 1]])));
            }
        }

        let mut dec = Vec::new();
        for j in 0..stages - 1 {
            let i = stages - 2 - j;
            let gate = AttnGateParams::init(w[i + 1], w[i], &mut rng);
            let mut fuse_w = Tensor::zeros(&[w[i], w[i + 1] + w[i], 1, 1]);
            crate::attention::fill_trunc_normal(&mut fuse_w, &mut rng);
            let fuse_b = Tensor::zeros(&[w[i]]);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| BlockParams::init(w[i], &config, &mut rng))
                .collect();
            dec.push(DecStageParams { gate, fuse_w, fuse_b, blocks });
        }

        let mut head_w = Tensor::zeros(&[1, w[0], 1, 1]);
        crate::attention::fill_trunc_normal(&mut head_w, &mut rng);
        let head_b = Tensor::zeros(&[1]);

        Ok(Model { config, stem_w, stem_b, enc, down, dec, head_w, head_b })
    }

    /// Flattens all parameters into a name-keyed set (lexicographic order).
    pub fn flatten(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.visit("", &mut |name, t| ps.insert(name, t.clone()));
        ps
    }

    /// Overwrites parameters from `ps`. Every model parameter must be
    /// present with the exact shape, and `ps` must contain nothing else.
    pub fn assign(&mut self, ps: &ParamSet) -> Result<(), String> {
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        let mut used = 0usize;
        self.visit_mut("", &mut |name, t| match ps.get(name) {
            None => missing.push(String::from(name)),
            Some(src) => {
                if src.shape() != t.shape() {
                    bad_shape.push(format!(
                        "{name}: expected {:?}, found {:?}",
                        t.shape(),
                        src.shape()
                    ));
                } else {
                    *t = src.clone();
                    used += 1;
                }
            }
        });
        if !missing.is_empty() || !bad_shape.is_empty() {
            return Err(format!(
                "parameter set does not match architecture; missing: {missing:?}; shape mismatches: {bad_shape:?}"
            ));
        }
        if used != ps.len() {
            let expected = self.flatten();
            let extra: Vec<&String> =
                ps.names().filter(|n| expected.get(n).is_none()).collect();
            return Err(format!("parameter set has unknown entries: {extra:?}"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamBlock::param_count(self)
    }

    /// Number of named parameter tensors.
    pub fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }

    /// Binds every parameter as a tape leaf; the returned handle drives
    /// `unet_forward` and exposes the (name, var) list for gradient readout.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut rec = Vec::new();
        let stem_w = tape.leaf(self.stem_w.clone());
        rec.push((String::from("stem.w"), stem_w));
        let stem_b = tape.leaf(self.stem_b.clone());
        rec.push((String::from("stem.b"), stem_b));
        let enc = self
            .enc
            .iter()
            .enumerate()
            .map(|(i, blocks)| {
                blocks
                    .iter()
                    .enumerate()
                    .map(|(k, b)| b.bind_recorded(tape, &format!("enc{i}.block{k}."), &mut rec))
                    .collect()
            })
            .collect();
        let down = self
            .down
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                let wv = tape.leaf(w.clone());
                rec.push((format!("down{i}.w"), wv));
                let bv = tape.leaf(b.clone());
                rec.push((format!("down{i}.b"), bv));
                (wv, bv)
            })
            .collect();
        let dec = self
            .dec
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let gate = d.gate.bind_recorded(tape, &format!("dec{j}.gate."), &mut rec);
                let fuse_w = tape.leaf(d.fuse_w.clone());
                rec.push((format!("dec{j}.fuse_w"), fuse_w));
                let fuse_b = tape.leaf(d.fuse_b.clone());
                rec.push((format!("dec{j}.fuse_b"), fuse_b));
                let blocks = d
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(k, b)| b.bind_recorded(tape, &format!("dec{j}.block{k}."), &mut rec))
                    .collect();
                DecStageVars { gate, fuse_w, fuse_b, blocks }
            })
            .collect();
        let head_w = tape.leaf(self.head_w.clone());
        rec.push((String::from("head.w"), head_w));
        let head_b = tape.leaf(self.head_b.clone());
        rec.push((String::from("head.b"), head_b));
        ModelVars {
            config: self.config.clone(),
            stem_w,
            stem_b,
            enc,
            down,
            dec,
            head_w,
            head_b,
            leaves: rec,
        }
    }
}

impl ParamBlock for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}stem.w"), &self.stem_w);
        f(&format!("{prefix}stem.b"), &self.stem_b);
        for (i, blocks) in self.enc.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                b.visit(&format!("{prefix}enc{i}.block{k}."), f);
            }
        }
        for (i, (w, b)) in self.down.iter().enumerate() {
            f(&format!("{prefix}down{i}.w"), w);
            f(&format!("{prefix}down{i}.b"), b);
        }
        for (j, d) in self.dec.iter().enumerate() {
            d.visit(&format!("{prefix}dec{j}."), f);
        }
        f(&format!("{prefix}head.w"), &self.head_w);
        f(&format!("{prefix}head.b"), &self.head_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}stem.w"), &mut self.stem_w);
        f(&format!("{prefix}stem.b"), &mut self.stem_b);
        for (i, blocks) in self.enc.iter_mut().enumerate() {
            for (k, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}enc{i}.block{k}."), f);
            }
        }
        for (i, (w, b)) in self.down.iter_mut().enumerate() {
            f(&format!("{prefix}down{i}.w"), w);
            f(&format!("{prefix}down{i}.b"), b);
        }
        for (j, d) in self.dec.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}dec{j}."), f);
        }
        f(&format!("{prefix}head.w"), &mut self.head_w);
        f(&format!("{prefix}head.b"), &mut self.head_b);
    }
}

/// Tape-bound model parameters.
pub struct ModelVars {
    pub config: UNetConfig,
    stem_w: Var,
    stem_b: Var,
    enc: Vec<Vec<BlockVars>>,
    down: Vec<(Var, Var)>,
    dec: Vec<DecStageVars>,
    head_w: Var,
    head_b: Var,
    /// (parameter name, leaf var) in bind order; names match `flatten()`.
    pub leaves: Vec<(String, Var)>,
}

/// Full forward pass; returns the [N,1,H,W] prediction.
pub fn unet_forward(tape: &mut Tape, x: Var, m: &ModelVars) -> Result<Var, TensorError> {
    Ok(unet_forward_with_state(tape, x, m)?.0)
}

/// Forward pass that also returns the attention state of every composite
/// block in execution order (encoder top-down, then decoder bottom-up).
pub fn unet_forward_with_state(
    tape: &mut Tape,
    x: Var,
    m: &ModelVars,
) -> Result<(Var, Vec<Option<AttentionState>>), TensorError> {
    let s = tape.shape(x).to_vec();
    let div = m.config.spatial_divisor();
    if s.len() != 4 || s[1] != m.config.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "unet_forward",
            detail: format!("input {s:?} vs {} configured input channels", m.config.in_channels),
        });
    }
    if s[2] % div != 0 || s[3] % div != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "unet_forward",
            detail: format!(
                "spatial dims {}x{} must be divisible by {div} for {} stages",
                s[2],
                s[3],
                m.config.stages()
            ),
        });
    }
    let kind = m.config.attention_kind;
    let fusion = FusionConfig::new(m.config.alpha);
    let mut states = Vec::new();

    let mut cur = tape.conv2d(x, m.stem_w, m.stem_b, 1, 0, 1)?;
    let mut skips = Vec::new();
    for (i, blocks) in m.enc.iter().enumerate() {
        for b in blocks {
            let (y, st) = cnx_waa_block(tape, cur, b, kind, fusion)?;
            cur = y;
            states.push(st);
        }
        if i + 1 < m.enc.len() {
            skips.push(cur);
            let (dw, db) = m.down[i];
            cur = tape.conv2d(cur, dw, db, 2, 0, 1)?;
        }
    }

    for (j, d) in m.dec.iter().enumerate() {
        let skip = skips[skips.len() - 1 - j];
        let sk_shape = tape.shape(skip).to_vec();
        let up = tape.resize_bilinear(cur, sk_shape[2], sk_shape[3])?;
        let gated = attention_gate(tape, up, skip, &d.gate)?;
        let cat = tape.concat_channels(up, gated)?;
        cur = tape.conv2d(cat, d.fuse_w, d.fuse_b, 1, 0, 1)?;
        for b in &d.blocks {
            let (y, st) = cnx_waa_block(tape, cur, b, kind, fusion)?;
            cur = y;
            states.push(st);
        }
    }

    let out = tape.conv2d(cur, m.head_w, m.head_b, 1, 0, 1)?;
    Ok((out, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rand4(rng: &mut Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(&shape, rng.normal_vec(n)).unwrap()
    }

    fn small_cfg(kind: AttentionKind) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            widths: vec![4, 8],
            blocks_per_stage: 1,
            attention_kind: kind,
            alpha: 0.5,
            r: 2,
        }
    }

    #[test]
    fn cnx_block_zero_params_is_identity() {
        let mut rng = Rng::new(1);
        let x = rand4(&mut rng, [2, 3, 5, 5]);
        let p = CnxBlockParams::zeros(3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = p.bind(&mut tape);
        let y = cnx_block(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.values(y), x.data());
    }

    #[test]
    fn cnx_block_preserves_shape() {
        let mut rng = Rng::new(2);
        for shape in [[1, 2, 4, 4], [2, 5, 7, 3], [1, 1, 8, 8]] {
            let x = rand4(&mut rng, shape);
            let p = CnxBlockParams::init(shape[1], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let pv = p.bind(&mut tape);
            let y = cnx_block(&mut tape, xv, &pv).unwrap();
            assert_eq!(tape.shape(y), shape);
        }
    }

    #[test]
    fn cnx_block_rejects_channel_mismatch() {
        let p = CnxBlockParams::zeros(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 4]));
        let pv = p.bind(&mut tape);
        assert!(cnx_block(&mut tape, x, &pv).is_err());
    }

    #[test]
    fn cnx_block_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let c = 2;
        let x = rand4(&mut rng, [1, c, 4, 4]);
        let p = CnxBlockParams::init(c, &mut rng);
        let mut inputs = vec![x];
        p.visit("", &mut |_, t| inputs.push(t.clone()));
        crate::gradcheck::central_diff_check(
            |t, v| {
                let pv = CnxBlockVars {
                    dw_w: v[1],
                    dw_b: v[2],
                    ln_gamma: v[3],
                    ln_beta: v[4],
                    expand_w: v[5],
                    expand_b: v[6],
                    grn_gamma: v[7],
                    grn_beta: v[8],
                    project_w: v[9],
                    project_b: v[10],
                    channels: c,
                };
                let y = cnx_block(t, v[0], &pv).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.mean_all(sq)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn composite_block_none_equals_plain_block() {
        let mut rng = Rng::new(4);
        let cfg = small_cfg(AttentionKind::None);
        let b = BlockParams::init(4, &cfg, &mut rng);
        let x = rand4(&mut rng, [1, 4, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let bv = b.bind_recorded(&mut tape, "", &mut Vec::new());
        let (y, st) =
            cnx_waa_block(&mut tape, xv, &bv, AttentionKind::None, FusionConfig::default())
                .unwrap();
        assert!(st.is_none());
        let plain = cnx_block(&mut tape, xv, &bv.cnx).unwrap();
        assert_eq!(tape.values(y), tape.values(plain));
    }

    #[test]
    fn composite_block_zero_params_quarters_input() {
        // Residual identity through the zeroed block, then two 0.5 gates.
        let mut rng = Rng::new(5);
        let x = rand4(&mut rng, [1, 4, 4, 4]);
        let b = BlockParams {
            cnx: CnxBlockParams::zeros(4),
            chan: Some(ChannelAttnParams::zeros(4, 2)),
            spat: Some(SpatialAttnParams::zeros(7)),
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = b.bind_recorded(&mut tape, "", &mut Vec::new());
        let (y, st) =
            cnx_waa_block(&mut tape, xv, &bv, AttentionKind::WacaCbam, FusionConfig::default())
                .unwrap();
        for (u, v) in tape.values(y).iter().zip(x.data()) {
            assert!((u - 0.25 * v).abs() < 1e-15);
        }
        let st = st.unwrap();
        for (a, w) in st.a1.data().iter().zip(st.w1.data()) {
            assert_eq!(*a, 0.5);
            assert_eq!(*w, 0.5);
        }
    }

    #[test]
    fn composite_block_equals_manual_composition() {
        let mut rng = Rng::new(6);
        let cfg = small_cfg(AttentionKind::WacaCbam);
        let b = BlockParams::init(4, &cfg, &mut rng);
        let x = rand4(&mut rng, [1, 4, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let bv = b.bind_recorded(&mut tape, "", &mut Vec::new());
        let (y, _) =
            cnx_waa_block(&mut tape, xv, &bv, AttentionKind::WacaCbam, FusionConfig::default())
                .unwrap();
        let mid = cnx_block(&mut tape, xv, &bv.cnx).unwrap();
        let (manual, _) = crate::attention::waa(
            &mut tape,
            mid,
            bv.chan.as_ref().unwrap(),
            bv.spat.as_ref().unwrap(),
            FusionConfig::default(),
        )
        .unwrap();
        for (u, v) in tape.values(y).iter().zip(tape.values(manual)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn unet_output_shape_contract() {
        let model = Model::init(UNetConfig::default(), 0).unwrap();
        let mut rng = Rng::new(7);
        let x = rand4(&mut rng, [2, 6, 64, 64]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mv = model.bind(&mut tape);
        let y = unet_forward(&mut tape, xv, &mv).unwrap();
        assert_eq!(tape.shape(y), [2, 1, 64, 64]);
        assert!(tape.tensor(y).is_finite());
    }

    #[test]
    fn unet_rejects_indivisible_spatial_dims() {
        let model = Model::init(small_cfg(AttentionKind::WacaCbam), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 7, 8]));
        let mv = model.bind(&mut tape);
        assert!(unet_forward(&mut tape, x, &mv).is_err());
    }

    #[test]
    fn param_count_is_config_determined_and_waca_adds_none() {
        let count = |kind| {
            Model::init(small_cfg(kind), 3)
                .unwrap()
                .param_count()
        };
        assert_eq!(count(AttentionKind::Se), count(AttentionKind::WacaSe));
        assert_eq!(count(AttentionKind::Cbam), count(AttentionKind::WacaCbam));
        assert!(count(AttentionKind::None) < count(AttentionKind::Se));
        assert!(count(AttentionKind::Se) < count(AttentionKind::Cbam));
        // Equal configs, different seeds: identical counts.
        assert_eq!(
            Model::init(small_cfg(AttentionKind::WacaCbam), 0).unwrap().param_count(),
            Model::init(small_cfg(AttentionKind::WacaCbam), 99).unwrap().param_count()
        );
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = Model::init(small_cfg(AttentionKind::WacaCbam), 42).unwrap();
        let b = Model::init(small_cfg(AttentionKind::WacaCbam), 42).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(8);
        let x = rand4(&mut rng, [1, 3, 8, 8]);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mv = m.bind(&mut tape);
            let y = unet_forward(&mut tape, xv, &mv).unwrap();
            tape.tensor(y)
        };
        assert_eq!(run(&a), run(&b));
        let c = Model::init(small_cfg(AttentionKind::WacaCbam), 43).unwrap();
        assert_ne!(run(&a), run(&c));
    }

    #[test]
    fn flatten_assign_round_trip_and_validation() {
        let model = Model::init(small_cfg(AttentionKind::WacaCbam), 1).unwrap();
        let ps = model.flatten();
        assert_eq!(ps.count_scalars(), model.param_count());
        assert_eq!(ps.len(), model.leaf_count());
        let mut other = Model::init(small_cfg(AttentionKind::WacaCbam), 2).unwrap();
        assert_ne!(other, model);
        other.assign(&ps).unwrap();
        assert_eq!(other, model);
        // Missing entry.
        let mut broken = ParamSet::new();
        for (name, t) in ps.iter() {
            if name != "head.w" {
                broken.insert(name.clone(), t.clone());
            }
        }
        let err = other.assign(&broken).unwrap_err();
        assert!(err.contains("head.w"), "{err}");
        // Wrong shape.
        let mut wrong = model.flatten();
        *wrong.get_mut("head.b").unwrap() = Tensor::zeros(&[2]);
        let err = other.assign(&wrong).unwrap_err();
        assert!(err.contains("head.b"), "{err}");
        // Extra entry.
        let mut extra = model.flatten();
        extra.insert("bogus", Tensor::zeros(&[1]));
        let err = other.assign(&extra).unwrap_err();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn bind_names_match_flatten_names() {
        let model = Model::init(small_cfg(AttentionKind::WacaCbam), 1).unwrap();
        let ps = model.flatten();
        let mut tape = Tape::new();
        let mv = model.bind(&mut tape);
        assert_eq!(mv.leaves.len(), ps.len());
        for (name, var) in &mv.leaves {
            let t = ps.get(name).unwrap_or_else(|| panic!("missing {name}"));
            assert_eq!(tape.values(*var), t.data(), "{name}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut cfg = small_cfg(AttentionKind::WacaCbam);
        cfg.widths = vec![8, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(AttentionKind::WacaCbam);
        cfg.r = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(AttentionKind::WacaCbam);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(AttentionKind::None);
        cfg.r = 3; // irrelevant when no channel attention
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn attention_kind_parse_round_trip() {
        for k in AttentionKind::ALL {
            assert_eq!(AttentionKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(AttentionKind::parse("bogus"), None);
    }
}
