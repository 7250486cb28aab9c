//! Golden static IR-drop reference: a multi-layer power-grid model, its
//! modified-nodal-analysis (MNA) assembly, a conjugate-gradient solver, and
//! a synthetic case generator that produces input feature channels plus the
//! ground-truth drop map.
//!
//! The grid is a stack of layers over an H x W cell raster. Layer l has
//! nodes wherever both cell coordinates are multiples of its pitch;
//! neighboring nodes on a layer are joined by resistive segments, and
//! vertically aligned nodes on adjacent layers are joined by vias. Pads are
//! ideal vdd sources; load currents draw from the lowest (pitch-1) layer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// One metal layer: node pitch in cells and the conductance of one segment
/// between neighboring nodes (siemens).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub pitch: usize,
    pub sheet_conductance: f64,
}

/// A complete power-grid instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PdnGrid {
    pub h: usize,
    pub w: usize,
    pub vdd: f64,
    /// Bottom (load-bearing) layer first; its pitch must be 1.
    pub layers: Vec<LayerSpec>,
    pub via_conductance: f64,
    /// (layer, i, j) nodes held at vdd.
    pub pads: BTreeSet<(usize, usize, usize)>,
    /// Amperes drawn per cell at the lowest layer, row-major h*w.
    pub currents: Vec<f64>,
}

impl PdnGrid {
    pub fn validate(&self) -> Result<(), String> {
        if self.h == 0 || self.w == 0 {
            return Err("grid dims must be positive".into());
        }
        if self.layers.is_empty() {
            return Err("at least one layer required".into());
        }
        if self.layers[0].pitch != 1 {
            return Err("lowest layer must have pitch 1 (it carries the loads)".into());
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.pitch == 0 {
                return Err(format!("layer {l} pitch must be positive"));
            }
            if !(spec.sheet_conductance > 0.0) {
                return Err(format!("layer {l} conductance must be positive"));
            }
        }
        if !(self.via_conductance > 0.0) {
            return Err("via conductance must be positive".into());
        }
        if self.pads.is_empty() {
            return Err("grid needs at least one pad node; the system is singular without one".into());
        }
        for &(l, i, j) in &self.pads {
            if !self.has_node(l, i, j) {
                return Err(format!("pad ({l},{i},{j}) is not a valid node position"));
            }
        }
        if self.currents.len() != self.h * self.w {
            return Err(format!(
                "currents length {} != h*w = {}",
                self.currents.len(),
                self.h * self.w
            ));
        }
        if self.currents.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err("load currents must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn has_node(&self, layer: usize, i: usize, j: usize) -> bool {
        layer < self.layers.len()
            && i < self.h
            && j < self.w
            && i % self.layers[layer].pitch == 0
            && j % self.layers[layer].pitch == 0
    }

    /// All node coordinates of one layer, row-major.
    fn layer_nodes(&self, layer: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let p = self.layers[layer].pitch;
        (0..self.h)
            .step_by(p)
            .flat_map(move |i| (0..self.w).step_by(p).map(move |j| (i, j)))
    }
}

/// Sparse symmetric conductance system G V = J over the non-pad nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MnaSystem {
    /// Adjacency rows including the diagonal; symmetric.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Right-hand side: pad couplings minus load currents (amperes).
    pub j: Vec<f64>,
    /// Grid coordinate of each unknown, aligned with the solution vector.
    pub coord_of: Vec<(usize, usize, usize)>,
    node_of: BTreeMap<(usize, usize, usize), usize>,
}

impl MnaSystem {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn index_of(&self, layer: usize, i: usize, j: usize) -> Option<usize> {
        self.node_of.get(&(layer, i, j)).copied()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(c, g) in row {
                acc += g * x[c];
            }
            out[r] = acc;
        }
    }

    /// Dense copy of G, for small-system oracles.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut m = vec![vec![0.0; n]; n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, g) in row {
                m[r][c] += g;
            }
        }
        m
    }
}

/// Stamps the grid into the reduced MNA system: each resistive branch of
/// conductance g adds +g to both touching diagonals and -g off-diagonal;
/// branches into a pad instead add +g to the remaining diagonal and
/// +g*vdd to J; load currents subtract from J.
pub fn assemble_mna(grid: &PdnGrid) -> Result<MnaSystem, String> {
    grid.validate()?;

    let mut node_of = BTreeMap::new();
    let mut coord_of = Vec::new();
    for l in 0..grid.layers.len() {
        for (i, j) in grid.layer_nodes(l) {
            if !grid.pads.contains(&(l, i, j)) {
                node_of.insert((l, i, j), coord_of.len());
                coord_of.push((l, i, j));
            }
        }
    }

    let n = coord_of.len();
    let mut diag = vec![0.0; n];
    let mut off: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut j_vec = vec![0.0; n];

    let mut stamp = |a: (usize, usize, usize), b: (usize, usize, usize), g: f64| {
        let ia = node_of.get(&a).copied();
        let ib = node_of.get(&b).copied();
        match (ia, ib) {
            (Some(ia), Some(ib)) => {
                diag[ia] += g;
                diag[ib] += g;
                off[ia].push((ib, -g));
                off[ib].push((ia, -g));
            }
            (Some(ia), None) => {
                diag[ia] += g;
                j_vec[ia] += g * grid.vdd;
            }
            (None, Some(ib)) => {
                diag[ib] += g;
                j_vec[ib] += g * grid.vdd;
            }
            (None, None) => {}
        }
    };

    for (l, spec) in grid.layers.iter().enumerate() {
        let p = spec.pitch;
        let g = spec.sheet_conductance;
        for (i, j) in grid.layer_nodes(l) {
            if i + p < grid.h {
                stamp((l, i, j), (l, i + p, j), g);
            }
            if j + p < grid.w {
                stamp((l, i, j), (l, i, j + p), g);
            }
        }
        if l + 1 < grid.layers.len() {
            // Vias wherever both layers have a node at the same cell.
            for (i, j) in grid.layer_nodes(l + 1) {
                if i % p == 0 && j % p == 0 {
                    stamp((l, i, j), (l + 1, i, j), grid.via_conductance);
                }
            }
        }
    }

    for i in 0..grid.h {
        for j in 0..grid.w {
            let c = grid.currents[i * grid.w + j];
            if c != 0.0 {
                if let Some(&idx) = node_of.get(&(0, i, j)) {
                    j_vec[idx] -= c;
                }
            }
        }
    }

    let rows = off
        .into_iter()
        .enumerate()
        .map(|(r, mut row)| {
            row.push((r, diag[r]));
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    Ok(MnaSystem { rows, j: j_vec, coord_of, node_of })
}

/// Conjugate gradients on the SPD system, warm-started at the vdd vector.
/// Converges when ||G V - J|| / ||J|| <= tol (or absolutely when J = 0).
pub fn solve_cg(
    sys: &MnaSystem,
    vdd: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, String> {
    let n = sys.dim();
    let mut v = vec![vdd; n];
    let jnorm = libm::sqrt(sys.j.iter().map(|x| x * x).sum::<f64>());
    let target = if jnorm > 0.0 { tol * jnorm } else { tol };

    let mut gv = vec![0.0; n];
    sys.matvec(&v, &mut gv);
    let mut r: Vec<f64> = sys.j.iter().zip(&gv).map(|(j, g)| j - g).collect();
    let mut rr: f64 = r.iter().map(|x| x * x).sum();
    if libm::sqrt(rr) <= target {
        return Ok(v);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        sys.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(format!("system is not positive definite (p'Gp = {pap})"));
        }
        let alpha = rr / pap;
        for k in 0..n {
            v[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new: f64 = r.iter().map(|x| x * x).sum();
        if libm::sqrt(rr_new) <= target {
            return Ok(v);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    Err(format!(
        "conjugate gradients did not converge in {max_iter} iterations; residual {} vs target {target}",
        libm::sqrt(rr)
    ))
}

/// Default relative residual tolerance for the golden solver.
pub const CG_TOL: f64 = 1e-10;

/// Per-cell IR drop at the lowest layer in millivolts; pad cells are 0.
pub fn ir_drop_map(grid: &PdnGrid, sys: &MnaSystem, v: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(&[1, grid.h, grid.w]);
    for i in 0..grid.h {
        for j in 0..grid.w {
            let drop = match sys.index_of(0, i, j) {
                Some(idx) => (grid.vdd - v[idx]) * 1000.0,
                None => 0.0, // pad node pinned at vdd
            };
            out.data_mut()[i * grid.w + j] = drop;
        }
    }
    out
}

/// Assembles, solves, and extracts the drop map in one step.
pub fn solve_ir_drop(grid: &PdnGrid) -> Result<Tensor, String> {
    let sys = assemble_mna(grid)?;
    let v = solve_cg(&sys, grid.vdd, CG_TOL, 20 * sys.dim().max(100))?;
    Ok(ir_drop_map(grid, &sys, &v))
}

/// Ranges are inclusive (lo, hi) pairs sampled uniformly per case.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub layers: usize,
    pub vdd: f64,
    pub blob_count: (usize, usize),
    /// Peak current density per blob, amperes per cell.
    pub blob_peak: (f64, f64),
    /// Blob radius in cells.
    pub blob_sigma: (f64, f64),
    pub pad_count: (usize, usize),
    /// Bottom-layer segment conductance; each higher layer gets 4x more.
    pub base_conductance: (f64, f64),
    pub via_conductance: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            h: 64,
            w: 64,
            layers: 3,
            vdd: 1.0,
            blob_count: (3, 8),
            blob_peak: (0.002, 0.01),
            blob_sigma: (2.0, 8.0),
            pad_count: (2, 5),
            base_conductance: (0.5, 2.0),
            via_conductance: (5.0, 20.0),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("at least one layer".into());
        }
        // 4x divisibility for the coarse hypothetical solve.
        if self.h % 4 != 0 || self.w % 4 != 0 {
            return Err(format!("dims {}x{} must be divisible by 4", self.h, self.w));
        }
        for (name, (lo, hi)) in [
            ("blob_peak", self.blob_peak),
            ("blob_sigma", self.blob_sigma),
            ("base_conductance", self.base_conductance),
            ("via_conductance", self.via_conductance),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(format!("invalid {name} range ({lo}, {hi})"));
            }
        }
        if self.blob_count.0 > self.blob_count.1 || self.blob_count.0 == 0 {
            return Err("invalid blob_count range".into());
        }
        if self.pad_count.0 > self.pad_count.1 || self.pad_count.0 == 0 {
            return Err("invalid pad_count range".into());
        }
        Ok(())
    }
}

/// Feature channel count of generator version 1.
pub const FEATURE_CHANNELS: usize = 6;
/// Recorded in metadata so the channel recipe can evolve without drift.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CaseMeta {
    pub seed: u64,
    pub vdd: f64,
    pub h: usize,
    pub w: usize,
    pub layers: usize,
    pub gen_version: u32,
}

/// One synthetic training/evaluation case: feature stack, golden target
/// (millivolts), and provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub features: Tensor,
    pub target: Tensor,
    pub meta: CaseMeta,
}

/// Builds the randomized grid for a seed. Exposed so tests can probe the
/// physics (linearity, superposition) on the exact generated instance.
pub fn gen_grid(seed: u64, cfg: &GenConfig) -> Result<PdnGrid, String> {
    cfg.validate()?;
    let mut rng = Rng::keyed(&[0x70646e2d67656e, seed]);

    let base = rng.uniform_in(cfg.base_conductance.0, cfg.base_conductance.1);
    let layers: Vec<LayerSpec> = (0..cfg.layers)
        .map(|l| LayerSpec {
            pitch: 1 << l,
            // Upper layers are thicker metal: 4x conductance per layer.
            sheet_conductance: base * (1u64 << (2 * l)) as f64,
        })
        .collect();
    let via_conductance = rng.uniform_in(cfg.via_conductance.0, cfg.via_conductance.1);

    // Load currents: sum of Gaussian blobs.
    let mut currents = vec![0.0; cfg.h * cfg.w];
    let n_blobs = cfg.blob_count.0 + rng.below(cfg.blob_count.1 - cfg.blob_count.0 + 1);
    for _ in 0..n_blobs {
        let ci = rng.uniform_in(0.0, cfg.h as f64 - 1.0);
        let cj = rng.uniform_in(0.0, cfg.w as f64 - 1.0);
        let peak = rng.uniform_in(cfg.blob_peak.0, cfg.blob_peak.1);
        let sigma = rng.uniform_in(cfg.blob_sigma.0, cfg.blob_sigma.1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for i in 0..cfg.h {
            for j in 0..cfg.w {
                let d2 = (i as f64 - ci) * (i as f64 - ci) + (j as f64 - cj) * (j as f64 - cj);
                currents[i * cfg.w + j] += peak * libm::exp(-d2 * inv);
            }
        }
    }

    // Pads on the top layer at distinct coarse node sites.
    let top = cfg.layers - 1;
    let pitch = 1usize << top;
    let ni = cfg.h.div_ceil(pitch);
    let nj = cfg.w.div_ceil(pitch);
    // A tiny grid with a coarse top layer may offer fewer distinct sites
    // than the requested pad count; clamp so the draw always terminates.
    let n_pads =
        (cfg.pad_count.0 + rng.below(cfg.pad_count.1 - cfg.pad_count.0 + 1)).min(ni * nj);
    let mut pads = BTreeSet::new();
    while pads.len() < n_pads {
        let i = rng.below(ni) * pitch;
        let j = rng.below(nj) * pitch;
        pads.insert((top, i, j));
    }

    Ok(PdnGrid {
        h: cfg.h,
        w: cfg.w,
        vdd: cfg.vdd,
        layers,
        via_conductance,
        pads,
        currents,
    })
}

/// Coarse (4x downsampled) grid for the hypothetical-IR feature channel:
/// block-summed currents, layer pitches shrunk by the same factor, pads
/// snapped to the coarse raster.
fn coarse_grid(grid: &PdnGrid) -> PdnGrid {
    let f = 4usize;
    let h = grid.h / f;
    let w = grid.w / f;
    let mut currents = vec![0.0; h * w];
    for i in 0..grid.h {
        for j in 0..grid.w {
            currents[(i / f) * w + j / f] += grid.currents[i * grid.w + j];
        }
    }
    let layers: Vec<LayerSpec> = grid
        .layers
        .iter()
        .map(|s| LayerSpec {
            pitch: (s.pitch / f).max(1),
            sheet_conductance: s.sheet_conductance,
        })
        .collect();
    let pads = grid
        .pads
        .iter()
        .map(|&(l, i, j)| {
            let p = layers[l].pitch;
            (l, (i / f).min(h - 1) / p * p, (j / f).min(w - 1) / p * p)
        })
        .collect();
    PdnGrid {
        h,
        w,
        vdd: grid.vdd,
        layers,
        via_conductance: grid.via_conductance,
        pads,
        currents,
    }
}

/// Nearest-neighbor-free bilinear upsample of a [1,h,w] map to [1,H,W].
fn upsample_map(src: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let mut tape = crate::tensor::Tape::new();
    let x = tape.leaf(
        Tensor::from_vec(&[1, 1, h, w], src.data().to_vec()).expect("map reshape"),
    );
    let y = tape.resize_bilinear(x, oh, ow).expect("upsample");
    Tensor::from_vec(&[1, oh, ow], tape.tensor(y).into_data()).expect("map reshape")
}

/// Generates one case: features (v1, 6 channels), golden target, metadata.
///
/// Channels: [0] load current map, [1] Chebyshev distance to the nearest
/// pad site, [2] via count per cell, [3] bottom-layer conductance,
/// [4] summed upper-layer conductance at their node sites, [5] hypothetical
/// IR drop from a 4x-coarse solve, upsampled back.
pub fn gen_case(seed: u64, cfg: &GenConfig) -> Result<CaseBundle, String> {
    let grid = gen_grid(seed, cfg)?;
    let (h, w) = (grid.h, grid.w);
    let mut features = Tensor::zeros(&[FEATURE_CHANNELS, h, w]);
    let plane = h * w;

    // [0] currents.
    features.data_mut()[..plane].copy_from_slice(&grid.currents);

    // [1] Chebyshev distance to the nearest pad column.
    for i in 0..h {
        for j in 0..w {
            let mut best = usize::MAX;
            for &(_, pi, pj) in &grid.pads {
                let d = (i.abs_diff(pi)).max(j.abs_diff(pj));
                best = best.min(d);
            }
            features.data_mut()[plane + i * w + j] = best as f64;
        }
    }

    // [2] via count per cell: a via exists under every node of layer l+1.
    for l in 1..grid.layers.len() {
        let p = grid.layers[l].pitch;
        for i in (0..h).step_by(p) {
            for j in (0..w).step_by(p) {
                features.data_mut()[2 * plane + i * w + j] += 1.0;
            }
        }
    }

    // [3] bottom-layer conductance; [4] upper-layer conductance at nodes.
    let g0 = grid.layers[0].sheet_conductance;
    for v in &mut features.data_mut()[3 * plane..4 * plane] {
        *v = g0;
    }
    for l in 1..grid.layers.len() {
        let p = grid.layers[l].pitch;
        let g = grid.layers[l].sheet_conductance;
        for i in (0..h).step_by(p) {
            for j in (0..w).step_by(p) {
                features.data_mut()[4 * plane + i * w + j] += g;
            }
        }
    }

    // [5] hypothetical IR from the coarse solve.
    let coarse = coarse_grid(&grid);
    let coarse_map = solve_ir_drop(&coarse)?;
    let hypo = upsample_map(&coarse_map, h, w);
    features.data_mut()[5 * plane..].copy_from_slice(hypo.data());

    let target = solve_ir_drop(&grid)?;

    Ok(CaseBundle {
        features,
        target,
        meta: CaseMeta {
            seed,
            vdd: grid.vdd,
            h,
            w,
            layers: grid.layers.len(),
            gen_version: GENERATOR_VERSION,
        },
    })
}
