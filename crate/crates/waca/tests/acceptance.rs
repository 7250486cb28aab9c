//! Acceptance gate: nine criteria, each printing one pass/fail line. Run
//! with `cargo test --test acceptance -- --nocapture` to watch progress; the
//! test fails if any criterion fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use waca_core::attention::{
    se_channel_gate, waca_cbam, waca_se, ChannelAttnParams, FusionConfig, ParamBlock,
};
use waca_core::backbone::{unet_forward, AttentionKind, Model, UNetConfig};
use waca_core::metrics::{f1, hotspot_mask, mae, HotspotConfig};
use waca_core::pdn::{assemble_mna, gen_grid, ir_drop_map, solve_cg, GenConfig, PdnGrid};
use waca_core::rng::Rng;
use waca_core::{Tape, Tensor};

type Check = Result<String, String>;

fn rand4(rng: &mut Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(&shape, rng.normal_vec(n)).unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// Finite-difference check of d(mean(y^2))/d(input and every parameter)
/// through a tiny two-stage network with the given attention kind. Covers
/// the CNX block (kind none), SE/CBAM gates, both WACA composites, spatial
/// attention, and the decoder's attention gates in one sweep per kind.
fn unet_fd_check(kind: AttentionKind) -> Result<usize, String> {
    let cfg = UNetConfig {
        in_channels: 4,
        widths: vec![4, 8],
        blocks_per_stage: 1,
        attention_kind: kind,
        alpha: 0.5,
        r: 2,
    };
    let model = Model::init(cfg, 5)?;
    let mut rng = Rng::keyed(&[0xacce97, kind as u64]);
    let x = rand4(&mut rng, [2, 4, 8, 8]);

    let eval = |m: &Model, xt: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(xt.clone());
        let mv = m.bind(&mut tape);
        let y = unet_forward(&mut tape, xv, &mv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        tape.values(loss)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let mv = model.bind(&mut tape);
    let y = unet_forward(&mut tape, xv, &mv).map_err(|e| e.to_string())?;
    let sq = tape.mul(y, y).map_err(|e| e.to_string())?;
    let loss = tape.mean_all(sq);
    tape.backward(loss).map_err(|e| e.to_string())?;

    let h = 1e-5;
    let tol = 1e-4;
    // Probing every coordinate of every tensor would take hours; a fixed
    // deterministic sample per tensor still exercises every parameter tensor
    // (and the input) through every layer while staying inside the budget.
    let sample = |rng: &mut Rng, n: usize, cap: usize| -> Vec<usize> {
        if n <= cap {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(cap);
            idx
        }
    };
    let mut expected = 0usize;
    let mut checked = 0usize;
    let mut compare = |analytic: f64, fd: f64, what: String| -> Result<(), String> {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(0.1);
        if rel > tol {
            return Err(format!(
                "{}: {what}: analytic {analytic}, fd {fd}, rel {rel:.2e}",
                kind.as_str()
            ));
        }
        checked += 1;
        Ok(())
    };

    let gx = tape.grad(xv);
    let mut xp = x.clone();
    let input_idx = sample(&mut rng, x.numel(), 16);
    expected += input_idx.len();
    for j in input_idx {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + h;
        let fp = eval(&model, &xp);
        xp.data_mut()[j] = orig - h;
        let fm = eval(&model, &xp);
        xp.data_mut()[j] = orig;
        compare(gx.data()[j], (fp - fm) / (2.0 * h), format!("input[{j}]"))?;
    }

    let grads: std::collections::BTreeMap<String, Tensor> =
        mv.leaves.iter().map(|(n, v)| (n.clone(), tape.grad(*v))).collect();
    for (name, g) in &grads {
        let idx = sample(&mut rng, g.numel(), 8);
        expected += idx.len();
        for j in idx {
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
                eval(&m, &x)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            compare(g.data()[j], fd, format!("{name}[{j}]"))?;
        }
    }
    if checked != expected || grads.len() != mv.leaves.len() {
        return Err(format!("{}: fd sweep incomplete", kind.as_str()));
    }
    Ok(checked)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut total = 0usize;
    for kind in AttentionKind::ALL {
        total += unet_fd_check(kind)?;
    }
    // Composite loss, all three components active, perturbing the
    // prediction (the SSIM dynamic range is a constant of the target).
    let mut rng = Rng::new(31);
    let pred = rand4(&mut rng, [1, 1, 8, 8]);
    let target = rand4(&mut rng, [1, 1, 8, 8]);
    let lc = waca_core::loss::LossConfig::default();
    waca_core::gradcheck::central_diff_check(
        |tape, vars| {
            let t = tape.leaf(target.clone());
            waca_core::loss::composite_loss(tape, vars[0], t, &lc).unwrap()
        },
        &[pred],
        1e-5,
        1e-4,
    )?;
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("gradient suite took {secs:.1}s (budget 120s)"));
    }
    Ok(format!("({total} derivatives + composite loss in {secs:.1}s)"))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Check {
    let mut rng = Rng::new(2);
    for c in [8usize, 16, 64] {
        for r in [2usize, 4] {
            // Module level: the two-stage gate reuses the one MLP.
            let attn = ChannelAttnParams::init(c, r, &mut rng);
            let expected = 2 * c * (c / r) + c / r + c;
            if attn.param_count() != expected {
                return Err(format!(
                    "channel attention C={c} r={r}: {} params, expected {expected}",
                    attn.param_count()
                ));
            }
            // Model level: swapping se -> waca_se (and cbam -> waca_cbam)
            // must not change the total parameter count.
            for (base, waca) in
                [(AttentionKind::Se, AttentionKind::WacaSe), (AttentionKind::Cbam, AttentionKind::WacaCbam)]
            {
                let mk = |kind| {
                    let cfg = UNetConfig {
                        in_channels: 4,
                        widths: vec![c, 2 * c],
                        blocks_per_stage: 1,
                        attention_kind: kind,
                        alpha: 0.5,
                        r,
                    };
                    Model::init(cfg, 0).unwrap().param_count()
                };
                let (nb, nw) = (mk(base), mk(waca));
                if nb != nw {
                    return Err(format!(
                        "C={c} r={r}: {} has {nb} params but {} has {nw}",
                        base.as_str(),
                        waca.as_str()
                    ));
                }
            }
        }
    }
    Ok("(module formula + model counts, C in {8,16,64}, r in {2,4})".into())
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let mut rng = Rng::new(3);
    let full = FusionConfig::new(1.0);
    for trial in 0..100 {
        let c = [4usize, 8][trial % 2];
        let p = ChannelAttnParams::init(c, 2, &mut rng);
        let x = rand4(&mut rng, [1, c, 5, 5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pv = p.bind(&mut tape);

        let (y_wse, _) = waca_se(&mut tape, xv, &pv, full).map_err(|e| e.to_string())?;
        let a_se = se_channel_gate(&mut tape, xv, &pv).map_err(|e| e.to_string())?;
        let y_se = tape.mul_chan(xv, a_se).map_err(|e| e.to_string())?;

        let (y_wcb, _) = waca_cbam(&mut tape, xv, &pv, full).map_err(|e| e.to_string())?;
        let a_cb = waca_core::attention::cbam_channel_gate(&mut tape, xv, &pv)
            .map_err(|e| e.to_string())?;
        let y_cb = tape.mul_chan(xv, a_cb).map_err(|e| e.to_string())?;

        for (name, a, b) in [("se", y_wse, y_se), ("cbam", y_wcb, y_cb)] {
            for (u, v) in tape.values(a).iter().zip(tape.values(b)) {
                if (u - v).abs() > 1e-12 {
                    return Err(format!(
                        "trial {trial} {name}: alpha=1 output differs by {:.2e}",
                        (u - v).abs()
                    ));
                }
            }
        }
    }
    Ok("(waca_se == se and waca_cbam == cbam at alpha=1 on 100 inputs)".into())
}

// ---------------------------------------------------------------- criterion 4

/// Gaussian elimination with partial pivoting, the dense oracle.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

fn drops_tight(grid: &PdnGrid) -> Result<Tensor, String> {
    let sys = assemble_mna(grid)?;
    let v = solve_cg(&sys, grid.vdd, 1e-13, 200 * sys.dim())?;
    Ok(ir_drop_map(grid, &sys, &v))
}

fn small_gen(h: usize, layers: usize) -> GenConfig {
    GenConfig { h, w: h, layers, pad_count: (1, 3), ..GenConfig::default() }
}

fn criterion_4() -> Check {
    let start = Instant::now();
    // CG vs dense on every generated grid with <= 100 nodes, 1-3 layers.
    let mut compared = 0usize;
    for h in [4usize, 8] {
        for layers in 1..=3 {
            for seed in 0..5u64 {
                let grid = gen_grid(seed, &small_gen(h, layers))?;
                let sys = assemble_mna(&grid)?;
                if sys.dim() > 100 {
                    continue;
                }
                let v_cg = solve_cg(&sys, grid.vdd, 1e-13, 200 * sys.dim())?;
                let v_dense = dense_solve(sys.to_dense(), sys.j.clone());
                let scale = v_dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in v_cg.iter().zip(&v_dense) {
                    if (a - b).abs() / scale > 1e-8 {
                        return Err(format!(
                            "h={h} layers={layers} seed={seed}: CG vs dense rel err {:.2e}",
                            (a - b).abs() / scale
                        ));
                    }
                }
                compared += 1;
            }
        }
    }
    if compared < 20 {
        return Err(format!("only {compared} dense comparisons ran"));
    }

    // Physical invariants on 50 random grids.
    for seed in 0..50u64 {
        let grid = gen_grid(seed, &small_gen(8, 3))?;
        let base = drops_tight(&grid)?;
        let max_drop = base.data().iter().fold(0.0f64, |m, v| m.max(*v));
        let tol = 1e-9 * max_drop.max(1e-6);

        // Maximum principle: drops in [0, vdd] (millivolts).
        for &d in base.data() {
            if !(-tol..=grid.vdd * 1000.0 + tol).contains(&d) {
                return Err(format!("seed {seed}: drop {d} mV outside [0, vdd]"));
            }
        }
        // Linearity: doubling every load doubles every drop.
        let mut doubled = grid.clone();
        for c in &mut doubled.currents {
            *c *= 2.0;
        }
        let d2 = drops_tight(&doubled)?;
        for (a, b) in d2.data().iter().zip(base.data()) {
            if (a - 2.0 * b).abs() > 2.0 * tol {
                return Err(format!("seed {seed}: linearity violated by {:.2e}", (a - 2.0 * b).abs()));
            }
        }
        // Superposition: first-half loads + second-half loads == all loads.
        let n = grid.currents.len();
        let mut first = grid.clone();
        let mut second = grid.clone();
        for k in 0..n {
            if k < n / 2 {
                second.currents[k] = 0.0;
            } else {
                first.currents[k] = 0.0;
            }
        }
        let df = drops_tight(&first)?;
        let ds = drops_tight(&second)?;
        for ((a, b), c) in df.data().iter().zip(ds.data()).zip(base.data()) {
            if (a + b - c).abs() > 2.0 * tol {
                return Err(format!("seed {seed}: superposition violated by {:.2e}", (a + b - c).abs()));
            }
        }
        // Monotonicity: adding load current can only deepen drops.
        let mut heavier = grid.clone();
        let k_max = (0..n).max_by(|&i, &j| {
            heavier.currents[i].partial_cmp(&heavier.currents[j]).unwrap()
        });
        heavier.currents[k_max.unwrap()] *= 1.1;
        let dh = drops_tight(&heavier)?;
        for (a, b) in dh.data().iter().zip(base.data()) {
            if *a < b - tol {
                return Err(format!("seed {seed}: drop decreased after adding load"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("solver suite took {secs:.1}s (budget 60s)"));
    }
    Ok(format!("({compared} dense comparisons, 50 invariant grids, {secs:.1}s)"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Check {
    let hc = HotspotConfig::default();
    // Unit examples, exactly.
    let m = Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.95, 0.89]).unwrap();
    if hotspot_mask(&m, hc) != vec![true, true, false] {
        return Err("hotspot example [1.0,0.95,0.89] failed".into());
    }
    let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::from_vec(&[1, 1, 2], vec![2.0, 4.0]).unwrap();
    if mae(&a, &b).unwrap() != 1.5 || mae(&a, &a).unwrap() != 0.0 {
        return Err("mae examples failed".into());
    }
    let p = [true, true, true, false];
    let t = [true, true, false, true];
    let (score, tp, fp, fneg) = f1(&p, &t).unwrap();
    if (tp, fp, fneg) != (2, 1, 1) || (score - 2.0 / 3.0).abs() > 1e-15 {
        return Err("f1 counting example failed".into());
    }
    if f1(&p, &p).unwrap().0 != 1.0 || f1(&[true, false], &[false, true]).unwrap().0 != 0.0 {
        return Err("f1 identity/disjoint examples failed".into());
    }

    // Properties on 1,000 random maps.
    let mut rng = Rng::new(5);
    for trial in 0..1000 {
        let mut map = Tensor::from_vec(&[1, 6, 6], rng.normal_vec(36)).unwrap();
        for v in map.data_mut() {
            *v = v.abs() + 1e-3;
        }
        let mask = hotspot_mask(&map, hc);
        let mut scaled = map.clone();
        let c = 0.5 + 10.0 * rng.uniform();
        for v in scaled.data_mut() {
            *v *= c;
        }
        if mask != hotspot_mask(&scaled, hc) {
            return Err(format!("trial {trial}: scale invariance failed"));
        }
        let argmax = map
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if !mask[argmax] {
            return Err(format!("trial {trial}: argmax not in hotspot mask"));
        }
    }
    Ok("(unit examples exact; 1000-map scale/argmax properties)".into())
}

// --------------------------------------------------------- criteria 6 through 9

struct Cli {
    bin: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(&self.bin)
            .args(args)
            .env_remove("WACA_SEED")
            .output()
            .map_err(|e| format!("spawning {}: {e}", self.bin.display()))?;
        if !out.status.success() {
            return Err(format!(
                "`waca {}` exited with {:?}: {}",
                args.join(" "),
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Parsed numeric CSV, comment lines skipped.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| format!("{}: empty", path.display()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d)
            .map_err(|e| format!("{}: {e}", d.display()))?
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.toml" {
                // Manifests carry timestamps and are exempt by design.
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    Ok(out)
}

struct DeskRun {
    root: tempfile::TempDir,
    val_dir: PathBuf,
    run_dir: PathBuf,
    log_rows: Vec<Vec<String>>,
    secs: f64,
}

/// Criterion 6 artifacts are shared with criterion 9, so the desk run is
/// performed once.
fn desk_run(cli: &Cli) -> Result<DeskRun, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_dir = root.path().join("train");
    let val_dir = root.path().join("val");
    let run_dir = root.path().join("run");
    let cfg_path = root.path().join("desk.toml");
    std::fs::write(
        &cfg_path,
        "[train]\nepochs = 60\nbatch_size = 4\nlr_max = 1e-3\nlr_min = 1e-5\n\
         weight_decay = 1e-3\nseed = 0\ntrain_resolution = 64\n",
    )
    .map_err(|e| e.to_string())?;

    cli.run(&["gen-data", "--out", train_dir.to_str().unwrap(), "--count", "64", "--seed", "0"])?;
    cli.run(&[
        "gen-data",
        "--out",
        val_dir.to_str().unwrap(),
        "--count",
        "16",
        "--seed",
        "1000",
    ])?;
    let start = Instant::now();
    cli.run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        train_dir.to_str().unwrap(),
        "--val",
        val_dir.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let (_, log_rows) = read_csv(&run_dir.join("train_log.csv"))?;
    Ok(DeskRun { root, val_dir, run_dir, log_rows, secs })
}

fn criterion_6(cli: &Cli, run: &DeskRun) -> Check {
    if run.log_rows.len() != 60 {
        return Err(format!("expected 60 log rows, found {}", run.log_rows.len()));
    }
    let loss_first: f64 = run.log_rows[0][1].parse().unwrap();
    let loss_last: f64 = run.log_rows[59][1].parse().unwrap();
    if !(loss_last <= 0.5 * loss_first) {
        return Err(format!("final loss {loss_last:.4} > 0.5 x initial {loss_first:.4}"));
    }
    // Held-out F1 via the evaluation protocol.
    let eval_dir = run.root.path().join("eval");
    cli.run(&[
        "eval",
        "--checkpoint",
        run.run_dir.join("model.wckp").to_str().unwrap(),
        "--data",
        run.val_dir.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ])?;
    let (_, rows) = read_csv(&eval_dir.join("report.csv"))?;
    let agg = rows.iter().find(|r| r[0] == "aggregate").ok_or("no aggregate row")?;
    let mean_f1: f64 = agg[2].parse().unwrap();
    if mean_f1 < 0.5 {
        return Err(format!("held-out mean F1 {mean_f1:.4} < 0.5"));
    }
    if run.secs >= 1800.0 {
        return Err(format!("training took {:.0}s (budget 1800s)", run.secs));
    }
    Ok(format!(
        "(loss {loss_first:.3} -> {loss_last:.3}, held-out F1 {mean_f1:.3}, {:.0}s)",
        run.secs
    ))
}

fn criterion_7(cli: &Cli) -> Check {
    // The full five-way grid at desk scale is reported in the README; here
    // the gate verifies the whole ablation axis is trainable end to end.
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = root.path().join("data");
    let cfg_path = root.path().join("small.toml");
    std::fs::write(
        &cfg_path,
        "[gen]\nh = 32\nw = 32\nlayers = 3\nvdd = 1.0\nblob_count = [3, 8]\n\
         blob_peak = [0.002, 0.01]\nblob_sigma = [2.0, 8.0]\npad_count = [2, 5]\n\
         base_conductance = [0.5, 2.0]\nvia_conductance = [5.0, 20.0]\n\
         [train]\nepochs = 2\nbatch_size = 4\nlr_max = 1e-3\nlr_min = 1e-5\n\
         weight_decay = 1e-3\nseed = 0\ntrain_resolution = 32\n",
    )
    .map_err(|e| e.to_string())?;
    cli.run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--count",
        "8",
        "--seed",
        "0",
    ])?;
    for kind in ["none", "se", "cbam", "waca_se", "waca_cbam"] {
        let out = root.path().join(format!("run_{kind}"));
        cli.run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--val",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--attention-kind",
            kind,
        ])?;
        if !out.join("model.wckp").exists() {
            return Err(format!("{kind}: no checkpoint written"));
        }
    }
    Ok("(all five attention kinds train; desk-scale grid reported in README)".into())
}

fn criterion_8(cli: &Cli) -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = root.path().join("small.toml");
    std::fs::write(
        &cfg_path,
        "[gen]\nh = 32\nw = 32\nlayers = 3\nvdd = 1.0\nblob_count = [3, 8]\n\
         blob_peak = [0.002, 0.01]\nblob_sigma = [2.0, 8.0]\npad_count = [2, 5]\n\
         base_conductance = [0.5, 2.0]\nvia_conductance = [5.0, 20.0]\n\
         [train]\nepochs = 2\nbatch_size = 4\nlr_max = 1e-3\nlr_min = 1e-5\n\
         weight_decay = 1e-3\nseed = 0\ntrain_resolution = 32\n",
    )
    .map_err(|e| e.to_string())?;

    // gen-data: same seed, different worker counts, byte-identical output.
    let mut gens = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "4")] {
        let out = root.path().join(format!("gen_{tag}"));
        cli.run(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--count",
            "8",
            "--seed",
            "7",
            "--workers",
            workers,
        ])?;
        gens.push(dir_bytes(&out)?);
    }
    if gens[0] != gens[1] {
        return Err("gen-data output depends on rerun or worker count".into());
    }

    // train: rerun with the identical seed, byte-identical checkpoint + log.
    let data = root.path().join("gen_a");
    let mut runs = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "4")] {
        let out = root.path().join(format!("train_{tag}"));
        cli.run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--val",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--workers",
            workers,
        ])?;
        runs.push(dir_bytes(&out)?);
    }
    if runs[0] != runs[1] {
        return Err("train output depends on rerun or worker count".into());
    }
    Ok("(gen-data and train byte-identical across reruns and worker counts)".into())
}

fn criterion_9(cli: &Cli, run: &DeskRun) -> Check {
    let out = run.root.path().join("attn");
    let case = run.val_dir.join("case_1000");
    cli.run(&[
        "inspect-attn",
        "--checkpoint",
        run.run_dir.join("model.wckp").to_str().unwrap(),
        "--case",
        case.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let (header, rows) = read_csv(&out.join("attn.csv"))?;
    if header != ["block", "channel", "stage1", "stage2", "fused"] {
        return Err(format!("unexpected attn.csv header {header:?}"));
    }
    if rows.is_empty() {
        return Err("attn.csv has no score rows".into());
    }
    let mut block0 = 0usize;
    for row in &rows {
        let s1: f64 = row[2].parse().unwrap();
        let s2: f64 = row[3].parse().unwrap();
        let fused: f64 = row[4].parse().unwrap();
        for s in [s1, s2, fused] {
            if !(s > 0.0 && s < 1.0) {
                return Err(format!("score {s} outside (0,1) in row {row:?}"));
            }
        }
        if (fused - 0.5 * (s1 + s2)).abs() > 1e-12 {
            return Err(format!(
                "fused {fused} != 0.5*(a1+a2) = {} in row {row:?}",
                0.5 * (s1 + s2)
            ));
        }
        if row[0] == "0" {
            block0 += 1;
        }
    }
    if block0 != 16 {
        return Err(format!("block 0 exports {block0} channels, expected widths[0] = 16"));
    }
    Ok(format!("({} scores across blocks, fused = mean of stages)", rows.len()))
}

// --------------------------------------------------------------------- driver

#[test]
fn acceptance() {
    let cli = Cli { bin: PathBuf::from(env!("CARGO_BIN_EXE_waca")) };
    let mut summary = String::new();
    let mut failures = 0usize;
    let mut record = |n: usize, name: &str, result: Check| {
        let line = match result {
            Ok(note) => format!("criterion {n} ({name}): PASS {note}"),
            Err(e) => {
                failures += 1;
                format!("criterion {n} ({name}): FAIL - {e}")
            }
        };
        println!("{line}");
        writeln!(summary, "{line}").unwrap();
    };

    record(1, "gradient suite", criterion_1());
    record(2, "zero extra parameters", criterion_2());
    record(3, "alpha=1 degeneracy", criterion_3());
    record(4, "golden solver oracle", criterion_4());
    record(5, "metric protocol", criterion_5());

    let desk = desk_run(&cli);
    match &desk {
        Ok(run) => {
            record(6, "desk-scale learning", criterion_6(&cli, run));
            record(7, "ablation axis", criterion_7(&cli));
            record(8, "determinism", criterion_8(&cli));
            record(9, "attention introspection", criterion_9(&cli, run));
        }
        Err(e) => {
            record(6, "desk-scale learning", Err(e.clone()));
            record(7, "ablation axis", criterion_7(&cli));
            record(8, "determinism", criterion_8(&cli));
            record(9, "attention introspection", Err("desk run unavailable".into()));
        }
    }

    assert_eq!(failures, 0, "acceptance failures:\n{summary}");
}
