//! On-disk layout for one synthetic case: a `case_<seed>/` directory with
//! `features.wtns`, `target.wtns`, and a `meta.txt` key-value file. The meta
//! file is written field-by-field in a fixed order so identical cases are
//! byte-identical on disk.

use std::path::{Path, PathBuf};

use waca_core::pdn::{CaseBundle, CaseMeta, FEATURE_CHANNELS};

use crate::error::WacaError;
use crate::wtns;

pub const FEATURES_FILE: &str = "features.wtns";
pub const TARGET_FILE: &str = "target.wtns";
pub const META_FILE: &str = "meta.txt";

pub fn case_dir_name(seed: u64) -> String {
    format!("case_{seed}")
}

fn render_meta(meta: &CaseMeta) -> String {
    format!(
        "seed = {}\nvdd_v = {}\nh = {}\nw = {}\nlayers = {}\ngen_version = {}\n",
        meta.seed, meta.vdd, meta.h, meta.w, meta.layers, meta.gen_version
    )
}

fn parse_meta(text: &str, path: &Path) -> Result<CaseMeta, WacaError> {
    let mut meta = CaseMeta { seed: 0, vdd: 0.0, h: 0, w: 0, layers: 0, gen_version: 0 };
    let mut seen = 0u32;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            WacaError::Format(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: std::num::ParseIntError| {
            WacaError::Format(format!("{}: bad {key}: {e}", path.display()))
        };
        match key {
            "seed" => meta.seed = value.parse().map_err(bad)?,
            "vdd_v" => {
                meta.vdd = value.parse().map_err(|e| {
                    WacaError::Format(format!("{}: bad vdd_v: {e}", path.display()))
                })?
            }
            "h" => meta.h = value.parse().map_err(bad)?,
            "w" => meta.w = value.parse().map_err(bad)?,
            "layers" => meta.layers = value.parse().map_err(bad)?,
            "gen_version" => meta.gen_version = value.parse().map_err(bad)?,
            other => {
                return Err(WacaError::Format(format!(
                    "{}: unknown meta key `{other}`",
                    path.display()
                )))
            }
        }
        seen += 1;
    }
    if seen != 6 {
        return Err(WacaError::Format(format!(
            "{}: expected 6 meta keys, found {seen}",
            path.display()
        )));
    }
    Ok(meta)
}

/// Writes `out_root/case_<seed>/{features.wtns,target.wtns,meta.txt}`.
pub fn write_case(out_root: &Path, case: &CaseBundle) -> Result<PathBuf, WacaError> {
    let dir = out_root.join(case_dir_name(case.meta.seed));
    std::fs::create_dir_all(&dir)
        .map_err(|e| WacaError::Io(format!("{}: {e}", dir.display())))?;
    wtns::save(&dir.join(FEATURES_FILE), &case.features)?;
    wtns::save(&dir.join(TARGET_FILE), &case.target)?;
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, render_meta(&case.meta))
        .map_err(|e| WacaError::Io(format!("{}: {e}", meta_path.display())))?;
    Ok(dir)
}

/// Reads one case directory back, cross-checking tensor shapes against the
/// recorded metadata.
pub fn read_case(dir: &Path) -> Result<CaseBundle, WacaError> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| WacaError::Io(format!("{}: {e}", meta_path.display())))?;
    let meta = parse_meta(&text, &meta_path)?;
    let features = wtns::load(&dir.join(FEATURES_FILE))?;
    let target = wtns::load(&dir.join(TARGET_FILE))?;
    if features.shape() != [FEATURE_CHANNELS, meta.h, meta.w] {
        return Err(WacaError::Data(format!(
            "{}: features shape {:?} does not match meta {}x{}",
            dir.display(),
            features.shape(),
            meta.h,
            meta.w
        )));
    }
    if target.shape() != [1, meta.h, meta.w] {
        return Err(WacaError::Data(format!(
            "{}: target shape {:?} does not match meta {}x{}",
            dir.display(),
            target.shape(),
            meta.h,
            meta.w
        )));
    }
    Ok(CaseBundle { features, target, meta })
}

/// Lists `case_*` subdirectories of a dataset root, ordered by seed.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>, WacaError> {
    let entries = std::fs::read_dir(root)
        .map_err(|e| WacaError::Io(format!("{}: {e}", root.display())))?;
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| WacaError::Io(format!("{}: {e}", root.display())))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(seed) = name.strip_prefix("case_").and_then(|s| s.parse::<u64>().ok()) {
            found.push((seed, path));
        }
    }
    if found.is_empty() {
        return Err(WacaError::Data(format!(
            "{}: no case_<seed> directories found",
            root.display()
        )));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Loads every case under a dataset root.
pub fn load_dataset(root: &Path) -> Result<Vec<CaseBundle>, WacaError> {
    list_cases(root)?.iter().map(|p| read_case(p)).collect()
}
