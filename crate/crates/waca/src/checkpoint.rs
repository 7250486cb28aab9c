//! Model checkpoints: a small binary container holding a TOML header
//! (epoch, validation F1, architecture config, normalization stats) followed
//! by one WTNS record per named parameter tensor. Saving is deterministic,
//! so save -> load -> save round-trips byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use waca_core::backbone::{Model, UNetConfig};
use waca_core::augment::NormStats;
use waca_core::ParamSet;

use crate::error::WacaError;
use crate::wtns;

pub const MAGIC: [u8; 4] = *b"WCKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub epoch: usize,
    pub val_f1: f64,
    pub norm_stats: NormStats,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    val_f1: f64,
    config: UNetConfig,
    norm_stats: NormStats,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            epoch: self.epoch,
            val_f1: self.val_f1,
            config: self.model.config.clone(),
            norm_stats: self.norm_stats.clone(),
        };
        let header_text = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
        out.extend_from_slice(header_text.as_bytes());
        let params = self.model.flatten();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, tensor) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            wtns::write_tensor(&mut out, tensor).expect("in-memory write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, WacaError> {
        fn take<'a>(cur: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], WacaError> {
            if cur.len() < n {
                return Err(WacaError::Format(format!("checkpoint truncated in {what}")));
            }
            let (head, rest) = cur.split_at(n);
            *cur = rest;
            Ok(head)
        }
        let mut cur = bytes;
        if take(&mut cur, 4, "magic")? != MAGIC {
            return Err(WacaError::Format("bad checkpoint magic".into()));
        }
        if take(&mut cur, 1, "version")?[0] != VERSION {
            return Err(WacaError::Format("unsupported checkpoint version".into()));
        }
        let header_len =
            u32::from_le_bytes(take(&mut cur, 4, "header length")?.try_into().unwrap()) as usize;
        let header_text = std::str::from_utf8(take(&mut cur, header_len, "header")?)
            .map_err(|e| WacaError::Format(format!("checkpoint header not UTF-8: {e}")))?;
        let header: Header = toml::from_str(header_text)
            .map_err(|e| WacaError::Format(format!("checkpoint header: {e}")))?;

        let count =
            u32::from_le_bytes(take(&mut cur, 4, "tensor count")?.try_into().unwrap()) as usize;
        let mut params = ParamSet::new();
        for k in 0..count {
            let name_len =
                u32::from_le_bytes(take(&mut cur, 4, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut cur, name_len, "name")?)
                .map_err(|e| WacaError::Format(format!("tensor name {k} not UTF-8: {e}")))?
                .to_string();
            let tensor = wtns::read_tensor(&mut cur)?;
            params.insert(name, tensor);
        }
        if !cur.is_empty() {
            return Err(WacaError::Format(format!(
                "checkpoint has {} trailing bytes",
                cur.len()
            )));
        }

        let mut model = Model::init(header.config, 0).map_err(WacaError::Format)?;
        model.assign(&params).map_err(WacaError::Format)?;
        Ok(ModelCheckpoint {
            model,
            epoch: header.epoch,
            val_f1: header.val_f1,
            norm_stats: header.norm_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), WacaError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint, WacaError> {
        let bytes = std::fs::read(path)
            .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
