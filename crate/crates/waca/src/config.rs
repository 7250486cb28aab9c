//! The single TOML run configuration consumed by every CLI command. Each
//! section maps onto one module's config struct; missing sections fall back
//! to the documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use waca_core::backbone::UNetConfig;
use waca_core::loss::LossConfig;
use waca_core::metrics::HotspotConfig;
use waca_core::pdn::GenConfig;

use crate::error::WacaError;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub hotspot: HotspotConfig,
    #[serde(default)]
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), WacaError> {
        self.unet.validate().map_err(WacaError::Config)?;
        self.train.validate().map_err(WacaError::Config)?;
        self.loss.validate().map_err(WacaError::Config)?;
        self.hotspot.validate().map_err(WacaError::Config)?;
        self.gen.validate().map_err(WacaError::Config)?;
        if self.unet.in_channels != waca_core::pdn::FEATURE_CHANNELS {
            return Err(WacaError::Config(format!(
                "unet.in_channels = {} but generated cases carry {} feature channels",
                self.unet.in_channels,
                waca_core::pdn::FEATURE_CHANNELS
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig, WacaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| WacaError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
