//! Versioned binary container for campaign snapshots.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CampaignConfig;
use crate::error::{Result, SoedError};
use crate::soed::CampaignState;

const MAGIC: &[u8; 8] = b"TSOEDSNP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: CampaignConfig,
    pub state: CampaignState,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    config_json: String,
    state: CampaignState,
}

impl Snapshot {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = Payload {
            config_json: serde_json::to_string(&self.config)?,
            state: self.state.clone(),
        };
        let body = bincode::serialize(&payload).map_err(|e| SoedError::Snapshot(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(SoedError::Snapshot("not a campaign snapshot".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(SoedError::Snapshot(format!(
                "unsupported snapshot version {version} (expected {VERSION})"
            )));
        }
        let payload: Payload = bincode::deserialize(&bytes[12..]).map_err(|e| SoedError::Snapshot(e.to_string()))?;
        Ok(Self {
            config: CampaignConfig::from_json(&payload.config_json)?,
            state: payload.state,
        })
    }

    /// Writes atomically via a temporary file and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
