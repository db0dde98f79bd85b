use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ensemble, Provenance};
use crate::error::{Error, Result};
use crate::nn::{ModelParams, NetworkSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mpkit-ensemble";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    spec: NetworkSpec,
    provenance: Provenance,
    members: Vec<String>,
}

impl Ensemble {
    /// Writes `manifest.json` and one `member_XXX.bin` per member into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.len());
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i:03}.bin");
            m.save(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
            members: files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Ensemble> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format {
                path,
                detail: format!(
                    "unsupported ensemble format {} v{}",
                    manifest.format, manifest.version
                ),
            });
        }
        let members = manifest
            .members
            .iter()
            .map(|name| ModelParams::load(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(manifest.spec, members, manifest.provenance)
    }
}
