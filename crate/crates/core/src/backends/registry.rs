// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backend registry: maps backend ids to [`BackendConfig`]s.
//!
//! Schema (TOML):
//!
//! ```toml
//! [defaults]            # optional
//! backend = "toy-mmdit"
//! out_dir = "out"
//! log_level = "info"
//! seed = 0
//!
//! [backends.my-toy]
//! kind = "toy_mmdit"    # toy_xattn | toy_mmdit | external
//! prompt_len = 16
//! width = 8
//! image_tokens = 16
//! layers = 2
//! steps = 4
//! weight_seed = 0
//! special_tokens = true # optional
//! lora_alpha = 0.5      # optional, external adapters only
//!
//! [backends.my-toy.external]  # external kind only
//! adapter = "lora-toy"
//! ```
//!
//! Built-in ids `toy-xattn`, `toy-mmdit` and `lora-toy` are always present;
//! file entries override them. Every `*.toml` file in the directory named by
//! `PADPROBE_BACKEND_DIR` is merged in after the main file.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::lora::{LoraToyAdapter, ADAPTER_NAME};
use crate::backends::toy::ToyBackend;
use crate::backends::{BackendConfig, BackendHandle, BackendKind};
use crate::error::{Error, Result};

pub const BACKEND_DIR_ENV: &str = "PADPROBE_BACKEND_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryDefaults {
    pub backend: Option<String>,
    pub out_dir: Option<String>,
    pub log_level: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default)]
    defaults: RegistryDefaults,
    #[serde(default)]
    backends: BTreeMap<String, BackendConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub defaults: RegistryDefaults,
    backends: BTreeMap<String, BackendConfig>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn builtin() -> Self {
        let mut backends = BTreeMap::new();
        backends.insert(
            "toy-xattn".to_string(),
            BackendConfig::toy(BackendKind::ToyXattn),
        );
        backends.insert(
            "toy-mmdit".to_string(),
            BackendConfig::toy(BackendKind::ToyMmdit),
        );
        backends.insert(
            ADAPTER_NAME.to_string(),
            LoraToyAdapter::config_for(BackendKind::ToyMmdit, 1.0),
        );
        Self {
            defaults: RegistryDefaults::default(),
            backends,
        }
    }

    pub fn parse(&mut self, text: &str) -> Result<()> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("registry: {e}")))?;
        for (id, cfg) in file.backends {
            cfg.validate()
                .map_err(|e| Error::InvalidConfig(format!("backend `{id}`: {e}")))?;
            self.backends.insert(id, cfg);
        }
        let d = file.defaults;
        self.defaults = RegistryDefaults {
            backend: d.backend.or(self.defaults.backend.take()),
            out_dir: d.out_dir.or(self.defaults.out_dir.take()),
            log_level: d.log_level.or(self.defaults.log_level.take()),
            seed: d.seed.or(self.defaults.seed),
        };
        Ok(())
    }

    /// Built-ins, then `path` (if given), then the adapter directory.
    pub fn load(path: Option<&Path>, backend_dir: Option<&Path>) -> Result<Self> {
        let mut reg = Self::builtin();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            reg.parse(&text)?;
        }
        if let Some(dir) = backend_dir {
            let mut files: Vec<_> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            files.sort();
            for f in files {
                let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
                reg.parse(&text)?;
            }
        }
        Ok(reg)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Result<&BackendConfig> {
        self.backends
            .get(id)
            .ok_or_else(|| Error::Backend(format!("unknown backend id `{id}`")))
    }

    pub fn insert(&mut self, id: impl Into<String>, config: BackendConfig) -> Result<()> {
        config.validate()?;
        self.backends.insert(id.into(), config);
        Ok(())
    }

    pub fn open(&self, id: &str) -> Result<BackendHandle> {
        open_config(id, self.get(id)?.clone())
    }
}

/// Instantiates a backend for `config`.
pub fn open_config(id: &str, config: BackendConfig) -> Result<BackendHandle> {
    match config.kind {
        BackendKind::ToyXattn | BackendKind::ToyMmdit => {
            Ok(BackendHandle::new(id, Arc::new(ToyBackend::new(config)?)))
        }
        BackendKind::External => {
            let adapter = config
                .external
                .as_ref()
                .and_then(|e| e.get("adapter"))
                .cloned()
                .unwrap_or_default();
            match adapter.as_str() {
                ADAPTER_NAME => Ok(BackendHandle::new(
                    id,
                    Arc::new(LoraToyAdapter::new(config)?),
                )),
                other => Err(Error::Backend(format!(
                    "no adapter `{other}` is available for backend `{id}`"
                ))),
            }
        }
    }
}
