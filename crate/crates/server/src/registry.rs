//! Checkpoints hosted side by side, in registration order.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use toxscope::checkpoint::load_checkpoint;
use toxscope::{Classifier, Vocabulary};

/// A loaded, validated checkpoint. Shared read-only between requests.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Classifier,
    pub vocab: Vocabulary,
}

#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub model_id: String,
    pub display_name: String,
    pub path: PathBuf,
    pub loaded: Option<Arc<LoadedModel>>,
    /// Why loading failed, when it did.
    pub load_error: Option<String>,
}

impl ModelEntry {
    pub fn ready(&self) -> bool {
        self.loaded.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub display_name: String,
    pub ready: bool,
}

/// Where to find a checkpoint and what to call it. Parsed from `path` or
/// `id=path`; without an explicit id the file stem is used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSource {
    pub model_id: Option<String>,
    pub path: PathBuf,
}

impl std::str::FromStr for ModelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (id, path) = match s.split_once('=') {
            Some((id, path)) => (Some(id.trim().to_string()), path.trim()),
            None => (None, s),
        };
        if path.is_empty() || id.as_deref() == Some("") {
            return Err(format!(
                "bad checkpoint spec {s:?}, expected PATH or ID=PATH"
            ));
        }
        Ok(Self {
            model_id: id,
            path: PathBuf::from(path),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    entries: Vec<ModelEntry>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every source. A checkpoint that fails to load is still
    /// registered, with `ready == false`.
    pub fn load(sources: &[ModelSource]) -> Self {
        let mut registry = Self::new();
        for source in sources {
            let id = source
                .model_id
                .clone()
                .unwrap_or_else(|| stem(&source.path));
            match load_checkpoint(&source.path) {
                Ok((model, vocab)) => {
                    registry.insert(id, source.path.clone(), Ok(LoadedModel { model, vocab }))
                }
                Err(e) => {
                    tracing::warn!(model_id = %id, error = %e, "checkpoint failed to load");
                    registry.insert(id, source.path.clone(), Err(e.to_string()))
                }
            };
        }
        registry
    }

    /// Registers a model and returns the id it was stored under. A clashing
    /// id gets a `-2`, `-3`, ... suffix.
    pub fn insert(
        &mut self,
        model_id: String,
        path: PathBuf,
        loaded: Result<LoadedModel, String>,
    ) -> String {
        let mut id = model_id.clone();
        let mut n = 2;
        while self.get(&id).is_some() {
            id = format!("{model_id}-{n}");
            n += 1;
        }
        let (loaded, load_error) = match loaded {
            Ok(m) => (Some(Arc::new(m)), None),
            Err(e) => (None, Some(e)),
        };
        self.entries.push(ModelEntry {
            display_name: model_id,
            model_id: id.clone(),
            path,
            loaded,
            load_error,
        });
        id
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.model_id == model_id)
    }

    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn list_models(&self) -> Vec<ModelSummary> {
        self.entries
            .iter()
            .map(|e| ModelSummary {
                model_id: e.model_id.clone(),
                display_name: e.display_name.clone(),
                ready: e.ready(),
            })
            .collect()
    }

    pub fn ready_count(&self) -> usize {
        self.entries.iter().filter(|e| e.ready()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_specs_parse() {
        let s: ModelSource = "a/b/enc.ckpt".parse().unwrap();
        assert_eq!(s.model_id, None);
        assert_eq!(s.path, PathBuf::from("a/b/enc.ckpt"));
        let s: ModelSource = "small=enc.ckpt".parse().unwrap();
        assert_eq!(s.model_id.as_deref(), Some("small"));
        assert!("=x".parse::<ModelSource>().is_err());
        assert!("x=".parse::<ModelSource>().is_err());
    }

    #[test]
    fn empty_registry_lists_nothing() {
        assert!(Registry::new().list_models().is_empty());
    }

    #[test]
    fn missing_checkpoint_is_listed_not_ready() {
        let dir = std::env::temp_dir().join("toxscope-registry-missing");
        let r = Registry::load(&[ModelSource {
            model_id: None,
            path: dir.join("absent.ckpt"),
        }]);
        let models = r.list_models();
        assert_eq!(models.len(), 1);
        assert_eq!(models[0].model_id, "absent");
        assert!(!models[0].ready);
        assert!(r.get("absent").unwrap().load_error.is_some());
    }

    #[test]
    fn clashing_ids_get_suffixes() {
        let mut r = Registry::new();
        let a = r.insert("m".into(), "x".into(), Err("boom".into()));
        let b = r.insert("m".into(), "y".into(), Err("boom".into()));
        assert_eq!((a.as_str(), b.as_str()), ("m", "m-2"));
        let ids: Vec<String> = r.list_models().into_iter().map(|m| m.model_id).collect();
        assert_eq!(ids, ["m", "m-2"]);
    }
}
