//! Flat `section.key = value` run configuration.
//!
//! Files are plain text: one assignment per line, `#` starts a comment,
//! keys are dotted paths. Command-line `--override key=value` pairs win
//! over file values, and the fully resolved config can be echoed with
//! `--print-config`. The config hash in run summaries is FNV-1a 64 over
//! the canonical sorted `key = value` listing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Every key the harness understands, with a short description. Unknown
/// keys are rejected so typos fail fast instead of silently using defaults.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("task.kind", "blobs | images | idx | csv"),
    ("task.idx_images", "path to IDX image file (kind=idx)"),
    ("task.idx_labels", "path to IDX label file (kind=idx)"),
    ("task.idx_test_images", "optional IDX test images"),
    ("task.idx_test_labels", "optional IDX test labels"),
    ("task.csv_path", "path to CSV file (kind=csv)"),
    ("task.classes", "class count for synthetic tasks"),
    ("task.per_class", "train examples per class (synthetic)"),
    ("task.test_per_class", "test examples per class (synthetic)"),
    ("task.dim", "feature dimension (blobs)"),
    ("task.separation", "cluster separation (blobs)"),
    ("task.noise", "pixel noise sigma (images)"),
    ("task.class_scale", "class signal strength (images)"),
    ("task.data_seed", "generator seed for synthetic data"),
    ("task.normalize", "normalize with train statistics"),
    ("model.arch", "mlp | convnet"),
    ("model.hidden", "comma list of MLP hidden widths"),
    ("model.channels", "two conv channel counts"),
    ("model.fc", "convnet fully connected width"),
    ("optim.lr", "learning rate"),
    ("optim.lr_schedule", "constant | cosine"),
    ("optim.momentum", "momentum coefficient"),
    ("optim.weight_decay", "weight decay"),
    ("optim.rho", "perturbation radius"),
    ("optim.k1", "ascent subset size"),
    ("optim.k2", "descent subset size"),
    ("optim.k2_halve_at", "epoch fraction at which ksam-star halves K2"),
    ("optim.selection", "topk | random"),
    ("optim.zero_grad_tol", "degenerate ascent tolerance"),
    ("cost.beta", "backward/forward cost ratio"),
    ("cost.sigma", "selection overhead per sample"),
    ("run.method", "sgd | topk-sgd | sam | ksam | ksam-star | rand-sam"),
    ("run.epochs", "training epochs"),
    ("run.batch", "batch size B"),
    ("run.seed", "run seed"),
    ("run.out", "output directory"),
    ("run.id", "explicit run id (default: derived, unique per run)"),
    ("run.probe_every", "steps between probes; 0 disables"),
    ("run.eval_every", "epochs between test evaluations"),
    ("run.dry_run", "skip computation, log schedule and cost only"),
    ("run.workers", "logical workers for distsim"),
    ("run.shuffle", "shuffle batches each epoch"),
    ("run.drop_last", "drop the final short batch"),
    ("probe.ks", "comma list of subset sizes to probe"),
    ("probe.repeats", "random-mode draws per probe"),
    ("probe.rho", "probe perturbation radius (defaults to optim.rho)"),
    ("ablate.k1_grid", "comma list of K1 values"),
    ("ablate.k2_grid", "comma list of K2 values"),
    ("ablate.selections", "comma list of selection modes"),
    ("ablate.seeds", "seeds per grid cell"),
    ("ablate.epochs", "epochs per grid cell"),
];

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = FlatConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", line_no + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override must be key=value, got {item:?}"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
        }
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: bad integer {s:?}")))
                })
                .collect(),
        }
    }

    pub fn str_list_or(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.get(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    /// Canonical sorted listing, used for display and hashing.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a 64 over the canonical listing, as fixed-width hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.render().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
