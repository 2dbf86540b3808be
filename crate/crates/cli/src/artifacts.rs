//! On-disk layout of a run directory and the per-command run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use magtkd_core::datamodel::{
    load_conversation_manifest, read_feature_store_checked, Conversation, FeatureStore, Modality,
};
use magtkd_core::encoders::Branch;
use magtkd_core::magt::MagtModel;
use magtkd_core::params::read_checkpoint;
use magtkd_core::trainer::{build_branch, BranchName, RunConfig};
use magtkd_core::{Error, Real, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, command: &str) -> Result<PathBuf> {
        let d = self.root.join(command);
        std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        Ok(d)
    }

    pub fn synth_manifest(&self) -> PathBuf {
        self.root.join("synth").join("manifest.jsonl")
    }

    pub fn synth_features(&self, m: Modality) -> PathBuf {
        self.root.join("synth").join(format!("{m}.feat"))
    }

    pub fn stage1_features(&self, b: BranchName) -> PathBuf {
        self.root.join("stage1").join(format!("{b}.feat"))
    }

    pub fn stage1_checkpoint(&self, b: BranchName) -> PathBuf {
        self.root.join("stage1").join(format!("{b}.ckpt"))
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.root.join("stage2").join("magt.ckpt")
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Fails with a missing-artifact error unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// The corpus: a manifest plus precomputed features named in the config, or
/// the synthetic corpus written by `synth` under the run directory.
pub fn load_corpus(
    cfg: &RunConfig,
    layout: &Layout,
) -> Result<(Vec<Conversation>, [FeatureStore; 3], Vec<PathBuf>)> {
    let (manifest, feats) = match (&cfg.dataset.manifest, &cfg.dataset.features) {
        (Some(m), Some(f)) => (
            m.clone(),
            [f.text.clone(), f.audio.clone(), f.video.clone()],
        ),
        _ => (
            layout.synth_manifest(),
            Modality::ALL.map(|m| layout.synth_features(m)),
        ),
    };
    require(&manifest)?;
    for p in &feats {
        require(p)?;
    }
    let convs = load_conversation_manifest(&manifest, &cfg.dataset.label_space)?;
    let d = Some(cfg.stage1.dimension);
    let stores = [
        read_feature_store_checked(&feats[0], d)?,
        read_feature_store_checked(&feats[1], d)?,
        read_feature_store_checked(&feats[2], d)?,
    ];
    let mut inputs = vec![manifest];
    inputs.extend(feats);
    Ok((convs, stores, inputs))
}

/// Stage-1 feature stores; every branch must be present.
pub fn load_stage1_stores(
    cfg: &RunConfig,
    layout: &Layout,
) -> Result<BTreeMap<BranchName, FeatureStore>> {
    let mut out = BTreeMap::new();
    for b in BranchName::ALL {
        let p = layout.stage1_features(b);
        require(&p)?;
        out.insert(
            b,
            read_feature_store_checked(&p, Some(cfg.stage1.dimension))?,
        );
    }
    Ok(out)
}

pub fn load_stage1_branches(
    cfg: &RunConfig,
    layout: &Layout,
) -> Result<BTreeMap<BranchName, Branch<Real>>> {
    let mut out = BTreeMap::new();
    for b in BranchName::ALL {
        let p = layout.stage1_checkpoint(b);
        require(&p)?;
        let mut branch = build_branch::<Real>(cfg, b)?;
        let (saved, _) = read_checkpoint::<Real>(&p)?;
        let n = branch.params.load_matching(&saved)?;
        if n != branch.params.len() {
            return Err(Error::Validation(format!(
                "{}: {n} of {} tensors match the configured branch",
                p.display(),
                branch.params.len()
            )));
        }
        out.insert(b, branch);
    }
    Ok(out)
}

pub fn load_stage2(cfg: &RunConfig, layout: &Layout) -> Result<MagtModel<Real>> {
    let p = layout.stage2_checkpoint();
    require(&p)?;
    Ok(MagtModel::load(cfg.magt_config(), &p)?.0)
}

/// Everything needed to reconstruct one invocation.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn checksums(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}
