//! On-disk layout of a run: manifest with content hashes, datasets as JSON
//! lines pointing at `.pltf` images, and tensor sets for model parts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{hex, Dataset, Family, Sample};
use crate::io::{read_tensor, write_tensor, TensorFileError};
use crate::model::{DecoderHead, HeadScales, ModelBundle, Projector, VisionEncoder};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing artifact(s) for stage `{stage}`: {}", missing.join(", "))]
    Missing { stage: String, missing: Vec<String> },
    #[error("hash mismatch for {path}: manifest {expected}, found {found}")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| StoreError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    /// Hash of content referenced by the file (e.g. the images of a dataset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub stages: BTreeMap<String, BTreeMap<String, Artifact>>,
}

/// A run directory `<out>/<config-hash>/` and its manifest.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn open(root: PathBuf, config_hash: &str, schema_version: u32) -> Result<RunDir> {
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mpath = root.join("manifest.json");
        let manifest = if mpath.exists() {
            read_json(&mpath)?
        } else {
            let mut versions = BTreeMap::new();
            versions.insert("backdoor-lab".to_string(), env!("CARGO_PKG_VERSION").to_string());
            RunManifest {
                schema_version,
                config_hash: config_hash.to_string(),
                versions,
                stages: BTreeMap::new(),
            }
        };
        Ok(RunDir { root, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.manifest.stages.contains_key(stage)
    }

    pub fn save_manifest(&self) -> Result<()> {
        write_file(&self.path("manifest.json"), to_json_pretty(&self.manifest).as_bytes())
    }

    pub fn record(&mut self, stage: &str, artifacts: BTreeMap<String, Artifact>) -> Result<()> {
        self.manifest.stages.insert(stage.to_string(), artifacts);
        self.save_manifest()
    }

    /// Writes `contents` and returns its manifest entry.
    pub fn put(&self, rel: &str, contents: &[u8]) -> Result<Artifact> {
        write_file(&self.path(rel), contents)?;
        Ok(Artifact {
            path: rel.to_string(),
            sha256: hex(&Sha256::digest(contents)),
            content_sha256: None,
        })
    }

    /// Checks every artifact of `stage` against its recorded hash.
    pub fn verify_stage(&self, stage: &str) -> Result<()> {
        let Some(arts) = self.manifest.stages.get(stage) else {
            return Err(StoreError::Missing {
                stage: stage.to_string(),
                missing: vec!["<stage not run>".into()],
            });
        };
        let missing: Vec<String> = arts
            .values()
            .filter(|a| !self.path(&a.path).exists())
            .map(|a| a.path.clone())
            .collect();
        if !missing.is_empty() {
            return Err(StoreError::Missing {
                stage: stage.to_string(),
                missing,
            });
        }
        for a in arts.values() {
            let found = sha256_file(&self.path(&a.path))?;
            if found != a.sha256 {
                return Err(StoreError::HashMismatch {
                    path: a.path.clone(),
                    expected: a.sha256.clone(),
                    found,
                });
            }
            if let Some(expected) = &a.content_sha256 {
                let found = read_dataset(&self.path(&a.path))?.hash();
                if &found != expected {
                    return Err(StoreError::HashMismatch {
                        path: format!("{} (referenced images)", a.path),
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn artifact(&self, stage: &str, role: &str) -> Result<&Artifact> {
        self.manifest
            .stages
            .get(stage)
            .and_then(|m| m.get(role))
            .ok_or_else(|| StoreError::Missing {
                stage: stage.to_string(),
                missing: vec![role.to_string()],
            })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    image: String,
    target: Vec<usize>,
    poisoned: bool,
    family: Family,
}

/// Writes images under `<dir>/<name>/` and the JSON-lines index `<dir>/<name>.jsonl`.
/// Returns the index contents.
pub fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<String> {
    let img_dir = dir.join(name);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut index = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("{name}/{i:05}.pltf");
        write_tensor(&dir.join(&rel), &s.image)?;
        let line = SampleLine {
            image: rel,
            target: s.target.clone(),
            poisoned: s.poisoned,
            family: s.family,
        };
        index.push_str(&serde_json::to_string(&line).expect("serialisable"));
        index.push('\n');
    }
    write_file(&dir.join(format!("{name}.jsonl")), index.as_bytes())?;
    Ok(index)
}

pub fn read_dataset(index: &Path) -> Result<Dataset> {
    let dir = index.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(index).map_err(io_err(index))?;
    let mut samples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let l: SampleLine = serde_json::from_str(line).map_err(|e| StoreError::Format {
            path: format!("{}:{}", index.display(), ln + 1),
            msg: e.to_string(),
        })?;
        samples.push(Sample {
            image: read_tensor(&dir.join(&l.image))?,
            target: l.target,
            poisoned: l.poisoned,
            family: l.family,
        });
    }
    Ok(Dataset { samples })
}

/// Writes named tensors as `<dir>/<name>.pltf`; returns name → relative path.
pub fn write_tensor_set(root: &Path, dir: &str, tensors: &[(&str, &Tensor)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, t) in tensors {
        let rel = format!("{dir}/{name}.pltf");
        let path = root.join(&rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        write_tensor(&path, t)?;
        out.insert(name.to_string(), rel);
    }
    Ok(out)
}

pub fn write_projector(root: &Path, dir: &str, p: &Projector) -> Result<BTreeMap<String, String>> {
    write_tensor_set(root, dir, &[("W1", &p.w1), ("b1", &p.b1), ("W2", &p.w2), ("b2", &p.b2)])
}

pub fn read_projector(root: &Path, dir: &str) -> Result<Projector> {
    let r = |n: &str| read_tensor(&root.join(format!("{dir}/{n}.pltf")));
    Ok(Projector {
        w1: r("W1")?,
        b1: r("b1")?,
        w2: r("W2")?,
        b2: r("b2")?,
    })
}

/// Role → file listing of a model bundle plus its construction seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub seed: u64,
    pub head_scales: HeadScales,
    pub tensors: BTreeMap<String, String>,
}

/// Writes the frozen parts and the initial projector of a bundle.
pub fn write_bundle(root: &Path, dir: &str, b: &ModelBundle, scales: HeadScales) -> Result<BundleManifest> {
    let pos_rows: Vec<Tensor> = (0..b.head.max_len())
        .map(|t| Tensor::vector(b.head.pos.row(t).to_vec()))
        .collect();
    let pos_names: Vec<String> = (0..pos_rows.len()).map(|t| format!("p_{t}")).collect();
    let mut named: Vec<(&str, &Tensor)> = vec![
        ("W_v", &b.encoder.w_v),
        ("U_tok", &b.head.u_tok),
        ("A", &b.head.a),
        ("B", &b.head.b),
        ("W_vocab", &b.head.w_vocab),
        ("W1", &b.projector.w1),
        ("b1", &b.projector.b1),
        ("W2", &b.projector.w2),
        ("b2", &b.projector.b2),
    ];
    for (n, t) in pos_names.iter().zip(&pos_rows) {
        named.push((n.as_str(), t));
    }
    let tensors = write_tensor_set(root, dir, &named)?;
    let m = BundleManifest {
        seed: b.seed,
        head_scales: scales,
        tensors,
    };
    write_file(&root.join(format!("{dir}/bundle.json")), to_json_pretty(&m).as_bytes())?;
    Ok(m)
}

pub fn read_bundle(root: &Path, dir: &str) -> Result<ModelBundle> {
    let mpath = root.join(format!("{dir}/bundle.json"));
    let m: BundleManifest = read_json(&mpath)?;
    let get = |n: &str| -> Result<Tensor> {
        let rel = m.tensors.get(n).ok_or_else(|| StoreError::Format {
            path: mpath.display().to_string(),
            msg: format!("no tensor `{n}`"),
        })?;
        Ok(read_tensor(&root.join(rel))?)
    };
    let mut pos_rows = Vec::new();
    while m.tensors.contains_key(&format!("p_{}", pos_rows.len())) {
        pos_rows.push(get(&format!("p_{}", pos_rows.len()))?);
    }
    let d = pos_rows.first().map(|t| t.len()).unwrap_or(0);
    let pos = Tensor::new(
        vec![pos_rows.len(), d],
        pos_rows.into_iter().flat_map(|t| t.into_data()).collect(),
    )
    .map_err(|e| StoreError::Format {
        path: mpath.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(ModelBundle {
        seed: m.seed,
        encoder: VisionEncoder { w_v: get("W_v")? },
        projector: Projector {
            w1: get("W1")?,
            b1: get("b1")?,
            w2: get("W2")?,
            b2: get("b2")?,
        },
        head: DecoderHead {
            u_tok: get("U_tok")?,
            a: get("A")?,
            b: get("B")?,
            pos,
            w_vocab: get("W_vocab")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, DatasetSpec};
    use crate::model::TriggerSpec;

    #[test]
    fn dataset_and_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_clean: 6,
            poison_rate: 0.5,
            family: Family::PerceptualHijack,
            seed: 1,
        };
        let ds = synthesize_dataset(&spec, &TriggerSpec::icon());
        write_dataset(dir.path(), "train", &ds).unwrap();
        let back = read_dataset(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(back, ds);

        let b = ModelBundle::init(4, HeadScales::default());
        write_bundle(dir.path(), "model", &b, HeadScales::default()).unwrap();
        assert_eq!(read_bundle(dir.path(), "model").unwrap(), b);
    }
}
