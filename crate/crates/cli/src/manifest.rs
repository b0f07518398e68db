use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::LoadedConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURES_DIR: &str = "failures";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// A zone or anchor whose stage failed; the rest of the stage still ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub context: String,
    pub error: String,
    pub exit_code: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub zone_estimates: usize,
    pub anchor_models: usize,
    pub volatility_reports: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: FileHash,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<FileHash>,
    pub summary: Summary,
    pub failures: Vec<Failure>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn count_json(dir: &Path) -> usize {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                .count()
        })
        .unwrap_or(0)
}

pub fn write_failures(out: &Path, stage: &str, failures: &[Failure]) -> Result<(), CliError> {
    let path = out.join(FAILURES_DIR).join(format!("{stage}.json"));
    if failures.is_empty() {
        if path.exists() {
            fs::remove_file(&path)?;
        }
        return Ok(());
    }
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(&path, serde_json::to_string_pretty(failures)? + "\n")?;
    Ok(())
}

fn read_failures(out: &Path) -> Result<Vec<Failure>, CliError> {
    let mut all = Vec::new();
    for stage in crate::STAGE_ORDER {
        let path = out.join(FAILURES_DIR).join(format!("{stage}.json"));
        if path.is_file() {
            let list: Vec<Failure> = serde_json::from_slice(&fs::read(&path)?)?;
            all.extend(list);
        }
    }
    Ok(all)
}

/// Describes the whole output directory, so a stage-by-stage run and a
/// pipeline run over the same inputs produce the same manifest.
pub fn build_manifest(cfg: &LoadedConfig, out: &Path) -> Result<Manifest, CliError> {
    let config_name = cfg
        .path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut inputs = Vec::new();
    for (role, rel) in cfg.inputs() {
        let path = cfg.resolve(&rel);
        if path.is_file() {
            inputs.push(InputHash {
                role: role.to_string(),
                path: rel,
                sha256: sha256_file(&path)?,
            });
        }
    }
    let mut outputs = Vec::new();
    if out.is_dir() {
        for entry in WalkDir::new(out).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = relative(entry.path(), out);
            if rel == MANIFEST_FILE {
                continue;
            }
            outputs.push(FileHash {
                sha256: sha256_file(entry.path())?,
                path: rel,
            });
        }
    }
    let summary = Summary {
        zone_estimates: count_json(&out.join(crate::stages::ESTIMATES_DIR)),
        anchor_models: count_json(&out.join(crate::stages::MODELS_DIR)),
        volatility_reports: usize::from(out.join(crate::stages::VOLATILITY_CSV).is_file()),
    };
    Ok(Manifest {
        tool: "flowcast".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: FileHash {
            path: config_name,
            sha256: sha256_file(&cfg.path)?,
        },
        inputs,
        outputs,
        summary,
        failures: read_failures(out)?,
    })
}

pub fn write_manifest(cfg: &LoadedConfig, out: &Path) -> Result<Manifest, CliError> {
    fs::create_dir_all(out)?;
    let manifest = build_manifest(cfg, out)?;
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
