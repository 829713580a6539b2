//! Synthetic datasets on disk and the pair manifest consumed by evaluation.
//!
//! A pair manifest is a `key = value` file whose `pair` lines list, relative
//! to the manifest's directory,
//! `pair = <moving> <fixed> <moving_labels> <fixed_labels> [<field>]`.
//! Other keys are informational.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::io::volume_file::{save_field, save_labels, save_volume};
use crate::synth::{Manifest, SynthPair};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub moving: PathBuf,
    pub fixed: PathBuf,
    pub moving_labels: PathBuf,
    pub fixed_labels: PathBuf,
    /// Ground-truth field when known.
    pub field: Option<PathBuf>,
}

/// Writes every pair as NIfTI files plus `manifest.txt`; returns the
/// manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, pairs: &[SynthPair], manifest: &Manifest) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut text = manifest.to_text();
    for (i, p) in pairs.iter().enumerate() {
        let name = |kind: &str| format!("pair{i:03}_{kind}.nii.gz");
        save_volume(dir.join(name("moving")), &p.moving)?;
        save_volume(dir.join(name("fixed")), &p.fixed)?;
        save_labels(dir.join(name("moving_labels")), &p.moving_labels)?;
        save_labels(dir.join(name("fixed_labels")), &p.fixed_labels)?;
        save_field(dir.join(name("field")), &p.gt_field)?;
        text.push_str(&format!(
            "pair = {} {} {} {} {}\n",
            name("moving"),
            name("fixed"),
            name("moving_labels"),
            name("fixed_labels"),
            name("field")
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text)?;
    Ok(path)
}

/// Parses the `pair` lines of a manifest; paths resolve against `base`.
pub fn parse_pair_manifest(text: &str, base: &Path) -> Result<Vec<PairEntry>> {
    let mut out = Vec::new();
    for (line, key, value) in parse_pairs(text)? {
        if key != "pair" {
            continue;
        }
        let parts: Vec<PathBuf> = value.split_whitespace().map(|p| base.join(p)).collect();
        let entry = match parts.as_slice() {
            [m, f, ml, fl] => PairEntry {
                moving: m.clone(),
                fixed: f.clone(),
                moving_labels: ml.clone(),
                fixed_labels: fl.clone(),
                field: None,
            },
            [m, f, ml, fl, gt] => PairEntry {
                moving: m.clone(),
                fixed: f.clone(),
                moving_labels: ml.clone(),
                fixed_labels: fl.clone(),
                field: Some(gt.clone()),
            },
            _ => {
                return Err(Error::Manifest {
                    line,
                    reason: format!("expected 4 or 5 paths, got {}", parts.len()),
                })
            }
        };
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            reason: "no `pair` lines".into(),
        });
    }
    Ok(out)
}

pub fn read_pair_manifest(path: impl AsRef<Path>) -> Result<Vec<PairEntry>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pair_manifest(&fs::read_to_string(path)?, base)
}
