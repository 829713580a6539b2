//! Single-file checkpoint container.
//!
//! ```text
//! b"PANCKPT\n"              8 bytes
//! version                   1 byte (currently 1)
//! manifest length           u64 little-endian
//! manifest                  UTF-8 `key = value` lines
//! payload                   f64 little-endian
//! ```
//!
//! The manifest holds `step`, `adam_t`, `payload_sha256`, the training
//! configuration under `config.<key>`, and one `tensor = <name> <shape>`
//! line per parameter tensor in visiting order (shape as `AxBxC`). The
//! payload stores every parameter tensor in that order, then the Adam first
//! moments, then the second moments, each flattened the same way.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::model::PanParams;
use crate::params::Parameters;
use crate::train::{Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"PANCKPT\n";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub params: PanParams,
    pub adam: Adam,
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Resumes exactly where `ckpt` left off.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config)?;
        t.model.params = ckpt.params;
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        Ok(t)
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut push = |v: &[f64]| v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
    push(&ckpt.params.flatten());
    push(&ckpt.adam.m);
    push(&ckpt.adam.v);

    let mut manifest = String::new();
    let _ = writeln!(manifest, "step = {}", ckpt.step);
    let _ = writeln!(manifest, "adam_t = {}", ckpt.adam.t);
    let _ = writeln!(manifest, "payload_sha256 = {}", hex::encode(Sha256::digest(&payload)));
    for line in ckpt.config.to_kv_text().lines() {
        let _ = writeln!(manifest, "config.{line}");
    }
    ckpt.params.visit("", &mut |name, t| {
        let _ = writeln!(manifest, "tensor = {name} {}", shape_text(&t.shape));
    });

    let mut out = Vec::with_capacity(17 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(ckpt))?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 17 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    if bytes[8] != VERSION {
        return Err(Error::CheckpointVersion {
            found: bytes[8],
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = &bytes[17..];
    if body.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest = std::str::from_utf8(&body[..len]).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let payload = &body[len..];

    let mut config = TrainConfig::default();
    let (mut step, mut adam_t, mut digest) = (None, None, None);
    let mut tensors = Vec::new();
    for (line, key, value) in parse_pairs(manifest)? {
        let number = |v: &str| v.parse::<u64>().map_err(|e| corrupt(format!("manifest line {line}: {e}")));
        match key.as_str() {
            "step" => step = Some(number(&value)? as usize),
            "adam_t" => adam_t = Some(number(&value)?),
            "payload_sha256" => digest = Some(value),
            "tensor" => tensors.push(value),
            k => match k.strip_prefix("config.") {
                Some(ck) => config.set(line, ck, &value)?,
                None => return Err(corrupt(format!("manifest line {line}: unknown key `{k}`"))),
            },
        }
    }
    config.validate()?;
    let step = step.ok_or_else(|| corrupt("manifest lacks `step`"))?;
    let adam_t = adam_t.ok_or_else(|| corrupt("manifest lacks `adam_t`"))?;
    let digest = digest.ok_or_else(|| corrupt("manifest lacks `payload_sha256`"))?;

    let mut params = PanParams::init(&config.model, 0)?;
    let mut expected = Vec::new();
    params.visit("", &mut |name, t| expected.push(format!("{name} {}", shape_text(&t.shape))));
    if tensors != expected {
        return Err(corrupt("tensor list does not match the configured architecture"));
    }
    let n = params.num_parameters();
    if payload.len() != 3 * n * 8 {
        return Err(corrupt(format!(
            "truncated tensor data: expected {} bytes, found {}",
            3 * n * 8,
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != digest {
        return Err(corrupt("payload checksum mismatch"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut i = 0;
    params.visit_mut("", &mut |_, t| {
        let len = t.data.len();
        t.data.copy_from_slice(&values[i..i + len]);
        i += len;
    });
    let adam = Adam {
        config: config.adam,
        m: values[n..2 * n].to_vec(),
        v: values[2 * n..].to_vec(),
        t: adam_t,
    };
    Ok(Checkpoint {
        config,
        step,
        params,
        adam,
    })
}
