//! Run manifests and the files they stamp.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Writes every float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.16e}", f64::from(value))
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(buf)
}

pub enum Content {
    Json(serde_json::Value),
    /// CSV body; a `# manifest-sha256:` line is prepended on write.
    Csv(Vec<u8>),
}

pub struct Artifact {
    pub file: String,
    pub content: Content,
}

impl Artifact {
    pub fn json<T: Serialize>(file: impl Into<String>, value: &T) -> Result<Self, CliError> {
        Ok(Self {
            file: file.into(),
            content: Content::Json(serde_json::to_value(value)?),
        })
    }

    pub fn csv(file: impl Into<String>, body: Vec<u8>) -> Self {
        Self {
            file: file.into(),
            content: Content::Csv(body),
        }
    }
}

/// The reproducible part of a run; its hash stamps every output.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestCore {
    pub subcommand: String,
    pub parameters: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

impl ManifestCore {
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// The command line that reproduces this run.
    pub fn argv(&self) -> Vec<String> {
        let mut argv = vec!["shadowprice".to_string(), self.subcommand.clone()];
        argv.extend(self.parameters.iter().map(|(k, v)| format!("--{k}={v}")));
        argv
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    #[serde(flatten)]
    pub core: &'a ManifestCore,
    pub manifest_sha256: &'a str,
    pub argv: Vec<String>,
    pub notes: &'a [String],
    pub verified: bool,
    pub wall_time_seconds: f64,
}

pub fn manifest_path(out_dir: &Path, subcommand: &str) -> PathBuf {
    out_dir.join(format!("{subcommand}.manifest.json"))
}

pub fn write_artifact(out_dir: &Path, hash: &str, artifact: &Artifact) -> Result<PathBuf, CliError> {
    let path = out_dir.join(&artifact.file);
    let bytes = match &artifact.content {
        Content::Json(v) => {
            let mut wrapped = serde_json::Map::new();
            wrapped.insert("manifest_sha256".into(), hash.into());
            wrapped.insert("result".into(), v.clone());
            to_json(&wrapped)?
        }
        Content::Csv(body) => {
            let mut out = format!("# manifest-sha256: {hash}\n").into_bytes();
            out.extend_from_slice(body);
            out
        }
    };
    std::fs::write(&path, bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    Ok(path)
}
