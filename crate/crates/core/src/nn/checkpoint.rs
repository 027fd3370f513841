//! Versioned checkpoint: text header (model config, digests, named-shape
//! table) followed by a little-endian f64 parameter blob.
//!
//! ```text
//! OSDCKPT 1
//! model.family=CF
//! ...
//! feature_digest=0123abcd...
//! model_digest=...
//! params=4012345
//! tensor prenet.weight 64x168 0
//! ...
//! end
//! <params * 8 bytes>
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use super::model::{build_model, Family, Model, ModelConfig};
use crate::error::{OsdError, Result};

const MAGIC: &str = "OSDCKPT 1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub feature_digest: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&cfg.digest_text());
        header.push_str(&format!("feature_digest={}\n", self.feature_digest));
        header.push_str(&format!("model_digest={}\n", cfg.digest()));
        header.push_str(&format!("params={}\n", self.model.param_count()));
        for info in self.model.params().infos() {
            let dims: Vec<String> = info.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {} {}\n", info.name, dims.join("x"), info.offset));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(self.model.param_count() * 8);
        for v in self.model.params().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| OsdError::io(format!("creating {}", path.display()), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| OsdError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| OsdError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| OsdError::Data(format!("checkpoint: {m}"));
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing header terminator"))?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("unsupported version or not a checkpoint"));
        }
        let mut kv = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                tensors.push(rest.to_string());
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            } else {
                return Err(bad(&format!("bad header line '{line}'")));
            }
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(&format!("missing '{k}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad '{k}'"))) };
        let config = ModelConfig {
            family: get("model.family")?.parse::<Family>()?,
            input_dim: num("model.input_dim")?,
            model_dim: num("model.dim")?,
            block_count: num("model.blocks")?,
            head_count: num("model.heads")?,
            ff_dim: num("model.ff_dim")?,
            tcn_resblocks_per_block: num("model.tcn_resblocks")?,
            tcn_hidden: num("model.tcn_hidden")?,
            tcn_kernel: num("model.tcn_kernel")?,
            conv_kernel: num("model.conv_kernel")?,
            hidden_dim: num("model.hidden")?,
            dropout: get("model.dropout")?.parse().map_err(|_| bad("bad dropout"))?,
            class_count: num("model.classes")?,
            seed: get("model.seed")?.parse().map_err(|_| bad("bad seed"))?,
        };
        if get("model_digest")? != config.digest() {
            return Err(OsdError::DigestMismatch {
                what: "checkpoint model config".into(),
                expected: get("model_digest")?,
                found: config.digest(),
            });
        }
        let mut model = build_model(&config)?;
        let n = num("params")?;
        if n != model.param_count() {
            return Err(bad(&format!("{n} parameters stored, architecture has {}", model.param_count())));
        }
        let infos = model.params().infos();
        if tensors.len() != infos.len() {
            return Err(bad("tensor table does not match architecture"));
        }
        for (line, info) in tensors.iter().zip(infos) {
            let dims: Vec<String> = info.shape.iter().map(|d| d.to_string()).collect();
            let expect = format!("{} {} {}", info.name, dims.join("x"), info.offset);
            if *line != expect {
                return Err(bad(&format!("tensor '{line}' does not match '{expect}'")));
            }
        }
        let blob = &bytes[header_end..];
        if blob.len() != n * 8 {
            return Err(bad(&format!("blob holds {} bytes, expected {}", blob.len(), n * 8)));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params_mut().load_flat(&values);
        Ok(Checkpoint {
            model,
            feature_digest: get("feature_digest")?,
        })
    }

    /// Refuse to use a checkpoint built for a different architecture or framing.
    pub fn verify(&self, model: &ModelConfig, feature_digest: &str) -> Result<()> {
        let mine = self.model.config().architecture_digest();
        if mine != model.architecture_digest() {
            return Err(OsdError::DigestMismatch {
                what: "model architecture".into(),
                expected: model.architecture_digest(),
                found: mine,
            });
        }
        if self.feature_digest != feature_digest {
            return Err(OsdError::DigestMismatch {
                what: "feature config".into(),
                expected: feature_digest.to_string(),
                found: self.feature_digest.clone(),
            });
        }
        Ok(())
    }
}
