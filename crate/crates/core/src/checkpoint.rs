//! Versioned checkpoint files.
//!
//! Layout: an ASCII manifest terminated by the line `end`, followed by the
//! raw payload of little-endian `f64` values.
//!
//! ```text
//! bayes-impute checkpoint
//! version 1
//! model features 5 hidden 32 impute_hidden 32 cell tanh deterministic false
//! meta epochs_run 50 final_loss 1.2345e0 seed 7
//! setting <key> <value>          (zero or more; value runs to end of line)
//! array <name> <dim>...          (one per array, in payload order)
//! payload_bytes <n>
//! payload_sha256 <hex>
//! end
//! ```
//!
//! Arrays are `norm.mean`, `norm.std`, then `<group>.mu` and `<group>.rho`
//! for every weight group in canonical order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{check_posterior, CellKind, ModelConfig, ModelWeights, Posterior};
use crate::variational::VariationalTensor;

pub const MAGIC: &str = "bayes-impute checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub posterior: Posterior<f64>,
    pub norm: NormStats,
    pub meta: TrainingMeta,
    /// Run settings needed to reproduce the data split, in insertion order.
    pub settings: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let m = self.norm.mean.len();
        let mut out = vec![
            ("norm.mean".to_string(), vec![m], self.norm.mean.as_slice()),
            ("norm.std".to_string(), vec![self.norm.std.len()], self.norm.std.as_slice()),
        ];
        for (name, vt) in self.posterior.iter() {
            out.push((format!("{name}.mu"), vt.mu.shape().to_vec(), vt.mu.data()));
            out.push((format!("{name}.rho"), vt.rho.shape().to_vec(), vt.rho.data()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut head = String::new();
        let m = &self.model;
        writeln!(head, "{MAGIC}").unwrap();
        writeln!(head, "version {FORMAT_VERSION}").unwrap();
        writeln!(
            head,
            "model features {} hidden {} impute_hidden {} cell {} deterministic {}",
            m.features,
            m.hidden,
            m.impute_hidden,
            m.cell.name(),
            m.deterministic
        )
        .unwrap();
        writeln!(
            head,
            "meta epochs_run {} final_loss {:e} seed {}",
            self.meta.epochs_run, self.meta.final_loss, self.meta.seed
        )
        .unwrap();
        for (k, v) in &self.settings {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("setting `{k}` cannot be stored on one line")));
            }
            writeln!(head, "setting {k} {v}").unwrap();
        }
        for (name, shape, data) in self.arrays() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(head, "array {name} {}", dims.join(" ")).unwrap();
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        writeln!(head, "payload_bytes {}", payload.len()).unwrap();
        writeln!(head, "payload_sha256 {}", hex::encode(Sha256::digest(&payload))).unwrap();
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        bytes.extend_from_slice(&payload);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let cut = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("manifest terminator not found (truncated or not a checkpoint)"))?;
        let head = std::str::from_utf8(&bytes[..cut]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[cut + marker.len()..];
        let mut lines = head.lines();

        if lines.next() != Some(MAGIC) {
            return Err(bad("not a bayes-impute checkpoint"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version "))
            .ok_or_else(|| bad("missing version line"))?;
        let version: u32 = version.parse().map_err(|_| bad(format!("bad version `{version}`")))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }

        let mut model: Option<ModelConfig> = None;
        let mut meta: Option<TrainingMeta> = None;
        let mut settings = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
        let mut payload_bytes: Option<usize> = None;
        let mut digest: Option<String> = None;
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "model" => model = Some(parse_model(rest)?),
                "meta" => meta = Some(parse_meta(rest)?),
                "setting" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    settings.push((k.to_string(), v.to_string()));
                }
                "array" => {
                    let mut parts = rest.split(' ');
                    let name = parts.next().unwrap_or_default().to_string();
                    let dims = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad dimensions for array `{name}`")))?;
                    arrays.push((name, dims));
                }
                "payload_bytes" => {
                    payload_bytes = Some(rest.parse().map_err(|_| bad("bad payload_bytes"))?)
                }
                "payload_sha256" => digest = Some(rest.to_string()),
                other => return Err(bad(format!("unknown manifest line `{other}`"))),
            }
        }
        let model = model.ok_or_else(|| bad("missing model line"))?;
        let meta = meta.ok_or_else(|| bad("missing meta line"))?;
        let expected = payload_bytes.ok_or_else(|| bad("missing payload_bytes"))?;
        if payload.len() != expected {
            return Err(bad(format!(
                "payload is {} bytes, manifest declares {expected} (truncated or padded file)",
                payload.len()
            )));
        }
        let digest = digest.ok_or_else(|| bad("missing payload_sha256"))?;
        if hex::encode(Sha256::digest(payload)) != digest {
            return Err(bad("payload checksum mismatch (corrupted file)"));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let n: usize = dims.iter().product();
            let out: Vec<f64> = values.by_ref().take(n).collect();
            if out.len() != n {
                return Err(bad(format!("payload ends inside array `{name}`")));
            }
            Ok(out)
        };
        let mut tensors = Vec::with_capacity(arrays.len());
        for (name, dims) in &arrays {
            tensors.push((name.clone(), dims.clone(), take(name, dims)?));
        }
        if values.next().is_some() {
            return Err(bad("payload holds more values than the declared arrays"));
        }

        let expected_names: Vec<String> = ["norm.mean".to_string(), "norm.std".to_string()]
            .into_iter()
            .chain(
                ModelWeights::<()>::NAMES
                    .iter()
                    .flat_map(|g| [format!("{g}.mu"), format!("{g}.rho")]),
            )
            .collect();
        let names: Vec<&String> = tensors.iter().map(|(n, _, _)| n).collect();
        if names.len() != expected_names.len() || names.iter().zip(&expected_names).any(|(a, b)| *a != b) {
            return Err(bad("array list does not match the expected layout"));
        }
        let mut it = tensors.into_iter();
        let mean = it.next().unwrap().2;
        let std = it.next().unwrap().2;
        if mean.len() != model.features || std.len() != model.features {
            return Err(bad("normalization stats do not match the feature count"));
        }
        let mut groups = Vec::with_capacity(ModelWeights::<()>::NAMES.len());
        while let Some((_, mu_dims, mu)) = it.next() {
            let (_, rho_dims, rho) = it.next().expect("mu and rho come in pairs");
            groups.push(VariationalTensor::new(
                Tensor::new(mu_dims, mu)?,
                Tensor::new(rho_dims, rho)?,
            )?);
        }
        let posterior = ModelWeights::from_vec(groups).ok_or_else(|| bad("wrong number of weight groups"))?;
        check_posterior(&model, &posterior).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            model,
            posterior,
            norm: NormStats { mean, std },
            meta,
            settings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the checkpoint was built for `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.model.features != expected.features
            || ckpt.model.hidden != expected.hidden
            || ckpt.model.impute_hidden != expected.impute_hidden
            || ckpt.model.cell != expected.cell
        {
            return Err(Error::Config(format!(
                "checkpoint model {:?} does not match expected {:?}",
                ckpt.model, expected
            )));
        }
        Ok(ckpt)
    }
}

fn pairs(rest: &str) -> Result<Vec<(&str, &str)>> {
    let toks: Vec<&str> = rest.split(' ').collect();
    if toks.len() % 2 != 0 {
        return Err(bad(format!("malformed key/value line `{rest}`")));
    }
    Ok(toks.chunks(2).map(|c| (c[0], c[1])).collect())
}

fn field<T: std::str::FromStr>(kv: &[(&str, &str)], key: &str) -> Result<T> {
    let raw = kv
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| bad(format!("missing field `{key}`")))?;
    raw.parse().map_err(|_| bad(format!("bad value `{raw}` for `{key}`")))
}

fn parse_model(rest: &str) -> Result<ModelConfig> {
    let kv = pairs(rest)?;
    let cell: String = field(&kv, "cell")?;
    let model = ModelConfig {
        features: field(&kv, "features")?,
        hidden: field(&kv, "hidden")?,
        impute_hidden: field(&kv, "impute_hidden")?,
        cell: CellKind::parse(&cell).map_err(|e| bad(e.to_string()))?,
        deterministic: field(&kv, "deterministic")?,
    };
    model.validate().map_err(|e| bad(e.to_string()))?;
    Ok(model)
}

fn parse_meta(rest: &str) -> Result<TrainingMeta> {
    let kv = pairs(rest)?;
    Ok(TrainingMeta {
        epochs_run: field(&kv, "epochs_run")?,
        final_loss: field(&kv, "final_loss")?,
        seed: field(&kv, "seed")?,
    })
}
