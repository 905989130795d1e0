//! Checkpoint persistence.
//!
//! Layout: a magic line, the manifest byte length as ASCII decimal, the JSON
//! manifest (format version, named entries with shape/dtype/offset/length,
//! all configs, standardization stats, RNG state), then the raw
//! little-endian IEEE-754 parameter buffers in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::data::Stats;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::forecasting::TrainConfig;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"DYNDIFF-CKPT\n";

/// Serializable RNG position: master seed plus the ChaCha stream/word
/// coordinates at save time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl StatEntry {
    pub fn stats(&self) -> Stats {
        Stats {
            mean: self.mean,
            std: self.std,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    schedule: ScheduleConfig,
    encoder: EncoderConfig,
    denoiser: DenoiserConfig,
    train: TrainConfig,
    data: DataConfig,
    stats: Vec<StatEntry>,
    rng: RngState,
    entries: Vec<EntryMeta>,
}

/// Everything needed to resume or run a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub stats: Vec<StatEntry>,
    pub rng: RngState,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_store(
        store: &ParamStore<f32>,
        schedule: ScheduleConfig,
        encoder: EncoderConfig,
        denoiser: DenoiserConfig,
        train: TrainConfig,
        data: DataConfig,
        stats: Vec<StatEntry>,
        rng: RngState,
    ) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        Checkpoint {
            params,
            schedule,
            encoder,
            denoiser,
            train,
            data,
            stats,
            rng,
        }
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, shape, data) in &self.params {
            store.insert(name, Tensor::from_vec(data.clone(), shape.clone())?)?;
        }
        Ok(store)
    }

    /// Standardization stats for the forecast target variables, in target
    /// order.
    pub fn target_stats(&self) -> Result<Vec<Stats>> {
        self.data
            .targets
            .iter()
            .map(|t| {
                self.stats
                    .iter()
                    .find(|s| &s.name == t)
                    .map(StatEntry::stats)
                    .ok_or_else(|| Error::Checkpoint(format!("no stats for target {t:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let entries: Vec<EntryMeta> = self
            .params
            .iter()
            .map(|(name, shape, data)| {
                let len_bytes = (data.len() * 4) as u64;
                let meta = EntryMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                    len_bytes,
                };
                offset += len_bytes;
                meta
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            schedule: self.schedule.clone(),
            encoder: self.encoder.clone(),
            denoiser: self.denoiser.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            stats: self.stats.clone(),
            rng: self.rng.clone(),
            entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        writeln!(file, "{}", manifest_json.len())?;
        file.write_all(&manifest_json)?;
        for (_, _, data) in &self.params {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if !bytes.starts_with(MAGIC) {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let rest = &bytes[MAGIC.len()..];
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest length line".into()))?;
        let len: usize = std::str::from_utf8(&rest[..newline])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad manifest length line".into()))?;
        let manifest_start = newline + 1;
        if rest.len() < manifest_start + len {
            return Err(Error::Checkpoint("manifest truncated".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[manifest_start..manifest_start + len])
            .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob = &rest[manifest_start + len..];
        let mut params = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let numel: usize = entry.shape.iter().product();
            if entry.len_bytes as usize != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "entry {:?}: length {} bytes does not match shape {:?}",
                    entry.name, entry.len_bytes, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.len_bytes as usize;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "entry {:?}: buffer truncated ({} bytes available, {} needed)",
                    entry.name,
                    blob.len().saturating_sub(start),
                    entry.len_bytes
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((entry.name.clone(), entry.shape.clone(), data));
        }
        Ok(Checkpoint {
            params,
            schedule: manifest.schedule,
            encoder: manifest.encoder,
            denoiser: manifest.denoiser,
            train: manifest.train,
            data: manifest.data,
            stats: manifest.stats,
            rng: manifest.rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint {
        let mut store: ParamStore<f32> = ParamStore::new();
        store
            .insert("a.weight", Tensor::from_vec(vec![1.5, -2.25, 0.125], vec![3]).unwrap())
            .unwrap();
        store
            .insert("a.bias", Tensor::from_vec(vec![0.5], vec![1]).unwrap())
            .unwrap();
        store
            .insert(
                "b.weight",
                Tensor::from_vec(vec![4.0, 5.0, 6.0, 7.0], vec![2, 2]).unwrap(),
            )
            .unwrap();
        Checkpoint::from_store(
            &store,
            ScheduleConfig::default(),
            EncoderConfig::default(),
            DenoiserConfig::default(),
            TrainConfig::default(),
            DataConfig::default(),
            vec![StatEntry {
                name: "value".to_string(),
                mean: 1.25,
                std: 2.5,
            }],
            RngState {
                seed: 7,
                stream: 0,
                word_pos: 1234,
            },
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dyndiff");
        let p2 = dir.path().join("b.dyndiff");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // parameters bit-identical
        for ((n1, s1, d1), (n2, s2, d2)) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn truncated_blob_names_the_entry() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dyndiff");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn manifest_with_wrong_length_names_the_entry() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dyndiff");
        ckpt.save(&path).unwrap();
        // Corrupt the first entry's len_bytes in place ("12" -> "16" keeps
        // the manifest byte length unchanged). Byte-level edit: the blob
        // after the manifest is binary.
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"\"len_bytes\":12";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("12-byte entry present");
        bytes[pos + needle.len() - 1] = b'6';
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");
    }

    #[test]
    fn version_mismatch_is_detected() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dyndiff");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bad = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        std::fs::write(&path, bad.as_bytes()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    // External-reader oracle: parse the container with standalone logic (raw
    // manifest JSON plus manual offset arithmetic) and compare against what
    // was written.
    #[test]
    fn independent_reader_recovers_the_written_values() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.dyndiff");
        ckpt.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let magic_end = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let len_end = magic_end
            + bytes[magic_end..].iter().position(|&b| b == b'\n').unwrap();
        let manifest_len: usize = std::str::from_utf8(&bytes[magic_end..len_end])
            .unwrap()
            .parse()
            .unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&bytes[len_end + 1..len_end + 1 + manifest_len]).unwrap();
        let blob = &bytes[len_end + 1 + manifest_len..];

        let entries = manifest["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 3);
        for (entry, (name, _, data)) in entries.iter().zip(&ckpt.params) {
            assert_eq!(entry["name"].as_str().unwrap(), name);
            assert_eq!(entry["dtype"].as_str().unwrap(), "f32");
            let offset = entry["offset"].as_u64().unwrap() as usize;
            let len = entry["len_bytes"].as_u64().unwrap() as usize;
            let values: Vec<f32> = blob[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            assert_eq!(&values, data);
        }
        assert_eq!(manifest["rng"]["seed"].as_u64().unwrap(), 7);
        assert_eq!(manifest["stats"][0]["mean"].as_f64().unwrap(), 1.25);
    }
}
