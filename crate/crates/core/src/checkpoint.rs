//! Checkpoint container.
//!
//! Layout: `b"BGCK"`, format version (u32 LE), manifest length (u64 LE), the
//! JSON manifest, then every tensor as raw little-endian f32 in manifest
//! order. The manifest records each tensor's key, shape and offset plus a
//! SHA-256 of the blob section. Writes go to a temporary file that is renamed
//! into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::networks::{Discriminator, Encoder, Generator, Network};
use crate::nn::{Adam, Moments, ParamStore, ParamTensor};
use crate::trainer::{StageEvent, StepRecord, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BGCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub stage: usize,
    pub generator: ParamStore,
    pub discriminator: Option<ParamStore>,
    pub encoder: Option<ParamStore>,
    pub train_state: Option<TrainState>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_generator(g: &Generator) -> Self {
        Checkpoint {
            config: g.config().clone(),
            stage: g.stage(),
            generator: g.params.clone(),
            discriminator: None,
            encoder: None,
            train_state: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::from_params(&self.config, self.stage, self.generator.clone())
    }

    pub fn discriminator(&self) -> Result<Option<Discriminator>> {
        self.discriminator
            .as_ref()
            .map(|p| Discriminator::from_params(&self.config, self.stage, p.clone()))
            .transpose()
    }

    pub fn encoder(&self) -> Result<Option<Encoder>> {
        self.encoder
            .as_ref()
            .map(|p| Encoder::from_params(&self.config, self.stage, p.clone()))
            .transpose()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |key: String, shape: &[usize], data: &[f32]| {
            tensors.push(TensorEntry {
                key,
                shape: shape.to_vec(),
                offset: blobs.len() as u64,
                len: data.len() as u64,
            });
            for v in data {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        };
        let mut stores = vec![("g", &self.generator)];
        stores.extend(self.discriminator.as_ref().map(|d| ("d", d)));
        stores.extend(self.encoder.as_ref().map(|e| ("e", e)));
        for (prefix, store) in stores {
            for (name, p) in store {
                push(format!("{prefix}/{name}"), &p.shape, &p.data);
            }
        }
        let train = self.train_state.as_ref().map(|s| {
            let mut adam_manifest = |tag: &str, adam: &Adam| {
                for (name, m) in &adam.moments {
                    push(format!("{tag}.m/{name}"), &[m.m.len()], &m.m);
                    push(format!("{tag}.v/{name}"), &[m.v.len()], &m.v);
                }
                AdamManifest::of(adam)
            };
            TrainManifest {
                seed: s.seed,
                stage: s.stage,
                step_in_stage: s.step_in_stage,
                global_step: s.global_step,
                finished: s.finished,
                adam_g: adam_manifest("adam_g", &s.adam_g),
                adam_d: adam_manifest("adam_d", &s.adam_d),
                history: s.history.clone(),
                events: s.events.clone(),
            }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            stage: self.stage,
            has_discriminator: self.discriminator.is_some(),
            has_encoder: self.encoder.is_some(),
            metadata: self.metadata.clone(),
            train,
            tensors,
            blob_bytes: blobs.len() as u64,
            sha256: hex::encode(Sha256::digest(&blobs)),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_end = 16usize
            .checked_add(mlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("manifest version {} mismatch", manifest.format_version)));
        }
        let blobs = &bytes[manifest_end..];
        if blobs.len() as u64 != manifest.blob_bytes {
            return Err(bad(format!(
                "blob section has {} bytes, manifest says {}",
                blobs.len(),
                manifest.blob_bytes
            )));
        }
        if hex::encode(Sha256::digest(blobs)) != manifest.sha256 {
            return Err(bad("checksum mismatch".into()));
        }
        let mut tensors: BTreeMap<String, ParamTensor> = BTreeMap::new();
        for t in &manifest.tensors {
            let start = t.offset as usize;
            let end = start + 4 * t.len as usize;
            if end > blobs.len() || t.shape.iter().product::<usize>() as u64 != t.len {
                return Err(bad(format!("tensor {} is out of bounds or misshapen", t.key)));
            }
            let data = blobs[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(
                t.key.clone(),
                ParamTensor {
                    shape: t.shape.clone(),
                    data,
                },
            );
        }
        let take = |tensors: &mut BTreeMap<String, ParamTensor>, prefix: &str| -> ParamStore {
            let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            keys.into_iter()
                .map(|k| {
                    let v = tensors.remove(&k).expect("key listed");
                    (k[prefix.len()..].to_string(), v)
                })
                .collect()
        };
        let generator = take(&mut tensors, "g/");
        let discriminator = manifest.has_discriminator.then(|| take(&mut tensors, "d/"));
        let encoder = manifest.has_encoder.then(|| take(&mut tensors, "e/"));
        let train_state = match manifest.train {
            None => None,
            Some(t) => {
                let mut restore = |tag: &str, am: &AdamManifest| -> Result<Adam> {
                    let mut adam = Adam::new(am.learning_rate, am.beta1, am.beta2);
                    adam.epsilon = am.epsilon;
                    let mut m = take(&mut tensors, &format!("{tag}.m/"));
                    let mut v = take(&mut tensors, &format!("{tag}.v/"));
                    for (name, steps) in &am.steps {
                        let (Some(mm), Some(vv)) = (m.remove(name), v.remove(name)) else {
                            return Err(bad(format!("missing optimizer moments for {name}")));
                        };
                        adam.moments.insert(
                            name.clone(),
                            Moments {
                                m: mm.data,
                                v: vv.data,
                                t: *steps,
                            },
                        );
                    }
                    Ok(adam)
                };
                Some(TrainState {
                    seed: t.seed,
                    stage: t.stage,
                    step_in_stage: t.step_in_stage,
                    global_step: t.global_step,
                    finished: t.finished,
                    adam_g: restore("adam_g", &t.adam_g)?,
                    adam_d: restore("adam_d", &t.adam_d)?,
                    history: t.history,
                    events: t.events,
                })
            }
        };
        Ok(Checkpoint {
            config: manifest.config,
            stage: manifest.stage,
            generator,
            discriminator,
            encoder,
            train_state,
            metadata: manifest.metadata,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Number of f32 values.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamManifest {
    learning_rate: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    steps: BTreeMap<String, u64>,
}

impl AdamManifest {
    fn of(adam: &Adam) -> Self {
        AdamManifest {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            steps: adam.moments.iter().map(|(k, m)| (k.clone(), m.t)).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrainManifest {
    seed: u64,
    stage: usize,
    step_in_stage: usize,
    global_step: u64,
    finished: bool,
    adam_g: AdamManifest,
    adam_d: AdamManifest,
    history: Vec<StepRecord>,
    events: Vec<StageEvent>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: NetConfig,
    stage: usize,
    has_discriminator: bool,
    has_encoder: bool,
    metadata: BTreeMap<String, String>,
    train: Option<TrainManifest>,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    sha256: String,
}

/// Writes atomically: a temporary sibling file is fully written, synced and renamed.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Dataset, SyntheticRecipe};
    use crate::trainer::{fixed_step_schedule, OptimSpec, Trainer};

    fn trained() -> (Trainer, Dataset) {
        let cfg = NetConfig {
            subvector_dims: vec![3, 2],
            base_resolution: (2, 2),
            output_resolution: (8, 8),
            channel_schedule: vec![8, 4],
            stages: 2,
            ..NetConfig::desk()
        };
        let recipe = SyntheticRecipe {
            samples: 6,
            resolution: (8, 8),
            ..SyntheticRecipe::default()
        };
        let data = Dataset::from_images(&generate_synthetic(&recipe, 0).unwrap(), &cfg.resolutions()[1..], 0).unwrap();
        let optim = OptimSpec {
            batch_size: 3,
            ..OptimSpec::default()
        };
        let mut t = Trainer::new(&cfg, fixed_step_schedule(&cfg, 3), optim, 1).unwrap();
        t.run(&data, Some(4), &mut |_, _| Ok(())).unwrap();
        (t, data)
    }

    fn full(t: &Trainer) -> Checkpoint {
        let mut ck = Checkpoint::from_generator(&t.g);
        ck.discriminator = Some(t.d.params.clone());
        ck.encoder = Some(Encoder::build(&t.config, t.g.stage(), 3).unwrap().params);
        ck.train_state = Some(t.state.clone());
        ck.metadata.insert("note".into(), "test".into());
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (t, _) = trained();
        let ck = full(&t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bgck");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (k, v) in &ck.generator {
            let b = &back.generator[k];
            assert!(v.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.generator().unwrap(), t.g);
        assert!(back.encoder().unwrap().is_some());
        // no temp files left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corrupt_or_foreign_files_are_rejected() {
        let (t, _) = trained();
        let bytes = full(&t).to_bytes().unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let err = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(b"PNG....").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn resumed_checkpoint_continues_bit_exact() {
        let (mut t, data) = trained();
        let ck = Checkpoint::from_bytes(&full(&t).to_bytes().unwrap()).unwrap();
        let mut resumed = Trainer::resume(
            ck.generator().unwrap(),
            ck.discriminator().unwrap().unwrap(),
            ck.train_state.unwrap(),
            t.schedule.clone(),
            t.optim.clone(),
        )
        .unwrap();
        t.run(&data, None, &mut |_, _| Ok(())).unwrap();
        resumed.run(&data, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(t.g.params, resumed.g.params);
        assert_eq!(t.state, resumed.state);
    }
}
