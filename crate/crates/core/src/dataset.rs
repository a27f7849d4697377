//! Paired LDCT/NDCT datasets and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<id>_ldct.f32
//! <dir>/images/<id>_ndct.f32
//! ```
//!
//! Arrays are row-major little-endian float32 of shape `image_size²`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, simulate_ldct, Annotation, Image, PhantomSpec, SimulationConfig};
use crate::rawio::{read_f32le, read_json, write_dir_atomic, write_f32le, write_json};
use crate::tensor::{hex, Tensor};

pub const MANIFEST_FORMAT: &str = "lidnet-dataset-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CtSample {
    pub id: String,
    pub ldct: Image,
    pub ndct: Image,
    pub annotations: Vec<Annotation>,
}

impl CtSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let shape = self.ndct.shape();
        if shape.len() != 2 || self.ldct.shape() != shape {
            return Err(Error::Validation(format!(
                "sample {}: ldct {:?} and ndct {:?} must be equal 2-D shapes",
                self.id,
                self.ldct.shape(),
                shape
            )));
        }
        if !self.ldct.all_finite() || !self.ndct.all_finite() {
            return Err(Error::Validation(format!("sample {}: non-finite intensity", self.id)));
        }
        for a in &self.annotations {
            a.validate(shape[0], shape[1], num_classes)
                .map_err(|e| Error::Validation(format!("sample {}: {e}", self.id)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub phantom: Option<PhantomSpec>,
    pub simulation: Option<SimulationConfig>,
    pub train: Vec<CtSample>,
    pub test: Vec<CtSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    image_size: usize,
    dtype: String,
    num_classes: usize,
    #[serde(default)]
    phantom: Option<PhantomSpec>,
    #[serde(default)]
    simulation: Option<SimulationConfig>,
    samples: Vec<ManifestEntry>,
}

/// Per-sample seed derived from a base seed and the sample index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_dataset(
    phantom: &PhantomSpec,
    sim: &SimulationConfig,
    n_train: usize,
    n_test: usize,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must both be at least 1".into()));
    }
    phantom.validate()?;
    sim.validate()?;
    let make = |i: usize, id: String| -> Result<CtSample> {
        let spec = PhantomSpec {
            rng_seed: derive_seed(phantom.rng_seed, i as u64),
            ..phantom.clone()
        };
        let (ndct, annotations) = generate_phantom(&spec)?;
        let cfg = SimulationConfig {
            rng_seed: derive_seed(sim.rng_seed, i as u64),
            ..sim.clone()
        };
        let ldct = simulate_ldct(&ndct, &cfg)?;
        Ok(CtSample { id, ldct, ndct, annotations })
    };
    let train = (0..n_train)
        .map(|i| make(i, format!("train-{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..n_test)
        .map(|i| make(n_train + i, format!("test-{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: phantom.image_size,
        num_classes: 1,
        phantom: Some(phantom.clone()),
        simulation: Some(sim.clone()),
        train,
        test,
    })
}

impl Dataset {
    fn manifest(&self) -> Manifest {
        let entries = |samples: &[CtSample], split| {
            samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    split,
                    annotations: s.annotations.clone(),
                })
                .collect::<Vec<_>>()
        };
        let mut samples = entries(&self.train, Split::Train);
        samples.extend(entries(&self.test, Split::Test));
        Manifest {
            format: MANIFEST_FORMAT.into(),
            image_size: self.image_size,
            dtype: "f32le".into(),
            num_classes: self.num_classes,
            phantom: self.phantom.clone(),
            simulation: self.simulation.clone(),
            samples,
        }
    }

    /// SHA-256 over the serialised manifest and every image array.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest()).expect("serialisable manifest"));
        for s in self.train.iter().chain(&self.test) {
            h.update(s.ldct.checksum().as_bytes());
            h.update(s.ndct.checksum().as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
            if s.ndct.shape() != [self.image_size, self.image_size] {
                return Err(Error::Validation(format!(
                    "sample {} has shape {:?}, expected {}x{}",
                    s.id,
                    s.ndct.shape(),
                    self.image_size,
                    self.image_size
                )));
            }
            s.validate(self.num_classes)?;
        }
        Ok(())
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("sample id {id:?} is not a safe file stem")))
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    for s in ds.train.iter().chain(&ds.test) {
        check_id(&s.id)?;
    }
    write_dir_atomic(dir, |tmp| {
        let images = tmp.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in ds.train.iter().chain(&ds.test) {
            write_f32le(&images.join(format!("{}_ldct.f32", s.id)), s.ldct.data())?;
            write_f32le(&images.join(format!("{}_ndct.f32", s.id)), s.ndct.data())?;
        }
        write_json(&tmp.join("manifest.json"), &ds.manifest())
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset manifest"),
        ));
    }
    let m: Manifest = read_json(&path)?;
    if m.dtype != "f32le" {
        return Err(Error::Format {
            path,
            msg: format!("unsupported dtype {}", m.dtype),
        });
    }
    let n = m.image_size;
    let mut ds = Dataset {
        image_size: n,
        num_classes: m.num_classes,
        phantom: m.phantom,
        simulation: m.simulation,
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in m.samples {
        check_id(&e.id)?;
        for a in &e.annotations {
            a.validate(n, n, m.num_classes)
                .map_err(|err| Error::Validation(format!("{}: sample {}: {err}", path.display(), e.id)))?;
        }
        let read = |kind: &str| -> Result<Image> {
            let p = dir.join("images").join(format!("{}_{kind}.f32", e.id));
            Ok(Tensor::from_vec(&[n, n], read_f32le(&p, n * n)?))
        };
        let sample = CtSample {
            ldct: read("ldct")?,
            ndct: read("ndct")?,
            annotations: e.annotations,
            id: e.id,
        };
        match e.split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let spec = PhantomSpec { rng_seed: 11, ..PhantomSpec::default() };
        let sim = SimulationConfig { rng_seed: 12, ..SimulationConfig::default() };
        build_dataset(&spec, &sim, 3, 2).unwrap()
    }

    #[test]
    fn minimal_build_has_distinct_ids() {
        let ds = build_dataset(&PhantomSpec::default(), &SimulationConfig::default(), 1, 1).unwrap();
        assert_ne!(ds.train[0].id, ds.test[0].id);
    }

    #[test]
    fn rebuild_gives_same_checksum() {
        assert_eq!(small().checksum(), small().checksum());
    }

    #[test]
    fn zero_split_is_rejected() {
        let r = build_dataset(&PhantomSpec::default(), &SimulationConfig::default(), 0, 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.checksum(), ds.checksum());
    }

    #[test]
    fn empty_directory_names_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("manifest.json"), "{msg}");
    }

    #[test]
    fn out_of_bounds_annotation_fails_validation() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&ds, &path).unwrap();
        let mpath = path.join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        m["samples"][0]["annotations"] = serde_json::json!([[60, 60, 10, 10, 1]]);
        std::fs::write(&mpath, m.to_string()).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn truncated_array_names_file() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&ds, &path).unwrap();
        let f = path.join("images").join("test-00001_ndct.f32");
        std::fs::write(&f, [0u8; 12]).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("test-00001_ndct.f32"), "{msg}");
    }
}
