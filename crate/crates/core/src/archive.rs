//! Checkpoint archives: named `f64` arrays plus string metadata, stored in
//! the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Mat>,
    pub metadata: BTreeMap<String, String>,
}

/// Rewrites the JSON header with sorted keys; the library emits its metadata
/// map in hash order, which would make equal archives differ byte-wise.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::Archive("malformed header".into());
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(bad)?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(arch_err)?;
    let mut text = serde_json::to_vec(&value).map_err(arch_err)?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(&bytes[8 + n..]);
    Ok(out)
}

fn arch_err(e: impl std::fmt::Display) -> Error {
    Error::Archive(e.to_string())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: impl Into<String>, m: Mat) {
        self.tensors.insert(name.into(), m);
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn get_meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing metadata key {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, m)| {
                let bytes = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), vec![m.rows(), m.cols()], bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| Ok((k.clone(), TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(arch_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        canonical_header(safetensors::serialize(views, Some(meta)).map_err(arch_err)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(arch_err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(arch_err)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Archive(format!("{name}: expected f64, found {:?}", view.dtype())));
            }
            let (r, c) = match view.shape() {
                [r, c] => (*r, *c),
                s => return Err(Error::Archive(format!("{name}: expected 2-D, found shape {s:?}"))),
            };
            let data = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Mat::from_vec(r, c, data));
        }
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Self { tensors, metadata })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stores every parameter under `prefix.<name>`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.put(format!("{prefix}.{name}"), m.clone());
        }
    }

    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}.");
        let values: HashMap<String, Mat> = self
            .tensors
            .iter()
            .filter_map(|(k, m)| k.strip_prefix(&p).map(|n| (n.to_string(), m.clone())))
            .collect();
        store.load_from(&values)
    }

    /// Stores optimiser moments and step count.
    pub fn put_adam(&mut self, store: &ParamStore, adam: &Adam) {
        for id in store.ids() {
            let i = id.0;
            self.put(format!("adam.m.{}", store.name(id)), adam.m[i].clone());
            self.put(format!("adam.v.{}", store.name(id)), adam.v[i].clone());
        }
        self.meta("adam.step", adam.step.to_string());
    }

    pub fn load_adam(&self, store: &ParamStore, adam: &mut Adam) -> Result<()> {
        for id in store.ids() {
            let i = id.0;
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{kind}.{}", store.name(id));
                let m = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Archive(format!("missing {key}")))?;
                if m.shape() != slot.shape() {
                    return Err(Error::Archive(format!("{key}: shape {:?}", m.shape())));
                }
                *slot = m.clone();
            }
        }
        adam.step = self
            .get_meta("adam.step")?
            .parse()
            .map_err(|_| Error::Archive("bad adam.step".into()))?;
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{memory_stream, MemoryConfig, MemoryState};
    use crate::nn::{rng_for, AdamConfig, Linear};

    #[test]
    fn round_trip_preserves_bits() {
        let mut a = Archive::new();
        a.put("w", Mat::from_rows(&[[1.0, -0.0, f64::MIN_POSITIVE], [1e300, 0.1, 3.5]]));
        a.put("b", Mat::zeros(1, 4));
        a.meta("config", "{\"x\":1}");
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn bytes_do_not_depend_on_metadata_hash_order() {
        let mut a = Archive::new();
        a.put("w", Mat::zeros(2, 2));
        for i in 0..16 {
            a.meta(format!("key{i}"), i.to_string());
        }
        let first = a.to_bytes().unwrap();
        for _ in 0..8 {
            assert_eq!(a.to_bytes().unwrap(), first);
        }
        assert_eq!(u64::from_le_bytes(first[..8].try_into().unwrap()) % 8, 0);
        assert_eq!(Archive::from_bytes(&first).unwrap(), a);
    }

    #[test]
    fn store_and_optimiser_round_trip() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 3, 2, true, &mut rng_for(0, 0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step = 7;
        adam.m[0] = Mat::filled(3, 2, 0.25);
        let mut a = Archive::new();
        a.put_store("model", &store);
        a.put_adam(&store, &adam);
        let a = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        let mut store2 = ParamStore::new();
        Linear::new(&mut store2, "l", 3, 2, true, &mut rng_for(9, 0));
        a.load_store("model", &mut store2).unwrap();
        let mut adam2 = Adam::new(AdamConfig::default(), &store2);
        a.load_adam(&store2, &mut adam2).unwrap();
        assert_eq!(store2.value(store2.ids().next().unwrap()), store.value(store.ids().next().unwrap()));
        assert_eq!((adam2.step, &adam2.m), (7, &adam.m));
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 2, 2, false, &mut rng_for(0, 0));
        assert!(matches!(Archive::new().load_store("model", &mut store), Err(Error::Archive(_))));
        assert!(matches!(Archive::from_bytes(b"junk"), Err(Error::Archive(_))));
    }

    #[test]
    fn memory_snapshot_golden() {
        let cfg = MemoryConfig {
            short_capacity: 2,
            long_capacity: 2,
            ..MemoryConfig::default()
        };
        let x = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]);
        let snaps = memory_stream(&x, &cfg).unwrap();
        let json = serde_json::to_string(&snaps[3]).unwrap();
        assert_eq!(
            json,
            concat!(
                r#"{"short":[{"vec":[1.0,1.0],"count":1,"sources":[[2,1.0]]},"#,
                r#"{"vec":[2.0,0.0],"count":1,"sources":[[3,1.0]]}],"#,
                r#""long":[{"vec":[1.0,0.0],"count":1,"sources":[[0,1.0]]},"#,
                r#"{"vec":[0.0,1.0],"count":1,"sources":[[1,1.0]]}]}"#
            )
        );
        let mut state = MemoryState::new(&cfg).unwrap();
        for r in 0..3 {
            state.step(x.row(r)).unwrap();
        }
        let back: MemoryState = serde_json::from_str(&serde_json::to_string(&state).unwrap()).unwrap();
        assert_eq!(back, state);
    }
}
