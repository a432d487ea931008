//! Datasets for a run: regenerated from the synthetic spec, or read back
//! from a directory written by `datagen` and checked against its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hoi_core::archive::write_atomic;
use hoi_core::percept::PointCloudSequence;
use hoi_core::synth::{
    gen_motion_pairs, gen_pcd_actions, read_clip, read_motion, write_clip, write_motion, MotionPair, Split,
    SynthGenSpec, SynthPcdSpec,
};

use crate::config::{hex, RunConfig, Task};
use crate::error::{CliError, CliResult};

pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum DataSpec {
    Generation { spec: SynthGenSpec },
    Perception { spec: SynthPcdSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub label: usize,
    pub cue: Option<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data: DataSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// Relative path to hex SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
    /// Labels and cues of motion pairs, keyed like the files.
    #[serde(default)]
    pub pairs: BTreeMap<String, PairMeta>,
    pub config_hash: String,
    pub manifest_hash: String,
}

impl Manifest {
    /// Hash over everything that determines the dataset contents.
    fn content_hash(&self) -> String {
        let v = serde_json::json!({
            "data": self.data,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "files": self.files,
            "pairs": self.pairs,
        });
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn data_spec(cfg: &RunConfig) -> CliResult<(DataSpec, usize, usize)> {
    Ok(match cfg.task {
        Task::Generation => {
            let g = cfg.gen()?;
            (DataSpec::Generation { spec: g.data.clone() }, g.train_count, g.val_count)
        }
        Task::Perception => {
            let p = cfg.pcd()?;
            (DataSpec::Perception { spec: p.data.clone() }, p.train_count, p.val_count)
        }
    })
}

fn pair_files(key: &str, p: &MotionPair) -> [(String, String); 4] {
    [
        (format!("{key}.actor.txt"), write_motion(&p.actor)),
        (format!("{key}.reactor.txt"), write_motion(&p.reactor)),
        (format!("{key}.object.txt"), write_motion(&p.object_pose)),
        (format!("{key}.geometry.txt"), write_motion(&p.object_geometry)),
    ]
}

/// Writes the configured dataset under `dir` and returns its manifest.
pub fn datagen(cfg: &RunConfig, dir: &Path) -> CliResult<Manifest> {
    let (data, train_count, val_count) = data_spec(cfg)?;
    let mut files = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for (split, n) in [(Split::Train, train_count), (Split::Val, val_count)] {
        let mut out: Vec<(String, String)> = Vec::new();
        match &data {
            DataSpec::Generation { spec } => {
                for (i, p) in gen_motion_pairs(spec, split, n)?.iter().enumerate() {
                    let key = format!("{}/{i:05}", split_name(split));
                    out.extend(pair_files(&key, p));
                    pairs.insert(key, PairMeta { label: p.label, cue: p.cue });
                }
            }
            DataSpec::Perception { spec } => {
                for (i, c) in gen_pcd_actions(spec, split, n)?.iter().enumerate() {
                    out.push((format!("{}/{i:05}.clip.txt", split_name(split)), write_clip(c)));
                }
            }
        }
        for (rel, text) in out {
            write_atomic(&dir.join(&rel), text.as_bytes())?;
            files.insert(rel, hex(&Sha256::digest(text.as_bytes())));
        }
    }
    let mut m = Manifest {
        data,
        train_count,
        val_count,
        files,
        pairs,
        config_hash: cfg.hash(),
        manifest_hash: String::new(),
    };
    m.manifest_hash = m.content_hash();
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&m).expect("manifest").as_bytes())?;
    Ok(m)
}

/// Reads the manifest in `dir` and checks it describes the configured data.
fn open_manifest(cfg: &RunConfig, dir: &Path) -> CliResult<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if m.content_hash() != m.manifest_hash {
        return Err(CliError::Config(format!("{}: manifest hash does not match its contents", path.display())));
    }
    let (data, train_count, val_count) = data_spec(cfg)?;
    if (m.data != data) || m.train_count != train_count || m.val_count != val_count {
        return Err(CliError::Config(format!(
            "dataset in {} was generated for a different data spec",
            dir.display()
        )));
    }
    Ok(m)
}

fn read_checked(dir: &Path, m: &Manifest, rel: &str) -> CliResult<String> {
    let want = m
        .files
        .get(rel)
        .ok_or_else(|| CliError::Config(format!("manifest has no entry for {rel}")))?;
    let text = fs::read_to_string(dir.join(rel))?;
    if &hex(&Sha256::digest(text.as_bytes())) != want {
        return Err(CliError::Config(format!("{rel} does not match its manifest hash")));
    }
    Ok(text)
}

fn load_pairs(dir: &Path, m: &Manifest, split: Split, n: usize) -> CliResult<Vec<MotionPair>> {
    (0..n)
        .map(|i| {
            let key = format!("{}/{i:05}", split_name(split));
            let meta = m
                .pairs
                .get(&key)
                .ok_or_else(|| CliError::Config(format!("manifest has no pair {key}")))?;
            let read = |part: &str| -> CliResult<_> { Ok(read_motion(&read_checked(dir, m, &format!("{key}.{part}.txt"))?)?) };
            Ok(MotionPair {
                actor: read("actor")?,
                reactor: read("reactor")?,
                object_pose: read("object")?,
                object_geometry: read("geometry")?,
                label: meta.label,
                cue: meta.cue,
            })
        })
        .collect()
}

fn load_clips(dir: &Path, m: &Manifest, split: Split, n: usize) -> CliResult<Vec<PointCloudSequence>> {
    (0..n)
        .map(|i| Ok(read_clip(&read_checked(dir, m, &format!("{}/{i:05}.clip.txt", split_name(split)))?)?))
        .collect()
}

pub fn motion_pairs(cfg: &RunConfig) -> CliResult<Splits<MotionPair>> {
    let g = cfg.gen()?;
    match &cfg.paths.data {
        Some(d) => {
            let dir = Path::new(d);
            let m = open_manifest(cfg, dir)?;
            Ok(Splits {
                train: load_pairs(dir, &m, Split::Train, g.train_count)?,
                val: load_pairs(dir, &m, Split::Val, g.val_count)?,
            })
        }
        None => Ok(Splits {
            train: gen_motion_pairs(&g.data, Split::Train, g.train_count)?,
            val: gen_motion_pairs(&g.data, Split::Val, g.val_count)?,
        }),
    }
}

pub fn clips(cfg: &RunConfig) -> CliResult<Splits<PointCloudSequence>> {
    let p = cfg.pcd()?;
    match &cfg.paths.data {
        Some(d) => {
            let dir = Path::new(d);
            let m = open_manifest(cfg, dir)?;
            Ok(Splits {
                train: load_clips(dir, &m, Split::Train, p.train_count)?,
                val: load_clips(dir, &m, Split::Val, p.val_count)?,
            })
        }
        None => Ok(Splits {
            train: gen_pcd_actions(&p.data, Split::Train, p.train_count)?,
            val: gen_pcd_actions(&p.data, Split::Val, p.val_count)?,
        }),
    }
}
