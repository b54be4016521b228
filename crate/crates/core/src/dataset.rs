//! On-disk dataset layout and loading.
//!
//! A dataset directory contains `suite.json` (templates, oracle
//! coefficients, split metadata, coefficient hash) plus one directory per
//! kernel holding `kernel.jsonl` (a single versioned graph record) and
//! `samples.jsonl` (one design/label/validity record per line).
//! Classification data is every sample; regression data is the valid
//! subset, capped to the configured budget per kernel (the `regre` flag on
//! each record makes the split explicit and reproducible).

use crate::cdfg::{CdfGraph, Label, PragmaDesign, PragmaValue, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::synthgen::{self, Kernel, KernelTemplate, OracleParams, Sample, Split, Suite};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Generation-time scale knobs (counts per kernel).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenScale {
    /// Regression budget per source kernel.
    pub regre_source: usize,
    /// Regression budget per target kernel.
    pub regre_target: usize,
    /// Classification samples per regression sample.
    pub class_ratio: f64,
}

impl Default for GenScale {
    fn default() -> Self {
        // calibrated so the default 12-source suite lands near 9k source
        // regression samples with a ~4:1 classification ratio
        GenScale { regre_source: 750, regre_target: 220, class_ratio: 4.0 }
    }
}

/// All samples of one kernel plus the regression-subset indices.
#[derive(Debug, Clone)]
pub struct KernelData {
    pub kernel_id: String,
    pub samples: Vec<Sample>,
    /// Indices into `samples` forming the regression split (valid designs,
    /// capped at the per-kernel budget).
    pub regression: Vec<usize>,
}

/// A suite with sampled datasets, aligned by kernel index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub suite: Suite,
    pub per_kernel: Vec<KernelData>,
}

impl Dataset {
    pub fn kernel_data(&self, id: &str) -> Option<(&Kernel, &KernelData)> {
        let idx = self.suite.kernels.iter().position(|k| k.id == id)?;
        Some((&self.suite.kernels[idx], &self.per_kernel[idx]))
    }
}

/// Generates a suite and samples every kernel's dataset.
pub fn build_dataset(
    seed: u64,
    n_source: usize,
    n_target: usize,
    allow_no_targets: bool,
    scale: &GenScale,
) -> Result<Dataset> {
    let suite = synthgen::generate_suite(seed, n_source, n_target, allow_no_targets)?;
    let mut per_kernel = Vec::with_capacity(suite.kernels.len());
    for kernel in &suite.kernels {
        let budget = match kernel.split {
            Split::Source => scale.regre_source,
            Split::Target => scale.regre_target,
        };
        let want_class = ((budget as f64) * scale.class_ratio).ceil() as usize;
        let n = want_class.min(kernel.space_size as usize);
        let samples = synthgen::sample_dataset(kernel, n, seed)?;
        let regression: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.valid)
            .map(|(i, _)| i)
            .take(budget)
            .collect();
        per_kernel.push(KernelData {
            kernel_id: kernel.id.clone(),
            samples,
            regression,
        });
    }
    Ok(Dataset { suite, per_kernel })
}

/// Hex digest of the suite's oracle coefficients.
pub fn oracle_params_hash(suite: &Suite) -> String {
    let mut h = Sha256::new();
    for k in &suite.kernels {
        h.update(serde_json::to_vec(&k.oracle).expect("oracle serializes"));
    }
    let d = h.finalize();
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// -- serialized record schemas ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SuiteFile {
    v: u32,
    seed: u64,
    oracle_params_hash: String,
    motifs: Vec<synthgen::Motif>,
    kernels: Vec<KernelMeta>,
}

#[derive(Serialize, Deserialize)]
struct KernelMeta {
    id: String,
    split: Split,
    space_size: u64,
    parent_source: Option<String>,
    template: KernelTemplate,
    oracle: OracleParams,
}

#[derive(Serialize, Deserialize)]
struct KernelRecord {
    v: u32,
    id: String,
    graph: CdfGraph,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    v: u32,
    design: BTreeMap<String, PragmaValue>,
    perf: f64,
    util: [f64; 4],
    valid: bool,
    regre: bool,
}

/// Writes `suite.json` and per-kernel `kernel.jsonl` / `samples.jsonl`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let suite_file = SuiteFile {
        v: SCHEMA_VERSION,
        seed: data.suite.seed,
        oracle_params_hash: oracle_params_hash(&data.suite),
        motifs: data.suite.motifs.clone(),
        kernels: data
            .suite
            .kernels
            .iter()
            .map(|k| KernelMeta {
                id: k.id.clone(),
                split: k.split,
                space_size: k.space_size,
                parent_source: k.parent_source.clone(),
                template: k.template.clone(),
                oracle: k.oracle.clone(),
            })
            .collect(),
    };
    let suite_path = dir.join("suite.json");
    fs::write(&suite_path, serde_json::to_vec_pretty(&suite_file)?)
        .map_err(|e| Error::io(&suite_path, e))?;

    for (kernel, kd) in data.suite.kernels.iter().zip(&data.per_kernel) {
        let kdir = dir.join("kernels").join(&kernel.id);
        fs::create_dir_all(&kdir).map_err(|e| Error::io(&kdir, e))?;

        let kpath = kdir.join("kernel.jsonl");
        let record = KernelRecord {
            v: SCHEMA_VERSION,
            id: kernel.id.clone(),
            graph: kernel.graph.clone(),
        };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        fs::write(&kpath, line).map_err(|e| Error::io(&kpath, e))?;

        let spath = kdir.join("samples.jsonl");
        let file = fs::File::create(&spath).map_err(|e| Error::io(&spath, e))?;
        let mut w = std::io::BufWriter::new(file);
        let regre: std::collections::BTreeSet<usize> = kd.regression.iter().copied().collect();
        for (i, s) in kd.samples.iter().enumerate() {
            let rec = SampleRecord {
                v: SCHEMA_VERSION,
                design: s.design.to_map(&kernel.graph.pragma_slots),
                perf: s.label.perf,
                util: s.label.util,
                valid: s.valid,
                regre: regre.contains(&i),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&spath, e))?;
        }
        w.flush().map_err(|e| Error::io(&spath, e))?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let suite_path = dir.join("suite.json");
    let raw = fs::read(&suite_path).map_err(|e| Error::io(&suite_path, e))?;
    let suite_file: SuiteFile = serde_json::from_slice(&raw)?;
    if suite_file.v != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "suite.json schema v{}, expected v{SCHEMA_VERSION}",
            suite_file.v
        )));
    }

    let mut kernels = Vec::new();
    let mut per_kernel = Vec::new();
    for meta in suite_file.kernels {
        let kdir = dir.join("kernels").join(&meta.id);
        let kpath = kdir.join("kernel.jsonl");
        let file = fs::File::open(&kpath).map_err(|e| Error::io(&kpath, e))?;
        let line = BufReader::new(file)
            .lines()
            .next()
            .ok_or_else(|| Error::data(format!("{} is empty", kpath.display())))?
            .map_err(|e| Error::io(&kpath, e))?;
        let record: KernelRecord = serde_json::from_str(&line)?;
        if record.v != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "{}: schema v{}, expected v{SCHEMA_VERSION}",
                kpath.display(),
                record.v
            )));
        }
        record.graph.validate()?;
        let kernel = Kernel {
            id: meta.id.clone(),
            split: meta.split,
            template: meta.template,
            graph: record.graph,
            oracle: meta.oracle,
            space_size: meta.space_size,
            parent_source: meta.parent_source,
        };

        let spath = kdir.join("samples.jsonl");
        let file = fs::File::open(&spath).map_err(|e| Error::io(&spath, e))?;
        let mut samples = Vec::new();
        let mut regression = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&spath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            let design = PragmaDesign::from_map(&kernel.graph.pragma_slots, &rec.design)?;
            if rec.regre {
                regression.push(i);
            }
            samples.push(Sample {
                design,
                label: Label::new(rec.perf, rec.util)?,
                valid: rec.valid,
            });
        }
        per_kernel.push(KernelData { kernel_id: meta.id.clone(), samples, regression });
        kernels.push(kernel);
    }

    Ok(Dataset {
        suite: Suite { seed: suite_file.seed, motifs: suite_file.motifs, kernels },
        per_kernel,
    })
}

/// Deterministic content hash of every regular file under `dir`
/// (paths + bytes), for rerun identity checks.
pub fn dir_hash(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
        h.update([0xff]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scale() -> GenScale {
        GenScale { regre_source: 40, regre_target: 25, class_ratio: 4.0 }
    }

    #[test]
    fn save_load_round_trip() {
        let data = build_dataset(7, 3, 1, false, &tiny_scale()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();

        assert_eq!(
            serde_json::to_string(&data.suite).unwrap(),
            serde_json::to_string(&loaded.suite).unwrap()
        );
        for (a, b) in data.per_kernel.iter().zip(&loaded.per_kernel) {
            assert_eq!(a.kernel_id, b.kernel_id);
            assert_eq!(a.regression, b.regression);
            assert_eq!(
                serde_json::to_string(&a.samples).unwrap(),
                serde_json::to_string(&b.samples).unwrap()
            );
        }
    }

    #[test]
    fn reruns_are_hash_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(d1.path(), &build_dataset(9, 2, 1, false, &tiny_scale()).unwrap()).unwrap();
        save_dataset(d2.path(), &build_dataset(9, 2, 1, false, &tiny_scale()).unwrap()).unwrap();
        assert_eq!(dir_hash(d1.path()).unwrap(), dir_hash(d2.path()).unwrap());

        let d3 = tempfile::tempdir().unwrap();
        save_dataset(d3.path(), &build_dataset(10, 2, 1, false, &tiny_scale()).unwrap()).unwrap();
        assert_ne!(dir_hash(d1.path()).unwrap(), dir_hash(d3.path()).unwrap());
    }

    #[test]
    fn regression_split_is_valid_only_and_capped() {
        let data = build_dataset(5, 2, 1, false, &tiny_scale()).unwrap();
        for kd in &data.per_kernel {
            assert!(!kd.regression.is_empty());
            assert!(kd.regression.len() <= 40);
            for &i in &kd.regression {
                assert!(kd.samples[i].valid);
            }
        }
    }

    #[test]
    fn default_scale_matches_reference_statistics() {
        // the default 12-source suite should carry roughly 9k source
        // regression samples and a ~4:1 classification ratio, with
        // 100-350 regression samples per target kernel
        let data = build_dataset(1, 12, 3, false, &GenScale::default()).unwrap();
        let mut regre_source = 0usize;
        let mut class_source = 0usize;
        for (k, kd) in data.suite.kernels.iter().zip(&data.per_kernel) {
            match k.split {
                Split::Source => {
                    regre_source += kd.regression.len();
                    class_source += kd.samples.len();
                }
                Split::Target => {
                    let n = kd.regression.len();
                    assert!(
                        (100..=350).contains(&n),
                        "target {} has {n} regression samples",
                        k.id
                    );
                }
            }
        }
        assert!(
            (6000..=12000).contains(&regre_source),
            "source regression samples: {regre_source}"
        );
        let ratio = class_source as f64 / regre_source as f64;
        assert!((2.5..=5.5).contains(&ratio), "class:regre ratio {ratio}");
    }
}
