//! Run orchestration and output files: metrics CSV and a JSON manifest
//! that pins the resolved config and a content hash of every input.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SWEEPABLE};
use crate::dataset::{build_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::simulation::{run_experiment, MetricsTimeline};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER: &str = "round,hr_at_k,er_at_k,attack,defense,seed";

/// Git-style content hash: sha256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_row(out: &mut String, r: &MetricsRecord, sweep: Option<(&str, &str)>) {
    let _ = write!(
        out,
        "{},{:.6},{:.6},{},{},{}",
        r.round, r.hr_at_k, r.er_at_k, r.attack, r.defense, r.seed
    );
    if let Some((k, v)) = sweep {
        let _ = write!(out, ",{k},{v}");
    }
    out.push('\n');
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in records {
        csv_row(&mut out, r, None);
    }
    out
}

/// One CSV for a whole sweep, one group of rows per value.
pub fn sweep_csv(key: &str, groups: &[(String, Vec<MetricsRecord>)]) -> String {
    let mut out = format!("{HEADER},sweep_key,sweep_value\n");
    for (value, records) in groups {
        for r in records {
            csv_row(&mut out, r, Some((key, value)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Resolved config as ordered `[key, value]` pairs.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub dataset_hash: String,
    pub config_hash: String,
    /// Hash over the two hashes above.
    pub inputs_hash: String,
    pub sweep: Option<SweepSpec>,
    /// Output file name and its content hash.
    pub outputs: Vec<(String, String)>,
}

impl Manifest {
    fn new(config: &ExperimentConfig, dataset_bytes: &[u8], sweep: Option<SweepSpec>) -> Self {
        let pairs: Vec<(String, String)> = config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let text = config_text(config);
        let dataset_hash = content_hash(dataset_bytes);
        let config_hash = content_hash(text.as_bytes());
        let inputs_hash = content_hash(format!("{dataset_hash}\n{config_hash}\n").as_bytes());
        Manifest {
            config: pairs,
            seed: config.seed,
            dataset_hash,
            config_hash,
            inputs_hash,
            sweep,
            outputs: Vec::new(),
        }
    }

    pub fn to_config(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        for (k, v) in &self.config {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = String::from_utf8_lossy(&read(path)?).into_owned();
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write(&dir.join(MANIFEST_FILE), &text)?;
        Ok(())
    }
}

/// The resolved config as flat `key = value` text.
pub fn config_text(config: &ExperimentConfig) -> String {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn dataset_path(config: &ExperimentConfig) -> Result<&Path> {
    config
        .dataset_path
        .as_deref()
        .ok_or_else(|| Error::config("dataset_path: missing"))
}

/// Runs the data pipeline for `config`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    build_dataset(
        dataset_path(config)?,
        config.dataset_format,
        config.min_count,
        config.subsample_users,
        config.train_ratio,
        config.neg_ratio,
        config.seed,
    )
}

fn output_dir(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| config.output_path.clone())
        .ok_or_else(|| Error::config("output_path: missing"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Runs one experiment and writes `metrics.csv` and `manifest.json` into
/// `out` (or the configured output path).
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsTimeline> {
    config.validate()?;
    let bytes = read(dataset_path(config)?)?;
    let dataset = Arc::new(load_dataset(config)?);
    let timeline = run_experiment(config, dataset)?;
    let dir = output_dir(config, out)?;
    let csv = metrics_csv(&timeline.records);
    write(&dir.join(METRICS_FILE), &csv)?;
    let mut manifest = Manifest::new(config, &bytes, None);
    manifest.outputs.push((METRICS_FILE.into(), content_hash(csv.as_bytes())));
    manifest.write(&dir)?;
    Ok(timeline)
}

/// One run per value of `key`, all from the same base config.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
    out: Option<&Path>,
) -> Result<Vec<(String, MetricsTimeline)>> {
    if !SWEEPABLE.contains(&key) {
        return Err(Error::config(format!("{key}: not a sweepable key")));
    }
    if values.is_empty() {
        return Err(Error::config("sweep: no values given"));
    }
    config.validate()?;
    let bytes = read(dataset_path(config)?)?;
    let mut results = Vec::with_capacity(values.len());
    for v in values {
        let mut c = config.clone();
        c.set(key, v)?;
        c.validate()?;
        let dataset = Arc::new(load_dataset(&c)?);
        results.push((v.clone(), run_experiment(&c, dataset)?));
    }
    let dir = output_dir(config, out)?;
    let groups: Vec<(String, Vec<MetricsRecord>)> =
        results.iter().map(|(v, t)| (v.clone(), t.records.clone())).collect();
    let csv = sweep_csv(key, &groups);
    write(&dir.join(SWEEP_FILE), &csv)?;
    let spec = SweepSpec {
        key: key.to_string(),
        values: values.to_vec(),
    };
    let mut manifest = Manifest::new(config, &bytes, Some(spec));
    manifest.outputs.push((SWEEP_FILE.into(), content_hash(csv.as_bytes())));
    manifest.write(&dir)?;
    Ok(results)
}

/// Re-executes the run a manifest describes into `out`. Fails if the
/// dataset on disk no longer matches the recorded hash.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::read(manifest_path)?;
    let mut config = manifest.to_config()?;
    let bytes = read(dataset_path(&config)?)?;
    if content_hash(&bytes) != manifest.dataset_hash {
        return Err(Error::config("dataset_path: file content differs from the manifest"));
    }
    config.output_path = Some(out.to_path_buf());
    match &manifest.sweep {
        Some(s) => sweep(&config, &s.key, &s.values, Some(out)).map(|_| ()),
        None => run(&config, Some(out)).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: u64, hr: f64, er: f64) -> MetricsRecord {
        MetricsRecord {
            round,
            hr_at_k: hr,
            er_at_k: er,
            attack: "pamn".into(),
            defense: "ucsu".into(),
            seed: 7,
        }
    }

    #[test]
    fn csv_has_fixed_schema_and_six_decimals() {
        let csv = metrics_csv(&[record(0, 0.1, 0.0), record(5, 1.0 / 3.0, 0.25)]);
        assert_eq!(
            csv,
            "round,hr_at_k,er_at_k,attack,defense,seed\n\
             0,0.100000,0.000000,pamn,ucsu,7\n\
             5,0.333333,0.250000,pamn,ucsu,7\n"
        );
        let s = sweep_csv("xi", &[("0.01".into(), vec![record(0, 0.5, 0.5)])]);
        assert_eq!(
            s,
            "round,hr_at_k,er_at_k,attack,defense,seed,sweep_key,sweep_value\n\
             0,0.500000,0.500000,pamn,ucsu,7,xi,0.01\n"
        );
    }

    #[test]
    fn content_hash_matches_git_style_sha256() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn manifest_round_trips_config() {
        let mut c = ExperimentConfig::default();
        c.set("dataset_path", "data.dat").unwrap();
        c.set("attack", "pamn").unwrap();
        c.set("xi", "0.05").unwrap();
        let m = Manifest::new(&c, b"1::2::5::0\n", None);
        let json = serde_json::to_string(&m).unwrap();
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_config().unwrap().to_pairs(), c.to_pairs());
    }

    #[test]
    fn sweep_rejects_bad_keys_and_empty_lists() {
        let mut c = ExperimentConfig::default();
        c.set("dataset_path", "data.dat").unwrap();
        assert!(sweep(&c, "attack", &["pamn".into()], None).is_err());
        assert!(sweep(&c, "xi", &[], None).is_err());
    }
}
