//! JSON-lines trajectory datasets: one file per episode, one step per line,
//! plus a manifest with per-file digests.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use phwm_core::envsim::{rollout_episode, EnvSpec, HeldRandomActions, StepRecord, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult};

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub name: String,
    pub lines: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env: String,
    pub seed: u64,
    pub dt: f64,
    pub actuator_map: Vec<usize>,
    pub policy: String,
    pub files: Vec<DatasetFile>,
}

/// Random-action episodes with held actions.
pub fn random_episodes(spec: &EnvSpec, episodes: usize, steps: usize, hold: usize, rng: &mut ChaCha8Rng) -> CliResult<Vec<Trajectory>> {
    (0..episodes)
        .map(|_| {
            let mut pol = HeldRandomActions::new(spec.d_a(), hold);
            Ok(rollout_episode(spec, steps, rng, |_, r| pol.next(r))?)
        })
        .collect()
}

pub fn write_jsonl(path: &Path, traj: &Trajectory) -> CliResult<DatasetFile> {
    let mut buf = Vec::new();
    for s in &traj.steps {
        serde_json::to_writer(&mut buf, s).map_err(|e| CliError::Format { what: "step".into(), msg: e.to_string() })?;
        buf.push(b'\n');
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| CliError::io(path, e))?);
    f.write_all(&buf).map_err(|e| CliError::io(path, e))?;
    f.flush().map_err(|e| CliError::io(path, e))?;
    Ok(DatasetFile {
        name: path.file_name().unwrap().to_string_lossy().into_owned(),
        lines: traj.steps.len(),
        sha256: hex(&Sha256::digest(&buf)),
    })
}

pub fn read_jsonl(path: &Path) -> CliResult<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Format {
            what: format!("{} line {}", path.display(), i + 1),
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `episodes` random-policy episodes to `dir`.
pub fn generate_dataset(
    spec: &EnvSpec,
    dir: &Path,
    seed: u64,
    episodes: usize,
    steps: usize,
    hold: usize,
) -> CliResult<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = random_episodes(spec, episodes, steps, hold, &mut rng)?;
    let mut files = Vec::with_capacity(trajs.len());
    for (i, tr) in trajs.iter().enumerate() {
        files.push(write_jsonl(&dir.join(format!("episode_{i:04}.jsonl")), tr)?);
    }
    let manifest = DatasetManifest {
        env: spec.name().to_string(),
        seed,
        dt: spec.dt,
        actuator_map: spec.actuator_map.clone(),
        policy: format!("held-random(max_hold={hold})"),
        files,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads every episode listed in the manifest, verifying digests.
pub fn load_dataset(dir: &Path, spec: &EnvSpec) -> CliResult<Vec<Trajectory>> {
    let manifest: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    if manifest.env != spec.name() {
        return Err(phwm_core::Error::Version(format!("dataset is for {}, config wants {}", manifest.env, spec.name())).into());
    }
    let mut out = Vec::with_capacity(manifest.files.len());
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if hex(&Sha256::digest(&bytes)) != f.sha256 {
            return Err(CliError::Format { what: path.display().to_string(), msg: "digest mismatch".into() });
        }
        out.push(Trajectory { dt: manifest.dt, actuator_map: manifest.actuator_map.clone(), steps: read_jsonl(&path)? });
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let tmp = tmp_path(path);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?);
        serde_json::to_writer(&mut f, value).map_err(|e| CliError::Format { what: path.display().to_string(), msg: e.to_string() })?;
        f.flush().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::Format { what: path.display().to_string(), msg: e.to_string() })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
