//! Pluggable separation backends: built-in synthetic separators for
//! desk-scale runs and a file-based external-process contract for real
//! models.
//!
//! External contract: the command template is rendered ({mix}, {out_dir},
//! {num_sources}, optional {model}) and executed; the process must exit 0 and
//! write exactly M WAV files named `<mix-stem>.s1.wav` .. `.sM.wav` into
//! {out_dir} at the input sample rate and length.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, write_wav, WavEncoding, Waveform};
use crate::consistency::SourceSet;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestMeta, ManifestRecord};

/// Default wall-clock limit for one external separation, seconds.
pub const DEFAULT_TIMEOUT_S: u64 = 600;

/// Which separator implementation to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Returns M copies of the mixture; the degenerate case mSCM exists to
    /// catch.
    Identity,
    /// Returns the reference sources exactly.
    Oracle,
    /// Returns each reference plus seeded white noise orthogonalized against
    /// it and scaled so the per-source SI-SNR equals `noise_snr_db`.
    NoisyOracle { noise_snr_db: f64, seed: u64 },
    External {
        /// Argument vector with {mix}, {out_dir}, {num_sources}, {model}
        /// placeholders.
        command: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_token: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<u64>,
    },
}

impl BackendSpec {
    /// Short human-readable token identifying the backend state, used in
    /// reports.
    pub fn describe(&self) -> String {
        match self {
            BackendSpec::Identity => "identity".into(),
            BackendSpec::Oracle => "oracle".into(),
            BackendSpec::NoisyOracle { noise_snr_db, seed } => {
                format!("noisy_oracle@{noise_snr_db}dB(seed={seed})")
            }
            BackendSpec::External { model_token, .. } => format!(
                "external(model={})",
                model_token.as_deref().unwrap_or("-")
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BackendSpec::External { command, .. } = self {
            if command.is_empty() {
                return Err(Error::Config("external command must not be empty".into()));
            }
            let joined = command.join(" ");
            for ph in ["{mix}", "{out_dir}", "{num_sources}"] {
                if !joined.contains(ph) {
                    return Err(Error::Config(format!(
                        "external command is missing the {ph} placeholder"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn derive_seed(seed: u64, id: &str, source_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.update((source_index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn noisy_copy(reference: &Waveform, noise_snr_db: f64, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = reference.len();
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s: Vec<f64> = reference.samples().iter().map(|&v| v as f64).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let dot: f64 = s.iter().zip(&noise).map(|(a, b)| a * b).sum();
    // Remove the component along the reference so the achieved SI-SNR equals
    // the requested value instead of just approximating it.
    let proj = dot / ss;
    let perp: Vec<f64> = noise.iter().zip(&s).map(|(nv, sv)| nv - proj * sv).collect();
    let perp_energy: f64 = perp.iter().map(|v| v * v).sum();
    let target_energy = ss / 10f64.powf(noise_snr_db / 10.0);
    let scale = (target_energy / perp_energy).sqrt();
    let samples: Vec<f32> = s
        .iter()
        .zip(&perp)
        .map(|(sv, pv)| (sv + scale * pv) as f32)
        .collect();
    Waveform::new(samples, reference.sample_rate_hz())
}

/// Run one backend on one mixture. `id` names the mixture; it seeds noisy
/// backends and becomes the output stem for external ones.
pub fn separate(
    backend: &BackendSpec,
    id: &str,
    mix: &Waveform,
    refs: Option<&SourceSet>,
    num_sources: usize,
) -> Result<SourceSet> {
    match backend {
        BackendSpec::Identity => {
            SourceSet::new(vec![mix.clone(); num_sources])
        }
        BackendSpec::Oracle => {
            let refs = refs.ok_or_else(|| {
                Error::Contract("oracle backend requires reference sources".into())
            })?;
            if refs.len() != num_sources {
                return Err(Error::Contract(format!(
                    "oracle backend got {} references, expected {num_sources}",
                    refs.len()
                )));
            }
            Ok(refs.clone())
        }
        BackendSpec::NoisyOracle { noise_snr_db, seed } => {
            let refs = refs.ok_or_else(|| {
                Error::Contract("noisy_oracle backend requires reference sources".into())
            })?;
            if refs.len() != num_sources {
                return Err(Error::Contract(format!(
                    "noisy_oracle backend got {} references, expected {num_sources}",
                    refs.len()
                )));
            }
            let sources = refs
                .sources()
                .iter()
                .enumerate()
                .map(|(i, r)| noisy_copy(r, *noise_snr_db, derive_seed(*seed, id, i)))
                .collect::<Result<Vec<_>>>()?;
            SourceSet::new(sources)
        }
        BackendSpec::External {
            command,
            model_token,
            timeout_s,
        } => {
            let work = std::env::temp_dir().join(format!(
                "consep-sep-{}-{}",
                std::process::id(),
                derive_seed(0, id, 0)
            ));
            fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
            let mix_path = work.join(format!("{id}.wav"));
            write_wav(&mix_path, mix, WavEncoding::Float32)?;
            let result = run_external(
                command,
                model_token.as_deref(),
                *timeout_s,
                &mix_path,
                &work,
                num_sources,
                mix,
            );
            let _ = fs::remove_dir_all(&work);
            result
        }
    }
}

fn run_external(
    command: &[String],
    model_token: Option<&str>,
    timeout_s: Option<u64>,
    mix_path: &Path,
    out_dir: &Path,
    num_sources: usize,
    mix: &Waveform,
) -> Result<SourceSet> {
    let rendered: Vec<String> = command
        .iter()
        .map(|arg| {
            arg.replace("{mix}", &mix_path.display().to_string())
                .replace("{out_dir}", &out_dir.display().to_string())
                .replace("{num_sources}", &num_sources.to_string())
                .replace("{model}", model_token.unwrap_or(""))
        })
        .collect();
    let (program, args) = rendered
        .split_first()
        .ok_or_else(|| Error::Config("external command must not be empty".into()))?;

    let mut child = Command::new(program)
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Backend(format!("failed to spawn {program}: {e}")))?;

    let deadline = Instant::now() + Duration::from_secs(timeout_s.unwrap_or(DEFAULT_TIMEOUT_S));
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Backend(format!(
                        "external separator timed out: {}",
                        rendered.join(" ")
                    )));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(Error::Backend(format!("wait failed: {e}"))),
        }
    };
    let output = child
        .wait_with_output()
        .map_err(|e| Error::Backend(format!("collect failed: {e}")))?;
    if !status.success() {
        return Err(Error::Backend(format!(
            "external separator exited with {status}: stderr: {}",
            String::from_utf8_lossy(&output.stderr)
        )));
    }

    let stem = mix_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mix");
    let mut sources = Vec::with_capacity(num_sources);
    for i in 1..=num_sources {
        let p = out_dir.join(format!("{stem}.s{i}.wav"));
        let mut w = read_wav(&p).map_err(|e| {
            Error::Backend(format!("missing or unreadable output {}: {e}", p.display()))
        })?;
        if w.sample_rate_hz() != mix.sample_rate_hz() {
            return Err(Error::Backend(format!(
                "output {} has rate {}, expected {}",
                p.display(),
                w.sample_rate_hz(),
                mix.sample_rate_hz()
            )));
        }
        // Exactly-equal length is the contract; tolerate a single-sample
        // shortfall by zero-padding, reject anything worse.
        if w.len() + 1 == mix.len() {
            let mut samples = w.samples().to_vec();
            samples.push(0.0);
            w = Waveform::new(samples, w.sample_rate_hz())?;
        }
        if w.len() != mix.len() {
            return Err(Error::Backend(format!(
                "output {} has {} samples, expected {}",
                p.display(),
                w.len(),
                mix.len()
            )));
        }
        sources.push(w);
    }
    SourceSet::new(sources)
}

/// Run a backend over every mixture in a manifest, writing
/// `<out_dir>/<id>.s1.wav` .. `.sM.wav`. Failures are recorded per id without
/// aborting the batch. With `skip_existing`, mixtures whose outputs are all
/// present are not recomputed (used by resume).
pub fn separate_batch(
    backend: &BackendSpec,
    manifest: &Manifest,
    out_dir: impl AsRef<Path>,
    num_sources: usize,
    parallelism: usize,
    skip_existing: bool,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;

    let mut results: Vec<(usize, ManifestRecord)> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(idx, rec)| {
                let out_rec = separate_one(backend, manifest, rec, out_dir, num_sources, skip_existing);
                (idx, out_rec)
            })
            .collect()
    });
    // Merge deterministically by manifest order regardless of scheduling.
    results.sort_by_key(|(idx, _)| *idx);

    let mut out = Manifest::new(ManifestMeta::new("separation"), out_dir);
    out.meta.config = Some(serde_json::json!({ "backend": backend.describe() }));
    out.records = results.into_iter().map(|(_, r)| r).collect();
    Ok(out)
}

fn separate_one(
    backend: &BackendSpec,
    manifest: &Manifest,
    rec: &ManifestRecord,
    out_dir: &Path,
    num_sources: usize,
    skip_existing: bool,
) -> ManifestRecord {
    let sep_paths: Vec<PathBuf> = (1..=num_sources)
        .map(|i| PathBuf::from(format!("{}.s{i}.wav", rec.id)))
        .collect();

    let mut out_rec = ManifestRecord::new(rec.id.clone(), manifest.resolve(&rec.mix));
    out_rec.refs = rec.refs.iter().map(|p| manifest.resolve(p)).collect();
    out_rec.seps = sep_paths.clone();

    if skip_existing && sep_paths.iter().all(|p| out_dir.join(p).exists()) {
        out_rec.status = Some("ok".into());
        return out_rec;
    }

    let run = || -> Result<()> {
        let mix = read_wav(manifest.resolve(&rec.mix))?;
        let refs = if rec.refs.is_empty() {
            None
        } else {
            let sources = rec
                .refs
                .iter()
                .map(|p| read_wav(manifest.resolve(p)))
                .collect::<Result<Vec<_>>>()?;
            Some(SourceSet::new(sources)?)
        };
        let seps = separate(backend, &rec.id, &mix, refs.as_ref(), num_sources)?;
        for (p, w) in sep_paths.iter().zip(seps.sources()) {
            write_wav(out_dir.join(p), w, WavEncoding::Float32)?;
        }
        Ok(())
    };

    match run() {
        Ok(()) => out_rec.status = Some("ok".into()),
        Err(e) => out_rec.status = Some(format!("failed: {e}")),
    }
    out_rec
}
