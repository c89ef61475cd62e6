//! Two-speaker mixture simulation: clamp each source to a fixed duration,
//! rescale to a random relative SNR in [0, 5] dB, and sum. References are the
//! scaled signals actually present in the mix, so evaluation compares against
//! what the separators really saw.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{clamp_or_pad, read_wav, resample, write_wav, WavEncoding, Waveform};
use crate::consistency::SourceSet;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestMeta, ManifestRecord};
use crate::metrics::MIN_ENERGY;

/// Recipe for one synthetic mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub id: String,
    pub src_paths: [PathBuf; 2],
    /// First-listed source is snr_db louder than (or equal to) the second.
    pub snr_db: f64,
    pub duration_s: f64,
    pub rate_hz: u32,
    pub offset_seed: u64,
}

/// One line of a source-list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
}

/// Read a line-delimited source list ({path, speaker_id, gender?} per line).
pub fn read_source_list(path: impl AsRef<Path>) -> Result<Vec<SourceEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: SourceEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_source_list(entries: &[SourceEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("serializable entry"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Build one mixture: load, resample, clamp both sources, scale the second so
/// the energy ratio matches `snr_db`, and sum. If the mix peak exceeds 1 all
/// three signals are scaled by the same factor, which leaves every SNR and
/// SI-SNR relationship intact.
pub fn make_mixture(spec: &MixSpec) -> Result<(Waveform, SourceSet)> {
    let mut prepared = Vec::with_capacity(2);
    for (i, p) in spec.src_paths.iter().enumerate() {
        let w = read_wav(p)?;
        let w = resample(&w, spec.rate_hz)?;
        // Each source draws its own clamp offset from a derived seed.
        let w = clamp_or_pad(&w, spec.duration_s, spec.offset_seed.wrapping_add(i as u64))?;
        if w.energy() <= MIN_ENERGY {
            return Err(Error::DegenerateSignal(format!(
                "source {} is silent after clamping",
                p.display()
            )));
        }
        prepared.push(w);
    }

    let e1 = prepared[0].energy();
    let e2 = prepared[1].energy();
    // 10 log10(e1 / (g^2 e2)) = snr_db
    let gain = (e1 / (e2 * 10f64.powf(spec.snr_db / 10.0))).sqrt() as f32;
    let s1 = prepared[0].clone();
    let s2 = prepared[1].scaled(gain)?;

    let sum: Vec<f32> = s1
        .samples()
        .iter()
        .zip(s2.samples())
        .map(|(&a, &b)| a + b)
        .collect();
    let peak = sum.iter().fold(0.0f32, |m, &s| m.max(s.abs()));

    let (r1, r2) = if peak > 1.0 {
        let norm = 1.0 / peak;
        (s1.scaled(norm)?, s2.scaled(norm)?)
    } else {
        (s1, s2)
    };
    // The mix is recomputed as the sample-wise sum of the final references,
    // so mix - refs[0] - refs[1] is exactly zero.
    let mix_samples: Vec<f32> = r1
        .samples()
        .iter()
        .zip(r2.samples())
        .map(|(&a, &b)| a + b)
        .collect();
    let mix = Waveform::new(mix_samples, spec.rate_hz)?;
    Ok((mix, SourceSet::new(vec![r1, r2])?))
}

/// Options for [`build_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub snr_range_db: (f64, f64),
    pub duration_s: f64,
    pub rate_hz: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 0,
            snr_range_db: (0.0, 5.0),
            duration_s: 4.0,
            rate_hz: 8000,
            seed: 0,
        }
    }
}

/// Deterministically sample `count` distinct-speaker pairs, synthesize the
/// mixtures, and write mix/s1/s2 WAVs plus a manifest under `out_dir`.
pub fn build_dataset(
    sources: &[SourceEntry],
    cfg: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let speakers: HashSet<&str> = sources.iter().map(|s| s.speaker_id.as_str()).collect();
    if cfg.count > 0 && speakers.len() < 2 {
        return Err(Error::Capacity(
            "source list must contain at least two distinct speakers".into(),
        ));
    }
    for sub in ["mix", "s1", "s2"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Manifest::new(ManifestMeta::new("dataset"), out_dir);
    manifest.meta.config = Some(serde_json::to_value(cfg).expect("serializable config"));

    for i in 0..cfg.count {
        let id = format!("mix{i:05}");
        // Rejection-sample a distinct-speaker pair.
        let (a, b) = loop {
            let a = sources.choose(&mut rng).expect("non-empty sources");
            let b = sources.choose(&mut rng).expect("non-empty sources");
            if a.speaker_id != b.speaker_id {
                break (a, b);
            }
        };
        let snr_db = rng.gen_range(cfg.snr_range_db.0..=cfg.snr_range_db.1);
        let offset_seed = rng.gen::<u64>();
        let spec = MixSpec {
            id: id.clone(),
            src_paths: [a.path.clone(), b.path.clone()],
            snr_db,
            duration_s: cfg.duration_s,
            rate_hz: cfg.rate_hz,
            offset_seed,
        };
        let (mix, refs) = make_mixture(&spec)?;

        let rel_mix = PathBuf::from(format!("mix/{id}.wav"));
        let rel_s1 = PathBuf::from(format!("s1/{id}.wav"));
        let rel_s2 = PathBuf::from(format!("s2/{id}.wav"));
        write_wav(out_dir.join(&rel_mix), &mix, WavEncoding::Float32)?;
        write_wav(out_dir.join(&rel_s1), &refs.sources()[0], WavEncoding::Float32)?;
        write_wav(out_dir.join(&rel_s2), &refs.sources()[1], WavEncoding::Float32)?;

        let mut rec = ManifestRecord::new(id, rel_mix);
        rec.refs = vec![rel_s1, rel_s2];
        rec.speakers = Some(vec![a.speaker_id.clone(), b.speaker_id.clone()]);
        rec.genders = Some(vec![
            a.gender.clone().unwrap_or_default(),
            b.gender.clone().unwrap_or_default(),
        ]);
        rec.snr_db = Some(snr_db);
        rec.offset_seed = Some(offset_seed);
        manifest.records.push(rec);
    }

    crate::manifest::write_manifest(&manifest, out_dir.join("manifest"))?;
    Ok(manifest)
}
