//! The iterative adaptation loop over two separation backends.
//!
//! Each iteration separates the unlabeled mixtures with both backends, scores
//! agreement, selects high-confidence pseudo-labeled data, and (variant
//! depending) adapts one or both backends via a trainer contract. Every stage
//! persists its outputs under `work_dir/iter<k>/` and records completion in
//! an atomically written checkpoint, so a killed run resumes from the last
//! finished stage.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::read_wav;
use crate::consistency::{build_sci, SciTuple, SourceSet};
use crate::cps::{select, SelectionConfig};
use crate::error::{Error, Result};
use crate::fusion::hkf_rewrite;
use crate::manifest::{read_manifest, write_manifest, Manifest, ManifestMeta, Origin};
use crate::separators::{separate_batch, BackendSpec};

/// Which flavor of the iteration loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SctVariant {
    /// Select once, adapt both backends on the primary's pseudo labels.
    Sct1,
    /// Cross-knowledge: adapt the reviewer on the primary's pseudo labels,
    /// re-separate, rewrite the selected tuples to the adapted reviewer's
    /// outputs, then adapt the primary on those.
    Sct2,
    /// Sct2 plus a second selection pass on scores recomputed against the
    /// adapted reviewer's outputs.
    Sct3,
}

/// How a backend gets adapted between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    /// Command template with {train_manifest}, {dev_manifest}, {model_in},
    /// {model_out} placeholders; must exit 0 and leave a nonempty token at
    /// {model_out}.
    External { command: Vec<String> },
    /// Desk-scale stand-in: raises a noisy_oracle backend's SNR by a fixed
    /// step per adaptation, emulating a model that improves with training.
    Anneal { step_db: f64 },
}

/// Full loop configuration, mirrored field-for-field by the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SctConfig {
    pub variant: SctVariant,
    pub iterations: u32,
    #[serde(default = "default_num_sources")]
    pub num_sources: usize,
    /// One selection config per iteration.
    pub selection: Vec<SelectionConfig>,
    /// Sct3's second-stage selection; defaults to `selection` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_stage_selection: Option<Vec<SelectionConfig>>,
    pub primary_backend: BackendSpec,
    pub reviewer_backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer_primary: Option<TrainerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer_reviewer: Option<TrainerSpec>,
    pub source_train_manifest: PathBuf,
    pub unlabeled_train_manifest: PathBuf,
    pub unlabeled_dev_manifest: PathBuf,
    pub work_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_num_sources() -> usize {
    2
}

fn default_parallelism() -> usize {
    1
}

impl SctConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.selection.len() != self.iterations as usize {
            return Err(Error::Config(format!(
                "selection list has {} entries for {} iterations",
                self.selection.len(),
                self.iterations
            )));
        }
        for s in &self.selection {
            s.validate()?;
        }
        if let Some(second) = &self.second_stage_selection {
            if second.len() != self.iterations as usize {
                return Err(Error::Config(
                    "second_stage_selection length must match iterations".into(),
                ));
            }
        }
        self.primary_backend.validate()?;
        self.reviewer_backend.validate()?;
        if matches!(self.variant, SctVariant::Sct2 | SctVariant::Sct3)
            && self.trainer_primary.is_some()
            && self.trainer_reviewer.is_none()
        {
            return Err(Error::Config(
                "sct2/sct3 require a reviewer trainer when a primary trainer is set".into(),
            ));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable config");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<SctConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }
}

/// What one iteration produced, for reporting and the quantity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub train_scored: usize,
    pub train_selected: usize,
    pub dev_scored: usize,
    pub dev_selected: usize,
    pub mean_scm_selected: Option<f64>,
    pub mean_mscm_selected: Option<f64>,
    pub mean_scm_rejected: Option<f64>,
    pub mean_mscm_rejected: Option<f64>,
    pub d_train_manifest: PathBuf,
    pub d_dev_manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_dev_manifest: Option<PathBuf>,
    pub primary_model: String,
    pub reviewer_model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    completed: Vec<String>,
    primary_backend: BackendSpec,
    reviewer_backend: BackendSpec,
    reports: Vec<IterationReport>,
}

const CHECKPOINT_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Dev,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }

    const ALL: [Split; 2] = [Split::Train, Split::Dev];
}

struct Runner {
    cfg: SctConfig,
    ckpt: Checkpoint,
    unlabeled: HashMap<&'static str, Manifest>,
    stages_run: usize,
    limit: Option<usize>,
}

/// Run the configured loop to completion, resuming from any existing
/// checkpoint in the work dir (refused if the config changed).
pub fn run_sct(cfg: &SctConfig) -> Result<Vec<IterationReport>> {
    let (reports, completed) = run_sct_with_limit(cfg, None)?;
    debug_assert!(completed);
    Ok(reports)
}

/// As [`run_sct`] but stops after executing `limit` not-yet-completed stages.
/// Returns the reports so far and whether the whole run finished. A limit of
/// zero validates and checkpoints without doing work.
pub fn run_sct_with_limit(
    cfg: &SctConfig,
    limit: Option<usize>,
) -> Result<(Vec<IterationReport>, bool)> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.work_dir).map_err(|e| Error::io(&cfg.work_dir, e))?;

    let hash = cfg.hash();
    let ckpt_path = cfg.work_dir.join(CHECKPOINT_FILE);
    let ckpt = if ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if ckpt.config_hash != hash {
            return Err(Error::Checkpoint(
                "work dir belongs to a different configuration; refusing to resume".into(),
            ));
        }
        ckpt
    } else {
        let config_json = serde_json::to_string_pretty(cfg).expect("serializable config");
        atomic_write(&cfg.work_dir.join(CONFIG_FILE), config_json.as_bytes())?;
        Checkpoint {
            config_hash: hash,
            completed: Vec::new(),
            primary_backend: cfg.primary_backend.clone(),
            reviewer_backend: cfg.reviewer_backend.clone(),
            reports: Vec::new(),
        }
    };

    let mut unlabeled = HashMap::new();
    unlabeled.insert("train", read_manifest(&cfg.unlabeled_train_manifest)?);
    unlabeled.insert("dev", read_manifest(&cfg.unlabeled_dev_manifest)?);

    let mut runner = Runner {
        cfg: cfg.clone(),
        ckpt,
        unlabeled,
        stages_run: 0,
        limit,
    };
    let completed = runner.run()?;
    Ok((runner.ckpt.reports, completed))
}

/// Continue a previously started run from its work dir.
pub fn resume(work_dir: impl AsRef<Path>) -> Result<Vec<IterationReport>> {
    let work_dir = work_dir.as_ref();
    let cfg_path = work_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: SctConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt stored config: {e}")))?;
    run_sct(&cfg)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

impl Runner {
    fn run(&mut self) -> Result<bool> {
        let stages: Vec<&'static str> = match self.cfg.variant {
            SctVariant::Sct1 => vec![
                "sep_primary",
                "sep_reviewer",
                "score",
                "select",
                "adapt_primary",
                "adapt_reviewer",
                "report",
            ],
            SctVariant::Sct2 => vec![
                "sep_primary",
                "sep_reviewer",
                "score",
                "select",
                "adapt_reviewer",
                "resep_reviewer",
                "hkf",
                "adapt_primary",
                "report",
            ],
            SctVariant::Sct3 => vec![
                "sep_primary",
                "sep_reviewer",
                "score",
                "select",
                "adapt_reviewer",
                "resep_reviewer",
                "rescore",
                "reselect",
                "hkf",
                "adapt_primary",
                "report",
            ],
        };

        for k in 0..self.cfg.iterations {
            for stage in &stages {
                let key = format!("iter{k}/{stage}");
                if self.ckpt.completed.iter().any(|c| c == &key) {
                    continue;
                }
                if let Some(limit) = self.limit {
                    if self.stages_run >= limit {
                        return Ok(false);
                    }
                }
                log::info!("running stage {key}");
                self.run_stage(k, stage)?;
                self.ckpt.completed.push(key);
                self.save_checkpoint()?;
                self.stages_run += 1;
            }
        }
        Ok(true)
    }

    fn save_checkpoint(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.ckpt).expect("serializable checkpoint");
        atomic_write(&self.cfg.work_dir.join(CHECKPOINT_FILE), json.as_bytes())
    }

    fn iter_dir(&self, k: u32) -> PathBuf {
        self.cfg.work_dir.join(format!("iter{k}"))
    }

    fn run_stage(&mut self, k: u32, stage: &str) -> Result<()> {
        match stage {
            "sep_primary" => self.stage_separate(k, "sep_primary", &self.ckpt.primary_backend.clone()),
            "sep_reviewer" => {
                self.stage_separate(k, "sep_reviewer", &self.ckpt.reviewer_backend.clone())
            }
            "resep_reviewer" => {
                self.stage_separate(k, "resep_reviewer", &self.ckpt.reviewer_backend.clone())
            }
            "score" => self.stage_score(k, "sep_primary", "sep_reviewer", "scored"),
            "rescore" => self.stage_score(k, "sep_primary", "resep_reviewer", "rescored"),
            "select" => {
                let sel = self.cfg.selection[k as usize].clone();
                self.stage_select(k, "scored", "d_set", &sel)
            }
            "reselect" => {
                let sel = self
                    .cfg
                    .second_stage_selection
                    .as_ref()
                    .map(|s| s[k as usize].clone())
                    .unwrap_or_else(|| self.cfg.selection[k as usize].clone());
                self.stage_select(k, "rescored", "d2_set", &sel)
            }
            "hkf" => self.stage_hkf(k),
            "adapt_primary" => self.stage_adapt(k, true),
            "adapt_reviewer" => self.stage_adapt(k, false),
            "report" => self.stage_report(k),
            other => Err(Error::Checkpoint(format!("unknown stage {other}"))),
        }
    }

    fn stage_separate(&mut self, k: u32, name: &str, backend: &BackendSpec) -> Result<()> {
        let dir = self.iter_dir(k);
        for split in Split::ALL {
            let out_dir = dir.join(format!("{name}_{}", split.name()));
            let manifest = &self.unlabeled[split.name()];
            // skip_existing lets a rerun after a mid-stage kill redo only the
            // missing mixtures.
            let mut out = separate_batch(
                backend,
                manifest,
                &out_dir,
                self.cfg.num_sources,
                self.cfg.parallelism,
                true,
            )?;
            // The manifest file lives one level above the output files, so
            // rebase the sep paths onto the iteration dir.
            let sub = PathBuf::from(format!("{name}_{}", split.name()));
            for rec in &mut out.records {
                rec.seps = rec.seps.iter().map(|p| sub.join(p)).collect();
            }
            out.base_dir = dir.clone();
            write_manifest(&out, dir.join(format!("{name}_{}.jsonl", split.name())))?;
        }
        Ok(())
    }

    fn stage_score(
        &mut self,
        k: u32,
        primary_name: &str,
        reviewer_name: &str,
        out_name: &str,
    ) -> Result<()> {
        use rayon::prelude::*;
        let dir = self.iter_dir(k);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.parallelism.max(1))
            .build()
            .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;

        for split in Split::ALL {
            let p_man = read_manifest(dir.join(format!("{primary_name}_{}.jsonl", split.name())))?;
            let r_man =
                read_manifest(dir.join(format!("{reviewer_name}_{}.jsonl", split.name())))?;
            let unlabeled = &self.unlabeled[split.name()];

            let mut results: Vec<(usize, crate::manifest::ManifestRecord)> =
                pool.install(|| {
                    unlabeled
                        .records
                        .par_iter()
                        .enumerate()
                        .map(|(idx, rec)| {
                            (idx, score_one(rec, unlabeled, &p_man, &r_man))
                        })
                        .collect()
                });
            results.sort_by_key(|(idx, _)| *idx);

            let mut out = Manifest::new(ManifestMeta::new("scored"), &dir);
            out.meta.iteration = Some(k);
            out.records = results.into_iter().map(|(_, r)| r).collect();
            write_manifest(&out, dir.join(format!("{out_name}_{}.jsonl", split.name())))?;
        }
        Ok(())
    }

    fn stage_select(
        &mut self,
        k: u32,
        scored_name: &str,
        out_name: &str,
        selection: &SelectionConfig,
    ) -> Result<()> {
        let dir = self.iter_dir(k);
        for split in Split::ALL {
            let scored = read_manifest(dir.join(format!("{scored_name}_{}.jsonl", split.name())))?;
            let tuples: Vec<SciTuple> = scored
                .records
                .iter()
                .filter(|r| r.is_ok() && r.scm_db.is_some())
                .map(SciTuple::from_record)
                .collect::<Result<_>>()?;

            let selected = if matches!(selection, SelectionConfig::Oracle { .. }) {
                let (gt, seps) = self.load_oracle_sets(split, &scored, &tuples)?;
                select(selection, &tuples, Some(&gt), Some(&seps))?
            } else {
                select(selection, &tuples, None, None)?
            };
            let selected_ids: std::collections::HashSet<&str> =
                selected.iter().map(|t| t.id.as_str()).collect();

            let mut out = scored.clone();
            out.meta.kind = out_name.to_string();
            out.meta.iteration = Some(k);
            out.meta.config =
                Some(serde_json::to_value(selection).expect("serializable selection"));
            for rec in &mut out.records {
                if rec.is_ok() && rec.scm_db.is_some() {
                    rec.selected = Some(selected_ids.contains(rec.id.as_str()));
                }
            }
            write_manifest(&out, dir.join(format!("{out_name}_{}.jsonl", split.name())))?;
        }
        Ok(())
    }

    fn load_oracle_sets(
        &self,
        split: Split,
        scored: &Manifest,
        tuples: &[SciTuple],
    ) -> Result<(HashMap<String, SourceSet>, HashMap<String, SourceSet>)> {
        let unlabeled = &self.unlabeled[split.name()];
        let mut gt = HashMap::new();
        let mut seps = HashMap::new();
        for t in tuples {
            let rec = unlabeled
                .records
                .iter()
                .find(|r| r.id == t.id)
                .ok_or_else(|| Error::Lookup(format!("no dataset record for id {:?}", t.id)))?;
            if rec.refs.is_empty() {
                return Err(Error::Lookup(format!(
                    "oracle selection needs ground-truth refs for id {:?}",
                    t.id
                )));
            }
            let gt_sources = rec
                .refs
                .iter()
                .map(|p| read_wav(unlabeled.resolve(p)))
                .collect::<Result<Vec<_>>>()?;
            gt.insert(t.id.clone(), SourceSet::new(gt_sources)?);
            let sep_sources = t
                .seps
                .iter()
                .map(|p| read_wav(scored.resolve(p)))
                .collect::<Result<Vec<_>>>()?;
            seps.insert(t.id.clone(), SourceSet::new(sep_sources)?);
        }
        Ok((gt, seps))
    }

    fn stage_hkf(&mut self, k: u32) -> Result<()> {
        let dir = self.iter_dir(k);
        let selected_name = match self.cfg.variant {
            SctVariant::Sct3 => "d2_set",
            _ => "d_set",
        };
        for split in Split::ALL {
            let d_set = read_manifest(dir.join(format!("{selected_name}_{}.jsonl", split.name())))?;
            let resep =
                read_manifest(dir.join(format!("resep_reviewer_{}.jsonl", split.name())))?;
            let reviewer_map: HashMap<String, Vec<PathBuf>> = resep
                .records
                .iter()
                .filter(|r| r.is_ok())
                .map(|r| (r.id.clone(), r.seps.clone()))
                .collect();

            let selected_tuples: Vec<SciTuple> = d_set
                .records
                .iter()
                .filter(|r| r.selected == Some(true))
                .map(SciTuple::from_record)
                .collect::<Result<_>>()?;
            let rewritten = hkf_rewrite(&selected_tuples, &reviewer_map)?;
            let by_id: HashMap<&str, &SciTuple> =
                rewritten.iter().map(|t| (t.id.as_str(), t)).collect();

            let mut out = d_set.clone();
            out.meta.kind = "t_set".into();
            for rec in &mut out.records {
                if let Some(t) = by_id.get(rec.id.as_str()) {
                    rec.seps = t.seps.clone();
                    rec.origin = Some(Origin::Reviewer);
                }
            }
            write_manifest(&out, dir.join(format!("t_set_{}.jsonl", split.name())))?;
        }
        Ok(())
    }

    fn stage_adapt(&mut self, k: u32, primary: bool) -> Result<()> {
        let which = if primary { "primary" } else { "reviewer" };
        let trainer = if primary {
            self.cfg.trainer_primary.clone()
        } else {
            self.cfg.trainer_reviewer.clone()
        };
        let Some(trainer) = trainer else {
            return Ok(()); // adaptation disabled
        };

        // Which pseudo set supervises this model: in sct2/3 the primary is
        // adapted on the T-set (reviewer outputs), everything else on the
        // D-set.
        let pseudo_name = if primary && matches!(self.cfg.variant, SctVariant::Sct2 | SctVariant::Sct3)
        {
            "t_set"
        } else {
            match self.cfg.variant {
                SctVariant::Sct3 => "d2_set",
                _ => "d_set",
            }
        };
        // sct1 adapts both models on the d_set.
        let pseudo_name = if matches!(self.cfg.variant, SctVariant::Sct1) {
            "d_set"
        } else {
            pseudo_name
        };

        let dir = self.iter_dir(k);
        let pseudo_train = read_manifest(dir.join(format!("{pseudo_name}_train.jsonl")))?;
        let selected_count = pseudo_train
            .records
            .iter()
            .filter(|r| r.selected == Some(true))
            .count();
        if selected_count == 0 {
            log::warn!("iteration {k}: empty selection, skipping {which} adaptation");
            return Ok(());
        }

        match trainer {
            TrainerSpec::Anneal { step_db } => {
                let backend = if primary {
                    &mut self.ckpt.primary_backend
                } else {
                    &mut self.ckpt.reviewer_backend
                };
                if let BackendSpec::NoisyOracle { noise_snr_db, .. } = backend {
                    *noise_snr_db += step_db;
                } else {
                    return Err(Error::Trainer(
                        "anneal trainer only applies to noisy_oracle backends".into(),
                    ));
                }
                Ok(())
            }
            TrainerSpec::External { command } => {
                self.run_external_trainer(k, which, &command, primary, pseudo_name)
            }
        }
    }

    fn run_external_trainer(
        &mut self,
        k: u32,
        which: &str,
        command: &[String],
        primary: bool,
        pseudo_name: &str,
    ) -> Result<()> {
        let dir = self.iter_dir(k);
        // Union of the source training set and the selected pseudo set: the
        // source set always rides along so adaptation has a stable gradient.
        let union_train = self.build_union_manifest(k, pseudo_name, Split::Train)?;
        let union_dev = self.build_union_manifest(k, pseudo_name, Split::Dev)?;
        let train_path = dir.join(format!("union_{which}_train.jsonl"));
        let dev_path = dir.join(format!("union_{which}_dev.jsonl"));
        write_manifest(&union_train, &train_path)?;
        write_manifest(&union_dev, &dev_path)?;

        let backend = if primary {
            &self.ckpt.primary_backend
        } else {
            &self.ckpt.reviewer_backend
        };
        let model_in = match backend {
            BackendSpec::External { model_token, .. } => {
                model_token.clone().unwrap_or_default()
            }
            other => other.describe(),
        };
        let model_out = dir.join(format!("model_{which}.token"));

        let rendered: Vec<String> = command
            .iter()
            .map(|arg| {
                arg.replace("{train_manifest}", &train_path.display().to_string())
                    .replace("{dev_manifest}", &dev_path.display().to_string())
                    .replace("{model_in}", &model_in)
                    .replace("{model_out}", &model_out.display().to_string())
            })
            .collect();
        let (program, args) = rendered
            .split_first()
            .ok_or_else(|| Error::Config("trainer command must not be empty".into()))?;
        let output = Command::new(program)
            .args(args)
            .output()
            .map_err(|e| Error::Trainer(format!("failed to spawn {program}: {e}")))?;
        if !output.status.success() {
            return Err(Error::Trainer(format!(
                "trainer exited with {}: stderr: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        let token = fs::read_to_string(&model_out)
            .map_err(|e| Error::Trainer(format!("trainer produced no model token: {e}")))?;
        let token = token.trim().to_string();
        if token.is_empty() {
            return Err(Error::Trainer("trainer produced an empty model token".into()));
        }

        let backend = if primary {
            &mut self.ckpt.primary_backend
        } else {
            &mut self.ckpt.reviewer_backend
        };
        if let BackendSpec::External { model_token, .. } = backend {
            *model_token = Some(token);
        }
        Ok(())
    }

    fn build_union_manifest(&self, k: u32, pseudo_name: &str, split: Split) -> Result<Manifest> {
        let dir = self.iter_dir(k);
        let source = read_manifest(&self.cfg.source_train_manifest)?;
        let pseudo = read_manifest(dir.join(format!("{pseudo_name}_{}.jsonl", split.name())))?;

        let mut out = Manifest::new(ManifestMeta::new("train_union"), &dir);
        out.meta.iteration = Some(k);
        // Source records: ground-truth refs are the labels. Only the train
        // split carries the source set; the dev union is pseudo-only.
        if split == Split::Train {
            for rec in &source.records {
                let mut r = rec.clone();
                r.id = format!("src_{}", r.id);
                r.mix = source.resolve(&r.mix);
                r.refs = r.refs.iter().map(|p| source.resolve(p)).collect();
                r.seps = r.refs.clone();
                out.records.push(r);
            }
        }
        for rec in pseudo.records.iter().filter(|r| r.selected == Some(true)) {
            let mut r = rec.clone();
            r.mix = pseudo.resolve(&r.mix);
            r.seps = r.seps.iter().map(|p| pseudo.resolve(p)).collect();
            r.refs = Vec::new(); // pseudo labels only; no ground truth leaks in
            out.records.push(r);
        }
        Ok(out)
    }

    fn stage_report(&mut self, k: u32) -> Result<()> {
        let dir = self.iter_dir(k);
        let selected_name = match self.cfg.variant {
            SctVariant::Sct3 => "d2_set",
            _ => "d_set",
        };
        let train = read_manifest(dir.join(format!("{selected_name}_train.jsonl")))?;
        let dev = read_manifest(dir.join(format!("{selected_name}_dev.jsonl")))?;

        let scored = |m: &Manifest| m.records.iter().filter(|r| r.scm_db.is_some()).count();
        let selected = |m: &Manifest| {
            m.records
                .iter()
                .filter(|r| r.selected == Some(true))
                .count()
        };
        let split_means = |m: &Manifest, flag: bool| {
            let scm: Vec<f64> = m
                .records
                .iter()
                .filter(|r| r.selected == Some(flag))
                .filter_map(|r| r.scm_db)
                .collect();
            let mscm: Vec<f64> = m
                .records
                .iter()
                .filter(|r| r.selected == Some(flag))
                .filter_map(|r| r.mscm_db)
                .collect();
            (mean(&scm), mean(&mscm))
        };
        let (mean_scm_sel, mean_mscm_sel) = split_means(&train, true);
        let (mean_scm_rej, mean_mscm_rej) = split_means(&train, false);

        let mut warnings = Vec::new();
        let unscorable = train
            .records
            .iter()
            .filter(|r| !r.is_ok() || r.scm_db.is_none())
            .count();
        if unscorable > 0 {
            warnings.push(format!("{unscorable} train mixtures were unscorable"));
        }
        if selected(&train) == 0 {
            warnings.push("empty selection: adaptation was skipped".into());
        }

        let is_cross = matches!(self.cfg.variant, SctVariant::Sct2 | SctVariant::Sct3);
        let report = IterationReport {
            iteration: k,
            train_scored: scored(&train),
            train_selected: selected(&train),
            dev_scored: scored(&dev),
            dev_selected: selected(&dev),
            mean_scm_selected: mean_scm_sel,
            mean_mscm_selected: mean_mscm_sel,
            mean_scm_rejected: mean_scm_rej,
            mean_mscm_rejected: mean_mscm_rej,
            d_train_manifest: dir.join(format!("{selected_name}_train.jsonl")),
            d_dev_manifest: dir.join(format!("{selected_name}_dev.jsonl")),
            t_train_manifest: is_cross.then(|| dir.join("t_set_train.jsonl")),
            t_dev_manifest: is_cross.then(|| dir.join("t_set_dev.jsonl")),
            primary_model: self.ckpt.primary_backend.describe(),
            reviewer_model: self.ckpt.reviewer_backend.describe(),
            warnings,
        };
        self.ckpt.reports.push(report);
        Ok(())
    }
}

fn score_one(
    rec: &crate::manifest::ManifestRecord,
    unlabeled: &Manifest,
    p_man: &Manifest,
    r_man: &Manifest,
) -> crate::manifest::ManifestRecord {
    let mut out = crate::manifest::ManifestRecord::new(rec.id.clone(), unlabeled.resolve(&rec.mix));
    out.speakers = rec.speakers.clone();
    out.genders = rec.genders.clone();
    out.snr_db = rec.snr_db;

    let run = || -> Result<(f64, f64, Vec<PathBuf>)> {
        let p_rec = p_man
            .get(&rec.id)
            .ok_or_else(|| Error::Lookup(format!("no primary separation for {:?}", rec.id)))?;
        let r_rec = r_man
            .get(&rec.id)
            .ok_or_else(|| Error::Lookup(format!("no reviewer separation for {:?}", rec.id)))?;
        if !p_rec.is_ok() || !r_rec.is_ok() {
            return Err(Error::Backend("separation failed upstream".into()));
        }
        let mix = read_wav(unlabeled.resolve(&rec.mix))?;
        let load_set = |man: &Manifest, paths: &[PathBuf]| -> Result<SourceSet> {
            SourceSet::new(
                paths
                    .iter()
                    .map(|p| read_wav(man.resolve(p)))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let x = load_set(p_man, &p_rec.seps)?;
        let v = load_set(r_man, &r_rec.seps)?;
        let tuple = build_sci(rec.id.clone(), &mix, &x, &v, unlabeled.resolve(&rec.mix), vec![])?;
        // The sep manifest and the scored manifest share a directory, so the
        // primary sep paths carry over unchanged.
        Ok((tuple.scm_db, tuple.mscm_db, p_rec.seps.clone()))
    };

    match run() {
        Ok((scm_db, mscm_db, seps)) => {
            out.scm_db = Some(scm_db);
            out.mscm_db = Some(mscm_db);
            out.seps = seps;
            out.origin = Some(Origin::Primary);
            out.status = Some("ok".into());
        }
        Err(e) => {
            out.status = Some(format!("unscorable: {e}"));
        }
    }
    out
}
