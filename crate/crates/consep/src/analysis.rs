//! Evaluation scoreboards and diagnostics: SDRi/SI-SNRi tables, the
//! failure-case partition across both systems, the gender makeup of the
//! selection ranking, and per-iteration selection quantities.
//!
//! Every report type serializes to JSON and renders a plain-text table, both
//! deterministic for fixed inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::consistency::{scm, SourceSet};
use crate::driver::IterationReport;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::metrics::{best_assignment, sdr, si_snr, Metric};

/// One utterance's improvement scores under the best source assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    pub sdri_db: f64,
    pub si_snri_db: f64,
}

/// Scoreboard over a separated dataset: per-utterance and mean improvements,
/// with unscorable ids listed rather than silently dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_utterance: Vec<UtteranceEval>,
    pub mean_sdri_db: Option<f64>,
    pub mean_si_snri_db: Option<f64>,
    pub evaluated: usize,
    /// (id, reason) for every utterance excluded from the means.
    pub missing: Vec<(String, String)>,
    /// Mean SI-SNRi and count keyed by sorted gender pair (e.g. "f+m"),
    /// present when the ground-truth manifest carries gender metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_gender_pair: Option<BTreeMap<String, (f64, usize)>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn load_set(man: &Manifest, paths: &[std::path::PathBuf]) -> Result<SourceSet> {
    SourceSet::new(
        paths
            .iter()
            .map(|p| read_wav(man.resolve(p)))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Best-assignment mean improvement of `estimates` over `mixture`, for both
/// metrics. The assignment is searched on the raw metric; subtracting the
/// per-reference mixture baseline does not change the optimum.
fn improvements(gt: &SourceSet, est: &SourceSet, mixture: &Waveform) -> Result<(f64, f64)> {
    let si = best_assignment(gt.sources(), est.sources(), Metric::SiSnr)?.mean_score_db;
    let sd = best_assignment(gt.sources(), est.sources(), Metric::Sdr)?.mean_score_db;
    let si_base = mean(
        gt.sources()
            .iter()
            .map(|s| si_snr(s, mixture))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    )
    .expect("nonempty source set");
    let sd_base = mean(
        gt.sources()
            .iter()
            .map(|s| sdr(s, mixture))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    )
    .expect("nonempty source set");
    Ok((sd - sd_base, si - si_base))
}

/// Score a separated dataset against ground truth. Utterances whose files are
/// missing or unreadable are listed in `missing` and excluded from the means.
pub fn evaluate(gt_manifest: &Manifest, sep_manifest: &Manifest) -> Result<EvalReport> {
    let results: Vec<(String, Result<UtteranceEval>, Option<Vec<String>>)> = gt_manifest
        .records
        .par_iter()
        .map(|rec| {
            let run = || -> Result<UtteranceEval> {
                if rec.refs.is_empty() {
                    return Err(Error::Lookup("no ground-truth refs".into()));
                }
                let sep_rec = sep_manifest
                    .get(&rec.id)
                    .ok_or_else(|| Error::Lookup("no separation record".into()))?;
                if !sep_rec.is_ok() {
                    return Err(Error::Backend(
                        sep_rec.status.clone().unwrap_or_default(),
                    ));
                }
                let gt = load_set(gt_manifest, &rec.refs)?;
                let est = load_set(sep_manifest, &sep_rec.seps)?;
                let mixture = read_wav(gt_manifest.resolve(&rec.mix))?;
                let (sdri_db, si_snri_db) = improvements(&gt, &est, &mixture)?;
                Ok(UtteranceEval {
                    id: rec.id.clone(),
                    sdri_db,
                    si_snri_db,
                })
            };
            (rec.id.clone(), run(), rec.genders.clone())
        })
        .collect();

    let mut per_utterance = Vec::new();
    let mut missing = Vec::new();
    let mut gender_bins: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut saw_genders = false;
    for (id, res, genders) in results {
        match res {
            Ok(eval) => {
                if let Some(mut g) = genders {
                    saw_genders = true;
                    g.sort();
                    gender_bins
                        .entry(g.join("+"))
                        .or_default()
                        .push(eval.si_snri_db);
                }
                per_utterance.push(eval);
            }
            Err(e) => missing.push((id, e.to_string())),
        }
    }

    let by_gender_pair = saw_genders.then(|| {
        gender_bins
            .into_iter()
            .map(|(k, v)| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (k, (m, v.len()))
            })
            .collect()
    });

    Ok(EvalReport {
        evaluated: per_utterance.len(),
        mean_sdri_db: mean(per_utterance.iter().map(|u| u.sdri_db)),
        mean_si_snri_db: mean(per_utterance.iter().map(|u| u.si_snri_db)),
        per_utterance,
        missing,
        by_gender_pair,
    })
}

/// One mixture's standing in the failure partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadCase {
    pub id: String,
    pub primary_si_snri_db: f64,
    pub reviewer_si_snri_db: f64,
    pub scm_db: f64,
    pub primary_fail: bool,
    pub reviewer_fail: bool,
}

/// Four-way success/failure breakdown across the two systems, with the
/// per-case (SCM, SI-SNRi) table behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadCaseReport {
    pub threshold_db: f64,
    pub cases: Vec<BadCase>,
    /// Both systems succeed.
    pub tt: usize,
    /// Primary succeeds, reviewer fails.
    pub tf: usize,
    /// Primary fails, reviewer succeeds.
    pub ft: usize,
    /// Both systems fail.
    pub ff: usize,
    pub bad_total: usize,
    pub total: usize,
}

/// Partition mixtures into success/failure per system: a system fails a
/// mixture when its SI-SNRi is strictly below `threshold_db`, and the mixture
/// is a bad case when either system fails it.
pub fn bad_case_partition(
    gt_manifest: &Manifest,
    primary_seps: &Manifest,
    reviewer_seps: &Manifest,
    threshold_db: f64,
) -> Result<BadCaseReport> {
    let mut cases: Vec<BadCase> = gt_manifest
        .records
        .par_iter()
        .map(|rec| {
            if rec.refs.is_empty() {
                return Err(Error::Lookup(format!("no ground-truth refs for {:?}", rec.id)));
            }
            let p_rec = primary_seps
                .get(&rec.id)
                .ok_or_else(|| Error::Lookup(format!("no primary separation for {:?}", rec.id)))?;
            let r_rec = reviewer_seps
                .get(&rec.id)
                .ok_or_else(|| Error::Lookup(format!("no reviewer separation for {:?}", rec.id)))?;
            let gt = load_set(gt_manifest, &rec.refs)?;
            let x = load_set(primary_seps, &p_rec.seps)?;
            let v = load_set(reviewer_seps, &r_rec.seps)?;
            let mixture = read_wav(gt_manifest.resolve(&rec.mix))?;
            let (_, p_si) = improvements(&gt, &x, &mixture)?;
            let (_, r_si) = improvements(&gt, &v, &mixture)?;
            Ok(BadCase {
                id: rec.id.clone(),
                primary_si_snri_db: p_si,
                reviewer_si_snri_db: r_si,
                scm_db: scm(&x, &v)?,
                primary_fail: p_si < threshold_db,
                reviewer_fail: r_si < threshold_db,
            })
        })
        .collect::<Result<_>>()?;
    cases.sort_by(|a, b| a.id.cmp(&b.id));

    let count = |p: bool, r: bool| {
        cases
            .iter()
            .filter(|c| c.primary_fail == p && c.reviewer_fail == r)
            .count()
    };
    let (tt, tf, ft, ff) = (
        count(false, false),
        count(false, true),
        count(true, false),
        count(true, true),
    );
    Ok(BadCaseReport {
        threshold_db,
        total: cases.len(),
        bad_total: tf + ft + ff,
        cases,
        tt,
        tf,
        ft,
        ff,
    })
}

/// One entry of the SCM-ranked selection listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderRankEntry {
    pub rank: usize,
    pub id: String,
    pub scm_db: f64,
    /// None when the record lacks gender metadata.
    pub same_gender: Option<bool>,
}

/// Gender makeup of the selection, ordered by descending SCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderProfile {
    /// The `top_k` highest-SCM selected mixtures.
    pub top: Vec<GenderRankEntry>,
    /// Same-gender fraction per rank decile over the whole selection; None
    /// for deciles with no gender metadata.
    pub decile_same_fraction: Vec<Option<f64>>,
    /// Ids whose records lack gender metadata.
    pub missing_metadata: Vec<String>,
    pub selected_total: usize,
}

/// Profile the selected records of a manifest by speaker-gender agreement.
/// Records are ranked by descending SCM (ties broken by ascending id).
pub fn gender_profile(selection: &Manifest, top_k: usize) -> Result<GenderProfile> {
    let mut ranked: Vec<(&str, f64, Option<bool>)> = selection
        .records
        .iter()
        .filter(|r| r.selected == Some(true))
        .map(|r| {
            let scm_db = r
                .scm_db
                .ok_or_else(|| Error::Lookup(format!("record {} has no scm_db", r.id)))?;
            let same = r
                .genders
                .as_ref()
                .filter(|g| g.len() >= 2)
                .map(|g| g.iter().all(|x| x == &g[0]));
            Ok((r.id.as_str(), scm_db, same))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });

    let missing_metadata: Vec<String> = ranked
        .iter()
        .filter(|(_, _, same)| same.is_none())
        .map(|(id, _, _)| id.to_string())
        .collect();

    let top = ranked
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (id, scm_db, same))| GenderRankEntry {
            rank: i + 1,
            id: id.to_string(),
            scm_db: *scm_db,
            same_gender: *same,
        })
        .collect();

    let n = ranked.len();
    let mut decile_same_fraction = Vec::with_capacity(10);
    for d in 0..10usize {
        let lo = d * n / 10;
        let hi = (d + 1) * n / 10;
        let flags: Vec<bool> = ranked[lo..hi].iter().filter_map(|(_, _, s)| *s).collect();
        decile_same_fraction.push(if flags.is_empty() {
            None
        } else {
            Some(flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64)
        });
    }

    Ok(GenderProfile {
        top,
        decile_same_fraction,
        missing_metadata,
        selected_total: n,
    })
}

/// Selected/scored counts for one iteration of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityRow {
    pub iteration: u32,
    pub train_selected: usize,
    pub train_scored: usize,
    pub dev_selected: usize,
    pub dev_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityReport {
    pub rows: Vec<QuantityRow>,
}

/// Tabulate how much pseudo-labeled data each iteration selected.
pub fn quantity_report(reports: &[IterationReport]) -> Result<QuantityReport> {
    if reports.is_empty() {
        return Err(Error::Config("no iteration reports to tabulate".into()));
    }
    Ok(QuantityReport {
        rows: reports
            .iter()
            .map(|r| QuantityRow {
                iteration: r.iteration,
                train_selected: r.train_selected,
                train_scored: r.train_scored,
                dev_selected: r.dev_selected,
                dev_scored: r.dev_scored,
            })
            .collect(),
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable report")
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10}", "id", "SDRi", "SI-SNRi");
        for u in &self.per_utterance {
            let _ = writeln!(s, "{:<24} {:>10.2} {:>10.2}", u.id, u.sdri_db, u.si_snri_db);
        }
        let _ = writeln!(
            s,
            "{:<24} {:>10} {:>10}  (n={})",
            "mean",
            self.mean_sdri_db.map_or("-".into(), |v| format!("{v:.2}")),
            self.mean_si_snri_db.map_or("-".into(), |v| format!("{v:.2}")),
            self.evaluated
        );
        if let Some(pairs) = &self.by_gender_pair {
            for (pair, (m, n)) in pairs {
                let _ = writeln!(s, "gender {pair}: mean SI-SNRi {m:.2} dB (n={n})");
            }
        }
        for (id, reason) in &self.missing {
            let _ = writeln!(s, "excluded {id}: {reason}");
        }
        s
    }
}

impl BadCaseReport {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "failure threshold: SI-SNRi < {:.2} dB (either system)",
            self.threshold_db
        );
        let _ = writeln!(
            s,
            "T/T={} T/F={} F/T={} F/F={}  bad {}/{} = {:.1}%",
            self.tt,
            self.tf,
            self.ft,
            self.ff,
            self.bad_total,
            self.total,
            if self.total == 0 {
                0.0
            } else {
                100.0 * self.bad_total as f64 / self.total as f64
            }
        );
        let _ = writeln!(
            s,
            "{:<24} {:>10} {:>14} {:>14} {:>4} {:>4}",
            "id", "SCM", "prim SI-SNRi", "rev SI-SNRi", "prim", "rev"
        );
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<24} {:>10.2} {:>14.2} {:>14.2} {:>4} {:>4}",
                c.id,
                c.scm_db,
                c.primary_si_snri_db,
                c.reviewer_si_snri_db,
                if c.primary_fail { "F" } else { "T" },
                if c.reviewer_fail { "F" } else { "T" },
            );
        }
        s
    }
}

impl GenderProfile {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<24} {:>10} {:>12}", "rank", "id", "SCM", "same_gender");
        for e in &self.top {
            let _ = writeln!(
                s,
                "{:<6} {:<24} {:>10.2} {:>12}",
                e.rank,
                e.id,
                e.scm_db,
                e.same_gender.map_or("?".into(), |b| b.to_string())
            );
        }
        for (d, frac) in self.decile_same_fraction.iter().enumerate() {
            let _ = writeln!(
                s,
                "decile {}: same-gender {}",
                d + 1,
                frac.map_or("-".into(), |f| format!("{:.1}%", 100.0 * f))
            );
        }
        let _ = writeln!(s, "selected total: {}", self.selected_total);
        for id in &self.missing_metadata {
            let _ = writeln!(s, "missing gender metadata: {id}");
        }
        s
    }
}

impl QuantityReport {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>12} {:>12} {:>10}",
            "iteration", "train_sel", "train_all", "dev_sel", "dev_all"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>14} {:>12} {:>12} {:>10}",
                r.iteration, r.train_selected, r.train_scored, r.dev_selected, r.dev_scored
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, WavEncoding};
    use crate::manifest::{Manifest, ManifestMeta, ManifestRecord};
    use crate::metrics::si_snri;
    use crate::separators::{separate_batch, BackendSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::{Path, PathBuf};

    fn wf(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.gen_range(-0.4..0.4)).collect(), 8000).unwrap()
    }

    /// Tiny on-disk dataset: mixtures as exact sums of two reference signals.
    fn write_dataset(dir: &Path, n: usize, seed: u64) -> Manifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut man = Manifest::new(ManifestMeta::new("dataset"), dir);
        for i in 0..n {
            let id = format!("mix{i:03}");
            let s1 = wf(&mut rng, 4000);
            let s2 = wf(&mut rng, 4000);
            let mix = Waveform::new(
                s1.samples()
                    .iter()
                    .zip(s2.samples())
                    .map(|(a, b)| a + b)
                    .collect(),
                8000,
            )
            .unwrap();
            for (name, w) in [("mix", &mix), ("s1", &s1), ("s2", &s2)] {
                std::fs::create_dir_all(dir.join(name)).unwrap();
                write_wav(dir.join(name).join(format!("{id}.wav")), w, WavEncoding::Float32)
                    .unwrap();
            }
            let mut rec = ManifestRecord::new(&id, format!("mix/{id}.wav"));
            rec.refs = vec![
                PathBuf::from(format!("s1/{id}.wav")),
                PathBuf::from(format!("s2/{id}.wav")),
            ];
            rec.genders = Some(vec!["f".into(), if i % 2 == 0 { "m".into() } else { "f".into() }]);
            man.records.push(rec);
        }
        man
    }

    fn separate_into(gt: &Manifest, backend: &BackendSpec, dir: &Path) -> Manifest {
        separate_batch(backend, gt, dir, 2, 1, false).unwrap()
    }

    #[test]
    fn oracle_separation_hits_ceiling_improvement() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 3, 1);
        let sep = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("sep"));
        let report = evaluate(&gt, &sep).unwrap();
        assert_eq!(report.evaluated, 3);
        for u in &report.per_utterance {
            // Perfect estimates sit at the clamp; improvement is the ceiling
            // minus the mixture baseline.
            let rec = gt.get(&u.id).unwrap();
            let mixture = read_wav(gt.resolve(&rec.mix)).unwrap();
            let base = rec
                .refs
                .iter()
                .map(|p| si_snr(&read_wav(gt.resolve(p)).unwrap(), &mixture).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((u.si_snri_db - (100.0 - base)).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_separation_scores_zero_improvement() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 3, 2);
        let sep = separate_into(&gt, &BackendSpec::Identity, &tmp.path().join("sep"));
        let report = evaluate(&gt, &sep).unwrap();
        assert!(report.mean_si_snri_db.unwrap().abs() <= 1e-9);
        assert!(report.mean_sdri_db.unwrap().abs() <= 1e-9);
    }

    #[test]
    fn noisy_oracle_calibrates_to_requested_snr() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 8, 3);
        let backend = BackendSpec::NoisyOracle {
            noise_snr_db: 15.0,
            seed: 7,
        };
        let sep = separate_into(&gt, &backend, &tmp.path().join("sep"));
        let report = evaluate(&gt, &sep).unwrap();

        let mut base = Vec::new();
        for rec in &gt.records {
            let mixture = read_wav(gt.resolve(&rec.mix)).unwrap();
            for p in &rec.refs {
                base.push(si_snr(&read_wav(gt.resolve(p)).unwrap(), &mixture).unwrap());
            }
        }
        let base = base.iter().sum::<f64>() / base.len() as f64;
        let got = report.mean_si_snri_db.unwrap();
        assert!(
            (got - (15.0 - base)).abs() <= 0.7,
            "mean SI-SNRi {got} vs expected {}",
            15.0 - base
        );
    }

    #[test]
    fn mean_equals_average_of_per_utterance() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 5, 4);
        let backend = BackendSpec::NoisyOracle {
            noise_snr_db: 10.0,
            seed: 1,
        };
        let sep = separate_into(&gt, &backend, &tmp.path().join("sep"));
        let report = evaluate(&gt, &sep).unwrap();
        let avg = report.per_utterance.iter().map(|u| u.si_snri_db).sum::<f64>()
            / report.per_utterance.len() as f64;
        assert!((report.mean_si_snri_db.unwrap() - avg).abs() <= 1e-9);
    }

    #[test]
    fn missing_files_are_flagged_and_excluded() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 3, 5);
        let mut sep = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("sep"));
        std::fs::remove_file(sep.resolve(&sep.records[1].seps[0])).unwrap();
        let report = evaluate(&gt, &sep).unwrap();
        assert_eq!(report.evaluated, 2);
        assert_eq!(report.missing.len(), 1);
        assert_eq!(report.missing[0].0, "mix001");
        // A missing record entirely is also flagged.
        sep.records.remove(0);
        let report = evaluate(&gt, &sep).unwrap();
        assert_eq!(report.evaluated, 1);
        assert_eq!(report.missing.len(), 2);
    }

    #[test]
    fn bad_case_partition_all_true_when_both_perfect() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 4, 6);
        let p = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("p"));
        let r = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("r"));
        let report = bad_case_partition(&gt, &p, &r, 5.52).unwrap();
        assert_eq!(report.tt, 4);
        assert_eq!(report.bad_total, 0);
    }

    #[test]
    fn threshold_above_ceiling_marks_everything_bad() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 3, 7);
        let p = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("p"));
        let r = separate_into(&gt, &BackendSpec::Oracle, &tmp.path().join("r"));
        let report = bad_case_partition(&gt, &p, &r, 500.0).unwrap();
        assert_eq!(report.ff, 3);
        assert_eq!(report.bad_total, 3);
    }

    #[test]
    fn planted_failures_partition_as_hand_computed() {
        let tmp = tempfile::tempdir().unwrap();
        let gt = write_dataset(tmp.path(), 6, 8);
        // Primary fails (identity = 0 dB improvement); reviewer succeeds.
        let p = separate_into(&gt, &BackendSpec::Identity, &tmp.path().join("p"));
        let r = separate_into(
            &gt,
            &BackendSpec::NoisyOracle {
                noise_snr_db: 20.0,
                seed: 3,
            },
            &tmp.path().join("r"),
        );
        let report = bad_case_partition(&gt, &p, &r, 5.0).unwrap();
        assert_eq!(report.ft, 6);
        assert_eq!(report.tt + report.tf + report.ft + report.ff, report.total);
        assert_eq!(report.bad_total, report.tf + report.ft + report.ff);
        for c in &report.cases {
            assert_eq!(c.primary_fail, c.primary_si_snri_db < 5.0);
            assert_eq!(c.reviewer_fail, c.reviewer_si_snri_db < 5.0);
        }
    }

    fn gender_manifest(n: usize, same_gender_scm_boost: bool) -> Manifest {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut man = Manifest::new(ManifestMeta::new("d_set"), "/tmp");
        for i in 0..n {
            let same = i % 2 == 0;
            let mut rec = ManifestRecord::new(format!("g{i:04}"), "x.wav");
            rec.genders = Some(if same {
                vec!["m".into(), "m".into()]
            } else {
                vec!["m".into(), "f".into()]
            });
            let mut scm = rng.gen_range(-5.0..15.0);
            if same_gender_scm_boost && same {
                scm -= 50.0; // push same-gender mixtures to the bottom ranks
            }
            rec.scm_db = Some(scm);
            rec.mscm_db = Some(0.0);
            rec.selected = Some(true);
            man.records.push(rec);
        }
        man
    }

    #[test]
    fn all_different_gender_profile_is_zero_everywhere() {
        let mut man = gender_manifest(40, false);
        for rec in &mut man.records {
            rec.genders = Some(vec!["m".into(), "f".into()]);
        }
        let profile = gender_profile(&man, 10).unwrap();
        assert!(profile.top.iter().all(|e| e.same_gender == Some(false)));
        assert!(profile
            .decile_same_fraction
            .iter()
            .all(|f| *f == Some(0.0)));
    }

    #[test]
    fn gender_independent_scm_gives_half_per_decile() {
        let man = gender_manifest(2000, false);
        let profile = gender_profile(&man, 5).unwrap();
        for frac in profile.decile_same_fraction.iter().flatten() {
            assert!((frac - 0.5).abs() < 0.12, "decile fraction {frac}");
        }
    }

    #[test]
    fn biased_scm_concentrates_same_gender_in_last_deciles() {
        let man = gender_manifest(200, true);
        let profile = gender_profile(&man, 20).unwrap();
        assert!(profile.top.iter().all(|e| e.same_gender == Some(false)));
        assert_eq!(profile.decile_same_fraction[0], Some(0.0));
        assert_eq!(profile.decile_same_fraction[9], Some(1.0));
    }

    #[test]
    fn gender_profile_ranks_by_descending_scm() {
        let man = gender_manifest(30, false);
        let profile = gender_profile(&man, 30).unwrap();
        for w in profile.top.windows(2) {
            assert!(w[0].scm_db >= w[1].scm_db);
        }
        assert_eq!(profile.selected_total, 30);
    }

    #[test]
    fn gender_profile_flags_missing_metadata() {
        let mut man = gender_manifest(10, false);
        man.records[3].genders = None;
        let profile = gender_profile(&man, 10).unwrap();
        assert_eq!(profile.missing_metadata, vec!["g0003".to_string()]);
    }

    fn report_row(iteration: u32, train_selected: usize) -> IterationReport {
        IterationReport {
            iteration,
            train_scored: 100,
            train_selected,
            dev_scored: 20,
            dev_selected: train_selected / 5,
            mean_scm_selected: None,
            mean_mscm_selected: None,
            mean_scm_rejected: None,
            mean_mscm_rejected: None,
            d_train_manifest: PathBuf::new(),
            d_dev_manifest: PathBuf::new(),
            t_train_manifest: None,
            t_dev_manifest: None,
            primary_model: "a".into(),
            reviewer_model: "b".into(),
            warnings: vec![],
        }
    }

    #[test]
    fn quantity_report_mirrors_inputs() {
        let reports = vec![report_row(0, 40), report_row(1, 55)];
        let table = quantity_report(&reports).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[1].train_selected, 55);
        assert!(quantity_report(&[]).is_err());
        // Emitters are deterministic.
        assert_eq!(table.to_text(), quantity_report(&reports).unwrap().to_text());
        assert_eq!(table.to_json(), quantity_report(&reports).unwrap().to_json());
    }
}
