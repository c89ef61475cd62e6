//! Pseudo-label selection: top-p% by SCM (CPS-1), the joint SCM/mSCM
//! threshold rule (CPS-2), and ground-truth-referenced oracle selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::consistency::{SciTuple, SourceSet};
use crate::error::{Error, Result};
use crate::metrics::{best_assignment, Metric};

/// Which selection rule runs and its thresholds. Only the fields the chosen
/// mode consults are meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SelectionConfig {
    /// Keep the top p% of tuples by SCM.
    Cps1 { p_percent: f64 },
    /// Keep tuples with SCM > alpha and mSCM < beta.
    Cps2 { alpha_db: f64, beta_db: f64 },
    /// Keep tuples whose outputs score above eta against ground truth.
    Oracle { eta_db: f64 },
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if let SelectionConfig::Cps1 { p_percent } = self {
            if !(0.0..=100.0).contains(p_percent) {
                return Err(Error::Config(format!(
                    "p_percent must be in [0, 100], got {p_percent}"
                )));
            }
        }
        Ok(())
    }
}

/// CPS-1: the ceil(N * p / 100) tuples with highest SCM. Ties at the cutoff
/// are broken by ascending id so the selection is deterministic.
pub fn cps1_select(tuples: &[SciTuple], p_percent: f64) -> Result<Vec<SciTuple>> {
    if !(0.0..=100.0).contains(&p_percent) {
        return Err(Error::Config(format!(
            "p_percent must be in [0, 100], got {p_percent}"
        )));
    }
    let n = tuples.len();
    let keep = ((n as f64 * p_percent / 100.0).ceil() as usize).min(n);
    let mut sorted: Vec<&SciTuple> = tuples.iter().collect();
    sorted.sort_by(|a, b| {
        b.scm_db
            .partial_cmp(&a.scm_db)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(sorted.into_iter().take(keep).cloned().collect())
}

/// CPS-2: tuples with SCM strictly above alpha and mSCM strictly below beta,
/// input order preserved.
pub fn cps2_select(tuples: &[SciTuple], alpha_db: f64, beta_db: f64) -> Vec<SciTuple> {
    tuples
        .iter()
        .filter(|t| t.scm_db > alpha_db && t.mscm_db < beta_db)
        .cloned()
        .collect()
}

/// Oracle selection: keep tuples whose sep signals score a best-assignment
/// mean SI-SNR above eta against the true references.
pub fn oracle_select(
    tuples: &[SciTuple],
    ground_truth: &HashMap<String, SourceSet>,
    sep_sets: &HashMap<String, SourceSet>,
    eta_db: f64,
) -> Result<Vec<SciTuple>> {
    let mut out = Vec::new();
    for t in tuples {
        let gt = ground_truth
            .get(&t.id)
            .ok_or_else(|| Error::Lookup(format!("no ground truth for id {:?}", t.id)))?;
        let seps = sep_sets
            .get(&t.id)
            .ok_or_else(|| Error::Lookup(format!("no separation signals for id {:?}", t.id)))?;
        let score = best_assignment(gt.sources(), seps.sources(), Metric::SiSnr)?.mean_score_db;
        if score > eta_db {
            out.push(t.clone());
        }
    }
    Ok(out)
}

/// Apply a selection config, returning the kept tuples. Oracle mode needs the
/// ground-truth and separation sets; the other modes ignore them.
pub fn select(
    cfg: &SelectionConfig,
    tuples: &[SciTuple],
    ground_truth: Option<&HashMap<String, SourceSet>>,
    sep_sets: Option<&HashMap<String, SourceSet>>,
) -> Result<Vec<SciTuple>> {
    match cfg {
        SelectionConfig::Cps1 { p_percent } => cps1_select(tuples, *p_percent),
        SelectionConfig::Cps2 { alpha_db, beta_db } => {
            Ok(cps2_select(tuples, *alpha_db, *beta_db))
        }
        SelectionConfig::Oracle { eta_db } => {
            let gt = ground_truth
                .ok_or_else(|| Error::Config("oracle selection requires ground truth".into()))?;
            let seps = sep_sets.ok_or_else(|| {
                Error::Config("oracle selection requires separation signals".into())
            })?;
            oracle_select(tuples, gt, seps, *eta_db)
        }
    }
}
