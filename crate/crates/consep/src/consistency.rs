//! Agreement scores between two separators' outputs: SCM (best-permutation
//! mean SI-SNR, primary outputs as references), mSCM (mean SI-SNR between the
//! mixture and every separated output), and the per-mixture SCI record that
//! carries them.

use std::path::PathBuf;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::manifest::{ManifestRecord, Origin};
use crate::metrics::{best_assignment, si_snr, Metric};

/// Ordered set of per-speaker waveforms, all the same length and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    sources: Vec<Waveform>,
}

impl SourceSet {
    pub fn new(sources: Vec<Waveform>) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Shape("source set must not be empty".into()))?;
        let (len, rate) = (first.len(), first.sample_rate_hz());
        for (i, s) in sources.iter().enumerate() {
            if s.len() != len || s.sample_rate_hz() != rate {
                return Err(Error::Shape(format!(
                    "source {i} has length {} @ {} Hz, expected {} @ {}",
                    s.len(),
                    s.sample_rate_hz(),
                    len,
                    rate
                )));
            }
        }
        Ok(SourceSet { sources })
    }

    pub fn sources(&self) -> &[Waveform] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sources[0].len()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sources[0].sample_rate_hz()
    }

    pub fn into_sources(self) -> Vec<Waveform> {
        self.sources
    }
}

/// Per-mixture consistency record: scores plus the paths to the mixture and
/// its pseudo ground-truth signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SciTuple {
    pub id: String,
    pub scm_db: f64,
    pub mscm_db: f64,
    pub mix: PathBuf,
    pub seps: Vec<PathBuf>,
    pub origin: Origin,
}

impl SciTuple {
    pub fn to_record(&self) -> ManifestRecord {
        let mut rec = ManifestRecord::new(self.id.clone(), self.mix.clone());
        rec.seps = self.seps.clone();
        rec.scm_db = Some(self.scm_db);
        rec.mscm_db = Some(self.mscm_db);
        rec.origin = Some(self.origin);
        rec
    }

    pub fn from_record(rec: &ManifestRecord) -> Result<Self> {
        Ok(SciTuple {
            id: rec.id.clone(),
            scm_db: rec
                .scm_db
                .ok_or_else(|| Error::Lookup(format!("record {} has no scm_db", rec.id)))?,
            mscm_db: rec
                .mscm_db
                .ok_or_else(|| Error::Lookup(format!("record {} has no mscm_db", rec.id)))?,
            mix: rec.mix.clone(),
            seps: rec.seps.clone(),
            origin: rec.origin.unwrap_or(Origin::Primary),
        })
    }
}

/// Separation consistency measure: the best-permutation mean SI-SNR between
/// the primary outputs `x` (as references) and the reviewer outputs `v`.
pub fn scm(x: &SourceSet, v: &SourceSet) -> Result<f64> {
    Ok(best_assignment(x.sources(), v.sources(), Metric::SiSnr)?.mean_score_db)
}

/// Mixture separation consistency measure: the mean SI-SNR between the input
/// mixture and every member of both output sets. High values indicate the
/// separators returned something mixture-like, so lower is better.
pub fn mscm(y: &Waveform, x: &SourceSet, v: &SourceSet) -> Result<f64> {
    if x.len() != v.len() {
        return Err(Error::Shape(format!(
            "source count mismatch: {} vs {}",
            x.len(),
            v.len()
        )));
    }
    // Each set is summed on its own so the result is exactly symmetric in
    // (x, v): the outer addition commutes.
    let mut sum_x = 0.0;
    for member in x.sources() {
        sum_x += si_snr(y, member)?;
    }
    let mut sum_v = 0.0;
    for member in v.sources() {
        sum_v += si_snr(y, member)?;
    }
    Ok((sum_x + sum_v) / (x.len() + v.len()) as f64)
}

/// Assemble an SCI tuple from the mixture, both separators' outputs, and the
/// paths under which the mixture and the primary model's outputs live.
#[allow(clippy::too_many_arguments)]
pub fn build_sci(
    id: impl Into<String>,
    y: &Waveform,
    x: &SourceSet,
    v: &SourceSet,
    mix_path: impl Into<PathBuf>,
    sep_paths: Vec<PathBuf>,
) -> Result<SciTuple> {
    let scm_db = scm(x, v)?;
    let mscm_db = mscm(y, x, v)?;
    Ok(SciTuple {
        id: id.into(),
        scm_db,
        mscm_db,
        mix: mix_path.into(),
        seps: sep_paths,
        origin: Origin::Primary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wf(rng: &mut ChaCha8Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    fn set(rng: &mut ChaCha8Rng, m: usize, len: usize) -> SourceSet {
        SourceSet::new((0..m).map(|_| wf(rng, len)).collect()).unwrap()
    }

    #[test]
    fn scm_of_identical_sets_is_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = set(&mut rng, 2, 64);
        assert_eq!(scm(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn scm_absorbs_member_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = set(&mut rng, 2, 64);
        let v = SourceSet::new(vec![x.sources()[1].clone(), x.sources()[0].clone()]).unwrap();
        assert_eq!(scm(&x, &v).unwrap(), 100.0);
    }

    #[test]
    fn scm_equals_two_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = set(&mut rng, 2, 64);
            let v = set(&mut rng, 2, 64);
            let a = si_snr(&x.sources()[0], &v.sources()[0]).unwrap();
            let b = si_snr(&x.sources()[1], &v.sources()[1]).unwrap();
            let c = si_snr(&x.sources()[0], &v.sources()[1]).unwrap();
            let d = si_snr(&x.sources()[1], &v.sources()[0]).unwrap();
            let want = ((a + b) / 2.0).max((c + d) / 2.0);
            let got = scm(&x, &v).unwrap();
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn scm_invariant_under_reviewer_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = set(&mut rng, 3, 64);
        let v = set(&mut rng, 3, 64);
        let base = scm(&x, &v).unwrap();
        let perm = SourceSet::new(vec![
            v.sources()[2].clone(),
            v.sources()[0].clone(),
            v.sources()[1].clone(),
        ])
        .unwrap();
        assert!((scm(&x, &perm).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn mscm_ceiling_when_all_outputs_equal_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = wf(&mut rng, 64);
        let x = SourceSet::new(vec![y.clone(), y.clone()]).unwrap();
        assert_eq!(mscm(&y, &x, &x).unwrap(), 100.0);
    }

    #[test]
    fn mscm_floor_when_all_outputs_orthogonal() {
        let y = Waveform::new(vec![1.0, 0.0, 0.0, 0.0], 8000).unwrap();
        let o = Waveform::new(vec![0.0, 1.0, 0.0, 0.0], 8000).unwrap();
        let x = SourceSet::new(vec![o.clone(), o.clone()]).unwrap();
        assert_eq!(mscm(&y, &x, &x).unwrap(), -100.0);
    }

    #[test]
    fn mscm_is_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = wf(&mut rng, 64);
        let x = set(&mut rng, 2, 64);
        let v = set(&mut rng, 2, 64);
        let a = si_snr(&y, &x.sources()[0]).unwrap();
        let b = si_snr(&y, &x.sources()[1]).unwrap();
        let c = si_snr(&y, &v.sources()[0]).unwrap();
        let d = si_snr(&y, &v.sources()[1]).unwrap();
        let got = mscm(&y, &x, &v).unwrap();
        assert!((got - (a + b + c + d) / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn mscm_symmetric_in_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = wf(&mut rng, 64);
        let x = set(&mut rng, 2, 64);
        let v = set(&mut rng, 2, 64);
        assert_eq!(mscm(&y, &x, &v).unwrap(), mscm(&y, &v, &x).unwrap());
    }

    #[test]
    fn build_sci_matches_standalone_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = wf(&mut rng, 64);
        let x = set(&mut rng, 2, 64);
        let v = set(&mut rng, 2, 64);
        let t = build_sci(
            "m1",
            &y,
            &x,
            &v,
            "mix/m1.wav",
            vec!["sep/m1.s1.wav".into(), "sep/m1.s2.wav".into()],
        )
        .unwrap();
        assert_eq!(t.scm_db, scm(&x, &v).unwrap());
        assert_eq!(t.mscm_db, mscm(&y, &x, &v).unwrap());
        assert_eq!(t.origin, Origin::Primary);
        assert_eq!(t.seps.len(), 2);
    }

    #[test]
    fn sci_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = wf(&mut rng, 64);
        let x = set(&mut rng, 2, 64);
        let v = set(&mut rng, 2, 64);
        let t = build_sci("m2", &y, &x, &v, "m2.wav", vec!["a.wav".into(), "b.wav".into()])
            .unwrap();
        let back = SciTuple::from_record(&t.to_record()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn degenerate_member_aborts_tuple() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = wf(&mut rng, 64);
        let silent = Waveform::new(vec![0.0; 64], 8000).unwrap();
        let x = SourceSet::new(vec![wf(&mut rng, 64), silent]).unwrap();
        let v = set(&mut rng, 2, 64);
        assert!(matches!(
            build_sci("m3", &y, &x, &v, "m3.wav", vec![]),
            Err(Error::DegenerateSignal(_))
        ));
    }
}
