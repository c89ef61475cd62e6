//! Spectrogram analysis/synthesis, cosine-similarity speaker matching, the
//! lambda-weighted magnitude fusion of two separators' outputs, and the
//! tuple rewrite that swaps pseudo ground-truth paths over to the adapted
//! reviewer.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use itertools::Itertools;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::consistency::{SciTuple, SourceSet};
use crate::error::{Error, Result};
use crate::manifest::Origin;

/// Default analysis size: 32 ms at 8 kHz.
pub const DEFAULT_N_FFT: usize = 256;
/// Default hop: n_fft / 4 satisfies COLA for a Hann window.
pub const DEFAULT_HOP: usize = 64;

/// Complex STFT grid with the parameters needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Time-major: frames[t][k] is bin k of frame t, full n_fft bins.
    pub frames: Vec<Vec<Complex<f32>>>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
    /// Original signal length, so ISTFT can restore it exactly.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Magnitudes flattened frame-major, the vector cosine matching runs on.
    pub fn flat_magnitudes(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.iter().map(|c| c.norm() as f64))
            .collect()
    }
}

fn hann(n_fft: usize) -> Vec<f32> {
    (0..n_fft)
        .map(|i| {
            let x = std::f32::consts::PI * i as f32 / n_fft as f32;
            x.sin() * x.sin()
        })
        .collect()
}

fn check_params(len: usize, n_fft: usize, hop: usize) -> Result<()> {
    if !n_fft.is_power_of_two() {
        return Err(Error::Shape(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 || n_fft % hop != 0 {
        return Err(Error::Shape(format!("hop must divide n_fft, got {hop}/{n_fft}")));
    }
    if len < n_fft {
        return Err(Error::Shape(format!(
            "signal length {len} is shorter than n_fft {n_fft}"
        )));
    }
    Ok(())
}

/// Hann-windowed short-time Fourier transform;
/// frame count = 1 + floor((len - n_fft) / hop).
pub fn stft(w: &Waveform, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    check_params(w.len(), n_fft, hop)?;
    let window = hann(n_fft);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let num_frames = 1 + (w.len() - n_fft) / hop;
    let samples = w.samples();

    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let start = t * hop;
        let mut buf: Vec<Complex<f32>> = (0..n_fft)
            .map(|i| Complex::new(samples[start + i] * window[i], 0.0))
            .collect();
        fft.process(&mut buf);
        frames.push(buf);
    }
    Ok(Spectrogram {
        frames,
        n_fft,
        hop,
        sample_rate_hz: w.sample_rate_hz(),
        signal_len: w.len(),
    })
}

/// Weighted overlap-add inverse with the same Hann window on synthesis;
/// output trimmed or zero-padded to the original signal length.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let n_fft = s.n_fft;
    let hop = s.hop;
    let window = hann(n_fft);
    let ifft = FftPlanner::<f32>::new().plan_fft_inverse(n_fft);
    let ifft: Arc<dyn rustfft::Fft<f32>> = ifft;

    let cover = (s.frames.len().saturating_sub(1)) * hop + n_fft;
    let mut acc = vec![0.0f64; cover];
    let mut norm = vec![0.0f64; cover];
    for (t, frame) in s.frames.iter().enumerate() {
        let mut buf = frame.clone();
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            // rustfft's inverse is unnormalized.
            let v = buf[i].re / n_fft as f32;
            acc[start + i] += (v * window[i]) as f64;
            norm[start + i] += (window[i] * window[i]) as f64;
        }
    }
    // Samples near the signal edges get almost no window weight. Dividing by
    // the raw weight there turns any spectral modification into huge spikes
    // (the numerator no longer cancels like it does for an unmodified
    // round trip), so the weight is floored: low-coverage samples come out
    // attenuated instead of amplified.
    const MIN_OLA_WEIGHT: f64 = 1e-2;
    let mut out = vec![0.0f32; s.signal_len];
    for i in 0..s.signal_len.min(cover) {
        out[i] = (acc[i] / norm[i].max(MIN_OLA_WEIGHT)) as f32;
    }
    Waveform::new(out, s.sample_rate_hz)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Find the permutation of `b` maximizing the summed cosine similarity
/// between flattened magnitude grids. Exhaustive over M!; ties break to the
/// lexicographically smallest permutation.
pub fn match_speakers(a: &[Spectrogram], b: &[Spectrogram]) -> Result<Vec<usize>> {
    let m = a.len();
    if m == 0 || b.len() != m {
        return Err(Error::Shape(format!(
            "list length mismatch: {} vs {}",
            m,
            b.len()
        )));
    }
    if m > crate::metrics::MAX_SOURCES {
        return Err(Error::Capacity(format!("at most 8 sources, got {m}")));
    }
    for (sa, sb) in a.iter().zip(b) {
        if sa.num_frames() != sb.num_frames() || sa.n_fft != sb.n_fft {
            return Err(Error::Shape("spectrogram shape mismatch".into()));
        }
    }
    let mags_a: Vec<Vec<f64>> = a.iter().map(|s| s.flat_magnitudes()).collect();
    let mags_b: Vec<Vec<f64>> = b.iter().map(|s| s.flat_magnitudes()).collect();
    let mut sims = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            sims[i][j] = cosine(&mags_a[i], &mags_b[j]);
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..m).permutations(m) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| sims[i][j]).sum();
        if best.as_ref().map_or(true, |(_, s)| total > *s) {
            best = Some((perm, total));
        }
    }
    Ok(best.expect("at least one permutation").0)
}

/// Fuse two separators' outputs per matched speaker: fused magnitude is
/// lambda * |primary| + (1 - lambda) * |reviewer|, phase comes from the
/// primary output, and the waveform is rebuilt by ISTFT at the input length.
pub fn linear_fuse(
    primary_out: &SourceSet,
    reviewer_out: &SourceSet,
    lambda: f64,
) -> Result<SourceSet> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if primary_out.len() != reviewer_out.len() {
        return Err(Error::Shape(format!(
            "source count mismatch: {} vs {}",
            primary_out.len(),
            reviewer_out.len()
        )));
    }
    if primary_out.sample_len() != reviewer_out.sample_len()
        || primary_out.sample_rate_hz() != reviewer_out.sample_rate_hz()
    {
        return Err(Error::Shape("length or rate mismatch between output sets".into()));
    }

    let p_specs: Vec<Spectrogram> = primary_out
        .sources()
        .iter()
        .map(|w| stft(w, DEFAULT_N_FFT, DEFAULT_HOP))
        .collect::<Result<_>>()?;
    let r_specs: Vec<Spectrogram> = reviewer_out
        .sources()
        .iter()
        .map(|w| stft(w, DEFAULT_N_FFT, DEFAULT_HOP))
        .collect::<Result<_>>()?;
    let perm = match_speakers(&p_specs, &r_specs)?;

    let lam = lambda as f32;
    let mut fused = Vec::with_capacity(p_specs.len());
    for (i, p) in p_specs.iter().enumerate() {
        let r = &r_specs[perm[i]];
        let frames: Vec<Vec<Complex<f32>>> = p
            .frames
            .iter()
            .zip(&r.frames)
            .map(|(pf, rf)| {
                pf.iter()
                    .zip(rf)
                    .map(|(pc, rc)| {
                        let mag = lam * pc.norm() + (1.0 - lam) * rc.norm();
                        let pn = pc.norm();
                        if pn > 1e-12 {
                            pc * (mag / pn)
                        } else {
                            Complex::new(mag, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let spec = Spectrogram {
            frames,
            n_fft: p.n_fft,
            hop: p.hop,
            sample_rate_hz: p.sample_rate_hz,
            signal_len: p.signal_len,
        };
        fused.push(istft(&spec)?);
    }
    SourceSet::new(fused)
}

/// Replace the pseudo ground-truth paths of each selected tuple with the
/// adapted reviewer's output paths. Scores are the prior selection
/// statistics and stay untouched; only seps and origin change.
pub fn hkf_rewrite(
    selected: &[SciTuple],
    reviewer_seps: &HashMap<String, Vec<PathBuf>>,
) -> Result<Vec<SciTuple>> {
    selected
        .iter()
        .map(|t| {
            let seps = reviewer_seps
                .get(&t.id)
                .ok_or_else(|| Error::Lookup(format!("no reviewer outputs for id {:?}", t.id)))?;
            Ok(SciTuple {
                id: t.id.clone(),
                scm_db: t.scm_db,
                mscm_db: t.mscm_db,
                mix: t.mix.clone(),
                seps: seps.clone(),
                origin: Origin::Reviewer,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|n| (amp * (2.0 * PI * freq * n as f64 / 8000.0).sin()) as f32)
                .collect(),
            8000,
        )
        .unwrap()
    }

    fn noise(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    fn interior_rel_l2(a: &Waveform, b: &Waveform, margin: usize) -> f64 {
        let lo = margin;
        let hi = a.len() - margin;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in lo..hi {
            let d = (a.samples()[i] - b.samples()[i]) as f64;
            num += d * d;
            den += (a.samples()[i] as f64).powi(2);
        }
        (num / den).sqrt()
    }

    #[test]
    fn frame_count_convention() {
        let w = noise(1, 1000);
        let s = stft(&w, 256, 64).unwrap();
        assert_eq!(s.num_frames(), 1 + (1000 - 256) / 64);
    }

    #[test]
    fn round_trip_identity_on_interior() {
        let w = noise(2, 8000);
        let s = stft(&w, 256, 64).unwrap();
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(interior_rel_l2(&w, &back, 256) <= 1e-4);
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        // 1 kHz at 8 kHz with n_fft 256: bin = 1000 * 256 / 8000 = 32.
        let w = tone(1000.0, 4000, 0.8);
        let s = stft(&w, 256, 64).unwrap();
        let mid = &s.frames[s.num_frames() / 2];
        let peak_bin = (0..128).max_by(|&a, &b| {
            mid[a].norm().partial_cmp(&mid[b].norm()).unwrap()
        });
        assert_eq!(peak_bin, Some(32));
    }

    #[test]
    fn stft_is_linear() {
        let x = noise(3, 2000);
        let y = noise(4, 2000);
        let sum = Waveform::new(
            x.samples().iter().zip(y.samples()).map(|(&a, &b)| a + b).collect(),
            8000,
        )
        .unwrap();
        let sx = stft(&x, 256, 64).unwrap();
        let sy = stft(&y, 256, 64).unwrap();
        let ss = stft(&sum, 256, 64).unwrap();
        for t in 0..ss.num_frames() {
            for k in 0..256 {
                let d = ss.frames[t][k] - (sx.frames[t][k] + sy.frames[t][k]);
                assert!(d.norm() <= 1e-3);
            }
        }
    }

    #[test]
    fn short_signal_is_shape_error() {
        let w = noise(5, 100);
        assert!(matches!(stft(&w, 256, 64), Err(Error::Shape(_))));
    }

    #[test]
    fn match_identity_and_swap() {
        let a = vec![
            stft(&tone(400.0, 2000, 0.5), 256, 64).unwrap(),
            stft(&tone(1200.0, 2000, 0.5), 256, 64).unwrap(),
        ];
        assert_eq!(match_speakers(&a, &a).unwrap(), vec![0, 1]);
        let swapped = vec![a[1].clone(), a[0].clone()];
        assert_eq!(match_speakers(&a, &swapped).unwrap(), vec![1, 0]);
    }

    #[test]
    fn match_equals_brute_force_m2() {
        for seed in 0..10u64 {
            let a = vec![
                stft(&noise(seed * 4, 2000), 256, 64).unwrap(),
                stft(&noise(seed * 4 + 1, 2000), 256, 64).unwrap(),
            ];
            let b = vec![
                stft(&noise(seed * 4 + 2, 2000), 256, 64).unwrap(),
                stft(&noise(seed * 4 + 3, 2000), 256, 64).unwrap(),
            ];
            let got = match_speakers(&a, &b).unwrap();
            let sim = |i: usize, j: usize| {
                cosine(&a[i].flat_magnitudes(), &b[j].flat_magnitudes())
            };
            let keep = sim(0, 0) + sim(1, 1);
            let swap = sim(0, 1) + sim(1, 0);
            let want = if keep >= swap { vec![0, 1] } else { vec![1, 0] };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn match_is_scale_invariant() {
        let a = vec![
            stft(&noise(40, 2000), 256, 64).unwrap(),
            stft(&noise(41, 2000), 256, 64).unwrap(),
        ];
        let b = vec![
            stft(&noise(42, 2000), 256, 64).unwrap(),
            stft(&noise(43, 2000), 256, 64).unwrap(),
        ];
        let base = match_speakers(&a, &b).unwrap();
        let mut scaled = b.clone();
        for frame in &mut scaled[0].frames {
            for c in frame.iter_mut() {
                *c *= 7.5;
            }
        }
        assert_eq!(match_speakers(&a, &scaled).unwrap(), base);
    }

    #[test]
    fn lambda_one_reproduces_primary_within_round_trip() {
        let p = SourceSet::new(vec![noise(6, 8000), noise(7, 8000)]).unwrap();
        let r = SourceSet::new(vec![noise(8, 8000), noise(9, 8000)]).unwrap();
        let fused = linear_fuse(&p, &r, 1.0).unwrap();
        for (f, orig) in fused.sources().iter().zip(p.sources()) {
            assert_eq!(f.len(), orig.len());
            assert!(interior_rel_l2(orig, f, 256) <= 1e-4);
        }
    }

    #[test]
    fn lambda_zero_uses_reviewer_magnitude() {
        // Primary and reviewer are the same tone at different amplitudes:
        // lambda = 0 must recover the reviewer's amplitude (primary phase
        // equals reviewer phase here, so the fused signal is the reviewer).
        let p = SourceSet::new(vec![tone(500.0, 8000, 0.2), tone(900.0, 8000, 0.2)]).unwrap();
        let r = SourceSet::new(vec![tone(500.0, 8000, 0.8), tone(900.0, 8000, 0.8)]).unwrap();
        let fused = linear_fuse(&p, &r, 0.0).unwrap();
        for (f, want) in fused.sources().iter().zip(r.sources()) {
            assert!(interior_rel_l2(want, f, 256) <= 1e-3);
        }
    }

    #[test]
    fn fuse_preserves_count_length_rate() {
        let p = SourceSet::new(vec![noise(10, 4000), noise(11, 4000)]).unwrap();
        let r = SourceSet::new(vec![noise(12, 4000), noise(13, 4000)]).unwrap();
        let fused = linear_fuse(&p, &r, 0.8).unwrap();
        assert_eq!(fused.len(), 2);
        assert_eq!(fused.sample_len(), 4000);
        assert_eq!(fused.sample_rate_hz(), 8000);
    }

    fn tuple(id: &str) -> SciTuple {
        SciTuple {
            id: id.into(),
            scm_db: 7.0,
            mscm_db: 1.0,
            mix: format!("{id}.wav").into(),
            seps: vec![format!("{id}.s1.wav").into(), format!("{id}.s2.wav").into()],
            origin: Origin::Primary,
        }
    }

    #[test]
    fn hkf_empty_selection() {
        assert!(hkf_rewrite(&[], &HashMap::new()).unwrap().is_empty());
    }

    #[test]
    fn hkf_replaces_paths_keeps_scores() {
        let t = tuple("a");
        let mut map = HashMap::new();
        map.insert(
            "a".to_string(),
            vec![PathBuf::from("rev/a.s1.wav"), PathBuf::from("rev/a.s2.wav")],
        );
        let out = hkf_rewrite(&[t.clone()], &map).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, t.id);
        assert_eq!(out[0].scm_db, t.scm_db);
        assert_eq!(out[0].mscm_db, t.mscm_db);
        assert_eq!(out[0].origin, Origin::Reviewer);
        assert_eq!(out[0].seps[0], PathBuf::from("rev/a.s1.wav"));
    }

    #[test]
    fn hkf_missing_id_is_lookup_error() {
        let t = tuple("missing");
        assert!(matches!(
            hkf_rewrite(&[t], &HashMap::new()),
            Err(Error::Lookup(_))
        ));
    }
}
