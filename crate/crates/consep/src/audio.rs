//! Waveform loading, saving, resampling, and shaping.
//!
//! Everything downstream operates on mono [`Waveform`]s at a single project
//! rate (8 kHz by default), so this module normalizes whatever WAV input it
//! is handed: stereo is downmixed, PCM16 is rescaled to [-1, 1), and other
//! rates go through a windowed-sinc resampler.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default project sample rate in Hz.
pub const DEFAULT_RATE_HZ: u32 = 8000;

/// Mono sampled signal. Samples are dimensionless amplitudes, nominally in
/// [-1, 1]; the constructors reject NaN/Inf and empty signals.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

/// WAV sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Shape("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Shape("waveform must contain at least one sample".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::DegenerateSignal("waveform contains NaN or Inf".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    /// Samples scaled by a constant factor.
    pub fn scaled(&self, factor: f32) -> Result<Waveform> {
        Waveform::new(
            self.samples.iter().map(|&s| s * factor).collect(),
            self.sample_rate_hz,
        )
    }
}

const RIFF: &[u8; 4] = b"RIFF";
const WAVE: &[u8; 4] = b"WAVE";
const FMT: &[u8; 4] = b"fmt ";
const DATA: &[u8; 4] = b"data";

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Read a RIFF/WAVE file containing PCM16 or IEEE float32 samples in one or
/// two channels. Stereo is downmixed by channel average; integer samples are
/// scaled to [-1, 1) by dividing by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);

    let mut tag = [0u8; 4];
    rd.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
    if &tag != RIFF {
        return Err(Error::format(path, "missing RIFF tag"));
    }
    rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    rd.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
    if &tag != WAVE {
        return Err(Error::format(path, "missing WAVE tag"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    loop {
        let mut chunk_id = [0u8; 4];
        if rd.read_exact(&mut chunk_id).is_err() {
            return Err(Error::format(path, "no data chunk found"));
        }
        let size = rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if &chunk_id == FMT {
            if size < 16 {
                return Err(Error::format(path, "fmt chunk too small"));
            }
            let format = rd.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            let channels = rd.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            let rate = rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?; // byte rate
            rd.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?; // block align
            let bits = rd.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            if size > 16 {
                rd.seek(SeekFrom::Current((size - 16) as i64))
                    .map_err(|e| Error::io(path, e))?;
            }
            fmt = Some((format, channels, rate, bits));
        } else if &chunk_id == DATA {
            let (format, channels, rate, bits) =
                fmt.ok_or_else(|| Error::format(path, "data chunk before fmt chunk"))?;
            if !(1..=2).contains(&channels) {
                return Err(Error::format(
                    path,
                    format!("unsupported channel count {channels}"),
                ));
            }
            let interleaved = read_data_chunk(&mut rd, path, format, bits, size as usize)?;
            let mono = downmix(&interleaved, channels as usize);
            return Waveform::new(mono, rate);
        } else {
            // Skip unknown chunks (LIST, fact, ...); chunks are word-aligned.
            let skip = size as i64 + (size % 2) as i64;
            rd.seek(SeekFrom::Current(skip)).map_err(|e| Error::io(path, e))?;
        }
    }
}

fn read_data_chunk(
    rd: &mut impl Read,
    path: &Path,
    format: u16,
    bits: u16,
    size: usize,
) -> Result<Vec<f32>> {
    match (format, bits) {
        (FORMAT_PCM, 16) => {
            let n = size / 2;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let v = rd
                    .read_i16::<LittleEndian>()
                    .map_err(|e| Error::io(path, e))?;
                out.push(v as f32 / 32768.0);
            }
            Ok(out)
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            let n = size / 4;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let v = rd
                    .read_f32::<LittleEndian>()
                    .map_err(|e| Error::io(path, e))?;
                out.push(v);
            }
            Ok(out)
        }
        _ => Err(Error::format(
            path,
            format!("unsupported codec: format tag {format}, {bits} bits"),
        )),
    }
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Write a mono WAV file. PCM16 clips samples outside [-1, 1) before
/// quantizing; float32 is lossless for inputs already in f32.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wr = BufWriter::new(file);

    let (format, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16),
        WavEncoding::Float32 => (FORMAT_IEEE_FLOAT, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_size = w.len() as u32 * bytes_per_sample;

    wr.write_all(RIFF).map_err(|e| Error::io(path, e))?;
    wr.write_u32::<LittleEndian>(36 + data_size)
        .map_err(|e| Error::io(path, e))?;
    wr.write_all(WAVE).map_err(|e| Error::io(path, e))?;
    wr.write_all(FMT).map_err(|e| Error::io(path, e))?;
    wr.write_u32::<LittleEndian>(16).map_err(|e| Error::io(path, e))?;
    wr.write_u16::<LittleEndian>(format).map_err(|e| Error::io(path, e))?;
    wr.write_u16::<LittleEndian>(1).map_err(|e| Error::io(path, e))?;
    wr.write_u32::<LittleEndian>(w.sample_rate_hz())
        .map_err(|e| Error::io(path, e))?;
    wr.write_u32::<LittleEndian>(w.sample_rate_hz() * bytes_per_sample)
        .map_err(|e| Error::io(path, e))?;
    wr.write_u16::<LittleEndian>(bytes_per_sample as u16)
        .map_err(|e| Error::io(path, e))?;
    wr.write_u16::<LittleEndian>(bits).map_err(|e| Error::io(path, e))?;
    wr.write_all(DATA).map_err(|e| Error::io(path, e))?;
    wr.write_u32::<LittleEndian>(data_size)
        .map_err(|e| Error::io(path, e))?;

    match encoding {
        WavEncoding::Pcm16 => {
            for &s in w.samples() {
                let clipped = s.clamp(-1.0, 32767.0 / 32768.0);
                let q = (clipped as f64 * 32768.0).round() as i32;
                let q = q.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
                wr.write_i16::<LittleEndian>(q).map_err(|e| Error::io(path, e))?;
            }
        }
        WavEncoding::Float32 => {
            for &s in w.samples() {
                wr.write_f32::<LittleEndian>(s).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

// Zeroth-order modified Bessel function, power series.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..64 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-14 * sum {
            break;
        }
    }
    sum
}

const KAISER_BETA: f64 = 8.0;
const SINC_HALF_TAPS: f64 = 32.0;

fn kaiser(x: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel (beta = 8,
/// 64 taps at unit rate ratio, widened proportionally when downsampling).
/// Output length is round(len * target / source). Identity when the rates
/// already match.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::Shape("target rate must be positive".into()));
    }
    if target_hz == w.sample_rate_hz() {
        return Ok(w.clone());
    }
    let src = w.sample_rate_hz() as f64;
    let tgt = target_hz as f64;
    let ratio = tgt / src;
    let out_len = ((w.len() as f64 * tgt / src).round() as usize).max(1);

    // Cutoff relative to the input Nyquist; widen the kernel when
    // downsampling so the transition band scales with the cutoff.
    let fc = ratio.min(1.0);
    let half = SINC_HALF_TAPS / fc;

    let x = w.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let k0 = (t - half).ceil() as i64;
        let k1 = (t + half).floor() as i64;
        let mut acc = 0.0f64;
        for k in k0..=k1 {
            if k < 0 || k >= x.len() as i64 {
                continue;
            }
            let d = t - k as f64;
            let sinc = if d.abs() < 1e-12 {
                1.0
            } else {
                let a = std::f64::consts::PI * fc * d;
                a.sin() / a
            };
            acc += x[k as usize] as f64 * fc * sinc * kaiser(d / half);
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_hz)
}

/// Cut or zero-pad a waveform to an exact duration. Longer inputs keep a
/// contiguous segment whose offset is drawn uniformly from the seeded RNG;
/// shorter inputs are padded with zeros at the tail. Idempotent for inputs
/// already at the target length.
pub fn clamp_or_pad(w: &Waveform, seconds: f64, offset_seed: u64) -> Result<Waveform> {
    if seconds <= 0.0 {
        return Err(Error::Shape("duration must be positive".into()));
    }
    let target = ((seconds * w.sample_rate_hz() as f64).round() as usize).max(1);
    let n = w.len();
    if n == target {
        return Ok(w.clone());
    }
    if n > target {
        let mut rng = ChaCha8Rng::seed_from_u64(offset_seed);
        let offset = rng.gen_range(0..=(n - target));
        Waveform::new(
            w.samples()[offset..offset + target].to_vec(),
            w.sample_rate_hz(),
        )
    } else {
        let mut samples = w.samples().to_vec();
        samples.resize(target, 0.0);
        Waveform::new(samples, w.sample_rate_hz())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let samples = (0..len)
            .map(|n| (amp * (2.0 * PI * freq * n as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn pcm16_exact_scaling() {
        let dir = tmpdir();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.5, -0.5], 8000).unwrap();
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();

        // Raw bytes decode to [16384, -16384].
        let bytes = std::fs::read(&path).unwrap();
        let data = &bytes[44..];
        let v0 = i16::from_le_bytes([data[0], data[1]]);
        let v1 = i16::from_le_bytes([data[2], data[3]]);
        assert_eq!((v0, v1), (16384, -16384));

        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), &[0.5, -0.5]);
    }

    #[test]
    fn pcm16_clips_out_of_range() {
        let dir = tmpdir();
        let path = dir.path().join("clip.wav");
        let w = Waveform::new(vec![1.5, -2.0], 8000).unwrap();
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let data = &bytes[44..];
        assert_eq!(i16::from_le_bytes([data[0], data[1]]), 32767);
        assert_eq!(i16::from_le_bytes([data[2], data[3]]), -32768);
    }

    #[test]
    fn stereo_downmix_average() {
        let dir = tmpdir();
        let path = dir.path().join("st.wav");
        // Hand-build a stereo float32 file with channels [1.0] and [0.0].
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&(8000u32 * 8).to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let w = read_wav(&path).unwrap();
        assert_eq!(w.samples(), &[0.5]);
    }

    #[test]
    fn float32_round_trip() {
        use rand::Rng;
        let dir = tmpdir();
        let path = dir.path().join("f32.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f32> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz(), 8000);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tmpdir();
        let path = dir.path().join("trunc.wav");
        let good = dir.path().join("good.wav");
        let w = sine(440.0, 8000, 1000, 0.5);
        write_wav(&good, &w, WavEncoding::Pcm16).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn unsupported_bit_depth_is_format_error() {
        let dir = tmpdir();
        let path = dir.path().join("u8.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes()); // 8-bit PCM unsupported
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8, 0u8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let w = sine(440.0, 8000, 800, 0.5);
        let r = resample(&w, 8000).unwrap();
        assert_eq!(r.samples(), w.samples());
    }

    #[test]
    fn resample_length_formula() {
        let w = sine(440.0, 16000, 16000, 0.5);
        let r = resample(&w, 8000).unwrap();
        assert_eq!(r.len(), 8000);
        assert_eq!(r.sample_rate_hz(), 8000);
    }

    #[test]
    fn resample_sine_oracle() {
        // 1 kHz sine at 16 kHz resampled to 8 kHz must still be the analytic
        // 1 kHz sine, ignoring 32 edge samples on each side.
        let w = sine(1000.0, 16000, 16000, 0.7);
        let r = resample(&w, 8000).unwrap();
        for n in 32..r.len() - 32 {
            let expected = 0.7 * (2.0 * PI * 1000.0 * n as f64 / 8000.0).sin();
            let err = (r.samples()[n] as f64 - expected).abs();
            assert!(err <= 1e-3, "sample {n}: err {err}");
        }
    }

    #[test]
    fn resample_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let y: Vec<f32> = (0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (a, b) = (0.3f32, -0.6f32);
        let mixed: Vec<f32> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let wx = Waveform::new(x, 16000).unwrap();
        let wy = Waveform::new(y, 16000).unwrap();
        let wm = Waveform::new(mixed, 16000).unwrap();
        let rm = resample(&wm, 8000).unwrap();
        let rx = resample(&wx, 8000).unwrap();
        let ry = resample(&wy, 8000).unwrap();
        for i in 0..rm.len() {
            let lhs = rm.samples()[i];
            let rhs = a * rx.samples()[i] + b * ry.samples()[i];
            assert!((lhs - rhs).abs() <= 1e-6);
        }
    }

    #[test]
    fn clamp_longer_input() {
        let w = sine(440.0, 8000, 48000, 0.5); // 6 s
        let c = clamp_or_pad(&w, 4.0, 42).unwrap();
        assert_eq!(c.len(), 32000);
        // Contiguous slice of the input.
        let start = w
            .samples()
            .windows(c.len())
            .position(|win| win == c.samples());
        assert!(start.is_some());
    }

    #[test]
    fn pad_shorter_input() {
        let w = sine(440.0, 8000, 16000, 0.5); // 2 s
        let c = clamp_or_pad(&w, 4.0, 0).unwrap();
        assert_eq!(c.len(), 32000);
        assert_eq!(&c.samples()[..16000], w.samples());
        assert!(c.samples()[16000..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn clamp_is_idempotent_at_target_length() {
        let w = sine(440.0, 8000, 32000, 0.5);
        let c = clamp_or_pad(&w, 4.0, 1).unwrap();
        assert_eq!(c.samples(), w.samples());
    }
}
