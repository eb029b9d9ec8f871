//! Spectral front-end: STFT magnitudes, HTK mel projection with log
//! compression, WAV input, and a toy latent codec that halves the frame rate.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::flow::LatentSeq;

/// Floor added before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file, scaling samples to `[-1, 1)`.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "{}: expected mono 16-bit PCM, found {} channel(s), {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Waveform::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub win_len: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl StftParams {
    pub const SR16K: StftParams = StftParams {
        n_fft: 1024,
        hop: 256,
        win_len: 1024,
        n_mels: 80,
        sample_rate: 16_000,
    };

    pub const SR44K: StftParams = StftParams {
        n_fft: 2048,
        hop: 512,
        win_len: 2048,
        n_mels: 128,
        sample_rate: 44_100,
    };

    pub fn for_rate(sample_rate: u32) -> Result<Self> {
        match sample_rate {
            16_000 => Ok(Self::SR16K),
            44_100 => Ok(Self::SR44K),
            other => Err(Error::Config(format!("no STFT preset for {other} Hz (use 16000 or 44100)"))),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_fps(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Latent rate after the codec's factor-2 downsampling.
    pub fn latent_fps(&self) -> f64 {
        self.frame_fps() / 2.0
    }

    /// `1 + floor((len - win) / hop)`; no padding at the clip edges.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if len < self.win_len {
            return Err(Error::InputTooShort {
                got: len,
                need: self.win_len,
            });
        }
        Ok(1 + (len - self.win_len) / self.hop)
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed magnitude spectra, one row per frame.
pub fn stft_magnitude(w: &Waveform, p: &StftParams) -> Result<Array2<f64>> {
    let n_frames = p.n_frames(w.samples.len())?;
    let window = hann(p.win_len);
    let offset = (p.n_fft - p.win_len) / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.n_fft);
    let mut out = Array2::zeros((n_frames, p.n_bins()));
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    for f in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = f * p.hop;
        for (i, &wv) in window.iter().enumerate() {
            buf[offset + i].re = w.samples[start + i] * wv;
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(p.n_bins()).enumerate() {
            out[[f, k]] = c.norm();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale from 0 Hz to
/// Nyquist, shaped `(n_bins, n_mels)`; filter `i` peaks at mel point `i + 1`.
pub fn mel_filterbank(p: &StftParams) -> Array2<f64> {
    let nyquist = p.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..p.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (p.n_mels + 1) as f64))
        .collect();
    let bin_hz = p.sample_rate as f64 / p.n_fft as f64;
    Array2::from_shape_fn((p.n_bins(), p.n_mels), |(k, m)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (mid - lo);
        let down = (hi - f) / (hi - mid);
        up.min(down).max(0.0)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Log-compressed energies, `(n_frames, n_mels)`.
    pub data: Array2<f64>,
    pub params: StftParams,
}

impl MelSpectrogram {
    pub fn fps(&self) -> f64 {
        self.params.frame_fps()
    }
}

/// Mel projection followed by `ln(1e-5 + x)`.
pub fn mel_project(spec: ArrayView2<'_, f64>, p: &StftParams) -> Result<MelSpectrogram> {
    if spec.ncols() != p.n_bins() {
        return Err(Error::shape(
            "mel projection",
            format!("{} spectrum columns, expected {}", spec.ncols(), p.n_bins()),
        ));
    }
    let fb = mel_filterbank(p);
    let data = spec.dot(&fb).mapv(|x| (LOG_FLOOR + x).ln());
    Ok(MelSpectrogram { data, params: *p })
}

pub fn mel_spectrogram(w: &Waveform, p: &StftParams) -> Result<MelSpectrogram> {
    let spec = stft_magnitude(w, p)?;
    mel_project(spec.view(), p)
}

/// Stand-in for a learned autoencoder: pairs of mel frames are stacked and
/// mapped by a fixed orthonormal projection to `latent_dim` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    /// `(2 * n_mels, latent_dim)` with orthonormal columns.
    pub proj: Array2<f64>,
    pub params: StftParams,
}

impl ToyCodec {
    pub fn new(p: &StftParams, latent_dim: usize, seed: u64) -> Result<Self> {
        let rows = 2 * p.n_mels;
        if latent_dim == 0 || latent_dim > rows {
            return Err(Error::Config(format!(
                "latent_dim must lie in 1..={rows} for {} mel bands",
                p.n_mels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(rows, latent_dim, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let proj = Array2::from_shape_fn((rows, latent_dim), |(i, j)| q[(i, j)]);
        Ok(ToyCodec { proj, params: *p })
    }

    pub fn latent_dim(&self) -> usize {
        self.proj.ncols()
    }

    /// Halves the frame rate; an odd last frame is padded by repetition.
    pub fn encode(&self, mel: &MelSpectrogram) -> LatentSeq<f64> {
        let n_mels = self.params.n_mels;
        let n = mel.data.nrows();
        let pairs = n.div_ceil(2);
        let stacked = Array2::from_shape_fn((pairs, 2 * n_mels), |(i, c)| {
            let frame = (2 * i + c / n_mels).min(n - 1);
            mel.data[[frame, c % n_mels]]
        });
        LatentSeq::new(stacked.dot(&self.proj), mel.fps() / 2.0)
    }

    pub fn decode(&self, z: &LatentSeq<f64>) -> MelSpectrogram {
        let n_mels = self.params.n_mels;
        let stacked = z.data.dot(&self.proj.t());
        let data = Array2::from_shape_fn((2 * z.len(), n_mels), |(f, c)| {
            stacked[[f / 2, (f % 2) * n_mels + c]]
        });
        MelSpectrogram {
            data,
            params: self.params,
        }
    }
}
