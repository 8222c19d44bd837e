//! Audio front end: WAV ingest, resampling, mel spectrograms, and the
//! per-frame expression mapping with momentum and scaling.
//!
//! The mel front end follows the usual 16 kHz speech convention: 80
//! triangular filters over 0-8 kHz, 800-sample windows, 200-sample hop,
//! power spectrogram normalized by the window energy, log with a 1e-5 floor.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{forward, Graph, NamedTensors, Tensor};
use crate::error::{Error, Result};

/// Mono audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel energies, one row per analysis frame.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// Row-major, `num_frames x num_bins`.
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub num_bins: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl MelSpectrogram {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.frames[t * self.num_bins..(t + 1) * self.num_bins]
    }
}

/// Expression coefficients per video frame.
#[derive(Debug, Clone)]
pub struct ExpressionTrack {
    /// Row-major, `num_frames x k_exp`.
    pub betas: Vec<f64>,
    pub num_frames: usize,
    pub k_exp: usize,
    pub fps: f64,
    pub backend: &'static str,
}

impl ExpressionTrack {
    pub fn beta(&self, t: usize) -> &[f64] {
        &self.betas[t * self.k_exp..(t + 1) * self.k_exp]
    }
}

/// Mel front-end parameters.
#[derive(Debug, Clone, Copy)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub num_bins: usize,
    pub hop: usize,
    pub window: usize,
    pub log_floor: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            num_bins: 80,
            hop: 200,
            window: 800,
            log_floor: 1e-5,
            fmax: 8_000.0,
        }
    }
}

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

/// Load a RIFF/WAVE file: PCM 16-bit or IEEE float 32-bit, any channel
/// count (channels are averaged to mono). Integer samples scale by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::format("wav", "missing RIFF chunk id"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format("wav", "missing WAVE form type"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size =
            u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]])
                as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(Error::format(
                "wav",
                format!("chunk {:?} overruns file", String::from_utf8_lossy(id)),
            ));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("wav", "chunk \"fmt \" too short"));
                }
                let codec = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((codec, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip unknown chunks
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format("wav", "missing chunk \"fmt \""))?;
    let data = data.ok_or_else(|| Error::format("wav", "missing chunk \"data\""))?;
    if channels == 0 || rate == 0 {
        return Err(Error::format("wav", "chunk \"fmt \" has zero channels or rate"));
    }
    let ch = channels as usize;
    let samples = match (codec, bits) {
        (1, 16) => {
            let frames = data.len() / (2 * ch);
            let mut out = Vec::with_capacity(frames);
            for f in 0..frames {
                let mut acc = 0.0;
                for c in 0..ch {
                    let off = (f * ch + c) * 2;
                    let v = i16::from_le_bytes([data[off], data[off + 1]]) as f64;
                    acc += v / 32768.0;
                }
                out.push(acc / ch as f64);
            }
            out
        }
        (3, 32) => {
            let frames = data.len() / (4 * ch);
            let mut out = Vec::with_capacity(frames);
            for f in 0..frames {
                let mut acc = 0.0;
                for c in 0..ch {
                    let off = (f * ch + c) * 4;
                    let v = f32::from_le_bytes([
                        data[off],
                        data[off + 1],
                        data[off + 2],
                        data[off + 3],
                    ]);
                    acc += v as f64;
                }
                out.push(acc / ch as f64);
            }
            out
        }
        _ => {
            return Err(Error::format(
                "wav",
                format!("chunk \"fmt \": unsupported codec {codec} with {bits} bits"),
            ))
        }
    };
    if samples.is_empty() {
        return Err(Error::format("wav", "chunk \"data\" holds no samples"));
    }
    Ok(AudioClip { samples, sample_rate: rate })
}

/// Write a mono 16-bit PCM WAV; used by the CLI to materialize demo input.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf: Vec<u8> = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&clip.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

const SINC_TAPS: isize = 32; // kernel half-width in input samples

/// Windowed-sinc resampling (Hann window, 32 taps per side, edge-hold
/// boundary). Same-rate input is returned unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target_rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let n_in = clip.samples.len();
    let n_out = ((n_in as u64 * target_rate as u64) / clip.sample_rate as u64) as usize;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    // Anti-aliasing cutoff relative to the input Nyquist rate.
    let cutoff = (target_rate as f64 / clip.sample_rate as f64).min(1.0);
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = i as f64 * ratio;
        let k0 = center.floor() as isize - SINC_TAPS + 1;
        let mut acc = 0.0;
        for k in k0..k0 + 2 * SINC_TAPS {
            let tau = center - k as f64;
            let win = 0.5 + 0.5 * (std::f64::consts::PI * tau / SINC_TAPS as f64).cos();
            let arg = std::f64::consts::PI * cutoff * tau;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            let idx = k.clamp(0, n_in as isize - 1) as usize;
            acc += clip.samples[idx] * cutoff * sinc * win;
        }
        out.push(acc);
    }
    Ok(AudioClip { samples: out, sample_rate: target_rate })
}

// ---------------------------------------------------------------------------
// Mel spectrogram
// ---------------------------------------------------------------------------

/// Mel filter center frequencies in Hz (HTK mel scale, 0..fmax).
pub fn mel_filter_centers(config: &MelConfig) -> Vec<f64> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let m_max = to_mel(config.fmax);
    (1..=config.num_bins)
        .map(|i| to_hz(m_max * i as f64 / (config.num_bins + 1) as f64))
        .collect()
}

fn mel_filterbank(config: &MelConfig) -> Vec<Vec<(usize, f64)>> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let m_max = to_mel(config.fmax);
    let edges: Vec<f64> = (0..config.num_bins + 2)
        .map(|i| to_hz(m_max * i as f64 / (config.num_bins + 1) as f64))
        .collect();
    let n_fft = config.window;
    let bin_hz = config.sample_rate as f64 / n_fft as f64;
    let n_bins = n_fft / 2 + 1;
    let mut filters = Vec::with_capacity(config.num_bins);
    for m in 0..config.num_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut taps = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// STFT magnitude -> triangular mel filterbank -> log with floor. Frames are
/// centered with reflection padding; the power spectrum is normalized by the
/// squared-sample window energy so a full-scale broadband signal sits near
/// log 0.
pub fn mel_spectrogram(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    if clip.sample_rate != config.sample_rate {
        return Err(Error::invalid(format!(
            "mel_spectrogram expects {} Hz input (resample first), got {}",
            config.sample_rate, clip.sample_rate
        )));
    }
    let n = clip.samples.len();
    let win = config.window;
    if n < win {
        return Err(Error::invalid(format!(
            "clip of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let half = win / 2;
    // Reflection padding without repeating the edge sample.
    let mut padded = Vec::with_capacity(n + 2 * half);
    for i in (1..=half).rev() {
        padded.push(clip.samples[i.min(n - 1)]);
    }
    padded.extend_from_slice(&clip.samples);
    for i in 0..half {
        padded.push(clip.samples[n - 2 - i.min(n - 2)]);
    }

    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let energy_norm: f64 = window.iter().map(|w| w * w).sum();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let filters = mel_filterbank(config);

    let num_frames = n / config.hop + 1;
    let mut frames = Vec::with_capacity(num_frames * config.num_bins);
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); win];
    let n_bins = win / 2 + 1;
    let mut power = vec![0.0; n_bins];
    for t in 0..num_frames {
        let start = t * config.hop;
        for i in 0..win {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr() / energy_norm;
        }
        for taps in &filters {
            let mel: f64 = taps.iter().map(|&(k, w)| w * power[k]).sum();
            frames.push(mel.max(config.log_floor).ln());
        }
    }
    Ok(MelSpectrogram {
        frames,
        num_frames,
        num_bins: config.num_bins,
        hop_seconds: config.hop as f64 / config.sample_rate as f64,
        window_seconds: win as f64 / config.sample_rate as f64,
    })
}

/// A `window_frames x num_bins` mel slab centered on video frame `t`, with
/// edge rows held at the clip boundary.
pub fn mel_window_for_frame(
    mel: &MelSpectrogram,
    t: usize,
    fps: f64,
    window_frames: usize,
) -> Vec<f64> {
    let mel_rate = 1.0 / mel.hop_seconds;
    let center = (t as f64 / fps * mel_rate).round() as isize;
    let start = center - window_frames as isize / 2;
    let mut out = Vec::with_capacity(window_frames * mel.num_bins);
    for i in 0..window_frames as isize {
        let row = (start + i).clamp(0, mel.num_frames as isize - 1) as usize;
        out.extend_from_slice(mel.row(row));
    }
    out
}

// ---------------------------------------------------------------------------
// Audio to expression
// ---------------------------------------------------------------------------

/// Backend for the mel-window to expression mapping.
pub enum ExpressionBackend {
    /// Jaw coefficient from a monotone affine map of mean log-mel energy;
    /// all other coefficients copy the conditioning beta.
    Deterministic { beta_max: f64 },
    /// Small trained regressor over the flattened window (see
    /// `lipaint::train_audio_regressor`).
    Learned { params: NamedTensors },
}

impl ExpressionBackend {
    pub fn name(&self) -> &'static str {
        match self {
            ExpressionBackend::Deterministic { .. } => "deterministic",
            ExpressionBackend::Learned { .. } => "learned",
        }
    }
}

/// The monotone energy-to-jaw map: affine from [log log_floor, 0] onto
/// [0, beta_max], clamped.
pub fn energy_to_jaw(mean_log_mel: f64, log_floor: f64, beta_max: f64) -> f64 {
    let l0 = log_floor.ln();
    (beta_max * (mean_log_mel - l0) / -l0).clamp(0.0, beta_max)
}

/// Map one mel window to expression coefficients, conditioned on a basis
/// beta (the momentum-blended expression for the current frame).
pub fn audio_to_expression(
    backend: &ExpressionBackend,
    mel_window: &[f64],
    beta_basis: &[f64],
    config: &MelConfig,
) -> Result<Vec<f64>> {
    if mel_window.is_empty() {
        return Err(Error::invalid("empty mel window"));
    }
    match backend {
        ExpressionBackend::Deterministic { beta_max } => {
            let mean = mel_window.iter().sum::<f64>() / mel_window.len() as f64;
            let jaw = energy_to_jaw(mean, config.log_floor, *beta_max);
            if beta_basis.is_empty() {
                return Err(Error::invalid("beta_basis must have at least one component"));
            }
            let mut beta = beta_basis.to_vec();
            beta[0] = jaw;
            Ok(beta)
        }
        ExpressionBackend::Learned { params } => {
            regressor_forward(params, mel_window, beta_basis.len())
        }
    }
}

/// Evaluate the learned regressor through the graph engine.
pub(crate) fn regressor_forward(
    params: &NamedTensors,
    mel_window: &[f64],
    k_exp: usize,
) -> Result<Vec<f64>> {
    for key in ["audio2exp.w1", "audio2exp.b1", "audio2exp.w2", "audio2exp.b2"] {
        if !params.contains_key(key) {
            return Err(Error::invalid(format!(
                "learned expression backend has no trained weights ({key} missing)"
            )));
        }
    }
    let in_dim = params["audio2exp.w1"].shape()[0];
    if mel_window.len() != in_dim {
        return Err(Error::shape("audio regressor input", in_dim, mel_window.len()));
    }
    let hidden = params["audio2exp.w1"].shape()[1];
    let out_dim = params["audio2exp.w2"].shape()[1];
    if out_dim != k_exp {
        return Err(Error::shape("audio regressor output", k_exp, out_dim));
    }
    let mut g = Graph::new();
    let x = g.leaf("x", &[1, in_dim])?;
    let w1 = g.leaf("audio2exp.w1", &[in_dim, hidden])?;
    let b1 = g.leaf("audio2exp.b1", &[1, hidden])?;
    let w2 = g.leaf("audio2exp.w2", &[hidden, out_dim])?;
    let b2 = g.leaf("audio2exp.b2", &[1, out_dim])?;
    let mm1 = g.matmul(x, w1)?;
    let lin1 = g.add(mm1, b1)?;
    let act = g.leaky_relu(lin1, 0.2);
    let mm2 = g.matmul(act, w2)?;
    let out = g.add(mm2, b2)?;
    let mut binds = params.clone();
    binds.insert("x".into(), Tensor::matrix(1, in_dim, mel_window.to_vec())?);
    let eval = forward(&g, &binds)?;
    Ok(eval.value(out).data().to_vec())
}

/// Convex blend of the initial expression with the previous audio
/// expression: `(1 - alpha_m) * beta_init + alpha_m * beta_prev`.
pub fn momentum_blend(
    beta_init: &[f64],
    beta_prev_audio: &[f64],
    alpha_m: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha_m) {
        return Err(Error::invalid(format!("alpha_m must be in [0,1], got {alpha_m}")));
    }
    if beta_init.len() != beta_prev_audio.len() {
        return Err(Error::shape("momentum_blend", beta_init.len(), beta_prev_audio.len()));
    }
    Ok(beta_init
        .iter()
        .zip(beta_prev_audio)
        .map(|(&a, &b)| (1.0 - alpha_m) * a + alpha_m * b)
        .collect())
}

/// Elementwise expression scaling.
pub fn scale_expression(beta_audio: &[f64], lambda_exp: f64) -> Result<Vec<f64>> {
    if lambda_exp <= 0.0 {
        return Err(Error::invalid(format!("lambda_exp must be positive, got {lambda_exp}")));
    }
    Ok(beta_audio.iter().map(|&b| lambda_exp * b).collect())
}

/// Per-video-frame track parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrackConfig {
    pub fps: f64,
    pub alpha_m: f64,
    pub lambda_exp: f64,
    pub window_frames: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { fps: 25.0, alpha_m: 0.5, lambda_exp: 1.5, window_frames: 16 }
    }
}

/// Build the full expression track: per frame, momentum-blend the
/// conditioning beta, map the centered mel window to expression, then scale.
/// The momentum recurrence carries the unscaled audio expression.
pub fn track_from_audio(
    clip: &AudioClip,
    backend: &ExpressionBackend,
    beta_init: &[f64],
    mel_config: &MelConfig,
    track_config: &TrackConfig,
) -> Result<ExpressionTrack> {
    let num_frames = (clip.duration_seconds() * track_config.fps).floor() as usize;
    if num_frames == 0 {
        return Err(Error::invalid("clip is shorter than one video frame"));
    }
    let mel = mel_spectrogram(clip, mel_config)?;
    let k_exp = beta_init.len();
    let mut betas = Vec::with_capacity(num_frames * k_exp);
    let mut prev_audio = beta_init.to_vec();
    for t in 0..num_frames {
        let window = mel_window_for_frame(&mel, t, track_config.fps, track_config.window_frames);
        let blended = momentum_blend(beta_init, &prev_audio, track_config.alpha_m)?;
        let beta_audio = audio_to_expression(backend, &window, &blended, mel_config)?;
        let scaled = scale_expression(&beta_audio, track_config.lambda_exp)?;
        betas.extend_from_slice(&scaled);
        prev_audio = beta_audio;
    }
    Ok(ExpressionTrack { betas, num_frames, k_exp, fps: track_config.fps, backend: backend.name() })
}

/// RMS of the audio samples belonging to each video frame; used for the
/// envelope-correlation checks and the run report.
pub fn frame_rms(clip: &AudioClip, fps: f64, num_frames: usize) -> Vec<f64> {
    let spf = clip.sample_rate as f64 / fps;
    (0..num_frames)
        .map(|t| {
            let start = (t as f64 * spf) as usize;
            let end = (((t + 1) as f64 * spf) as usize).min(clip.samples.len());
            if end <= start {
                return 0.0;
            }
            let sum: f64 = clip.samples[start..end].iter().map(|s| s * s).sum();
            (sum / (end - start) as f64).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, rate: u32, seconds: f64, amp: f64) -> AudioClip {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip { samples, sample_rate: rate }
    }

    fn noise(rate: u32, seconds: f64, amp: f64, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n).map(|_| amp * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        AudioClip { samples, sample_rate: rate }
    }

    #[test]
    fn silence_wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let clip = AudioClip { samples: vec![0.0; 16_000], sample_rate: 16_000 };
        write_wav(&path, &clip).unwrap();
        let loaded = load_wav(&path).unwrap();
        assert_eq!(loaded.sample_rate, 16_000);
        assert_eq!(loaded.samples.len(), 16_000);
        assert!(loaded.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_opposite_channels_cancel() {
        // Hand-build a stereo 16-bit file with channels (+0.5, -0.5).
        let n = 100usize;
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + n as u32 * 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&(n as u32 * 4).to_le_bytes());
        let half_scale = (0.5 * 32768.0) as i16;
        for _ in 0..n {
            bytes.extend_from_slice(&half_scale.to_le_bytes());
            bytes.extend_from_slice(&(-half_scale).to_le_bytes());
        }
        let clip = decode_wav(&bytes).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_sample_scaling() {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + 2u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&32767i16.to_le_bytes());
        let clip = decode_wav(&bytes).unwrap();
        assert!((clip.samples[0] - 32767.0 / 32768.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_riff_names_chunk() {
        let err = decode_wav(b"JUNKxxxxWAVE").unwrap_err();
        assert!(err.to_string().contains("RIFF"), "{err}");
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&7u16.to_le_bytes()); // mu-law: unsupported
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = decode_wav(&bytes).unwrap_err();
        assert!(err.to_string().contains("fmt"), "{err}");
    }

    #[test]
    fn same_rate_resample_is_identity() {
        let clip = sine(440.0, 16_000, 0.5, 0.8);
        let out = resample(&clip, 16_000).unwrap();
        assert_eq!(out.samples, clip.samples);
    }

    #[test]
    fn resample_preserves_dominant_frequency() {
        let clip = sine(440.0, 48_000, 0.5, 0.8);
        let out = resample(&clip, 16_000).unwrap();
        assert_eq!(out.sample_rate, 16_000);
        let dur_diff = (out.duration_seconds() - clip.duration_seconds()).abs();
        assert!(dur_diff <= 1.0 / 16_000.0 + 1e-12);
        // DFT peak oracle on the resampled signal.
        let n = out.samples.len();
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &s) in out.samples.iter().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64;
                re += s * ph.cos();
                im -= s * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (k, mag);
            }
        }
        let freq = best.0 as f64 * 16_000.0 / n as f64;
        assert!((freq - 440.0).abs() < 16_000.0 / n as f64 * 1.5, "peak at {freq}");
    }

    #[test]
    fn resample_preserves_dc() {
        let clip = AudioClip { samples: vec![0.3; 48_000], sample_rate: 48_000 };
        let out = resample(&clip, 16_000).unwrap();
        for &s in &out.samples {
            assert!((s - 0.3).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn silence_mel_is_log_floor() {
        let clip = AudioClip { samples: vec![0.0; 16_000], sample_rate: 16_000 };
        let config = MelConfig::default();
        let mel = mel_spectrogram(&clip, &config).unwrap();
        let floor = config.log_floor.ln();
        assert!(mel.frames.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip { samples: vec![0.1; 300], sample_rate: 16_000 };
        assert!(mel_spectrogram(&clip, &MelConfig::default()).is_err());
    }

    #[test]
    fn sine_peaks_at_nearest_mel_bin() {
        let config = MelConfig::default();
        let clip = sine(440.0, 16_000, 1.0, 0.9);
        let mel = mel_spectrogram(&clip, &config).unwrap();
        let centers = mel_filter_centers(&config);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        // Check interior frames (edges see the reflection padding).
        for t in 4..mel.num_frames - 4 {
            let row = mel.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                (argmax as isize - expected as isize).abs() <= 1,
                "frame {t}: argmax {argmax} vs filter nearest 440 Hz {expected}"
            );
        }
    }

    #[test]
    fn doubling_amplitude_shifts_log_by_log4() {
        let config = MelConfig::default();
        let a = noise(16_000, 1.0, 0.2, 99);
        let mut b = a.clone();
        for s in b.samples.iter_mut() {
            *s *= 2.0;
        }
        let mel_a = mel_spectrogram(&a, &config).unwrap();
        let mel_b = mel_spectrogram(&b, &config).unwrap();
        let log4 = 4.0_f64.ln();
        for (va, vb) in mel_a.frames.iter().zip(&mel_b.frames) {
            // Only meaningful where neither side hits the floor.
            if *va > config.log_floor.ln() + 0.1 {
                assert!((vb - va - log4).abs() < 1e-6, "{va} -> {vb}");
            }
        }
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let config = MelConfig::default();
        let clip = noise(16_000, 1.0, 0.5, 5);
        let mut delayed_samples = vec![0.0; config.hop];
        delayed_samples.extend_from_slice(&clip.samples);
        let delayed = AudioClip { samples: delayed_samples, sample_rate: 16_000 };
        let mel_a = mel_spectrogram(&clip, &config).unwrap();
        let mel_b = mel_spectrogram(&delayed, &config).unwrap();
        // Interior frames: frame t of the original equals frame t+1 delayed.
        for t in 3..mel_a.num_frames - 3 {
            for (va, vb) in mel_a.row(t).iter().zip(mel_b.row(t + 1)) {
                assert!((va - vb).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_backend_conventions() {
        let config = MelConfig::default();
        let backend = ExpressionBackend::Deterministic { beta_max: 1.0 };
        let floor_row = vec![config.log_floor.ln(); 16 * config.num_bins];
        let basis = vec![0.0, 0.1, -0.2, 0.3, 0.0, 0.05];
        let beta = audio_to_expression(&backend, &floor_row, &basis, &config).unwrap();
        assert_eq!(beta[0], 0.0);
        assert_eq!(&beta[1..], &basis[1..]);

        // Monotonicity in window energy.
        let quiet = vec![-6.0; 16 * config.num_bins];
        let loud = vec![-2.0; 16 * config.num_bins];
        let b_quiet = audio_to_expression(&backend, &quiet, &basis, &config).unwrap();
        let b_loud = audio_to_expression(&backend, &loud, &basis, &config).unwrap();
        assert!(b_loud[0] >= b_quiet[0]);
    }

    #[test]
    fn learned_backend_without_weights_errors() {
        let backend = ExpressionBackend::Learned { params: NamedTensors::new() };
        let config = MelConfig::default();
        let window = vec![0.0; 16 * config.num_bins];
        assert!(audio_to_expression(&backend, &window, &[0.0; 6], &config).is_err());
    }

    #[test]
    fn full_scale_noise_saturates_jaw() {
        let config = MelConfig::default();
        let backend = ExpressionBackend::Deterministic { beta_max: 1.0 };
        let clip = noise(16_000, 1.0, 1.0, 17);
        let mel = mel_spectrogram(&clip, &config).unwrap();
        let window = mel_window_for_frame(&mel, 12, 25.0, 16);
        // Oracle: evaluate the map at the measured mean log-mel energy.
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let expected = energy_to_jaw(mean, config.log_floor, 1.0);
        let beta = audio_to_expression(&backend, &window, &vec![0.0; 6], &config).unwrap();
        assert_eq!(beta[0], expected);
        assert!(beta[0] > 0.95, "full-scale noise jaw {}", beta[0]);
    }

    #[test]
    fn momentum_blend_limits() {
        let init = vec![0.0, 0.5, -0.5];
        let prev = vec![1.0, 1.0, 1.0];
        assert_eq!(momentum_blend(&init, &prev, 0.0).unwrap(), init);
        assert_eq!(momentum_blend(&init, &prev, 1.0).unwrap(), prev);
        let mid = momentum_blend(&vec![0.0; 4], &vec![1.0; 4], 0.5).unwrap();
        assert_eq!(mid, vec![0.5; 4]);
        assert!(momentum_blend(&init, &prev, 1.5).is_err());
    }

    #[test]
    fn scale_expression_arithmetic() {
        let beta = vec![0.2, -0.4, 0.0];
        assert_eq!(scale_expression(&beta, 1.0).unwrap(), beta);
        let scaled = scale_expression(&beta, 1.5).unwrap();
        assert!((scaled[0] - 0.3).abs() < 1e-15);
        assert!((scaled[1] + 0.6).abs() < 1e-15);
        assert_eq!(scale_expression(&[0.0, 0.0], 1.5).unwrap(), vec![0.0, 0.0]);
        assert!(scale_expression(&beta, 0.0).is_err());
    }

    #[test]
    fn momentum_and_scale_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
            let c: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
            let alpha = rng.gen::<f64>();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = momentum_blend(&ab, &c, alpha).unwrap();
            let r1 = momentum_blend(&a, &c, alpha).unwrap();
            let r2 = momentum_blend(&b, &vec![0.0; 5], alpha).unwrap();
            for i in 0..5 {
                assert!((lhs[i] - (r1[i] + r2[i])).abs() < 1e-12);
            }
            let lam = 0.5 + rng.gen::<f64>();
            let s_ab = scale_expression(&ab, lam).unwrap();
            let s_a = scale_expression(&a, lam).unwrap();
            let s_b = scale_expression(&b, lam).unwrap();
            for i in 0..5 {
                assert!((s_ab[i] - (s_a[i] + s_b[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eight_second_clip_yields_200_frames() {
        let clip = AudioClip { samples: vec![0.0; 16_000 * 8], sample_rate: 16_000 };
        let backend = ExpressionBackend::Deterministic { beta_max: 1.0 };
        let track = track_from_audio(
            &clip,
            &backend,
            &vec![0.0; 6],
            &MelConfig::default(),
            &TrackConfig::default(),
        )
        .unwrap();
        assert_eq!(track.num_frames, 200);
        // Silence keeps the jaw closed on every frame.
        for t in 0..track.num_frames {
            assert_eq!(track.beta(t)[0], 0.0);
        }
    }

    #[test]
    fn track_is_deterministic() {
        let clip = noise(16_000, 1.0, 0.6, 8);
        let backend = ExpressionBackend::Deterministic { beta_max: 1.0 };
        let t1 = track_from_audio(
            &clip,
            &backend,
            &vec![0.0; 6],
            &MelConfig::default(),
            &TrackConfig::default(),
        )
        .unwrap();
        let t2 = track_from_audio(
            &clip,
            &backend,
            &vec![0.0; 6],
            &MelConfig::default(),
            &TrackConfig::default(),
        )
        .unwrap();
        assert_eq!(t1.betas, t2.betas);
    }

    #[test]
    fn amplitude_modulated_noise_tracks_envelope() {
        // Modulation depth chosen to stay out of the clamp region.
        let rate = 16_000u32;
        let mut clip = noise(rate, 4.0, 1.0, 23);
        for (i, s) in clip.samples.iter_mut().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * 1.5 * i as f64 / rate as f64;
            let env = 0.45 + 0.28 * phase.sin();
            *s *= env;
        }
        let backend = ExpressionBackend::Deterministic { beta_max: 1.0 };
        let track = track_from_audio(
            &clip,
            &backend,
            &vec![0.0; 6],
            &MelConfig::default(),
            &TrackConfig::default(),
        )
        .unwrap();
        let jaw: Vec<f64> = (0..track.num_frames).map(|t| track.beta(t)[0]).collect();
        let rms = frame_rms(&clip, 25.0, track.num_frames);
        let r = crate::metrics::envelope_correlation(&jaw, &rms).unwrap();
        assert!(r > 0.9, "audio-jaw correlation {r}");
    }
}
