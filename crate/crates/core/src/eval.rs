//! Objective metrics: multi-resolution STFT distance, YIN pitch tracking,
//! periodicity / voicing / pitch errors, and generation speed accounting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ode_sample, standard_normal, CountingField, TimeGrid, VectorField};
use crate::signal::{AudioBuffer, MelSpectrogram, Window, LOG_FLOOR};

/// One analysis resolution of the M-STFT distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MstftResolution {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

pub const MSTFT_RESOLUTIONS: [MstftResolution; 3] = [
    MstftResolution { n_fft: 512, hop: 50, win: 240 },
    MstftResolution { n_fft: 1024, hop: 120, win: 600 },
    MstftResolution { n_fft: 2048, hop: 240, win: 1200 },
];

/// Magnitude frames `(frames, bins)` with a centered Hann window and
/// `n_fft / 2` reflect padding on both sides.
fn stft_magnitude(x: &[f64], res: MstftResolution) -> Vec<Vec<f64>> {
    let n = res.n_fft;
    let pad = n / 2;
    let len = x.len();
    let reflect = |i: isize| -> f64 {
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len as isize {
            i = 2 * (len as isize - 1) - i;
        }
        x[i.clamp(0, len as isize - 1) as usize]
    };
    let window = Window::Hann.coefficients(res.win);
    let offset = (n - res.win) / 2;
    let frames = len / res.hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::default(); n];
    (0..frames)
        .map(|t| {
            let start = (t * res.hop) as isize - pad as isize;
            buf.fill(Complex64::default());
            for (j, w) in window.iter().enumerate() {
                let i = start + (offset + j) as isize;
                buf[offset + j] = Complex64::new(w * reflect(i), 0.0);
            }
            fft.process(&mut buf);
            buf[..n / 2 + 1].iter().map(|z| z.norm()).collect()
        })
        .collect()
}

fn matched_length(x: &AudioBuffer, x_hat: &AudioBuffer) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = x.samples().iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = x_hat.samples().iter().map(|&v| v as f64).collect();
    b.resize(a.len(), 0.0);
    (a, b)
}

/// Spectral convergence plus mean log-magnitude L1 at one resolution.
pub fn mstft_resolution_distance(x: &[f64], x_hat: &[f64], res: MstftResolution) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", x.len(), x_hat.len())));
    }
    if x.len() <= res.n_fft / 2 {
        return Err(Error::Length(format!(
            "m-stft with n_fft {} needs more than {} samples, got {}",
            res.n_fft,
            res.n_fft / 2,
            x.len()
        )));
    }
    let y = stft_magnitude(x, res);
    let y_hat = stft_magnitude(x_hat, res);
    let (mut diff, mut norm, mut log_l1, mut count) = (0f64, 0f64, 0f64, 0usize);
    for (row, row_hat) in y.iter().zip(&y_hat) {
        for (&m, &m_hat) in row.iter().zip(row_hat) {
            diff += (m - m_hat).powi(2);
            norm += m * m;
            log_l1 += (m.max(LOG_FLOOR).ln() - m_hat.max(LOG_FLOOR).ln()).abs();
            count += 1;
        }
    }
    let sc = if diff == 0.0 { 0.0 } else { diff.sqrt() / norm.sqrt().max(1e-8) };
    Ok(sc + log_l1 / count as f64)
}

/// Mean over [`MSTFT_RESOLUTIONS`] of spectral convergence plus log-magnitude
/// L1. `x_hat` is trimmed or zero-padded to the length of `x`.
pub fn mstft_distance(x: &AudioBuffer, x_hat: &AudioBuffer) -> Result<f64> {
    let largest = MSTFT_RESOLUTIONS.iter().map(|r| r.win).max().unwrap_or(0);
    if x.len() < largest {
        return Err(Error::Length(format!(
            "m-stft needs at least {largest} samples, got {}",
            x.len()
        )));
    }
    let (a, b) = matched_length(x, x_hat);
    let mut total = 0.0;
    for res in MSTFT_RESOLUTIONS {
        total += mstft_resolution_distance(&a, &b, res)?;
    }
    Ok(total / MSTFT_RESOLUTIONS.len() as f64)
}

/// Lowest and highest detectable f0 in Hz.
pub const PITCH_F_MIN: f64 = 50.0;
pub const PITCH_F_MAX: f64 = 800.0;
/// Largest normalized difference accepted as voiced.
pub const VOICING_THRESHOLD: f64 = 0.2;
/// Frames quieter than this RMS are unvoiced regardless of periodicity.
pub const ENERGY_GATE: f64 = 1e-3;

/// Per-frame pitch analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    /// Hz, 0 for unvoiced frames.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    /// `1 − min d′` in `[0, 1]`, 0 for gated frames.
    pub periodicity: Vec<f64>,
    /// Samples between frame centres.
    pub hop: usize,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_f0(&self) -> Vec<f64> {
        self.f0.iter().copied().filter(|&f| f > 0.0).collect()
    }
}

/// YIN f0 tracker. Frame `t` is centred on sample `t·hop` (zero-padded at the
/// edges) and analyses `2·τ_max` samples, `τ_max = sr / 50 Hz`. The lag is
/// the first dip below [`VOICING_THRESHOLD`] (or the global minimum of the
/// cumulative-mean-normalized difference `d′`), refined by parabolic
/// interpolation.
pub fn extract_pitch(audio: &AudioBuffer, frame_hop: usize) -> PitchTrack {
    let hop = frame_hop.max(1);
    let sr = audio.sample_rate() as f64;
    let tau_max = (sr / PITCH_F_MIN).ceil() as usize;
    let tau_min = ((sr / PITCH_F_MAX).floor() as usize).max(2);
    let w = tau_max;
    let frame_len = w + tau_max + 1;
    let x = audio.samples();
    let frames = x.len() / hop + 1;
    let mut frame = vec![0f64; frame_len];
    let mut d = vec![0f64; tau_max + 2];
    let mut dn = vec![1f64; tau_max + 2];
    let mut track = PitchTrack {
        f0: Vec::with_capacity(frames),
        voiced: Vec::with_capacity(frames),
        periodicity: Vec::with_capacity(frames),
        hop,
    };
    for t in 0..frames {
        let start = (t * hop) as isize - (frame_len / 2) as isize;
        for (j, v) in frame.iter_mut().enumerate() {
            let i = start + j as isize;
            *v = if i >= 0 && (i as usize) < x.len() { x[i as usize] as f64 } else { 0.0 };
        }
        let rms = (frame[..w].iter().map(|v| v * v).sum::<f64>() / w as f64).sqrt();
        if rms < ENERGY_GATE {
            track.f0.push(0.0);
            track.voiced.push(false);
            track.periodicity.push(0.0);
            continue;
        }
        let mut cumulative = 0.0;
        for tau in 1..=tau_max + 1 {
            d[tau] = (0..w).map(|j| (frame[j] - frame[j + tau]).powi(2)).sum();
            cumulative += d[tau];
            dn[tau] = if cumulative > 0.0 { d[tau] * tau as f64 / cumulative } else { 1.0 };
        }
        let (global, global_val) = (tau_min..=tau_max)
            .map(|tau| (tau, dn[tau]))
            .fold((tau_min, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let mut chosen = global;
        if let Some(mut tau) = (tau_min..=tau_max).find(|&tau| dn[tau] < VOICING_THRESHOLD) {
            while tau < tau_max && dn[tau + 1] < dn[tau] {
                tau += 1;
            }
            chosen = tau;
        }
        let periodicity = (1.0 - global_val).clamp(0.0, 1.0);
        let voiced = global_val < VOICING_THRESHOLD;
        let refined = {
            let (a, b, c) = (dn[chosen - 1], dn[chosen], dn[chosen + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            chosen as f64 + shift.clamp(-1.0, 1.0)
        };
        let f0 = sr / refined;
        let voiced = voiced && (PITCH_F_MIN..=PITCH_F_MAX).contains(&f0);
        track.f0.push(if voiced { f0 } else { 0.0 });
        track.voiced.push(voiced);
        track.periodicity.push(periodicity);
    }
    track
}

/// Comparison of a generated pitch track against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchMetrics {
    /// RMSE of per-frame periodicity.
    pub periodicity: f64,
    /// F1 of voicing decisions with the reference as ground truth.
    pub vuv_f1: f64,
    /// RMSE in Hz over frames voiced in both tracks; `None` if there are none.
    pub pitch_hz: Option<f64>,
    /// Same frames, error in cents.
    pub pitch_cents: Option<f64>,
}

pub fn pitch_metrics(reference: &PitchTrack, generated: &PitchTrack) -> Result<PitchMetrics> {
    if reference.len() != generated.len() {
        return Err(Error::Shape(format!(
            "pitch tracks have {} and {} frames",
            reference.len(),
            generated.len()
        )));
    }
    let n = reference.len().max(1) as f64;
    let periodicity = (reference
        .periodicity
        .iter()
        .zip(&generated.periodicity)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let (mut sq_hz, mut sq_cents, mut both) = (0f64, 0f64, 0usize);
    for i in 0..reference.len() {
        match (reference.voiced[i], generated.voiced[i]) {
            (true, true) => {
                tp += 1;
                let (a, b) = (reference.f0[i], generated.f0[i]);
                sq_hz += (a - b).powi(2);
                sq_cents += (1200.0 * (b / a).log2()).powi(2);
                both += 1;
            }
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    let vuv_f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    let rmse = |sq: f64| (both > 0).then(|| (sq / both as f64).sqrt());
    Ok(PitchMetrics {
        periodicity,
        vuv_f1,
        pitch_hz: rmse(sq_hz),
        pitch_cents: rmse(sq_cents),
    })
}

/// Gaussian noise with the same RMS as `x`, the reference floor for
/// copy-synthesis quality.
pub fn white_noise_like<R: Rng>(x: &AudioBuffer, rng: &mut R) -> Result<AudioBuffer> {
    let rms = (x.samples().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let samples = (0..x.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (rms * z) as f32
        })
        .collect();
    AudioBuffer::new(samples, x.sample_rate())
}

/// Speed of one generation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// Network evaluations per generated item.
    pub nfe: usize,
    pub wall_clock_s: f64,
    pub audio_s: f64,
    /// Seconds of audio generated per second of wall clock.
    pub xrt: f64,
}

/// Generates every conditioning in `items` from fresh noise and reports the
/// per-item evaluation count and the aggregate real-time factor.
pub fn benchmark_generation<F: VectorField>(
    field: &F,
    grid: &TimeGrid,
    items: &[MelSpectrogram],
    sample_rate: u32,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<BenchResult> {
    use rand::SeedableRng;
    if items.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one item".into()));
    }
    let counting = CountingField::new(field);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = items
        .iter()
        .map(|c| standard_normal(1, c.sample_len(), &mut rng, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    let conds = items
        .iter()
        .map(|c| c.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    for (x0, c) in noise.iter().zip(&conds) {
        ode_sample(&counting, x0, c, grid)?;
    }
    let wall_clock_s = start.elapsed().as_secs_f64();
    let audio_s = items.iter().map(|c| c.sample_len()).sum::<usize>() as f64 / sample_rate as f64;
    Ok(BenchResult {
        nfe: counting.calls() / items.len(),
        wall_clock_s,
        audio_s,
        xrt: audio_s / wall_clock_s.max(f64::MIN_POSITIVE),
    })
}

/// Reason string written into the PESQ/UTMOS report slots.
pub const UNAVAILABLE_REASON: &str = "requires an external reference scorer, not bundled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub mstft: f64,
    pub periodicity: f64,
    pub vuv_f1: f64,
    pub pitch_hz: Option<f64>,
    pub pitch_cents: Option<f64>,
    pub nfe: usize,
    pub wall_clock_s: f64,
    pub xrt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mstft: f64,
    pub periodicity: f64,
    pub vuv_f1: f64,
    /// Mean over items that have a pitch error.
    pub pitch_hz: Option<f64>,
    pub pitch_cents: Option<f64>,
    pub nfe: f64,
    pub wall_clock_s: f64,
    pub xrt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub config_hash: String,
    pub pesq: String,
    pub utmos: String,
    pub items: Vec<ItemMetrics>,
    pub aggregate: AggregateMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    /// Builds the report; the aggregate is the per-item mean.
    pub fn new(model: impl Into<String>, config: &impl Serialize, items: Vec<ItemMetrics>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("metric report needs at least one item".into()));
        }
        for it in &items {
            let values = [it.mstft, it.periodicity, it.vuv_f1, it.wall_clock_s, it.xrt];
            if values.iter().chain(it.pitch_hz.iter()).chain(it.pitch_cents.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("metrics of {}", it.id),
                    step: 0,
                });
            }
        }
        let aggregate = AggregateMetrics {
            mstft: mean(items.iter().map(|i| i.mstft)).unwrap_or(0.0),
            periodicity: mean(items.iter().map(|i| i.periodicity)).unwrap_or(0.0),
            vuv_f1: mean(items.iter().map(|i| i.vuv_f1)).unwrap_or(0.0),
            pitch_hz: mean(items.iter().filter_map(|i| i.pitch_hz)),
            pitch_cents: mean(items.iter().filter_map(|i| i.pitch_cents)),
            nfe: mean(items.iter().map(|i| i.nfe as f64)).unwrap_or(0.0),
            wall_clock_s: mean(items.iter().map(|i| i.wall_clock_s)).unwrap_or(0.0),
            xrt: mean(items.iter().map(|i| i.xrt)).unwrap_or(0.0),
        };
        Ok(Self {
            model: model.into(),
            config_hash: config_hash(config)?,
            pesq: format!("n/a ({UNAVAILABLE_REASON})"),
            utmos: format!("n/a ({UNAVAILABLE_REASON})"),
            items,
            aggregate,
        })
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 over the JSON form of `config` together with the fixed metric
/// settings, so reports are only comparable when both match.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let metric_settings = serde_json::json!({
        "mstft": MSTFT_RESOLUTIONS,
        "pitch": [PITCH_F_MIN, PITCH_F_MAX, VOICING_THRESHOLD, ENERGY_GATE],
    });
    let body = serde_json::to_string(&(metric_settings, config))
        .map_err(|e| Error::InvalidInput(format!("unhashable config: {e}")))?;
    Ok(hex::encode(Sha256::digest(body.as_bytes())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Column order of the CSV report, one row per item plus a final `mean` row.
pub const CSV_COLUMNS: [&str; 11] = [
    "id",
    "mstft",
    "pesq",
    "periodicity",
    "vuv_f1",
    "pitch_hz",
    "pitch_cents",
    "utmos",
    "nfe",
    "wall_clock_s",
    "xrt",
];

pub const MARKDOWN_HEADER: &str = "| Item | M-STFT | Period. | V/UV | Pitch | NFE | xRT |";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v}"))
}

fn render_csv(report: &MetricReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for it in &report.items {
        w.write_record([
            it.id.clone(),
            it.mstft.to_string(),
            "n/a".into(),
            it.periodicity.to_string(),
            it.vuv_f1.to_string(),
            opt(it.pitch_hz),
            opt(it.pitch_cents),
            "n/a".into(),
            it.nfe.to_string(),
            it.wall_clock_s.to_string(),
            it.xrt.to_string(),
        ])
        .map_err(err)?;
    }
    let a = &report.aggregate;
    w.write_record([
        "mean".to_string(),
        a.mstft.to_string(),
        "n/a".into(),
        a.periodicity.to_string(),
        a.vuv_f1.to_string(),
        opt(a.pitch_hz),
        opt(a.pitch_cents),
        "n/a".into(),
        a.nfe.to_string(),
        a.wall_clock_s.to_string(),
        a.xrt.to_string(),
    ])
    .map_err(err)?;
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn render_markdown(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Model: {}  ", report.model);
    let _ = writeln!(out, "Config hash: `{}`\n", report.config_hash);
    let _ = writeln!(out, "{MARKDOWN_HEADER}");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    let fmt_pitch = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    for it in &report.items {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {} | {} | {:.2} |",
            it.id,
            it.mstft,
            it.periodicity,
            it.vuv_f1,
            fmt_pitch(it.pitch_hz),
            it.nfe,
            it.xrt
        );
    }
    let a = &report.aggregate;
    let _ = writeln!(
        out,
        "| **mean** | {:.4} | {:.4} | {:.4} | {} | {} | {:.2} |",
        a.mstft,
        a.periodicity,
        a.vuv_f1,
        fmt_pitch(a.pitch_hz),
        a.nfe,
        a.xrt
    );
    let _ = writeln!(out, "\nPESQ: {}  \nUTMOS: {}", report.pesq, report.utmos);
    out
}

pub fn emit_report(report: &MetricReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| Error::InvalidInput(format!("json: {e}")))?,
        ReportFormat::Csv => render_csv(report)?,
        ReportFormat::Markdown => render_markdown(report),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Generates each item from its own conditioning and scores it against the
/// reference audio. Noise is drawn per item from `seed`.
pub fn evaluate_generation<F: VectorField>(
    field: &F,
    grid: &TimeGrid,
    items: &[(String, AudioBuffer, MelSpectrogram)],
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Vec<ItemMetrics>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(items.len());
    for (id, reference, cond) in items {
        let x0 = standard_normal(1, cond.sample_len(), &mut rng, dtype, device)?;
        let c = cond.to_tensor(dtype, device)?;
        let counting = CountingField::new(field);
        let start = Instant::now();
        let x = ode_sample(&counting, &x0, &c, grid)?;
        let wall_clock_s = start.elapsed().as_secs_f64();
        let generated = AudioBuffer::from_tensor(&x, reference.sample_rate())?;
        let mut m = score_item(id, reference, &generated)?;
        m.nfe = counting.calls();
        m.wall_clock_s = wall_clock_s;
        m.xrt = generated.duration_secs() / wall_clock_s.max(f64::MIN_POSITIVE);
        out.push(m);
    }
    Ok(out)
}

/// Quality metrics of one (reference, generated) pair; speed fields are 0.
pub fn score_item(id: &str, reference: &AudioBuffer, generated: &AudioBuffer) -> Result<ItemMetrics> {
    let hop = PITCH_HOP;
    let mstft = mstft_distance(reference, generated)?;
    let (_, padded) = matched_length(reference, generated);
    let generated = AudioBuffer::new(padded.iter().map(|&v| v as f32).collect(), generated.sample_rate())?;
    let pm = pitch_metrics(&extract_pitch(reference, hop), &extract_pitch(&generated, hop))?;
    Ok(ItemMetrics {
        id: id.to_string(),
        mstft,
        periodicity: pm.periodicity,
        vuv_f1: pm.vuv_f1,
        pitch_hz: pm.pitch_hz,
        pitch_cents: pm.pitch_cents,
        nfe: 0,
        wall_clock_s: 0.0,
        xrt: 0.0,
    })
}

/// Frame hop of the pitch metrics.
pub const PITCH_HOP: usize = 256;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(f: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        AudioBuffer::new(
            (0..n).map(|i| (0.5 * (2.0 * PI * f * i as f64 / sr as f64).sin()) as f32).collect(),
            sr,
        )
        .unwrap()
    }

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 22050).unwrap()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn mstft_is_zero_on_identical_inputs() {
        let x = noise(8000, 1);
        assert_eq!(mstft_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mstft_of_half_scaled_input_is_positive_and_repeatable() {
        let x = noise(8000, 2);
        let half = AudioBuffer::new(x.samples().iter().map(|v| v * 0.5).collect(), 22050).unwrap();
        let a = mstft_distance(&x, &half).unwrap();
        let b = mstft_distance(&x, &half).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
        // Spectral convergence is exactly 0.5 and the log term ln 2 wherever
        // the floor is inactive.
        assert!((a - (0.5 + 2f64.ln())).abs() < 0.05, "{a}");
    }

    #[test]
    fn mstft_equals_mean_of_independent_resolutions() {
        let x = noise(6000, 3);
        let y = noise(6000, 4);
        let (a, b) = matched_length(&x, &y);
        let per: Vec<f64> = MSTFT_RESOLUTIONS
            .iter()
            .map(|&r| oracle_resolution(&a, &b, r))
            .collect();
        let expected = per.iter().sum::<f64>() / 3.0;
        let got = mstft_distance(&x, &y).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
    }

    /// Direct DFT with explicit padding, independent of the FFT path.
    fn oracle_resolution(x: &[f64], y: &[f64], r: MstftResolution) -> f64 {
        let mag = |s: &[f64]| -> Vec<Vec<f64>> {
            let pad = r.n_fft / 2;
            let mut padded: Vec<f64> = (0..pad).map(|i| s[pad - i]).collect();
            padded.extend_from_slice(s);
            padded.extend((0..pad).map(|i| s[s.len() - 2 - i]));
            let off = (r.n_fft - r.win) / 2;
            let win: Vec<f64> = (0..r.win)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / r.win as f64).cos())
                .collect();
            (0..s.len() / r.hop + 1)
                .map(|t| {
                    (0..=r.n_fft / 2)
                        .map(|k| {
                            let (mut re, mut im) = (0.0, 0.0);
                            for (j, w) in win.iter().enumerate() {
                                let n = off + j;
                                let v = w * padded[t * r.hop + n];
                                let ph = 2.0 * PI * (k * n % r.n_fft) as f64 / r.n_fft as f64;
                                re += v * ph.cos();
                                im -= v * ph.sin();
                            }
                            (re * re + im * im).sqrt()
                        })
                        .collect()
                })
                .collect()
        };
        let (ma, mb) = (mag(x), mag(y));
        let (mut d, mut nrm, mut l1, mut n) = (0.0, 0.0, 0.0, 0.0);
        for (ra, rb) in ma.iter().zip(&mb) {
            for (&p, &q) in ra.iter().zip(rb) {
                d += (p - q) * (p - q);
                nrm += p * p;
                l1 += (p.max(1e-5).ln() - q.max(1e-5).ln()).abs();
                n += 1.0;
            }
        }
        d.sqrt() / nrm.sqrt() + l1 / n
    }

    #[test]
    fn mstft_rejects_short_inputs() {
        let x = noise(1000, 5);
        assert!(matches!(mstft_distance(&x, &x), Err(Error::Length(_))));
    }

    #[test]
    fn mstft_trims_and_pads_the_estimate() {
        let x = noise(5000, 6);
        let longer = AudioBuffer::new([x.samples(), &[0.3; 100][..]].concat(), 22050).unwrap();
        assert_eq!(mstft_distance(&x, &longer).unwrap(), 0.0);
    }

    #[test]
    fn sine_220_is_voiced_at_220() {
        let track = extract_pitch(&sine(220.0, 1.0, 22050), 256);
        // Edge frames see the zero padding; all interior frames are voiced.
        let interior = &track.voiced[2..track.len() - 2];
        assert!(interior.iter().all(|&v| v));
        let f0 = median(track.voiced_f0());
        assert!((f0 - 220.0).abs() < 2.0, "{f0}");
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let track = extract_pitch(&noise(22050, 7), 256);
        let unvoiced = track.voiced.iter().filter(|&&v| !v).count();
        assert!(unvoiced as f64 >= 0.9 * track.len() as f64, "{unvoiced}/{}", track.len());
    }

    #[test]
    fn silence_is_unvoiced() {
        let track = extract_pitch(&AudioBuffer::zeros(5000, 22050).unwrap(), 256);
        assert!(track.voiced.iter().all(|&v| !v));
        assert!(track.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn identical_tracks_score_perfectly() {
        let track = extract_pitch(&sine(150.0, 0.5, 22050), 256);
        let m = pitch_metrics(&track, &track).unwrap();
        assert_eq!((m.periodicity, m.vuv_f1, m.pitch_hz), (0.0, 1.0, Some(0.0)));
    }

    #[test]
    fn inverted_voicing_has_zero_f1() {
        let a = PitchTrack {
            f0: vec![100.0, 0.0, 120.0, 0.0],
            voiced: vec![true, false, true, false],
            periodicity: vec![0.9, 0.1, 0.9, 0.1],
            hop: 256,
        };
        let b = PitchTrack {
            f0: vec![0.0, 100.0, 0.0, 100.0],
            voiced: vec![false, true, false, true],
            periodicity: vec![0.1, 0.9, 0.1, 0.9],
            hop: 256,
        };
        let m = pitch_metrics(&a, &b).unwrap();
        assert_eq!(m.vuv_f1, 0.0);
        assert_eq!(m.pitch_hz, None);
    }

    #[test]
    fn constant_offset_gives_that_pitch_error() {
        let a = extract_pitch(&sine(200.0, 0.5, 22050), 256);
        let mut b = a.clone();
        for (f, &v) in b.f0.iter_mut().zip(&b.voiced) {
            if v {
                *f += 10.0;
            }
        }
        let m = pitch_metrics(&a, &b).unwrap();
        assert!((m.pitch_hz.unwrap() - 10.0).abs() < 1e-9);
        assert!(m.pitch_cents.unwrap() > 0.0);
    }

    #[test]
    fn mismatched_tracks_are_rejected() {
        let a = extract_pitch(&sine(200.0, 0.5, 22050), 256);
        let b = extract_pitch(&sine(200.0, 0.25, 22050), 256);
        assert!(matches!(pitch_metrics(&a, &b), Err(Error::Shape(_))));
    }

    fn sample_report() -> MetricReport {
        let items = vec![
            ItemMetrics {
                id: "a".into(),
                mstft: 1.0,
                periodicity: 0.1,
                vuv_f1: 0.9,
                pitch_hz: Some(3.0),
                pitch_cents: Some(20.0),
                nfe: 4,
                wall_clock_s: 0.5,
                xrt: 4.0,
            },
            ItemMetrics {
                id: "b".into(),
                mstft: 2.0,
                periodicity: 0.3,
                vuv_f1: 0.7,
                pitch_hz: None,
                pitch_cents: None,
                nfe: 4,
                wall_clock_s: 1.5,
                xrt: 2.0,
            },
        ];
        MetricReport::new("test", &"cfg", items).unwrap()
    }

    #[test]
    fn aggregate_is_the_item_mean() {
        let r = sample_report();
        assert_eq!(r.aggregate.mstft, 1.5);
        assert!((r.aggregate.periodicity - 0.2).abs() < 1e-12);
        assert_eq!(r.aggregate.pitch_hz, Some(3.0));
        assert_eq!(r.aggregate.xrt, 3.0);
        assert!(r.pesq.starts_with("n/a"));
    }

    #[test]
    fn reports_round_trip_and_have_fixed_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let json = dir.path().join("r.json");
        emit_report(&r, &json, ReportFormat::Json).unwrap();
        assert_eq!(MetricReport::load_json(&json).unwrap(), r);

        let csv_path = dir.path().join("r.csv");
        emit_report(&r, &csv_path, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(2).unwrap().contains("n/a"));

        let md = dir.path().join("r.md");
        emit_report(&r, &md, ReportFormat::Markdown).unwrap();
        let text = fs::read_to_string(&md).unwrap();
        assert!(text.contains("M-STFT | Period. | V/UV | Pitch | NFE | xRT"));
        assert!(text.contains("PESQ: n/a"));
    }

    #[test]
    fn emitting_to_a_missing_directory_fails() {
        let r = sample_report();
        let err = emit_report(&r, "/nonexistent/dir/r.json", ReportFormat::Json).unwrap_err();
        assert_eq!(err.class(), "io");
    }

    #[test]
    fn config_hash_depends_on_config() {
        assert_eq!(config_hash(&"a").unwrap(), config_hash(&"a").unwrap());
        assert_ne!(config_hash(&"a").unwrap(), config_hash(&"b").unwrap());
    }

    #[test]
    fn noise_baseline_matches_rms() {
        let x = sine(300.0, 0.5, 22050);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = white_noise_like(&x, &mut rng).unwrap();
        let rms = |a: &AudioBuffer| (a.samples().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms(&n) / rms(&x) - 1.0).abs() < 0.05);
    }
}
