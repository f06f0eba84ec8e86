//! Corpus ingestion, segmentation and the synthetic harmonic toy corpus.
//!
//! A corpus directory holds WAV files, a `corpus.toml` metadata record and
//! three newline-delimited split manifests (`train.txt`, `dev.txt`,
//! `test.txt`) of paths relative to the directory.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{mel_spectrogram_with, AudioBuffer, MelConfig, MelSpectrogram, MelTransform, StftConfig};

pub const METADATA_FILE: &str = "corpus.toml";
pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_SEGMENT_LENGTH: usize = 32_768;

/// Taps on each side of the resampling kernel, in units of the output
/// low-pass period.
const RESAMPLE_HALF_WIDTH: f64 = 16.0;

/// On-disk sample format for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

impl WavFormat {
    /// Largest round-trip error of one stored sample.
    pub fn lsb(self) -> f32 {
        match self {
            WavFormat::Pcm16 => 1.0 / 32768.0,
            WavFormat::Float32 => 0.0,
        }
    }
}

fn decode_error(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a PCM or float WAV at its native rate. Integer samples are divided
/// by `2^(bits-1)`; multichannel files keep the first channel.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) if source.kind() == std::io::ErrorKind::NotFound => {
            Error::io(path, source)
        }
        other => decode_error(path, other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(decode_error(path, format!("unsupported float width {}", spec.bits_per_sample)));
            }
            reader
                .samples::<f32>()
                .step_by(channels)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_error(path, e))?
        }
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_error(path, e))?
        }
    };
    if samples.is_empty() {
        return Err(decode_error(path, "no audio samples"));
    }
    AudioBuffer::new(samples, spec.sample_rate).map_err(|e| decode_error(path, e))
}

/// [`load_audio`] followed by resampling to `sample_rate` when needed.
pub fn load_audio_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<AudioBuffer> {
    let audio = load_audio(path)?;
    resample(&audio, sample_rate)
}

/// Writes mono audio. PCM16 values are clamped to `[-1, 1)` and rounded.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::InvalidInput(format!("cannot write {}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in audio.samples() {
        match format {
            WavFormat::Pcm16 => {
                let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(wav_err)?;
            }
            WavFormat::Float32 => writer.write_sample(s).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Band-limited resampling with a Hann-windowed sinc kernel. The kernel is
/// symmetric around each output instant, so the filter is linear phase.
pub fn resample(audio: &AudioBuffer, sample_rate: u32) -> Result<AudioBuffer> {
    if sample_rate == 0 {
        return Err(Error::InvalidInput("target sample rate must be positive".into()));
    }
    let from = audio.sample_rate();
    if from == sample_rate {
        return Ok(audio.clone());
    }
    let ratio = sample_rate as f64 / from as f64;
    // Cutoff in cycles per input sample, slightly below the lower Nyquist.
    let cutoff = 0.5 * ratio.min(1.0) * 0.97;
    let half = (RESAMPLE_HALF_WIDTH / (2.0 * cutoff)).ceil() as i64;
    let x = audio.samples();
    let out_len = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let c = center.floor() as i64;
        let mut acc = 0f64;
        for i in (c - half + 1)..=(c + half) {
            if i < 0 || i as usize >= x.len() {
                continue;
            }
            let d = i as f64 - center;
            if d.abs() >= half as f64 {
                continue;
            }
            let arg = 2.0 * cutoff * d;
            let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let window = 0.5 + 0.5 * (PI * d / half as f64).cos();
            acc += x[i as usize] as f64 * 2.0 * cutoff * sinc * window;
        }
        out.push(acc as f32);
    }
    AudioBuffer::new(out, sample_rate)
}

/// Fixed-length crop of a clip together with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub segment: AudioBuffer,
    pub condition: MelSpectrogram,
}

/// Uniformly random hop-aligned crop of `segment_length` samples; clips
/// shorter than that are zero-padded at the end. The condition is computed
/// from the crop itself.
pub fn sample_segment<R: Rng>(
    audio: &AudioBuffer,
    segment_length: usize,
    mel: &MelTransform,
    rng: &mut R,
) -> Result<TrainingExample> {
    let hop = mel.stft_config().hop_size;
    if segment_length == 0 || segment_length % hop != 0 {
        return Err(Error::Config(format!(
            "segment length {segment_length} is not a positive multiple of hop {hop}"
        )));
    }
    let x = audio.samples();
    let segment = if x.len() <= segment_length {
        let mut padded = x.to_vec();
        padded.resize(segment_length, 0.0);
        padded
    } else {
        let positions = (x.len() - segment_length) / hop + 1;
        let start = rng.random_range(0..positions) * hop;
        x[start..start + segment_length].to_vec()
    };
    let segment = AudioBuffer::new(segment, audio.sample_rate())?;
    let condition = mel_spectrogram_with(mel, &segment)?;
    Ok(TrainingExample { segment, condition })
}

/// Dataset description, persisted as `corpus.toml` next to the audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(skip)]
    pub root: PathBuf,
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub segment_length: usize,
    #[serde(skip)]
    pub train: Vec<String>,
    #[serde(skip)]
    pub dev: Vec<String>,
    #[serde(skip)]
    pub test: Vec<String>,
    /// Generation record of a synthetic corpus, absent for real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyCorpusRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn manifest(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Dev => "dev.txt",
            Split::Test => "test.txt",
        }
    }
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, sample_rate: u32) -> Self {
        Self {
            root: root.into(),
            sample_rate,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            segment_length: DEFAULT_SEGMENT_LENGTH,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            toy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.mel.validate(self.sample_rate)?;
        let hop = self.stft.hop_size;
        if self.segment_length == 0 || self.segment_length % hop != 0 {
            return Err(Error::Config(format!(
                "segment length {} is not a positive multiple of hop {hop}",
                self.segment_length
            )));
        }
        if self.segment_length < self.stft.min_len() {
            return Err(Error::Config(format!(
                "segment length {} is shorter than the stft needs ({})",
                self.segment_length,
                self.stft.min_len()
            )));
        }
        Ok(())
    }

    pub fn files(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn path_of(&self, entry: &str) -> PathBuf {
        self.root.join(entry)
    }

    /// Reads `corpus.toml` and the split manifests under `root`.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let meta = root.join(METADATA_FILE);
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let mut spec: DatasetSpec = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", meta.display())))?;
        spec.root = root.to_path_buf();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = root.join(split.manifest());
            let list = match fs::read_to_string(&path) {
                Ok(text) => text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(Error::io(&path, e)),
            };
            match split {
                Split::Train => spec.train = list,
                Split::Dev => spec.dev = list,
                Split::Test => spec.test = list,
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Writes `corpus.toml` and the manifests.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let meta = self.root.join(METADATA_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = self.root.join(split.manifest());
            let mut body = self.files(split).join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn mel_transform(&self) -> Result<MelTransform> {
        MelTransform::new(self.sample_rate, self.stft, &self.mel, DType::F64, &Device::Cpu)
    }
}

/// Parameters of one synthetic harmonic item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneSpec {
    pub f0: f64,
    pub harmonics: usize,
    /// Amplitude-modulation rate in Hz and depth in `[0, 1)`.
    pub am_rate: f64,
    pub am_depth: f64,
    /// Noise floor relative to the tone RMS, in dB.
    pub noise_db: f64,
}

impl ToneSpec {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            f0: rng.random_range(80.0..400.0),
            harmonics: rng.random_range(1..=8),
            am_rate: rng.random_range(1.0..6.0),
            am_depth: rng.random_range(0.0..0.5),
            noise_db: -40.0,
        }
    }

    /// Harmonic stack with `1/k` amplitudes and random phases, amplitude
    /// modulated, peak-normalized to 0.5, plus Gaussian noise. Harmonics at
    /// or above Nyquist are dropped.
    pub fn render<R: Rng>(&self, duration: f64, sample_rate: u32, rng: &mut R) -> Result<AudioBuffer> {
        if self.f0 <= 0.0 || self.harmonics == 0 || duration <= 0.0 {
            return Err(Error::InvalidInput("tone needs positive f0, harmonics and duration".into()));
        }
        let sr = sample_rate as f64;
        let len = (duration * sr).round() as usize;
        let phases: Vec<f64> = (0..self.harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let am_phase = rng.random_range(0.0..2.0 * PI);
        let mut tone: Vec<f64> = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let stack: f64 = (1..=self.harmonics)
                    .filter(|&k| k as f64 * self.f0 < sr / 2.0)
                    .map(|k| (2.0 * PI * k as f64 * self.f0 * t + phases[k - 1]).sin() / k as f64)
                    .sum();
                let env = 1.0 - self.am_depth * 0.5 * (1.0 + (2.0 * PI * self.am_rate * t + am_phase).sin());
                stack * env
            })
            .collect();
        let peak = tone.iter().fold(0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        tone.iter_mut().for_each(|v| *v *= 0.5 / peak);
        let rms = (tone.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
        let noise_std = rms * 10f64.powf(self.noise_db / 20.0);
        let samples = tone
            .into_iter()
            .map(|v| {
                let n: f64 = StandardNormal.sample(rng);
                (v + noise_std * n).clamp(-1.0, 1.0) as f32
            })
            .collect();
        AudioBuffer::new(samples, sample_rate)
    }
}

/// Record of how a toy corpus was generated, stored in its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusRecord {
    pub seed: u64,
    pub duration: f64,
    pub items: Vec<ToyItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyItem {
    pub file: String,
    pub tone: ToneSpec,
}

/// Options for [`make_toy_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusOptions {
    pub n_items: usize,
    /// Seconds per item.
    pub duration: f64,
    pub sample_rate: u32,
    pub segment_length: usize,
    pub seed: u64,
}

impl Default for ToyCorpusOptions {
    fn default() -> Self {
        Self {
            n_items: 64,
            duration: 2.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            segment_length: 8192,
            seed: 0,
        }
    }
}

/// Writes a synthetic harmonic corpus under `root`. One sixteenth of the
/// items (at least one) goes to dev and as many to test, the rest to train.
/// A fixed seed reproduces the files byte for byte.
pub fn make_toy_corpus(root: impl AsRef<Path>, opts: &ToyCorpusOptions) -> Result<DatasetSpec> {
    if opts.n_items == 0 {
        return Err(Error::InvalidInput("toy corpus needs at least one item".into()));
    }
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut spec = DatasetSpec::new(root, opts.sample_rate);
    spec.segment_length = opts.segment_length;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut items = Vec::with_capacity(opts.n_items);
    for i in 0..opts.n_items {
        let tone = ToneSpec::random(&mut rng);
        let audio = tone.render(opts.duration, opts.sample_rate, &mut rng)?;
        let file = format!("item_{i:04}.wav");
        write_wav(root.join(&file), &audio, WavFormat::Pcm16)?;
        items.push(ToyItem { file, tone });
    }
    let held_out = if opts.n_items >= 3 { (opts.n_items / 16).max(1) } else { 0 };
    let names: Vec<String> = items.iter().map(|it| it.file.clone()).collect();
    let train_end = opts.n_items - 2 * held_out;
    spec.train = names[..train_end].to_vec();
    spec.dev = names[train_end..train_end + held_out].to_vec();
    spec.test = names[train_end + held_out..].to_vec();
    if spec.train.is_empty() {
        spec.train = names;
    }
    spec.toy = Some(ToyCorpusRecord {
        seed: opts.seed,
        duration: opts.duration,
        items,
    });
    spec.save()?;
    Ok(spec)
}

/// In-memory corpus split with a prebuilt conditioning transform.
#[derive(Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    mel: MelTransform,
    items: Vec<AudioBuffer>,
}

impl Dataset {
    pub fn open(spec: &DatasetSpec, split: Split) -> Result<Self> {
        spec.validate()?;
        let items = spec
            .files(split)
            .iter()
            .map(|f| load_audio_at(spec.path_of(f), spec.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::InvalidInput(format!(
                "split {} of {} is empty",
                split.manifest(),
                spec.root.display()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            mel: spec.mel_transform()?,
            items,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[AudioBuffer] {
        &self.items
    }

    pub fn mel(&self) -> &MelTransform {
        &self.mel
    }

    /// Changes the training crop length; must stay a multiple of the hop.
    pub fn set_segment_length(&mut self, segment_length: usize) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.segment_length = segment_length;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn condition(&self, audio: &AudioBuffer) -> Result<MelSpectrogram> {
        mel_spectrogram_with(&self.mel, audio)
    }

    /// Draws `batch_size` items with replacement and crops one segment from
    /// each. Returns waveforms `(batch, segment)` and conditions
    /// `(batch, n_mels, frames)`.
    pub fn sample_batch<R: Rng>(
        &self,
        batch_size: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(batch_size);
        let mut cs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let item = &self.items[rng.random_range(0..self.items.len())];
            let ex = sample_segment(item, self.spec.segment_length, &self.mel, rng)?;
            xs.push(ex.segment.to_tensor(dtype, device)?);
            cs.push(ex.condition.to_tensor(dtype, device)?);
        }
        Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&cs, 0)?))
    }

    /// Whole items trimmed to a multiple of the hop, for evaluation.
    pub fn eval_items(&self) -> Result<Vec<TrainingExample>> {
        let hop = self.spec.stft.hop_size;
        self.items
            .iter()
            .map(|a| {
                let len = (a.len() / hop).max(1) * hop;
                let mut samples = a.samples().to_vec();
                samples.resize(len, 0.0);
                let segment = AudioBuffer::new(samples, a.sample_rate())?;
                let condition = self.condition(&segment)?;
                Ok(TrainingExample { segment, condition })
            })
            .collect()
    }
}
