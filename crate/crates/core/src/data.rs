//! Domain types, the on-disk corpus format and prediction export.
//!
//! A corpus directory holds a JSON-lines manifest. Each record points at a
//! raw frame tensor (`LSRT` header followed by little-endian `f32` pixels)
//! and a PCM WAV file whose first sample is aligned with the track start.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CROP_SIZE: usize = 112;
pub const DEFAULT_LANDMARKS: usize = 82;
/// Mel rows per video frame.
pub const MEL_FRAMES_PER_VIDEO_FRAME: usize = 4;
const TENSOR_MAGIC: &[u8; 4] = b"LSRT";

/// A contiguous run of grayscale face crops with per-frame speaking labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    pub track_id: String,
    pub video_id: String,
    pub fps: f64,
    /// `T x H x W` pixels in `[0, 1]`, row-major.
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<bool>,
    pub start_time: f64,
}

impl FaceTrack {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::track(&self.track_id, m));
        if self.num_frames == 0 {
            return fail("track has no frames".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if self.height != self.width {
            return fail(format!("crop must be square, got {}x{}", self.height, self.width));
        }
        if self.frames.len() != self.num_frames * self.height * self.width {
            return fail("frame buffer does not match T x H x W".into());
        }
        if self.labels.len() != self.num_frames {
            return fail(format!(
                "labels length {} does not match T = {}",
                self.labels.len(),
                self.num_frames
            ));
        }
        if let Some(p) = self.frames.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return fail(format!("pixel value {p} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn crop_size(&self) -> usize {
        self.height
    }

    pub fn duration(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }

    /// Sub-track of frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> FaceTrack {
        let n = self.height * self.width;
        FaceTrack {
            frames: self.frames[start * n..(start + len) * n].to_vec(),
            num_frames: len,
            labels: self.labels[start..start + len].to_vec(),
            start_time: self.start_time + start as f64 / self.fps,
            ..self.clone()
        }
    }
}

/// Per-frame lip landmarks in crop pixel coordinates; `None` marks a frame
/// where the detector returned nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LipTrack {
    pub num_landmarks: usize,
    pub frames: Vec<Option<Vec<(i32, i32)>>>,
}

impl LipTrack {
    pub fn absent(num_frames: usize, num_landmarks: usize) -> Self {
        Self {
            num_landmarks,
            frames: vec![None; num_frames],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn all_absent(&self) -> bool {
        self.frames.iter().all(Option::is_none)
    }

    pub fn present_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }

    pub fn validate(&self, num_frames: usize) -> Result<()> {
        if self.frames.len() != num_frames {
            return Err(Error::Data(format!(
                "lip track has {} frames, face track has {num_frames}",
                self.frames.len()
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if let Some(points) = f {
                if points.len() != self.num_landmarks {
                    return Err(Error::Data(format!(
                        "frame {t} has {} landmarks, expected {}",
                        points.len(),
                        self.num_landmarks
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn window(&self, start: usize, len: usize) -> LipTrack {
        LipTrack {
            num_landmarks: self.num_landmarks,
            frames: self.frames[start..start + len].to_vec(),
        }
    }
}

/// Mono audio normalized to `[-1, 1]` full scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel features, `4T x N`, aligned four rows per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub rows: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn video_frames(&self) -> usize {
        self.rows / MEL_FRAMES_PER_VIDEO_FRAME
    }
}

/// Per-frame two-class distributions (`0`: not speaking, `1`: speaking) for
/// the audiovisual, visual and audio heads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FramePredictions {
    pub probs_av: Vec<[f64; 2]>,
    pub probs_v: Vec<[f64; 2]>,
    pub probs_a: Vec<[f64; 2]>,
}

impl FramePredictions {
    pub fn len(&self) -> usize {
        self.probs_av.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs_av.is_empty()
    }

    pub fn speaking_scores(&self) -> Vec<f64> {
        self.probs_av.iter().map(|p| p[1]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.probs_av.len();
        if self.probs_v.len() != t || self.probs_a.len() != t {
            return Err(Error::Shape("prediction heads differ in length".into()));
        }
        for head in [&self.probs_av, &self.probs_v, &self.probs_a] {
            for (i, p) in head.iter().enumerate() {
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > 1e-6 {
                    return Err(Error::Data(format!("frame {i}: {p:?} is not a distribution")));
                }
            }
        }
        Ok(())
    }
}

/// One manifest record, exactly as serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub video_id: String,
    pub fps: f64,
    pub frames: String,
    pub audio: String,
    pub labels: Vec<u8>,
    pub landmarks: Vec<Option<Vec<[f64; 2]>>>,
    pub start_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    /// Background noise level the track was synthesized with, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rms: Option<f64>,
}

impl ManifestEntry {
    /// Landmarks rounded to integer pixels.
    pub fn lip_track(&self, num_landmarks: usize) -> LipTrack {
        LipTrack {
            num_landmarks,
            frames: self
                .landmarks
                .iter()
                .map(|f| {
                    f.as_ref()
                        .map(|pts| pts.iter().map(|p| (p[0].round() as i32, p[1].round() as i32)).collect())
                })
                .collect(),
        }
    }

    /// Landmark count of the first present frame.
    pub fn landmark_count(&self) -> Option<usize> {
        self.landmarks.iter().flatten().next().map(Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative references resolve against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn num_landmarks(&self) -> usize {
        self.entries
            .iter()
            .find_map(ManifestEntry::landmark_count)
            .unwrap_or(DEFAULT_LANDMARKS)
    }
}

/// Loads and eagerly validates a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::ManifestLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    let manifest = CorpusManifest { entries, base_dir };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &CorpusManifest) -> Result<()> {
    let mut seen = HashSet::new();
    let k = m.num_landmarks();
    for e in &m.entries {
        let id = &e.track_id;
        if !seen.insert(id.as_str()) {
            return Err(Error::track(id, "duplicate track_id"));
        }
        if !(e.fps > 0.0 && e.fps.is_finite()) {
            return Err(Error::track(id, format!("fps must be positive, got {}", e.fps)));
        }
        let frames = m.resolve(&e.frames);
        let audio = m.resolve(&e.audio);
        for p in [&frames, &audio] {
            if !p.is_file() {
                return Err(Error::track(id, format!("referenced file {} does not exist", p.display())));
            }
        }
        let [t, h, w] = read_tensor_header(&frames)?;
        if h != w {
            return Err(Error::track(id, format!("crop must be square, got {h}x{w}")));
        }
        if let Some(c) = e.crop_size {
            if c != h {
                return Err(Error::track(id, format!("crop_size {c} disagrees with frames {h}")));
            }
        }
        if e.labels.len() != t {
            return Err(Error::track(
                id,
                format!("labels length {} does not match T = {t}", e.labels.len()),
            ));
        }
        if e.labels.iter().any(|&l| l > 1) {
            return Err(Error::track(id, "labels must be 0 or 1"));
        }
        if e.landmarks.len() != t {
            return Err(Error::track(
                id,
                format!("landmarks length {} does not match T = {t}", e.landmarks.len()),
            ));
        }
        if let Some(bad) = e.landmarks.iter().flatten().find(|pts| pts.len() != k) {
            return Err(Error::track(
                id,
                format!("frame has {} landmarks, expected {k}", bad.len()),
            ));
        }
    }
    Ok(())
}

pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &manifest.entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `dims = [T, H, W]` and the `f32` payload in the `LSRT` layout.
pub fn write_tensor(path: &Path, dims: [usize; 3], data: &[f32]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor size mismatch");
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_header(path: &Path) -> Result<[usize; 3]> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    parse_header(path, &head)
}

fn parse_header(path: &Path, head: &[u8]) -> Result<[usize; 3]> {
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Data(format!("{} is not an LSRT tensor", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    Ok([dim(0), dim(1), dim(2)])
}

pub fn read_tensor(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Data(format!("{} is truncated", path.display())));
    }
    let dims = parse_header(path, &bytes[..16])?;
    let n: usize = dims.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Data(format!(
            "{}: payload has {} bytes, header implies {}",
            path.display(),
            bytes.len() - 16,
            4 * n
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    // downmix to mono
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes 16-bit mono PCM, clipping to full scale.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// A fully loaded track with everything the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub track: FaceTrack,
    pub lips: LipTrack,
    pub audio: Waveform,
    pub noise_rms: Option<f64>,
}

pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<CorpusEntry>> {
    let k = manifest.num_landmarks();
    manifest
        .entries
        .iter()
        .map(|e| {
            let ([t, h, w], frames) = read_tensor(&manifest.resolve(&e.frames))?;
            let track = FaceTrack {
                track_id: e.track_id.clone(),
                video_id: e.video_id.clone(),
                fps: e.fps,
                frames,
                num_frames: t,
                height: h,
                width: w,
                labels: e.labels.iter().map(|&l| l == 1).collect(),
                start_time: e.start_time,
            };
            track.validate()?;
            let lips = e.lip_track(k);
            lips.validate(t).map_err(|err| Error::track(&e.track_id, err.to_string()))?;
            let audio = read_wav(&manifest.resolve(&e.audio))?;
            Ok(CorpusEntry {
                track,
                lips,
                audio,
                noise_rms: e.noise_rms,
            })
        })
        .collect()
}

/// Loads `dir/manifest.jsonl`.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<CorpusEntry>> {
    load_corpus(&load_manifest(&dir.join(MANIFEST_FILE))?)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes entries as `dir/manifest.jsonl`, `dir/frames/*.lsrt` and
/// `dir/audio/*.wav`.
pub fn write_corpus(dir: &Path, entries: &[CorpusEntry]) -> Result<CorpusManifest> {
    for sub in ["frames", "audio"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = CorpusManifest {
        entries: Vec::with_capacity(entries.len()),
        base_dir: dir.to_path_buf(),
    };
    for e in entries {
        let t = &e.track;
        let frames_ref = format!("frames/{}.lsrt", t.track_id);
        let audio_ref = format!("audio/{}.wav", t.track_id);
        write_tensor(&dir.join(&frames_ref), [t.num_frames, t.height, t.width], &t.frames)?;
        write_wav(&dir.join(&audio_ref), &e.audio)?;
        manifest.entries.push(ManifestEntry {
            track_id: t.track_id.clone(),
            video_id: t.video_id.clone(),
            fps: t.fps,
            frames: frames_ref,
            audio: audio_ref,
            labels: t.labels.iter().map(|&l| u8::from(l)).collect(),
            landmarks: e
                .lips
                .frames
                .iter()
                .map(|f| {
                    f.as_ref()
                        .map(|pts| pts.iter().map(|&(x, y)| [f64::from(x), f64::from(y)]).collect())
                })
                .collect(),
            start_time: t.start_time,
            crop_size: Some(t.height),
            noise_rms: e.noise_rms,
        });
    }
    save_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes `track_id,frame_index,score` rows sorted by track then frame, where
/// the score is the audiovisual head's speaking probability.
pub fn save_predictions(preds: &[(String, FramePredictions)], path: &Path) -> Result<()> {
    let mut order: Vec<&(String, FramePredictions)> = preds.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from("track_id,frame_index,score\n");
    for (id, p) in order {
        for (i, s) in p.speaking_scores().iter().enumerate() {
            out.push_str(&format!("{id},{i},{s:.9}\n"));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub track_id: String,
    pub frame_index: usize,
    pub score: f64,
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("track_id,frame_index,score") {
        return Err(Error::Data(format!("{}: missing prediction header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Data(format!("{}: malformed row {}", path.display(), i + 2));
            let mut parts = line.rsplitn(3, ',');
            let score = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let frame_index = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let track_id = parts.next().ok_or_else(bad)?.to_string();
            Ok(PredictionRow {
                track_id,
                frame_index,
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_entry(id: &str, t: usize) -> CorpusEntry {
        CorpusEntry {
            track: FaceTrack {
                track_id: id.into(),
                video_id: "v0".into(),
                fps: 25.0,
                frames: vec![0.5; t * 4 * 4],
                num_frames: t,
                height: 4,
                width: 4,
                labels: (0..t).map(|i| i % 2 == 0).collect(),
                start_time: 1.5,
            },
            lips: LipTrack {
                num_landmarks: 2,
                frames: (0..t).map(|i| (i != 1).then(|| vec![(1, 2), (3, -1)])).collect(),
            },
            audio: Waveform {
                samples: vec![0.25; 16000 * t / 25],
                sample_rate: 16000,
            },
            noise_rms: Some(0.01),
        }
    }

    #[test]
    fn empty_manifest_loads_with_zero_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().entries.is_empty());
    }

    #[test]
    fn corpus_round_trip_preserves_order_and_content() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = ["c", "a", "b"].iter().map(|id| tiny_entry(id, 3)).collect();
        let written = write_corpus(dir.path(), &entries).unwrap();
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.entries, written.entries);
        let ids: Vec<_> = loaded.entries.iter().map(|e| e.track_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        let corpus = load_corpus(&loaded).unwrap();
        assert_eq!(corpus[0].track, entries[0].track);
        assert_eq!(corpus[0].lips, entries[0].lips);
        assert_eq!(corpus[0].audio.samples.len(), entries[0].audio.samples.len());
        // two loads of the same bytes are equal
        assert_eq!(corpus, load_corpus(&loaded).unwrap());
    }

    #[test]
    fn label_length_mismatch_names_track() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_corpus(dir.path(), &[tiny_entry("bad_one", 3)]).unwrap();
        m.entries[0].labels.push(1);
        save_manifest(&m, &dir.path().join(MANIFEST_FILE)).unwrap();
        let err = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("bad_one"), "{err}");
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[tiny_entry("a", 2)]).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{not json}\n");
        fs::write(&p, text).unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::ManifestLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dangling_reference_names_track() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[tiny_entry("ghost", 2)]).unwrap();
        fs::remove_file(dir.path().join("audio/ghost.wav")).unwrap();
        let err = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn fractional_landmarks_round_at_ingestion() {
        let e = ManifestEntry {
            track_id: "x".into(),
            video_id: "v".into(),
            fps: 25.0,
            frames: String::new(),
            audio: String::new(),
            labels: vec![0],
            landmarks: vec![Some(vec![[2.4, 7.6]])],
            start_time: 0.0,
            crop_size: None,
            noise_rms: None,
        };
        assert_eq!(e.lip_track(1).frames[0], Some(vec![(2, 8)]));
    }

    #[test]
    fn predictions_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.csv");
        save_predictions(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "track_id,frame_index,score\n");

        let preds = FramePredictions {
            probs_av: vec![[0.9, 0.1], [0.1, 0.9]],
            probs_v: vec![[0.5, 0.5]; 2],
            probs_a: vec![[0.5, 0.5]; 2],
        };
        save_predictions(&[("t1".into(), preds)], &p).unwrap();
        let rows = load_predictions(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].frame_index, 0);
        assert!((rows[0].score - 0.1).abs() < 1e-6);
        assert!((rows[1].score - 0.9).abs() < 1e-6);
        assert!(!fs::read_to_string(&p).unwrap().contains('\r'));
    }

    #[test]
    fn prediction_validation_rejects_bad_rows() {
        let preds = FramePredictions {
            probs_av: vec![[0.7, 0.7]],
            probs_v: vec![[0.5, 0.5]],
            probs_a: vec![[0.5, 0.5]],
        };
        assert!(preds.validate().is_err());
    }
}
