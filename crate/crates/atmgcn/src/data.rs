//! Dataset handling: manifest I/O, clip preprocessing (temporal downsampling
//! and resampling with onset/apex remapping, spatial resize), clip-uniform
//! augmentation, and a synthetic micro-expression generator whose labels are
//! recoverable by construction.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::FrameSequence;
use crate::pgm;
use crate::tensor::Tensor;

// ─── manifest ───────────────────────────────────────────────────────────

/// One clip entry. `clip_dir` is resolved relative to the manifest file and
/// holds frames `frame_0001.pgm` (or `.ppm`) onward, indexed from 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub clip_dir: String,
    pub subject_id: String,
    pub onset_index: usize,
    pub apex_index: usize,
    pub num_frames: usize,
    pub label: usize,
    pub fps: f64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory the clip paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

const MANIFEST_COLUMNS: [&str; 7] = [
    "clip_dir",
    "subject_id",
    "onset_index",
    "apex_index",
    "num_frames",
    "label",
    "fps",
];

/// Load and validate a manifest CSV.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(Error::Format(format!(
            "manifest {} is empty",
            path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?
        .clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Format(format!("manifest is missing column '{col}'")));
        }
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row: ManifestRow =
            record.map_err(|e| Error::Format(format!("manifest row {}: {e}", idx + 1)))?;
        validate_row(&row, idx + 1)?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input(format!(
            "manifest {} has no clips",
            path.display()
        )));
    }
    Ok(DatasetManifest {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        rows,
    })
}

fn validate_row(row: &ManifestRow, line: usize) -> Result<()> {
    if row.onset_index != 1 {
        return Err(Error::Validation(format!(
            "row {line} ({}): onset_index must be 1, got {}",
            row.clip_dir, row.onset_index
        )));
    }
    if row.apex_index <= row.onset_index || row.apex_index > row.num_frames {
        return Err(Error::Validation(format!(
            "row {line} ({}): apex_index {} outside ({}, {}]",
            row.clip_dir, row.apex_index, row.onset_index, row.num_frames
        )));
    }
    if row.num_frames < 2 {
        return Err(Error::Validation(format!(
            "row {line} ({}): clip needs at least 2 frames",
            row.clip_dir
        )));
    }
    if row.fps <= 0.0 {
        return Err(Error::Validation(format!(
            "row {line} ({}): fps must be positive",
            row.clip_dir
        )));
    }
    Ok(())
}

pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Load the frames of one clip. Missing frame files surface lazily here,
/// with the offending path in the error.
pub fn load_clip_frames(manifest: &DatasetManifest, row: &ManifestRow) -> Result<Vec<Tensor>> {
    let dir = manifest.root.join(&row.clip_dir);
    let mut frames = Vec::with_capacity(row.num_frames);
    for i in 1..=row.num_frames {
        let pgm_path = dir.join(format!("frame_{i:04}.pgm"));
        let ppm_path = dir.join(format!("frame_{i:04}.ppm"));
        let path = if pgm_path.exists() {
            pgm_path
        } else if ppm_path.exists() {
            ppm_path
        } else {
            return Err(Error::Input(format!(
                "missing frame file {}",
                pgm_path.display()
            )));
        };
        frames.push(pgm::read_image(&path)?);
    }
    Ok(frames)
}

// ─── preprocessing ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    /// Every clip is resampled to exactly this many frames.
    pub target_len: usize,
    pub target_h: usize,
    pub target_w: usize,
    /// Uniform-stride temporal downsampling before resampling, when the
    /// source frame rate exceeds this.
    pub downsample_hz: Option<f64>,
}

/// Bilinear resize of one C×H×W frame (half-pixel sample centers). Same-size
/// calls copy the input exactly.
pub fn resize_bilinear(frame: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if h == target_h && w == target_w {
        return Ok(frame.clone());
    }
    let mut out = vec![0.0; c * target_h * target_w];
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    let src = frame.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for dy in 0..target_h {
            let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for dx in 0..target_w {
                let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[ch * target_h * target_w + dy * target_w + dx] =
                    (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![c, target_h, target_w], out)
}

/// Normalize one raw clip: optional uniform-stride downsampling to
/// `downsample_hz`, uniform resampling to exactly `target_len` frames (frame
/// 1 always kept), apex remapping with clamping to [2, target_len], and
/// bilinear resize.
pub fn preprocess(
    frames: &[Tensor],
    apex_index: usize,
    fps: f64,
    params: &PreprocessParams,
    subject_id: &str,
    label: usize,
) -> Result<FrameSequence> {
    if frames.len() < 2 {
        return Err(Error::Input(format!(
            "clip has {} frames, need at least 2",
            frames.len()
        )));
    }
    if params.target_len < 3 {
        return Err(Error::Input("target length must be >= 3".into()));
    }

    // temporal downsample by uniform stride, frame 1 kept
    let (kept, apex_kept): (Vec<&Tensor>, usize) = match params.downsample_hz {
        Some(hz) if hz > 0.0 && fps > hz => {
            let stride = (fps / hz).ceil() as usize;
            let kept: Vec<&Tensor> = frames.iter().step_by(stride).collect();
            // apex follows the nearest kept frame
            let pos = ((apex_index - 1) as f64 / stride as f64).round() as usize;
            (kept.clone(), pos.min(kept.len() - 1))
        }
        _ => (frames.iter().collect(), apex_index - 1),
    };
    if kept.len() < 2 {
        return Err(Error::Input(
            "clip shorter than 2 frames after downsampling".into(),
        ));
    }

    // uniform resample to target_len, keeping the first frame
    let lp = kept.len();
    let t = params.target_len;
    let pick = |k: usize| -> usize {
        ((k as f64) * (lp - 1) as f64 / (t - 1) as f64).round() as usize
    };
    let mut out_frames = Vec::with_capacity(t);
    for k in 0..t {
        let frame = kept[pick(k)];
        out_frames.push(resize_bilinear(frame, params.target_h, params.target_w)?);
    }
    let apex_new = 1 + ((apex_kept as f64) * (t - 1) as f64 / (lp - 1) as f64).round() as usize;
    let apex_new = apex_new.clamp(2, t);

    FrameSequence::new(out_frames, apex_new, subject_id, label)
}

// ─── augmentation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub crop: bool,
    /// Smallest retained fraction of each side when cropping.
    pub min_crop_frac: f64,
    pub jitter: bool,
    /// Brightness offset bound; draws are quantized to 1/256 steps so static
    /// content cancels exactly in frame differences.
    pub max_brightness: f64,
    /// Contrast factor bound around 1.
    pub max_contrast: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            crop: true,
            min_crop_frac: 0.875,
            jitter: true,
            max_brightness: 0.1,
            max_contrast: 0.1,
        }
    }
}

impl AugmentOptions {
    pub fn disabled() -> Self {
        AugmentOptions {
            crop: false,
            jitter: false,
            ..AugmentOptions::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.crop || self.jitter
    }
}

/// Apply one random crop window and one jitter draw to every frame of the
/// clip (temporal consistency: per-frame draws would fabricate motion).
/// The output is re-resized to the input frame size.
pub fn augment(
    sequence: &FrameSequence,
    rng: &mut ChaCha8Rng,
    options: &AugmentOptions,
) -> Result<FrameSequence> {
    if !options.is_enabled() {
        return Ok(sequence.clone());
    }
    let shape = sequence.frame_shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    let crop = if options.crop {
        let frac = rng.gen_range(options.min_crop_frac..=1.0);
        let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
        let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
        let oy = rng.gen_range(0..=(h - ch));
        let ox = rng.gen_range(0..=(w - cw));
        Some((oy, ox, ch, cw))
    } else {
        None
    };
    let (contrast, brightness) = if options.jitter {
        let a = rng.gen_range(1.0 - options.max_contrast..=1.0 + options.max_contrast);
        let raw = rng.gen_range(-options.max_brightness..=options.max_brightness);
        let b = (raw * 256.0).round() / 256.0;
        (a, b)
    } else {
        (1.0, 0.0)
    };

    let mut frames = Vec::with_capacity(sequence.len());
    for frame in sequence.frames() {
        let mut img = match crop {
            Some((oy, ox, ch, cw)) => {
                let mut data = vec![0.0; c * ch * cw];
                for chan in 0..c {
                    for y in 0..ch {
                        for x in 0..cw {
                            data[chan * ch * cw + y * cw + x] =
                                frame.data()[chan * h * w + (oy + y) * w + (ox + x)];
                        }
                    }
                }
                resize_bilinear(&Tensor::from_vec(vec![c, ch, cw], data)?, h, w)?
            }
            None => frame.clone(),
        };
        if options.jitter {
            for v in img.data_mut() {
                *v = (contrast * (*v - 0.5) + 0.5 + brightness).clamp(0.0, 1.0);
            }
        }
        frames.push(img);
    }
    FrameSequence::new(
        frames,
        sequence.apex_index(),
        sequence.subject_id(),
        sequence.label(),
    )
}

// ─── synthetic generator ────────────────────────────────────────────────

/// Specification of a synthetic dataset.
///
/// Each subject gets a smooth low-frequency base pattern; each class moves a
/// fixed image region with a fixed sign, with amplitude ramping up to the
/// apex frame and decaying after it. Labels rotate round-robin within each
/// subject so classes stay balanced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub clips_per_subject: usize,
    pub num_classes: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub clip_len: usize,
    /// Peak motion amplitude added at the blob center.
    pub amplitude: f64,
    /// Uniform pixel noise bound per frame.
    pub noise: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_subjects: 6,
            clips_per_subject: 12,
            num_classes: 3,
            frame_h: 32,
            frame_w: 32,
            clip_len: 16,
            amplitude: 0.16,
            noise: 0.02,
            fps: 30.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.clips_per_subject == 0 {
            return Err(Error::Validation("need subjects and clips".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        if self.clip_len < 3 {
            return Err(Error::Validation("clip_len must be >= 3".into()));
        }
        if self.frame_h < 8 || self.frame_w < 8 {
            return Err(Error::Validation("frames must be at least 8x8".into()));
        }
        if self.amplitude <= self.noise {
            return Err(Error::Validation(format!(
                "amplitude ({}) must exceed noise ({}) for labels to be recoverable",
                self.amplitude, self.noise
            )));
        }
        Ok(())
    }

    /// Blob center and radius of one class, shared by the generator and the
    /// pixel-space oracle.
    ///
    /// Radii differ per class: the motion encoder pools patch tokens without
    /// spatial positions, so classes must be told apart by patch content
    /// (blob scale and sign), not by where the blob sits.
    pub fn class_region(&self, class: usize) -> (f64, f64, f64) {
        let grid = (self.num_classes as f64).sqrt().ceil() as usize;
        let gx = class % grid;
        let gy = class / grid;
        let cx = (gx as f64 + 0.5) * self.frame_w as f64 / grid as f64;
        let cy = (gy as f64 + 0.5) * self.frame_h as f64 / grid as f64;
        let base = (self.frame_h.min(self.frame_w) as f64) / (3.0 * grid as f64);
        let spread = class as f64 / (self.num_classes - 1).max(1) as f64;
        (cx, cy, base * (0.7 + 0.7 * spread))
    }

    /// Motion direction of one class: alternating sign.
    pub fn class_direction(&self, class: usize) -> f64 {
        if class.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

fn mix_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 over the xored streams
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subject_base(spec: &SyntheticSpec, subject: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1000 + subject as u64));
    let (h, w) = (spec.frame_h, spec.frame_w);
    let mut comps = Vec::new();
    for _ in 0..3 {
        let fx = rng.gen_range(1..=2) as f64;
        let fy = rng.gen_range(1..=2) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.5..1.0);
        comps.push((fx, fy, phase, amp));
    }
    let total_amp: f64 = comps.iter().map(|(_, _, _, a)| a).sum();
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for (fx, fy, phase, amp) in &comps {
                v += amp
                    * (std::f64::consts::TAU
                        * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase)
                        .cos();
            }
            data[y * w + x] = 0.5 + 0.15 * v / total_amp;
        }
    }
    Tensor::from_vec(vec![1, h, w], data).expect("sized")
}

/// Amplitude envelope over the clip: 0 at the onset, 1 at the apex, decaying
/// to 0.3 by the last frame.
fn ramp(t: usize, apex: usize, len: usize) -> f64 {
    if t <= apex {
        (t - 1) as f64 / (apex - 1) as f64
    } else if len > apex {
        1.0 - 0.7 * (t - apex) as f64 / (len - apex) as f64
    } else {
        1.0
    }
}

/// Generate the dataset under `out_dir` (frames plus `manifest.csv`) and
/// return the manifest. Byte-identical for identical specs.
pub fn synthesize(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (spec.frame_h, spec.frame_w);
    let mut rows = Vec::new();
    for s in 0..spec.num_subjects {
        let base = subject_base(spec, s);
        let subject_id = format!("subject_{s:02}");
        for k in 0..spec.clips_per_subject {
            let label = k % spec.num_classes;
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, (s * 100_000 + k) as u64));
            let lo = (spec.clip_len / 3).max(2);
            let hi = (2 * spec.clip_len / 3).max(lo);
            let apex = rng.gen_range(lo..=hi);
            let (cx, cy, sigma) = spec.class_region(label);
            let dir = spec.class_direction(label);

            let clip_dir = format!("{subject_id}/clip_{k:03}");
            let dir_path = out_dir.join(&clip_dir);
            std::fs::create_dir_all(&dir_path)?;
            for t in 1..=spec.clip_len {
                let a = spec.amplitude * ramp(t, apex, spec.clip_len) * dir;
                let mut data = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                        let noise = if spec.noise > 0.0 {
                            rng.gen_range(-spec.noise..=spec.noise)
                        } else {
                            0.0
                        };
                        data[y * w + x] =
                            (base.data()[y * w + x] + a * blob + noise).clamp(0.0, 1.0);
                    }
                }
                let frame = Tensor::from_vec(vec![1, h, w], data)?;
                pgm::write_image(&dir_path.join(format!("frame_{t:04}.pgm")), &frame)?;
            }
            rows.push(ManifestRow {
                clip_dir,
                subject_id: subject_id.clone(),
                onset_index: 1,
                apex_index: apex,
                num_frames: spec.clip_len,
                label,
                fps: spec.fps,
            });
        }
    }
    save_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        rows,
    })
}

/// Pixel-space oracle: predict the class of a clip from the onset/apex
/// difference alone, by scoring each class's blob region along its expected
/// direction. Bounds what any model can be expected to learn.
pub fn oracle_predict(onset: &Tensor, apex: &Tensor, spec: &SyntheticSpec) -> usize {
    let (h, w) = (spec.frame_h, spec.frame_w);
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..spec.num_classes {
        let (cx, cy, sigma) = spec.class_region(k);
        let dir = spec.class_direction(k);
        let mut score = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= (2.0 * sigma) * (2.0 * sigma) {
                    score += dir * (apex.data()[y * w + x] - onset.data()[y * w + x]);
                    count += 1;
                }
            }
        }
        let mean = score / count.max(1) as f64;
        if mean > best.1 {
            best = (k, mean);
        }
    }
    best.0
}

/// Oracle accuracy over a generated dataset on disk.
pub fn oracle_accuracy(manifest: &DatasetManifest, spec: &SyntheticSpec) -> Result<f64> {
    let mut correct = 0usize;
    for row in &manifest.rows {
        let frames = load_clip_frames(manifest, row)?;
        let pred = oracle_predict(&frames[0], &frames[row.apex_index - 1], spec);
        if pred == row.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / manifest.rows.len() as f64)
}

/// Load, preprocess and collect every clip of a manifest.
pub fn load_dataset(
    manifest: &DatasetManifest,
    params: &PreprocessParams,
) -> Result<Vec<FrameSequence>> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let frames = load_clip_frames(manifest, row)?;
            preprocess(
                &frames,
                row.apex_index,
                row.fps,
                params,
                &row.subject_id,
                row.label,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ManifestRow {
                clip_dir: "a/c0".into(),
                subject_id: "a".into(),
                onset_index: 1,
                apex_index: 5,
                num_frames: 10,
                label: 2,
                fps: 30.0,
            },
            ManifestRow {
                clip_dir: "b/c1".into(),
                subject_id: "b".into(),
                onset_index: 1,
                apex_index: 3,
                num_frames: 8,
                label: 0,
                fps: 200.0,
            },
        ];
        let path = dir.path().join("manifest.csv");
        save_manifest(&path, &rows).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.rows, rows);
    }

    #[test]
    fn manifest_rejects_apex_before_onset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "clip_dir,subject_id,onset_index,apex_index,num_frames,label,fps\nx,s,1,1,5,0,30\n",
        );
        assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "");
        assert!(matches!(load_manifest(&path), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_rejects_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "clip_dir,subject_id,onset_index,apex_index,num_frames,label\nx,s,1,2,5,0\n",
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("fps"), "{err}");
    }

    #[test]
    fn missing_frame_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "clip_dir,subject_id,onset_index,apex_index,num_frames,label,fps\nnope,s,1,2,3,0,30\n",
        );
        let manifest = load_manifest(&path).unwrap();
        let err = load_clip_frames(&manifest, &manifest.rows[0]).unwrap_err();
        assert!(err.to_string().contains("frame_0001.pgm"), "{err}");
    }

    fn flat_frames(n: usize, h: usize, w: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| Tensor::full(&[1, h, w], (i % 250) as f64 / 256.0))
            .collect()
    }

    #[test]
    fn downsample_stride_matches_worked_example() {
        // 100 frames at 200 fps downsampled to 30 Hz: stride 7, 15 frames
        let frames = flat_frames(100, 8, 8);
        let params = PreprocessParams {
            target_len: 15,
            target_h: 8,
            target_w: 8,
            downsample_hz: Some(30.0),
        };
        let seq = preprocess(&frames, 40, 200.0, &params, "s", 0).unwrap();
        assert_eq!(seq.len(), 15);
        // stride-7 kept frames are 0, 7, ..., 98; resample is the identity
        assert_eq!(seq.frame(1).data()[0], frames[0].data()[0]);
        assert_eq!(seq.frame(2).data()[0], frames[7].data()[0]);
    }

    #[test]
    fn apex_remap_matches_worked_example() {
        // apex 40 of 100 frames resampled to 16: 1 + round(39*15/99) = 7
        let frames = flat_frames(100, 8, 8);
        let params = PreprocessParams {
            target_len: 16,
            target_h: 8,
            target_w: 8,
            downsample_hz: None,
        };
        let seq = preprocess(&frames, 40, 30.0, &params, "s", 0).unwrap();
        assert_eq!(seq.apex_index(), 7);
    }

    #[test]
    fn apex_clamps_to_two() {
        let frames = flat_frames(100, 8, 8);
        let params = PreprocessParams {
            target_len: 16,
            target_h: 8,
            target_w: 8,
            downsample_hz: None,
        };
        let seq = preprocess(&frames, 2, 30.0, &params, "s", 0).unwrap();
        assert_eq!(seq.apex_index(), 2);
    }

    #[test]
    fn preprocess_is_identity_on_conformant_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let frames: Vec<Tensor> = (0..8)
            .map(|_| {
                let data: Vec<f64> = (0..64)
                    .map(|_| pgm::dequantize(rng.gen_range(0..=255) as u8))
                    .collect();
                Tensor::from_vec(vec![1, 8, 8], data).unwrap()
            })
            .collect();
        let params = PreprocessParams {
            target_len: 8,
            target_h: 8,
            target_w: 8,
            downsample_hz: Some(30.0),
        };
        let seq = preprocess(&frames, 5, 30.0, &params, "s", 1).unwrap();
        assert_eq!(seq.apex_index(), 5);
        for (i, frame) in frames.iter().enumerate() {
            assert_eq!(seq.frame(i + 1), frame);
        }
    }

    #[test]
    fn pixel_range_preserved_through_preprocess() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let frames: Vec<Tensor> = (0..10)
            .map(|_| {
                let data: Vec<f64> = (0..16 * 12).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::from_vec(vec![1, 16, 12], data).unwrap()
            })
            .collect();
        let params = PreprocessParams {
            target_len: 6,
            target_h: 8,
            target_w: 8,
            downsample_hz: Some(15.0),
        };
        let seq = preprocess(&frames, 4, 30.0, &params, "s", 0).unwrap();
        for f in seq.frames() {
            assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augment_disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let frames = flat_frames(4, 8, 8);
        let seq = FrameSequence::new(frames, 3, "s", 0).unwrap();
        let out = augment(&seq, &mut rng, &AugmentOptions::disabled()).unwrap();
        for i in 1..=4 {
            assert_eq!(out.frame(i), seq.frame(i));
        }
    }

    #[test]
    fn augment_same_seed_same_output() {
        let frames = flat_frames(4, 8, 8);
        let seq = FrameSequence::new(frames, 3, "s", 0).unwrap();
        let opts = AugmentOptions::default();
        let a = augment(&seq, &mut ChaCha8Rng::seed_from_u64(64), &opts).unwrap();
        let b = augment(&seq, &mut ChaCha8Rng::seed_from_u64(64), &opts).unwrap();
        for i in 1..=4 {
            assert_eq!(a.frame(i), b.frame(i));
        }
    }

    #[test]
    fn brightness_offset_cancels_in_differences() {
        // clip-uniform brightness jitter leaves frame differences untouched
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let frames: Vec<Tensor> = (0..3)
            .map(|i| {
                let data: Vec<f64> = (0..64)
                    .map(|p| pgm::dequantize((60 + (p * 3 + i * 5) % 120) as u8))
                    .collect();
                Tensor::from_vec(vec![1, 8, 8], data).unwrap()
            })
            .collect();
        let seq = FrameSequence::new(frames, 2, "s", 0).unwrap();
        let opts = AugmentOptions {
            crop: false,
            jitter: true,
            max_contrast: 0.0,
            max_brightness: 0.05,
            ..AugmentOptions::default()
        };
        let out = augment(&seq, &mut rng, &opts).unwrap();
        let before = crate::motion::pair_frames(&seq).unwrap();
        let after = crate::motion::pair_frames(&out).unwrap();
        for (b, a) in before.iter().zip(after.iter()) {
            for (x, y) in b.difference.data().iter().zip(a.difference.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn synthesize_is_deterministic() {
        let spec = SyntheticSpec {
            num_subjects: 2,
            clips_per_subject: 2,
            clip_len: 5,
            frame_h: 16,
            frame_w: 16,
            ..SyntheticSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synthesize(&spec, d1.path()).unwrap();
        synthesize(&spec, d2.path()).unwrap();
        let f1 = std::fs::read(d1.path().join("subject_01/clip_001/frame_0003.pgm")).unwrap();
        let f2 = std::fs::read(d2.path().join("subject_01/clip_001/frame_0003.pgm")).unwrap();
        assert_eq!(f1, f2);
        let m1 = std::fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn oracle_is_perfect_without_noise() {
        let spec = SyntheticSpec {
            num_subjects: 3,
            clips_per_subject: 6,
            noise: 0.0,
            frame_h: 16,
            frame_w: 16,
            clip_len: 8,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthesize(&spec, dir.path()).unwrap();
        assert_eq!(oracle_accuracy(&manifest, &spec).unwrap(), 1.0);
    }

    #[test]
    fn oracle_recovers_labels_at_default_noise() {
        let spec = SyntheticSpec {
            num_subjects: 3,
            clips_per_subject: 9,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthesize(&spec, dir.path()).unwrap();
        let acc = oracle_accuracy(&manifest, &spec).unwrap();
        assert!(acc >= 0.95, "oracle accuracy {acc}");
    }

    #[test]
    fn bases_differ_across_subjects_blobs_are_shared() {
        let spec = SyntheticSpec {
            num_subjects: 2,
            clips_per_subject: 3,
            noise: 0.0,
            clip_len: 6,
            frame_h: 16,
            frame_w: 16,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthesize(&spec, dir.path()).unwrap();
        // subject bases (= onset frames, noise 0) must differ
        let s0 = load_clip_frames(&manifest, &manifest.rows[0]).unwrap();
        let s1 = load_clip_frames(&manifest, &manifest.rows[3]).unwrap();
        assert!(s0[0].max_abs_diff(&s1[0]) > 0.05);
        // same-class apex differences across subjects must correlate
        let row0 = &manifest.rows[0];
        let row1 = &manifest.rows[3];
        assert_eq!(row0.label, row1.label);
        let diff = |frames: &[Tensor], apex: usize| -> Vec<f64> {
            frames[apex - 1]
                .data()
                .iter()
                .zip(frames[0].data().iter())
                .map(|(a, b)| a - b)
                .collect()
        };
        let d0 = diff(&s0, row0.apex_index);
        let d1 = diff(&s1, row1.apex_index);
        let dot: f64 = d0.iter().zip(d1.iter()).map(|(a, b)| a * b).sum();
        let n0: f64 = d0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = d1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dot / (n0 * n1) > 0.9, "correlation {}", dot / (n0 * n1));
    }

    #[test]
    fn amplitude_below_noise_rejected() {
        let spec = SyntheticSpec {
            amplitude: 0.01,
            noise: 0.02,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    }
}
