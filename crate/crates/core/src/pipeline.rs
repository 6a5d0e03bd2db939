//! Frame-sequence I/O, windowed restoration, evaluation and run settings.
//!
//! A sequence on disk is a directory of `frame_000000.png`, ... (8-bit RGB)
//! plus `manifest.txt` with `frames <N>` and `fps <float>` lines. In memory
//! frames are `[3, H, W]` tensors in [-1, 1].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::architecture::{Model, ModelConfig};
use crate::metrics::{sequence_quality, QualityReport};
use crate::training::{window_indices, TrainConfig, VideoPair};
use crate::turbulence::{synthesize_sequence, PsfBank, SynthConfig};
use crate::{Error, Result, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const DEFAULT_FPS: f64 = 25.0;

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// Byte to internal value: `2 b / 255 - 1`.
pub fn byte_to_signed(b: u8) -> f32 {
    2.0 * (b as f32 / 255.0) - 1.0
}

/// Internal value to byte, rounding half away from zero.
pub fn signed_to_byte(v: f32) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Tensor<f32>>,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub manifest: Option<PathBuf>,
}

impl VideoSequence {
    /// Wraps frames in [-1, 1].
    pub fn new(frames: Vec<Tensor<f32>>, fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("a sequence needs at least one frame".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(
                "VideoSequence",
                format!("frames must be [3, H, W], got {shape:?}"),
            ));
        }
        if let Some(i) = frames.iter().position(|f| f.shape() != shape.as_slice()) {
            return Err(Error::shape(
                "VideoSequence",
                format!("frame {i} is {:?}, frame 0 is {shape:?}", frames[i].shape()),
            ));
        }
        Ok(VideoSequence {
            frames,
            height: shape[1],
            width: shape[2],
            fps,
            manifest: None,
        })
    }

    /// Wraps frames in [0, 1].
    pub fn from_unit(frames: &[Tensor<f32>], fps: f64) -> Result<Self> {
        VideoSequence::new(frames.iter().map(|f| f.map(|v| 2.0 * v - 1.0)).collect(), fps)
    }

    /// Frames mapped back to [0, 1].
    pub fn to_unit(&self) -> Vec<Tensor<f32>> {
        self.frames.iter().map(|f| f.map(|v| (v + 1.0) / 2.0)).collect()
    }

    /// Every sample snapped to the 8-bit lattice, as saving and loading
    /// would leave it.
    pub fn quantized(&self) -> VideoSequence {
        VideoSequence {
            frames: self
                .frames
                .iter()
                .map(|f| f.map(|v| byte_to_signed(signed_to_byte(v))))
                .collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn parse_manifest(path: &Path) -> Result<(usize, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut frames = None;
    let mut fps = None;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let bad = || Error::sequence(path, format!("malformed manifest line `{line}`"));
        let (key, value) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        match key {
            "frames" => frames = Some(value.trim().parse::<usize>().map_err(|_| bad())?),
            "fps" => fps = Some(value.trim().parse::<f64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let frames = frames.ok_or_else(|| Error::sequence(path, "manifest has no `frames` line"))?;
    Ok((frames, fps.unwrap_or(DEFAULT_FPS)))
}

fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        byte_to_signed(raw[3 * p + c])
    }))
}

fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = frame.chw();
    let mut raw = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for (p, &v) in frame.plane(c).iter().enumerate() {
            raw[3 * p + c] = signed_to_byte(v);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from the frame")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a sequence directory. The manifest must agree with the frames on
/// disk; a missing index or an extra frame is reported by file name.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<VideoSequence> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let (count, fps) = parse_manifest(&manifest)?;
    if count == 0 {
        return Err(Error::sequence(&manifest, "manifest declares zero frames"));
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(frame_file_name(i));
        if !path.is_file() {
            return Err(Error::sequence(&path, "frame missing"));
        }
        let f = read_frame(&path)?;
        if let Some(first) = frames.first() {
            let first: &Tensor<f32> = first;
            if f.shape() != first.shape() {
                return Err(Error::sequence(
                    &path,
                    format!("dimensions {:?} differ from frame 0 {:?}", f.shape(), first.shape()),
                ));
            }
        }
        frames.push(f);
    }
    let extra = dir.join(frame_file_name(count));
    if extra.exists() {
        return Err(Error::sequence(
            &extra,
            format!("manifest declares {count} frames but this file exists"),
        ));
    }
    let mut seq = VideoSequence::new(frames, fps)?;
    seq.manifest = Some(manifest);
    Ok(seq)
}

pub fn save_sequence(video: &VideoSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), f)?;
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, format!("frames {}\nfps {}\n", video.len(), video.fps)).map_err(|e| Error::io(&manifest, e))
}

/// Mirror index into `0..n` for any offset, repeating the reflection when
/// the padding exceeds the image.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads the bottom and right edges up to the next multiple of `div`.
pub fn pad_to_multiple(frame: &Tensor<f32>, div: usize) -> Tensor<f32> {
    let (c, h, w) = frame.chw();
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    if (ph, pw) == (h, w) {
        return frame.clone();
    }
    let src = frame.data();
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        src[(ch * h + mirror(y as isize, h)) * w + mirror(x as isize, w)]
    })
}

pub fn crop_top_left(frame: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, fh, fw) = frame.chw();
    if (fh, fw) == (h, w) {
        return frame.clone();
    }
    let src = frame.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        src[(ch * fh + y) * fw + x]
    })
}

/// Restores every frame from its edge-replicated window. Frames are
/// processed in parallel; the output keeps the input order and size.
pub fn restore_video(input: &VideoSequence, model: &Model<f32>) -> Result<VideoSequence> {
    let cfg = &model.config;
    if cfg.color_channels != 3 {
        return Err(Error::Config(format!(
            "model expects {} colour channels, frames have 3",
            cfg.color_channels
        )));
    }
    let div = cfg.required_divisor();
    let padded: Vec<Tensor<f32>> = input.frames.iter().map(|f| pad_to_multiple(f, div)).collect();
    let frames = (0..input.len())
        .into_par_iter()
        .map(|t| {
            let idx = window_indices(t, input.len(), cfg.n_back, cfg.n_forward);
            let parts: Vec<&Tensor<f32>> = idx.iter().map(|&i| &padded[i]).collect();
            let window = Tensor::concat_channels(&parts)?;
            let out = model.forward(&window)?.restored();
            Ok(crop_top_left(&out, input.height, input.width))
        })
        .collect::<Result<Vec<_>>>()?;
    VideoSequence::new(frames, input.fps)
}

/// Quality of `test` against `reference` on [0, 1] data.
pub fn evaluate(test: &VideoSequence, reference: &VideoSequence) -> Result<QualityReport> {
    if test.len() != reference.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} test frames vs {} reference frames", test.len(), reference.len()),
        ));
    }
    if (test.height, test.width) != (reference.height, reference.width) {
        return Err(Error::shape(
            "evaluate",
            format!(
                "test frames are {}x{}, reference frames are {}x{}",
                test.height, test.width, reference.height, reference.width
            ),
        ));
    }
    sequence_quality(&test.to_unit(), &reference.to_unit())
}

pub fn evaluate_sequences(
    test_dir: impl AsRef<Path>,
    ref_dir: impl AsRef<Path>,
    csv_out: Option<&Path>,
) -> Result<QualityReport> {
    let report = evaluate(&load_sequence(test_dir)?, &load_sequence(ref_dir)?)?;
    if let Some(path) = csv_out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// A training directory holds `clean/` and `distorted/` sequences.
pub const CLEAN_DIR: &str = "clean";
pub const DISTORTED_DIR: &str = "distorted";

/// Pair directories under `root`: `root` itself when it holds `clean/`,
/// otherwise each sub-directory that does, in name order.
pub fn find_pair_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join(CLEAN_DIR).is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CLEAN_DIR).is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::sequence(root, "no `clean`/`distorted` pair found"));
    }
    Ok(dirs)
}

/// Degrades a clean sequence with the simulator; frame rate is kept.
pub fn synthesize_video(clean: &VideoSequence, bank: &PsfBank, config: &SynthConfig) -> Result<VideoSequence> {
    let distorted = synthesize_sequence(&clean.to_unit(), bank, config)?;
    VideoSequence::from_unit(&distorted, clean.fps)
}

/// Loads every `clean`/`distorted` pair under `root` as training data.
pub fn load_training_pairs(root: impl AsRef<Path>) -> Result<Vec<VideoPair>> {
    find_pair_dirs(root)?
        .into_iter()
        .map(|dir| {
            let clean = load_sequence(dir.join(CLEAN_DIR))?;
            let distorted = load_sequence(dir.join(DISTORTED_DIR))?;
            if distorted.len() != clean.len() {
                return Err(Error::sequence(
                    &dir,
                    format!("{} distorted frames vs {} clean frames", distorted.len(), clean.len()),
                ));
            }
            VideoPair::new(distorted.to_unit(), clean.to_unit())
        })
        .collect()
}

/// Which settings a `preset` key selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Tiny,
}

/// Paths named by a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunPaths {
    pub data: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub psf_dir: Option<PathBuf>,
}

/// Settings of one command, assembled from defaults, an optional
/// `key = value` file and command-line flags, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paths: RunPaths::default(),
        }
    }
}

/// Recognised keys with their defaults, as listed by `--help`.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("preset", "full (or tiny)"),
    ("window", "5"),
    ("channels", "64"),
    ("scales", "4"),
    ("unet-depth", "5"),
    ("alpha", "0.2"),
    ("no-refinement", "false"),
    ("real-valued", "false"),
    ("lr", "0.0001"),
    ("epochs", "200"),
    ("max-steps", "none"),
    ("batch-size", "1"),
    ("crop", "256"),
    ("seed", "0"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam-epsilon", "1e-8"),
    ("charbonnier-epsilon", "0.001"),
    ("pyramid-levels", "3"),
    ("supervise-all-frames", "true"),
    ("supervise-encoder", "false"),
    ("tile-rows", "4"),
    ("tile-cols", "4"),
    ("psf-scale-min", "0.5"),
    ("psf-scale-max", "1.5"),
    ("noise-sigma-min", "0"),
    ("noise-sigma-max", "0.02"),
    ("data", "none"),
    ("checkpoint-out", "none"),
    ("model", "none"),
    ("input", "none"),
    ("output", "none"),
    ("test", "none"),
    ("ref", "none"),
    ("csv", "none"),
    ("psf-dir", "none"),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set_preset(&mut self, preset: Preset) {
        self.preset = preset;
        self.model = match preset {
            Preset::Full => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        };
        self.train.crop = match preset {
            Preset::Full => TrainConfig::default().crop,
            Preset::Tiny => 32,
        };
    }

    /// Applies one setting. Keys mirror the command-line flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        let path = || Some(PathBuf::from(v));
        match key {
            "preset" => {
                let p = match v {
                    "full" | "default" => Preset::Full,
                    "tiny" => Preset::Tiny,
                    _ => return Err(Error::Config(format!("unknown preset `{v}` (full, tiny)"))),
                };
                self.set_preset(p);
            }
            "window" => {
                let n: usize = parse_value(key, v)?;
                if n == 0 || n % 2 == 0 {
                    return Err(Error::Config(format!("window must be odd and positive, got {n}")));
                }
                m.n_back = n / 2;
                m.n_forward = n / 2;
            }
            "channels" => m.channels = parse_value(key, v)?,
            "scales" => m.scales = parse_value(key, v)?,
            "unet-depth" => m.unet_depth = parse_value(key, v)?,
            "alpha" => m.alpha = parse_value(key, v)?,
            "no-refinement" => m.refinement_enabled = !parse_bool(key, v)?,
            "real-valued" => m.real_valued = parse_bool(key, v)?,
            "lr" => t.learning_rate = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "max-steps" => t.max_steps = Some(parse_value(key, v)?),
            "batch-size" => t.batch_size = parse_value(key, v)?,
            "crop" => t.crop = parse_value(key, v)?,
            "seed" => {
                t.seed = parse_value(key, v)?;
                s.seed = t.seed;
            }
            "beta1" => t.beta1 = parse_value(key, v)?,
            "beta2" => t.beta2 = parse_value(key, v)?,
            "adam-epsilon" => t.adam_epsilon = parse_value(key, v)?,
            "charbonnier-epsilon" => t.charbonnier_epsilon = parse_value(key, v)?,
            "pyramid-levels" => t.pyramid_levels = parse_value(key, v)?,
            "supervise-all-frames" => t.supervise_all_frames = parse_bool(key, v)?,
            "supervise-encoder" => t.supervise_encoder = parse_bool(key, v)?,
            "tile-rows" => s.tile_rows = parse_value(key, v)?,
            "tile-cols" => s.tile_cols = parse_value(key, v)?,
            "psf-scale-min" => s.psf_scale_range.0 = parse_value(key, v)?,
            "psf-scale-max" => s.psf_scale_range.1 = parse_value(key, v)?,
            "noise-sigma-min" => s.noise_sigma_range.0 = parse_value(key, v)?,
            "noise-sigma-max" => s.noise_sigma_range.1 = parse_value(key, v)?,
            "data" => self.paths.data = path(),
            "checkpoint-out" => self.paths.checkpoint_out = path(),
            "model" => self.paths.model = path(),
            "input" => self.paths.input = path(),
            "output" => self.paths.output = path(),
            "test" => self.paths.test = path(),
            "ref" => self.paths.reference = path(),
            "csv" => self.paths.csv = path(),
            "psf-dir" => self.paths.psf_dir = path(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. A `preset` line
    /// is applied first wherever it appears.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(_, k, _)| k != "preset");
        for (n, k, v) in pairs {
            self.set(&k, &v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[3, h, w], |_| byte_to_signed(rng.random())))
            .collect()
    }

    #[test]
    fn quantized_matches_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = VideoSequence::from_unit(&crate::turbulence::procedural_scene(9, 7, 2, 3), 30.0).unwrap();
        save_sequence(&video, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.frames, video.quantized().frames);
        assert_eq!(video.quantized().quantized().frames, video.quantized().frames);
    }

    #[test]
    fn byte_mapping_examples() {
        assert_eq!(byte_to_signed(255), 1.0);
        assert_eq!(byte_to_signed(0), -1.0);
        assert_eq!(byte_to_signed(128), 2.0 * (128.0f32 / 255.0) - 1.0);
        assert_eq!(signed_to_byte(-1.0), 0);
        assert_eq!(signed_to_byte(1.0), 255);
        assert_eq!(signed_to_byte(0.0), 128);
        for b in 0..=255u8 {
            assert_eq!(signed_to_byte(byte_to_signed(b)), b);
        }
    }

    #[test]
    fn sequence_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seq = VideoSequence::new(random_frames(3, 5, 7, 1), 30.0).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.fps, 30.0);
        assert_eq!((back.height, back.width), (5, 7));
        let again = tempfile::tempdir().unwrap();
        save_sequence(&back, again.path()).unwrap();
        for i in 0..3 {
            let a = fs::read(dir.path().join(frame_file_name(i))).unwrap();
            let b = fs::read(again.path().join(frame_file_name(i))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gap_and_count_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let seq = VideoSequence::new(random_frames(7, 4, 4, 2), 25.0).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_000005.png")).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_000005.png"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "frames 6\nfps 25\n").unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_000006.png"), "{err}");

        fs::write(dir.path().join(MANIFEST), "frames seven\n").unwrap();
        assert!(load_sequence(dir.path()).unwrap_err().to_string().contains("manifest"));
    }

    #[test]
    fn dimension_mismatch_named() {
        let dir = tempfile::tempdir().unwrap();
        let seq = VideoSequence::new(random_frames(2, 4, 4, 2), 25.0).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let other = VideoSequence::new(random_frames(1, 4, 6, 3), 25.0).unwrap();
        write_frame(&dir.path().join(frame_file_name(1)), &other.frames[0]).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_000001.png"), "{err}");
    }

    #[test]
    fn mirror_padding() {
        assert_eq!(
            (-3..8).map(|i| mirror(i, 3)).collect::<Vec<_>>(),
            [1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]
        );
        assert_eq!(mirror(5, 1), 0);
        let f = Tensor::from_fn(&[3, 3, 5], |i| i as f32);
        let p = pad_to_multiple(&f, 4);
        assert_eq!(p.shape(), &[3, 4, 8]);
        assert_eq!(crop_top_left(&p, 3, 5), f);
        // row 3 reflects row 1, column 5 reflects column 3
        assert_eq!(p.data()[3 * 8], f.data()[5]);
        assert_eq!(p.data()[5], f.data()[3]);
    }

    #[test]
    fn restore_keeps_length_and_size() {
        let cfg = ModelConfig {
            channels: 4,
            ..ModelConfig::tiny()
        };
        let model = init_params::<f32>(&cfg, 0).unwrap();
        let seq = VideoSequence::new(random_frames(4, 20, 36, 5), 25.0).unwrap();
        let out = restore_video(&seq, &model).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!((out.height, out.width), (20, 36));
        assert_eq!(restore_video(&seq, &model).unwrap(), out);
        // frame 0 sees window [0, 0, 1]
        let window = Tensor::concat_channels(&[
            &pad_to_multiple(&seq.frames[0], 32),
            &pad_to_multiple(&seq.frames[0], 32),
            &pad_to_multiple(&seq.frames[1], 32),
        ])
        .unwrap();
        let direct = crop_top_left(&model.forward(&window).unwrap().restored(), 20, 36);
        assert_eq!(out.frames[0], direct);
    }

    #[test]
    fn evaluate_self_and_mismatch() {
        let a = VideoSequence::new(random_frames(3, 16, 16, 1), 25.0).unwrap();
        let r = evaluate(&a, &a).unwrap();
        assert!(r.frames.iter().flat_map(|f| &f.channels).all(|c| c.ssim == 1.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 3 + 3 + 1);
        let b = VideoSequence::new(random_frames(2, 16, 16, 1), 25.0).unwrap();
        assert!(evaluate(&a, &b).is_err());
        let c = VideoSequence::new(random_frames(3, 16, 8, 1), 25.0).unwrap();
        assert!(evaluate(&a, &c).is_err());
    }

    #[test]
    fn evaluate_sequences_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let a = VideoSequence::new(random_frames(2, 16, 16, 4), 25.0).unwrap();
        save_sequence(&a, dir.path().join("a")).unwrap();
        let csv = dir.path().join("out/q.csv");
        let r = evaluate_sequences(dir.path().join("a"), dir.path().join("a"), Some(&csv)).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), r.to_csv());
    }

    #[test]
    fn training_pairs_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let clean = VideoSequence::new(random_frames(3, 8, 8, 1), 25.0).unwrap();
        save_sequence(&clean, dir.path().join("a").join(CLEAN_DIR)).unwrap();
        let bank = PsfBank::delta(2);
        let cfg = SynthConfig {
            noise_sigma_range: (0.0, 0.0),
            ..SynthConfig::default()
        };
        let distorted = synthesize_video(&clean, &bank, &cfg).unwrap();
        assert_eq!(distorted.frames, clean.frames);
        save_sequence(&distorted, dir.path().join("a").join(DISTORTED_DIR)).unwrap();
        save_sequence(&clean, dir.path().join("b").join(CLEAN_DIR)).unwrap();
        save_sequence(
            &VideoSequence::new(random_frames(2, 8, 8, 1), 25.0).unwrap(),
            dir.path().join("b").join(DISTORTED_DIR),
        )
        .unwrap();
        let err = load_training_pairs(dir.path()).unwrap_err().to_string();
        assert!(err.contains("2 distorted frames vs 3 clean frames"), "{err}");
        let pairs = load_training_pairs(dir.path().join("a")).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].clean, clean.to_unit());
    }

    #[test]
    fn run_config_parsing() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# run\nlr = 0.001\nwindow = 3 # three frames\npreset = tiny\nno-refinement = true\ndata = /tmp/d\n",
        )
        .unwrap();
        assert_eq!(c.preset, Preset::Tiny);
        assert_eq!(c.model.channels, ModelConfig::tiny().channels);
        assert_eq!((c.model.n_back, c.model.n_forward), (1, 1));
        assert!(!c.model.refinement_enabled);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.crop, 32);
        assert_eq!(c.paths.data, Some(PathBuf::from("/tmp/d")));
        c.validate().unwrap();

        let d = RunConfig::default();
        assert_eq!(d.train.learning_rate, 1e-4);
        assert_eq!(d.model.n_frames(), 5);

        let err = RunConfig::default()
            .apply_text("learning_rate = 1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown key `learning_rate`"), "{err}");
        assert!(RunConfig::default().apply_text("window = 4").is_err());
        assert!(RunConfig::default().apply_text("lr").is_err());
        assert!(RunConfig::default().apply_text("epochs = many").is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for (k, _) in RUN_KEYS {
            let value = match *k {
                "preset" => "tiny",
                "window" => "3",
                "alpha" | "lr" | "beta1" | "beta2" | "adam-epsilon" | "charbonnier-epsilon" => "0.5",
                "psf-scale-min" | "psf-scale-max" | "noise-sigma-min" | "noise-sigma-max" => "0.5",
                "no-refinement" | "real-valued" | "supervise-all-frames" | "supervise-encoder" => "true",
                "data" | "checkpoint-out" | "model" | "input" | "output" | "test" | "ref" | "csv" | "psf-dir" => "x",
                _ => "2",
            };
            RunConfig::default()
                .set(k, value)
                .unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    proptest! {
        #[test]
        fn load_save_load_is_idempotent(bytes in proptest::collection::vec(any::<u8>(), 3 * 2 * 3)) {
            let f = Tensor::from_fn(&[3, 2, 3], |i| byte_to_signed(bytes[i]));
            let back: Vec<u8> = f.data().iter().map(|&v| signed_to_byte(v)).collect();
            let idx: Vec<u8> = (0..18).map(|i| bytes[i]).collect();
            prop_assert_eq!(back, idx);
        }
    }
}
