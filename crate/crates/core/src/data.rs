//! Synthetic "stick actor" clips and the on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json       {"classes": [...], "clips": [{"id", "file", "label", "split"}]}
//! annotations.jsonl   one KeypointAnnotation per line
//! clips/<id>.ptnsr    T×1×H×W clip
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{self, KeypointAnnotation};
use crate::par::{self, Execution};
use crate::ptnsr;
use crate::tensor::Tensor;

pub const LANDMARKS: usize = 5;
pub const CLASS_NAMES: [&str; 4] = ["hands_vertical", "translate", "hand_circle", "still"];

/// Blob standard deviation in pixels at 32-pixel frames.
const BLOB_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    /// Square frame side.
    pub size: usize,
    /// 1 or 2 actors.
    pub persons: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Class `c` gets `clips_per_class · imbalance^(-c/(C-1))` clips.
    pub imbalance: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            clips_per_class: 50,
            frames: 12,
            size: 32,
            persons: 1,
            noise: 0.05,
            imbalance: 1.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::config(format!("num_classes must be 1..=4, got {}", self.num_classes)));
        }
        if !(4..=64).contains(&self.frames) {
            return Err(Error::config(format!("frames must be in 4..=64, got {}", self.frames)));
        }
        if !(32..=128).contains(&self.size) {
            return Err(Error::config(format!("size must be in 32..=128, got {}", self.size)));
        }
        if !(1..=2).contains(&self.persons) {
            return Err(Error::config("persons must be 1 or 2"));
        }
        if self.clips_per_class == 0 || !(self.imbalance >= 1.0) || !(self.noise >= 0.0) {
            return Err(Error::config("need clips_per_class ≥ 1, imbalance ≥ 1 and noise ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn clips_for_class(&self, class: usize) -> usize {
        if self.num_classes == 1 {
            return self.clips_per_class;
        }
        let e = class as f64 / (self.num_classes - 1) as f64;
        ((self.clips_per_class as f64 * self.imbalance.powf(-e)).round() as usize).max(1)
    }
}

/// splitmix64 finaliser over `master + index·γ`.
pub fn clip_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    /// `T×1×H×W`
    pub clip: Tensor<f32>,
    pub annotations: Vec<KeypointAnnotation>,
    pub label: usize,
}

/// Rest pose at 32-pixel scale: head, left hand, right hand, left foot, right foot.
const REST: [(f64, f64); LANDMARKS] = [(0.0, -9.0), (-6.0, -1.0), (6.0, -1.0), (-3.0, 9.0), (3.0, 9.0)];

struct Actor {
    cx: f64,
    cy: f64,
    phase: f64,
    /// radians per frame
    omega: f64,
    amp: f64,
    /// pixels per frame, sign gives direction
    velocity: f64,
}

impl Actor {
    fn sample(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, class: usize) -> Self {
        let s = spec.size as f64 / 32.0;
        let velocity = if class == 1 {
            let v = rng.random_range(0.6..1.0) * s;
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        } else {
            0.0
        };
        // centred trajectory with a little jitter, always inside the frame
        let travel = velocity * (spec.frames - 1) as f64;
        let size = spec.size as f64;
        let jitter = 2.0 * s;
        let cx = 0.5 * (size - 1.0) - 0.5 * travel + rng.random_range(-jitter..jitter);
        let cy = 0.5 * (size - 1.0) + rng.random_range(-jitter..jitter);
        Self {
            cx,
            cy,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            omega: rng.random_range(1.0..1.6),
            amp: rng.random_range(4.0..5.5) * s,
            velocity,
        }
    }

    fn keypoints(&self, class: usize, frame: usize, scale: f64, size: usize) -> Vec<[f64; 3]> {
        let t = frame as f64;
        let angle = self.omega * t + self.phase;
        let max = (size - 1) as f64;
        (0..LANDMARKS)
            .map(|l| {
                let (rx, ry) = REST[l];
                let (mut x, mut y) = (self.cx + rx * scale, self.cy + ry * scale);
                match (class, l) {
                    (0, 1 | 2) => y += self.amp * angle.sin(),
                    (1, _) => x += self.velocity * t,
                    (2, 2) => {
                        x += self.amp * angle.cos();
                        y += self.amp * angle.sin();
                    }
                    _ => {}
                }
                [x.round().clamp(0.0, max), y.round().clamp(0.0, max), 1.0]
            })
            .collect()
    }
}

/// Render one clip of class `class`. Every blob peaks at 1 on its integer
/// centre and blobs combine by max.
pub fn generate_clip(spec: &SyntheticSpec, class: usize, seed: u64) -> Result<SyntheticClip> {
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::config(format!("class {class} out of range for {} classes", spec.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = spec.size as f64 / 32.0;
    let actors: Vec<Actor> = (0..spec.persons).map(|_| Actor::sample(&mut rng, spec, class)).collect();
    let (t, n) = (spec.frames, spec.size);
    let sigma = BLOB_SIGMA * scale;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach = (3.0 * sigma).ceil() as isize;
    let mut data = vec![0f32; t * n * n];
    let mut annotations = Vec::with_capacity(t * spec.persons);
    for f in 0..t {
        let plane = &mut data[f * n * n..(f + 1) * n * n];
        for (p, actor) in actors.iter().enumerate() {
            let kps = actor.keypoints(class, f, scale, n);
            for kp in &kps {
                let (kx, ky) = (kp[0] as isize, kp[1] as isize);
                for y in (ky - reach).max(0)..=(ky + reach).min(n as isize - 1) {
                    for x in (kx - reach).max(0)..=(kx + reach).min(n as isize - 1) {
                        let d2 = ((x - kx).pow(2) + (y - ky).pow(2)) as f64;
                        let v = (-d2 * inv).exp() as f32;
                        let cell = &mut plane[y as usize * n + x as usize];
                        *cell = cell.max(v);
                    }
                }
            }
            annotations.push(KeypointAnnotation { clip: String::new(), frame: f, person: p, kps });
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("non-negative std");
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    Ok(SyntheticClip { clip: Tensor::new(vec![t, 1, n, n], data)?, annotations, label: class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    /// Ids are unique (so no clip is in both splits) and labels are in range.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::format("manifest lists no classes"));
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.clips {
            if let Some(prev) = seen.insert(&e.id, e.split) {
                return Err(Error::format(if prev == e.split {
                    format!("clip {} listed twice", e.id)
                } else {
                    format!("clip {} appears in both train and test", e.id)
                }));
            }
            if e.label >= self.classes.len() {
                return Err(Error::format(format!(
                    "clip {} has label {} but only {} classes",
                    e.id,
                    e.label,
                    self.classes.len()
                )));
            }
        }
        let files: HashSet<&str> = self.clips.iter().map(|e| e.file.as_str()).collect();
        if files.len() != self.clips.len() {
            return Err(Error::format("two manifest entries share a file"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: Tensor<f32>,
    pub label: usize,
    pub split: Split,
    pub annotations: Vec<KeypointAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            classes: self.classes.clone(),
            clips: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    file: format!("clips/{}.ptnsr", s.id),
                    label: s.label,
                    split: s.split,
                })
                .collect(),
        }
    }
}

/// Generate the whole dataset. Within each class the last
/// `round(n·test_fraction)` clips go to the test split.
pub fn generate_dataset(spec: &SyntheticSpec, exec: Execution) -> Result<Dataset> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for class in 0..spec.num_classes {
        let n = spec.clips_for_class(class);
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        for i in 0..n {
            let split = if i >= n - n_test { Split::Test } else { Split::Train };
            jobs.push((class, i, split));
        }
    }
    let samples = par::map(exec, &jobs, |&(class, i, split)| -> Result<Sample> {
        let id = format!("c{class}_{i:04}");
        let index = (class as u64) << 32 | i as u64;
        let mut clip = generate_clip(spec, class, clip_seed(spec.seed, index))?;
        clip.annotations.iter_mut().for_each(|a| a.clip = id.clone());
        Ok(Sample { id, clip: clip.clip, label: class, split, annotations: clip.annotations })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let classes = CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect();
    Ok(Dataset { classes, samples })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let manifest = ds.manifest();
    manifest.validate()?;
    fs::create_dir_all(dir.join("clips"))?;
    for (s, e) in ds.samples.iter().zip(&manifest.clips) {
        ptnsr::write(dir.join(&e.file), &s.clip)?;
    }
    let all: Vec<KeypointAnnotation> = ds.samples.iter().flat_map(|s| s.annotations.iter().cloned()).collect();
    let out = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    heatmap::write_jsonl(out, &all)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest.json: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let annotations = heatmap::read_jsonl(BufReader::new(fs::File::open(dir.join("annotations.jsonl"))?))?;
    let mut by_clip: BTreeMap<String, Vec<KeypointAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_clip.entry(a.clip.clone()).or_default().push(a);
    }
    let mut samples = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let clip: Tensor<f32> = ptnsr::read(dir.join(&e.file))?;
        if clip.rank() != 4 {
            return Err(Error::format(format!("{} is not a T×C×H×W clip: {:?}", e.file, clip.dims())));
        }
        samples.push(Sample {
            id: e.id.clone(),
            clip,
            label: e.label,
            split: e.split,
            annotations: by_clip.remove(&e.id).unwrap_or_default(),
        });
    }
    Ok(Dataset { classes: manifest.classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticSpec {
        SyntheticSpec { noise: 0.0, ..SyntheticSpec::default() }
    }

    #[test]
    fn same_seed_same_clip() {
        let s = SyntheticSpec::default();
        for class in 0..4 {
            assert_eq!(generate_clip(&s, class, 7).unwrap(), generate_clip(&s, class, 7).unwrap());
        }
        assert_ne!(generate_clip(&s, 0, 7).unwrap().clip, generate_clip(&s, 0, 8).unwrap().clip);
    }

    #[test]
    fn annotations_sit_on_blob_peaks() {
        let s = quiet();
        for class in 0..4 {
            for seed in 0..5 {
                let c = generate_clip(&s, class, seed).unwrap();
                for a in &c.annotations {
                    let frame = &c.clip.data()[a.frame * 32 * 32..(a.frame + 1) * 32 * 32];
                    let peak = frame.iter().cloned().fold(f32::MIN, f32::max);
                    for kp in &a.kps {
                        assert!(kp[0] >= 0.0 && kp[0] <= 31.0 && kp[1] >= 0.0 && kp[1] <= 31.0);
                        assert_eq!(frame[kp[1] as usize * 32 + kp[0] as usize], peak);
                        assert_eq!(kp[2], 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn keypoints_stay_in_frame_at_larger_sizes() {
        let s = SyntheticSpec { size: 64, frames: 16, persons: 2, ..quiet() };
        for class in 0..4 {
            for seed in 0..20 {
                for a in generate_clip(&s, class, seed).unwrap().annotations {
                    for kp in a.kps {
                        assert!((0.0..=63.0).contains(&kp[0]) && (0.0..=63.0).contains(&kp[1]));
                    }
                }
            }
        }
    }

    #[test]
    fn vertical_hand_motion_separates_classes() {
        let s = quiet();
        let mean_dy = |class: usize| {
            let mut total = 0.0;
            let mut n = 0;
            for seed in 0..100 {
                let c = generate_clip(&s, class, clip_seed(1, seed)).unwrap();
                for w in c.annotations.windows(2) {
                    total += (w[1].kps[1][1] - w[0].kps[1][1]).abs();
                    n += 1;
                }
            }
            total / n as f64
        };
        assert!(mean_dy(0) > 1.0);
        assert_eq!(mean_dy(3), 0.0);
    }

    #[test]
    fn splits_and_balance() {
        let s = SyntheticSpec { clips_per_class: 10, ..SyntheticSpec::default() };
        let ds = generate_dataset(&s, Execution::Sequential).unwrap();
        assert_eq!(ds.samples.len(), 40);
        assert_eq!(ds.split(Split::Test).len(), 8);
        let s = SyntheticSpec { clips_per_class: 10, imbalance: 10.0, ..SyntheticSpec::default() };
        assert_eq!((0..4).map(|c| s.clips_for_class(c)).collect::<Vec<_>>(), vec![10, 5, 2, 1]);
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let s = SyntheticSpec { clips_per_class: 3, ..SyntheticSpec::default() };
        assert_eq!(
            generate_dataset(&s, Execution::Sequential).unwrap(),
            generate_dataset(&s, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn disk_round_trip_is_bitwise() {
        let s = SyntheticSpec { clips_per_class: 3, persons: 2, ..SyntheticSpec::default() };
        let ds = generate_dataset(&s, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let entry = |split| ManifestEntry { id: "a".into(), file: "clips/a.ptnsr".into(), label: 0, split };
        let m = Manifest { classes: vec!["x".into()], clips: vec![entry(Split::Train), entry(Split::Test)] };
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("both train and test"));
    }

    #[test]
    fn corrupt_clip_is_a_format_error() {
        let s = SyntheticSpec { clips_per_class: 1, num_classes: 1, ..SyntheticSpec::default() };
        let ds = generate_dataset(&s, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("clips/c0_0000.ptnsr");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
