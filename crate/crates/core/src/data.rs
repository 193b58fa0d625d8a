//! Skeleton sequences, the JSON-lines dataset format, synthetic data with
//! planted informative joints, noise injection and stratified splitting.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::twostream::BodyPartition;

/// A `joints x frames` grid of 3-D joint positions (meters) with a label.
///
/// `coords` is joint-major: joint `j`, frame `t`, axis `a` lives at
/// `(j * frames + t) * 3 + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSequence {
    pub id: String,
    pub label: usize,
    pub joints: usize,
    pub frames: usize,
    pub coords: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(id: impl Into<String>, label: usize, joints: usize, frames: usize, coords: Vec<f64>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            label,
            joints,
            frames,
            coords,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.frames == 0 {
            return Err(Error::contract(format!(
                "sequence {} has {} joints and {} frames",
                self.id, self.joints, self.frames
            )));
        }
        if self.coords.len() != self.joints * self.frames * 3 {
            return Err(Error::shape(
                "SkeletonSequence",
                format!(
                    "sequence {} has {} coordinates, expected {}",
                    self.id,
                    self.coords.len(),
                    self.joints * self.frames * 3
                ),
            ));
        }
        if let Some(k) = self.coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("sequence {} coordinate {k}", self.id),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn point(&self, joint: usize, frame: usize) -> [f64; 3] {
        let s = (joint * self.frames + frame) * 3;
        [self.coords[s], self.coords[s + 1], self.coords[s + 2]]
    }
}

/// Whether a class is keyed to individual joints or to a whole body part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Fine,
    Coarse,
}

/// One synthetic action class: which joints carry the class motion and how
/// they move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ClassKind,
    pub informative_joints: Vec<usize>,
    /// Half-cycles of the displacement profile per active window; `1.0` is a
    /// single out-and-back stroke.
    pub frequency: f64,
    /// Direction of the displacement (normalized on use).
    pub axis: [f64; 3],
}

/// Generator parameters. Lengths are meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub joints: usize,
    pub frames: usize,
    pub classes: Vec<ClassSpec>,
    /// Joint lists of the five body parts.
    pub partition: Vec<Vec<usize>>,
    pub informative_amplitude: f64,
    /// Upper bound of the per-joint background motion amplitude.
    pub distractor_amplitude: f64,
    pub noise_sigma: f64,
    /// Length of the window in which the class motion is performed.
    pub active_frames: usize,
    /// Relative spread of the per-sequence amplitude.
    pub amplitude_jitter: f64,
    pub per_class: usize,
    pub seed: u64,
}

/// Rest pose of the 15-joint skeleton, roughly 1.7 m tall, root at the pelvis.
const REST_POSE_15: [[f64; 3]; 15] = [
    [0.00, 1.00, 0.00], // 0 pelvis (root)
    [0.00, 1.30, 0.00], // 1 spine
    [0.00, 1.65, 0.00], // 2 head
    [-0.20, 1.45, 0.00], // 3 left shoulder
    [-0.45, 1.45, 0.00], // 4 left elbow
    [-0.70, 1.45, 0.00], // 5 left hand
    [0.20, 1.45, 0.00], // 6 right shoulder
    [0.45, 1.45, 0.00], // 7 right elbow
    [0.70, 1.45, 0.00], // 8 right hand
    [-0.10, 0.95, 0.00], // 9 left hip
    [-0.12, 0.50, 0.00], // 10 left knee
    [-0.13, 0.05, 0.00], // 11 left foot
    [0.10, 0.95, 0.00], // 12 right hip
    [0.12, 0.50, 0.00], // 13 right knee
    [0.13, 0.05, 0.00], // 14 right foot
];

/// Joint designated as the normalization origin.
pub const ROOT_JOINT: usize = 0;

impl Default for SyntheticSpec {
    fn default() -> Self {
        let fine = |name: &str, joints: [usize; 2], frequency: f64, axis: [f64; 3]| ClassSpec {
            name: name.into(),
            kind: ClassKind::Fine,
            informative_joints: joints.to_vec(),
            frequency,
            axis,
        };
        let coarse = |name: &str, joints: [usize; 3], frequency: f64, axis: [f64; 3]| ClassSpec {
            name: name.into(),
            kind: ClassKind::Coarse,
            informative_joints: joints.to_vec(),
            frequency,
            axis,
        };
        Self {
            joints: 15,
            frames: 20,
            classes: vec![
                fine("left_hand_right_foot", [5, 14], 1.0, [0.0, 1.0, 0.0]),
                fine("right_hand_left_foot", [8, 11], 1.0, [0.0, 1.0, 0.0]),
                fine("head_left_hand", [2, 5], 1.0, [0.0, 0.0, 1.0]),
                fine("right_elbow_left_knee", [7, 10], 1.0, [0.0, 0.0, 1.0]),
                coarse("left_arm", [3, 4, 5], 1.0, [0.0, 1.0, 0.0]),
                coarse("right_arm", [6, 7, 8], 1.0, [0.0, 1.0, 0.0]),
                coarse("left_leg", [9, 10, 11], 1.0, [0.0, 0.0, 1.0]),
                coarse("right_leg", [12, 13, 14], 1.0, [0.0, 0.0, 1.0]),
            ],
            partition: vec![
                vec![0, 1, 2],
                vec![3, 4, 5],
                vec![6, 7, 8],
                vec![9, 10, 11],
                vec![12, 13, 14],
            ],
            informative_amplitude: 0.3,
            distractor_amplitude: 0.1,
            noise_sigma: 0.01,
            active_frames: 14,
            amplitude_jitter: 0.3,
            per_class: 150,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("synthetic spec: {m}")));
        if self.joints == 0 || self.frames == 0 {
            return bad("joints and frames must be positive".into());
        }
        if self.classes.len() < 2 {
            return bad(format!(
                "{} class(es) is a degenerate classification problem",
                self.classes.len()
            ));
        }
        for c in &self.classes {
            if c.informative_joints.is_empty() {
                return bad(format!("class {} has no informative joints", c.name));
            }
            if let Some(j) = c.informative_joints.iter().find(|&&j| j >= self.joints) {
                return bad(format!("class {} references joint {j}", c.name));
            }
            if c.informative_joints.contains(&ROOT_JOINT) {
                return bad(format!("class {} moves the root joint", c.name));
            }
            if !(c.frequency > 0.0) || c.axis.iter().all(|&a| a == 0.0) {
                return bad(format!("class {} has a degenerate motion template", c.name));
            }
        }
        if !(self.informative_amplitude > 0.0) {
            return bad("informative amplitude must be positive".into());
        }
        if !(self.distractor_amplitude >= 0.0 && self.distractor_amplitude < self.informative_amplitude) {
            return bad("distractor amplitude must lie in [0, informative amplitude)".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        if self.active_frames == 0 || self.active_frames > self.frames {
            return bad(format!("active window {} outside 1..={}", self.active_frames, self.frames));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            return bad("amplitude jitter must lie in [0, 1)".into());
        }
        if self.per_class == 0 {
            return bad("per-class count must be positive".into());
        }
        BodyPartition::new(self.joints, self.partition.clone())?;
        Ok(())
    }

    fn rest_pose(&self, joint: usize) -> [f64; 3] {
        if self.joints == REST_POSE_15.len() {
            REST_POSE_15[joint]
        } else {
            [0.0, 1.7 * joint as f64 / self.joints as f64, 0.0]
        }
    }
}

/// Informative joints per class, used to score attention maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: Vec<GroundTruthClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthClass {
    pub label: usize,
    pub name: String,
    pub kind: ClassKind,
    pub informative_joints: Vec<usize>,
}

impl GroundTruth {
    pub fn informative(&self, label: usize) -> Option<&[usize]> {
        self.classes
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.informative_joints.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub sequences: Vec<SkeletonSequence>,
    pub partition: BodyPartition,
    pub ground_truth: GroundTruth,
}

/// Renders `per_class` sequences per class. Informative joints of the class
/// oscillate along the class axis during a randomly placed active window;
/// every other non-root joint carries independent background motion.
/// Output is normalized and a pure function of `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let partition = BodyPartition::new(spec.joints, spec.partition.clone())?;
    let (jn, tn) = (spec.joints, spec.frames);
    let mut rng = RngStream::new(spec.seed);
    let mut sequences = Vec::with_capacity(spec.per_class * spec.classes.len());
    for (label, class) in spec.classes.iter().enumerate() {
        let norm = class.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        let axis = class.axis.map(|a| a / norm);
        for n in 0..spec.per_class {
            let mut coords = vec![0.0; jn * tn * 3];
            for j in 0..jn {
                let rest = spec.rest_pose(j);
                for t in 0..tn {
                    coords[(j * tn + t) * 3..(j * tn + t + 1) * 3].copy_from_slice(&rest);
                }
            }
            // class motion
            let start = rng.below(tn - spec.active_frames + 1);
            let amp = spec.informative_amplitude
                * rng.uniform_range(1.0 - spec.amplitude_jitter, 1.0 + spec.amplitude_jitter);
            let k = class.informative_joints.len();
            for (rank, &j) in class.informative_joints.iter().enumerate() {
                // Coarse parts move as a unit, growing toward the extremity.
                let scale = match class.kind {
                    ClassKind::Coarse => (rank + 1) as f64 / k as f64,
                    ClassKind::Fine => 1.0,
                };
                for t in start..start + spec.active_frames {
                    let s = (t - start) as f64 + 0.5;
                    let disp = amp * scale * (std::f64::consts::PI * class.frequency * s / spec.active_frames as f64).sin();
                    for a in 0..3 {
                        coords[(j * tn + t) * 3 + a] += disp * axis[a];
                    }
                }
            }
            // background motion
            for j in 0..jn {
                if j == ROOT_JOINT || class.informative_joints.contains(&j) {
                    continue;
                }
                let amp = spec.distractor_amplitude * rng.uniform();
                let freq = rng.uniform_range(0.25, 1.5);
                let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                let mut dir = [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
                let dn = dir.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|a| *a /= dn);
                for t in 0..tn {
                    let disp = amp * (2.0 * std::f64::consts::PI * freq * t as f64 / tn as f64 + phase).sin();
                    for a in 0..3 {
                        coords[(j * tn + t) * 3 + a] += disp * dir[a];
                    }
                }
            }
            let seq = SkeletonSequence::new(format!("c{label}_{n:04}"), label, jn, tn, coords)?;
            let seq = add_gaussian_noise(&seq, spec.noise_sigma, &mut rng)?;
            sequences.push(normalize_sequence(&seq));
        }
    }
    let ground_truth = GroundTruth {
        classes: spec
            .classes
            .iter()
            .enumerate()
            .map(|(label, c)| GroundTruthClass {
                label,
                name: c.name.clone(),
                kind: c.kind,
                informative_joints: c.informative_joints.clone(),
            })
            .collect(),
    };
    Ok(SyntheticDataset {
        sequences,
        partition,
        ground_truth,
    })
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate.
pub fn add_gaussian_noise(seq: &SkeletonSequence, sigma: f64, rng: &mut RngStream) -> Result<SkeletonSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::contract(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    let mut out = seq.clone();
    if sigma > 0.0 {
        for v in &mut out.coords {
            *v += rng.normal(0.0, sigma);
        }
    }
    Ok(out)
}

/// Translates the sequence so that the root joint of the first frame is the
/// origin. No rotation or scaling.
pub fn normalize_sequence(seq: &SkeletonSequence) -> SkeletonSequence {
    let origin = seq.point(ROOT_JOINT, 0);
    let mut out = seq.clone();
    for p in out.coords.chunks_exact_mut(3) {
        for a in 0..3 {
            p[a] -= origin[a];
        }
    }
    out
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, sequences: &[SkeletonSequence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SkeletonSequence>> {
    let name = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out: Vec<SkeletonSequence> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            source_name: name.clone(),
            line: lineno,
            msg,
        };
        let seq: SkeletonSequence = serde_json::from_str(&line).map_err(|e| perr(format!("record {lineno}: {e}")))?;
        seq.validate().map_err(|e| perr(format!("record {}: {e}", seq.id)))?;
        if let Some(first) = out.first() {
            if first.joints != seq.joints {
                return Err(perr(format!(
                    "record {} has {} joints, file started with {}",
                    seq.id, seq.joints, first.joints
                )));
            }
        }
        out.push(seq);
    }
    Ok(out)
}

/// Stratified train / validation / test indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits per class according to `fractions` (train, validation, test).
pub fn split_dataset(labels: &[usize], fractions: [f64; 3], rng: &mut RngStream) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let parts = fractions.iter().filter(|&&f| f > 0.0).count();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..num_classes {
        let mut idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < parts {
            return Err(Error::contract(format!(
                "class {c} has {} samples for {parts} non-empty splits",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let n = idx.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.validation.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Sum of squared frame-to-frame displacements per joint.
pub fn motion_energy(seq: &SkeletonSequence) -> Vec<f64> {
    (0..seq.joints)
        .map(|j| {
            (1..seq.frames)
                .map(|t| {
                    let (a, b) = (seq.point(j, t), seq.point(j, t - 1));
                    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect()
}
