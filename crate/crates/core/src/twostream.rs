//! Coarse (body-part) attention and two-stream fusion.
//!
//! The coarse stream shares the first lattice layer with the fine stream but
//! scores body parts instead of joints: a part's representation at frame `t`
//! is the mean of its joints' hidden vectors, and every joint of a part uses
//! the part's score as its gate.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gca::{AttentionMap, GlobalContext, ScoreMap};
use crate::numerics::ParamStore;
use crate::stlstm::{lattice_forward, LatticeState, Schedule, StLstmParams};

/// Number of body parts in a partition.
pub const NUM_PARTS: usize = 5;

/// A disjoint cover of the joints by exactly five nonempty parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartition {
    joints: usize,
    parts: Vec<Vec<usize>>,
    part_of: Vec<usize>,
}

impl BodyPartition {
    pub fn new(joints: usize, parts: Vec<Vec<usize>>) -> Result<Self> {
        if parts.len() != NUM_PARTS {
            return Err(Error::contract(format!(
                "a body partition needs {NUM_PARTS} parts, got {}",
                parts.len()
            )));
        }
        let mut part_of = vec![usize::MAX; joints];
        for (p, members) in parts.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::contract(format!("body part {p} is empty")));
            }
            for &j in members {
                if j >= joints {
                    return Err(Error::contract(format!("body part {p} names joint {j} of {joints}")));
                }
                if part_of[j] != usize::MAX {
                    return Err(Error::contract(format!(
                        "joint {j} is in parts {} and {p}",
                        part_of[j]
                    )));
                }
                part_of[j] = p;
            }
        }
        if let Some(j) = part_of.iter().position(|&p| p == usize::MAX) {
            return Err(Error::contract(format!("joint {j} belongs to no body part")));
        }
        Ok(Self { joints, parts, part_of })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }

    pub fn part_of(&self, joint: usize) -> usize {
        self.part_of[joint]
    }

    /// Parses one part per line as whitespace-separated joint indices.
    /// Blank lines and text after `#` are ignored.
    pub fn parse(text: &str, joints: usize, source_name: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let members = body
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        source_name: source_name.to_string(),
                        line: i + 1,
                        msg: format!("`{tok}` is not a joint index"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(members);
        }
        Self::new(joints, parts)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for members in &self.parts {
            let line: Vec<String> = members.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn load(path: &Path, joints: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, joints, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Mean hidden vector of each part at each frame, part-major.
pub(crate) fn part_means(hd: &[f64], partition: &BodyPartition, frames: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; partition.num_parts() * frames * d];
    for (p, members) in partition.parts().iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for t in 0..frames {
            let dst = &mut out[(p * frames + t) * d..(p * frames + t + 1) * d];
            for &j in members {
                let src = &hd[(j * frames + t) * d..(j * frames + t + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

/// Part representations of a first layer, `parts x frames x hidden`.
pub fn part_representation(first_layer: &LatticeState, partition: &BodyPartition) -> Result<Vec<f64>> {
    if partition.joints() != first_layer.joints() {
        return Err(Error::shape(
            "part_representation",
            format!(
                "partition covers {} joints, lattice has {}",
                partition.joints(),
                first_layer.joints()
            ),
        ));
    }
    Ok(part_means(
        first_layer.hidden_grid(),
        partition,
        first_layer.frames(),
        first_layer.hidden(),
    ))
}

/// Part-level scores `r_{P,t}`, normalized over all parts and frames.
pub fn coarse_informativeness_scores(
    store: &ParamStore,
    maps: &[ScoreMap],
    first_layer: &LatticeState,
    partition: &BodyPartition,
    ctx: &GlobalContext,
) -> Result<AttentionMap> {
    let reps = part_representation(first_layer, partition)?;
    crate::gca::score_units(store, maps, &reps, first_layer.hidden(), first_layer.frames(), ctx)
}

/// Broadcasts part scores to a joint-level gate map.
pub fn expand_part_map(attn: &AttentionMap, partition: &BodyPartition) -> Result<AttentionMap> {
    if attn.units != partition.num_parts() {
        return Err(Error::shape(
            "expand_part_map",
            format!("map has {} units, partition {} parts", attn.units, partition.num_parts()),
        ));
    }
    let t = attn.frames;
    let mut values = vec![0.0; partition.joints() * t];
    for j in 0..partition.joints() {
        let p = partition.part_of(j);
        values[j * t..(j + 1) * t].copy_from_slice(&attn.values[p * t..(p + 1) * t]);
    }
    Ok(AttentionMap {
        iteration: attn.iteration,
        units: partition.joints(),
        frames: t,
        values,
    })
}

/// Coarse stream's second layer: every joint is gated by its part's score.
pub fn coarse_attended_forward(
    store: &ParamStore,
    second: &StLstmParams,
    first_layer: &LatticeState,
    attn: &AttentionMap,
    partition: &BodyPartition,
) -> Result<(LatticeState, Vec<f64>)> {
    if attn.frames != first_layer.frames() {
        return Err(Error::shape(
            "coarse_attended_forward",
            format!("map has {} frames, lattice {}", attn.frames, first_layer.frames()),
        ));
    }
    let gates = expand_part_map(attn, partition)?;
    let st = lattice_forward(
        store,
        second,
        first_layer.hidden_grid(),
        first_layer.frames(),
        first_layer.order(),
        Some(&gates.values),
        Schedule::RowMajor,
    )?;
    let f = st.final_hidden().to_vec();
    Ok((st, f))
}

/// Mean of two class posteriors.
pub fn fuse_predictions(fine: &[f64], coarse: &[f64]) -> Result<Vec<f64>> {
    fuse_many(&[fine, coarse])
}

pub(crate) fn fuse_many(posteriors: &[&[f64]]) -> Result<Vec<f64>> {
    let c = posteriors[0].len();
    if posteriors.iter().any(|p| p.len() != c) {
        return Err(Error::shape("fuse_predictions", "posteriors differ in length"));
    }
    let inv = 1.0 / posteriors.len() as f64;
    Ok((0..c).map(|k| posteriors.iter().map(|p| p[k]).sum::<f64>() * inv).collect())
}
