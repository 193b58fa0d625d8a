//! Command implementations. Each command validates its whole configuration
//! and inputs before it writes anything.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gca_core::data::{
    add_gaussian_noise, generate_synthetic, load_dataset, save_dataset, split_dataset, GroundTruth, SkeletonSequence,
};
use gca_core::model::{gradcheck_model, jitter_params};
use gca_core::numerics::{GradCheckOptions, GradCheckReport, InitScheme, RngStream};
use gca_core::trainer::{evaluate, mean_attention_quality, train, Evaluation, TrainData};
use gca_core::twostream::BodyPartition;
use gca_core::{checkpoint, AttentionConfig, Model, ModelDims, ModelSpec, StreamSelection, TrainReport, Variant};
use serde::Serialize;

use crate::config::{RunConfig, SplitName};
use crate::error::{CliError, Result};

/// Sub-stream of the dataset seed used for the train / validation / test split.
const SPLIT_STREAM: u64 = 1;

pub const PARTITION_FILE: &str = "partition.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// A dataset split three ways, with the metadata written next to it.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<SkeletonSequence>,
    pub validation: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
    pub partition: Option<BodyPartition>,
    pub truth: Option<GroundTruth>,
}

impl SplitData {
    pub fn get(&self, split: SplitName) -> &[SkeletonSequence] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    fn all(&self) -> impl Iterator<Item = &SkeletonSequence> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.all().next().map(|s| (s.joints, s.frames))
    }

    /// Class count from the ground truth if present, else the largest label.
    pub fn num_classes(&self) -> usize {
        match &self.truth {
            Some(t) => t.classes.len(),
            None => self.all().map(|s| s.label + 1).max().unwrap_or(0),
        }
    }

    pub fn training(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            validation: &self.validation,
            test: &self.test,
        }
    }
}

/// Generates the configured synthetic dataset and splits it per class.
pub fn synthesize(cfg: &RunConfig) -> Result<SplitData> {
    let ds = generate_synthetic(&cfg.synthetic).map_err(CliError::config)?;
    let labels: Vec<usize> = ds.sequences.iter().map(|s| s.label).collect();
    let mut rng = RngStream::substream(cfg.synthetic.seed, SPLIT_STREAM);
    let split = split_dataset(&labels, cfg.split, &mut rng).map_err(CliError::config)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.sequences[i].clone()).collect::<Vec<_>>();
    Ok(SplitData {
        train: pick(&split.train),
        validation: pick(&split.validation),
        test: pick(&split.test),
        partition: Some(ds.partition),
        truth: Some(ds.ground_truth),
    })
}

pub fn write_data(dir: &Path, data: &SplitData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for split in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        save_dataset(&dir.join(split.file_name()), data.get(split))?;
    }
    if let Some(p) = &data.partition {
        p.save(&dir.join(PARTITION_FILE))?;
    }
    if let Some(t) = &data.truth {
        t.save(&dir.join(GROUND_TRUTH_FILE))?;
    }
    Ok(())
}

/// Reads a data directory. The partition and ground truth are optional.
pub fn read_data(dir: &Path) -> Result<SplitData> {
    let load = |split: SplitName| {
        let p = dir.join(split.file_name());
        if !p.exists() {
            return Err(CliError::io(&p, std::io::ErrorKind::NotFound.into()));
        }
        Ok(load_dataset(&p)?)
    };
    let mut data = SplitData {
        train: load(SplitName::Train)?,
        validation: load(SplitName::Validation)?,
        test: load(SplitName::Test)?,
        partition: None,
        truth: None,
    };
    let Some((joints, frames)) = data.shape() else {
        return Err(CliError::Data(format!("{}: no sequences", dir.display())));
    };
    if let Some(s) = data.all().find(|s| s.joints != joints || s.frames != frames) {
        return Err(CliError::Data(format!(
            "sequence `{}` is {}x{}, the dataset started with {joints}x{frames}",
            s.id, s.joints, s.frames
        )));
    }
    let part = dir.join(PARTITION_FILE);
    if part.exists() {
        data.partition = Some(BodyPartition::load(&part, joints)?);
    }
    let truth = dir.join(GROUND_TRUTH_FILE);
    if truth.exists() {
        data.truth = Some(GroundTruth::load(&truth)?);
    }
    Ok(data)
}

/// Model structure implied by the configuration and the data.
pub fn build_spec(cfg: &RunConfig, data: &SplitData) -> Result<ModelSpec> {
    let (joints, frames) = data
        .shape()
        .ok_or_else(|| CliError::Data("dataset has no sequences".into()))?;
    let classes = data.num_classes();
    if classes < 2 {
        return Err(CliError::Config(format!("{classes} class(es) cannot be classified")));
    }
    if let Some(s) = data.all().find(|s| s.label >= classes) {
        return Err(CliError::Data(format!("sequence `{}` has label {} of {classes}", s.id, s.label)));
    }
    let partition = match (&data.partition, cfg.variant) {
        (Some(p), _) => p.parts().to_vec(),
        (None, Variant::TwoStream) if cfg.streams != StreamSelection::Fine => {
            return Err(CliError::Config(format!(
                "two_stream needs a body partition ({PARTITION_FILE} in the data directory)"
            )))
        }
        (None, _) => Vec::new(),
    };
    let spec = ModelSpec {
        variant: cfg.variant,
        dims: ModelDims {
            joints,
            frames,
            input_dim: 3,
            hidden: cfg.train.hidden,
            classes,
        },
        attention: cfg.attention.clone(),
        streams: cfg.streams,
        partition,
        joint_order: cfg.joint_order.clone(),
        init: cfg.init,
        seed: cfg.seed,
    };
    Model::new(spec.clone()).map_err(CliError::config)?;
    Ok(spec)
}

/// Trains a fresh model. `cfg.seed` replaces `train.seed`. A diverged run
/// still returns its partial report.
pub fn run_training(cfg: &RunConfig, data: &SplitData) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(build_spec(cfg, data)?)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let report = train(&mut model, data.training(), &tcfg)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy under additive Gaussian coordinate noise. Every level reuses the
/// same generator seed, so levels differ only in scale. Noise is added to
/// the stored (already normalized) coordinates without re-normalizing.
pub fn noise_sweep(model: &Model, seqs: &[SkeletonSequence], sigmas: &[f64], seed: u64) -> Result<Vec<NoisePoint>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let mut rng = RngStream::new(seed);
            let noisy = seqs
                .iter()
                .map(|s| add_gaussian_noise(s, sigma, &mut rng))
                .collect::<gca_core::Result<Vec<_>>>()?;
            let ev = evaluate(model, &noisy)?;
            Ok(NoisePoint {
                sigma,
                accuracy: ev.accuracy,
                mean_loss: ev.mean_loss,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub variant: Variant,
    pub split: SplitName,
    pub count: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Per-iteration attention quality of the joint stream, when available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_quality: Option<Vec<f64>>,
    pub noise: Vec<NoisePoint>,
}

pub fn load_model(cfg: &RunConfig, data: &SplitData) -> Result<Model> {
    let spec = build_spec(cfg, data)?;
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(CliError::io(&path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(checkpoint::load_checkpoint_for(&path, spec)?)
}

fn has_joint_stream(model: &Model) -> bool {
    model
        .attention_network()
        .is_some_and(|n| n.streams.iter().any(|s| s.name == "joint"))
}

pub fn evaluation_metrics(cfg: &RunConfig, model: &Model, data: &SplitData) -> Result<Metrics> {
    let seqs = data.get(cfg.eval.split);
    let Evaluation {
        accuracy,
        mean_loss,
        confusion,
        count,
    } = evaluate(model, seqs)?;
    let attention_quality = match &data.truth {
        Some(t) if has_joint_stream(model) => Some(mean_attention_quality(model, seqs, t)?),
        _ => None,
    };
    Ok(Metrics {
        variant: cfg.variant,
        split: cfg.eval.split,
        count,
        accuracy,
        mean_loss,
        confusion,
        attention_quality,
        noise: noise_sweep(model, seqs, &cfg.eval.noise_sigmas, cfg.seed)?,
    })
}

fn create_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(gca_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let data = synthesize(cfg)?;
    write_data(&cfg.output_dir, &data)?;
    Ok(format!(
        "wrote {} train / {} validation / {} test sequences ({} classes) to {}",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.num_classes(),
        cfg.output_dir.display()
    ))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let data = read_data(&cfg.data_dir)?;
    build_spec(cfg, &data)?;
    let ckpt = cfg.checkpoint_path();
    create_output_dir(&cfg.output_dir)?;
    let (model, report) = run_training(cfg, &data)?;
    report.save(&cfg.output_dir.join("report.jsonl"))?;
    report.save_timing(&cfg.output_dir.join("timing.jsonl"))?;
    if let Some(epoch) = report.diverged_at {
        return Err(CliError::Divergence { epoch });
    }
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_output_dir(parent)?;
    }
    checkpoint::save_checkpoint(&model, &ckpt)?;
    Ok(format!(
        "trained {} epochs (best {}), test accuracy {:.4}, {} parameters; checkpoint {}",
        report.epochs.len(),
        report.best_epoch.map_or("-".into(), |e| e.to_string()),
        report.test_accuracy.unwrap_or(f64::NAN),
        model.store.num_scalars(),
        ckpt.display()
    ))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let data = read_data(&cfg.data_dir)?;
    let model = load_model(cfg, &data)?;
    let metrics = evaluation_metrics(cfg, &model, &data)?;
    create_output_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
    let mut out = format!(
        "{:?} split: accuracy {:.4}, mean loss {:.4} over {} sequences",
        metrics.split, metrics.accuracy, metrics.mean_loss, metrics.count
    );
    if let Some(q) = &metrics.attention_quality {
        let _ = write!(out, "\nattention quality per iteration: {q:.4?}");
    }
    for p in &metrics.noise {
        let _ = write!(out, "\nnoise sigma {}: accuracy {:.4}", p.sigma, p.accuracy);
    }
    Ok(out)
}

/// Builds the gradient-check toy for `variant`. Two-stream toys need at
/// least five joints (one per body part); joints are dealt round-robin.
pub fn gradcheck_toy(cfg: &RunConfig, variant: Variant) -> Result<(Model, Vec<SkeletonSequence>)> {
    let g = &cfg.gradcheck;
    let joints = if variant == Variant::TwoStream { g.joints.max(5) } else { g.joints };
    let partition = if variant == Variant::TwoStream {
        (0..5).map(|p| (p..joints).step_by(5).collect()).collect()
    } else {
        Vec::new()
    };
    let spec = ModelSpec {
        variant,
        dims: ModelDims {
            joints,
            frames: g.frames,
            input_dim: 3,
            hidden: g.hidden,
            classes: g.classes,
        },
        attention: AttentionConfig {
            score_hidden_dim: g.score_hidden,
            ..cfg.attention.clone()
        },
        streams: StreamSelection::Both,
        partition,
        joint_order: Vec::new(),
        init: InitScheme::default(),
        seed: cfg.seed,
    };
    let mut model = Model::new(spec).map_err(CliError::config)?;
    let mut rng = RngStream::substream(cfg.seed, 7);
    jitter_params(&mut model.store, g.param_std, &mut rng);
    let seqs = (0..g.sequences)
        .map(|n| {
            let coords = (0..joints * g.frames * 3).map(|_| rng.normal(0.0, 1.0)).collect();
            SkeletonSequence::new(format!("toy{n}"), n % g.classes, joints, g.frames, coords)
        })
        .collect::<gca_core::Result<Vec<_>>>()?;
    Ok((model, seqs))
}

pub fn gradcheck_variant(cfg: &RunConfig, variant: Variant) -> Result<GradCheckReport> {
    let (mut model, seqs) = gradcheck_toy(cfg, variant)?;
    let opts = GradCheckOptions {
        eps: cfg.gradcheck.eps,
        tol: cfg.gradcheck.tol,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    Ok(gradcheck_model(&mut model, &seqs, &opts, cfg.gradcheck.inject_grad_bug)?)
}

#[derive(Debug, Serialize)]
struct GradcheckRecord<'a> {
    variant: Variant,
    passed: bool,
    max_rel_err: f64,
    tol: f64,
    groups: Vec<(String, f64)>,
    tensors: &'a [gca_core::numerics::TensorCheck],
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::Gca,
    Variant::TwoStream,
    Variant::BaselineGlobal1,
    Variant::BaselineGlobal2,
];

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let variants = if cfg.gradcheck.variants.is_empty() {
        ALL_VARIANTS.to_vec()
    } else {
        cfg.gradcheck.variants.clone()
    };
    let reports = variants
        .iter()
        .map(|&v| Ok((v, gradcheck_variant(cfg, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<GradcheckRecord<'_>> = reports
        .iter()
        .map(|(v, r)| GradcheckRecord {
            variant: *v,
            passed: r.passed,
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            groups: r.by_group(),
            tensors: &r.tensors,
        })
        .collect();
    create_output_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("gradcheck.json"), &records)?;
    let mut out = String::new();
    for (v, r) in &reports {
        let _ = writeln!(
            out,
            "{v:?}: {} (max relative error {:.3e}, tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.tol
        );
        for (g, e) in r.by_group() {
            let _ = writeln!(out, "  {g:<28} {e:.3e}");
        }
    }
    if let Some((v, r)) = reports.iter().find(|(_, r)| !r.passed) {
        eprint!("{out}");
        return Err(CliError::GradCheck {
            variant: format!("{v:?}"),
            max_rel_err: r.max_rel_err,
            tol: r.tol,
        });
    }
    Ok(out.trim_end().to_string())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one grid per (sequence, stream, iteration) and the per-joint
/// average of the joint stream's summed attention. Returns the directory.
pub fn export_attention(cfg: &RunConfig, model: &Model, data: &SplitData) -> Result<PathBuf> {
    let net = model
        .attention_network()
        .ok_or_else(|| CliError::Config(format!("{:?} has no attention maps to export", cfg.variant)))?;
    let mut seqs = data.get(cfg.export.split);
    if let Some(n) = cfg.export.max_sequences {
        seqs = &seqs[..n.min(seqs.len())];
    }
    let root = cfg.output_dir.join("attention");
    let depth = model.max_depth();
    let joints = model.spec.dims.joints;
    let joint_stream = net.streams.iter().position(|s| s.name == "joint");
    let mut joint_sums = vec![vec![0.0; depth]; joints];
    for seq in seqs {
        let dir = root.join(safe_name(&seq.id));
        create_output_dir(&dir)?;
        let trace = model.forward(seq, depth, None)?;
        for (s, maps) in trace.attention_maps().into_iter().enumerate() {
            for map in maps {
                let mut text = String::from("unit");
                for t in 0..map.frames {
                    let _ = write!(text, "\tt{t}");
                }
                text.push('\n');
                for u in 0..map.units {
                    let _ = write!(text, "{u}");
                    for t in 0..map.frames {
                        let _ = write!(text, "\t{}", map.get(u, t));
                    }
                    text.push('\n');
                }
                let path = dir.join(format!("{}_iter{}.tsv", net.streams[s].name, map.iteration));
                fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
                if Some(s) == joint_stream {
                    for (j, row) in joint_sums.iter_mut().enumerate() {
                        row[map.iteration - 1] += (0..map.frames).map(|t| map.get(j, t)).sum::<f64>();
                    }
                }
            }
        }
    }
    if joint_stream.is_some() && !seqs.is_empty() {
        let mut text = String::from("joint");
        for n in 1..=depth {
            let _ = write!(text, "\titer{n}");
        }
        text.push('\n');
        for (j, row) in joint_sums.iter().enumerate() {
            let _ = write!(text, "{j}");
            for v in row {
                let _ = write!(text, "\t{}", v / seqs.len() as f64);
            }
            text.push('\n');
        }
        let path = root.join("joint_average.tsv");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(root)
}

pub fn cmd_attn_export(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    if matches!(cfg.variant, Variant::BaselineGlobal1 | Variant::BaselineGlobal2) {
        return Err(CliError::Config(format!("{:?} has no attention maps to export", cfg.variant)));
    }
    let data = read_data(&cfg.data_dir)?;
    let model = load_model(cfg, &data)?;
    let root = export_attention(cfg, &model, &data)?;
    Ok(format!("attention maps written to {}", root.display()))
}
