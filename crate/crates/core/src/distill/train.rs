//! The distillation objective, one optimization step, and full runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Tensor, Var};

use super::config::{DistillConfig, OptimConfig, RunConfig};
use super::data::{self, DataSource, Dataset, SHAPE_CLASSES};
use super::loss::{
    activation_map, activation_map_on, activation_matching_loss_on, class_token_loss_on,
    masked_prediction_loss_on, scope_rows, MatchingScope,
};
use super::mask::{sample_mask_on_grid, MaskSpec};
use super::optim::AdamW;
use super::stages::{stage_partition, StageMap};

/// Header of the metrics log.
pub const METRICS_HEADER: &str = "step,loss,l_act,l_mask,lr,alignment";

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    TeacherInit = 1,
    TeacherData = 2,
    TeacherBatches = 3,
    StudentInit = 4,
    Data = 5,
    Batches = 6,
    Masks = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Frozen-teacher features for one image: stage outputs and the final output.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub stages: Vec<Tensor>,
    pub output: Tensor,
}

/// One training example.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub patches: &'a Tensor,
    pub targets: &'a TeacherTargets,
}

/// Graph handles and values of the batch objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub l_act: f64,
    pub l_mask: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub l_act: f64,
    pub l_mask: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Records `L_act + λ·L_mask`, averaged over the batch, onto `g`.
///
/// Terms disabled in `cfg` are still evaluated for reporting when defined,
/// but do not enter `total`.
pub fn objective(
    g: &mut Graph,
    student: &Model<Var>,
    batch: &[Sample],
    masks: &[MaskSpec],
    cfg: &DistillConfig,
    stages: &StageMap,
) -> Result<Objective> {
    if batch.is_empty() || batch.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "objective needs one mask per sample, got {} samples and {} masks",
            batch.len(),
            masks.len()
        )));
    }
    let offset = usize::from(student.config.use_class_token);
    let mut total: Option<Var> = None;
    let (mut l_act, mut l_mask) = (0.0, 0.0);
    for (sample, mask) in batch.iter().zip(masks) {
        if sample.targets.stages.len() != stages.num_stages() {
            return Err(Error::InvalidArgument(format!(
                "teacher targets carry {} stages, expected {}",
                sample.targets.stages.len(),
                stages.num_stages()
            )));
        }
        let x = g.constant(sample.patches.detached());
        let out = student.forward(g, x, Some(mask), &stages.student_taps)?;

        let act = match cfg.matching_scope {
            MatchingScope::ClassOnly => class_token_loss_on(g, &sample.targets.stages, &out.stages)?,
            scope => {
                let rows = scope_rows(scope, mask, offset)?;
                let teacher_maps = sample
                    .targets
                    .stages
                    .iter()
                    .map(|f| activation_map(f, &rows).map(|m| m.row_normalized))
                    .collect::<Result<Vec<_>>>()?;
                let student_maps = out
                    .stages
                    .iter()
                    .map(|&f| activation_map_on(g, f, &rows).map(|m| m.row_normalized))
                    .collect::<Result<Vec<_>>>()?;
                activation_matching_loss_on(g, &teacher_maps, &student_maps)?
            }
        };
        l_act += g.value(act).item();

        let masked = if mask.is_empty() {
            None
        } else {
            let projected = student.project_to_teacher(g, out.output)?;
            let rows: Vec<usize> = mask.masked.iter().map(|i| i + offset).collect();
            let term = masked_prediction_loss_on(g, &sample.targets.output, projected, &rows, cfg.smooth_l1_beta)?;
            l_mask += g.value(term).item();
            Some(term)
        };

        let mut sample_loss = cfg.act_loss.then_some(act);
        if cfg.mask_loss {
            let term = masked.ok_or_else(|| {
                Error::UndefinedLoss("masked prediction loss with an empty mask".into())
            })?;
            let weighted = g.scale(term, cfg.lambda)?;
            sample_loss = Some(match sample_loss {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        let sample_loss = sample_loss
            .ok_or_else(|| Error::Config("objective has no enabled terms".into()))?;
        total = Some(match total {
            Some(acc) => g.add(acc, sample_loss)?,
            None => sample_loss,
        });
    }
    let n = batch.len() as f64;
    let total = g.scale(total.expect("nonempty batch"), 1.0 / n)?;
    Ok(Objective {
        total,
        l_act: l_act / n,
        l_mask: l_mask / n,
    })
}

/// Class-token matching compares feature directions directly, so both
/// models need a class token and the same width.
pub fn class_only_compatible(class_token: bool, teacher_dim: usize, student_dim: usize) -> Result<()> {
    if !class_token {
        return Err(Error::Config("class_only matching needs use_class_token".into()));
    }
    if teacher_dim != student_dim {
        return Err(Error::Config(format!(
            "class_only matching needs equal teacher and student widths, got {teacher_dim} and {student_dim}"
        )));
    }
    Ok(())
}

/// Gradients of every bound parameter, in [`Model::for_each`] order.
pub fn collect_grads(g: &Graph, bound: &Model<Var>) -> Vec<Vec<f64>> {
    let mut grads = Vec::new();
    bound.for_each(&mut |_, &v| {
        grads.push(match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
    });
    grads
}

/// Teacher, student, optimizer and stage layout of one distillation run.
/// The teacher is owned and only ever read.
#[derive(Clone, Debug)]
pub struct Distiller {
    teacher: Model,
    pub student: Model,
    optimizer: AdamW,
    stages: StageMap,
    cfg: DistillConfig,
}

impl Distiller {
    pub fn new(teacher: Model, student: Model, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let (t, s) = (&teacher.config, &student.config);
        if t.num_patches() != s.num_patches()
            || t.patch_dim() != s.patch_dim()
            || t.use_class_token != s.use_class_token
        {
            return Err(Error::Config(
                "teacher and student must share image, patch and class-token settings".into(),
            ));
        }
        let extras = student
            .extras
            .as_ref()
            .ok_or_else(|| Error::Config("student needs a mask token and projection".into()))?;
        if extras.projection.shape() != [s.embed_dim, t.embed_dim] {
            return Err(Error::Shape {
                op: "projection",
                lhs: extras.projection.shape().to_vec(),
                rhs: vec![s.embed_dim, t.embed_dim],
            });
        }
        if cfg.matching_scope == MatchingScope::ClassOnly {
            class_only_compatible(t.use_class_token, t.embed_dim, s.embed_dim)?;
        }
        let stages = stage_partition(t.num_blocks, s.num_blocks, cfg.stages)?;
        Ok(Distiller {
            teacher,
            student,
            optimizer: AdamW::new(cfg.optim.clone()),
            stages,
            cfg,
        })
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    pub fn stages(&self) -> &StageMap {
        &self.stages
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.optimizer.steps_taken()
    }

    /// Teacher features for one image, computed without a mask.
    pub fn targets(&self, patches: &Tensor) -> Result<TeacherTargets> {
        let out = self
            .teacher
            .forward_values(patches, None, &self.stages.teacher_taps)?;
        Ok(TeacherTargets {
            stages: out.stages,
            output: out.output,
        })
    }

    pub fn sample_masks(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<MaskSpec>> {
        (0..count)
            .map(|_| {
                sample_mask_on_grid(
                    self.student.config.grid(),
                    self.cfg.mask_ratio,
                    self.cfg.mask_strategy,
                    rng,
                )
            })
            .collect()
    }

    /// One forward/backward/AdamW update with masks drawn from `rng`.
    pub fn train_step(&mut self, batch: &[Sample], rng: &mut impl Rng) -> Result<StepMetrics> {
        let masks = self.sample_masks(batch.len(), rng)?;
        self.train_step_with_masks(batch, &masks)
    }

    pub fn train_step_with_masks(&mut self, batch: &[Sample], masks: &[MaskSpec]) -> Result<StepMetrics> {
        let step = self.optimizer.steps_taken();
        let mut g = Graph::new();
        let bound = self.student.bind(&mut g, true);
        let obj = objective(&mut g, &bound, batch, masks, &self.cfg, &self.stages).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} (training step {step}, lr {})", self.optimizer.current_lr()),
            },
            other => other,
        })?;
        let loss = g.value(obj.total).item();
        g.backward(obj.total)?;
        let grads = collect_grads(&g, &bound);
        drop(g);
        let grad_norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient norm at training step {step} (loss {loss})"),
            });
        }
        let lr = self.optimizer.update(&mut self.student, &grads)?;
        Ok(StepMetrics {
            loss,
            l_act: obj.l_act,
            l_mask: obj.l_mask,
            grad_norm,
            lr,
        })
    }

    /// Mean row-wise inner product between row-normalized teacher and
    /// unmasked-student activation maps over all patch tokens, averaged over
    /// stages and images.
    pub fn alignment(&self, probe: &[Sample]) -> Result<f64> {
        let offset = usize::from(self.student.config.use_class_token);
        let rows: Vec<usize> = (0..self.student.config.num_patches()).map(|i| i + offset).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for s in probe {
            let out = self
                .student
                .forward_values(s.patches, None, &self.stages.student_taps)?;
            for (t, f) in s.targets.stages.iter().zip(&out.stages) {
                let tm = activation_map(t, &rows)?.row_normalized;
                let sm = activation_map(f, &rows)?.row_normalized;
                total += tm.data().iter().zip(sm.data()).map(|(a, b)| a * b).sum::<f64>()
                    / rows.len() as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("alignment probe is empty".into()));
        }
        Ok(total / count as f64)
    }
}

/// Supervised shape classification on synthetic images: a linear head on the
/// normalized class token (or token mean without one), discarded afterwards.
/// Returns the per-step cross-entropy.
pub fn pretrain_teacher(
    teacher: &mut Model,
    data: &Dataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("teacher pretraining needs labelled images".into()))?;
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config("teacher pretraining needs data and a positive batch size".into()));
    }
    let d = teacher.config.embed_dim;
    let classes = SHAPE_CLASSES.len();
    let mut head_w = crate::mixers::normal_tensor(rng, &[d, classes], crate::mixers::INIT_STD);
    let mut head_b = Tensor::zeros(&[classes]);
    let mut opt = AdamW::new(OptimConfig {
        lr,
        min_lr: 0.0,
        weight_decay: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        warmup_steps: steps / 10,
        total_steps: steps,
    });
    let mut losses = Vec::with_capacity(steps);
    let batch_size = batch_size.min(data.len());
    for _ in 0..steps {
        let idx: Vec<usize> = sample(rng, data.len(), batch_size).into_vec();
        let mut g = Graph::new();
        let bound = teacher.bind(&mut g, true);
        let hw = g.param(head_w.detached());
        let hb = g.param(head_b.detached());
        let mut feats: Option<Var> = None;
        for &i in &idx {
            let x = g.constant(data.patches[i].detached());
            let out = bound.forward(&mut g, x, None, &[])?.output;
            let f = if teacher.config.use_class_token {
                g.gather_rows(out, &[0])?
            } else {
                let t = g.transpose(out)?;
                let m = g.row_mean(t)?;
                g.transpose(m)?
            };
            feats = Some(match feats {
                Some(acc) => g.concat_rows(acc, f)?,
                None => f,
            });
        }
        let h = g.layer_norm_rows(feats.expect("nonempty batch"))?;
        let logits = g.matmul(h, hw)?;
        let logits = g.add_row(logits, hb)?;
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = g.cross_entropy(logits, &batch_labels)?;
        losses.push(g.value(loss).item());
        g.backward(loss)?;
        let mut grads = collect_grads(&g, &bound);
        for v in [hw, hb] {
            grads.push(g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]));
        }
        drop(g);
        opt.update_params(
            &mut |f| {
                teacher.for_each_mut(f);
                f("head_w", &mut head_w);
                f("head_b", &mut head_b);
            },
            &grads,
        )?;
    }
    Ok(losses)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub l_act: f64,
    pub l_mask: f64,
    pub lr: f64,
    pub alignment: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.l_act, self.l_mask, self.lr, self.alignment
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub initial_alignment: f64,
    pub final_alignment: f64,
    pub log: Vec<LogRow>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunSummary {
    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.log.iter().find(|r| r.step == step).map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const STUDENT_FILE: &str = "student.json";
pub const TEACHER_FILE: &str = "teacher.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Loads the configured teacher checkpoint, or initializes a teacher and
/// pretrains it on synthetic shapes.
pub fn prepare_teacher(cfg: &RunConfig) -> Result<Model> {
    let tc = cfg.teacher_model();
    if !cfg.teacher_checkpoint.is_empty() {
        let teacher = Model::load(Path::new(&cfg.teacher_checkpoint))?;
        if teacher.config != tc {
            return Err(Error::Config(format!(
                "teacher checkpoint {} does not match the configured teacher",
                cfg.teacher_checkpoint
            )));
        }
        return Ok(teacher);
    }
    let mut teacher = Model::teacher(&tc, &mut stream_rng(cfg.seed, Stream::TeacherInit))?;
    if cfg.teacher_pretrain_steps > 0 {
        let shapes = data::synthetic_dataset(
            cfg.dataset_size,
            cfg.image_size,
            cfg.channels,
            cfg.patch_size,
            derived_seed(cfg.seed, Stream::TeacherData),
        )?;
        pretrain_teacher(
            &mut teacher,
            &shapes,
            cfg.teacher_pretrain_steps,
            cfg.batch_size,
            cfg.teacher_pretrain_lr,
            &mut stream_rng(cfg.seed, Stream::TeacherBatches),
        )?;
    }
    Ok(teacher)
}

fn derived_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).random()
}

/// The data a run distills on when no directory is given.
pub fn default_source(cfg: &RunConfig) -> DataSource {
    DataSource::Synthetic {
        count: cfg.dataset_size,
        seed: derived_seed(cfg.seed, Stream::Data),
    }
}

/// Runs distillation end to end. With `out_dir`, writes the metrics CSV,
/// teacher and student checkpoints and a JSON summary there.
pub fn distill_run(cfg: &RunConfig, source: &DataSource, out_dir: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let teacher = prepare_teacher(cfg)?;
    distill_with_teacher(cfg, teacher, source, out_dir)
}

pub fn distill_with_teacher(
    cfg: &RunConfig,
    teacher: Model,
    source: &DataSource,
    out_dir: Option<&Path>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let dataset = data::load(source, cfg.image_size, cfg.channels, cfg.patch_size)?;
    if dataset.len() < cfg.probe_size {
        return Err(Error::Config(format!(
            "data source has {} images, probe needs {}",
            dataset.len(),
            cfg.probe_size
        )));
    }
    let student = Model::student(
        &cfg.student_model(),
        teacher.config.embed_dim,
        &mut stream_rng(cfg.seed, Stream::StudentInit),
    )?;
    let mut distiller = Distiller::new(teacher, student, cfg.distill())?;
    let targets = dataset
        .patches
        .iter()
        .map(|p| distiller.targets(p))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample> = dataset
        .patches
        .iter()
        .zip(&targets)
        .map(|(patches, targets)| Sample { patches, targets })
        .collect();
    let probe = &samples[..cfg.probe_size];

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let initial_alignment = distiller.alignment(probe)?;
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batches);
    let mut mask_rng = stream_rng(cfg.seed, Stream::Masks);
    let batch_size = cfg.batch_size.min(samples.len());
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let batch: Vec<Sample> = sample(&mut batch_rng, samples.len(), batch_size)
            .into_iter()
            .map(|i| samples[i])
            .collect();
        let m = distiller.train_step(&batch, &mut mask_rng)?;
        if step == 1 || step % cfg.log_every == 0 || step == cfg.steps {
            let row = LogRow {
                step,
                loss: m.loss,
                l_act: m.l_act,
                l_mask: m.l_mask,
                lr: m.lr,
                alignment: distiller.alignment(probe)?,
            };
            if let Some((w, path)) = &mut csv {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            log.push(row);
        }
    }
    let final_alignment = log.last().map_or(initial_alignment, |r| r.alignment);

    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        if let Some((mut w, path)) = csv.take() {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        distiller.student.save(&dir.join(STUDENT_FILE))?;
        distiller.teacher().save(&dir.join(TEACHER_FILE))?;
        artifacts = [METRICS_FILE, STUDENT_FILE, TEACHER_FILE, SUMMARY_FILE]
            .map(String::from)
            .to_vec();
    }
    let summary = RunSummary {
        steps: cfg.steps,
        initial_alignment,
        final_alignment,
        log,
        artifacts,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok(summary)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Output directory used when none is given: `$LINEARIZER_OUT` or `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("LINEARIZER_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Scaled-down configurations sized for unit tests.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.teacher_dim = 8;
    cfg.teacher_mlp_dim = 16;
    cfg.teacher_blocks = 2;
    cfg.student_dim = 6;
    cfg.student_mlp_dim = 12;
    cfg.student_blocks = 2;
    cfg.teacher_pretrain_steps = 3;
    cfg.dataset_size = 12;
    cfg.probe_size = 2;
    cfg.batch_size = 4;
    cfg.steps = 6;
    cfg.log_every = 2;
    cfg.warmup_steps = 2;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::loss::activation_matching_loss;
    use crate::distill::mask::MaskStrategy;

    fn distiller(cfg: &RunConfig) -> (Distiller, Dataset) {
        let teacher = Model::teacher(&cfg.teacher_model(), &mut stream_rng(cfg.seed, Stream::TeacherInit)).unwrap();
        let student = Model::student(&cfg.student_model(), cfg.teacher_dim, &mut stream_rng(cfg.seed, Stream::StudentInit)).unwrap();
        let ds = data::load(&default_source(cfg), cfg.image_size, cfg.channels, cfg.patch_size).unwrap();
        (Distiller::new(teacher, student, cfg.distill()).unwrap(), ds)
    }

    #[test]
    fn zero_learning_rate_reports_metrics_without_moving() {
        let mut cfg = tiny_config();
        cfg.lr = 0.0;
        cfg.min_lr = 0.0;
        let (mut d, ds) = distiller(&cfg);
        let t = d.targets(&ds.patches[0]).unwrap();
        let before = d.student.clone();
        let batch = [Sample { patches: &ds.patches[0], targets: &t }];
        let m = d.train_step(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.student, before);
        assert!(m.loss > 0.0 && m.grad_norm > 0.0 && m.lr == 0.0);
        assert!((m.loss - (m.l_act + m.l_mask)).abs() < 1e-12);
    }

    #[test]
    fn identical_networks_without_mask_have_zero_act_loss() {
        let mut cfg = tiny_config();
        cfg.student_dim = cfg.teacher_dim;
        cfg.student_mlp_dim = cfg.teacher_mlp_dim;
        cfg.mask_ratio = 0.0;
        cfg.mask_loss = false;
        cfg.matching_scope = MatchingScope::All;
        let (d, ds) = distiller(&cfg);
        // Same architecture as the teacher, with the teacher's weights.
        let mut twin = d.teacher().clone();
        twin.extras = d.student.extras.clone();
        let mut d = Distiller::new(d.teacher().clone(), twin, cfg.distill()).unwrap();
        let t = d.targets(&ds.patches[1]).unwrap();
        let batch = [Sample { patches: &ds.patches[1], targets: &t }];
        let m = d.train_step(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.l_act.abs() < 1e-12, "{}", m.l_act);
    }

    #[test]
    fn objective_matches_independent_recomputation() {
        let mut cfg = tiny_config();
        cfg.lambda = 5.0;
        let (d, ds) = distiller(&cfg);
        let masks = d.sample_masks(2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let targets: Vec<_> = ds.patches[..2].iter().map(|p| d.targets(p).unwrap()).collect();
        let batch: Vec<Sample> = (0..2).map(|i| Sample { patches: &ds.patches[i], targets: &targets[i] }).collect();
        let mut g = Graph::new();
        let bound = d.student.bind(&mut g, false);
        let obj = objective(&mut g, &bound, &batch, &masks, d.config(), d.stages()).unwrap();

        let mut want = 0.0;
        for (s, mask) in batch.iter().zip(&masks) {
            let out = d.student.forward_values(s.patches, Some(mask), &d.stages().student_taps).unwrap();
            let rows: Vec<usize> = mask.visible.iter().map(|i| i + 1).collect();
            let tm: Vec<_> = s.targets.stages.iter().map(|f| activation_map(f, &rows).unwrap()).collect();
            let sm: Vec<_> = out.stages.iter().map(|f| activation_map(f, &rows).unwrap()).collect();
            let act = activation_matching_loss(&tm, &sm).unwrap();
            let proj = crate::model::project_to_teacher(&out.output, d.student.extras.as_ref().unwrap()).unwrap();
            let lm = crate::distill::loss::masked_prediction_loss(&s.targets.output, &proj, mask, 1, 1.0).unwrap();
            want += act + 5.0 * lm;
        }
        want /= 2.0;
        assert_eq!(g.value(obj.total).item(), want);
    }

    #[test]
    fn teacher_gets_no_gradient_and_stays_fixed() {
        let cfg = tiny_config();
        let (mut d, ds) = distiller(&cfg);
        let teacher0 = d.teacher().clone();
        let targets: Vec<_> = ds.patches.iter().map(|p| d.targets(p).unwrap()).collect();
        let batch: Vec<Sample> = (0..4).map(|i| Sample { patches: &ds.patches[i], targets: &targets[i] }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            d.train_step(&batch, &mut rng).unwrap();
        }
        assert_eq!(d.teacher(), &teacher0);
    }

    #[test]
    fn run_writes_artifacts_and_is_deterministic() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = distill_run(&cfg, &default_source(&cfg), Some(a.path())).unwrap();
        let sb = distill_run(&cfg, &default_source(&cfg), Some(b.path())).unwrap();
        assert_eq!(sa, sb);
        let csv = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, std::fs::read_to_string(b.path().join(METRICS_FILE)).unwrap());
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        let steps: Vec<usize> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, vec![1, 2, 4, 6]);
        let student = Model::load(&a.path().join(STUDENT_FILE)).unwrap();
        assert_eq!(student.config, cfg.student_model());
    }

    #[test]
    fn zero_steps_gives_header_and_initial_student() {
        let mut cfg = tiny_config();
        cfg.steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let s = distill_run(&cfg, &default_source(&cfg), Some(dir.path())).unwrap();
        assert!(s.log.is_empty());
        assert_eq!(s.final_alignment, s.initial_alignment);
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, format!("{METRICS_HEADER}\n"));
        let saved = Model::load(&dir.path().join(STUDENT_FILE)).unwrap();
        let init = Model::student(&cfg.student_model(), cfg.teacher_dim, &mut stream_rng(cfg.seed, Stream::StudentInit)).unwrap();
        assert_eq!(saved, init);
    }

    #[test]
    fn every_scope_and_strategy_trains() {
        for scope in [MatchingScope::ClassOnly, MatchingScope::VisibleOnly, MatchingScope::All] {
            for strategy in [MaskStrategy::TokenWise, MaskStrategy::BlockWise] {
                let mut cfg = tiny_config();
                cfg.steps = 2;
                cfg.matching_scope = scope;
                cfg.mask_strategy = strategy;
                if scope == MatchingScope::ClassOnly {
                    cfg.student_dim = cfg.teacher_dim;
                }
                let s = distill_run(&cfg, &default_source(&cfg), None).unwrap();
                assert_eq!(s.log.len(), 2);
            }
        }
    }

    #[test]
    fn teacher_pretraining_reduces_cross_entropy() {
        let mut cfg = tiny_config();
        cfg.dataset_size = 16;
        let mut teacher = Model::teacher(&cfg.teacher_model(), &mut stream_rng(0, Stream::TeacherInit)).unwrap();
        let ds = data::synthetic_dataset(16, 8, 3, 2, 1).unwrap();
        let losses = pretrain_teacher(&mut teacher, &ds, 60, 16, 1e-2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
    }

    #[test]
    fn directory_source_without_enough_images_is_rejected() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::new(8, 8).save(dir.path().join("only.ppm")).unwrap();
        let err = distill_run(&cfg, &DataSource::Directory(dir.path().to_path_buf()), None).unwrap_err();
        assert!(err.to_string().contains("probe"), "{err}");
    }
}
