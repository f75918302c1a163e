//! Joint training of the refinement module, both heads and the mimic loss.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Scene;
use crate::anchors::{
    assign_iou, assign_refinement, filter_proposals, sample_mimic, sample_student_reg, sample_teacher,
    select_student_cls, AnchorGrid, IouLabel, Proposal, ScaleRangeConfig,
};
use crate::backbone::{level_stride, stagger, MIN_LEVEL, NUM_LEVELS};
use crate::boxes::{decode, BBox, BoxDelta};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::{
    box_head_loss, extract_student_features, mimic_loss, refinement_loss, RefinementOutput, SHeadLevel,
    THeadOutput,
};
use crate::layers::Ctx;
use crate::model::Detector;
use crate::tensor::loss::cross_entropy_per_row;
use crate::tensor::{sgd_step, Cell, Roi, SgdConfig, Tensor, Var};

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_t: f64,
    pub l_s: f64,
    pub l_mimic: f64,
    pub total: f64,
}

/// Model plus everything needed to continue training bit-for-bit.
pub struct TrainState {
    pub model: Detector,
    pub step: usize,
    /// Drives proposal sampling. Data order and flips are derived from the
    /// seed and epoch instead, so every variant sees the same data stream.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(100);
        Ok(TrainState {
            model: Detector::new(cfg)?,
            step: 0,
            rng,
        })
    }
}

/// Linear warmup from `base_lr / 10`, then a division by `decay_factor` at
/// each decay epoch.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = if step < cfg.warmup_steps {
        0.1 + 0.9 * step as f64 / cfg.warmup_steps as f64
    } else {
        1.0
    };
    let epoch = step / cfg.steps_per_epoch();
    let drops = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.base_lr * warm / cfg.decay_factor.powi(drops as i32)
}

pub(crate) fn cell_value(t: &Tensor<f32>, b: usize, c: usize, y: usize, x: usize) -> f32 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Every anchor of image `b` moved by the refinement deltas and clipped,
/// with its objectness probability. Level-major, then row-major.
pub(crate) fn adjusted_anchors(
    ctx: &Ctx,
    grids: &[AnchorGrid],
    out: &RefinementOutput,
    b: usize,
    image_size: usize,
) -> Vec<Proposal> {
    let size = (image_size as f32, image_size as f32);
    let mut props = Vec::new();
    for (li, grid) in grids.iter().enumerate() {
        let obj = ctx.g.value(out.objectness[li]);
        let del = ctx.g.value(out.deltas[li]);
        for i in 0..grid.height {
            for j in 0..grid.width {
                let d = BoxDelta::from_slice(&[0, 1, 2, 3].map(|c| cell_value(del, b, c, i, j)));
                let anchor = grid.anchor(i, j);
                props.push(Proposal {
                    bbox: decode(&anchor, &d, size),
                    score: crate::tensor::sigmoid(cell_value(obj, b, 0, i, j)),
                    level: grid.level,
                    i,
                    j,
                    anchor,
                });
            }
        }
    }
    props
}

fn cell_of(p: &Proposal, b: usize) -> Cell {
    Cell {
        source: p.level - MIN_LEVEL,
        batch: b,
        y: p.i,
        x: p.j,
    }
}

/// Per-image proposal bookkeeping of one step.
#[derive(Clone, Debug, Default)]
pub struct ImageSets {
    pub proposals: Vec<Proposal>,
    pub labels: Vec<IouLabel>,
    /// Indices into `proposals`.
    pub teacher: Vec<usize>,
    pub student_cls: Vec<usize>,
    pub student_reg: Vec<usize>,
    /// Indices into `teacher`.
    pub mimic: Vec<usize>,
}

/// The recorded forward pass of one training step.
pub struct ForwardPass<'a> {
    pub ctx: Ctx<'a>,
    pub l_r: Var,
    pub l_t: Var,
    pub l_s: Var,
    pub l_mimic: Var,
    pub total: Var,
    pub shead: Vec<SHeadLevel>,
    pub thead: Option<THeadOutput>,
    pub sets: Vec<ImageSets>,
}

impl ForwardPass<'_> {
    pub fn report(&self) -> LossReport {
        let v = |x: Var| self.ctx.g.value(x).item() as f64;
        LossReport {
            l_r: v(self.l_r),
            l_t: v(self.l_t),
            l_s: v(self.l_s),
            l_mimic: v(self.l_mimic),
            total: v(self.total),
        }
    }

    /// Student cells of the mimic boxes, in mimic-row order.
    pub fn mimic_cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for (b, s) in self.sets.iter().enumerate() {
            for &m in &s.mimic {
                cells.push(cell_of(&s.proposals[s.teacher[m]], b));
            }
        }
        cells
    }
}

fn zero(ctx: &mut Ctx) -> Var {
    ctx.g.constant(Tensor::scalar(0.0))
}

/// Rows `rows` of a `(m, d)` matrix as a new `(rows, d)` matrix.
fn select_rows(ctx: &mut Ctx, x: Var, rows: &[usize]) -> Result<Var> {
    let (m, d) = ctx.g.value(x).dims2("select_rows")?;
    let as_map = ctx.g.reshape(x, &[m, d, 1, 1])?;
    let cells: Vec<Cell> = rows
        .iter()
        .map(|&r| Cell {
            source: 0,
            batch: r,
            y: 0,
            x: 0,
        })
        .collect();
    ctx.g.gather_cells(&[as_map], &cells)
}

/// Runs every stage of a training step up to the total loss.
pub fn forward_losses<'a>(model: &'a Detector, batch: &[&Scene], rng: &mut impl Rng) -> Result<ForwardPass<'a>> {
    let cfg = model.config();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let input = model.batch_tensor(&images)?;
    let mut ctx = Ctx::train(&model.store);
    let x = ctx.g.constant(input);
    let c = model.backbone.forward(&mut ctx, x)?;
    let need_p2 = model.thead.is_some() && cfg.staggered;
    let pyramid = model.fpn.forward(&mut ctx, &c, need_p2)?;
    let st = stagger(&pyramid);
    let grids = model.anchor_grids();

    // refinement
    let refine = model.refinement.forward(&mut ctx, &st.student)?;
    let scale_cfg = ScaleRangeConfig::from_config(cfg);
    let targets = batch
        .iter()
        .map(|s| {
            let boxes: Vec<BBox> = s.gts.iter().map(|g| g.bbox).collect();
            assign_refinement(&grids, &boxes, &scale_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let l_r = refinement_loss(&mut ctx, &refine, &targets)?;

    // proposals and head labels
    let mut sets = Vec::with_capacity(batch.len());
    for (b, scene) in batch.iter().enumerate() {
        let cands = adjusted_anchors(&ctx, &grids, &refine, b, cfg.image_size);
        let proposals = filter_proposals(&cands, cfg.proposal_nms as f32, cfg.proposal_k);
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let labels = assign_iou(&boxes, &scene.gts, cfg.head_iou as f32)?;
        sets.push(ImageSets {
            proposals,
            labels,
            ..ImageSets::default()
        });
    }

    // T-head on the teacher sample
    let mut thead_out = None;
    let l_t = match &model.thead {
        Some(thead) => {
            let mut rois = Vec::new();
            let mut t_labels = Vec::new();
            for (b, s) in sets.iter_mut().enumerate() {
                s.teacher = sample_teacher(&s.labels, cfg.n_teacher, cfg.pos_ratio, rng);
                for &k in &s.teacher {
                    let p = &s.proposals[k];
                    rois.push(Roi {
                        batch: b,
                        level: p.level - MIN_LEVEL,
                        bbox: p.bbox.as_array(),
                    });
                    t_labels.push(s.labels[k]);
                }
            }
            if rois.is_empty() {
                zero(&mut ctx)
            } else {
                let (features, shift) = if cfg.staggered {
                    (st.teacher_set()?, 1)
                } else {
                    (st.student, 0)
                };
                let strides: Vec<f64> = (0..NUM_LEVELS)
                    .map(|li| level_stride(MIN_LEVEL + li - shift) as f64)
                    .collect();
                let out = thead.forward(&mut ctx, &features, &strides, &rois)?;
                thead_out = Some(out);
                box_head_loss(&mut ctx, out.logits, out.deltas, &t_labels, &t_labels)?
            }
        }
        None => zero(&mut ctx),
    };

    // S-head, hard-mined classification and sampled regression
    let deltas: Vec<Var> = if cfg.detach_refinement_deltas {
        refine.deltas.iter().map(|&d| ctx.g.detach(d)).collect()
    } else {
        refine.deltas.clone()
    };
    let shead = model.shead.forward(&mut ctx, &st.student, &deltas)?;
    let k = cfg.num_logits();
    let (mut cls_cells, mut cls_labels) = (Vec::new(), Vec::new());
    let (mut reg_cells, mut reg_labels) = (Vec::new(), Vec::new());
    for (b, s) in sets.iter_mut().enumerate() {
        let mut logits = Vec::with_capacity(s.proposals.len() * k);
        for p in &s.proposals {
            let map = ctx.g.value(shead[p.level - MIN_LEVEL].logits);
            logits.extend((0..k).map(|c| cell_value(map, b, c, p.i, p.j)));
        }
        let y: Vec<usize> = s.labels.iter().map(|l| l.label).collect();
        let losses = cross_entropy_per_row(&logits, k, &y);
        s.student_cls = select_student_cls(&losses, cfg.hard_k);
        s.student_reg = sample_student_reg(&s.labels, cfg.max_reg_pos, rng);
        for &i in &s.student_cls {
            cls_cells.push(cell_of(&s.proposals[i], b));
            cls_labels.push(s.labels[i]);
        }
        for &i in &s.student_reg {
            reg_cells.push(cell_of(&s.proposals[i], b));
            reg_labels.push(s.labels[i]);
        }
    }
    let l_s = if cls_cells.is_empty() && reg_cells.is_empty() {
        zero(&mut ctx)
    } else {
        let logit_maps: Vec<Var> = shead.iter().map(|l| l.logits).collect();
        let delta_maps: Vec<Var> = shead.iter().map(|l| l.deltas).collect();
        let cls = ctx.g.gather_cells(&logit_maps, &cls_cells)?;
        let reg = ctx.g.gather_cells(&delta_maps, &reg_cells)?;
        box_head_loss(&mut ctx, cls, reg, &cls_labels, &reg_labels)?
    };

    // mimic on a subset of the teacher sample
    let l_mimic = match thead_out {
        Some(t) if cfg.mimic_enabled => {
            let mut rows = Vec::new();
            let mut offset = 0;
            for s in sets.iter_mut() {
                s.mimic = sample_mimic(&(0..s.teacher.len()).collect::<Vec<_>>(), cfg.mimic_m, rng);
                rows.extend(s.mimic.iter().map(|&m| offset + m));
                offset += s.teacher.len();
            }
            let (t_cls, t_reg) = if cfg.detach_teacher {
                (ctx.g.detach(t.logits), ctx.g.detach(t.reg_feature))
            } else {
                (t.logits, t.reg_feature)
            };
            let t_cls = select_rows(&mut ctx, t_cls, &rows)?;
            let t_reg = select_rows(&mut ctx, t_reg, &rows)?;
            let mut cells = Vec::with_capacity(rows.len());
            for (b, s) in sets.iter().enumerate() {
                cells.extend(s.mimic.iter().map(|&m| cell_of(&s.proposals[s.teacher[m]], b)));
            }
            let (s_cls, s_reg) = extract_student_features(&mut ctx, &shead, &cells)?;
            mimic_loss(&mut ctx, t_cls, t_reg, s_cls, s_reg)?
        }
        _ => zero(&mut ctx),
    };

    let total = ctx.g.add_scalars(&[l_r, l_t, l_s, l_mimic])?;
    for (v, name) in [(l_r, "L_R"), (l_t, "L_T"), (l_s, "L_S"), (l_mimic, "L_mimic"), (total, "total")] {
        ctx.g.label(v, name);
    }
    Ok(ForwardPass {
        ctx,
        l_r,
        l_t,
        l_s,
        l_mimic,
        total,
        shead,
        thead: thead_out,
        sets,
    })
}

/// Forward, backward and one SGD step at learning rate `lr`.
pub fn train_step(state: &mut TrainState, batch: &[&Scene], lr: f64) -> Result<LossReport> {
    let cfg = state.model.config().clone();
    let pass = forward_losses(&state.model, batch, &mut state.rng)?;
    pass.ctx.g.check_finite()?;
    let report = pass.report();
    let grads = pass.ctx.g.backward(pass.total)?;
    let param_grads: Vec<_> = pass
        .ctx
        .g
        .param_grads(&grads)
        .into_iter()
        .map(|(id, g)| (id, g.clone()))
        .collect();
    drop(pass);
    for (id, g) in &param_grads {
        state.model.store.accumulate_grad(*id, g);
    }
    let store = &mut state.model.store;
    store.fill_missing_grads();
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "backward",
            node: 0,
            label: " (gradient norm)".into(),
        });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = (cfg.grad_clip / norm) as f32;
        for id in store.ids() {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    sgd_step(
        store,
        SgdConfig {
            lr: lr as f32,
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
        },
    )?;
    state.step += 1;
    Ok(report)
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub wall_ms: f64,
}

pub const LOG_HEADER: [&str; 8] = ["step", "lr", "L_R", "L_T", "L_S", "L_mimic", "total", "wall_ms"];

impl StepLog {
    pub fn csv_record(&self) -> [String; 8] {
        [
            self.step.to_string(),
            format!("{:e}", self.lr),
            format!("{:e}", self.loss.l_r),
            format!("{:e}", self.loss.l_t),
            format!("{:e}", self.loss.l_s),
            format!("{:e}", self.loss.l_mimic),
            format!("{:e}", self.loss.total),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

/// Training log writer; flushes after every row so a crash keeps the log.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    /// Appends to an existing log (resumed runs); creates it if absent.
    pub fn append(path: &Path) -> Result<Self> {
        Self::open(path, path.exists())
    }

    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !append {
            writer.write_record(LOG_HEADER).map_err(|e| Error::csv(path, e))?;
        }
        Ok(CsvLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        self.writer
            .write_record(log.csv_record())
            .map_err(|e| Error::csv(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Shuffled order and flip flags of one epoch, from the seed alone.
pub fn epoch_plan(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| (i, cfg.flip && rng.random_bool(0.5)))
        .collect()
}

/// Trains from `state.step` to the end of the schedule. `on_step` sees every
/// step; `on_epoch` runs after each completed epoch with its 1-based number.
pub fn train(
    state: &mut TrainState,
    data: &[Scene],
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
    mut on_epoch: impl FnMut(usize, &TrainState) -> Result<()>,
) -> Result<()> {
    let cfg = state.model.config().clone();
    if data.is_empty() {
        return Err(Error::Dataset("no training scenes".into()));
    }
    if data.len() != cfg.train_scenes {
        return Err(Error::Config(format!(
            "train_scenes is {} but the dataset has {} scenes",
            cfg.train_scenes,
            data.len()
        )));
    }
    let spe = cfg.steps_per_epoch();
    let total = cfg.total_steps();
    while state.step < total {
        let epoch = state.step / spe;
        let plan = epoch_plan(&cfg, epoch, data.len());
        let within = state.step % spe;
        for chunk in plan.chunks(cfg.batch_size).skip(within) {
            let started = Instant::now();
            let flipped: Vec<Scene> = chunk
                .iter()
                .filter(|(_, f)| *f)
                .map(|&(i, _)| data[i].flip_horizontal())
                .collect();
            let mut fi = flipped.iter();
            let batch: Vec<&Scene> = chunk
                .iter()
                .map(|&(i, f)| if f { fi.next().expect("one per flag") } else { &data[i] })
                .collect();
            let lr = lr_at(state.step, &cfg);
            let step = state.step;
            let loss = train_step(state, &batch, lr)?;
            on_step(&StepLog {
                step,
                lr,
                loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
        }
        on_epoch(epoch + 1, state)?;
    }
    Ok(())
}
