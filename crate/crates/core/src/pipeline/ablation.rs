//! Trains several model variants on the same data and compares their AP.

use std::path::Path;

use serde::Serialize;

use super::data::{generate_split, Scene, Split};
use super::eval::{evaluate, EvalReport};
use super::infer::{infer_all, infer_teacher_all};
use super::train::{train, TrainState};
use crate::boxes::Detection;
use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// A named set of config overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub overrides: &'static [(&'static str, &'static str)],
}

pub const VARIANTS: [Variant; 7] = [
    Variant {
        name: "no_thead",
        overrides: &[("thead_enabled", "false"), ("mimic_enabled", "false")],
    },
    Variant {
        name: "no_mimic",
        overrides: &[("thead_enabled", "true"), ("mimic_enabled", "false")],
    },
    Variant {
        name: "mimic",
        overrides: &[("thead_enabled", "true"), ("mimic_enabled", "true")],
    },
    Variant {
        name: "plain",
        overrides: &[("alignment", "plain")],
    },
    Variant {
        name: "deformable",
        overrides: &[("alignment", "deformable")],
    },
    Variant {
        name: "guided",
        overrides: &[("alignment", "guided")],
    },
    Variant {
        name: "no_stagger",
        overrides: &[("staggered", "false")],
    },
];

pub fn variant(name: &str) -> Result<Variant> {
    VARIANTS.iter().copied().find(|v| v.name == name).ok_or_else(|| {
        let known: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
        Error::Config(format!("unknown variant `{name}` (known: {})", known.join(", ")))
    })
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let out: Vec<Variant> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(variant)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(out)
}

pub fn variant_config(base: &TrainConfig, v: Variant, seed: u64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    for (k, val) in v.overrides {
        cfg.set(k, val)?;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub student: EvalReport,
    pub teacher: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub ap: (f64, f64),
    pub ap50: (f64, f64),
    pub ap75: (f64, f64),
    pub teacher_ap50: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    /// One summary per variant, in first-appearance order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == name).collect();
                let col = |f: fn(&EvalReport) -> f64| mean_std(&rows.iter().map(|r| f(&r.student)).collect::<Vec<_>>());
                let teacher: Vec<f64> = rows.iter().filter_map(|r| r.teacher.as_ref().map(|t| t.ap50)).collect();
                VariantSummary {
                    variant: name.to_string(),
                    runs: rows.len(),
                    ap: col(|e| e.ap),
                    ap50: col(|e| e.ap50),
                    ap75: col(|e| e.ap75),
                    teacher_ap50: (!teacher.is_empty()).then(|| mean_std(&teacher)),
                }
            })
            .collect()
    }

    pub fn mean_ap50(&self, variant: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.variant == variant).map(|s| s.ap50.0)
    }

    /// One row per run, then `mean` and `std` rows per variant.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let err = |e| Error::csv(path, e);
        w.write_record(["variant", "seed", "ap", "ap50", "ap75", "teacher_ap", "teacher_ap50"])
            .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                format!("{:.6}", r.student.ap),
                format!("{:.6}", r.student.ap50),
                format!("{:.6}", r.student.ap75),
                opt(r.teacher.as_ref().map(|t| t.ap)),
                opt(r.teacher.as_ref().map(|t| t.ap50)),
            ])
            .map_err(err)?;
        }
        for s in self.summary() {
            let teacher_ap: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.variant == s.variant)
                .filter_map(|r| r.teacher.as_ref().map(|t| t.ap))
                .collect();
            let tap = (!teacher_ap.is_empty()).then(|| mean_std(&teacher_ap));
            for (label, pick) in [("mean", 0usize), ("std", 1)] {
                let get = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
                w.write_record([
                    s.variant.clone(),
                    label.to_string(),
                    format!("{:.6}", get(s.ap)),
                    format!("{:.6}", get(s.ap50)),
                    format!("{:.6}", get(s.ap75)),
                    opt(tap.map(get)),
                    opt(s.teacher_ap50.map(get)),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Student and, when present, teacher evaluation of a trained model.
pub fn evaluate_state(state: &TrainState, scenes: &[Scene]) -> Result<(EvalReport, Option<EvalReport>)> {
    let model = &state.model;
    let k = model.config().num_classes;
    let images: Vec<_> = scenes.iter().map(|s| &s.image).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let dets: Vec<Vec<Detection>> = infer_all(model, &images)?.into_iter().map(|(d, _)| d).collect();
    let student = evaluate(&dets, &gts, k);
    let teacher = match model.thead {
        Some(_) => Some(evaluate(&infer_teacher_all(model, &images)?, &gts, k)),
        None => None,
    };
    Ok((student, teacher))
}

/// Trains every variant once per seed. All variants of a seed share the
/// generated data, the epoch plans and the sampling rng seed.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        let data_cfg = TrainConfig { seed, ..base.clone() };
        let train_set = generate_split(&data_cfg, Split::Train)?;
        let eval_set = generate_split(&data_cfg, Split::Eval)?;
        for &v in variants {
            let cfg = variant_config(base, v, seed)?;
            let mut state = TrainState::new(&cfg)?;
            train(&mut state, &train_set, |_| Ok(()), |_, _| Ok(()))?;
            let (student, teacher) = evaluate_state(&state, &eval_set)?;
            let row = AblationRow {
                variant: v.name.to_string(),
                seed,
                student,
                teacher,
            };
            on_row(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}
