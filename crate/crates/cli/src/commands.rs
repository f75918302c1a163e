use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use mimicdet::config::TrainConfig;
use mimicdet::pipeline::ablation::{evaluate_state, parse_variants, run_ablation};
use mimicdet::pipeline::raster::{class_color, draw_box, draw_text};
use mimicdet::pipeline::{
    generate_split, infer_all, load_checkpoint, read_split, save_checkpoint, train as run_training, write_split,
    CsvLog, EvalReport, Image, Scene, Split, TrainState,
};
use mimicdet::tensor::{standard_suite, SUITE_TOLERANCE};
use serde::Serialize;

use crate::{ConfigArgs, Failure};

type CmdResult = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Applies the config file and overrides on top of `base` and validates.
fn resolve(mut cfg: TrainConfig, args: &ConfigArgs, overrides: &[String]) -> Result<TrainConfig, Failure> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo(command: &str, cfg: &TrainConfig) {
    println!("# mimicdet {command}: resolved config");
    print!("{}", cfg.to_text());
    println!("# end config");
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label:<8} {:>7} {:>7} {:>7}", "AP", "AP50", "AP75");
    println!("{:<8} {:>7.4} {:>7.4} {:>7.4}", "", r.ap, r.ap50, r.ap75);
}

/// Loads a checkpoint whose stored config is the base for the file and
/// overrides; the result must keep the parameter layout.
fn load_model(path: &Path, args: &ConfigArgs, overrides: &[String]) -> Result<TrainState, Failure> {
    let mut state = load_checkpoint(path, None)?;
    let cfg = resolve(state.model.config().clone(), args, overrides)?;
    state
        .model
        .replace_config(cfg)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(state)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for the log, checkpoints and report.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Dataset root holding `train/` and `eval/` splits; generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct FinalReport<'a> {
    steps: usize,
    student: &'a EvalReport,
    teacher: Option<&'a EvalReport>,
}

fn load_or_generate(cfg: &mut TrainConfig, data: Option<&Path>) -> Result<(Vec<Scene>, Vec<Scene>), Failure> {
    match data {
        Some(root) => {
            let train = read_split(&root.join(Split::Train.dir_name()), cfg.num_classes)?;
            let eval = read_split(&root.join(Split::Eval.dir_name()), cfg.num_classes)?;
            cfg.train_scenes = train.len();
            cfg.eval_scenes = eval.len();
            Ok((train, eval))
        }
        None => Ok((generate_split(cfg, Split::Train)?, generate_split(cfg, Split::Eval)?)),
    }
}

pub fn train(a: TrainArgs, overrides: &[String]) -> CmdResult {
    let mut cfg = resolve(TrainConfig::default(), &a.cfg, overrides)?;
    let (train_set, eval_set) = load_or_generate(&mut cfg, a.data.as_deref())?;
    cfg.validate()?;
    echo("train", &cfg);
    create_dir(&a.out)?;

    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p, Some(&cfg))?;
            s.model.replace_config(cfg.clone())?;
            eprintln!("resuming {} at step {}", p.display(), s.step);
            s
        }
        None => TrainState::new(&cfg)?,
    };
    let log_path = a.out.join("train_log.csv");
    let mut log = if a.resume.is_some() {
        CsvLog::append(&log_path)?
    } else {
        CsvLog::create(&log_path)?
    };
    let total = cfg.total_steps();
    let started = Instant::now();
    run_training(
        &mut state,
        &train_set,
        |s| {
            log.write(s)?;
            if s.step % 50 == 0 || s.step + 1 == total {
                eprintln!(
                    "step {}/{total} lr {:.5} total {:.4} (R {:.3} T {:.3} S {:.3} mimic {:.3}) {:.0}s",
                    s.step + 1,
                    s.lr,
                    s.loss.total,
                    s.loss.l_r,
                    s.loss.l_t,
                    s.loss.l_s,
                    s.loss.l_mimic,
                    started.elapsed().as_secs_f64()
                );
            }
            Ok(())
        },
        |epoch, st| {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(st, &a.out.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&state, &a.out.join("final.ckpt"))?;

    let (student, teacher) = evaluate_state(&state, &eval_set)?;
    print_report("S-head", &student);
    if let Some(t) = &teacher {
        print_report("T-head", t);
    }
    let report = FinalReport {
        steps: state.step,
        student: &student,
        teacher: teacher.as_ref(),
    };
    let path = a.out.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory (with `annotations.json`); the configured synthetic
    /// eval split is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn eval(a: EvalArgs, overrides: &[String]) -> CmdResult {
    let state = load_model(&a.checkpoint, &a.cfg, overrides)?;
    let cfg = state.model.config().clone();
    echo("eval", &cfg);
    let scenes = match &a.data {
        Some(dir) => read_split(dir, cfg.num_classes)?,
        None => generate_split(&cfg, Split::Eval)?,
    };
    let (student, teacher) = evaluate_state(&state, &scenes)?;
    println!("images {} gts {} detections {}", scenes.len(), student.num_gts, student.num_detections);
    print_report("S-head", &student);
    if let Some(t) = &teacher {
        print_report("T-head", t);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of PNG images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "runs/infer")]
    pub out: PathBuf,
}

fn list_images(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn infer(a: InferArgs, overrides: &[String]) -> CmdResult {
    let state = load_model(&a.checkpoint, &a.cfg, overrides)?;
    let cfg = state.model.config().clone();
    echo("infer", &cfg);
    let paths = list_images(&a.input)?;
    create_dir(&a.out)?;
    for chunk in paths.chunks(cfg.batch_size) {
        let images: Vec<Image> = chunk.iter().map(|p| Image::load(p)).collect::<Result<_, _>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let results = infer_all(&state.model, &refs)?;
        for ((path, image), (dets, trace)) in chunk.iter().zip(&images).zip(results) {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut text = String::from("# class_id score x1 y1 x2 y2\n");
            let mut overlay = image.clone();
            for d in &dets {
                text.push_str(&format!(
                    "{} {:.6} {:.2} {:.2} {:.2} {:.2}\n",
                    d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
                ));
                let color = class_color(d.class_id);
                draw_box(&mut overlay, &d.bbox, color, 1);
                let label = format!("{:.2}", d.score);
                draw_text(&mut overlay, d.bbox.x1 as i64 + 2, d.bbox.y1 as i64 + 2, &label, color, 1);
            }
            let txt = a.out.join(format!("{stem}.txt"));
            fs::write(&txt, text).map_err(|e| runtime(format!("{}: {e}", txt.display())))?;
            overlay.save_png(&a.out.join(format!("{stem}_overlay.png")))?;
            println!(
                "{stem}: {} detections (anchors {}, top-k {}, above score {}, after nms {})",
                dets.len(),
                trace.anchors,
                trace.after_top_k,
                trace.after_score_threshold,
                trace.after_nms
            );
        }
    }
    println!("processed {} images", paths.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root; `train/` and `eval/` are written below it.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

pub fn gen(a: GenArgs, overrides: &[String]) -> CmdResult {
    let cfg = resolve(TrainConfig::default(), &a.cfg, overrides)?;
    echo("gen", &cfg);
    for split in [Split::Train, Split::Eval] {
        let scenes = generate_split(&cfg, split)?;
        let dir = a.out.join(split.dir_name());
        write_split(&dir, &scenes, cfg.num_classes)?;
        println!("wrote {} scenes to {}", scenes.len(), dir.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn gradcheck(a: GradcheckArgs, overrides: &[String]) -> CmdResult {
    let cfg = resolve(TrainConfig::default(), &a.cfg, overrides)?;
    echo("gradcheck", &cfg);
    let started = Instant::now();
    let results = standard_suite(cfg.seed)?;
    let mut failed = Vec::new();
    for (name, r) in &results {
        let ok = r.max_rel_error < SUITE_TOLERANCE;
        println!(
            "{:<22} {:>10.3e} {:>6} values  {}",
            name,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(*name);
        }
    }
    println!("{} ops checked in {:.2}s", results.len(), started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated variants: no_thead, no_mimic, mimic, plain,
    /// deformable, guided, no_stagger.
    #[arg(long, default_value = "no_thead,no_mimic,mimic")]
    pub variants: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long, default_value = "runs/ablation.csv")]
    pub out: PathBuf,
}

pub fn ablate(a: AblateArgs, overrides: &[String]) -> CmdResult {
    let cfg = resolve(TrainConfig::default(), &a.cfg, overrides)?;
    let variants = parse_variants(&a.variants)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Failure::Usage(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(Failure::Usage("at least one seed is required".into()));
    }
    echo("ablate", &cfg);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let started = Instant::now();
    let table = run_ablation(&cfg, &variants, &seeds, |r| {
        eprintln!(
            "{:<12} seed {:<3} AP50 {:.4} AP {:.4}{} [{:.0}s]",
            r.variant,
            r.seed,
            r.student.ap50,
            r.student.ap,
            r.teacher.as_ref().map(|t| format!(" teacher AP50 {:.4}", t.ap50)).unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
    })?;
    table.write_csv(&a.out)?;
    println!("{:<12} {:>4} {:>17} {:>17} {:>17} {:>17}", "variant", "runs", "AP", "AP50", "AP75", "T-head AP50");
    let pm = |p: (f64, f64)| format!("{:.4} ± {:.4}", p.0, p.1);
    for s in table.summary() {
        println!(
            "{:<12} {:>4} {:>17} {:>17} {:>17} {:>17}",
            s.variant,
            s.runs,
            pm(s.ap),
            pm(s.ap50),
            pm(s.ap75),
            s.teacher_ap50.map(pm).unwrap_or_else(|| "-".into())
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
