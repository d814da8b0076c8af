use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use stylemask_core::backends::Backends;
use stylemask_core::config::ProjectConfig;
use stylemask_core::editor::{self, EditRequest, EditResult, Editor, QmmReport};
use stylemask_core::image::Image;
use stylemask_core::pipeline::{initial_checkpoint, run_preselection};
use stylemask_core::preselect::Preselection;
use stylemask_core::stylespace::StyleCode;
use stylemask_core::trainer::{train as run_training, Checkpoint, FileObserver};
use stylemask_service::{AppState, Settings};

use crate::{EditArgs, MeasureArgs, TrainArgs};

fn load_project(path: &Path) -> Result<(ProjectConfig, Backends)> {
    let project = ProjectConfig::load(path)?;
    let backends = project.backends()?;
    Ok((project, backends))
}

fn write_stdout_or(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn preselect(config: &Path, out: Option<&Path>, iterations: Option<usize>, seed: Option<u64>) -> Result<()> {
    let (mut project, backends) = load_project(config)?;
    if let Some(n) = iterations {
        project.preselect.iterations = n;
    }
    if let Some(s) = seed {
        project.preselect.seed = s;
    }
    let pre = run_preselection(&backends, &project.specs()?, &project.preselect)?;
    for (name, channels) in &pre.channels {
        tracing::info!("{name}: {channels:?}");
    }
    write_stdout_or(out, &pre.to_json()?)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (mut project, backends) = load_project(&args.config)?;
    let cfg = &mut project.train;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lambda_bg {
        cfg.weights.bg = v;
    }
    let cfg = project.train.clone();
    let specs = project.specs()?;

    let start = match &args.resume {
        Some(path) => Checkpoint::load(path)?,
        None => {
            let pre = match &args.preselection {
                Some(path) => Some(Preselection::load(path)?),
                None if project.preselect.enabled && !args.no_preselect => {
                    Some(run_preselection(&backends, &specs, &project.preselect)?)
                }
                None => None,
            };
            let mut start = initial_checkpoint(&project, &backends, pre.as_ref())?;
            start.seed = cfg.seed;
            start.weights = cfg.weights;
            start
        }
    };
    if start.step >= cfg.steps {
        bail!("checkpoint is already at step {} of {}", start.step, cfg.steps);
    }
    let mut observer = FileObserver::new(args.log.as_deref(), Some(&args.out), args.resume.is_some())?;
    let done = run_training(start, &cfg, &backends, &specs, &mut observer)?;
    tracing::info!(step = done.step, out = %args.out.display(), "training finished");
    Ok(())
}

fn read_style(path: &Path) -> Result<StyleCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing style code {}", path.display()))
}

fn style_input(backends: &Backends, seed: Option<u64>, style: Option<&PathBuf>, role: &str) -> Result<StyleCode> {
    match (seed, style) {
        (Some(seed), None) => Ok(backends.generator.style_from_seed(seed)?),
        (None, Some(path)) => read_style(path),
        _ => bail!("give exactly one of --{role}-seed and --{role}-style"),
    }
}

fn image_input(
    backends: &Backends,
    seed: Option<u64>,
    style: Option<&PathBuf>,
    image: Option<&PathBuf>,
    role: &str,
) -> Result<Image> {
    match (seed.is_some() as u8 + style.is_some() as u8 + image.is_some() as u8, image) {
        (1, Some(path)) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(Image::from_png(&bytes)?)
        }
        (1, None) => Ok(backends.generator.synthesize(&style_input(backends, seed, style, role)?)?),
        _ => bail!("give exactly one {role} input: a seed, a style file or an image"),
    }
}

#[derive(Serialize)]
struct EditOutput<'a> {
    targets: &'a [String],
    delta: f64,
    image: Option<PathBuf>,
    style: Option<PathBuf>,
    report: &'a QmmReport,
}

#[derive(Serialize)]
struct EditDocument<'a> {
    mode: &'static str,
    results: Vec<EditOutput<'a>>,
}

/// `tint+emblem:1.5` → (["tint", "emblem"], 1.5)
fn parse_step(spec: &str) -> Result<(Vec<String>, f64)> {
    let (names, delta) = spec
        .rsplit_once(':')
        .ok_or_else(|| anyhow!("sequential step `{spec}` must look like `attr:delta`"))?;
    let delta: f64 = delta
        .trim()
        .parse()
        .map_err(|_| anyhow!("bad intensity in sequential step `{spec}`"))?;
    let names = names.split('+').map(|n| n.trim().to_string()).collect();
    Ok((names, delta))
}

pub fn edit(args: &EditArgs) -> Result<()> {
    let (project, backends) = load_project(&args.config)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let source = style_input(&backends, args.source_seed, args.source_style.as_ref(), "source")?;
    let reference = style_input(&backends, args.reference_seed, args.reference_style.as_ref(), "reference")?;
    let editor = Editor::new(backends, project.specs()?, &checkpoint)?;
    let delta = args.delta.unwrap_or(project.edit.delta);

    let (mode, prefix, results): (&str, &str, Vec<EditResult>) = if let Some(steps) = &args.sequential {
        let steps = steps.iter().map(|s| parse_step(s)).collect::<Result<Vec<_>>>()?;
        ("sequential", "step", editor.sequential_edit(&source, &reference, &steps)?)
    } else {
        let req = EditRequest {
            source,
            reference,
            targets: args.targets.clone(),
            delta,
        };
        match &args.sweep {
            Some(grid) => {
                let grid = if grid.is_empty() { &project.edit.sweep } else { grid };
                ("sweep", "sweep", editor.sweep(&req, grid)?)
            }
            None => ("single", "edit", vec![editor.edit(&req)?]),
        }
    };

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut doc = EditDocument { mode, results: Vec::new() };
    for (i, r) in results.iter().enumerate() {
        let stem = if results.len() == 1 && mode == "single" {
            prefix.to_string()
        } else {
            format!("{prefix}_{i:02}")
        };
        let (image, style) = match &args.out {
            Some(dir) => {
                let image = dir.join(format!("{stem}.png"));
                let style = dir.join(format!("{stem}.style.json"));
                fs::write(&image, r.image.to_png()?).with_context(|| format!("writing {}", image.display()))?;
                fs::write(&style, to_json(&r.style)?).with_context(|| format!("writing {}", style.display()))?;
                (Some(image), Some(style))
            }
            None => (None, None),
        };
        doc.results.push(EditOutput {
            targets: &r.targets,
            delta: r.delta,
            image,
            style,
            report: &r.report,
        });
    }
    print!("{}", to_json(&doc)?);
    Ok(())
}

pub fn measure(args: &MeasureArgs) -> Result<()> {
    let (project, backends) = load_project(&args.config)?;
    let source = image_input(
        &backends,
        args.source_seed,
        args.source_style.as_ref(),
        args.source_image.as_ref(),
        "source",
    )?;
    let reference = image_input(
        &backends,
        args.reference_seed,
        args.reference_style.as_ref(),
        args.reference_image.as_ref(),
        "reference",
    )?;
    let edited = image_input(&backends, None, args.edited_style.as_ref(), args.edited_image.as_ref(), "edited")?;
    let report = editor::measure(&backends, &project.specs()?, &source, &reference, &edited, &args.targets)?;
    print!("{}", to_json(&report)?);
    Ok(())
}

pub fn serve(config: &Path, checkpoint: &Path, port: Option<u16>, cache_dir: Option<PathBuf>) -> Result<()> {
    let project = ProjectConfig::load(config)?;
    let mut settings = Settings::from_env(&project.service)?;
    if let Some(p) = port {
        settings.port = p;
    }
    if let Some(d) = cache_dir {
        settings.cache_dir = d;
    }
    let state = AppState::new(project, &settings.cache_dir)?;
    state.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(stylemask_service::serve(state, settings.port))?;
    Ok(())
}
