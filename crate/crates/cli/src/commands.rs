use std::fs;
use std::path::{Path, PathBuf};

use distillkit::config::RunConfig;
use distillkit::data::{export_corpus, generate_corpus, import_corpus, normalize_input, resize_image, Corpus};
use distillkit::distill::{load_stats, save_stats};
use distillkit::encoder::{vit_forward, EncoderParams};
use distillkit::error::Error;
use distillkit::eval::{pca_rgb, run_protocols, write_ppm, Protocol, ZeroShotTeacher};
use distillkit::pipeline::{
    calibrate_teacher, calibration_set, load_checkpoint, run_stage, save_checkpoint, stage_file, Checkpoint,
    DataRegistry, RunOptions, StageInputs, StageKind, TeacherSource, METRICS_HEADER,
};

use crate::Failure;

type Outcome = Result<(), Failure>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err(Error::$kind(format!($($arg)*)).into())
    };
}

const PROXY: &str = "proxy";

fn training_registry(cfg: &RunConfig) -> Result<DataRegistry, Error> {
    cfg.registry(&generate_corpus(&cfg.data)?)
}

fn require(path: &Path, what: &str, hint: &str) -> Result<Checkpoint, Error> {
    if !path.exists() {
        bail!(State, "{what} {} is missing; {hint}", path.display());
    }
    load_checkpoint(path)
}

fn load_teacher(cfg: &RunConfig, out: &Path, index: usize) -> Result<EncoderParams, Error> {
    let entry = &cfg.teachers[index];
    let path = cfg.teacher_checkpoint(entry, out);
    let ckpt = load_checkpoint(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("teacher {:?} checkpoint {}: {io} (run `distillkit init`)", entry.name, path.display()),
        )),
        other => other,
    })?;
    ckpt.check_encoder(&entry.encoder)?;
    Ok(ckpt.encoder)
}

fn optional_stats(cfg: &RunConfig, out: &Path, name: &str) -> Result<Option<distillkit::distill::TeacherStats>, Error> {
    let path = cfg.teacher_stats_path(name, out);
    if path.exists() {
        Ok(Some(load_stats(&path)?))
    } else {
        Ok(None)
    }
}

pub fn init(cfg: &RunConfig, out: &Path) -> Outcome {
    fs::create_dir_all(out.join("teachers")).map_err(Error::from)?;
    for entry in &cfg.teachers {
        let path = cfg.teacher_checkpoint(entry, out);
        if path.exists() {
            println!("kept    {}", path.display());
            continue;
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(Error::from)?;
        }
        let params = EncoderParams::init(&entry.encoder, entry.init_seed)?;
        save_checkpoint(&path, &Checkpoint::from_encoder(params))?;
        println!("teacher {}", path.display());
    }
    let corpus_dir = out.join("corpus");
    let samples = generate_corpus(&cfg.eval_data)?;
    export_corpus(&corpus_dir, &samples, cfg.eval_data.num_classes)?;
    println!("corpus  {} ({} images)", corpus_dir.display(), samples.len());
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(Error::from)?;
    println!("config  {} (hash {})", config_path.display(), cfg.hash()?);
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, out: &Path) -> Outcome {
    let registry = training_registry(cfg)?;
    let images = calibration_set(&registry, &cfg.stage_config(StageKind::Stage1)?)?;
    for (i, entry) in cfg.teachers.iter().enumerate() {
        let teacher = load_teacher(cfg, out, i)?;
        let stats = calibrate_teacher(&teacher, &images)?;
        let path = cfg.teacher_stats_path(&entry.name, out);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(Error::from)?;
        }
        save_stats(&path, &stats)?;
        println!("stats   {} ({} images, d={})", path.display(), stats.sample_count, entry.encoder.dim);
    }
    let proxy_path = stage_file(out, StageKind::Stage1, ".ckpt");
    if proxy_path.exists() {
        let proxy = load_checkpoint(&proxy_path)?;
        let images = calibration_set(&registry, &cfg.stage_config(StageKind::Stage2)?)?;
        let stats = calibrate_teacher(&proxy.encoder, &images)?;
        let path = cfg.teacher_stats_path(PROXY, out);
        save_stats(&path, &stats)?;
        println!("stats   {} ({} images, d={})", path.display(), stats.sample_count, cfg.proxy.dim);
    }
    Ok(())
}

fn foundation_teachers(cfg: &RunConfig, out: &Path) -> Result<Vec<TeacherSource>, Error> {
    let mut teachers = Vec::with_capacity(cfg.teachers.len());
    for (i, entry) in cfg.teachers.iter().enumerate() {
        let mut source = TeacherSource::new(&entry.name, load_teacher(cfg, out, i)?);
        source.gamma = entry.gamma;
        source.stats = optional_stats(cfg, out, &entry.name)?;
        teachers.push(source);
    }
    Ok(teachers)
}

fn proxy_teacher(cfg: &RunConfig, out: &Path) -> Result<TeacherSource, Error> {
    let ckpt = require(&stage_file(out, StageKind::Stage1, ".ckpt"), "proxy checkpoint", "run `distillkit train --stage 1` first")?;
    ckpt.check_encoder(&cfg.proxy)?;
    let mut source = TeacherSource::new(PROXY, ckpt.encoder);
    source.stats = optional_stats(cfg, out, PROXY)?;
    Ok(source)
}

pub fn train(cfg: &RunConfig, out: &Path, stage: StageKind, resume: bool, halt_after: Option<usize>) -> Outcome {
    let config = cfg.stage_config(stage)?;
    let mut inputs = StageInputs::default();
    if stage.multi_teacher() {
        inputs.teachers = foundation_teachers(cfg, out)?;
    } else {
        inputs.teachers = vec![proxy_teacher(cfg, out)?];
    }
    if stage == StageKind::Stage3 {
        let init = require(&stage_file(out, StageKind::Stage2, ".ckpt"), "stage2 checkpoint", "run `distillkit train --stage 2` first")?;
        inputs.student_init = Some(init);
    }
    let registry = training_registry(cfg)?;
    let ckpt = run_stage(&config, inputs, &registry, out, RunOptions { resume, halt_after })?;
    if ckpt.step < config.total_steps {
        println!("{stage}: halted at step {} of {}", ckpt.step, config.total_steps);
        return Ok(());
    }
    println!("{stage}: {} steps, checkpoint {}", ckpt.step, stage_file(out, stage, ".ckpt").display());
    print!("{}", final_losses(&stage_file(out, stage, "_metrics.csv"))?);
    Ok(())
}

/// Loss rows of the last logged step.
fn final_losses(path: &Path) -> Result<String, Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!(Format, "{} has an unexpected header", path.display());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).filter(|r: &Vec<&str>| r.len() == 6).collect();
    let Some(last) = rows.last().map(|r| r[0]) else {
        return Ok(String::new());
    };
    let mut s = String::new();
    for r in rows.iter().filter(|r| r[0] == last) {
        s.push_str(&format!("  step {} teacher {:<8} class {} patch {} total {}\n", r[0], r[2], r[3], r[4], r[5]));
    }
    Ok(s)
}

fn default_checkpoint(out: &Path) -> Result<PathBuf, Error> {
    for stage in [StageKind::Stage3, StageKind::Stage1Plus3, StageKind::Stage2, StageKind::Stage2Only] {
        let path = stage_file(out, stage, ".ckpt");
        if path.exists() {
            return Ok(path);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no student checkpoint in {}; pass --checkpoint", out.display()),
    )))
}

fn load_inputs(out: &Path, checkpoint: Option<&Path>, corpus: Option<&Path>) -> Result<(Checkpoint, Corpus), Error> {
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(out)?,
    };
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or_else(|| out.join("corpus"));
    let ckpt = load_checkpoint(&ckpt_path)?;
    let corpus = import_corpus(&corpus_dir)?;
    Ok((ckpt, corpus))
}

pub fn parse_protocols(list: &str) -> Result<Vec<Protocol>, Failure> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p: Protocol = name.parse().map_err(|e: Error| Failure::UnknownProtocol(e.to_string()))?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Failure::UnknownProtocol("no protocols given; valid protocols: knn, zeroshot, probe, pck, pca".into()));
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, corpus: Option<&Path>, protocols: &str) -> Outcome {
    let protocols = parse_protocols(protocols)?;
    let (ckpt, corpus) = load_inputs(out, checkpoint, corpus)?;
    let mut teacher_params = None;
    let mut head_index = None;
    if protocols.contains(&Protocol::ZeroShot) {
        let index = match &cfg.eval.zeroshot_head {
            Some(name) => match ckpt.heads.iter().position(|h| &h.name == name) {
                Some(i) => i,
                None => bail!(Config, "checkpoint has no head named {name:?}"),
            },
            None if ckpt.heads.is_empty() => bail!(State, "zero-shot needs a checkpoint with adapter heads"),
            None => 0,
        };
        let name = &ckpt.heads[index].name;
        let params = if name == PROXY {
            let proxy = require(&stage_file(out, StageKind::Stage1, ".ckpt"), "proxy checkpoint", "zero-shot through the proxy needs it")?;
            proxy.encoder
        } else {
            match cfg.teachers.iter().position(|t| &t.name == name) {
                Some(i) => load_teacher(cfg, out, i)?,
                None => bail!(Config, "head {name:?} matches no configured teacher"),
            }
        };
        teacher_params = Some(params);
        head_index = Some(index);
    }
    let zeroshot = match (&teacher_params, head_index) {
        (Some(teacher), Some(i)) => Some(ZeroShotTeacher { teacher, head: &ckpt.heads[i] }),
        _ => None,
    };
    let report = run_protocols(&ckpt.encoder, &corpus, &protocols, &cfg.eval, zeroshot, cfg.seed, &cfg.hash()?)?;
    let dir = out.join("eval");
    report.write(&dir)?;
    print!("{}", report.summary());
    println!("report  {}", dir.join("eval_report.csv").display());
    Ok(())
}

pub fn visualize(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, corpus: Option<&Path>, multi_res: bool) -> Outcome {
    let (ckpt, corpus) = load_inputs(out, checkpoint, corpus)?;
    let encoder = &ckpt.encoder;
    let resolutions = if multi_res {
        cfg.pyramid.clone()
    } else if cfg.visualize.resolutions.is_empty() {
        vec![encoder.config.image_size]
    } else {
        cfg.visualize.resolutions.clone()
    };
    let dir = out.join("vis");
    fs::create_dir_all(&dir).map_err(Error::from)?;
    for (i, sample) in corpus.samples.iter().take(cfg.visualize.images).enumerate() {
        for &res in &resolutions {
            if res % encoder.config.patch_size != 0 {
                bail!(Config, "resolution {res} is not a multiple of the patch size {}", encoder.config.patch_size);
            }
            let image = normalize_input(&resize_image(&sample.image, res)?)?;
            let output = vit_forward(encoder, &image)?;
            let projection = pca_rgb(&output.patch_tokens, output.grid)?;
            let path = dir.join(format!("img{i:03}_{res}.ppm"));
            write_ppm(&path, &projection.image)?;
            let e = projection.explained;
            println!("{} ({}x{}, explained {:.3} {:.3} {:.3})", path.display(), output.grid.1, output.grid.0, e[0], e[1], e[2]);
        }
    }
    Ok(())
}
