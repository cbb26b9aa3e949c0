use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wsiseg::aggregation::ProbMap;
use wsiseg::divergence::{
    optimal_theta0, optimal_theta0_curve, tune_beta1, BetaParams, NoiseSetting,
};
use wsiseg::metrics::{curve_csv, evaluate};
use wsiseg::model;
use wsiseg::pipeline::{map_slide, run_training};
use wsiseg::sampler::PatchDistribution;
use wsiseg::synthwsi::{
    exact_gamma, generate_dataset, load_dataset, save_dataset, Label, SyntheticSlide,
};

use crate::config::ExperimentConfig;
use crate::error::{io_error, CliError};
use crate::svg;
use crate::{InspectArgs, RunArgs, TuneArgs};

pub const CHECKPOINT_FILE: &str = "weights.nwt";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn map_stem(slide_id: usize) -> String {
    format!("slide_{slide_id:04}")
}

fn data_dir(args: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    args.data
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| {
            CliError::new(
                "usage",
                "no dataset: pass --data or set data_dir in the config",
            )
        })
}

fn load_slides(dir: &Path) -> Result<Vec<SyntheticSlide>, CliError> {
    if !dir.join(wsiseg::synthwsi::INDEX_FILE).is_file() {
        return Err(CliError::new(
            "io",
            format!(
                "{} is not a dataset directory (missing index)",
                dir.display()
            ),
        ));
    }
    Ok(load_dataset(dir)?.1)
}

fn load_checkpoint(path: &Path) -> Result<model::Network<f32>, CliError> {
    if !path.is_file() {
        return Err(CliError::new(
            "io",
            format!("checkpoint {} not found", path.display()),
        ));
    }
    Ok(model::load(path)?)
}

/// Exact uniform-sampling label-noise rate of a malign slide.
fn uniform_gamma(slide: &SyntheticSlide, patch_size: usize) -> Result<f64, CliError> {
    let dist = PatchDistribution::uniform(slide.id, slide.height, slide.width);
    Ok(exact_gamma(slide, patch_size, &dist)?)
}

pub fn generate_data(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data"));
    let slides = generate_dataset(&cfg.dataset)?;
    create_dir(&out)?;
    save_dataset(&out, &cfg.dataset, &slides)?;
    cfg.data_dir = Some(out.clone());
    cfg.echo(&out)?;

    let patch = cfg
        .pipeline
        .patch_size
        .min(cfg.dataset.height)
        .min(cfg.dataset.width);
    let mut table = String::from("slide_id,label,lesion_fraction,uniform_gamma\n");
    for s in &slides {
        let gamma = match s.label {
            Label::Malign => uniform_gamma(s, patch)?.to_string(),
            Label::Benign => String::new(),
        };
        let _ = writeln!(
            table,
            "{},{},{},{gamma}",
            s.id,
            s.label.as_str(),
            s.lesion_fraction()
        );
    }
    write(&out.join("summary.csv"), &table)?;
    let benign = slides.iter().filter(|s| s.label == Label::Benign).count();
    println!(
        "slides {} benign {} malign {} patch_size {patch}",
        slides.len(),
        benign,
        slides.len() - benign
    );
    print!("{table}");
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.pipeline.seed = seed;
    }
    if args.deterministic {
        cfg.pipeline.deterministic = true;
    }
    let data = data_dir(args, &cfg)?;
    let slides = load_slides(&data)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    create_dir(&out)?;
    cfg.data_dir = Some(data);
    cfg.echo(&out)?;

    let run = run_training(&slides, &cfg.model, &cfg.pipeline)?;
    model::save(&run.weights, &out.join(CHECKPOINT_FILE))?;
    run.log.write_csv(&out.join("runlog.csv"))?;
    write(&out.join("maplog.csv"), run.log.maps_csv())?;
    let n = run.log.steps.len();
    let tail = n - (n / 10).max(1)..n;
    println!(
        "steps {n} final_loss {:.6} final_quarter_gamma {} max_staleness {} torn_reads {}",
        run.log.mean_loss(tail),
        run.log
            .final_quarter_gamma()
            .map_or_else(|| "nan".to_string(), |g| format!("{g:.4}")),
        run.log.max_staleness(),
        run.log.torn_reads
    );
    Ok(())
}

pub fn map(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let checkpoint = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::new("usage", "map needs --checkpoint"))?;
    let net = load_checkpoint(checkpoint)?;
    let data = data_dir(args, &cfg)?;
    let slides = load_slides(&data)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("maps"));
    create_dir(&out)?;
    cfg.model = net.config.clone();
    cfg.data_dir = Some(data);
    cfg.echo(&out)?;
    for slide in &slides {
        map_slide(&net, slide, cfg.pipeline.map_chunk_size)?.save(&out, &map_stem(slide.id))?;
    }
    println!("maps {} written to {}", slides.len(), out.display());
    Ok(())
}

pub fn eval(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let data = data_dir(args, &cfg)?;
    let slides = load_slides(&data)?;
    let maps: Vec<ProbMap> = match (&args.maps, &args.checkpoint) {
        (Some(dir), _) => slides
            .iter()
            .map(|s| {
                let map = ProbMap::load(dir, &map_stem(s.id))?;
                if map.shape() != (s.height, s.width) {
                    return Err(CliError::new(
                        "format",
                        format!("map of slide {} has shape {:?}", s.id, map.shape()),
                    ));
                }
                Ok(map)
            })
            .collect::<Result<_, _>>()?,
        (None, Some(path)) => {
            let net = load_checkpoint(path)?;
            cfg.model = net.config.clone();
            slides
                .iter()
                .map(|s| map_slide(&net, s, cfg.pipeline.map_chunk_size).map_err(CliError::from))
                .collect::<Result<_, _>>()?
        }
        (None, None) => return Err(CliError::new("usage", "eval needs --maps or --checkpoint")),
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    create_dir(&out)?;
    cfg.data_dir = Some(data);
    cfg.echo(&out)?;

    let report = evaluate(&maps, &slides)?;
    let summary = report.summary_csv();
    write(&out.join("metrics.csv"), &summary)?;
    write(&out.join("slides.csv"), report.slides_csv())?;
    write(&out.join("roc.csv"), curve_csv("fpr", "tpr", &report.roc))?;
    write(
        &out.join("froc.csv"),
        curve_csv("mean_fp_per_slide", "sensitivity", &report.froc.curve),
    )?;
    let roc_title = format!("ROC (AUC {:.3})", report.roc_auc);
    write(
        &out.join("roc.svg"),
        svg::line_chart(
            &roc_title,
            "false positive rate",
            "true positive rate",
            1.0,
            &report.roc,
        ),
    )?;
    let froc_title = format!("FROC (average sensitivity {:.3})", report.froc.average);
    write(
        &out.join("froc.svg"),
        svg::line_chart(
            &froc_title,
            "mean false positives per slide",
            "sensitivity",
            8.0,
            &report.froc.curve,
        ),
    )?;
    print!("{summary}");
    Ok(())
}

pub fn tune_beta(args: &TuneArgs) -> Result<(), CliError> {
    let noise = NoiseSetting::new(args.gamma, args.r)?;
    let beta1 = tune_beta1(args.theta0, args.beta0, &noise)?;
    println!("beta1 {beta1}");
    match BetaParams::new(args.beta0, beta1) {
        Ok(beta) => println!("optimal_theta0 {}", optimal_theta0(&noise, &beta)?),
        Err(_) => println!("optimal_theta0 nan (beta1 outside [0, 1])"),
    }
    // beta1 values whose optimum sits on the boundary have no interior root and are left out
    let mut table = Vec::new();
    for b1 in (0..=20).map(|i| i as f64 / 20.0) {
        match optimal_theta0_curve(&noise, args.beta0, &[b1]) {
            Ok(point) => table.extend(point),
            Err(wsiseg::Error::NoBracket) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let csv = curve_csv("beta1", "optimal_theta0", &table);
    print!("{csv}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("beta_table.csv"), &csv)?;
    }
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    if args.scale == 0 {
        return Err(CliError::new("usage", "--scale must be positive"));
    }
    let slides = load_slides(&args.data)?;
    let slide = slides.get(args.slide).ok_or_else(|| {
        CliError::new(
            "usage",
            format!("slide {} not in dataset of {}", args.slide, slides.len()),
        )
    })?;
    let map = ProbMap::load(&args.maps, &map_stem(slide.id))?;
    if map.shape() != (slide.height, slide.width) {
        return Err(CliError::new(
            "format",
            format!("map shape {:?} does not match the slide", map.shape()),
        ));
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("inspect"));
    create_dir(&out)?;
    let path = out.join(format!("{}_overlay.svg", map_stem(slide.id)));
    write(&path, svg::overlay(slide, &map, args.scale))?;
    println!("{}", path.display());
    Ok(())
}
