use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use agcn_core::audio::{load_wav, save_wav};
use agcn_core::config::{load_config, to_kv_string};
use agcn_core::gradcheck::seeded_model_gradcheck;
use agcn_core::graph::check_node_count;
use agcn_core::image::load_pnm;
use agcn_core::input::{clip_features, image_to_input, load_features, standardize};
use agcn_core::overlay::{draw_overlay, spectrogram_image, OverlaySpec};
use agcn_core::synth::{synth_config, synth_samples, SynthItem};
use agcn_core::train::{evaluate, fit};
use agcn_core::{Agcn, AgcnConfig, Modality};
use rayon::prelude::*;

use crate::data::{load_manifest_dataset, load_source, read_config_file, DataSpec, TEST_SEED_OFFSET};
use crate::error::{CliError, CliResult};
use crate::manifest::{format_manifest, read_manifest};
use crate::{EvalArgs, ExtractArgs, GradcheckArgs, SynthArgs, TrainArgs, VisualizeArgs, SEED_ENV};

pub const INDEX_FILE: &str = "index.tsv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let entries = read_manifest(&a.manifest)?;
    let modality = Modality::from(a.modality);
    let config = match &a.config {
        Some(p) => load_config(p)?,
        None => match modality {
            Modality::Audio => AgcnConfig::full_audio(2),
            Modality::Visual => AgcnConfig::full_visual(2),
        },
    };
    if config.modality != modality {
        return Err(CliError::usage(format!(
            "--modality {} does not match the {} config",
            modality.as_str(),
            config.modality.as_str()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let results: Vec<Result<String, String>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let name = format!("{i:05}.agt");
            let t = load_features(&e.path, &config).map_err(|err| err.to_string())?;
            t.save_agt1(a.out.join(&name)).map_err(|err| err.to_string())?;
            Ok(shape_str(t.shape()))
        })
        .collect();
    let mut index = String::from("index\tsource\tlabel\toutput\tstatus\n");
    let mut failed = 0;
    for (i, (e, r)) in entries.iter().zip(&results).enumerate() {
        let label = e.label.map(|l| l.to_string()).unwrap_or_default();
        let (output, status) = match r {
            Ok(shape) => (format!("{i:05}.agt"), format!("ok {shape}")),
            Err(msg) => {
                failed += 1;
                eprintln!("agcn: manifest line {}: {msg}", e.line);
                (String::new(), format!("error: {msg}"))
            }
        };
        let _ = writeln!(index, "{i}\t{}\t{label}\t{output}\t{status}", e.path.display());
    }
    fs::write(a.out.join(INDEX_FILE), index)?;
    if failed > 0 {
        return Err(CliError::failed(format!("{failed} of {} inputs failed", entries.len())));
    }
    println!("extracted {} inputs into {}", entries.len(), a.out.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let modality = Modality::from(a.modality);
    let config = synth_config(modality, a.classes);
    for (split, n, seed) in [("train", a.train_size, a.seed), ("test", a.test_size, a.seed.wrapping_add(TEST_SEED_OFFSET))] {
        let samples = synth_samples(modality, a.classes, n, seed)?;
        let dir = a.out.join(split);
        fs::create_dir_all(&dir)?;
        let rows = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let name = match &s.item {
                    SynthItem::Image(img) => {
                        let name = format!("{i:05}.ppm");
                        img.save_ppm(dir.join(&name))?;
                        name
                    }
                    SynthItem::Clip(clip) => {
                        let name = format!("{i:05}.wav");
                        save_wav(clip, dir.join(&name))?;
                        name
                    }
                };
                Ok((format!("{split}/{name}"), s.label))
            })
            .collect::<agcn_core::Result<Vec<_>>>()?;
        fs::write(a.out.join(format!("{split}.tsv")), format_manifest(&rows))?;
    }
    let cfg_text = format!(
        "{}data.train_manifest = train.tsv\ndata.test_manifest = test.tsv\n",
        to_kv_string(&config)
    );
    fs::write(a.out.join("config.txt"), cfg_text)?;
    println!("wrote {} train and {} test samples to {}", a.train_size, a.test_size, a.out.display());
    Ok(())
}

/// `AGCN_SEED`, when set, replaces `train.seed`.
pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let file = read_config_file(&a.config)?;
    let mut config = file.config.clone();
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    let spec = DataSpec::from_kv(&file.kv, &file.dir)?;
    let train_set = load_source(&spec.train, &config)?;
    let test_set = load_source(&spec.test, &config)?;
    let model = Agcn::new(config)?;
    let mut params = model.init_params()?;
    let epochs = model.config().epochs;
    let report = fit(&model, &mut params, &train_set, &test_set, |e| {
        if !a.quiet {
            eprintln!(
                "epoch {}/{epochs} lr {} loss {:.6} train_acc {:.4} test_acc {:.4}",
                e.epoch + 1,
                e.lr,
                e.loss,
                e.train_acc,
                e.test_acc
            );
        }
    })?;
    model.save_checkpoint(&params, &a.out)?;
    fs::write(a.out.join(METRICS_FILE), report.metrics_csv())?;
    fs::write(a.out.join(CONFUSION_FILE), report.confusion.to_csv())?;
    println!("final test accuracy {}", report.final_test_accuracy);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let (model, params) = Agcn::load_checkpoint(&a.checkpoint)?;
    let test_set = match (&a.config, &a.manifest) {
        (_, Some(m)) => load_manifest_dataset(m, model.config())?,
        (Some(c), None) => {
            let file = read_config_file(c)?;
            load_source(&DataSpec::from_kv(&file.kv, &file.dir)?.test, model.config())?
        }
        (None, None) => return Err(CliError::usage("eval needs --config or --manifest")),
    };
    let result = evaluate(&model, &params, &test_set)?;
    if let Some(p) = &a.confusion {
        fs::write(p, result.confusion.to_csv())?;
    }
    println!("accuracy {}", result.accuracy);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let mut config = match (&a.config, a.tiny) {
        (Some(p), false) => load_config(p)?,
        (None, true) => AgcnConfig::gradcheck_tiny(),
        _ => return Err(CliError::usage("pass exactly one of --tiny and --config")),
    };
    config.seed = a.seed;
    let report = seeded_model_gradcheck(&config, a.epsilon)?;
    let worst = report.worst().ok_or_else(|| CliError::failed("model has no parameters"))?;
    let max = report.max_rel_error();
    println!(
        "max relative error {max:e} ({}[{}]: tape {:e}, central difference {:e})",
        worst.name, worst.worst_index, worst.analytic, worst.numeric
    );
    if max < a.tolerance {
        println!("gradient check passed (< {:e})", a.tolerance);
        Ok(())
    } else {
        Err(CliError::failed(format!("gradient check failed: {max:e} >= {:e}", a.tolerance)))
    }
}

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

pub fn visualize(a: &VisualizeArgs) -> CliResult<()> {
    let spec = OverlaySpec { radius: a.radius, ..OverlaySpec::default() };
    spec.validate()?;
    let (model, params) = Agcn::load_checkpoint(&a.checkpoint)?;
    let config = model.config();
    let k = a.k.unwrap_or(config.k_nodes);
    let (gh, gw) = config.graph_grid();
    check_node_count(k, gh, gw)?;
    let (x, mut canvas) = match config.modality {
        Modality::Visual => {
            if !has_extension(&a.input, &["ppm", "pgm"]) {
                return Err(CliError::usage("visual checkpoints need a .ppm or .pgm input"));
            }
            let img = load_pnm(&a.input)?;
            (image_to_input(&img, config)?, img)
        }
        Modality::Audio => {
            if !has_extension(&a.input, &["wav"]) {
                return Err(CliError::usage("audio checkpoints need a .wav input"));
            }
            let features = clip_features(&load_wav(&a.input)?, config)?;
            let canvas = spectrogram_image(&features)?;
            (standardize(features), canvas)
        }
    };
    let [c, h, w] = config.input_shape();
    let plan = model.scene_plan_with(&params, &x.reshape(&[1, c, h, w])?, k)?;
    let markers = draw_overlay(&mut canvas, &plan, 0, &spec)?;
    canvas.save_ppm(&a.out)?;
    if let Some(p) = &a.graph_json {
        fs::write(p, plan.export_json(0))?;
    }
    println!("drew {markers} node markers to {}", a.out.display());
    Ok(())
}
