use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facevis::annotation::{write_atomic, Annotation};
use facevis::camera::{project_landmarks, CameraMatrix, ParamVector};
use facevis::dataset::{generate_synthetic_dataset, DatasetConfig, Sample};
use facevis::fit::{fit_landmarks, jitter_bbox, FitOptions};
use facevis::gradcheck::{random_params, run_all, GradcheckOptions};
use facevis::loss::{mape, nme};
use facevis::model::{generate_synthetic_model, load_model, save_model, ShapeModel, ShapeParams, SynthConfig};
use facevis::nn::train::{image_batch, initial_params, write_metrics_csv};
use facevis::nn::{evaluate, load_checkpoint, save_checkpoint, train_toy, Checkpoint, ForwardMode};
use facevis::render::{rasterize_forward, write_image, RasterConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelSection};
use crate::{EvalArgs, FitArgs, GenDataArgs, GenModelArgs, GradcheckArgs, ModelArgs, RenderArgs, TrainArgs};

fn load_model_arg(args: &ModelArgs) -> Result<ShapeModel> {
    match &args.model {
        Some(path) => load_model(path).with_context(|| format!("loading model {}", path.display())),
        None => Ok(generate_synthetic_model(&SynthConfig::default())?),
    }
}

fn model_from(args: &ModelArgs, section: &ModelSection) -> Result<ShapeModel> {
    match &args.model {
        Some(_) => load_model_arg(args),
        None => section.load(),
    }
}

/// A single file, or every `.json` file in a directory in name order.
fn annotation_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            bail!("{} does not exist", input.display());
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .json annotations in {}", input.display());
    }
    Ok(files)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn gen_model(args: GenModelArgs) -> Result<()> {
    let model = generate_synthetic_model(&SynthConfig {
        seed: args.seed,
        vertices: args.vertices as usize,
        n_id: args.id_bases,
        n_exp: args.exp_bases,
    })?;
    save_model(&model, &args.out)?;
    println!(
        "wrote {}: {} vertices, {} identity and {} expression bases, {} landmarks",
        args.out.display(),
        model.q(),
        model.n_id(),
        model.n_exp(),
        model.n_landmarks()
    );
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let model = load_model_arg(&args.model)?;
    let data = generate_synthetic_dataset(
        &model,
        &DatasetConfig {
            seed: args.seed,
            count: args.count,
            image_size: args.size,
            max_yaw_deg: args.max_yaw,
            ..Default::default()
        },
    )?;
    create_dir(&args.out_dir)?;
    for (i, s) in data.iter().enumerate() {
        let image = format!("face_{i:04}.{}", args.format);
        write_image(&args.out_dir.join(&image), &s.image, s.image_size, s.image_size)?;
        let mut ann = Annotation::new(s.bbox, &s.landmarks, Some(s.params.clone()));
        ann.image = Some(image);
        ann.save(args.out_dir.join(format!("face_{i:04}.json")))?;
    }
    println!("wrote {} faces to {}", data.len(), args.out_dir.display());
    Ok(())
}

/// Frontal mean face filling 60% of the image width, centred.
fn frontal_params(model: &ShapeModel, size: usize) -> ParamVector {
    let xs = model.mean_shape().row(0);
    let scale = 0.6 * size as f64 / (xs.max() - xs.min());
    let c = model.mean_shape().column_mean();
    let mid = (size as f64 - 1.0) / 2.0;
    ParamVector::new(
        CameraMatrix::frontal(scale, mid - scale * c.x, mid - scale * c.y),
        ShapeParams::zeros(model.n_id(), model.n_exp()),
    )
}

fn parse_params(model: &ShapeModel, text: &str) -> Result<ParamVector> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("--params: bad number {v:?}")))
        .collect::<Result<Vec<_>>>()?;
    ParamVector::from_slice(model.n_id(), model.n_exp(), &values).context("--params")
}

pub fn render(args: RenderArgs) -> Result<()> {
    let model = load_model_arg(&args.model)?;
    let params = if let Some(path) = &args.annotation {
        let ann = Annotation::load(path)?;
        match ann.params {
            Some(p) => p,
            None => bail!("annotation {} has no params", path.display()),
        }
    } else if let Some(text) = &args.params {
        parse_params(&model, text)?
    } else if args.random {
        random_params(&model, args.size, &mut ChaCha8Rng::seed_from_u64(args.seed))
    } else {
        frontal_params(&model, args.size)
    };
    let cfg = RasterConfig {
        width: args.size,
        height: args.size,
        sigma: args.sigma,
        support_radius: args.radius,
        background_value: 0.0,
        mask: args.mask,
    };
    let out = rasterize_forward(&model, &params, &cfg)?;
    let visible = out.visible().iter().filter(|v| **v).count();
    let range = write_image(&args.out, out.image(), args.size, args.size)?;
    println!(
        "wrote {} ({}x{}, mask {}, {visible} visible vertices, range [{:.4}, {:.4}])",
        args.out.display(),
        args.size,
        args.size,
        args.mask,
        range.min,
        range.max
    );
    Ok(())
}

/// Prints every category; returns whether all passed.
pub fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let reports = run_all(&GradcheckOptions {
        seed: args.seed,
        trials: args.trials,
        network_weights: args.network_weights,
    })?;
    for r in &reports {
        println!("{r} (redrawn {})", r.redrawn);
    }
    let passed = reports.iter().all(|r| r.passed());
    println!("{}", if passed { "all categories passed" } else { "gradient check FAILED" });
    Ok(passed)
}

pub fn fit(args: FitArgs) -> Result<()> {
    let model = load_model_arg(&args.model)?;
    let defaults = FitOptions::default();
    let opts = FitOptions {
        tol: args.tol.unwrap_or(defaults.tol),
        max_iters: args.max_iters.unwrap_or(defaults.max_iters),
        tikhonov: args.tikhonov.unwrap_or(defaults.tikhonov),
    };
    let files = annotation_files(&args.input)?;
    create_dir(&args.out_dir)?;
    let mut csv = String::from("file,nme,loss,iterations\n");
    let mut nmes = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let ann = Annotation::load(path)?;
        let target = ann.landmark_set()?;
        let result = fit_landmarks(&model, &target, &ann.bbox, &opts)
            .with_context(|| format!("fitting {}", path.display()))?;
        let name = file_name(path);
        let fitted = Annotation {
            params: Some(result.params.clone()),
            ..ann.clone()
        };
        fitted.save(args.out_dir.join(&name))?;
        if args.jitter > 0 {
            let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let boxes = jitter_bbox(&ann.bbox, args.seed.wrapping_add(i as u64), args.jitter)?;
            for (k, bbox) in boxes.into_iter().enumerate() {
                let variant = Annotation { bbox, ..fitted.clone() };
                variant.save(args.out_dir.join(format!("{stem}_j{k:02}.json")))?;
            }
        }
        writeln!(csv, "{name},{},{},{}", result.nme, result.loss, result.iterations)?;
        nmes.push(result.nme);
    }
    if let Some(path) = &args.csv {
        write_text(path, &csv)?;
    }
    let mean = nmes.iter().sum::<f64>() / nmes.len() as f64;
    let max = nmes.iter().copied().fold(0.0, f64::max);
    println!("fitted {} faces: mean nme {mean:.4}%, max nme {max:.4}%", nmes.len());
    Ok(())
}

fn dump_visualizations(
    dir: &Path,
    net: &facevis::nn::Network,
    model: &ShapeModel,
    sample: &Sample,
) -> Result<()> {
    create_dir(dir)?;
    let images = image_batch(&[sample])?;
    let p0 = initial_params(model, std::slice::from_ref(sample))?;
    let out = net.forward::<ChaCha8Rng>(model, &images, &p0, ForwardMode::Eval)?;
    let size = sample.image_size;
    write_image(&dir.join("input.png"), &sample.image, size, size)?;
    for (b, vis) in out.visualizations.iter().enumerate() {
        let side = net.config.raster(b).width;
        write_image(&dir.join(format!("block{}.png", b + 1)), &vis[0], side, side)?;
    }
    let last = &out.params[out.params.len() - 1][0];
    let fin = rasterize_forward(model, last, &net.config.raster(0))?;
    write_image(&dir.join("final.png"), fin.image(), size, size)?;
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = Config::load_or_default(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.training.epochs = v;
    }
    if let Some(v) = args.blocks {
        cfg.network.n_blocks = v;
    }
    if let Some(v) = args.vis_size {
        cfg.network.vis_size = v;
    }
    if let Some(v) = args.mask {
        cfg.network.mask = v;
    }
    if let Some(v) = args.variant {
        cfg.network.variant = v;
    }
    if let Some(v) = args.count {
        cfg.dataset.count = v;
    }
    if let Some(v) = args.validation {
        cfg.validation_count = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.training.learning_rate = v;
    }
    if args.detach_param_path {
        cfg.training.detach_param_path = true;
    }
    cfg.apply_seed(args.seed);
    cfg.validate()?;

    let model = model_from(&args.model, &cfg.model)?;
    let blocks = cfg.network.block_config(model.param_dim())?;
    let n_train = cfg.dataset.count;
    let data = generate_synthetic_dataset(
        &model,
        &DatasetConfig {
            count: n_train + cfg.validation_count,
            image_size: blocks.image_size(),
            ..cfg.dataset.clone()
        },
    )
    .context("invalid [dataset] section")?;
    let (train, val) = data.split_at(n_train);
    let report = train_toy(&model, train, val, blocks, &cfg.training)?;

    save_checkpoint(&args.out, &Checkpoint::new(report.network.clone(), Some(report.loss_weights.clone())))?;
    if let Some(path) = &args.metrics {
        write_metrics_csv(path, &report.history)?;
    }
    if let Some(dir) = &args.dump_dir {
        dump_visualizations(dir, &report.network, &model, &val[0])?;
    }
    let (t, v) = (&report.final_train, &report.final_val);
    println!("block 0 (initial): train nme {:.3}%, val nme {:.3}%", t.init_nme, v.init_nme);
    for b in 0..v.nme.len() {
        println!("block {}: train nme {:.3}%, val nme {:.3}%", b + 1, t.nme[b], v.nme[b]);
    }
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = Config::load_or_default(args.config.as_deref())?;
    cfg.apply_seed(args.seed);
    let model = model_from(&args.model, &cfg.model)?;
    if let Some(input) = &args.data {
        let mut csv = String::from("file,nme,mape\n");
        let (mut total_nme, mut total_mape) = (0.0, 0.0);
        let files = annotation_files(input)?;
        for path in &files {
            let ann = Annotation::load(path)?;
            let Some(params) = &ann.params else {
                bail!("annotation {} has no params", path.display());
            };
            let truth = ann.landmark_set()?;
            let est = project_landmarks(&model, params)
                .with_context(|| format!("projecting {}", path.display()))?;
            let (n, m) = (nme(&est, &truth, &ann.bbox)?, mape(&est, &truth)?);
            writeln!(csv, "{},{n},{m}", file_name(path))?;
            total_nme += n;
            total_mape += m;
        }
        let count = files.len() as f64;
        println!("faces: {}", files.len());
        println!("nme: {:.6}", total_nme / count);
        println!("mape: {:.6}", total_mape / count);
        if let Some(path) = &args.csv {
            write_text(path, &csv)?;
        }
        return Ok(());
    }
    let path = args.checkpoint.as_ref().expect("clap requires --checkpoint without --data");
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let net = ckpt.network;
    net.check_model(&model).context("checkpoint does not match the model")?;
    let data = generate_synthetic_dataset(
        &model,
        &DatasetConfig {
            count: args.count,
            image_size: net.config.image_size(),
            ..cfg.dataset.clone()
        },
    )
    .context("invalid [dataset] section")?;
    let ev = evaluate(&net, &model, &data, args.batch)?;
    let mut csv = String::from("block,nme,mape\n");
    println!("block 0 (initial): nme {:.4}%, mape {:.4} px", ev.init_nme, ev.init_mape);
    writeln!(csv, "0,{},{}", ev.init_nme, ev.init_mape)?;
    for (b, (n, m)) in ev.nme.iter().zip(&ev.mape).enumerate() {
        println!("block {}: nme {n:.4}%, mape {m:.4} px", b + 1);
        writeln!(csv, "{},{n},{m}", b + 1)?;
    }
    if let Some(path) = &args.csv {
        write_text(path, &csv)?;
    }
    Ok(())
}
