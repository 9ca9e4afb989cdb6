use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use im2sp::bits::{report, AudioBitsConfig, ImageBitsConfig};
use im2sp::codebook::{load_codebook, save_codebook};
use im2sp::config::KeyValues;
use im2sp::datagen::{gen_corpus, read_manifest, write_corpus, DataGenConfig, TEXT_VOCAB};
use im2sp::features::load_features;
use im2sp::image_units::{encode_image, load_ppm, patchify, GridGeometry, PatchGrid};
use im2sp::metrics::{evaluate, EvalPair};
use im2sp::model::{
    generate, init_random, init_transfer, load_checkpoint, pretrain_text, save_checkpoint, teacher_forced_accuracy,
    trace_to_text, train, Example, ModelConfig, ModelParams, Task, TrainHyper, TrainOutcome,
};
use im2sp::quantizer::{assign, KMeans};
use im2sp::units::{dedup, load_units, save_units};
use im2sp::{Codebook, Error};

use crate::manifest::{is_corpus_manifest, read_unit_manifest, write_unit_manifest, MANIFEST_NAME};
use crate::{CliError, Command, Modality, TrainFlags};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainCodebook(a) => train_codebook(a),
        Command::Encode(a) => encode(a),
        Command::PretrainText(a) => pretrain(a),
        Command::Train(a) => train_units(a),
        Command::Generate(a) => generate_units(a),
        Command::Evaluate(a) => evaluate_units(a),
        Command::BitsReport(a) => bits_report(a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn gen_data(a: crate::GenData) -> Result<()> {
    let cfg = DataGenConfig {
        seed: a.seed,
        n_items: a.n,
        image_size: a.image_size,
        patch: a.patch,
        feature_dim: a.feature_dim,
        noise: a.noise,
    };
    let corpus = gen_corpus(&cfg)?;
    let manifest = write_corpus(&corpus, &a.out)?;
    println!("wrote {} items to {}", corpus.items.len(), manifest.display());
    Ok(())
}

fn train_codebook(a: crate::TrainCodebook) -> Result<()> {
    let entries = read_manifest(&a.input)?;
    let mut pooled = Vec::new();
    let mut dim = None;
    for e in &entries {
        let feats = match a.modality {
            Modality::Speech => load_features(&e.features)?,
            Modality::Image => patchify(&load_ppm(&e.image)?, a.patch)?,
        };
        if feats.is_empty() {
            continue;
        }
        if *dim.get_or_insert(feats.dim()) != feats.dim() {
            return Err(Error::DimensionMismatch { expected: dim.unwrap(), found: feats.dim() }.into());
        }
        pooled.extend_from_slice(feats.as_flat());
    }
    let dim = dim.ok_or_else(|| invalid("no vectors to cluster"))?;
    let fit = KMeans::new(a.k)
        .seed(a.seed)
        .max_iters(a.max_iters)
        .tol(a.tol)
        .restarts(a.restarts)
        .fit(&pooled, dim)?;
    save_codebook(&fit.codebook, &a.out)?;
    println!(
        "k={} dim={} vectors={} inertia={:.6} iterations={}",
        a.k,
        dim,
        pooled.len() / dim,
        fit.inertia,
        fit.iterations
    );
    Ok(())
}

/// Patch side implied by an image codebook's dimension.
fn codebook_patch(cb: &Codebook, channels: usize) -> im2sp::Result<usize> {
    let per = cb.dim() / channels;
    let patch = (per as f64).sqrt().round() as usize;
    if patch == 0 || patch * patch * channels != cb.dim() {
        return Err(Error::DimensionMismatch { expected: patch * patch * channels, found: cb.dim() });
    }
    Ok(patch)
}

fn encode_one(modality: Modality, cb: &Codebook, input: &Path, out: &Path, no_dedup: bool) -> Result<usize> {
    match modality {
        Modality::Speech => {
            let units = assign(cb, &load_features(input)?)?;
            let units = if no_dedup { units } else { dedup(&units) };
            save_units(&units, out)?;
            Ok(units.len())
        }
        Modality::Image => {
            let img = load_ppm(input)?;
            let grid = encode_image(&img, cb, codebook_patch(cb, img.channels())?)?;
            save_units(grid.units(), out)?;
            fs::write(geometry_path(out), grid.geometry().to_text())?;
            Ok(grid.units().len())
        }
    }
}

fn geometry_path(units: &Path) -> PathBuf {
    units.with_extension("geom")
}

fn encode(a: crate::Encode) -> Result<()> {
    let cb = load_codebook(&a.codebook)?;
    if !is_corpus_manifest(&a.input)? {
        let n = encode_one(a.modality, &cb, &a.input, &a.out, a.no_dedup)?;
        println!("wrote {n} units to {}", a.out.display());
        return Ok(());
    }
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    let mut total = 0;
    for e in read_manifest(&a.input)? {
        let name = format!("{}.ucu", e.id);
        let src = match a.modality {
            Modality::Speech => &e.features,
            Modality::Image => &e.image,
        };
        total += encode_one(a.modality, &cb, src, &a.out.join(&name), a.no_dedup)?;
        rows.push((e.id, name));
    }
    write_unit_manifest(&a.out.join(MANIFEST_NAME), &rows)?;
    println!("encoded {} items ({total} units) into {}", rows.len(), a.out.display());
    Ok(())
}

fn load_grid(path: &Path) -> im2sp::Result<PatchGrid> {
    let geometry = GridGeometry::parse(&fs::read_to_string(geometry_path(path))?)?;
    PatchGrid::new(geometry, load_units(path)?)
}

/// Image grids by id, in manifest order, all sharing one geometry.
fn load_grids(manifest: &Path) -> Result<Vec<(String, PatchGrid)>> {
    let mut out: Vec<(String, PatchGrid)> = Vec::new();
    for e in read_unit_manifest(manifest)? {
        let grid = load_grid(&e.paths[0])?;
        if let Some((_, first)) = out.first() {
            if first.geometry() != grid.geometry() || first.codebook_size() != grid.codebook_size() {
                return Err(invalid(format!("image grid {} differs in shape or vocabulary", e.id)).into());
            }
        }
        out.push((e.id, grid));
    }
    if out.is_empty() {
        return Err(invalid(format!("{} lists no images", manifest.display())).into());
    }
    Ok(out)
}

const HYPER_KEYS: [&str; 5] = ["lr", "warmup_steps", "steps", "batch_size", "train_seed"];

fn read_config(flags: &TrainFlags) -> Result<KeyValues> {
    let Some(path) = &flags.config else {
        return Ok(KeyValues::default());
    };
    let kv = KeyValues::parse(&fs::read_to_string(path)?)?;
    let model_keys = ModelConfig::default().to_key_values();
    for key in kv.keys() {
        if model_keys.get(key).is_none() && !HYPER_KEYS.contains(&key) {
            return Err(usage(format!("unknown config key {key:?} in {}", path.display())));
        }
    }
    Ok(kv)
}

/// Config file first, then flags.
fn settings(base: ModelConfig, flags: &TrainFlags) -> Result<(ModelConfig, TrainHyper)> {
    let mut kv = read_config(flags)?;
    if let Some(seed) = flags.seed {
        kv.set("seed", seed);
        kv.set("train_seed", seed);
    }
    if let Some(v) = flags.steps {
        kv.set("steps", v);
    }
    if let Some(v) = flags.lr {
        kv.set("lr", v);
    }
    if let Some(v) = flags.warmup_steps {
        kv.set("warmup_steps", v);
    }
    if let Some(v) = flags.batch_size {
        kv.set("batch_size", v);
    }
    let to_usage = |e: Error| usage(e.to_string());
    let cfg = base.with_overrides(&kv).map_err(to_usage)?;
    let hyper = TrainHyper::default().with_overrides(&kv).map_err(to_usage)?;
    Ok((cfg, hyper))
}

fn with_grid(mut cfg: ModelConfig, grid: &PatchGrid) -> ModelConfig {
    let g = grid.geometry();
    cfg.grid_h = g.grid_h;
    cfg.grid_w = g.grid_w;
    cfg.image_vocab = grid.codebook_size() as usize;
    cfg
}

fn finish_training(out: &TrainOutcome, corpus: &[Example], path: &Path, flags: &TrainFlags) -> Result<()> {
    save_checkpoint(&out.params, path)?;
    if let Some(trace) = &flags.trace {
        fs::write(trace, trace_to_text(&out.trace))?;
    }
    let last = out.trace.last().map_or(f64::NAN, |s| s.loss);
    println!(
        "steps={} final_loss={:.6} train_accuracy={:.6}",
        out.trace.len(),
        last,
        teacher_forced_accuracy(&out.params, corpus)?
    );
    Ok(())
}

fn pretrain(a: crate::PretrainText) -> Result<()> {
    let grids = load_grids(&a.images)?;
    let captions: BTreeMap<String, Vec<u32>> =
        read_manifest(&a.captions)?.into_iter().map(|e| (e.id, e.caption)).collect();
    let corpus = grids
        .iter()
        .map(|(id, grid)| {
            let caption = captions
                .get(id)
                .ok_or_else(|| invalid(format!("no caption for image {id}")))?;
            Ok(Example { grid: grid.units().tokens().to_vec(), target: caption.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let base = ModelConfig { text_vocab: TEXT_VOCAB, ..with_grid(ModelConfig::default(), &grids[0].1) };
    let (cfg, hyper) = settings(base, &a.flags)?;
    let out = pretrain_text(init_random(&cfg, Task::Text)?, &corpus, &hyper)?;
    finish_training(&out, &corpus, &a.out, &a.flags)
}

fn train_units(a: crate::Train) -> Result<()> {
    let grids: BTreeMap<String, PatchGrid> = load_grids(&a.images)?.into_iter().collect();
    let mut corpus = Vec::new();
    let mut vocab = None;
    for e in read_unit_manifest(&a.units)? {
        let units = load_units(&e.paths[0])?;
        if *vocab.get_or_insert(units.vocab_size()) != units.vocab_size() {
            return Err(invalid(format!("unit stream {} has a different vocabulary", e.id)).into());
        }
        let grid = grids
            .get(&e.id)
            .ok_or_else(|| invalid(format!("no image units for {}", e.id)))?;
        corpus.push(Example::new(grid.units(), &units));
    }
    let vocab = vocab.ok_or_else(|| invalid("speech-unit manifest is empty"))?;
    let any_grid = grids.values().next().expect("load_grids rejects empty manifests");

    let pretrained = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let base = match &pretrained {
        Some(p) => p.config.clone(),
        None => with_grid(ModelConfig::default(), any_grid),
    };
    let (cfg, hyper) = settings(ModelConfig { unit_vocab: vocab as usize, ..base }, &a.flags)?;
    let init: ModelParams = match &pretrained {
        Some(p) if p.task != Task::Text => {
            return Err(invalid("transfer needs a text-pretrained checkpoint").into())
        }
        Some(p) => init_transfer(p, &cfg)?,
        None => init_random(&cfg, Task::Units)?,
    };
    let out = train(init, &corpus, &hyper)?;
    finish_training(&out, &corpus, &a.out, &a.flags)
}

fn generate_units(a: crate::Generate) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    if params.task != Task::Units {
        return Err(invalid("generate needs a speech-unit checkpoint").into());
    }
    let max_len = a.max_len.unwrap_or(params.config.max_unit_len);
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    let mut truncated = 0;
    for (id, grid) in load_grids(&a.images)? {
        let g = generate(&params, grid.units().tokens(), max_len, a.beam)?;
        truncated += usize::from(g.truncated);
        let name = format!("{id}.ucu");
        save_units(&g.units, a.out.join(&name))?;
        rows.push((id, name));
    }
    write_unit_manifest(&a.out.join(MANIFEST_NAME), &rows)?;
    println!("generated {} sequences ({truncated} hit the length limit)", rows.len());
    Ok(())
}

fn evaluate_units(a: crate::Evaluate) -> Result<()> {
    let refs: BTreeMap<String, Vec<PathBuf>> =
        read_unit_manifest(&a.ref_manifest)?.into_iter().map(|e| (e.id, e.paths)).collect();
    let load = |p: &Path| -> im2sp::Result<Vec<u32>> { Ok(load_units(p)?.into_tokens()) };
    let mut pairs = Vec::new();
    for e in read_unit_manifest(&a.hyp_manifest)? {
        let ref_paths = refs
            .get(&e.id)
            .ok_or_else(|| invalid(format!("no reference for {}", e.id)))?;
        let references = ref_paths.iter().map(|p| load(p)).collect::<im2sp::Result<Vec<_>>>()?;
        pairs.push(EvalPair::new(load(&e.paths[0])?, references)?);
    }
    let report = evaluate(&pairs)?;
    print!("{report}");
    if let Some(out) = &a.out {
        fs::write(out, report.to_key_values().to_text())?;
    }
    Ok(())
}

fn bits_report(a: crate::BitsReport) -> Result<()> {
    let image = ImageBitsConfig {
        height: a.image_h,
        width: a.image_w,
        channels: a.channels,
        depth: a.image_depth,
        patch: a.patch,
        n_units: a.image_units,
    };
    let audio = AudioBitsConfig {
        duration_s: a.duration,
        sample_rate: a.sample_rate,
        depth: a.audio_depth,
        mel_fps: a.mel_fps,
        mel_dims: a.mel_dims,
        mel_depth: a.mel_depth,
        factor: a.factor,
        n_units: a.speech_units,
    };
    let r = report(&image, &audio, a.dedup_len)?;
    print!("{r}");
    if let Some(out) = &a.out {
        fs::write(out, r.to_key_values().to_text())?;
    }
    Ok(())
}
