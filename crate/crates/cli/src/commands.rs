use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use staged_alae::alae::{sample_normal, Alae};
use staged_alae::autoencoder::Autoencoder;
use staged_alae::checkpoint::MANIFEST_FILE;
use staged_alae::concept_store::{load_concepts, save_concepts};
use staged_alae::concepts::{build_concept, edit_latent, format_table, interpolate, ConceptVector, SplitData};
use staged_alae::config::Config;
use staged_alae::dataset::{
    decode_png, fingerprint, generate_synthetic_dataset, grid_image, load_image, load_manifest, records_in_split,
    save_png, BinaryTask, BinaryTaskView, ImageRecord, ImageSet, Split,
};
use staged_alae::evaluation::{fid_between_image_sets, reconstruction_report, RandomProjectionEmbedder, ReportOptions};
use staged_alae::pipeline::{alae_seed, AeState, AlaeState, PipelineState};
use staged_alae::{Error, Result};

use crate::server::{router, AppState};
use crate::{Command, GlobalArgs};

const ENCODE_BATCH: usize = 32;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))
}

/// `--config` if given, otherwise `fallback`, otherwise defaults; `--seed`
/// overrides the result.
fn resolve_config(global: &GlobalArgs, fallback: Option<&Config>) -> Result<Config> {
    let mut config = match (&global.config, fallback) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(c)) => c.clone(),
        (None, None) => Config::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn require_checkpoint(global: &GlobalArgs) -> Result<&Path> {
    global
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::invalid("--checkpoint is required for this command"))
}

/// Phase 2 model with EMA generation weights, and the checkpoint hash.
fn load_generator(global: &GlobalArgs) -> Result<(Alae<f32>, String, Config)> {
    let (state, hash) = PipelineState::load(require_checkpoint(global)?)?;
    match state {
        PipelineState::Alae(s) => Ok((s.ema_model(), hash, s.run.config)),
        PipelineState::Autoencoder(_) => Err(Error::invalid(
            "checkpoint holds only the phase 1 autoencoder; run train-alae first",
        )),
    }
}

fn load_records(dir: &Path) -> Result<Vec<ImageRecord>> {
    load_manifest(dir, &dir.join("manifest.csv"))
}

/// Images of a dataset directory (with `manifest.csv`) or of every `*.png`
/// directly inside `dir`, in a stable order.
fn image_dir(dir: &Path, resolution: Option<usize>) -> Result<ImageSet> {
    let (ids, paths): (Vec<String>, Vec<PathBuf>) = if dir.join("manifest.csv").is_file() {
        load_records(dir)?.into_iter().map(|r| (r.id, r.image_path)).unzip()
    } else {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
            .unzip()
    };
    let first = paths
        .first()
        .ok_or_else(|| Error::invalid(format!("no images in {}", dir.display())))?;
    let res = match resolution {
        Some(r) => r,
        None => decode_png(&std::fs::read(first).map_err(io_err(first))?)?.width() as usize,
    };
    let mut images = Array4::zeros((paths.len(), res, res, 3));
    for (i, p) in paths.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&load_image(p, res)?);
    }
    Ok(ImageSet { ids, images })
}

fn encode_all(model: &Alae<f32>, set: &ImageSet) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(set.len());
    for batch in set.sequential(ENCODE_BATCH) {
        rows.push(model.encode_e(&batch)?.mapv(f64::from));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

fn encode_image(model: &Alae<f32>, path: &Path) -> Result<Vec<f64>> {
    let x = load_image(path, model.ae.schedule.input_resolution)?.insert_axis(Axis(0));
    Ok(model.encode_e(&x)?.row(0).iter().map(|&v| v as f64).collect())
}

fn render(model: &Alae<f32>, ws: &[Vec<f64>]) -> Result<Array4<f32>> {
    let dim = model.latent_dim();
    let flat: Vec<f32> = ws.iter().flatten().map(|&v| v as f32).collect();
    let w = Array2::from_shape_vec((ws.len(), dim), flat).map_err(|e| Error::shape(e.to_string()))?;
    model.generate_g(&w)
}

fn ensure_same_config(requested: &Config, stored: &Config) -> Result<()> {
    if requested != stored {
        return Err(Error::Config(
            "the checkpoint was trained with a different config or seed; use a new --checkpoint directory".into(),
        ));
    }
    Ok(())
}

pub fn execute(global: &GlobalArgs, command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::SynthData { out: dir, n, resolution } => {
            let config = resolve_config(global, None)?;
            let manifest = generate_synthetic_dataset(
                n,
                resolution.unwrap_or(config.resolution),
                config.seed,
                config.split,
                &dir,
            )?;
            say(out, format!("wrote {n} images and {}", manifest.display()))
        }
        Command::TrainAe { data } => train_ae(global, &data, out),
        Command::TrainAlae { data, out: target } => train_alae(global, &data, target, out),
        Command::EvalFid {
            real,
            fake,
            resolution,
            report,
        } => {
            let config = resolve_config(global, None)?;
            let real = image_dir(&real, resolution)?;
            let res = resolution.unwrap_or(real.resolution());
            let fake = image_dir(&fake, Some(res))?;
            let embedder = RandomProjectionEmbedder::with_seed(config.seed);
            let r = fid_between_image_sets(
                real.sequential(ENCODE_BATCH).map(Ok),
                fake.sequential(ENCODE_BATCH).map(Ok),
                &embedder,
            )?;
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r).expect("report serializes");
                std::fs::write(&path, text).map_err(io_err(&path))?;
            }
            say(out, format!("{:.3}", r.fid))
        }
        Command::EvalRecon { data, report } => {
            let (state, hash) = PipelineState::load(require_checkpoint(global)?)?;
            let config = resolve_config(global, Some(state.config()))?;
            let resolution = state.schedule().input_resolution;
            let records = load_records(&data)?;
            let mut sets = Vec::new();
            for split in Split::ALL {
                let recs = records_in_split(&records, *split);
                if !recs.is_empty() {
                    sets.push((*split, ImageSet::load(&recs, resolution)?));
                }
            }
            let splits: Vec<(Split, &ImageSet)> = sets.iter().map(|(s, set)| (*s, set)).collect();
            let embedder = RandomProjectionEmbedder::with_seed(config.seed);
            let opts = ReportOptions::default();
            let r = match &state {
                PipelineState::Autoencoder(s) => {
                    reconstruction_report(&format!("autoencoder {hash}"), &s.ae, &splits, Some(&embedder), opts)?
                }
                PipelineState::Alae(s) => {
                    reconstruction_report(&format!("alae {hash}"), &s.ema_model(), &splits, Some(&embedder), opts)?
                }
            };
            for s in &r.splits {
                let fid = s.fid.map_or("n/a".to_string(), |f| format!("{f:.3}"));
                say(out, format!("{} n={} mae={:.6} fid={fid}", s.split, s.n, s.mean_mae))?;
            }
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r).expect("report serializes");
                std::fs::write(&path, text).map_err(io_err(&path))?;
            }
            Ok(())
        }
        Command::FitConcepts { data, out: path, table } => {
            let (model, _, stored) = load_generator(global)?;
            let config = resolve_config(global, Some(&stored))?;
            let records = load_records(&data)?;
            let set = ImageSet::load(&records, model.ae.schedule.input_resolution)?;
            let ws = encode_all(&model, &set)?;
            let concepts = fit_concepts(&records, &ws, &config)?;
            save_concepts(&path, &concepts)?;
            let text = format_table(&concepts);
            if let Some(t) = table {
                std::fs::write(&t, &text).map_err(io_err(&t))?;
            }
            write!(out, "{text}").map_err(io_err(Path::new("<stdout>")))
        }
        Command::Edit {
            concepts,
            image,
            concept,
            alpha,
            out: target,
        } => {
            let (model, _, _) = load_generator(global)?;
            let concepts = load_concepts(&concepts)?;
            let c = find_concept(&concepts, &concept)?;
            let w = encode_image(&model, &image)?;
            let edited = edit_latent(&w, c, alpha)?;
            let x = render(&model, std::slice::from_ref(&edited))?;
            save_png(&grid_image(&x), &target)?;
            say(
                out,
                format!("{} logit {:.4} -> {:.4}", c.task, c.logit(&w), c.logit(&edited)),
            )
        }
        Command::Interpolate {
            from,
            to,
            steps,
            mode,
            out: target,
        } => {
            if steps < 2 {
                return Err(Error::invalid("--steps must be >= 2"));
            }
            let mode = mode.parse().map_err(Error::InvalidArgument)?;
            let (model, _, _) = load_generator(global)?;
            let (a, b) = (encode_image(&model, &from)?, encode_image(&model, &to)?);
            let ws = (0..steps)
                .map(|i| interpolate(&a, &b, i as f64 / (steps - 1) as f64, mode))
                .collect::<Result<Vec<_>>>()?;
            save_png(&grid_image(&render(&model, &ws)?), &target)?;
            say(out, format!("wrote {steps} frames to {}", target.display()))
        }
        Command::Sample { n, out: target } => {
            if n < 1 {
                return Err(Error::invalid("--n must be >= 1"));
            }
            let (model, config) = if global.checkpoint.is_some() {
                let (m, _, stored) = load_generator(global)?;
                (m, resolve_config(global, Some(&stored))?)
            } else {
                // an untrained network, mostly useful as a smoke test
                let config = resolve_config(global, None)?;
                let ae = Autoencoder::new(config.schedule()?, config.seed);
                (Alae::from_autoencoder(ae, config.alae.latent_dim, alae_seed(config.seed) ^ 1), config)
            };
            let z = sample_normal::<f32>(n, model.latent_dim(), &mut ChaCha8Rng::seed_from_u64(config.seed));
            let x = model.generate_g(&model.map_f(&z)?)?;
            save_png(&grid_image(&x), &target)?;
            say(out, format!("wrote {n} samples to {}", target.display()))
        }
        Command::Serve {
            concepts,
            host,
            port,
            ui,
        } => {
            let (model, checkpoint, _) = load_generator(global)?;
            let concepts = match concepts {
                Some(p) => load_concepts(&p)?,
                None => Vec::new(),
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::invalid(format!("bad address {host}:{port}: {e}")))?;
            let app = router(
                AppState {
                    model,
                    concepts,
                    checkpoint,
                },
                ui,
            );
            let rt = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await.map_err(io_err(Path::new("<socket>")))?;
                let local = listener.local_addr().map_err(io_err(Path::new("<socket>")))?;
                say(out, format!("listening on http://{local}"))?;
                out.flush().map_err(io_err(Path::new("<stdout>")))?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(io_err(Path::new("<socket>")))
            })
        }
    }
}

fn find_concept<'a>(concepts: &'a [ConceptVector], name: &str) -> Result<&'a ConceptVector> {
    concepts.iter().find(|c| c.task.as_str() == name).ok_or_else(|| {
        let known: Vec<&str> = concepts.iter().map(|c| c.task.as_str()).collect();
        Error::invalid(format!("unknown concept `{name}` (available: {})", known.join(", ")))
    })
}

/// One concept per task, fitted on the train split and scored on every
/// split that has records for the task.
pub fn fit_concepts(records: &[ImageRecord], ws: &Array2<f64>, config: &Config) -> Result<Vec<ConceptVector>> {
    let opts = config.concepts.logistic_options();
    let print = fingerprint(records);
    let mut out = Vec::new();
    for &task in BinaryTask::ALL {
        let view = BinaryTaskView::new(task, records);
        let mut per_split = Vec::new();
        for &split in Split::ALL {
            let (idx, labels): (Vec<usize>, Vec<bool>) =
                view.records.iter().filter(|(i, _)| records[*i].split == split).copied().unzip();
            if !idx.is_empty() {
                per_split.push((split, ws.select(Axis(0), &idx), labels));
            }
        }
        let splits: Vec<SplitData<'_>> = per_split
            .iter()
            .map(|(split, ws, labels)| SplitData {
                split: *split,
                ws,
                labels,
            })
            .collect();
        out.push(build_concept(task, &splits, &opts, print).map_err(|e| match e {
            Error::SingleClass => Error::Training(format!("task {task}: the train split has a single class")),
            other => other,
        })?);
    }
    Ok(out)
}

fn train_ae(global: &GlobalArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = require_checkpoint(global)?;
    let state = if ck.join(MANIFEST_FILE).is_file() {
        match PipelineState::load(ck)?.0 {
            PipelineState::Autoencoder(s) => {
                let config = resolve_config(global, Some(&s.trainer.config))?;
                ensure_same_config(&config, &s.trainer.config)?;
                say(out, format!("resuming from {}", ck.display()))?;
                s
            }
            PipelineState::Alae(_) => return Err(Error::invalid("checkpoint is already in phase 2")),
        }
    } else {
        AeState::new(&resolve_config(global, None)?)?
    };
    let config = state.trainer.config.clone();
    let records = load_records(data)?;
    let train = ImageSet::load(&records_in_split(&records, Split::Train), config.resolution)?;
    if state.trainer.is_done() {
        say(out, "phase 1 already complete")?;
    }
    let mut snapshot = PipelineState::Autoencoder(state);
    let mut hash = None;
    loop {
        let PipelineState::Autoencoder(s) = &mut snapshot else { unreachable!() };
        if s.trainer.is_done() {
            break;
        }
        let log = s.trainer.run_epoch(&mut s.ae, &train)?;
        say(out, &log)?;
        // a checkpoint per epoch keeps interrupted runs resumable
        hash = Some(snapshot.save(ck)?);
    }
    let PipelineState::Autoencoder(state) = &snapshot else { unreachable!() };
    let val = records_in_split(&records, Split::Val);
    if !val.is_empty() {
        let val = ImageSet::load(&val, config.resolution)?;
        let mae = state.ae.evaluate_mae(&val, state.ae.stages(), config.batch_size)?;
        say(out, format!("val mae={mae:.6}"))?;
    }
    let hash = match hash {
        Some(h) => h,
        None => PipelineState::load(ck)?.1,
    };
    say(out, format!("checkpoint {hash}"))
}

fn train_alae(global: &GlobalArgs, data: &Path, target: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let ck = require_checkpoint(global)?;
    let target = target.unwrap_or_else(|| ck.to_path_buf());
    let state = match PipelineState::load(ck)?.0 {
        PipelineState::Autoencoder(ae) => {
            let config = resolve_config(global, Some(&ae.trainer.config))?;
            AlaeState::from_autoencoder(ae, &config)?
        }
        PipelineState::Alae(s) => {
            let config = resolve_config(global, Some(&s.run.config))?;
            ensure_same_config(&config, &s.run.config)?;
            say(out, format!("resuming from {}", ck.display()))?;
            s
        }
    };
    let records = load_records(data)?;
    let train = ImageSet::load(&records_in_split(&records, Split::Train), state.run.config.resolution)?;
    if state.run.is_done() {
        say(out, "phase 2 already complete")?;
    }
    let mut snapshot = PipelineState::Alae(state);
    let mut hash = snapshot.save(&target)?;
    loop {
        let PipelineState::Alae(s) = &mut snapshot else { unreachable!() };
        if s.run.is_done() {
            break;
        }
        let log = s.run.run_epoch(&mut s.model, &train)?;
        say(out, &log)?;
        hash = snapshot.save(&target)?;
    }
    say(out, format!("checkpoint {hash}"))
}
