//! One function per subcommand.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use reid_annotate::{Service, ServiceConfig};
use reid_core::config::PipelineConfig;
use reid_core::evaluate::{run_protocol, Camera, Dataset, ProtocolResult};
use reid_core::imaging::{extract_grid, load_image_resized, PatchGrid};
use reid_core::pipeline::{build_train_set, score_matrix, Engine, External, MatchMethod, Scoring, Side};
use reid_core::ranklearn::{train, IterationLog, TrainError};
use reid_core::saliency::{calibrate_sigma0, SaliencyMap};
use reid_core::salmatch::ExternalScores;
use reid_core::store::{load_grids, load_model, load_saliency, save_grids, save_model, save_saliency, write_pgm};
use reid_core::synth::{generate, write_dataset, SynthConfig};

use crate::matrix::ScoreMatrix;
use crate::{
    weights, AnnotateServeArgs, CliError, EvalArgs, ExportWeightsArgs, ExtractArgs, MatchArgs, Outcome, SaliencyArgs,
    SynthArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// Methods evaluated when `eval` is given none.
pub const DEFAULT_EVAL_METHODS: [MatchMethod; 4] = [
    MatchMethod::DenseFeats,
    MatchMethod::PatMatch,
    MatchMethod::Sdc,
    MatchMethod::SalMatch,
];

/// Loads `path` (or the defaults) and applies `REID_SEED`.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// The command-line value, else the configured path, else a usage error.
fn pick(arg: &Option<PathBuf>, configured: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("{flag} is required (or set it under [paths] in the config)")))
}

fn load_externals(list: &[(PathBuf, f64)]) -> Result<Vec<External>> {
    list.iter()
        .map(|(path, weight)| {
            Ok(External {
                weight: *weight,
                scores: ExternalScores::read_csv(path)?,
            })
        })
        .collect()
}

fn load_aligned_saliency(path: &Path, grids: &[PatchGrid]) -> Result<Vec<SaliencyMap>> {
    let maps = load_saliency(path)?;
    if maps.len() != grids.len() {
        return Err(reid_core::Error::LengthMismatch {
            expected: grids.len(),
            actual: maps.len(),
        }
        .into());
    }
    for (m, g) in maps.iter().zip(grids) {
        if m.shape() != g.shape() {
            return Err(reid_core::Error::ShapeMismatch {
                left: g.shape(),
                right: m.shape(),
            }
            .into());
        }
    }
    Ok(maps)
}

fn sides<'a>(
    grids: &'a [PatchGrid],
    maps: Option<&'a [SaliencyMap]>,
    keep: impl Fn(&PatchGrid) -> bool,
) -> Vec<Side<'a>> {
    grids
        .iter()
        .enumerate()
        .filter(|(_, g)| keep(g))
        .map(|(i, grid)| Side {
            grid,
            saliency: maps.map(|m| &m[i]),
        })
        .collect()
}

fn on_camera(camera: Camera) -> impl Fn(&PatchGrid) -> bool {
    let name = camera.to_string();
    move |g| g.camera == name
}

pub fn extract(cfg: &PipelineConfig, args: &ExtractArgs) -> Result<Outcome> {
    let manifest = pick(&args.manifest, &cfg.paths.manifest, "--manifest")?;
    let out = pick(&args.out, &cfg.paths.descriptors, "--out")?;
    let dataset = Dataset::load(&manifest)?;
    let ids = dataset.image_ids()?;
    let size = args.resize.or(cfg.paths.image_size).map(|[h, w]| (h, w));
    let results: Vec<_> = dataset
        .entries
        .par_iter()
        .zip(ids)
        .map(|(e, id)| {
            load_image_resized(&e.path, size)
                .and_then(|img| extract_grid(&img, &cfg.grid))
                .map(|g| g.with_meta(id, e.camera.to_string(), Some(e.identity.clone())))
        })
        .collect();
    let mut grids = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (r, e) in results.into_iter().zip(&dataset.entries) {
        match r {
            Ok(g) => grids.push(g),
            Err(err) => {
                failed += 1;
                warn!("failed: {}: {err}", e.path.display());
            }
        }
    }
    if grids.is_empty() && failed > 0 {
        return Err(CliError::Usage(format!("all {failed} images failed")));
    }
    save_grids(&out, &grids)?;
    info!("wrote {} grids to {}", grids.len(), out.display());
    if failed > 0 {
        warn!("{failed} of {} images failed", dataset.entries.len());
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Success)
}

pub fn saliency(cfg: &PipelineConfig, args: &SaliencyArgs) -> Result<Outcome> {
    let descriptors = pick(&args.descriptors, &cfg.paths.descriptors, "--descriptors")?;
    let out = pick(&args.out, &cfg.paths.saliency, "--out")?;
    let grids = load_grids(&descriptors)?;
    let refs = args.refs.as_deref().map(load_grids).transpose()?;
    let mut sal_cfg = cfg.saliency.clone();
    if let Some(m) = args.method {
        sal_cfg.method = m;
    }
    let l = cfg.grid.adjacency_relax;
    let maps = grids
        .par_iter()
        .map(|g| {
            let chosen: Vec<&PatchGrid> = match &refs {
                Some(r) => r.iter().collect(),
                None => grids
                    .iter()
                    .filter(|r| r.camera != g.camera && (g.identity.is_none() || r.identity != g.identity))
                    .collect(),
            };
            reid_core::saliency::saliency_map(g, &chosen, l, &sal_cfg)
        })
        .collect::<reid_core::Result<Vec<_>>>()?;
    let maps = if args.calibrate_sigma0 {
        let sigma0 = calibrate_sigma0(&maps)
            .ok_or_else(|| CliError::Usage("cannot calibrate sigma0: every saliency score is zero".into()))?;
        info!("calibrated sigma0 = {sigma0}; set saliency.sigma0 in the config to reuse it");
        maps.into_iter().map(|m| m.with_sigma0(sigma0)).collect()
    } else {
        maps
    };
    save_saliency(&out, &maps)?;
    if let Some(dir) = &args.pgm_dir {
        std::fs::create_dir_all(dir)?;
        for (m, g) in maps.iter().zip(&grids) {
            let file = BufWriter::new(File::create(dir.join(format!("{}.pgm", g.image_id)))?);
            write_pgm(m.rows, m.cols, &m.prob, file)?;
        }
    }
    info!("wrote {} saliency maps to {}", maps.len(), out.display());
    Ok(Outcome::Success)
}

pub fn match_cmd(cfg: &PipelineConfig, args: &MatchArgs) -> Result<Outcome> {
    let descriptors = pick(&args.descriptors, &cfg.paths.descriptors, "--descriptors")?;
    let grids = load_grids(&descriptors)?;
    let need_sal = args.method.needs_saliency();
    let saliency_path = args.saliency.clone().or_else(|| cfg.paths.saliency.clone());
    let maps = match (&saliency_path, need_sal) {
        (Some(p), true) => Some(load_aligned_saliency(p, &grids)?),
        (None, true) => return Err(CliError::Usage(format!("{} needs --saliency", args.method))),
        _ => None,
    };
    let gallery_store = args.gallery_descriptors.as_deref().map(load_grids).transpose()?;
    let gallery_maps = match (&gallery_store, &args.gallery_saliency, need_sal) {
        (Some(g), Some(p), true) => Some(load_aligned_saliency(p, g)?),
        (Some(_), None, true) => return Err(CliError::Usage(format!("{} needs --gallery-saliency", args.method))),
        _ => None,
    };
    let (probes, gallery) = match &gallery_store {
        Some(g) => (
            sides(&grids, maps.as_deref(), |_| true),
            sides(g, gallery_maps.as_deref(), |_| true),
        ),
        None => (
            sides(&grids, maps.as_deref(), on_camera(Camera::A)),
            sides(&grids, maps.as_deref(), on_camera(Camera::B)),
        ),
    };
    let model = if args.method.needs_model() {
        let path = args
            .model
            .clone()
            .or_else(|| cfg.paths.model.clone())
            .ok_or_else(|| CliError::Usage(format!("{} needs --model", args.method)))?;
        Some(load_model(&path)?)
    } else {
        None
    };
    let externals = load_externals(&args.externals)?;
    let scoring = Scoring {
        method: args.method,
        kernel: &cfg.kernel,
        l: cfg.grid.adjacency_relax,
        fusion: &cfg.fusion,
        model: model.as_ref(),
        externals: &externals,
    };
    let values = score_matrix(&probes, &gallery, &scoring)?;
    let ids = |s: &[Side<'_>]| s.iter().map(|s| s.grid.image_id.clone()).collect();
    let matrix = ScoreMatrix::new(ids(&probes), ids(&gallery), values)?;
    matrix.write_csv(BufWriter::new(File::create(&args.out)?))?;
    info!(
        "wrote {}x{} scores to {}",
        probes.len(),
        gallery.len(),
        args.out.display()
    );
    Ok(Outcome::Success)
}

pub fn train_cmd(cfg: &PipelineConfig, args: &TrainArgs) -> Result<Outcome> {
    let descriptors = pick(&args.descriptors, &cfg.paths.descriptors, "--descriptors")?;
    let saliency = pick(&args.saliency, &cfg.paths.saliency, "--saliency")?;
    let out = pick(&args.out, &cfg.paths.model, "--out")?;
    let grids = load_grids(&descriptors)?;
    let maps = load_aligned_saliency(&saliency, &grids)?;
    let probes = sides(&grids, Some(&maps), on_camera(Camera::A));
    let gallery = sides(&grids, Some(&maps), on_camera(Camera::B));
    let ts = build_train_set(&probes, &gallery, &cfg.kernel, cfg.grid.adjacency_relax)?;
    info!("training on {} probes", ts.probes.len());
    let (trained, outcome) = match train(&ts, &cfg.train) {
        Ok(t) => (t, Outcome::Success),
        Err(TrainError::Invalid(e)) => return Err(e.into()),
        Err(e @ TrainError::NotConverged { .. }) => {
            warn!("{e}; saving the last model");
            (
                e.into_trained().expect("not-converged carries a model"),
                Outcome::Partial,
            )
        }
    };
    save_model(&out, &trained.model)?;
    if let Some(log) = &args.log {
        IterationLog::write_csv(&trained.log, BufWriter::new(File::create(log)?))?;
    }
    info!(
        "wrote model to {} after {} iterations",
        out.display(),
        trained.log.len()
    );
    Ok(outcome)
}

/// Reorders `grids` to follow the dataset entries, matching by image id.
fn align_grids(dataset: &Dataset, grids: Vec<PatchGrid>) -> Result<Vec<PatchGrid>> {
    let mut by_id: HashMap<String, PatchGrid> = grids.into_iter().map(|g| (g.image_id.clone(), g)).collect();
    dataset
        .image_ids()?
        .into_iter()
        .map(|id| {
            by_id
                .remove(&id)
                .ok_or_else(|| CliError::Usage(format!("descriptor store has no grid for image {id}")))
        })
        .collect()
}

fn write_result(dir: &Path, name: &str, res: &ProtocolResult) -> Result<()> {
    res.write_csv(BufWriter::new(File::create(dir.join(format!("cmc_{name}.csv")))?))?;
    let at = |k: usize| if k <= res.mean.len() { res.mean.at(k) } else { 1.0 };
    info!(
        "{name}: rank-1 {:.3}  rank-5 {:.3}  rank-10 {:.3}  rank-20 {:.3}",
        at(1),
        at(5),
        at(10),
        at(20)
    );
    Ok(())
}

pub fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<Outcome> {
    let manifest = pick(&args.manifest, &cfg.paths.manifest, "--manifest")?;
    let out_dir = pick(&args.out_dir, &cfg.paths.output_dir, "--out-dir")?;
    let dataset = Dataset::load(&manifest)?;
    std::fs::create_dir_all(&out_dir)?;
    // the effective configuration, seed included, travels with the results
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    if let Some(path) = &args.scores {
        let matrix = ScoreMatrix::read_csv(File::open(path)?)?;
        let res = run_protocol(&dataset, &matrix.scorer(), &cfg.trial)?;
        write_result(&out_dir, "scores", &res)?;
        return Ok(Outcome::Success);
    }
    let descriptors = pick(&args.descriptors, &cfg.paths.descriptors, "--descriptors")?;
    let grids = align_grids(&dataset, load_grids(&descriptors)?)?;
    let methods = if args.method.is_empty() {
        DEFAULT_EVAL_METHODS.to_vec()
    } else {
        args.method.clone()
    };
    let mut engine = Engine::new(&dataset, &grids, cfg)?.with_externals(load_externals(&args.externals)?);
    if methods.iter().filter(|m| **m != MatchMethod::DenseFeats).count() > 1 {
        engine = engine.with_cache()?;
    }
    for m in methods {
        let res = run_protocol(&dataset, &engine.scorer(m), &cfg.trial)?;
        write_result(&out_dir, m.name(), &res)?;
    }
    Ok(Outcome::Success)
}

pub fn export_weights(cfg: &PipelineConfig, args: &ExportWeightsArgs) -> Result<Outcome> {
    let model_path = pick(&args.model, &cfg.paths.model, "--model")?;
    let out_dir = pick(&args.out_dir, &cfg.paths.output_dir, "--out-dir")?;
    let model = load_model(&model_path)?;
    weights::export(&model, &out_dir, args.normalize)?;
    info!(
        "wrote 8 {}x{} weight lattices to {}",
        model.rows,
        model.cols,
        out_dir.display()
    );
    Ok(Outcome::Success)
}

pub fn annotate_serve(cfg: &PipelineConfig, args: &AnnotateServeArgs) -> Result<Outcome> {
    let service = Service::open(
        &args.data_dir,
        ServiceConfig {
            seed: cfg.trial.seed,
            annotation: cfg.annotation.clone(),
        },
    )?;
    let addr = std::net::SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    info!("serving annotations from {} on http://{addr}", args.data_dir.display());
    runtime.block_on(reid_annotate::serve(Arc::new(service), addr))?;
    Ok(Outcome::Success)
}

pub fn synth(args: &SynthArgs) -> Result<Outcome> {
    let cfg = SynthConfig {
        identities: args.identities,
        seed: args.seed,
        ..Default::default()
    };
    let mut dataset = write_dataset(&generate(&cfg), &args.out.join("images"))?;
    for e in &mut dataset.entries {
        if let Ok(rel) = e.path.strip_prefix(&args.out) {
            e.path = rel.to_path_buf();
        }
    }
    dataset.write_manifest(BufWriter::new(File::create(args.out.join("manifest.csv"))?))?;
    info!("wrote {} images to {}", dataset.entries.len(), args.out.display());
    Ok(Outcome::Success)
}
