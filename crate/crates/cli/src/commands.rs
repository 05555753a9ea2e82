use std::fs;
use std::path::{Path, PathBuf};

use alden_core::backbone::Backbone;
use alden_core::checkpoint::{self, Checkpoint};
use alden_core::data::{
    denormalize, load_dataset, make_phantom, normalize_hu, read_manifest, read_slice, simulate_low_dose,
    write_pair_manifest, write_slice, write_slice_manifest, DoseSimConfig,
};
use alden_core::evaluation::{comparison_table, evaluate_dataset, MetricReport};
use alden_core::training::{self, AblationPreset, TrainOptions};
use alden_core::Error;

use crate::config::RunConfig;
use crate::{CliError, Common};

pub const PHANTOM_MANIFEST: &str = "manifest.tsv";
pub const PAIR_MANIFEST: &str = "pairs.tsv";
pub const DENOISED_MANIFEST: &str = "denoised.tsv";

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(common.config.as_deref(), &common.overrides)
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Collision(path.to_path_buf()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

pub fn phantom_gen(common: &Common, out: &Path, count: Option<usize>, size: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    let p = &mut cfg.phantom;
    if let Some(c) = count {
        p.count = c;
    }
    if let Some(s) = size {
        p.size = s;
    }
    if let Some(s) = common.seed {
        p.seed = s;
    }
    let manifest = out.join(PHANTOM_MANIFEST);
    refuse_existing(&manifest, common.force)?;
    create_dir(out)?;
    let p = &cfg.phantom;
    let mut entries = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let slice = make_phantom(p.size, p.size, p.num_structures, p.seed.wrapping_add(i as u64))?;
        let name = PathBuf::from(format!("phantom_{i:04}.f32"));
        write_slice(&out.join(&name), &slice)?;
        entries.push((name, format!("phantom_{i:04}")));
    }
    write_slice_manifest(&manifest, entries.iter().map(|(p, id)| (p.as_path(), id.as_str())))?;
    cfg.write_resolved(out)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn simulate(common: &Common, manifest: &Path, out: &Path, dose: Option<f64>) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(d) = dose {
        cfg.dose.dose_fraction = d;
    }
    if let Some(s) = common.seed {
        cfg.dose.seed = s;
    }
    cfg.dose.validate()?;
    let records = read_manifest(manifest)?;
    let pairs = out.join(PAIR_MANIFEST);
    refuse_existing(&pairs, common.force)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let ndct_path = absolute(r.ndct())?;
        let ndct = read_slice(&ndct_path).map_err(Error::in_sample(&r.sample_id))?;
        let sim = DoseSimConfig {
            seed: cfg.dose.seed.wrapping_add(i as u64),
            ..cfg.dose
        };
        let ldct = simulate_low_dose(&ndct, &sim).map_err(Error::in_sample(&r.sample_id))?;
        let name = PathBuf::from(format!("{}_ldct.f32", r.sample_id));
        write_slice(&out.join(&name), &ldct)?;
        entries.push((name, ndct_path, r.sample_id.clone()));
    }
    write_pair_manifest(
        &pairs,
        entries.iter().map(|(l, n, id)| (l.as_path(), n.as_path(), id.as_str())),
    )?;
    cfg.write_resolved(out)?;
    println!("{}", pairs.display());
    Ok(())
}

pub struct TrainArgs {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub ablate: Option<String>,
    pub iterations: Option<u64>,
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = &args.ablate {
        a.parse::<AblationPreset>()?.apply(&mut cfg.train.objective);
    }
    if let Some(m) = &args.manifest {
        cfg.data.train_manifest = Some(m.clone());
    }
    if let Some(n) = args.iterations {
        cfg.train.total_iterations = n;
    }
    cfg.train.validate()?;
    let manifest = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| CliError::Config("no training manifest: pass --manifest or set data.train_manifest".into()))?;
    let final_path = args.out.join(training::FINAL_CHECKPOINT);
    if args.resume.is_none() {
        refuse_existing(&final_path, common.force)?;
    }
    create_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;
    let dataset = load_dataset(&manifest)?;
    let options = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume_from: args.resume.clone(),
    };
    let outcome = training::train(&cfg.train, &dataset, &options)?;
    if let Some((it, last)) = outcome.history.last() {
        log::info!("finished: {}", last.log_line(*it));
    }
    println!("{}", final_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, training::TrainState), CliError> {
    let ck = checkpoint::load(path)?;
    let state = ck.clone().into_state()?;
    Ok((ck, state))
}

pub fn denoise(common: &Common, checkpoint_path: &Path, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let (ck, state) = load_checkpoint(checkpoint_path)?;
    let window = cfg.evaluation.window.unwrap_or(ck.config.window);
    let records = read_manifest(manifest)?;
    let list = out.join(DENOISED_MANIFEST);
    refuse_existing(&list, common.force)?;
    create_dir(out)?;
    let mut paired = Vec::new();
    let mut single = Vec::new();
    for r in &records {
        let ctx = || Error::in_sample(&r.sample_id);
        let slice = read_slice(&r.primary).map_err(ctx())?;
        let (h, w) = slice.dims();
        state.generator.check_input_dims(h, w).map_err(|e| {
            CliError::Core(Error::CheckpointMismatch(format!("sample `{}`: {e}", r.sample_id)))
        })?;
        let x = normalize_hu(&slice, window).map_err(ctx())?;
        let y = state.generator.denoise(std::slice::from_ref(&x)).map_err(ctx())?.remove(0);
        let stem = r
            .primary
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| r.sample_id.clone());
        let name = PathBuf::from(format!("{stem}_denoised.f32"));
        write_slice(&out.join(&name), &denormalize(&y)?)?;
        match &r.reference {
            Some(n) => paired.push((name, absolute(n)?, r.sample_id.clone())),
            None => single.push((name, r.sample_id.clone())),
        }
    }
    if single.is_empty() {
        write_pair_manifest(&list, paired.iter().map(|(l, n, id)| (l.as_path(), n.as_path(), id.as_str())))?;
    } else {
        let all: Vec<(&Path, &str)> = paired
            .iter()
            .map(|(l, _, id)| (l.as_path(), id.as_str()))
            .chain(single.iter().map(|(l, id)| (l.as_path(), id.as_str())))
            .collect();
        write_slice_manifest(&list, all)?;
    }
    cfg.write_resolved(out)?;
    println!("{}", list.display());
    Ok(())
}

pub fn evaluate(
    common: &Common,
    manifest: &Path,
    out: &Path,
    checkpoints: &[PathBuf],
    ablate: &[String],
) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    if !ablate.is_empty() && ablate.len() != checkpoints.len() {
        return Err(CliError::Config(format!(
            "--ablate names {} rows but {} checkpoints were given",
            ablate.len(),
            checkpoints.len()
        )));
    }
    refuse_existing(out, common.force)?;
    let table_path = out.with_extension("txt");
    let dataset = load_dataset(manifest)?;
    let backbone = Backbone::load(&cfg.train.backbone)?;

    let mut reports = Vec::new();
    if checkpoints.is_empty() {
        let window = cfg.evaluation.window.unwrap_or(cfg.train.window);
        reports.push(evaluate_dataset("LDCT", None, &dataset, window, &backbone)?);
    }
    for (i, path) in checkpoints.iter().enumerate() {
        let (ck, state) = load_checkpoint(path)?;
        let o = &ck.config.objective;
        let flags = (o.enable_aad, o.enable_scl);
        let label = match ablate.get(i) {
            Some(name) => {
                let preset: AblationPreset = name.parse()?;
                if preset.flags() != flags {
                    return Err(Error::CheckpointMismatch(format!(
                        "{} was trained with aad={} scl={}, not as preset `{name}`",
                        path.display(),
                        flags.0,
                        flags.1
                    ))
                    .into());
                }
                preset.label().to_string()
            }
            None => AblationPreset::ALL
                .into_iter()
                .find(|p| p.flags() == flags)
                .map(|p| p.label().to_string())
                .expect("every flag pair is a preset"),
        };
        let window = cfg.evaluation.window.unwrap_or(ck.config.window);
        reports.push(evaluate_dataset(&label, Some(&state.generator), &dataset, window, &backbone)?);
    }

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let json: String = reports.iter().map(MetricReport::to_json_lines).collect();
    fs::write(out, json).map_err(|e| CliError::io(out, e))?;
    let mut text: String = reports.iter().map(|r| r.to_table() + "\n").collect();
    let comparison = comparison_table(&reports);
    text.push_str(&comparison);
    fs::write(&table_path, text).map_err(|e| CliError::io(&table_path, e))?;
    print!("{comparison}");
    Ok(())
}
