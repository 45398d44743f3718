use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kspace::baselines::{generate, BaselineFamily, BaselineSpec};
use kspace::data::{load_image, make_phantom_set, to_kspace, Dataset};
use kspace::formats::{
    grid_kind, read_complex_grid, read_mask, read_probabilities, write_mask, write_mask_pgm,
    read_real_grid, write_pgm, write_probabilities, write_real_grid, COMPLEX_MAGIC, REAL_MAGIC,
};
use kspace::fourier::inverse_2d;
use kspace::pipeline::{
    compare_methods, evaluate, export_probability_profile, format_psnr, psnr, train_with,
    undersampled_image, write_log_csv, MaskMode, MethodArtifact, TrainConfig, TrainOutcome,
    TrainState,
};
use kspace::recnet::{recnet_forward, RecNetParams};
use kspace::sampler::{generate_stable_mask, project_probabilities, write_region_csv};
use kspace::{ProbabilityMatrix, RealImage};

use crate::config::{RunConfig, PROBABILISTIC};
use crate::error::CliError;

pub const MASK_FILE: &str = "mask.txt";
pub const PROB_FILE: &str = "probabilities.txt";
pub const RECNET_FILE: &str = "recnet.bin";
pub const STATE_FILE: &str = "state.bin";
pub const LOG_FILE: &str = "log.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> kspace::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Real grids are read verbatim; other image files are normalized.
fn read_image(path: &Path) -> Result<RealImage, CliError> {
    if grid_kind(path)? == Some(REAL_MAGIC) {
        Ok(read_real_grid(path)?)
    } else {
        Ok(load_image(path)?)
    }
}

pub struct MaskArgs {
    pub family: String,
    pub rate: f64,
    pub size: usize,
    pub seed: u64,
    pub probabilities: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes `mask.txt`, `mask.pgm` and, for the probabilistic family,
/// `regions.csv`.
pub fn cmd_mask(args: &MaskArgs) -> Result<(), CliError> {
    if !(args.rate > 0.0 && args.rate <= 1.0) {
        return Err(CliError::Usage(format!("rate must be in (0, 1], got {}", args.rate)));
    }
    let mask = if args.family == PROBABILISTIC {
        let p = match &args.probabilities {
            Some(path) => read_probabilities(path)?,
            None => ProbabilityMatrix::uniform(args.size, args.size, args.rate)?,
        };
        let mut cfg = TrainConfig::desk(args.rate).constraints();
        cfg.seed = args.seed;
        let p = project_probabilities(&p, &cfg)?;
        let (mask, reports) = generate_stable_mask(&p, &cfg)?;
        create_dir(&args.out)?;
        write_with(&args.out.join("regions.csv"), |w| write_region_csv(&reports, w))?;
        mask
    } else {
        let family: BaselineFamily = args.family.parse()?;
        let mask = generate(&BaselineSpec::new(family, args.size, args.size, args.rate, args.seed))?;
        create_dir(&args.out)?;
        mask
    };
    write_mask(&mask, args.out.join(MASK_FILE))?;
    write_mask_pgm(&mask, args.out.join("mask.pgm"))?;
    println!("{} mask: {} of {} points, rate {:.4}", args.family, mask.count(), mask.bits().len(), mask.rate());
    Ok(())
}

pub struct UndersampleArgs {
    pub input: PathBuf,
    pub mask: PathBuf,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
}

/// Zero-filled reconstruction of an image or a stored k-space grid.
pub fn cmd_undersample(args: &UndersampleArgs) -> Result<(), CliError> {
    let mask = read_mask(&args.mask)?;
    let (kspace, implied_truth) = if grid_kind(&args.input)? == Some(COMPLEX_MAGIC) {
        let k = read_complex_grid(&args.input)?;
        let truth = RealImage::new(inverse_2d(&k).magnitude())?;
        (k, truth)
    } else {
        let img = read_image(&args.input)?;
        (to_kspace(&img), img)
    };
    let truth = match &args.truth {
        Some(p) => read_image(p)?,
        None => implied_truth,
    };
    let x_u = undersampled_image(&kspace, &mask)?;
    let value = psnr(&x_u, &truth, 1.0)?;
    create_dir(&args.out)?;
    write_real_grid(&x_u, args.out.join("undersampled.grd"))?;
    write_pgm(x_u.pixels(), args.out.join("undersampled.pgm"))?;
    println!("psnr_u {} rate {:.4}", format_psnr(value), mask.rate());
    Ok(())
}

fn save_outcome(dir: &Path, out: &TrainOutcome) -> Result<(), CliError> {
    write_probabilities(&out.probabilities, dir.join(PROB_FILE))?;
    write_mask(&out.mask, dir.join(MASK_FILE))?;
    write_mask_pgm(&out.mask, dir.join("mask.pgm"))?;
    out.params.save(dir.join(RECNET_FILE))?;
    write_with(&dir.join(LOG_FILE), |w| write_log_csv(&out.log, w))?;
    if !out.region_reports.is_empty() {
        write_with(&dir.join("regions.csv"), |w| write_region_csv(&out.region_reports, w))?;
        let profile = export_probability_profile(&out.probabilities);
        write_with(&dir.join("profile.csv"), |w| profile.write_csv(w))?;
    }
    Ok(())
}

/// Runs (or resumes) training into `dir`, checkpointing after every epoch.
fn run_training(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mode: MaskMode,
    dir: &Path,
    resume: bool,
) -> Result<TrainOutcome, CliError> {
    create_dir(dir)?;
    let state_path = dir.join(STATE_FILE);
    let state = if resume {
        if !state_path.exists() {
            return Err(CliError::Data(format!("no checkpoint at {}", state_path.display())));
        }
        let s = TrainState::load(&state_path)?;
        log::info!("resuming at epoch {}", s.next_epoch);
        Some(s)
    } else {
        None
    };
    let mut checkpoint = |s: &TrainState| s.save(&state_path);
    match train_with(train, val, cfg, mode, state, &mut checkpoint) {
        Ok(out) => Ok(out),
        Err(e) => {
            if state_path.exists() {
                log::error!("last good checkpoint kept at {}", state_path.display());
            }
            Err(e.into())
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let splits = cfg.datasets()?;
    create_dir(&cfg.out)?;
    cfg.snapshot(&cfg.out)?;
    let out = run_training(&cfg.train, &splits.train, &splits.val, MaskMode::Learned, &cfg.out, resume)?;
    save_outcome(&cfg.out, &out)?;
    if !splits.test.is_empty() {
        let report = evaluate(&splits.test, &out.mask, Some(&out.params), PROBABILISTIC)?;
        write_with(&cfg.out.join("test_eval.csv"), |w| report.write_csv(w))?;
        println!("{}", report.summary());
    }
    Ok(())
}

fn cell_dir(root: &Path, method: &str, rate: f64) -> PathBuf {
    root.join(format!("{method}_r{rate}"))
}

fn load_artifact(dir: &Path) -> Result<Option<MethodArtifact>, CliError> {
    let mask_path = dir.join(MASK_FILE);
    if !mask_path.exists() {
        return Ok(None);
    }
    let mask = read_mask(&mask_path)?;
    let params_path = dir.join(RECNET_FILE);
    let params = if params_path.exists() {
        Some(RecNetParams::load(&params_path)?)
    } else {
        None
    };
    Ok(Some(MethodArtifact { mask, params }))
}

/// Produces the artifact of one comparison cell unless it is already stored.
fn ensure_artifact(cfg: &RunConfig, train: &Dataset, val: &Dataset, method: &str, rate: f64) -> Result<(), CliError> {
    let dir = cell_dir(&cfg.out, method, rate);
    let existing = load_artifact(&dir)?;
    let trained = existing.as_ref().is_some_and(|a| a.params.is_some());
    if trained || (existing.is_some() && !cfg.compare.train_networks) {
        return Ok(());
    }
    let mut tcfg = cfg.train.clone();
    tcfg.target_rate = rate;
    if method == PROBABILISTIC {
        if !cfg.compare.train_networks {
            return Ok(());
        }
        let out = run_training(&tcfg, train, val, MaskMode::Learned, &dir, false)?;
        save_outcome(&dir, &out)?;
        return Ok(());
    }
    let (m, n) = train.dim().expect("non-empty training set");
    let family: BaselineFamily = method.parse()?;
    let mask = generate(&BaselineSpec::new(family, m, n, rate, cfg.seed))?;
    create_dir(&dir)?;
    write_mask(&mask, dir.join(MASK_FILE))?;
    write_mask_pgm(&mask, dir.join("mask.pgm"))?;
    if cfg.compare.train_networks {
        let out = run_training(&tcfg, train, val, MaskMode::Fixed(mask), &dir, false)?;
        save_outcome(&dir, &out)?;
    }
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.datasets()?;
    if splits.test.is_empty() {
        return Err(CliError::Data("comparison needs a non-empty test split".into()));
    }
    create_dir(&cfg.out)?;
    cfg.snapshot(&cfg.out)?;
    for &rate in &cfg.compare.rates {
        for method in &cfg.compare.methods {
            ensure_artifact(cfg, &splits.train, &splits.val, method, rate)?;
        }
    }

    let mut load_error = None;
    let table = compare_methods(&splits.test, &cfg.compare.rates, &cfg.compare.methods, |m, r| {
        match load_artifact(&cell_dir(&cfg.out, m, r)) {
            Ok(a) => a,
            Err(e) => {
                load_error.get_or_insert(e);
                None
            }
        }
    })?;
    if let Some(e) = load_error {
        return Err(e);
    }
    fs::write(cfg.out.join("comparison.csv"), table.to_csv())?;

    let previews = cfg.out.join("previews");
    create_dir(&previews)?;
    let item = &splits.test.items()[0];
    write_pgm(item.image.pixels(), previews.join("original.pgm"))?;
    for &rate in &cfg.compare.rates {
        for method in &cfg.compare.methods {
            let Some(art) = load_artifact(&cell_dir(&cfg.out, method, rate))? else {
                continue;
            };
            let x_u = undersampled_image(&item.kspace, &art.mask)?;
            let shown = match &art.params {
                Some(p) => recnet_forward(&x_u, p)?.0,
                None => x_u,
            };
            write_pgm(shown.pixels(), previews.join(format!("{method}_r{rate}.pgm")))?;
        }
    }
    print!("{}", table.to_csv());
    Ok(())
}

pub struct EvalArgs {
    pub mask: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

/// Either scores one image against a reference, or evaluates a mask (and
/// network) on the configured test split.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    if let Some(image) = &args.image {
        let truth = args
            .truth
            .as_ref()
            .ok_or_else(|| CliError::Usage("--image requires --truth".into()))?;
        let value = psnr(&read_image(image)?, &read_image(truth)?, 1.0)?;
        println!("psnr {}", format_psnr(value));
        return Ok(());
    }
    let mask_path = args
        .mask
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --mask or --image".into()))?;
    let mask = read_mask(mask_path)?;
    let params = args.params.as_ref().map(RecNetParams::load).transpose()?;
    let splits = cfg.datasets()?;
    let report = evaluate(&splits.test, &mask, params.as_ref(), "eval")?;
    create_dir(&cfg.out)?;
    cfg.snapshot(&cfg.out)?;
    write_with(&cfg.out.join("eval.csv"), |w| report.write_csv(w))?;
    println!("{}", report.summary());
    Ok(())
}

pub fn cmd_profile(probabilities: &Path, out: &Path) -> Result<(), CliError> {
    let p = read_probabilities(probabilities)?;
    let profile = export_probability_profile(&p);
    create_dir(out)?;
    write_with(&out.join("profile.csv"), |w| profile.write_csv(w))?;
    write_pgm(p.probs(), out.join("probabilities.pgm"))?;
    Ok(())
}

/// Writes phantoms as real grids with previews and a manifest listing them.
pub fn cmd_phantoms(count: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let set = make_phantom_set(count, size, seed)?;
    create_dir(out)?;
    let mut manifest = String::new();
    for (k, item) in set.items().iter().enumerate() {
        let name = format!("phantom_{k:03}.grd");
        write_real_grid(&item.image, out.join(&name))?;
        write_pgm(item.image.pixels(), out.join(format!("phantom_{k:03}.pgm")))?;
        manifest.push_str(&format!("train {name}\n"));
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {count} phantoms of size {size} to {}", out.display());
    Ok(())
}
