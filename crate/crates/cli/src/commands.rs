use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bsdn_core::blindspot::{self, BlindSpotReport, NetworkConfig};
use bsdn_core::checkpoint::{load_float_image, save_float_image};
use bsdn_core::evaluation::{corruption_draw, default_mode, eval_dataset};
use bsdn_core::noise;
use bsdn_core::training::LOG_HEADER;
use bsdn_core::{
    synth, Checkpoint, Image, Knownness, Mode, NoiseKind, NoiseSpec, ParamRange, TrainConfig,
    WeightSet,
};

use crate::config::load_run_config;
use crate::{CliError, NoiseArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_arg<T: std::str::FromStr<Err = bsdn_core::Error>>(v: &str) -> Result<T, CliError> {
    v.parse().map_err(|e: bsdn_core::Error| usage(e.to_string()))
}

impl NoiseArgs {
    fn range(&self) -> Result<Option<ParamRange>, CliError> {
        match (&self.param, &self.param_range) {
            (Some(v), _) => Ok(Some(ParamRange::Fixed(*v))),
            (None, Some(r)) => {
                if !r.contains(':') {
                    return Err(usage(format!("--param-range needs LOW:HIGH, got '{r}'")));
                }
                parse_arg(r).map(Some)
            }
            (None, None) => Ok(None),
        }
    }

    fn spec(&self, knownness: Knownness) -> Result<NoiseSpec, CliError> {
        let kind: NoiseKind = parse_arg(self.noise.as_deref().ok_or_else(|| usage("--noise is required"))?)?;
        let range = self
            .range()?
            .ok_or_else(|| usage("--param or --param-range is required"))?;
        NoiseSpec::new(kind, range, knownness).map_err(|e| usage(e.to_string()))
    }
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn is_float(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "bsdn")
}

/// A single file, or the sorted regular files of a directory.
fn list_inputs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Clean PNGs of a directory with their ids; other files are skipped with a warning.
fn load_pngs(path: &Path) -> Result<Vec<(String, Image)>, CliError> {
    let mut out = Vec::new();
    for f in list_inputs(path)? {
        if !is_png(&f) {
            eprintln!("warning: skipping non-PNG file {}", f.display());
            continue;
        }
        out.push((stem(&f), Image::load_png(&f)?));
    }
    if out.is_empty() {
        return Err(CliError::Failed(format!("no PNG images in {}", path.display())));
    }
    Ok(out)
}

pub fn corrupt(
    noise: &NoiseArgs,
    input: &Path,
    out: &Path,
    seed: u64,
    replicates: usize,
    format: &str,
) -> Result<(), CliError> {
    let png = match format {
        "png" => true,
        "float" => false,
        other => return Err(usage(format!("--format must be float or png, got '{other}'"))),
    };
    let spec = noise.spec(Knownness::Known)?;
    let images = load_pngs(input)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = String::from("file\tsource\treplicate\tseed\tnoise\tparam\n");
    for (id, img) in &images {
        for rep in 0..replicates {
            let (noise_seed, value) = corruption_draw(&spec, seed, id, rep);
            let noisy = noise::corrupt(img, spec.kind, value, noise_seed)?;
            let name = format!("{id}_r{rep}.{}", if png { "png" } else { "bsdn" });
            let path = out.join(&name);
            if png {
                noisy.save_png(&path)?;
            } else {
                let meta = vec![
                    ("source".to_string(), id.clone()),
                    ("replicate".to_string(), rep.to_string()),
                    ("seed".to_string(), noise_seed.to_string()),
                    ("noise".to_string(), spec.kind.to_string()),
                    ("param".to_string(), format!("{value:?}")),
                ];
                save_float_image(&noisy, meta, &path)?;
            }
            let _ = writeln!(manifest, "{name}\t{id}\t{rep}\t{noise_seed}\t{}\t{value:?}", spec.kind);
        }
    }
    let mpath = out.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    println!("wrote {} images to {}", images.len() * replicates, out.display());
    Ok(())
}

pub struct TrainArgs {
    pub method: Option<String>,
    pub noise: NoiseArgs,
    pub knownness: Option<String>,
    pub data: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub val: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = TrainConfig::default();
    let mut settings: Vec<(String, String)> = match &args.config {
        Some(p) => load_run_config(p)?,
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            settings.push((k.to_string(), v));
        }
    };
    flag("method", args.method.clone());
    flag("noise", args.noise.noise.clone());
    flag("knownness", args.knownness.clone());
    flag("noise_param", args.noise.range()?.map(|r| r.to_string()));
    flag("steps", args.steps.map(|v| v.to_string()));
    flag("seed", args.seed.map(|v| v.to_string()));
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        if !TrainConfig::KEYS.contains(&k.trim()) {
            return Err(usage(format!("unknown configuration key '{}'", k.trim())));
        }
        settings.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in &settings {
        cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let data: Vec<Image> = match (&args.data, args.synthetic) {
        (_, Some(n)) => synth::toy_dataset(n, 3, 128, 128, cfg.seed ^ 0x5EED)?,
        (Some(d), None) => load_pngs(d)?.into_iter().map(|(_, i)| i).collect(),
        (None, None) => return Err(usage("--data or --synthetic is required")),
    };
    let val: Vec<Image> = match &args.val {
        Some(d) => load_pngs(d)?.into_iter().map(|(_, i)| i).collect(),
        None => Vec::new(),
    };

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.tsv", args.out.display())));
    let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
    let mut log_err = None;
    let outcome = bsdn_core::train(&cfg, &data, &val, &mut |row| {
        if let Err(e) = writeln!(log, "{}", row.to_tsv()) {
            log_err.get_or_insert(e);
        }
        eprintln!("{}", row.to_tsv());
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path, e));
    }
    outcome.checkpoint.save(&args.out)?;
    println!(
        "trained {} for {} steps; checkpoint {}",
        cfg.method,
        outcome.steps,
        args.out.display()
    );
    if outcome.projected > 0 {
        println!("{} pixels needed covariance projection", outcome.projected);
    }
    Ok(())
}

pub fn denoise(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    mode: Option<&str>,
    param: Option<f64>,
    weights: &str,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(ckpt)?;
    let set: WeightSet = parse_arg(weights)?;
    let den = ck.weights(set)?;
    let mode = match mode {
        Some(m) => parse_arg::<Mode>(m)?,
        None => default_mode(den),
    };
    if param.is_some() && den.learns_noise() {
        return Err(usage(
            "--param given, but this checkpoint learned its noise parameter; drop --param",
        ));
    }
    let single = input.is_file();
    let files = list_inputs(input)?;
    if !single {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    let mut written = 0;
    for f in files {
        let (noisy, stored_param) = if is_png(&f) {
            (Image::load_png(&f)?, None)
        } else if is_float(&f) {
            let (img, meta) = load_float_image(&f)?;
            let p = meta
                .iter()
                .find(|(k, _)| k == "param")
                .and_then(|(_, v)| v.parse::<f64>().ok());
            (img, p)
        } else {
            eprintln!("warning: skipping {} (not a PNG or float image)", f.display());
            continue;
        };
        let supplied = if den.learns_noise() || mode == Mode::Prior {
            None
        } else {
            param.or(match den.noise.range {
                ParamRange::Fixed(_) => None,
                ParamRange::Uniform { .. } => stored_param,
            })
        };
        let result = bsdn_core::denoise(den, &noisy, mode, supplied)?;
        let dst = if single && !out.is_dir() {
            out.to_path_buf()
        } else {
            out.join(format!("{}.png", stem(&f)))
        };
        result.image().save_png(&dst)?;
        written += 1;
    }
    println!("denoised {written} images");
    Ok(())
}

pub fn eval(
    ckpts: &[PathBuf],
    clean: &Path,
    noise: &NoiseArgs,
    replicates: usize,
    seed: u64,
    report: &Path,
    weights: &str,
) -> Result<(), CliError> {
    if replicates == 0 {
        return Err(usage("--replicates must be at least 1"));
    }
    let set: WeightSet = parse_arg(weights)?;
    let loaded: Vec<Checkpoint> = ckpts.iter().map(|p| Checkpoint::load(p)).collect::<Result<_, _>>()?;
    let mut names: Vec<String> = Vec::new();
    for p in ckpts {
        let base = stem(p);
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}-{k}");
            k += 1;
        }
        names.push(name);
    }
    let dens = loaded
        .iter()
        .map(|c| c.weights(set))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = match (&noise.noise, noise.range()?) {
        (None, None) => dens[0].noise,
        _ => noise.spec(Knownness::Known)?,
    };
    for (n, d) in names.iter().zip(&dens) {
        if d.noise.kind != spec.kind {
            return Err(usage(format!(
                "checkpoint {n} models {} noise but evaluation uses {}",
                d.noise.kind, spec.kind
            )));
        }
    }
    let images = load_pngs(clean)?;
    let labelled: Vec<(String, &bsdn_core::Denoiser)> = names.iter().cloned().zip(dens).collect();
    let rep = eval_dataset(&labelled, &images, &spec, replicates, seed)?;
    let file = fs::File::create(report).map_err(|e| io_err(report, e))?;
    rep.write_csv(std::io::BufWriter::new(file))?;
    for a in rep.aggregates() {
        println!("{}\t{:.3} dB\t({} rows)", a.checkpoint, a.psnr, a.rows);
    }
    Ok(())
}

pub struct VerifyArgs {
    pub ckpt: Option<PathBuf>,
    pub random_config: bool,
    pub baseline: bool,
    pub depth: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub channels: usize,
    pub trials: usize,
    pub size: usize,
    pub trials_per_weights: usize,
    pub seed: u64,
}

pub fn verify_blindspot(a: VerifyArgs) -> Result<(), CliError> {
    let report: BlindSpotReport = match (&a.ckpt, a.random_config) {
        (Some(p), false) => {
            let ck = Checkpoint::load(p)?;
            blindspot::verify_blindspot(&ck.last.net, a.trials, a.size, a.seed)?
        }
        (None, true) => {
            let cfg = NetworkConfig::with_widths(
                !a.baseline,
                a.depth,
                a.enc_width,
                a.dec_width,
                a.channels,
                a.channels + a.channels * (a.channels + 1) / 2,
            );
            blindspot::verify_blindspot_random(&cfg, a.trials, a.trials_per_weights, a.size, a.seed)
                .map_err(|e| usage(e.to_string()))?
        }
        _ => return Err(usage("pass exactly one of --ckpt or --random-config")),
    };
    if report.passed() {
        println!("blind spot verified: {} trials, 0 violations", report.trials);
        return Ok(());
    }
    println!(
        "{} violations in {} trials",
        report.violations.len(),
        report.trials
    );
    for v in report.violations.iter().take(10) {
        println!(
            "trial {} pixel ({}, {}) channel {}: {} -> {}",
            v.trial, v.row, v.col, v.channel, v.before, v.after
        );
    }
    Err(CliError::Failed("blind-spot verification failed".into()))
}
