use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vesselseg::augmentation::{augment_patient, AugmentConfig, DivergenceSpec};
use vesselseg::evaluation::{
    compare_cohorts, dice, multiclass_dice, LocationTest, MetricsReport, Region,
};
use vesselseg::io::config::Config;
use vesselseg::io::{
    attach_augmented, group_split, read_mask, read_volume, write_mask, AugmentedScan, Cohort,
    SplitManifest,
};
use vesselseg::network::{
    argmax_labels, build_unet, load_checkpoint, normalize_input, save_checkpoint, unet_forward,
    ForwardOptions, HuWindow, UNetSpec,
};
use vesselseg::phantom::{generate_cohort, CohortJitter, CohortManifest, PhantomSpec};
use vesselseg::pipeline::{
    run_pipeline, BundleManifest, Modality, ModelBundle, PipelineConfig, RegionKind,
};
use vesselseg::training::{train_with, Sample, TrainConfig};
use vesselseg::volume::{hu_statistics, ClassSet, LabelMask};
use vesselseg::{rng, Error};

type Res<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "vesselseg", version, about = "Aortic segmentation toolkit")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Cta,
    Nc,
}

impl ModalityArg {
    fn modality(self) -> Modality {
        match self {
            ModalityArg::Cta => Modality::Contrast,
            ModalityArg::Nc => Modality::NonContrast,
        }
    }

    fn scan(self) -> &'static str {
        match self {
            ModalityArg::Cta => "cta",
            ModalityArg::Nc => "nc",
        }
    }

    fn truth(self) -> &'static str {
        match self {
            ModalityArg::Cta => "gt_cta",
            ModalityArg::Nc => "gt_nc",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    /// Binary aorta detector.
    Roi,
    /// Lumen / wall model (binary for non-contrast).
    Region,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patient cohort.
    Phantom {
        #[arg(long)]
        n: Option<usize>,
        /// In-plane size of small cubic phantoms; omit for full-size scans.
        #[arg(long)]
        toy_size: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Partition a cohort into train/valid/test by patient.
    Split {
        #[arg(long)]
        cohort: PathBuf,
        /// `train,valid,test`
        #[arg(long, default_value = "10,3,13")]
        counts: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write ten divergence-warped copies of every train/valid patient.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a U-Net on the train cohort, selecting on the valid cohort.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "cta")]
        modality: ModalityArg,
        #[arg(long, value_enum, default_value = "region")]
        target: Target,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply one checkpoint to one volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the two-stage cascade on one scan.
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cta")]
        modality: ModalityArg,
        /// Bundle manifest naming the stage-1 and stage-2 checkpoints.
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        bundle: Option<PathBuf>,
        /// Use this label file in place of trained models.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predictions against ground truth and compare cohort statistics.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// `model_id=dir`, where dir holds `<patient>.nii.gz`; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, value_enum, default_value = "cta")]
        modality: ModalityArg,
        #[arg(long, default_value = "test")]
        cohort: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Res<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| e.in_stage("config"))?,
        None => Config::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Phantom {
            n,
            toy_size,
            out_dir,
        } => {
            if let Some(n) = n {
                cfg.set("phantom.n", n);
            }
            if let Some(s) = toy_size {
                cfg.set("phantom.toy_size", s);
            }
            phantom(&cfg, seed, &out_dir).map_err(|e| e.in_stage("phantom"))
        }
        Command::Split {
            cohort,
            counts,
            out_dir,
        } => split(&cohort, &counts, seed, &out_dir).map_err(|e| e.in_stage("split")),
        Command::Augment { manifest, out_dir } => {
            augment(&cfg, &manifest, seed, &out_dir).map_err(|e| e.in_stage("augment"))
        }
        Command::Train {
            manifest,
            modality,
            target,
            epochs,
            out_dir,
        } => {
            if let Some(e) = epochs {
                cfg.set("train.epochs", e);
            }
            train(&cfg, &manifest, modality, target, seed, &out_dir)
                .map_err(|e| e.in_stage("train"))
        }
        Command::Predict {
            checkpoint,
            input,
            out_dir,
        } => predict(&cfg, &checkpoint, &input, &out_dir).map_err(|e| e.in_stage("predict")),
        Command::Pipeline {
            input,
            modality,
            bundle,
            oracle,
            out_dir,
        } => pipeline(
            &cfg,
            &input,
            modality,
            bundle.as_deref(),
            oracle.as_deref(),
            &out_dir,
        )
        .map_err(|e| e.in_stage("pipeline")),
        Command::Evaluate {
            manifest,
            models,
            modality,
            cohort,
            out_dir,
        } => evaluate(&manifest, &models, modality, &cohort, seed, &out_dir)
            .map_err(|e| e.in_stage("evaluate")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn absolute(p: &Path) -> Res<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn normalized(p: &Path) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::Normal(s) => out.push(s.to_string_lossy().into_owned()),
            _ => {}
        }
    }
    out
}

/// `target` expressed relative to directory `base`, with `/` separators.
fn relative_to(base: &Path, target: &Path) -> Res<String> {
    let b = normalized(&absolute(base)?);
    let t = normalized(&absolute(target)?);
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".into(); b.len() - common];
    parts.extend(t[common..].iter().cloned());
    Ok(parts.join("/"))
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn phantom(cfg: &Config, seed: u64, out_dir: &Path) -> Res<()> {
    let n: usize = cfg.get_or("phantom.n", 26)?;
    let base = match cfg.get::<usize>("phantom.toy_size")? {
        Some(s) => PhantomSpec::toy(s),
        None => PhantomSpec::default(),
    };
    let m = generate_cohort(n, &base, &CohortJitter::default(), seed, out_dir)?;
    log::info!(
        "wrote {} patients to {}",
        m.patients.len(),
        out_dir.display()
    );
    Ok(())
}

fn parse_counts(s: &str) -> Res<(usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad counts {s:?}")))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidArgument(format!(
            "counts need three values, got {s:?}"
        ))),
    }
}

fn split(cohort: &Path, counts: &str, seed: u64, out_dir: &Path) -> Res<()> {
    let c = CohortManifest::load(cohort)?;
    fs::create_dir_all(out_dir)?;
    let src = manifest_dir(cohort);
    let patients = c
        .patients
        .iter()
        .map(|p| {
            let scans = p
                .scans
                .iter()
                .map(|(k, v)| Ok((k.clone(), relative_to(out_dir, &src.join(v))?)))
                .collect::<Res<BTreeMap<_, _>>>()?;
            Ok((p.patient_id.clone(), scans))
        })
        .collect::<Res<Vec<_>>>()?;
    let m = group_split(&patients, parse_counts(counts)?, seed)?;
    m.save(out_dir.join("split.json"))?;
    log::info!(
        "split {}/{}/{}",
        m.count(Cohort::Train),
        m.count(Cohort::Valid),
        m.count(Cohort::Test)
    );
    Ok(())
}

#[derive(Serialize)]
struct Provenance {
    id: String,
    source_patient: String,
    index: usize,
    seed: u64,
    config: AugmentConfig,
    fields: BTreeMap<String, DivergenceSpec>,
}

fn augment_config(cfg: &Config) -> Res<AugmentConfig> {
    let d = AugmentConfig::default();
    Ok(AugmentConfig {
        sigma: cfg.get_or("augment.sigma", d.sigma)?,
        amplitude: cfg.get_or("augment.amplitude", d.amplitude)?,
        ring_factor: cfg.get_or("augment.ring_factor", d.ring_factor)?,
        jitter: cfg.get_or("augment.jitter", d.jitter)?,
    })
}

fn augment(cfg: &Config, manifest: &Path, seed: u64, out_dir: &Path) -> Res<()> {
    let m = SplitManifest::load(manifest)?;
    m.validate()?;
    let acfg = augment_config(cfg)?;
    let src = manifest_dir(manifest);
    fs::create_dir_all(out_dir)?;
    let mut scans_out = Vec::new();
    for e in m
        .entries
        .iter()
        .filter(|e| e.augmented_from.is_none() && e.cohort != Cohort::Test)
    {
        // (image, truth) pairs warped with the same fields
        let pairs: Vec<(&str, &str)> = [("cta", "gt_cta"), ("nc", "gt_nc")]
            .into_iter()
            .filter(|(v, g)| e.scans.contains_key(*v) && e.scans.contains_key(*g))
            .collect();
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "patient {} has no image/label pair",
                e.patient_id
            )));
        }
        let mut per_pair = Vec::new();
        for (v, g) in &pairs {
            let vol = read_volume(src.join(&e.scans[*v]))?;
            let gt = read_mask(src.join(&e.scans[*g]))?;
            let mut r = rng::stream(seed, &format!("augment/{}/{v}", e.patient_id));
            per_pair.push(augment_patient(&vol, &gt, &acfg, &mut r)?);
        }
        for k in 0..per_pair[0].len() {
            let id = format!("{}_aug{k:02}", e.patient_id);
            let dir = out_dir.join(&id);
            fs::create_dir_all(&dir)?;
            let mut scans = BTreeMap::new();
            let mut fields = BTreeMap::new();
            for ((v, g), aug) in pairs.iter().zip(&per_pair) {
                let a = &aug[k];
                vesselseg::io::write_volume(dir.join(format!("{v}.nii.gz")), &a.volume)?;
                write_mask(dir.join(format!("{g}.nii.gz")), &a.mask)?;
                scans.insert(v.to_string(), format!("{id}/{v}.nii.gz"));
                scans.insert(g.to_string(), format!("{id}/{g}.nii.gz"));
                fields.insert(v.to_string(), a.spec);
            }
            write_json(
                &dir.join("provenance.json"),
                &Provenance {
                    id: id.clone(),
                    source_patient: e.patient_id.clone(),
                    index: k,
                    seed,
                    config: acfg,
                    fields,
                },
            )?;
            scans_out.push(AugmentedScan {
                id,
                source_patient: e.patient_id.clone(),
                scans,
            });
        }
    }
    // originals are rebased so that every path is relative to out_dir
    let mut rebased = m.clone();
    for e in &mut rebased.entries {
        for v in e.scans.values_mut() {
            *v = relative_to(out_dir, &src.join(&*v))?;
        }
    }
    let full = attach_augmented(&rebased, &scans_out)?;
    full.save(out_dir.join("split.json"))?;
    log::info!(
        "augmented scans: train {}, valid {}, test {}",
        full.augmented_count(Cohort::Train),
        full.augmented_count(Cohort::Valid),
        full.augmented_count(Cohort::Test)
    );
    Ok(())
}

fn train_config(cfg: &Config, seed: u64) -> Res<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: cfg.get_or("train.learning_rate", d.learning_rate)?,
        weight_decay: cfg.get_or("train.weight_decay", d.weight_decay)?,
        batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
        epochs: cfg.get_or("train.epochs", d.epochs)?,
        seed,
        augment_online: cfg.get_or("train.augment_online", d.augment_online)?,
        cosine_schedule: cfg.get_or("train.cosine_schedule", d.cosine_schedule)?,
        ..d
    })
}

fn load_samples(
    m: &SplitManifest,
    src: &Path,
    cohort: Cohort,
    modality: ModalityArg,
    binary: bool,
) -> Res<Vec<Sample>> {
    m.cohort(cohort)
        .map(|e| {
            let get = |k: &str| {
                e.scans.get(k).map(|p| src.join(p)).ok_or_else(|| {
                    Error::InvalidArgument(format!("{} has no '{k}' scan", e.patient_id))
                })
            };
            let vol = read_volume(get(modality.scan())?)?;
            let mut gt = read_mask(get(modality.truth())?)?;
            if binary {
                gt = gt.binarized();
            }
            Sample::new(e.source_patient(), vol, gt)
        })
        .collect()
}

#[derive(Serialize)]
struct TrainSummary {
    spec: UNetSpec,
    config: TrainConfig,
    best_epoch: usize,
    parameters: usize,
    fingerprint: String,
}

fn train(
    cfg: &Config,
    manifest: &Path,
    modality: ModalityArg,
    target: Target,
    seed: u64,
    out_dir: &Path,
) -> Res<()> {
    let m = SplitManifest::load(manifest)?;
    m.validate()?;
    let src = manifest_dir(manifest);
    let binary = matches!(target, Target::Roi) || matches!(modality, ModalityArg::Nc);
    let train_set = load_samples(&m, &src, Cohort::Train, modality, binary)?;
    let valid_set = load_samples(&m, &src, Cohort::Valid, modality, binary)?;
    let spec = UNetSpec::new(
        if binary { 2 } else { 3 },
        cfg.get_or("train.depth", 4)?,
        cfg.get_or("train.base_channels", 16)?,
        cfg.get_or("train.attention", true)?,
    );
    let tcfg = train_config(cfg, seed)?;
    let model = build_unet(&spec, rng::derive_seed(seed, "train/init"))?;
    log::info!(
        "training {} parameters on {} scans ({} valid)",
        model.parameter_count(),
        train_set.len(),
        valid_set.len()
    );
    let (best, history) = train_with(model, &train_set, &valid_set, &tcfg, |r| {
        log::info!(
            "epoch {} loss {:.4} train {:.4} valid {}",
            r.epoch,
            r.loss,
            r.train.combined,
            r.valid
                .as_ref()
                .map(|v| format!("{:.4}", v.combined))
                .unwrap_or_else(|| "-".into())
        );
    })?;
    fs::create_dir_all(out_dir)?;
    save_checkpoint(out_dir.join("model.ckpt"), &best)?;
    fs::write(out_dir.join("history.csv"), history.to_csv())?;
    write_json(
        &out_dir.join("train.json"),
        &TrainSummary {
            spec,
            config: tcfg,
            best_epoch: history.best_epoch,
            parameters: best.parameter_count(),
            fingerprint: best.fingerprint(),
        },
    )?;
    Ok(())
}

fn window(cfg: &Config) -> Res<HuWindow> {
    let d = HuWindow::default();
    Ok(HuWindow {
        lo: cfg.get_or("window.lo", d.lo)?,
        hi: cfg.get_or("window.hi", d.hi)?,
    })
}

fn predict(cfg: &Config, checkpoint: &Path, input: &Path, out_dir: &Path) -> Res<()> {
    let params = load_checkpoint(checkpoint)?;
    let vol = read_volume(input)?;
    let probs = unet_forward(
        &params,
        &normalize_input(&vol, window(cfg)?)?,
        ForwardOptions::default(),
    )?;
    let class_set = if params.spec().num_classes == 2 {
        ClassSet::binary()
    } else {
        ClassSet::aorta()
    };
    let mask = LabelMask::new(*vol.grid(), argmax_labels(&probs), class_set)?;
    fs::create_dir_all(out_dir)?;
    write_mask(out_dir.join("mask.nii.gz"), &mask)?;
    Ok(())
}

#[derive(Serialize)]
struct BoxRecord {
    region: RegionKind,
    lo: [usize; 3],
    hi: [usize; 3],
}

#[derive(Serialize)]
struct PipelineRecord {
    modality: Modality,
    iso_dims: [usize; 3],
    iso_spacing: [f64; 3],
    lowres_dims: [usize; 3],
    boxes: Vec<BoxRecord>,
    crop_dims: Vec<[usize; 3]>,
}

fn pipeline_config(cfg: &Config) -> Res<PipelineConfig> {
    let d = PipelineConfig::default();
    Ok(PipelineConfig {
        lowres_xy: cfg.get_or("pipeline.lowres_xy", d.lowres_xy)?,
        roi_xy: cfg.get_or("pipeline.roi_xy", d.roi_xy)?,
        margin: cfg.get_or("pipeline.margin", d.margin)?,
        iso_spacing: cfg.get("pipeline.iso_spacing")?,
    })
}

fn pipeline(
    cfg: &Config,
    input: &Path,
    modality: ModalityArg,
    bundle: Option<&Path>,
    oracle: Option<&Path>,
    out_dir: &Path,
) -> Res<()> {
    let vol = read_volume(input)?;
    let bundle = match (bundle, oracle) {
        (Some(b), _) => {
            let (_, bundle) = BundleManifest::load(b)?;
            if bundle.modality != modality.modality() {
                return Err(Error::InvalidArgument(
                    "bundle modality does not match --modality".into(),
                ));
            }
            bundle
        }
        (None, Some(o)) => ModelBundle::oracle(modality.modality(), &read_mask(o)?)?,
        (None, None) => return Err(Error::InvalidArgument("need --bundle or --oracle".into())),
    };
    let res = run_pipeline(&vol, &bundle, &pipeline_config(cfg)?)?;
    log::info!("pipeline took {:.2}s", res.timing.total_s);
    fs::create_dir_all(out_dir)?;
    write_mask(out_dir.join("mask.nii.gz"), &res.full_mask)?;
    let iso = res.boxes.first().map(|b| b.1.frame).unwrap_or(*vol.grid());
    write_json(
        &out_dir.join("boxes.json"),
        &PipelineRecord {
            modality: modality.modality(),
            iso_dims: iso.dims,
            iso_spacing: iso.spacing,
            lowres_dims: res.lowres_mask.dims(),
            boxes: res
                .boxes
                .iter()
                .map(|(r, b)| BoxRecord {
                    region: *r,
                    lo: b.lo,
                    hi: b.hi,
                })
                .collect(),
            crop_dims: res.regions.iter().map(|r| r.mask.dims()).collect(),
        },
    )?;
    Ok(())
}

fn parse_cohort(s: &str) -> Res<Cohort> {
    match s {
        "train" => Ok(Cohort::Train),
        "valid" => Ok(Cohort::Valid),
        "test" => Ok(Cohort::Test),
        _ => Err(Error::InvalidArgument(format!("unknown cohort {s:?}"))),
    }
}

fn evaluate(
    manifest: &Path,
    models: &[String],
    modality: ModalityArg,
    cohort: &str,
    seed: u64,
    out_dir: &Path,
) -> Res<()> {
    let m = SplitManifest::load(manifest)?;
    m.validate()?;
    let src = manifest_dir(manifest);
    let cohort = parse_cohort(cohort)?;
    let mut report = MetricsReport::default();
    for spec in models {
        let (id, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--model wants id=dir, got {spec:?}")))?;
        for e in m.cohort(cohort).filter(|e| e.augmented_from.is_none()) {
            let gt = read_mask(src.join(&e.scans[modality.truth()]))?;
            let pred = read_mask(Path::new(dir).join(format!("{}.nii.gz", e.patient_id)))?;
            if gt.class_set().is_binary() || pred.class_set().is_binary() {
                let d = dice(&pred.binarized(), &gt.binarized())?;
                report.push(&e.patient_id, id, Region::Entire, d)?;
            } else {
                report.push_multiclass(&e.patient_id, id, &multiclass_dice(&pred, &gt)?)?;
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("dice_rows.csv"), report.rows_csv())?;
    fs::write(out_dir.join("dice_summary.csv"), report.summary_csv())?;
    fs::write(out_dir.join("dice_table.txt"), report.table())?;
    print!("{}", report.table());

    // scan statistics of this cohort against the training cohort
    let stats = |c: Cohort| -> Res<Vec<_>> {
        m.cohort(c)
            .filter(|e| e.augmented_from.is_none())
            .map(|e| hu_statistics(&read_volume(src.join(&e.scans[modality.scan()]))?))
            .collect()
    };
    let (a, b) = (stats(cohort)?, stats(Cohort::Train)?);
    if a.len() >= 2 && b.len() >= 2 && cohort != Cohort::Train {
        let test = LocationTest::Permutation {
            max_exact: 200_000,
            rounds: 10_000,
            seed,
        };
        fs::write(
            out_dir.join("hu_comparison.csv"),
            compare_cohorts(&a, &b, test)?.to_csv(),
        )?;
    }
    Ok(())
}
