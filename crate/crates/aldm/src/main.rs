use aldm::checkpoint;
use aldm::config::{Mode, TrainConfig};
use aldm::error::AldmError;
use aldm::eval::{
    self, diversity_score, layout_faithfulness, style_accuracy, train_oracle_segmenter,
    train_style_probe, FitConfig, MetricsReport, Oracle, StyleProbe,
};
use aldm::nets::{DenoiserSpec, NetSpec, ParameterTree, SegNetSpec, StyleProbeSpec};
use aldm::report::merge_reports;
use aldm::schedule::{make_schedule, TimestepSubsequence};
use aldm::synthdata::{generate_dataset, Dataset};
use aldm::trainer;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "aldm", version, about = "Layout-to-image diffusion with adversarial supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic layout dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_val: usize,
        /// Comma-separated style ids, e.g. 0,1,2.
        #[arg(long, default_value = "0,1,2")]
        styles: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Train and gate the evaluation oracle segmenter and style probe.
    TrainOracle {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
    /// Train a generator per the config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Sample images for the first validation layouts of a dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a generator checkpoint: mIoU, style accuracy, diversity.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Domain-generalization experiment: source-only vs augmented downstream.
    Dg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source_style: usize,
        #[arg(long)]
        target_style: usize,
        #[arg(long, default_value_t = 32)]
        n_aug: usize,
        #[arg(long, default_value_t = 300)]
        seg_iters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Unroll-depth sweep: one adv_unroll training run per K.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated unroll depths, e.g. 0,3,9.
        #[arg(long, default_value = "0,3,9")]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge metrics from run directories into markdown and CSV tables.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exclusive marker so concurrent processes cannot share an output directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, AldmError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AldmError::invalid(
                format!("output directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, AldmError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| AldmError::invalid(format!("bad list entry `{p}`")))
        })
        .collect()
}

fn load_config_near(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<TrainConfig, AldmError> {
    if let Some(p) = explicit {
        return TrainConfig::load(p);
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    TrainConfig::load(&dir.join("config.toml"))
}

fn load_denoiser(path: &Path) -> Result<(DenoiserSpec, ParameterTree), AldmError> {
    let (params, header) = checkpoint::load(path)?;
    match header.spec {
        NetSpec::Denoiser(spec) => Ok((spec, params)),
        other => Err(AldmError::invalid(format!(
            "{} holds a {:?} checkpoint, expected a denoiser",
            path.display(),
            std::mem::discriminant(&other)
        ))),
    }
}

fn freeze_invocation(dir: &Path, value: &serde_json::Value) -> Result<(), AldmError> {
    std::fs::create_dir_all(dir)?;
    Ok(std::fs::write(dir.join("invocation.json"), serde_json::to_string_pretty(value)?)?)
}

fn run(cli: Cli) -> Result<(), AldmError> {
    match cli.command {
        Command::GenData { out, n_train, n_val, styles, seed, resolution, classes, force } => {
            let styles = parse_usize_list(&styles)?;
            let manifest =
                generate_dataset(n_train, n_val, &styles, seed, resolution, classes, &out, force)?;
            println!(
                "wrote {} samples to {} (dataset hash {})",
                manifest.records.len(),
                out.display(),
                manifest.dataset_hash
            );
            Ok(())
        }
        Command::TrainOracle { dataset, out, seed, iters, batch, lr } => {
            let _lock = DirLock::acquire(&out)?;
            let ds = Dataset::open(&dataset)?;
            let cfg = FitConfig { iters, batch_size: batch, lr, seed };
            freeze_invocation(
                &out,
                &serde_json::json!({
                    "command": "train-oracle",
                    "dataset": dataset,
                    "dataset_hash": ds.manifest.dataset_hash,
                    "seed": seed, "iters": iters, "batch": batch, "lr": lr,
                }),
            )?;
            let oracle = train_oracle_segmenter(&ds, seed, &cfg)?;
            checkpoint::save(
                &out.join("oracle.ckpt"),
                &oracle.params,
                &NetSpec::SegNet(oracle.spec.clone()),
                seed,
                iters as u64,
                None,
            )?;
            let probe = train_style_probe(&ds, seed, &cfg)?;
            checkpoint::save(
                &out.join("probe.ckpt"),
                &probe.params,
                &NetSpec::StyleProbe(probe.spec.clone()),
                seed,
                iters as u64,
                None,
            )?;
            std::fs::write(
                out.join("gates.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "oracle_val_miou": oracle.val_miou,
                    "probe_accuracy": probe.accuracy,
                }))?,
            )?;
            println!(
                "oracle mIoU {:.4}, probe accuracy {:.4}",
                oracle.val_miou, probe.accuracy
            );
            Ok(())
        }
        Command::Train { config, out, seed, mode } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            cfg.validate()?;
            let _lock = DirLock::acquire(&out)?;
            let (_, outcome) = trainer::train(&cfg, &out)?;
            println!(
                "trained {} iterations (mode {}, hash {}), checkpoint {}",
                outcome.iters_run,
                cfg.train.mode,
                cfg.config_hash(),
                outcome.gen_path.display()
            );
            Ok(())
        }
        Command::Sample { checkpoint: ckpt, config, out, n, seed } => {
            let cfg = load_config_near(&ckpt, config.as_ref())?;
            let _lock = DirLock::acquire(&out)?;
            let (dspec, gen) = load_denoiser(&ckpt)?;
            let ds = Dataset::open(&cfg.data.dataset)?;
            let sched = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
            let steps = TimestepSubsequence::uniform(cfg.model.t_max, cfg.model.sample_steps)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            let idx = ds.val_indices();
            let take = n.min(idx.len()).max(1);
            for (ci, chunk) in idx[..take].chunks(8).enumerate() {
                let samples: Vec<_> =
                    chunk.iter().map(|&i| ds.load(i)).collect::<Result<Vec<_>, _>>()?;
                let (h, w) = samples[0].labels.dim();
                let mut labels = ndarray::Array3::<usize>::zeros((samples.len(), h, w));
                let mut styles = Vec::new();
                for (k, s) in samples.iter().enumerate() {
                    for i in 0..h {
                        for j in 0..w {
                            labels[[k, i, j]] = s.labels[[i, j]];
                        }
                    }
                    styles.push(s.style_id);
                }
                let imgs = eval::sample_images(
                    &dspec,
                    &gen,
                    &labels,
                    &styles,
                    &sched,
                    &steps,
                    seed.wrapping_add(ci as u64),
                )?;
                for k in 0..samples.len() {
                    let mut buf = image::RgbImage::new(w as u32, h as u32);
                    for i in 0..h {
                        for j in 0..w {
                            let px: Vec<u8> = (0..3)
                                .map(|c| {
                                    let v = (imgs[[k, c, i, j]].clamp(-1.0, 1.0) + 1.0) / 2.0;
                                    (v * 255.0).round() as u8
                                })
                                .collect();
                            buf.put_pixel(j as u32, i as u32, image::Rgb([px[0], px[1], px[2]]));
                        }
                    }
                    buf.save(out.join(format!("sample_{:04}.png", ci * 8 + k)))?;
                }
            }
            println!("wrote {take} samples to {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, config, oracle, probe, out, seed } => {
            let cfg = load_config_near(&ckpt, config.as_ref())?;
            let _lock = DirLock::acquire(&out)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let (dspec, gen) = load_denoiser(&ckpt)?;
            let ds = Dataset::open(&cfg.data.dataset)?;
            let sched = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
            let steps = TimestepSubsequence::uniform(cfg.model.t_max, cfg.model.sample_steps)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;

            let (oracle_params, oh) = checkpoint::load(&oracle)?;
            let oracle_spec: SegNetSpec = match oh.spec {
                NetSpec::SegNet(s) => s,
                _ => return Err(AldmError::invalid("oracle checkpoint is not a segmenter")),
            };
            let oracle = Oracle { spec: oracle_spec, params: oracle_params, val_miou: f64::NAN };
            let (probe_params, ph) = checkpoint::load(&probe)?;
            let probe_spec: StyleProbeSpec = match ph.spec {
                NetSpec::StyleProbe(s) => s,
                _ => return Err(AldmError::invalid("probe checkpoint is not a style probe")),
            };
            let probe = StyleProbe { spec: probe_spec, params: probe_params, accuracy: f64::NAN };

            let n_layouts = cfg.data.eval_layouts;
            let (miou, per_class) =
                layout_faithfulness(&dspec, &gen, &ds, &oracle, n_layouts, &sched, &steps, seed)?;
            let sa = style_accuracy(
                &dspec,
                &gen,
                &ds,
                &probe,
                n_layouts.min(8),
                &sched,
                &steps,
                seed.wrapping_add(1),
            )?;
            let first_val = ds.load(ds.val_indices()[0])?;
            let div = diversity_score(
                &dspec,
                &gen,
                &first_val.labels,
                first_val.style_id,
                4,
                &sched,
                &steps,
                seed.wrapping_add(2),
            )?;
            let report = MetricsReport {
                mode: cfg.train.mode.to_string(),
                config_hash: cfg.config_hash(),
                dataset_hash: ds.manifest.dataset_hash.clone(),
                miou,
                per_class_iou: per_class,
                style_accuracy: sa,
                diversity: div,
                n_samples: n_layouts.min(ds.val_indices().len()),
            };
            report.save(&out.join("metrics.json"))?;
            println!(
                "mIoU {:.4}, style accuracy {:.4}, diversity {:.4}",
                report.miou, report.style_accuracy, report.diversity
            );
            Ok(())
        }
        Command::Dg {
            checkpoint: ckpt,
            config,
            source_style,
            target_style,
            n_aug,
            seg_iters,
            out,
            seed,
        } => {
            let cfg = load_config_near(&ckpt, config.as_ref())?;
            let _lock = DirLock::acquire(&out)?;
            let (dspec, gen) = load_denoiser(&ckpt)?;
            let ds = Dataset::open(&cfg.data.dataset)?;
            let sched = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
            let steps = TimestepSubsequence::uniform(cfg.model.t_max, cfg.model.sample_steps)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            let fit = FitConfig { iters: seg_iters, batch_size: 8, lr: 3e-3, seed };
            let result = eval::dg_experiment(
                &ds,
                source_style,
                target_style,
                &dspec,
                &gen,
                n_aug,
                &sched,
                &steps,
                &fit,
            )?;
            std::fs::write(out.join("dg.json"), serde_json::to_string_pretty(&result)?)?;
            let mut csv = String::from("variant,miou\n");
            csv.push_str(&format!("source_only,{:.6}\n", result.miou_source_only));
            csv.push_str(&format!("augmented,{:.6}\n", result.miou_augmented));
            std::fs::write(out.join("dg.csv"), csv)?;
            println!(
                "source-only {:.4} -> augmented {:.4} (gain {:+.4})",
                result.miou_source_only, result.miou_augmented, result.gain
            );
            Ok(())
        }
        Command::Ablate { config, sweep, out, seed } => {
            let ks = parse_usize_list(&sweep)?;
            if ks.is_empty() {
                return Err(AldmError::invalid("empty sweep"));
            }
            std::fs::create_dir_all(&out)?;
            for k in ks {
                let mut cfg = TrainConfig::load(&config)?;
                cfg.train.mode = Mode::AdvUnroll;
                cfg.unroll.k = k;
                if let Some(s) = seed {
                    cfg.train.seed = s;
                }
                cfg.validate()?;
                let dir = out.join(format!("k{k}"));
                let _lock = DirLock::acquire(&dir)?;
                let (_, outcome) = trainer::train(&cfg, &dir)?;
                println!("K={k}: {} iterations, checkpoint {}", outcome.iters_run, outcome.gen_path.display());
            }
            Ok(())
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                return Err(AldmError::invalid("report needs at least one run directory"));
            }
            let (md, csv) = merge_reports(&dirs)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.md"), &md)?;
            std::fs::write(out.join("report.csv"), &csv)?;
            print!("{md}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                AldmError::Config { .. } => 3,
                AldmError::HashMismatch(_) => 4,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}
