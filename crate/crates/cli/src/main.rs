mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cirl_core::checkpoint::{load_model, TensorFile};
use cirl_core::data::{
    generate_synthetic, leave_one_domain_out, load_folder_dataset, DomainDataset, LoadOptions, SyntheticSpec,
};
use cirl_core::evaluation::{importance_stats, sensitivity_sweep, sweep_csv, SweepParam};
use cirl_core::fourier::{augment_batch, InterventionConfig, SamplingStrategy};
use cirl_core::training::{deterministic_mode, evaluate, fit, TrainConfig};
use cirl_core::ImageBatch;

#[derive(Parser)]
#[command(name = "cirl", version, about = "Domain generalization with causal representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes benchmark as a `<domain>/<class>/` PNG tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Config whose `[synthetic]` section describes the data.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write amplitude-mixed copies of every image in a folder dataset.
    Augment {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value = "random")]
        strategy: SamplingStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Train on every domain but the target, then evaluate on the target.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target_domain: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Switch a module off; repeat for several.
        #[arg(long, value_parser = ["cint", "cfac", "advm"])]
        ablate: Vec<String>,
        /// Folder dataset; overrides the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default `runs/<target>-<variant>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on each domain of a folder dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one domain.
        #[arg(long)]
        target_domain: Option<String>,
        /// Also write the JSON result here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of one hyper-parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// fac_weight, kappa or feature_dim.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-dimension importance of a checkpoint's superior classifier.
    Importance {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tables and plots from every run under a directory.
    Report {
        #[arg(long)]
        metrics_dir: PathBuf,
        /// Output directory (default: the metrics directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_data(cfg: &TrainConfig, data: Option<&Path>) -> Result<DomainDataset> {
    let opts = LoadOptions {
        image_size: cfg.image_size,
        split_seed: cfg.seed,
        ..LoadOptions::default()
    };
    if let Some(dir) = data.or(cfg.data_dir.as_deref()) {
        return load_folder_dataset(dir, &opts).with_context(|| format!("loading {}", dir.display()));
    }
    match &cfg.synthetic {
        Some(spec) => Ok(generate_synthetic(spec)?),
        None => bail!("no data source: pass --data, or set data_dir or a [synthetic] section in the config"),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(out: &Path, config: Option<&Path>, classes: usize, per_class: usize, seed: u64) -> Result<()> {
    let spec = match config {
        Some(p) => TrainConfig::load(p)?
            .synthetic
            .with_context(|| format!("{} has no [synthetic] section", p.display()))?,
        None => SyntheticSpec::benchmark(classes, per_class, seed),
    };
    let ds = generate_synthetic(&spec)?;
    ds.write_png_tree(out)?;
    ds.write_manifest(&out.join("manifest.json"))?;
    println!("wrote {} domains x {} classes to {}", ds.domains.len(), ds.classes.len(), out.display());
    Ok(())
}

fn augment(input: &Path, output: &Path, eta: f64, strategy: SamplingStrategy, seed: u64, size: usize) -> Result<()> {
    let mut ds = load_folder_dataset(
        input,
        &LoadOptions {
            image_size: size,
            ..LoadOptions::default()
        },
    )?;
    let views: Vec<_> = ds.domains.iter().map(|d| d.images.view()).collect();
    let images = ndarray::concatenate(ndarray::Axis(0), &views)?;
    let labels = ds.domains.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let tags = ds.domains.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, d.len())).collect();
    let batch = ImageBatch::new(images, labels, tags)?;
    let mixed = augment_batch(
        &batch,
        &InterventionConfig {
            eta,
            sampling_strategy: strategy,
            rng_seed: seed,
        },
    )?;
    let mut start = 0;
    for d in &mut ds.domains {
        let n = d.len();
        d.images = mixed.images.slice(ndarray::s![start..start + n, .., .., ..]).to_owned();
        start += n;
    }
    ds.write_png_tree(output)?;
    println!("wrote {} augmented images to {}", batch.len(), output.display());
    Ok(())
}

fn train(
    config: &Path,
    target: &str,
    seed: Option<u64>,
    ablate: &[String],
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut flags = cfg.flags();
    for m in ablate {
        flags = flags.without(m)?;
    }
    cfg.set_flags(flags);
    cfg.target_domain = Some(target.to_string());
    let ds = load_data(&cfg, data)?;
    let (sources, target_set) = leave_one_domain_out(&ds, target)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("runs/{target}-{}-seed{}", flags.label(), cfg.seed)));
    log::info!(
        "training {} on {:?} ({} samples), target {target}",
        flags.label(),
        sources.domain_names,
        sources.train.len()
    );
    let mut result = fit(&sources, &cfg, Some(&dir))?;
    let acc = evaluate(&mut result.best, &sources.classes, &target_set)?;
    result.log.target_accuracy = Some(acc);
    result.log.write(&dir.join("metrics.json"))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "{} target={target} seed={} best_epoch={} target_accuracy={acc:.4}",
        flags.label(),
        cfg.seed,
        result.log.best_epoch
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, target: Option<&str>, out: Option<&Path>) -> Result<()> {
    let (mut model, file) = load_model::<f32>(checkpoint)?;
    let classes: Vec<String> = match file.header.metadata.get("classes") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => bail!("{} carries no class list", checkpoint.display()),
    };
    let ds = load_folder_dataset(
        data,
        &LoadOptions {
            image_size: model.spec().image_size,
            ..LoadOptions::default()
        },
    )?;
    let mut results = serde_json::Map::new();
    for name in ds.domain_names() {
        if target.is_some_and(|t| t != name) {
            continue;
        }
        let (_, held_out) = leave_one_domain_out(&ds, name)?;
        let acc = evaluate(&mut model, &classes, &held_out)?;
        results.insert(name.to_string(), serde_json::json!(acc));
    }
    if results.is_empty() {
        bail!("domain {:?} not found in {}", target.unwrap_or_default(), data.display());
    }
    let text = serde_json::to_string_pretty(&results)?;
    println!("{text}");
    if let Some(p) = out {
        write(p, &text)?;
    }
    Ok(())
}

fn importance(checkpoint: &Path) -> Result<()> {
    let file = TensorFile::read(checkpoint)?;
    let w = match file.header.dtype.as_str() {
        "f32" => file.tensor::<f32>("h1.weight")?.mapv(f64::from),
        _ => file.tensor::<f64>("h1.weight")?,
    };
    let w = w.into_dimensionality::<ndarray::Ix2>()?;
    let report = importance_stats(&w)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if deterministic_mode() {
        log::info!("deterministic mode: single-threaded, fixed seeds");
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            config,
            classes,
            per_class,
            seed,
        } => synth(&out, config.as_deref(), classes, per_class, seed),
        Command::Augment {
            input_dir,
            output_dir,
            eta,
            strategy,
            seed,
            image_size,
        } => augment(&input_dir, &output_dir, eta, strategy, seed, image_size),
        Command::Train {
            config,
            target_domain,
            seed,
            ablate,
            data,
            out,
        } => train(&config, &target_domain, seed, &ablate, data.as_deref(), out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            target_domain,
            out,
        } => eval(&checkpoint, &data, target_domain.as_deref(), out.as_deref()),
        Command::Sweep {
            config,
            param,
            values,
            targets,
            seeds,
            data,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let rows = sensitivity_sweep(&ds, &cfg, param, &values, &targets, &seeds)?;
            let failed = rows.iter().filter(|r| r.accuracy.is_none()).count();
            write(&out, &sweep_csv(&rows))?;
            println!("wrote {} rows ({failed} failed) to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Importance { checkpoint } => importance(&checkpoint),
        Command::Report { metrics_dir, out } => {
            let out = out.unwrap_or_else(|| metrics_dir.clone());
            report::run(&metrics_dir, &out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ablate_flags_parse() {
        let cli = Cli::try_parse_from([
            "cirl", "train", "--config", "c.toml", "--target-domain", "slate", "--ablate", "cint", "--ablate", "advm",
        ])
        .unwrap();
        match cli.command {
            Command::Train { ablate, .. } => assert_eq!(ablate, vec!["cint", "advm"]),
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["cirl", "train", "--config", "c", "--target-domain", "t", "--ablate", "x"]).is_err());
    }
}
