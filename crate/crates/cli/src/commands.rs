//! Subcommand implementations. Each takes explicit inputs and writes its
//! artifacts; `main` only parses flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vseg_core::gradcheck::{run_suite, CheckReport};
use vseg_core::metrics::{class_frequencies, confusion, format_metric};
use vseg_core::network::{ensemble_predict, predict_labels};
use vseg_core::optim::{crossval, seed_offset, train, EpochLog};
use vseg_core::rf::{format_csv, format_text, receptive_field_trace};
use vseg_core::synth::{self, SynthKind};
use vseg_core::{ArchSpec, LabelVolume, Network, RegionMap, RegionMetrics, Sample};

use crate::config::Config;
use crate::error::{io_err, CliError, Result};
use crate::io::{read_checkpoint, read_image, read_labels, read_volume, write_checkpoint, write_volume, Volume};

pub const IMAGE_SUFFIX: &str = ".image.vseg";
pub const LABELS_SUFFIX: &str = ".labels.vseg";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Stems of every `<stem>.image.vseg` in `dir`, sorted.
pub fn dataset_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(IMAGE_SUFFIX)) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Image/label pairs of `dir`, labels widened to `class_count` classes.
pub fn load_dataset(dir: &Path, class_count: usize) -> Result<Vec<(String, Sample<f32>)>> {
    let stems = dataset_stems(dir)?;
    if stems.is_empty() {
        return Err(CliError::Usage(format!("no *{IMAGE_SUFFIX} files in {}", dir.display())));
    }
    stems
        .into_iter()
        .map(|stem| {
            let image = read_image(&dir.join(format!("{stem}{IMAGE_SUFFIX}")))?;
            let labels = read_labels(&dir.join(format!("{stem}{LABELS_SUFFIX}")))?.with_class_count(class_count)?;
            Ok((stem, Sample { image, labels }))
        })
        .collect()
}

pub fn write_sample(dir: &Path, stem: &str, s: &Sample<f32>) -> Result<()> {
    write_volume(&dir.join(format!("{stem}{IMAGE_SUFFIX}")), &Volume::Image(s.image.clone()))?;
    write_volume(&dir.join(format!("{stem}{LABELS_SUFFIX}")), &Volume::Labels(s.labels.clone()))
}

pub fn curves_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in epochs {
        writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss).expect("string write");
    }
    out
}

fn metrics_row(out: &mut String, prefix: &str, region: &str, m: &RegionMetrics) {
    writeln!(
        out,
        "{prefix}{region},{},{},{},{}",
        format_metric(m.dice),
        format_metric(m.precision),
        format_metric(m.sensitivity),
        format_metric(m.specificity)
    )
    .expect("string write");
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Checkpoints written, one per fold in cross-validation.
    pub checkpoints: Vec<PathBuf>,
    pub best_val_loss: Vec<f64>,
    pub epochs_run: Vec<usize>,
}

/// Train on every volume of `data` (the last `val_holdout` serve as the
/// validation set), or cross-validate with `folds` folds.
pub fn cmd_train(cfg: &Config, data: &Path, out: &Path, folds: Option<usize>) -> Result<TrainSummary> {
    cfg.validate()?;
    let samples: Vec<Sample<f32>> = load_dataset(data, cfg.arch.class_count)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let mut summary = TrainSummary {
        checkpoints: Vec::new(),
        best_val_loss: Vec::new(),
        epochs_run: Vec::new(),
    };
    match folds {
        None => {
            let hold = if cfg.train.val_holdout < samples.len() { cfg.train.val_holdout } else { 0 };
            let (tr, va) = samples.split_at(samples.len() - hold);
            let net = Network::build(&cfg.arch, cfg.train.seed.wrapping_add(seed_offset::INIT))?;
            let o = train(net, tr, va, &cfg.train)?;
            let ckpt = out.join("model.vnet");
            write_checkpoint(&ckpt, &o.net)?;
            write_text(&out.join("curves.csv"), &curves_csv(&o.epochs))?;
            summary.checkpoints.push(ckpt);
            summary.best_val_loss.push(o.best_val_loss);
            summary.epochs_run.push(o.epochs.len());
        }
        Some(k) => {
            let regions = cfg.regions();
            let cv = crossval(&cfg.arch, &samples, k, &cfg.train, &regions)?;
            let mut table = String::from("fold,region,dice,precision,sensitivity,specificity\n");
            for (o, rep) in cv.folds.iter().zip(&cv.reports) {
                let ckpt = out.join(format!("fold{}.vnet", rep.fold));
                write_checkpoint(&ckpt, &o.net)?;
                write_text(&out.join(format!("fold{}_curves.csv", rep.fold)), &curves_csv(&o.epochs))?;
                for (name, m) in &rep.metrics {
                    metrics_row(&mut table, &format!("{},", rep.fold), name, m);
                }
                summary.checkpoints.push(ckpt);
                summary.best_val_loss.push(o.best_val_loss);
                summary.epochs_run.push(o.epochs.len());
            }
            for (name, m) in &cv.mean {
                metrics_row(&mut table, "mean,", name, m);
            }
            write_text(&out.join("crossval.csv"), &table)?;
        }
    }
    Ok(summary)
}

/// Predict labels for `input`. More than one checkpoint, or `ensemble`,
/// averages the members' probabilities.
pub fn cmd_infer(checkpoints: &[PathBuf], input: &Path, out: &Path, ensemble: bool) -> Result<LabelVolume> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("at least one checkpoint is required".into()));
    }
    let nets = checkpoints.iter().map(|p| read_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let image = read_image(input)?;
    let labels = if nets.len() == 1 && !ensemble {
        predict_labels(&nets[0], &image)?
    } else {
        ensemble_predict(&nets, &image)?
    };
    write_volume(out, &Volume::Labels(labels.clone()))?;
    Ok(labels)
}

/// Metric CSV with one row per region.
pub fn cmd_eval(pred: &Path, truth: &Path, regions: &RegionMap) -> Result<String> {
    let (p, t) = (read_labels(pred)?, read_labels(truth)?);
    let mut table = String::from("region,dice,precision,sensitivity,specificity\n");
    for r in &regions.region {
        metrics_row(&mut table, "", &r.name, &confusion(&p, &t, &r.classes)?.metrics());
    }
    Ok(table)
}

/// Reference input extents of the receptive-field table.
pub const RF_INPUT: [usize; 3] = [128, 128, 96];

/// `(aligned text, csv)` receptive-field tables.
pub fn cmd_rf_report(arch: &ArchSpec, input: [usize; 3]) -> Result<(String, String)> {
    let rows = receptive_field_trace(arch, input)?;
    Ok((format_text(&rows), format_csv(&rows)))
}

pub fn cmd_gradcheck(seed: u64, instances: usize, per_tensor: Option<usize>) -> Result<Vec<CheckReport>> {
    Ok(run_suite(seed, instances, per_tensor)?)
}

pub fn format_gradcheck(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        writeln!(
            out,
            "{:<4} {:<48} instances {:>3}  probes {:>6}  skipped {:>4}  max rel err {:.3e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.instances,
            r.probes,
            r.skipped,
            r.max_rel_error
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthCommand {
    Generate(SynthKind),
    /// Mirror the volumes of a source directory.
    HealthyMirror,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub count: usize,
    pub dims: [usize; 3],
    pub channels: usize,
    pub seed: u64,
    pub source: Option<PathBuf>,
    pub axis: usize,
}

/// Write synthetic volumes to `out`; returns the stems written.
pub fn cmd_synth(what: SynthCommand, opts: &SynthOptions, out: &Path) -> Result<Vec<String>> {
    create_dir(out)?;
    let mut written = Vec::new();
    match what {
        SynthCommand::Generate(kind) => {
            let base = opts.seed.wrapping_add(seed_offset::SYNTH).wrapping_mul(1_000_003);
            for i in 0..opts.count {
                let s = synth::generate(kind, opts.dims, opts.channels, base.wrapping_add(i as u64))?;
                let stem = format!("synth{i:04}");
                write_sample(out, &stem, &s)?;
                written.push(stem);
            }
        }
        SynthCommand::HealthyMirror => {
            let src = opts
                .source
                .as_deref()
                .ok_or_else(|| CliError::Usage("healthy-mirror needs --source".into()))?;
            for stem in dataset_stems(src)? {
                let image = read_image(&src.join(format!("{stem}{IMAGE_SUFFIX}")))?;
                let labels = read_labels(&src.join(format!("{stem}{LABELS_SUFFIX}")))?;
                if let Some(m) = synth::healthy_mirror(&Sample { image, labels }, opts.axis)? {
                    let stem = format!("{stem}_mirror");
                    write_sample(out, &stem, &m)?;
                    written.push(stem);
                }
            }
        }
    }
    Ok(written)
}

/// Class-frequency CSV over the label volumes of `dir`.
pub fn cmd_freq(dir: &Path) -> Result<String> {
    let stems = dataset_stems(dir)?;
    if stems.is_empty() {
        return Err(CliError::Usage(format!("no *{IMAGE_SUFFIX} files in {}", dir.display())));
    }
    let vols = stems
        .iter()
        .map(|s| read_labels(&dir.join(format!("{s}{LABELS_SUFFIX}"))))
        .collect::<Result<Vec<_>>>()?;
    let classes = vols.iter().map(LabelVolume::class_count).max().expect("nonempty");
    let vols = vols
        .into_iter()
        .map(|v| v.with_class_count(classes))
        .collect::<vseg_core::Result<Vec<_>>>()?;
    let freq = class_frequencies(&vols)?;
    let mut out = String::from("class,voxels,fraction\n");
    for (c, f) in freq.iter().enumerate() {
        let n: usize = vols.iter().map(|v| v.count(c)).sum();
        writeln!(out, "{c},{n},{f:.6e}").expect("string write");
    }
    Ok(out)
}

const SHADES: &[u8] = b" .:-=+*#%@";

/// ASCII rendering of one slice orthogonal to `axis` (middle slice by
/// default); images use channel 0 scaled to its slice range.
pub fn cmd_preview(path: &Path, axis: usize, slice: Option<usize>) -> Result<String> {
    if axis > 2 {
        return Err(CliError::Usage(format!("axis {axis} out of range")));
    }
    let v = read_volume(path)?;
    let dims = v.dims();
    let k = slice.unwrap_or(dims[axis] / 2);
    if k >= dims[axis] {
        return Err(CliError::Usage(format!("slice {k} outside 0..{}", dims[axis])));
    }
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let index = |r: usize, c: usize| {
        let mut p = [0; 3];
        p[axis] = k;
        p[ra] = r;
        p[ca] = c;
        (p[0] * dims[1] + p[1]) * dims[2] + p[2]
    };
    let mut out = String::new();
    match &v {
        Volume::Labels(l) => {
            for r in 0..dims[ra] {
                for c in 0..dims[ca] {
                    let x = l.data()[index(r, c)];
                    out.push(if x == 0 { '.' } else { char::from_digit(x as u32 % 36, 36).expect("digit") });
                }
                out.push('\n');
            }
        }
        Volume::Image(t) => {
            let ch = t.channel(0);
            let vals: Vec<f32> = (0..dims[ra] * dims[ca]).map(|i| ch[index(i / dims[ca], i % dims[ca])]).collect();
            let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for row in vals.chunks(dims[ca]) {
                for &x in row {
                    let s = (((x - lo) / span) * (SHADES.len() - 1) as f32).round() as usize;
                    out.push(SHADES[s.min(SHADES.len() - 1)] as char);
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}
