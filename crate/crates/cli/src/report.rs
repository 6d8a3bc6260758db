//! `cirl report`: tables and plots over a directory of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use cirl_core::evaluation::{independence_curve, SWEEP_HEADER};
use cirl_core::training::MetricsLog;

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

/// Registers a system font for plot text. Plots are drawn without text
/// when none is found.
fn register_font() -> bool {
    for p in FONT_PATHS {
        if let Ok(bytes) = std::fs::read(p) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    log::warn!("no usable font found; plots will have no text");
    false
}

fn find_files(dir: &Path, pred: &dyn Fn(&Path) -> bool, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_files(&p, pred, out)?;
        } else if pred(&p) {
            out.push(p);
        }
    }
    Ok(())
}

pub struct Run {
    pub dir: PathBuf,
    pub log: MetricsLog,
}

impl Run {
    fn variant(&self) -> String {
        self.log.config.flags().label()
    }

    fn name(&self) -> String {
        format!(
            "{}/{}/s{}",
            self.log.target_domain.as_deref().unwrap_or("?"),
            self.variant(),
            self.log.config.seed
        )
    }
}

pub fn collect_runs(root: &Path) -> Result<Vec<Run>> {
    let mut files = Vec::new();
    find_files(root, &|p| p.file_name().is_some_and(|n| n == "metrics.json"), &mut files)?;
    files
        .into_iter()
        .map(|f| {
            let log = MetricsLog::read(&f)?;
            Ok(Run {
                dir: f.parent().unwrap_or(root).to_path_buf(),
                log,
            })
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// One row per run plus a per-(variant, target) mean/std summary.
pub fn ablation_tables(runs: &[Run]) -> (String, String) {
    let mut rows = String::from("variant,target_domain,seed,best_epoch,target_accuracy,final_independence\n");
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        let target = r.log.target_domain.clone().unwrap_or_default();
        let acc = r.log.target_accuracy;
        let ind = r.log.epochs.last().map(|e| e.independence_degree).unwrap_or(f64::NAN);
        writeln!(
            rows,
            "{},{},{},{},{},{:.6}",
            r.variant(),
            target,
            r.log.config.seed,
            r.log.best_epoch,
            acc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ind
        )
        .expect("string write");
        if let Some(a) = acc {
            groups.entry((r.variant(), target)).or_default().push(a);
        }
    }
    let mut summary = String::from("variant,target_domain,runs,mean_accuracy,std_accuracy\n");
    for ((variant, target), accs) in &groups {
        let (m, s) = mean_std(accs);
        writeln!(summary, "{variant},{target},{},{m:.6},{s:.6}", accs.len()).expect("string write");
    }
    (rows, summary)
}

/// `(param, value) -> mean accuracy` over every sweep CSV under `root`.
pub fn sensitivity_table(root: &Path) -> Result<Vec<(String, f64, f64, usize)>> {
    let mut files = Vec::new();
    find_files(root, &|p| p.extension().is_some_and(|e| e == "csv"), &mut files)?;
    let mut groups: BTreeMap<(String, String), (f64, Vec<f64>)> = BTreeMap::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        let mut lines = text.lines();
        if lines.next() != Some(SWEEP_HEADER) {
            continue;
        }
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                bail!("{}: malformed sweep row `{line}`", f.display());
            }
            let value: f64 = cols[1].parse().with_context(|| format!("{}: bad value", f.display()))?;
            let entry = groups.entry((cols[0].to_string(), cols[1].to_string())).or_insert((value, Vec::new()));
            if let Ok(a) = cols[4].parse::<f64>() {
                entry.1.push(a);
            }
        }
    }
    let mut out: Vec<_> = groups
        .into_iter()
        .filter(|(_, (_, accs))| !accs.is_empty())
        .map(|((param, _), (value, accs))| (param, value, mean_std(&accs).0, accs.len()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(out)
}

type Series = (String, Vec<(f64, f64)>);

fn line_plot(path: &Path, title: &str, y_desc: &str, series: &[Series], text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        bail!("nothing to plot for {}", path.display());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("epoch").y_desc(y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart.draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))?;
        if text {
            drawn
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

fn bar_plot(path: &Path, title: &str, bars: &[(String, f64)], text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
    }
    let n = bars.len();
    let mut chart = builder.build_cartesian_2d(0f64..n as f64, 0f64..1f64)?;
    let mut mesh = chart.configure_mesh();
    mesh.disable_x_mesh();
    if text {
        let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        mesh.x_labels(n.max(1) * 2)
            .x_label_formatter(&move |x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 0.26 {
                    labels.get(i).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("target accuracy")
            .draw()?;
    } else {
        mesh.x_labels(0).y_labels(0).draw()?;
    }
    chart.draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
        Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v.clamp(0.0, 1.0))], BLUE.mix(0.7).filled())
    }))?;
    root.present()?;
    Ok(())
}

pub fn run(metrics_dir: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let runs = collect_runs(metrics_dir)?;
    let sens = sensitivity_table(metrics_dir)?;
    if runs.is_empty() && sens.is_empty() {
        bail!("no metrics.json or sweep CSV under {}", metrics_dir.display());
    }
    let text = register_font();

    if !runs.is_empty() {
        let (rows, summary) = ablation_tables(&runs);
        std::fs::write(out.join("ablation.csv"), rows)?;
        std::fs::write(out.join("summary.csv"), &summary)?;
        print!("{summary}");

        let loss: Vec<Series> = runs
            .iter()
            .map(|r| {
                let pts = r.log.epochs.iter().map(|e| (e.epoch as f64, e.losses.total_model)).collect();
                (r.name(), pts)
            })
            .collect();
        line_plot(&out.join("loss.png"), "training loss", "model objective", &loss, text)?;

        let mut ind: Vec<Series> = Vec::new();
        for r in &runs {
            match independence_curve(&r.log.epochs) {
                Ok(c) => ind.push((r.name(), c.into_iter().map(|(e, v)| (e as f64, v)).collect())),
                Err(e) => log::warn!("{}: no independence curve: {e}", r.dir.display()),
            }
        }
        if !ind.is_empty() {
            line_plot(
                &out.join("independence.png"),
                "independence degree",
                "squared off-diagonal correlation",
                &ind,
                text,
            )?;
        }
    }

    if !sens.is_empty() {
        let mut csv = String::from("param,value,mean_accuracy,cells\n");
        for (p, v, m, n) in &sens {
            writeln!(csv, "{p},{v},{m:.6},{n}").expect("string write");
        }
        std::fs::write(out.join("sensitivity.csv"), csv)?;
        let mut params: Vec<&str> = sens.iter().map(|s| s.0.as_str()).collect();
        params.dedup();
        for p in params {
            let bars: Vec<(String, f64)> =
                sens.iter().filter(|s| s.0 == p).map(|s| (format!("{}", s.1), s.2)).collect();
            bar_plot(&out.join(format!("sensitivity_{p}.png")), &format!("sensitivity to {p}"), &bars, text)?;
        }
    }
    println!("report written to {}", out.display());
    Ok(())
}
