use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::{Criterion, SparsityMode};

pub const METRICS_HEADER: &str = "setting,mode,criterion,p,epsilon_target,sigma,seed,step,epoch,train_loss,test_acc,eps_spent";

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: String,
    pub mode: SparsityMode,
    pub criterion: Criterion,
    pub p: f64,
    /// Empty when the run used an explicit noise multiplier.
    pub epsilon_target: Option<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub step: u64,
    pub epoch: f64,
    /// Mean loss over the batches since the previous row; empty before
    /// the first step.
    pub train_loss: Option<f64>,
    pub test_acc: f64,
    pub eps_spent: f64,
}

/// Final accuracy of one setting, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub setting: String,
    pub mode: SparsityMode,
    pub criterion: Criterion,
    pub p: f64,
    pub epsilon_target: Option<f64>,
    pub sigma: f64,
    pub seeds: usize,
    pub mean_test_acc: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std_test_acc: f64,
    pub eps_spent: f64,
    pub steps: u64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(format!("{}: {e}", path.display()))
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<R: DeserializeOwned>(path: &Path, header: Option<&str>) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    if let Some(want) = header {
        let got = r.headers().map_err(|e| csv_error(path, e))?;
        let got: Vec<&str> = got.iter().collect();
        if got.join(",") != want {
            return Err(Error::format(format!("{}: unexpected header {:?}", path.display(), got.join(","))));
        }
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Reads a per-run metrics file, checking its header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path, Some(METRICS_HEADER))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by setting, `p`, epsilon target and noise multiplier, in
/// order of first appearance, and averages the final row of each run.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    let mut groups: Vec<(MetricsRow, Vec<f64>)> = Vec::new();
    for run in runs {
        let Some(last) = run.iter().max_by_key(|r| r.step) else {
            continue;
        };
        let same = |g: &MetricsRow| {
            g.setting == last.setting
                && g.p.to_bits() == last.p.to_bits()
                && g.epsilon_target.map(f64::to_bits) == last.epsilon_target.map(f64::to_bits)
                && g.sigma.to_bits() == last.sigma.to_bits()
        };
        match groups.iter_mut().find(|(g, _)| same(g)) {
            Some((_, accs)) => accs.push(last.test_acc),
            None => groups.push((last.clone(), vec![last.test_acc])),
        }
    }
    groups
        .into_iter()
        .map(|(g, accs)| {
            let (mean, std) = mean_std(&accs);
            AggregateRow {
                setting: g.setting,
                mode: g.mode,
                criterion: g.criterion,
                p: g.p,
                epsilon_target: g.epsilon_target,
                sigma: g.sigma,
                seeds: accs.len(),
                mean_test_acc: mean,
                std_test_acc: std,
                eps_spent: g.eps_spent,
                steps: g.step,
            }
        })
        .collect()
}

/// A gnuplot script drawing mean accuracy against `p`, one line per
/// setting, from an aggregate CSV named `csv_name` in the same directory.
pub fn gnuplot_script(csv_name: &str, rows: &[AggregateRow]) -> String {
    let mut settings: Vec<&str> = Vec::new();
    for r in rows {
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    let png = Path::new(csv_name).with_extension("png");
    format!(
        "set datafile separator ','\n\
         set terminal pngcairo size 800,500\n\
         set output '{png}'\n\
         set xlabel 'pruning rate p'\n\
         set ylabel 'test accuracy'\n\
         set key bottom left\n\
         settings = \"{list}\"\n\
         plot for [s in settings] '{csv_name}' every ::1 \\\n\
         \x20   using 4:(strcol(1) eq s ? $8 : 1/0):9 with yerrorlines title s\n",
        png = png.display(),
        list = settings.join(" "),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(setting: &str, p: f64, seed: u64, step: u64, acc: f64) -> MetricsRow {
        MetricsRow {
            setting: setting.into(),
            mode: SparsityMode::Freezing,
            criterion: Criterion::Random,
            p,
            epsilon_target: Some(2.0),
            sigma: 1.1,
            seed,
            step,
            epoch: step as f64 / 10.0,
            train_loss: if step == 0 { None } else { Some(0.5) },
            test_acc: acc,
            eps_spent: step as f64 * 0.1,
        }
    }

    #[test]
    fn header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, &[row("random_freezing", 0.5, 0, 0, 0.9)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "random_freezing,freezing,random,0.5,2.0,1.1,0,0,0.0,,0.9,0.0");
        assert_eq!(read_metrics(&path).unwrap(), vec![row("random_freezing", 0.5, 0, 0, 0.9)]);
    }

    #[test]
    fn wrong_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Format(_))));
    }

    #[test]
    fn aggregate_uses_final_rows() {
        let runs: Vec<Vec<MetricsRow>> = (0..5)
            .map(|s| vec![row("random_freezing", 0.9, s, 0, 0.1), row("random_freezing", 0.9, s, 20, 0.90 + s as f64 * 0.01)])
            .chain(std::iter::once(vec![row("random_freezing", 0.0, 0, 20, 0.5)]))
            .collect();
        let agg = aggregate(&runs);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].seeds, 5);
        assert!((agg[0].mean_test_acc - 0.92).abs() < 1e-12);
        let want_std = (0.001f64 / 4.0).sqrt();
        assert!((agg[0].std_test_acc - want_std).abs() < 1e-12);
        assert_eq!(agg[0].steps, 20);
        assert_eq!(agg[1].seeds, 1);
        assert_eq!(agg[1].std_test_acc, 0.0);
    }

    #[test]
    fn plot_script_names_settings() {
        let agg = aggregate(&[vec![row("random_freezing", 0.0, 0, 1, 0.5)], vec![row("magnitude_selection", 0.0, 0, 1, 0.5)]]);
        let s = gnuplot_script("sweep.csv", &agg);
        assert!(s.contains("settings = \"random_freezing magnitude_selection\""));
        assert!(s.contains("set output 'sweep.png'"));
    }
}
