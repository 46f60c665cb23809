//! Ablation presets: token selection paths, learning-scheme terms and
//! scene-held-out robustness.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::trainer::{evaluate, train, EvalMode, TrainConfig};
use crate::data::{select_split, DatasetMeta, Manifest, VideoSample};
use crate::error::{invalid, LairError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Table1,
    Table2,
    Table3,
}

impl FromStr for Preset {
    type Err = LairError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Self::Table1),
            "table2" => Ok(Self::Table2),
            "table3" => Ok(Self::Table3),
            other => Err(invalid(format!("unknown preset '{other}' (expected table1, table2 or table3)"))),
        }
    }
}

/// One flag combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    pub sim: bool,
    pub tss: bool,
    pub xm: bool,
    pub spatial: bool,
    pub temporal: bool,
    pub language_branch: bool,
}

impl Setting {
    fn full(name: &str) -> Self {
        Self {
            name: name.into(),
            sim: true,
            tss: true,
            xm: true,
            spatial: true,
            temporal: true,
            language_branch: true,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.objective.sim = self.sim;
        c.objective.tss = self.tss;
        c.objective.xm = self.xm;
        c.objective.language_branch = self.language_branch;
        c.model.spatial_select = self.spatial;
        c.model.temporal_select = self.temporal;
        c
    }
}

impl Preset {
    pub fn settings(self) -> Vec<Setting> {
        let scheme = |name: &str, sim: bool, tss: bool, xm: bool| Setting {
            sim,
            tss,
            xm,
            ..Setting::full(name)
        };
        let select = |name: &str, spatial: bool, temporal: bool| Setting {
            spatial,
            temporal,
            ..Setting::full(name)
        };
        match self {
            Self::Table1 => vec![
                select("DT-Former w/o S,T", false, false),
                select("DT-Former w/o S", false, true),
                select("DT-Former w/o T", true, false),
                select("DT-Former", true, true),
            ],
            Self::Table2 => vec![
                scheme("none", false, false, false),
                scheme("sim", true, false, false),
                scheme("tss", false, true, false),
                scheme("xm", false, false, true),
                scheme("sim+xm", true, false, true),
                scheme("sim+tss+xm", true, true, true),
            ],
            Self::Table3 => vec![
                Setting {
                    sim: false,
                    tss: false,
                    xm: false,
                    language_branch: false,
                    ..Setting::full("video-only")
                },
                Setting::full("full scheme"),
            ],
        }
    }
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: Setting,
    pub seeds: Vec<u64>,
    /// One report per seed (per seed and fold for the robustness preset).
    pub reports: Vec<Vec<MetricsReport>>,
    pub accuracy: Vec<f64>,
    pub num: Vec<f64>,
    pub map: Vec<f64>,
    pub mar: Vec<f64>,
    /// Across-fold accuracy variance per seed (robustness preset only).
    pub fold_variance: Vec<f64>,
}

impl SettingResult {
    pub fn accuracy_mean_se(&self) -> (f64, f64) {
        mean_se(&self.accuracy)
    }

    pub fn num_mean(&self) -> f64 {
        mean_se(&self.num).0
    }

    pub fn fold_variance_mean(&self) -> f64 {
        mean_se(&self.fold_variance).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub preset: Preset,
    pub rows: Vec<SettingResult>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&SettingResult> {
        self.rows.iter().find(|r| r.setting.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let mark = |b: bool| if b { "✓" } else { "-" };
        match self.preset {
            Preset::Table3 => {
                let _ = writeln!(s, "| method | accuracy (mean ± se) | fold variance | seeds |");
                let _ = writeln!(s, "|---|---|---|---|");
            }
            _ => {
                let _ = writeln!(s, "| setting | S | T | sim | tss | xm | accuracy (mean ± se) | mAP | mAR | Num | seeds |");
                let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
            }
        }
        for r in &self.rows {
            let (m, se) = r.accuracy_mean_se();
            let st = &r.setting;
            match self.preset {
                Preset::Table3 => {
                    let _ = writeln!(
                        s,
                        "| {} | {:.4} ± {:.4} | {:.6} | {} |",
                        st.name,
                        m,
                        se,
                        r.fold_variance_mean(),
                        r.seeds.len()
                    );
                }
                _ => {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} | {} | {:.4} ± {:.4} | {:.4} | {:.4} | {:.2} | {} |",
                        st.name,
                        mark(st.spatial),
                        mark(st.temporal),
                        mark(st.sim),
                        mark(st.tss),
                        mark(st.xm),
                        m,
                        se,
                        mean_se(&r.map).0,
                        mean_se(&r.mar).0,
                        r.num_mean(),
                        r.seeds.len()
                    );
                }
            }
        }
        s
    }
}

fn run_split(config: &TrainConfig, meta: &DatasetMeta, train_set: &[VideoSample], test_set: &[VideoSample]) -> Result<MetricsReport> {
    let out = train(config, meta, train_set, None, None)?;
    evaluate(&out.model, test_set, EvalMode::VideoOnly)
}

/// Runs every setting of a preset for every seed.
pub fn run_setting(
    preset: Preset,
    setting: &Setting,
    base: &TrainConfig,
    meta: &DatasetMeta,
    samples: &[VideoSample],
    manifest: &Manifest,
    seeds: &[u64],
) -> Result<SettingResult> {
    let mut res = SettingResult {
        setting: setting.clone(),
        seeds: seeds.to_vec(),
        reports: Vec::new(),
        accuracy: Vec::new(),
        num: Vec::new(),
        map: Vec::new(),
        mar: Vec::new(),
        fold_variance: Vec::new(),
    };
    for &seed in seeds {
        let mut config = setting.apply(base);
        config.seed = seed;
        let reports = match preset {
            Preset::Table3 => {
                if manifest.folds.is_empty() {
                    return Err(invalid("dataset manifest has no scene-held-out folds"));
                }
                manifest
                    .folds
                    .iter()
                    .map(|f| {
                        let tr = select_split(samples, &f.train)?;
                        let te = select_split(samples, &f.test)?;
                        run_split(&config, meta, &tr, &te)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => {
                let tr = select_split(samples, &manifest.split(&base.train_split)?)?;
                let te = select_split(samples, &manifest.split(&base.eval_split)?)?;
                vec![run_split(&config, meta, &tr, &te)?]
            }
        };
        let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        res.accuracy.push(accs.iter().sum::<f64>() / accs.len() as f64);
        res.num.push(avg(|r| r.num));
        res.map.push(avg(|r| r.map));
        res.mar.push(avg(|r| r.mar));
        if preset == Preset::Table3 {
            res.fold_variance.push(variance(&accs));
        }
        res.reports.push(reports);
    }
    Ok(res)
}

pub fn run_ablation(
    preset: Preset,
    base: &TrainConfig,
    meta: &DatasetMeta,
    samples: &[VideoSample],
    manifest: &Manifest,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(invalid("need at least one seed"));
    }
    let rows = preset
        .settings()
        .iter()
        .map(|s| {
            log::info!("ablation {:?}: {}", preset, s.name);
            run_setting(preset, s, base, meta, samples, manifest, seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { preset, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_has_six_rows() {
        let rows = Preset::Table2.settings();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.spatial && r.temporal));
        assert!("table4".parse::<Preset>().is_err());
    }

    #[test]
    fn stats() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((variance(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }
}
