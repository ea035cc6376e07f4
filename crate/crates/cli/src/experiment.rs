//! Experiment runner: data loading, single training runs with their
//! artifacts, and the ablation and sweep grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use m2dan_core::checkpoint::save_checkpoint;
use m2dan_core::data::{benchmark_specs, load_dataset_dir, synthesize, DomainData};
use m2dan_core::metrics::{evaluate, MetricsReport};
use m2dan_core::model::{ModelBundle, ScaleVariant};
use m2dan_core::training::{train, train_source_only, ClassLoss, EpochRecord, TrainState};

use crate::config::{ExperimentConfig, Method};
use crate::svg::plot_history;
use crate::CliError;

pub const ALPHA_GRID: [f64; 4] = [0.0003, 0.003, 0.03, 0.3];
pub const ETA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

pub const CHECKPOINT_FILE: &str = "model.m2dn";
pub const HISTORY_FILE: &str = "history.csv";
pub const CURVES_FILE: &str = "curves.svg";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.txt";

pub fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Worker count from `M2DAN_THREADS`, 1 when unset.
pub fn worker_threads() -> Result<usize, CliError> {
    match std::env::var("M2DAN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("M2DAN_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// The configured dataset directory, or the synthetic benchmark.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Vec<DomainData>, CliError> {
    let data = match &cfg.data_dir {
        Some(dir) => load_dataset_dir(dir, cfg.half, cfg.image_size)?,
        None => synthesize(&benchmark_specs(cfg.scale_fraction), cfg.image_size, cfg.data_seed)?,
    };
    Ok(data)
}

/// A finished run and its final evaluation.
pub struct RunOutput {
    pub state: TrainState,
    pub report: MetricsReport,
}

pub fn run(
    cfg: &ExperimentConfig,
    data: &[DomainData],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput, CliError> {
    let model = ModelBundle::build(cfg.model_spec(data.len()), cfg.seed)?;
    let hp = cfg.hyper_params();
    let state = match cfg.method {
        Method::M2dan => train(model, data, &hp, cfg.objective(), on_epoch)?,
        Method::SourceOnly => train_source_only(model, data, &hp, cfg.class_loss, on_epoch)?,
    };
    let report = evaluate(&state.model, data)?;
    Ok(RunOutput { state, report })
}

/// Writes the checkpoint, history, curves, metrics and config echo into
/// `cfg.out_dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput) -> Result<PathBuf, CliError> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    save_checkpoint(&out.state, &dir.join(CHECKPOINT_FILE))?;
    let csv = out.state.history_csv();
    write(&dir.join(HISTORY_FILE), &csv)?;
    if !out.state.history.is_empty() {
        write(&dir.join(CURVES_FILE), &plot_history(&csv)?)?;
    }
    write(&dir.join(METRICS_FILE), &(out.report.to_json()? + "\n"))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(dir.clone())
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Scales,
    Losses,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scales" => Some(Ablation::Scales),
            "losses" => Some(Ablation::Losses),
            _ => None,
        }
    }
}

/// Variant names and their configs, in table order.
pub fn ablation_configs(base: &ExperimentConfig, which: Ablation) -> Vec<(String, ExperimentConfig)> {
    match which {
        Ablation::Scales => ScaleVariant::ALL
            .into_iter()
            .map(|v| {
                let mut c = base.clone();
                c.method = Method::M2dan;
                c.scale = v;
                (v.name().to_string(), c)
            })
            .collect(),
        Ablation::Losses => [
            (ClassLoss::CrossEntropy, false, false),
            (ClassLoss::Focal, false, false),
            (ClassLoss::Focal, true, false),
            (ClassLoss::Focal, true, true),
        ]
        .into_iter()
        .map(|(class_loss, domain_loss, entropy)| {
            let mut c = base.clone();
            c.method = Method::M2dan;
            c.class_loss = class_loss;
            c.domain_loss = domain_loss;
            c.entropy = entropy;
            (c.objective().label(), c)
        })
        .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Eta,
    Lambda,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alpha" => Some(SweepParam::Alpha),
            "eta" => Some(SweepParam::Eta),
            "lambda" => Some(SweepParam::Lambda),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Eta => "eta",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn grid(self) -> [f64; 4] {
        match self {
            SweepParam::Alpha => ALPHA_GRID,
            SweepParam::Eta => ETA_GRID,
            SweepParam::Lambda => LAMBDA_GRID,
        }
    }
}

pub fn sweep_configs(base: &ExperimentConfig, param: SweepParam) -> Vec<(f64, ExperimentConfig)> {
    param
        .grid()
        .into_iter()
        .map(|v| {
            let mut c = base.clone();
            match param {
                SweepParam::Alpha => c.alpha = v,
                SweepParam::Eta => c.eta = v,
                SweepParam::Lambda => c.lambda = v,
            }
            (v, c)
        })
        .collect()
}

/// Trains every config on the shared data with up to `threads` workers.
/// Results come back in input order whatever the scheduling.
pub fn run_grid(
    configs: &[ExperimentConfig],
    data: &[DomainData],
    threads: usize,
    progress: impl Fn(usize, &EpochRecord) + Sync,
) -> Result<Vec<MetricsReport>, CliError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<MetricsReport, CliError>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = run(cfg, data, |rec| progress(i, rec)).map(|o| o.report);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn target_names(reports: &[MetricsReport]) -> Vec<String> {
    reports
        .first()
        .map(|r| r.domains.iter().map(|d| d.name.clone()).collect())
        .unwrap_or_default()
}

/// `variant,acc_<t>,auc_<t>...,mean_acc,mean_auc` for each row.
pub fn ablation_csv(rows: &[(String, MetricsReport)]) -> String {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.1.clone()).collect();
    let mut out = String::from("variant");
    for t in target_names(&reports) {
        out.push_str(&format!(",acc_{t},auc_{t}"));
    }
    out.push_str(",mean_acc,mean_auc\n");
    for (name, r) in rows {
        out.push_str(name);
        for d in &r.domains {
            out.push_str(&format!(",{},{}", d.accuracy, d.auc));
        }
        out.push_str(&format!(",{},{}\n", r.mean_acc, r.mean_auc));
    }
    out
}

/// `<param>,auc_<t>...,mean_auc` for each grid value.
pub fn sweep_csv(param: SweepParam, rows: &[(f64, MetricsReport)]) -> String {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.1.clone()).collect();
    let mut out = String::from(param.name());
    for t in target_names(&reports) {
        out.push_str(&format!(",auc_{t}"));
    }
    out.push_str(",mean_auc\n");
    for (v, r) in rows {
        out.push_str(&v.to_string());
        for d in &r.domains {
            out.push_str(&format!(",{}", d.auc));
        }
        out.push_str(&format!(",{}\n", r.mean_auc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2dan_core::metrics::DomainMetrics;

    fn report(aucs: [f64; 2]) -> MetricsReport {
        let m = |name: &str, auc| DomainMetrics {
            name: name.into(),
            n: 4,
            accuracy: 0.5,
            auc,
        };
        MetricsReport::from_domains(vec![
            (true, m("source", 1.0)),
            (false, m("target1", aucs[0])),
            (false, m("target2", aucs[1])),
        ])
    }

    #[test]
    fn grids_are_exact() {
        assert_eq!(SweepParam::Alpha.grid(), [0.0003, 0.003, 0.03, 0.3]);
        assert_eq!(SweepParam::Eta.grid(), [0.001, 0.01, 0.1, 1.0]);
        assert_eq!(SweepParam::Lambda.grid(), [0.001, 0.01, 0.1, 1.0]);
        let cfgs = sweep_configs(&ExperimentConfig::default(), SweepParam::Eta);
        assert_eq!(cfgs.iter().map(|c| c.1.eta).collect::<Vec<_>>(), ETA_GRID);
    }

    #[test]
    fn ablation_rows_follow_the_tables() {
        let base = ExperimentConfig::default();
        let names: Vec<String> = ablation_configs(&base, Ablation::Scales).into_iter().map(|r| r.0).collect();
        assert_eq!(names, ["s1", "s3", "s5", "mixed"]);
        let names: Vec<String> = ablation_configs(&base, Ablation::Losses).into_iter().map(|r| r.0).collect();
        assert_eq!(names, ["ce", "focal", "focal+domain", "focal+domain+entropy"]);
    }

    #[test]
    fn csv_layouts() {
        let rows = vec![("s1".to_string(), report([0.5, 0.75]))];
        assert_eq!(
            ablation_csv(&rows),
            "variant,acc_target1,auc_target1,acc_target2,auc_target2,mean_acc,mean_auc\ns1,0.5,0.5,0.5,0.75,0.5,0.625\n"
        );
        let rows = vec![(0.0003, report([0.5, 0.75]))];
        assert_eq!(sweep_csv(SweepParam::Alpha, &rows), "alpha,auc_target1,auc_target2,mean_auc\n0.0003,0.5,0.75,0.625\n");
    }
}
