//! Experiment execution and the files it leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperfed_core::checkpoint::{load_hyper, load_params, save_hyper, save_params};
use hyperfed_core::dataset::{save_dataset, simulate_dataset, InstitutionData, Task};
use hyperfed_core::federation::{
    evaluate, initial_model, predict, run_rounds, ClientData, ClientRound, PartitionedModel, RunOptions, StrategyKind,
};
use hyperfed_core::hypernet::{encode_geometry, GeometryBounds};
use hyperfed_core::metrics::{line_profile, MetricReport, SampleMetric};
use hyperfed_core::nets::{ImagingNet, NetInput};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const DONE_MARKER: &str = "DONE";

/// Simulated data of every institution, shared by all strategies of a
/// comparison.
pub struct Prepared {
    pub data: Vec<InstitutionData>,
    pub clients: Vec<ClientData<f32>>,
    pub bounds: GeometryBounds,
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let data = cfg
        .institution_configs()?
        .iter()
        .map(simulate_dataset)
        .collect::<Result<Vec<_>, _>>()?;
    let clients = data
        .iter()
        .map(|d| ClientData::from_datasets(&d.train, &d.test, cfg.fbp_filter))
        .collect::<Result<Vec<_>, _>>()?;
    let bounds = GeometryBounds::from_geometries(data.iter().map(|d| &d.train.geometry))?;
    Ok(Prepared { data, clients, bounds })
}

/// Runs `f` on a pool of `cfg.threads` workers (the global pool if unset).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub strategy: StrategyKind,
    pub task: Task,
    pub seed: u64,
    pub rounds: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub round: usize,
    pub clients: Vec<ClientRound>,
}

/// One row of `metrics.csv`: an institution, `overall` (sample mean) or
/// `institution_mean` (mean of the institution means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub institution: String,
    pub n_samples: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub institution: u32,
    pub sample: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub institution: String,
    pub metric: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub x: usize,
    pub target: f64,
    pub input: f64,
    pub output: f64,
}

pub fn metrics_rows(r: &MetricReport) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = r
        .institutions
        .iter()
        .map(|i| MetricsRow {
            institution: i.institution.to_string(),
            n_samples: i.n_samples,
            psnr: i.mean_psnr,
            ssim: i.mean_ssim,
        })
        .collect();
    rows.push(MetricsRow {
        institution: "overall".into(),
        n_samples: r.samples.len(),
        psnr: r.overall.psnr,
        ssim: r.overall.ssim,
    });
    rows.push(MetricsRow {
        institution: "institution_mean".into(),
        n_samples: r.samples.len(),
        psnr: r.overall_institution_mean.psnr,
        ssim: r.overall_institution_mean.ssim,
    });
    rows
}

fn box_rows(r: &MetricReport) -> Vec<BoxRow> {
    let mut rows = Vec::new();
    let mut push = |who: String, metric: &str, b: Option<hyperfed_core::metrics::FiveNumber>| {
        if let Some(b) = b {
            rows.push(BoxRow {
                institution: who,
                metric: metric.into(),
                min: b.min,
                q1: b.q1,
                median: b.median,
                q3: b.q3,
                max: b.max,
            });
        }
    };
    for i in &r.institutions {
        push(i.institution.to_string(), "psnr", i.psnr_box);
        push(i.institution.to_string(), "ssim", i.ssim_box);
    }
    push("overall".into(), "psnr", r.overall_psnr_box);
    push("overall".into(), "ssim", r.overall_ssim_box);
    rows
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<R>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<Result<Vec<R>, _>>()?)
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_metrics(dir: &Path, file_stem: &str, m: &MetricsFile) -> CliResult<()> {
    write_json(&dir.join(format!("{file_stem}.json")), m)?;
    write_csv(&dir.join(format!("{file_stem}.csv")), &metrics_rows(&m.report))?;
    Ok(())
}

fn sample_rows(r: &MetricReport) -> Vec<SampleRow> {
    r.samples
        .iter()
        .map(|s| SampleRow {
            institution: s.institution,
            sample: s.sample,
            psnr: s.psnr,
            ssim: s.ssim,
        })
        .collect()
}

fn shown_input(input: &NetInput<f32>) -> &hyperfed_tensor::Tensor<f32> {
    match input {
        NetInput::Image(x) => x,
        NetInput::Sinogram { init, .. } => init,
    }
}

fn checkpoint_paths(dir: &Path, id: u32) -> (PathBuf, PathBuf) {
    (dir.join(format!("inst_{id}.hfck")), dir.join(format!("inst_{id}_hyper.hfck")))
}

/// Final personalized metrics plus per-institution middle-row profiles of
/// the first test image.
fn final_evaluation(
    net: &ImagingNet,
    kind: StrategyKind,
    prep: &Prepared,
    models: &[PartitionedModel<f32>],
) -> CliResult<(MetricReport, Vec<(u32, Vec<ProfileRow>)>)> {
    let mut samples: Vec<SampleMetric> = Vec::new();
    let mut profiles = Vec::new();
    for (model, client) in models.iter().zip(&prep.clients) {
        let g = encode_geometry(&client.geometry_raw, &prep.bounds)?;
        samples.extend(evaluate(net, model, kind, &g, &client.test)?);
        if let Some(ex) = client.test.first() {
            let out = predict(net, model, kind, &g, &ex.input)?;
            let row = ex.target.shape()[2] / 2;
            let t = line_profile(&ex.target, row)?;
            let i = line_profile(shown_input(&ex.input), row)?;
            let o = line_profile(&out, row)?;
            let rows = (0..t.len())
                .map(|x| ProfileRow {
                    x,
                    target: t[x],
                    input: i[x],
                    output: o[x],
                })
                .collect();
            profiles.push((client.institution_id, rows));
        }
    }
    Ok((MetricReport::from_samples(samples), profiles))
}

fn write_evaluation_artifacts(
    out: &Path,
    stem: &str,
    m: &MetricsFile,
    profiles: &[(u32, Vec<ProfileRow>)],
) -> CliResult<()> {
    write_metrics(out, stem, m)?;
    write_csv(&out.join("samples.csv"), &sample_rows(&m.report))?;
    write_csv(&out.join("boxplot.csv"), &box_rows(&m.report))?;
    let pdir = out.join("profiles");
    fs::create_dir_all(&pdir)?;
    for (id, rows) in profiles {
        write_csv(&pdir.join(format!("inst_{id}.csv")), rows)?;
    }
    Ok(())
}

fn begin(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let done = out.join(DONE_MARKER);
    if done.exists() {
        fs::remove_file(&done)?;
    }
    fs::write(out.join("effective_config.json"), cfg.to_json())?;
    Ok(out)
}

/// Simulates every institution and writes the HFDS splits.
pub fn simulate_to_disk(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let out = begin(cfg)?;
    let dir = out.join("datasets");
    fs::create_dir_all(&dir)?;
    let prep = with_threads(cfg.threads, || prepare(cfg))??;
    let mut written = Vec::new();
    for d in &prep.data {
        for (split, ds) in [("train", &d.train), ("test", &d.test)] {
            let p = dir.join(format!("inst_{}_{split}.hfds", ds.institution_id));
            save_dataset(&p, ds)?;
            written.push(p);
        }
    }
    fs::write(out.join(DONE_MARKER), "")?;
    Ok(written)
}

/// Trains one strategy on prepared data and writes every artifact.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> CliResult<MetricsFile> {
    let out = begin(cfg)?;
    let net = cfg.network_for_task();
    let kind = cfg.strategy.strategy;
    let opts = RunOptions {
        eval_every: cfg.eval_every,
        record_payloads: false,
        parallel: true,
    };
    let started = Instant::now();
    let (outcome, (report, profiles)) = with_threads(cfg.threads, || -> CliResult<_> {
        let outcome = run_rounds(
            &net,
            &prep.clients,
            &prep.bounds,
            &cfg.strategy,
            cfg.network.hyper_hidden,
            cfg.seed,
            opts,
        )?;
        let eval = final_evaluation(&net, kind, prep, &outcome.models)?;
        Ok((outcome, eval))
    })??;

    let history: String = outcome
        .history
        .iter()
        .map(|r| {
            let line = HistoryLine {
                round: r.round,
                clients: r.clients.clone(),
            };
            serde_json::to_string(&line).map(|s| s + "\n")
        })
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(out.join("history.jsonl"), history)?;

    let ck = out.join("checkpoints");
    fs::create_dir_all(&ck)?;
    save_params(ck.join("global.hfck"), &outcome.global_w)?;
    let layout = net.layout();
    for m in &outcome.models {
        let (w_path, xi_path) = checkpoint_paths(&ck, m.institution_id);
        save_params(w_path, &m.shared_w)?;
        if kind.uses_hypernet() {
            save_hyper(xi_path, &m.private_xi, &layout)?;
        }
    }

    let m = MetricsFile {
        strategy: kind,
        task: cfg.task,
        seed: cfg.seed,
        rounds: cfg.strategy.rounds,
        report,
    };
    write_evaluation_artifacts(&out, "metrics", &m, &profiles)?;
    fs::write(out.join(DONE_MARKER), "")?;
    eprintln!(
        "{kind}: {} rounds in {:.1}s, overall PSNR {:.3} dB, SSIM {:.4}",
        cfg.strategy.rounds,
        started.elapsed().as_secs_f64(),
        m.report.overall.psnr,
        m.report.overall.ssim
    );
    Ok(m)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<MetricsFile> {
    let prep = with_threads(cfg.threads, || prepare(cfg))??;
    run_prepared(cfg, &prep)
}

/// Re-evaluates the checkpoints of a finished run in `cfg.output_dir`.
pub fn eval_checkpoints(cfg: &ExperimentConfig) -> CliResult<MetricsFile> {
    let out = cfg.output_dir.clone();
    let ck = out.join("checkpoints");
    let net = cfg.network_for_task();
    let kind = cfg.strategy.strategy;
    let prep = with_threads(cfg.threads, || prepare(cfg))??;
    let (_, xi0) = initial_model::<f32>(&net, cfg.network.hyper_hidden, cfg.seed)?;
    let layout = net.layout();
    let models = prep
        .clients
        .iter()
        .map(|c| {
            let (w_path, xi_path) = checkpoint_paths(&ck, c.institution_id);
            let shared_w = load_params(&w_path)?;
            net.check_params(&shared_w)?;
            let private_xi = if kind.uses_hypernet() {
                let (xi, stored) = load_hyper(&xi_path)?;
                if stored != layout {
                    return Err(CliError::Config(format!(
                        "{} was written for a different network",
                        xi_path.display()
                    )));
                }
                xi
            } else {
                xi0.clone()
            };
            Ok(PartitionedModel {
                institution_id: c.institution_id,
                shared_w,
                private_xi,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (report, _) = with_threads(cfg.threads, || final_evaluation(&net, kind, &prep, &models))??;
    let m = MetricsFile {
        strategy: kind,
        task: cfg.task,
        seed: cfg.seed,
        rounds: cfg.strategy.rounds,
        report,
    };
    write_metrics(&out, "eval_metrics", &m)?;
    Ok(m)
}

/// Wide table: one row per institution plus `overall`, two columns per
/// strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub strategies: Vec<StrategyKind>,
    pub rows: Vec<(String, Vec<(f64, f64)>)>,
}

impl Comparison {
    pub fn from_runs(runs: &[MetricsFile]) -> Self {
        let first = &runs[0].report;
        let mut rows: Vec<(String, Vec<(f64, f64)>)> = first
            .institutions
            .iter()
            .map(|i| {
                let cols = runs
                    .iter()
                    .map(|r| {
                        r.report
                            .institution(i.institution)
                            .map_or((f64::NAN, f64::NAN), |s| (s.mean_psnr, s.mean_ssim))
                    })
                    .collect();
                (i.institution.to_string(), cols)
            })
            .collect();
        rows.push((
            "overall".into(),
            runs.iter().map(|r| (r.report.overall.psnr, r.report.overall.ssim)).collect(),
        ));
        Self {
            strategies: runs.iter().map(|r| r.strategy).collect(),
            rows,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["institution".to_string()];
        for s in &self.strategies {
            h.push(format!("{s}_psnr"));
            h.push(format!("{s}_ssim"));
        }
        h
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for (who, cols) in &self.rows {
            let mut rec = vec![who.clone()];
            for (p, s) in cols {
                rec.push(p.to_string());
                rec.push(s.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.clone();
        let strategies = header
            .iter()
            .skip(1)
            .step_by(2)
            .map(|h| {
                h.strip_suffix("_psnr")
                    .ok_or_else(|| CliError::Config(format!("unexpected column `{h}`")))?
                    .parse::<StrategyKind>()
                    .map_err(CliError::from)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> CliResult<f64> {
                rec.get(i)
                    .ok_or_else(|| CliError::Config("short comparison row".into()))?
                    .parse()
                    .map_err(|e| CliError::Config(format!("bad number: {e}")))
            };
            let cols = (0..strategies.len())
                .map(|k| Ok((num(1 + 2 * k)?, num(2 + 2 * k)?)))
                .collect::<CliResult<Vec<_>>>()?;
            rows.push((rec[0].to_string(), cols));
        }
        Ok(Self { strategies, rows })
    }
}

/// Runs each strategy on the same simulated data and seed, each into its own
/// subdirectory, and writes `comparison.csv`.
pub fn compare_strategies(cfg: &ExperimentConfig, strategies: &[StrategyKind]) -> CliResult<Comparison> {
    if strategies.is_empty() {
        return Err(CliError::Config("strategies: at least one strategy is required".into()));
    }
    let out = begin(cfg)?;
    let prep = with_threads(cfg.threads, || prepare(cfg))??;
    let mut runs = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let mut c = cfg.clone();
        c.strategy.strategy = s;
        c.output_dir = out.join(s.name());
        runs.push(run_prepared(&c, &prep)?);
    }
    let table = Comparison::from_runs(&runs);
    table.write(&out.join("comparison.csv"))?;
    fs::write(out.join(DONE_MARKER), "")?;
    Ok(table)
}

/// Human-readable summary of the desk-scale acquisitions and their
/// conditioning vectors.
pub fn inspect_config(cfg: &ExperimentConfig) -> CliResult<String> {
    let insts = cfg.institution_configs()?;
    let acq: Vec<_> = insts.iter().map(|c| c.acquisition()).collect();
    let bounds = GeometryBounds::from_geometries(acq.iter())?;
    let mut s = format!(
        "task {:?}, {} institutions, grid {}² (reference {}²), strategy {}, T={} E={} lr={}\n",
        cfg.task,
        insts.len(),
        cfg.grid_size,
        cfg.reference_grid,
        cfg.strategy.strategy,
        cfg.strategy.rounds,
        cfg.strategy.local_epochs,
        cfg.strategy.learning_rate
    );
    for (c, g) in insts.iter().zip(&acq) {
        let v = encode_geometry(&g.raw_vector(), &bounds)?;
        s += &format!(
            "institution {}: {} views x {} bins, pixel {:.3} mm, bin {:.3} mm, SOD {} mm, DOD {} mm, I0 {:.4e}; train {} test {}; g = {:.4?}\n",
            c.id,
            g.n_views,
            g.n_bins,
            g.pixel_length_mm,
            g.bin_length_mm,
            g.source_to_center_mm,
            g.detector_to_center_mm,
            g.incident_intensity,
            c.n_train,
            c.n_test,
            v.values()
        );
    }
    Ok(s)
}
