//! Experiment orchestration: replica batches, ensemble-size sweeps,
//! output writers, and the subcommand pipelines behind the binary.
//!
//! Replica paths are embarrassingly parallel: each seed derives its own
//! streams, runs serially, and the results are merged in seed order, so
//! every summary number is independent of the worker count.

use crate::config::{InitSpec, RunConfig};
use crate::current::{
    current_residual, fixed_points, solve_current, CurrentParams, CurrentSolution,
};
use crate::error::{Error, Result};
use crate::flows::Ensemble;
use crate::kernel::Kernel;
use crate::metrics::{
    self, factorization_gap_paired, mean_stderr, sup_distance, PhasePoint, PocReport,
    PocSweepPoint, TestFunction,
};
use crate::processes::{run_coupled, sample_history, CouplingRecord, RunOptions};
use crate::rng::RandomStream;
use crate::util;
use crate::vbe1d::{compare_current, solve_vbe, VbeOptions, VbeState, VelocityGrid};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Format tag written into every output file.
pub const FORMAT_VERSION: u32 = 1;

/// Output format for time series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" => Ok(OutputFormat::Jsonl),
            other => Err(Error::Config(format!(
                "format must be csv or jsonl, got {other:?}"
            ))),
        }
    }
}

/// Provenance and summary of one executed subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    /// Crate version that produced the record.
    pub artifact_version: String,
    /// SHA-256 of the resolved configuration text.
    pub config_hash: String,
    /// The full resolved configuration (TOML; empty for re-analysis of
    /// files that carry no embedded config).
    pub config: String,
    pub master_seed: u64,
    pub seeds: usize,
    pub timing_s: f64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

/// Hex SHA-256 of a configuration text.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Write a JSONL file: one header object, then one object per line.
pub fn write_jsonl(
    path: &Path,
    header: &serde_json::Value,
    lines: &[serde_json::Value],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Write a CSV file with a version comment and a column-name header.
pub fn write_csv(
    path: &Path,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# thermokin-series v{FORMAT_VERSION}")?;
    writeln!(out, "{}", columns.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Write a time series as CSV or as JSONL (header object + one object per
/// row); returns the path written, `stem` plus the format's extension.
pub fn write_series(
    stem: &Path,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
    format: OutputFormat,
) -> Result<PathBuf> {
    match format {
        OutputFormat::Csv => {
            let path = stem.with_extension("csv");
            write_csv(&path, columns, rows)?;
            Ok(path)
        }
        OutputFormat::Jsonl => {
            let path = stem.with_extension("jsonl");
            let header = json!({
                "format": "thermokin-series",
                "version": FORMAT_VERSION,
                "columns": columns,
            });
            let lines: Vec<serde_json::Value> = rows
                .map(|row| {
                    let mut obj = serde_json::Map::new();
                    for (name, value) in columns.iter().zip(&row) {
                        obj.insert(name.to_string(), json!(value));
                    }
                    serde_json::Value::Object(obj)
                })
                .collect();
            write_jsonl(&path, &header, &lines)?;
            Ok(path)
        }
    }
}

/// Build the initial ensemble for one replica.
fn initial_ensemble(cfg: &RunConfig, n: usize, stream: &RandomStream) -> Result<Ensemble> {
    match cfg.init {
        InitSpec::Maxwellian => Ensemble::maxwellian(n, cfg.d, cfg.u_tilde, stream, true),
        InitSpec::SpeedShell => Ensemble::speed_shell(n, cfg.d, cfg.u_tilde, stream),
    }
}

/// Solve the mean current for this configuration (initial current zero,
/// matching the centered initial families).
pub fn solve_configured_current(cfg: &RunConfig, kernel: &Kernel) -> Result<CurrentSolution> {
    let rho = kernel.current_damping_rate()?;
    let params = CurrentParams::new(cfg.d, &cfg.e, cfg.u_tilde, rho)?;
    let j0 = vec![0.0; cfg.d];
    solve_current(&params, &j0, cfg.horizon, 1e-3)
}

/// Run `seeds` coupled replicas of size `n`, in parallel over a worker
/// pool, merged in seed order.
pub fn run_replicas(
    cfg: &RunConfig,
    kernel: &Kernel,
    current: &CurrentSolution,
    n: usize,
) -> Result<Vec<CouplingRecord>> {
    let mut opts = RunOptions::new(cfg.sample_dt);
    opts.flow_dt = cfg.flow_dt;
    let e = cfg.e_vec();
    let run_one = |seed: u64| -> Result<CouplingRecord> {
        let master = RandomStream::new(cfg.master_seed).child(seed).master();
        let stream = RandomStream::new(master);
        let v0 = initial_ensemble(cfg, n, &stream.child(0))?;
        let history = sample_history(n, cfg.horizon, &stream.child(1))?;
        run_coupled(kernel, &v0, &history, &e, current, &opts)
    };
    if cfg.threads <= 1 {
        (0..cfg.seeds as u64).map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::ResourceLimit(format!("worker pool: {e}")))?;
        pool.install(|| (0..cfg.seeds as u64).into_par_iter().map(run_one).collect())
    }
}

/// One summary line per replica path (the JSONL schema).
pub fn path_line(cfg: &RunConfig, n: usize, seed: u64, rec: &CouplingRecord) -> serde_json::Value {
    json!({
        "seed": seed,
        "N": n,
        "d": cfg.d,
        "params": params_block(cfg),
        "terminal_distance": rec.distance.last().copied().unwrap_or(0.0),
        "sup_distance": sup_distance(rec),
        "max_iso_residual": rec.max_iso_residual,
        "b_energy_min": rec.b_energy_min,
        "energy_floor_hit": rec.energy_floor_hit,
        "events": rec.events_applied,
    })
}

fn params_block(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "e": cfg.e,
        "u_tilde": cfg.u_tilde,
        "horizon": cfg.horizon,
        "sample_dt": cfg.sample_dt,
        "init": format!("{:?}", cfg.init),
    })
}

fn file_header(cfg: &RunConfig, kind: &str) -> Result<serde_json::Value> {
    let resolved = cfg.resolved().to_toml()?;
    Ok(json!({
        "format": format!("thermokin-{kind}"),
        "version": FORMAT_VERSION,
        "config_hash": config_hash(&resolved),
        "config": resolved,
    }))
}

/// Tagged pair velocities of every replica at the sample index nearest
/// `t`, as phase points (positions at the origin).
pub fn pairs_at(
    records: &[CouplingRecord],
    t: f64,
    side_b: bool,
) -> Result<Vec<[PhasePoint; 2]>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let (k, tk) = rec
            .sample_times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .map(|(k, &tk)| (k, tk))
            .ok_or_else(|| Error::InsufficientData("record holds no samples".into()))?;
        if (tk - t).abs() > 1e-9 {
            return Err(Error::OutOfRange(format!(
                "no sample at t = {t}; nearest is {tk}"
            )));
        }
        let pair = if side_b { &rec.pair_b[k] } else { &rec.pair_a[k] };
        out.push([
            (util::ZERO3, pair[0]),
            (util::ZERO3, pair[1]),
        ]);
    }
    Ok(out)
}

/// Full sweep product: per-size replica records plus the scaling report.
pub struct SweepOutcome {
    pub sizes: Vec<usize>,
    pub records: Vec<Vec<CouplingRecord>>,
    pub report: PocReport,
}

/// Run the ensemble-size sweep and fit the scaling report. Gaps are the
/// matched-pair estimates at `gap_time`.
pub fn run_sweep(cfg: &RunConfig, gap_time: f64) -> Result<SweepOutcome> {
    let sizes = cfg.sizes();
    if sizes.len() < 2 {
        return Err(Error::InvalidParameter(
            "a sweep needs n_sweep with at least two sizes".into(),
        ));
    }
    let kernel = cfg.kernel.build(cfg.d)?;
    let current = solve_configured_current(cfg, &kernel)?;
    let bank_stream = RandomStream::new(cfg.master_seed ^ 0x9e3779b97f4a7c15);
    let bank = TestFunction::bank(cfg.d, &bank_stream)?;
    let mut records = Vec::with_capacity(sizes.len());
    let mut points = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let recs = run_replicas(cfg, &kernel, &current, n)?;
        let sups: Vec<f64> = recs.iter().map(sup_distance).collect();
        let (mean, stderr) = mean_stderr(&sups)?;
        let pa = pairs_at(&recs, gap_time, false)?;
        let pb = pairs_at(&recs, gap_time, true)?;
        let mut gaps = Vec::new();
        for phi in &bank {
            let est = factorization_gap_paired(&pa, &pb, phi, &bank_stream)?;
            gaps.push((phi.name().to_string(), est));
        }
        points.push(PocSweepPoint {
            n,
            seeds: recs.len(),
            mean_sup_distance: mean,
            stderr_sup_distance: stderr,
            gaps,
        });
        records.push(recs);
    }
    let report = metrics::poc_report(points)?;
    Ok(SweepOutcome {
        sizes,
        records,
        report,
    })
}

fn single_size(cfg: &RunConfig) -> Result<usize> {
    cfg.n.or_else(|| cfg.sizes().first().copied()).ok_or_else(|| {
        Error::Config("this subcommand needs a single ensemble size n".into())
    })
}

/// `solve-current`: integrate the mean current and report its rest points.
pub fn cmd_solve_current(
    cfg: &RunConfig,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<RunRecord> {
    let t0 = Instant::now();
    ensure_dir(out_dir)?;
    let kernel = cfg.kernel.build(cfg.d)?;
    let sol = solve_configured_current(cfg, &kernel)?;
    let rho = kernel.current_damping_rate()?;
    let params = CurrentParams::new(cfg.d, &cfg.e, cfg.u_tilde, rho)?;
    let rest = if params.e_mag() > 0.0 {
        Some(fixed_points(&params)?)
    } else {
        None
    };
    let e_hat = if params.e_mag() > 0.0 {
        util::scale(&cfg.e_vec(), 1.0 / params.e_mag())
    } else {
        [1.0, 0.0, 0.0]
    };
    let path = write_series(
        &out_dir.join("current"),
        &["t", "y", "jx", "jy", "jz", "j_perp"],
        sol.times().iter().enumerate().map(|(k, &t)| {
            let j = sol.j_series()[k];
            let y = sol.y_series()[k];
            let perp = util::norm(&util::sub(&j, &util::scale(&e_hat, y)));
            vec![t, y, j[0], j[1], j[2], perp]
        }),
        format,
    )?;
    let terminal = *sol.y_series().last().unwrap();
    let residual = current_residual(&sol, &params)?;
    let summary = json!({
        "rho": rho,
        "y_minus": rest.map(|r| r.0),
        "y_plus": rest.map(|r| r.1),
        "terminal_y": terminal,
        "terminal_gap": rest.map(|r| (terminal - r.1).abs()),
        "residual": residual,
    });
    finish_record(cfg, t0, vec![path], summary)
}

/// `run-coupled`: replica batch at one size; JSONL lines plus the first
/// replica's distance series.
pub fn cmd_run_coupled(
    cfg: &RunConfig,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<RunRecord> {
    let t0 = Instant::now();
    ensure_dir(out_dir)?;
    let n = single_size(cfg)?;
    let kernel = cfg.kernel.build(cfg.d)?;
    let current = solve_configured_current(cfg, &kernel)?;
    let records = run_replicas(cfg, &kernel, &current, n)?;
    let lines: Vec<serde_json::Value> = records
        .iter()
        .enumerate()
        .map(|(s, r)| path_line(cfg, n, s as u64, r))
        .collect();
    let jsonl = out_dir.join("paths.jsonl");
    write_jsonl(&jsonl, &file_header(cfg, "paths")?, &lines)?;
    let first = &records[0];
    let series = write_series(
        &out_dir.join("distance"),
        &["t", "distance"],
        first
            .sample_times
            .iter()
            .zip(&first.distance)
            .map(|(&t, &d)| vec![t, d]),
        format,
    )?;
    let sups: Vec<f64> = records.iter().map(sup_distance).collect();
    let terminal: Vec<f64> = records
        .iter()
        .map(|r| r.distance.last().copied().unwrap_or(0.0))
        .collect();
    let max_iso = records
        .iter()
        .map(|r| r.max_iso_residual)
        .fold(0.0f64, f64::max);
    let floor_hits = records.iter().filter(|r| r.energy_floor_hit).count();
    let summary = json!({
        "n": n,
        "replicas": records.len(),
        "terminal_distance": terminal,
        "sup_distance": sups,
        "max_iso_residual": max_iso,
        "b_energy_min": records.iter().map(|r| r.b_energy_min).fold(f64::INFINITY, f64::min),
        "energy_floor_hits": floor_hits,
    });
    finish_record(cfg, t0, vec![jsonl, series], summary)
}

/// `sweep-N`: size sweep with the scaling report.
pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path, format: OutputFormat) -> Result<RunRecord> {
    let t0 = Instant::now();
    ensure_dir(out_dir)?;
    let gap_time = sweep_gap_time(cfg);
    let outcome = run_sweep(cfg, gap_time)?;
    let mut lines = Vec::new();
    for (si, recs) in outcome.records.iter().enumerate() {
        for (s, r) in recs.iter().enumerate() {
            lines.push(path_line(cfg, outcome.sizes[si], s as u64, r));
        }
    }
    let jsonl = out_dir.join("paths.jsonl");
    write_jsonl(&jsonl, &file_header(cfg, "paths")?, &lines)?;
    let report_path = out_dir.join("poc_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)?;
    let series = write_series(
        &out_dir.join("sweep"),
        &["n", "mean_sup_distance", "stderr_sup_distance"],
        outcome
            .report
            .points
            .iter()
            .map(|p| vec![p.n as f64, p.mean_sup_distance, p.stderr_sup_distance]),
        format,
    )?;
    let summary = json!({
        "sizes": outcome.sizes,
        "distance_slope": outcome.report.distance_slope,
        "gap_slopes": outcome.report.gap_slopes,
        "gap_time": gap_time,
    });
    finish_record(cfg, t0, vec![jsonl, report_path, series], summary)
}

/// Gap evaluation time for sweeps: t = 1 when the horizon allows it,
/// otherwise the horizon itself.
pub fn sweep_gap_time(cfg: &RunConfig) -> f64 {
    if cfg.horizon >= 1.0 {
        1.0
    } else {
        cfg.horizon
    }
}

/// `vbe1d`: grid solve against the configured current.
pub fn cmd_vbe(cfg: &RunConfig, out_dir: &Path, format: OutputFormat) -> Result<RunRecord> {
    let t0 = Instant::now();
    ensure_dir(out_dir)?;
    if cfg.d != 1 {
        return Err(Error::UnsupportedDimension(
            "the grid solver is one-dimensional; set d = 1".into(),
        ));
    }
    let resolved = cfg.resolved();
    let cells = resolved.grid_cells.unwrap();
    let v_max = resolved.v_max.unwrap();
    let keep_snapshots = resolved.snapshots.unwrap_or(false);
    let kernel = cfg.kernel.build(1)?;
    let current = solve_configured_current(cfg, &kernel)?;
    let grid = VelocityGrid::maxwellian(v_max, cells, cfg.u_tilde)?;
    let state = VbeState::new(grid);
    let mut opts = VbeOptions::new(cfg.sample_dt);
    opts.store_snapshots = keep_snapshots;
    let run = solve_vbe(&state, cfg.e[0], &current, cfg.horizon, &opts)?;
    let deviation = compare_current(&run, &current)?;
    let series = write_series(
        &out_dir.join("vbe"),
        &["t", "j_tilde", "u_tilde", "a"],
        run.times.iter().enumerate().map(|(k, &t)| {
            vec![t, run.currents[k], run.energies[k], run.fourths[k]]
        }),
        format,
    )?;
    let mut outputs = vec![series];
    if keep_snapshots {
        let grid_ref = &run.final_state.grid;
        let snap = write_series(
            &out_dir.join("snapshots"),
            &["t", "v", "f"],
            run.snapshots.iter().flat_map(|(t, f)| {
                f.iter()
                    .enumerate()
                    .map(move |(i, &fv)| vec![*t, grid_ref.center(i), fv])
            }),
            format,
        )?;
        outputs.push(snap);
    }
    let summary = json!({
        "cells": cells,
        "v_max": v_max,
        "terminal_j": run.currents.last().unwrap(),
        "terminal_mass": run.masses.last().unwrap(),
        "current_deviation": deviation,
        "outflow_total": run.outflow_total,
        "snapshots": run.snapshots.len(),
    });
    finish_record(cfg, t0, outputs, summary)
}

/// `metrics`: re-analyze a replica JSONL file — group by size, aggregate
/// distances, fit the scaling slope, and rebuild a report when the file
/// spans enough sizes.
pub fn cmd_metrics(input: &Path, out_dir: &Path, format: OutputFormat) -> Result<RunRecord> {
    let t0 = Instant::now();
    ensure_dir(out_dir)?;
    let text = std::fs::read_to_string(input)?;
    let mut by_n: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    let mut embedded_config = String::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::Serialization(format!("{}:{}: {e}", input.display(), ln + 1))
        })?;
        if v.get("format").is_some() {
            if let Some(c) = v.get("config").and_then(|x| x.as_str()) {
                embedded_config = c.to_string();
            }
            continue; // header line
        }
        let n = v
            .get("N")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| Error::Serialization(format!("line {}: missing N", ln + 1)))?;
        let term = v
            .get("terminal_distance")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| {
                Error::Serialization(format!("line {}: missing terminal_distance", ln + 1))
            })?;
        let sup = v
            .get("sup_distance")
            .and_then(|x| x.as_f64())
            .unwrap_or(term);
        by_n.entry(n as usize).or_default().push((term, sup));
    }
    if by_n.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} holds no replica lines",
            input.display()
        )));
    }
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut ns = Vec::new();
    let mut means = Vec::new();
    for (&n, vals) in &by_n {
        let sups: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let (m, se) = if sups.len() >= 2 {
            mean_stderr(&sups)?
        } else {
            (sups[0], 0.0)
        };
        rows.push(vec![n as f64, m, se, sups.len() as f64]);
        points.push(PocSweepPoint {
            n,
            seeds: sups.len(),
            mean_sup_distance: m,
            stderr_sup_distance: se,
            gaps: Vec::new(), // path summaries carry no pair functionals
        });
        ns.push(n as f64);
        means.push(m);
    }
    let slope = if ns.len() >= 2 && means.iter().all(|&m| m > 0.0) {
        Some(util::loglog_slope(&ns, &means)?)
    } else {
        None
    };
    let series = write_series(
        &out_dir.join("distance_by_n"),
        &["n", "mean_sup_distance", "stderr_sup_distance", "replicas"],
        rows.into_iter(),
        format,
    )?;
    let mut outputs = vec![series];
    if let Some(s) = slope {
        let report = PocReport {
            n_values: by_n.keys().copied().collect(),
            points,
            distance_slope: s,
            gap_slopes: Vec::new(),
        };
        let report_path = out_dir.join("poc_report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
        outputs.push(report_path);
    }
    let master_seed = crate::config::validate_config(&embedded_config)
        .map(|c| c.master_seed)
        .unwrap_or(0);
    let summary = json!({
        "sizes": by_n.keys().collect::<Vec<_>>(),
        "distance_slope": slope,
    });
    let record = RunRecord {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: if embedded_config.is_empty() {
            config_hash(&text)
        } else {
            config_hash(&embedded_config)
        },
        config: embedded_config,
        master_seed,
        seeds: by_n.values().map(|v| v.len()).sum(),
        timing_s: t0.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        summary,
    };
    Ok(record)
}

fn finish_record(
    cfg: &RunConfig,
    t0: Instant,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
) -> Result<RunRecord> {
    let resolved = cfg.resolved().to_toml()?;
    Ok(RunRecord {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(&resolved),
        config: resolved,
        master_seed: cfg.master_seed,
        seeds: cfg.seeds,
        timing_s: t0.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("thermokin-test-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg() -> RunConfig {
        validate_config(
            r#"
            d = 2
            n = 32
            e = [0.5, 0.0]
            u_tilde = 1.0
            horizon = 0.5
            sample_dt = 0.25
            seeds = 3
            master_seed = 7
        "#,
        )
        .unwrap()
    }

    #[test]
    fn solve_current_pipeline_writes_series_and_rest_points() {
        let dir = tmpdir("solve");
        let rec = cmd_solve_current(&small_cfg(), &dir, OutputFormat::Csv).unwrap();
        assert_eq!(rec.outputs.len(), 1);
        assert_eq!(rec.artifact_version, env!("CARGO_PKG_VERSION"));
        assert!(rec.config.contains("u_tilde"));
        let text = std::fs::read_to_string(&rec.outputs[0]).unwrap();
        assert!(text.starts_with("# thermokin-series v1"));
        assert_eq!(text.lines().nth(1).unwrap(), "t,y,jx,jy,jz,j_perp");
        assert!(rec.summary["y_plus"].as_f64().unwrap() > 0.0);
        assert!(rec.summary["residual"].as_f64().unwrap() < 1e-6);
        // Same pipeline, JSONL output: a self-describing header then rows.
        let rec = cmd_solve_current(&small_cfg(), &dir, OutputFormat::Jsonl).unwrap();
        let text = std::fs::read_to_string(&rec.outputs[0]).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["format"], "thermokin-series");
        let row: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(row["t"].as_f64().unwrap(), 0.0);
        assert!(row.get("j_perp").is_some());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn coupled_pipeline_emits_schema_lines_and_reruns_identically() {
        let dir = tmpdir("coupled");
        let cfg = small_cfg();
        let rec1 = cmd_run_coupled(&cfg, &dir, OutputFormat::Csv).unwrap();
        let jsonl = std::fs::read_to_string(&rec1.outputs[0]).unwrap();
        let mut lines = jsonl.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["format"], "thermokin-paths");
        let first: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        for key in [
            "seed",
            "N",
            "d",
            "params",
            "terminal_distance",
            "max_iso_residual",
            "b_energy_min",
        ] {
            assert!(first.get(key).is_some(), "missing key {key}");
        }
        // Bit-exact reproducibility of all summary numbers.
        let rec2 = cmd_run_coupled(&cfg, &dir, OutputFormat::Csv).unwrap();
        assert_eq!(
            serde_json::to_string(&rec1.summary).unwrap(),
            serde_json::to_string(&rec2.summary).unwrap()
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut cfg = small_cfg();
        let kernel = cfg.kernel.build(cfg.d).unwrap();
        let current = solve_configured_current(&cfg, &kernel).unwrap();
        cfg.threads = 1;
        let serial = run_replicas(&cfg, &kernel, &current, 32).unwrap();
        cfg.threads = 3;
        let parallel = run_replicas(&cfg, &kernel, &current, 32).unwrap();
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.distance, b.distance);
            assert_eq!(a.iso_residuals, b.iso_residuals);
            assert_eq!(a.final_a.velocities, b.final_a.velocities);
            assert_eq!(a.final_b.velocities, b.final_b.velocities);
        }
    }

    #[test]
    fn metrics_pipeline_reanalyzes_jsonl() {
        let dir = tmpdir("metrics");
        let cfg = small_cfg();
        let rec = cmd_run_coupled(&cfg, &dir, OutputFormat::Csv).unwrap();
        let out = dir.join("reanalysis");
        let m = cmd_metrics(Path::new(&rec.outputs[0]), &out, OutputFormat::Csv).unwrap();
        assert_eq!(m.seeds, 3);
        // The embedded config survives the round trip through the header.
        assert_eq!(m.config, rec.config);
        assert_eq!(m.master_seed, 7);
        let csv = std::fs::read_to_string(&m.outputs[0]).unwrap();
        assert!(csv.contains("mean_sup_distance"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn vbe_pipeline_requires_one_dimension() {
        let dir = tmpdir("vbe");
        assert!(matches!(
            cmd_vbe(&small_cfg(), &dir, OutputFormat::Csv),
            Err(Error::UnsupportedDimension(_))
        ));
        let cfg = validate_config(
            r#"
            d = 1
            n = 16
            e = [1.0]
            u_tilde = 1.0
            horizon = 0.5
            sample_dt = 0.25
            grid_cells = 256
            snapshots = true
        "#,
        )
        .unwrap();
        let rec = cmd_vbe(&cfg, &dir, OutputFormat::Csv).unwrap();
        assert!(rec.summary["current_deviation"].as_f64().unwrap() < 1e-2);
        assert_eq!(rec.outputs.len(), 2, "snapshots file expected");
        let snap = std::fs::read_to_string(&rec.outputs[1]).unwrap();
        assert_eq!(snap.lines().nth(1).unwrap(), "t,v,f");
        // 3 sample times x 256 cells, plus the comment and header lines.
        assert_eq!(snap.lines().count(), 2 + 3 * 256);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn tiny_sweep_produces_a_report() {
        let cfg = validate_config(
            r#"
            d = 2
            n_sweep = [16, 64]
            e = [0.5, 0.0]
            u_tilde = 1.0
            horizon = 0.5
            sample_dt = 0.25
            seeds = 20
            master_seed = 11
        "#,
        )
        .unwrap();
        let outcome = run_sweep(&cfg, 0.5).unwrap();
        assert_eq!(outcome.report.points.len(), 2);
        assert!(outcome.report.points[0].mean_sup_distance > 0.0);
        // Larger ensembles sit closer to the mean-field path.
        assert!(
            outcome.report.points[1].mean_sup_distance
                < outcome.report.points[0].mean_sup_distance
        );
        assert_eq!(outcome.report.points[0].gaps.len(), 3);
    }
}
