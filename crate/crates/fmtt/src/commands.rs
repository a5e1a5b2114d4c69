//! `sample`, `search`, `diagnose` and `refine`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fmtt_core::diagnostics::{refine_iteratively, DiscrepancyTrace};
use fmtt_core::oracles::{quadrature_1d, snis_tilted_expectation, TiltedOracle};
use fmtt_core::rng::substream;
use fmtt_core::smc::{run_with, softmax, Executor, Mode, Resampling, RunConfig, RunResult};
use fmtt_core::State;
use serde_json::{json, Value};

use crate::config::{ConfigError, Experiment, ExperimentConfig, Observable, ScheduleFile};

/// Stream index for oracle draws, disjoint from particle streams.
const ORACLE_STREAM: u64 = u64::MAX - 16;

/// Mean and standard error of the mean; the error is NaN for fewer than two values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Within-run standard error of a weighted mean, `sqrt(Var_w(h) / ESS)`.
pub fn weighted_stderr(run: &RunResult, values: &[f64]) -> anyhow::Result<f64> {
    let p = softmax(&run.ensemble.log_weights)?;
    let mean: f64 = p.iter().zip(values).map(|(w, v)| w * v).sum();
    let var: f64 = p.iter().zip(values).map(|(w, v)| w * (v - mean).powi(2)).sum();
    Ok((var / run.ensemble.ess()?).sqrt())
}

/// Estimate paired with its standard error.
fn est(mean: f64, stderr: f64) -> Value {
    json!({ "mean": mean, "stderr": stderr })
}

pub struct Runner<'a, E: Executor> {
    pub experiment: &'a Experiment,
    pub exec: &'a E,
    pub out: PathBuf,
}

impl<'a, E: Executor> Runner<'a, E> {
    pub fn new(experiment: &'a Experiment, exec: &'a E, out: impl Into<PathBuf>) -> Self {
        Self { experiment, exec, out: out.into() }
    }

    fn repeat_seed(&self, j: usize) -> u64 {
        self.experiment.run.seed.wrapping_add(j as u64)
    }

    /// One run per repeat with seeds `seed + j`.
    pub fn runs(&self, base: &RunConfig) -> anyhow::Result<Vec<RunResult>> {
        (0..self.experiment.config.repeats)
            .map(|j| {
                let mut cfg = base.clone();
                cfg.seed = self.repeat_seed(j);
                Ok(run_with(&cfg, &self.experiment.reward, self.exec)?)
            })
            .collect()
    }

    fn prepare(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        fs::write(self.out.join("config_resolved.toml"), self.experiment.config.to_toml())?;
        Ok(())
    }

    fn run_dir(&self, j: usize) -> anyhow::Result<PathBuf> {
        let dir = self.out.join("runs").join(format!("{j:03}"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn observable(&self) -> Observable {
        self.experiment.config.output.observable
    }

    fn observe(&self, x: &State) -> f64 {
        self.observable().eval(self.experiment.path.target(), x)
    }

    /// Ground truth for the observable under the tilted target, with its kind.
    pub fn oracle(&self) -> anyhow::Result<(f64, f64, &'static str)> {
        let exp = self.experiment;
        let target = exp.path.target();
        let reward = exp.reward.reward();
        let oracle = TiltedOracle::new(target.clone(), reward.clone());
        if let (Some(tilt), Observable::Coordinate { index }) = (oracle.closed_form(), self.observable()) {
            return Ok((tilt.mean[index], 0.0, "closed_form"));
        }
        if exp.path.dim() == 1 {
            let obs = self.observable();
            let (_, mean) = quadrature_1d(target, reward, |x| obs.eval(target, &State::from_element(1, x)), 12.0, 20_000)?;
            return Ok((mean, 0.0, "quadrature"));
        }
        let mut rng = substream(exp.config.seed, ORACLE_STREAM, 0);
        let e = snis_tilted_expectation(target, reward, |x| self.observe(x), exp.config.output.snis_samples, &mut rng)?;
        Ok((e.estimate, e.stderr, "snis"))
    }

    pub fn sample(&self) -> anyhow::Result<Value> {
        let exp = self.experiment;
        if exp.run.mode != Mode::Sampling {
            anyhow::bail!("`sample` needs run.mode = \"sampling\"");
        }
        self.prepare()?;
        let runs = self.runs(&exp.run)?;
        let mut means = Vec::with_capacity(runs.len());
        let mut rewards = Vec::with_capacity(runs.len());
        let mut log_zs = Vec::with_capacity(runs.len());
        let mut within = Vec::with_capacity(runs.len());
        for (j, run) in runs.iter().enumerate() {
            let dir = self.run_dir(j)?;
            write_trace(&dir.join("trace.csv"), run)?;
            if exp.config.diagnostics.enabled {
                write_diagnostics(&dir.join("diagnostics.csv"), &DiscrepancyTrace::from_run(run, exp.estimator.sign)?)?;
            }
            let values: Vec<f64> = run.ensemble.positions.iter().map(|x| self.observe(x)).collect();
            means.push(run.expectation(|x| self.observe(x))?);
            within.push(weighted_stderr(run, &values)?);
            rewards.push(run.steps.last().map_or(f64::NAN, |s| s.mean_reward));
            log_zs.push(run.log_z(run.schedule.len() - 1)?);
        }
        let (tilted, mut tilted_se) = mean_stderr(&means);
        if runs.len() == 1 {
            tilted_se = within[0];
        }
        let (oracle, oracle_se, oracle_kind) = self.oracle()?;
        let combined = (tilted_se.powi(2) + oracle_se.powi(2)).sqrt();
        let (reward, reward_se) = mean_stderr(&rewards);
        let (log_z, log_z_se) = mean_stderr(&log_zs);
        let mut summary = json!({
            "command": "sample",
            "seed": exp.config.seed,
            "repeats": runs.len(),
            "particles": exp.run.particles,
            "steps": exp.run.steps(),
            "observable": self.observable(),
            "tilted_mean": tilted,
            "tilted_stderr": tilted_se,
            "oracle_mean": oracle,
            "oracle_stderr": oracle_se,
            "oracle_kind": oracle_kind,
            "within_3se": (tilted - oracle).abs() <= 3.0 * combined,
            "mean_reward": est(reward, reward_se),
            "log_z": est(log_z, log_z_se),
            "resampling_events": runs.iter().map(|r| r.events.len()).collect::<Vec<_>>(),
        });
        if exp.config.diagnostics.enabled {
            let diag = self.diagnostics_summary(&runs)?;
            write_diagnostics(&self.out.join("diagnostics.csv"), &diag.0)?;
            merge(&mut summary, diag.1);
        }
        write_summary(&self.out, &summary)?;
        Ok(summary)
    }

    /// Pooled trace plus `D_total`, `Lambda` and `quality_ratio` with spreads over repeats.
    fn diagnostics_summary(&self, runs: &[RunResult]) -> anyhow::Result<(DiscrepancyTrace, Value)> {
        let pooled = DiscrepancyTrace::from_runs(runs, self.experiment.estimator)?;
        let singles = runs
            .iter()
            .map(|r| DiscrepancyTrace::from_run(r, self.experiment.estimator.sign))
            .collect::<Result<Vec<_>, _>>()?;
        let totals: Vec<f64> = singles.iter().map(|t| t.total()).collect();
        let lengths: Vec<f64> = singles.iter().map(|t| t.thermodynamic_length().total()).collect();
        let (_, d_se) = mean_stderr(&totals);
        let (_, l_se) = mean_stderr(&lengths);
        let quality = pooled.quality_ratio().ok();
        let value = json!({
            "D_total": pooled.total(),
            "D_total_stderr": d_se,
            "Lambda": pooled.thermodynamic_length().total(),
            "Lambda_stderr": l_se,
            "Lambda_bound": pooled.length_bound(),
            "quality_ratio": quality,
            "quality_ratio_defined": quality.is_some(),
        });
        Ok((pooled, value))
    }

    pub fn search(&self) -> anyhow::Result<Value> {
        let exp = self.experiment;
        if exp.run.mode != Mode::Searching {
            anyhow::bail!("`search` needs run.mode = \"searching\"");
        }
        self.prepare()?;
        let mut baseline_cfg = exp.run.clone();
        baseline_cfg.clones = 1;
        baseline_cfg.resampling = Resampling::Never;
        let searched = self.runs(&exp.run)?;
        let baseline = self.runs(&baseline_cfg)?;
        let target = exp.path.target();
        let reward = exp.reward.reward();
        let mut table = csv::Writer::from_path(self.out.join("terminal_rewards.csv"))?;
        table.write_record(["repeat", "variant", "particle", "reward", "entropy"])?;
        let mut stats = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
        for (j, pair) in searched.iter().zip(&baseline).enumerate() {
            write_trace(&self.run_dir(j)?.join("trace.csv"), pair.0)?;
            for (v, (name, run)) in [("search", pair.0), ("baseline", pair.1)].into_iter().enumerate() {
                let mut r_sum = 0.0;
                let mut h_sum = 0.0;
                for (i, x) in run.ensemble.positions.iter().enumerate() {
                    let r = reward.value(x)?;
                    let h = target.posterior_entropy(x)?;
                    table.serialize((j, name, i, r, h))?;
                    r_sum += r;
                    h_sum += h;
                }
                let n = run.ensemble.len() as f64;
                stats[v][0].push(r_sum / n);
                stats[v][1].push(h_sum / n);
            }
        }
        table.flush()?;
        let pairs = |v: usize, m: usize| {
            let (mean, se) = mean_stderr(&stats[v][m]);
            est(mean, se)
        };
        let wins = |m: usize, better: fn(f64, f64) -> bool| {
            stats[0][m].iter().zip(&stats[1][m]).filter(|(a, b)| better(**a, **b)).count()
        };
        let summary = json!({
            "command": "search",
            "seed": exp.config.seed,
            "repeats": searched.len(),
            "particles": exp.run.particles,
            "clones": exp.run.clones,
            "steps": exp.run.steps(),
            "search_reward": pairs(0, 0),
            "baseline_reward": pairs(1, 0),
            "search_entropy": pairs(0, 1),
            "baseline_entropy": pairs(1, 1),
            "reward_wins": wins(0, |a, b| a > b),
            "entropy_wins": wins(1, |a, b| a < b),
        });
        write_summary(&self.out, &summary)?;
        Ok(summary)
    }

    pub fn diagnose(&self) -> anyhow::Result<Value> {
        let exp = self.experiment;
        if exp.run.mode != Mode::Sampling {
            anyhow::bail!("`diagnose` needs run.mode = \"sampling\"");
        }
        self.prepare()?;
        let runs = self.runs(&exp.run)?;
        let (trace, mut summary) = self.diagnostics_summary(&runs)?;
        write_diagnostics(&self.out.join("diagnostics.csv"), &trace)?;
        write_barrier(&self.out.join("barrier.csv"), &trace)?;
        let refined = trace.thermodynamic_length().refine(trace.steps())?;
        write_schedule(&self.out.join("schedule_refined.toml"), &refined.schedule)?;
        if refined.flat {
            eprintln!("warning: flat barrier; the refined schedule equals the input");
        }
        merge(&mut summary, json!({ "command": "diagnose", "seed": exp.config.seed, "repeats": runs.len(), "flat_barrier": refined.flat }));
        write_summary(&self.out, &summary)?;
        Ok(summary)
    }

    pub fn refine(&self) -> anyhow::Result<Value> {
        let exp = self.experiment;
        if exp.run.mode != Mode::Sampling {
            anyhow::bail!("`refine` needs run.mode = \"sampling\"");
        }
        self.prepare()?;
        let mut failure = None;
        let mut totals: Vec<Vec<f64>> = Vec::new();
        let history = refine_iteratively(exp.run.schedule.clone(), exp.config.diagnostics.refine_rounds, |schedule| {
            let mut cfg = exp.run.clone();
            cfg.schedule = schedule.to_vec();
            match self.runs(&cfg) {
                Ok(runs) => {
                    totals.push(
                        runs.iter()
                            .map(|r| DiscrepancyTrace::from_run(r, exp.estimator.sign).map(|t| t.total()))
                            .collect::<Result<_, _>>()?,
                    );
                    DiscrepancyTrace::from_runs(&runs, exp.estimator)
                }
                Err(e) => {
                    failure = Some(e);
                    Err(fmtt_core::Error::Undefined("round after a failed run"))
                }
            }
        });
        let history = match (history, failure) {
            (_, Some(e)) => return Err(e),
            (h, None) => h?,
        };
        let mut rounds = Vec::with_capacity(history.len());
        for (r, ((schedule, trace), per_run)) in history.iter().zip(&totals).enumerate() {
            let dir = self.out.join(format!("round_{r}"));
            fs::create_dir_all(&dir)?;
            write_schedule(&dir.join("schedule.toml"), schedule)?;
            write_diagnostics(&dir.join("diagnostics.csv"), trace)?;
            let (_, se) = mean_stderr(per_run);
            rounds.push(json!({
                "round": r,
                "D_total": trace.total(),
                "D_total_stderr": se,
                "Lambda": trace.thermodynamic_length().total(),
                "quality_ratio": trace.quality_ratio().ok(),
            }));
        }
        let (last, last_trace) = history.last().expect("at least one round");
        let flat = !(last_trace.thermodynamic_length().total() > 0.0);
        let next = if flat {
            eprintln!("warning: flat barrier; the refined schedule equals the input");
            last.clone()
        } else {
            last_trace.thermodynamic_length().refine(last_trace.steps())?.schedule
        };
        write_schedule(&self.out.join("schedule_refined.toml"), &next)?;
        let summary = json!({
            "command": "refine",
            "seed": exp.config.seed,
            "repeats": exp.config.repeats,
            "rounds": rounds,
            "flat_barrier": flat,
        });
        write_summary(&self.out, &summary)?;
        Ok(summary)
    }
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

pub fn write_summary(dir: &Path, summary: &Value) -> anyhow::Result<()> {
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// `step,t,ess,resampled,logZ,mean_reward`; `logZ` is empty in search mode.
pub fn write_trace(file: &Path, run: &RunResult) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["step", "t", "ess", "resampled", "logZ", "mean_reward"])?;
    for s in &run.steps {
        let log_z = s.log_z.map(|z| z.to_string()).unwrap_or_default();
        w.write_record([s.step.to_string(), s.t.to_string(), s.ess.to_string(), s.resampled.to_string(), log_z, s.mean_reward.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `step,t,D_hat,Lambda_cum`.
pub fn write_diagnostics(file: &Path, trace: &DiscrepancyTrace) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["step", "t", "D_hat", "Lambda_cum"])?;
    let knots = trace.thermodynamic_length().knots;
    for (k, d) in trace.increments.iter().enumerate() {
        let (t, lambda) = knots[k + 1];
        w.serialize((k + 1, t, d, lambda))?;
    }
    w.flush()?;
    Ok(())
}

fn write_barrier(file: &Path, trace: &DiscrepancyTrace) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["t", "Lambda"])?;
    for knot in trace.thermodynamic_length().knots {
        w.serialize(knot)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schedule(file: &Path, times: &[f64]) -> anyhow::Result<()> {
    fs::write(file, toml::to_string(&ScheduleFile { times: times.to_vec() })?)?;
    Ok(())
}

/// Loads and validates a config, overriding its seed and paper-literal options.
pub fn load_experiment(file: &Path, seed: Option<u64>, paper_literal: bool) -> Result<Experiment, ConfigError> {
    let mut cfg = ExperimentConfig::load(file)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if paper_literal {
        cfg.diagnostics.sign = crate::config::SignName::PaperLiteral;
        cfg.run.expectation_paper_literal = true;
    }
    cfg.build()
}
