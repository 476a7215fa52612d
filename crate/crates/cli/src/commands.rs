//! The subcommands. Each writes its artifacts under the output directory and
//! registers them in the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use metais::controls::{Control, FeedForwardNet};
use metais::estimator::{estimate_psi, Estimate, ESTIMATE_CSV_HEADER};
use metais::hjb::{solve_hjb, HjbSolution};
use metais::metadynamics::{metadynamics_cumulative, metadynamics_single, MetaConfig, MetaResult};
use metais::potential::BiasPotential;
use metais::soc::{fit_init_gaussian, fit_init_net, train_with, RunRow, TrainObserver, RUN_CSV_HEADER};

use crate::config::{ControlKind, ExperimentConfig};
use crate::manifest::Manifest;
use crate::CliError;

pub const COMPARE_CSV_SCHEMA: &str = "metais-compare-v1";
pub const COMPARE_CSV_HEADER: &str =
    "schema,alpha,method,status,mean,variance,rel_error,ci_lo,ci_hi,k,truncated_count,mean_hitting_time,unreliable";
pub const RUN_CSV_SCHEMA: &str = "#schema=metais-run-v1";

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub out: &'a Path,
    /// Directory relative paths in the configuration are resolved against.
    pub base: &'a Path,
}

impl Context<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok((path.clone(), BufWriter::new(File::create(&path)?)))
    }

    fn write_text(&self, m: &mut Manifest, name: &str, text: &str) -> Result<(), CliError> {
        let (path, mut w) = self.create(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        drop(w);
        m.output(self.out, &path)
    }
}

fn alpha_label(alpha: &[f64]) -> String {
    alpha.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(";")
}

fn read_reference(path: &Path) -> Result<HjbSolution, CliError> {
    let f = File::open(path).map_err(|e| CliError::Config(format!("reference {}: {e}", path.display())))?;
    Ok(HjbSolution::read_csv(BufReader::new(f))?)
}

fn read_control(path: &Path) -> Result<Control, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("control {}: {e}", path.display())))?;
    Ok(Control::from_json(&text)?)
}

fn read_bias(path: &Path) -> Result<BiasPotential, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("bias {}: {e}", path.display())))?;
    Ok(BiasPotential::from_json(&text)?)
}

/// `"zero"`, an HJB solution CSV or a control JSON.
fn load_control(ctx: &Context, spec: &str, dim: usize, m: &mut Manifest) -> Result<Control, CliError> {
    if spec == "zero" {
        return Ok(Control::zero(dim));
    }
    let path = ctx.resolve(Path::new(spec));
    m.input(&path).map_err(|e| CliError::Config(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "csv") {
        read_reference(&path)?.control().map_err(Into::into)
    } else {
        read_control(&path)
    }
}

pub fn hjb(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let sec = ctx.cfg.hjb_section()?;
    let alphas = if sec.alpha_sweep.is_empty() { vec![ctx.cfg.potential.alpha.clone()] } else { sec.alpha_sweep.clone() };
    let mut summary = Vec::new();
    for (i, alpha) in alphas.iter().enumerate() {
        let problem = ctx.cfg.hjb_problem(alpha)?;
        let sol = solve_hjb(&problem)?;
        let name = format!("hjb_{i}.csv");
        let (path, w) = ctx.create(&name)?;
        sol.write_csv(w)?;
        m.output(ctx.out, &path)?;
        let x0 = &ctx.cfg.dynamics.x0;
        let psi_x0 = sol.psi_at(x0).ok();
        println!("alpha={} scheme={:?} residual={:.3e} psi(x0)={:?}", alpha_label(alpha), sol.scheme, sol.residual_norm, psi_x0);
        summary.push(json!({
            "file": name,
            "alpha": alpha,
            "beta": sol.beta,
            "h": problem.h,
            "nodes": sol.psi.len(),
            "scheme": sol.scheme,
            "residual_norm": sol.residual_norm,
            "x0": x0,
            "psi_x0": psi_x0,
        }));
    }
    let doc = json!({ "schema": "metais-hjb-summary-v1", "solutions": summary });
    ctx.write_text(m, "hjb.json", &(serde_json::to_string_pretty(&doc).unwrap() + "\n"))
}

fn run_meta(cfg: &MetaConfig) -> Result<MetaResult, CliError> {
    Ok(if cfg.k_meta > 1 { metadynamics_cumulative(cfg)? } else { metadynamics_single(cfg)? })
}

pub fn meta(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let mc = ctx.cfg.meta_config_for(&ctx.cfg.potential.alpha, ctx.seed)?;
    let res = run_meta(&mc)?;
    ctx.write_text(m, "bias.json", &(res.bias.to_json()? + "\n"))?;
    ctx.write_text(m, "meta_control.json", &(mc.control(&res.bias)?.to_json()? + "\n"))?;
    let (path, w) = ctx.create("meta_log.csv")?;
    res.write_log_csv(w)?;
    m.output(ctx.out, &path)?;
    println!("bumps={} trajectories={} incomplete={}", res.bias.len(), res.log.len(), res.incomplete());
    if res.incomplete() {
        return Err(CliError::Numerical("a metadynamics trajectory reached the step cap before the target".into()));
    }
    Ok(())
}

/// The metadynamics bias, read from `bias_file` or computed.
fn meta_bias(ctx: &Context, mc: &MetaConfig, m: &mut Manifest) -> Result<BiasPotential, CliError> {
    match &ctx.cfg.meta_section()?.bias_file {
        Some(p) => {
            let p = ctx.resolve(p);
            m.input(&p).map_err(|e| CliError::Config(e.to_string()))?;
            read_bias(&p)
        }
        None => {
            let res = run_meta(mc)?;
            if res.incomplete() {
                return Err(CliError::Numerical("metadynamics did not reach the target".into()));
            }
            Ok(res.bias)
        }
    }
}

pub fn fit(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let mc = ctx.cfg.meta_config_for(&ctx.cfg.potential.alpha, ctx.seed)?;
    let bias = meta_bias(ctx, &mc, m)?;
    let target = mc.control(&bias)?;
    let centers: Vec<Vec<f64>> = bias.bumps().iter().map(|b| b.mean().to_vec()).collect();
    let sampler = ctx.cfg.sampler(&centers)?;
    let fs = ctx.cfg.fit_section();
    let init = ctx.cfg.zero_init_control()?;
    let (ctrl, report) = match (ctx.cfg.control_section()?.kind, init) {
        (ControlKind::Network, Control::Network(_)) => {
            let c = ctx.cfg.control_section()?;
            let net = FeedForwardNet::with_hidden(ctx.cfg.potential.alpha.len(), &c.hidden, c.init_seed)?;
            let r = fit_init_net(&net, &target, &sampler, fs.steps, fs.lr, ctx.seed)?;
            let report = json!({
                "kind": "network",
                "steps": fs.steps,
                "initial_loss": r.initial_loss,
                "final_loss": r.final_loss,
            });
            (Control::Network(r.net), report)
        }
        (ControlKind::Gaussian, Control::Gaussian(mut ansatz)) => {
            let points = sampler.points(ctx.seed)?;
            let r = fit_init_gaussian(&ansatz, &target, &points)?;
            ansatz.set_weights(&r.weights)?;
            let report = json!({
                "kind": "gaussian",
                "points": points.len(),
                "residual_rms": r.residual_rms,
                "rank_deficient": r.rank_deficient,
            });
            (Control::Gaussian(ansatz), report)
        }
        _ => return Err(CliError::Config("fit needs control.kind = \"network\" or \"gaussian\"".into())),
    };
    println!("{report}");
    ctx.write_text(m, "control.json", &(ctrl.to_json()? + "\n"))?;
    let doc = json!({ "schema": "metais-fit-v1", "bumps": bias.len(), "report": report });
    ctx.write_text(m, "fit.json", &(serde_json::to_string_pretty(&doc).unwrap() + "\n"))
}

struct CliObserver<'a> {
    csv: BufWriter<File>,
    out: &'a Path,
    checkpoint_every: usize,
    progress_every: usize,
    checkpoints: Vec<PathBuf>,
    last: Option<Control>,
}

impl CliObserver<'_> {
    fn checkpoint(&mut self, name: &str, ctrl: &Control) -> metais::Result<()> {
        let dir = self.out.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        std::fs::write(&path, ctrl.to_json()? + "\n")?;
        self.checkpoints.push(path);
        Ok(())
    }
}

impl TrainObserver for CliObserver<'_> {
    fn on_step(&mut self, row: &RunRow, ctrl: &Control) -> metais::Result<()> {
        writeln!(self.csv, "{}", row.csv_row())?;
        self.csv.flush()?;
        if self.checkpoint_every > 0 && (row.step + 1) % self.checkpoint_every == 0 {
            self.checkpoint(&format!("step_{:06}.json", row.step + 1), ctrl)?;
        }
        if self.progress_every > 0 && row.step % self.progress_every == 0 {
            let l2 = row.l2.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
            println!(
                "step {:>6}  J {:>10.5}  psi {:.5e}  re {:.3e}  l2 {}  tau {:.3}  trunc {}{}",
                row.step,
                row.j_hat,
                row.psi_hat,
                row.rel_error,
                l2,
                row.mean_hitting_time,
                row.truncated,
                if row.skipped { "  skipped" } else { "" }
            );
        }
        self.last = Some(ctrl.clone());
        Ok(())
    }
}

pub fn train(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let ts = ctx.cfg.training_section()?;
    let init = match &ts.init_control {
        Some(p) => {
            let p = ctx.resolve(p);
            m.input(&p).map_err(|e| CliError::Config(e.to_string()))?;
            read_control(&p)?
        }
        None => ctx.cfg.zero_init_control()?,
    };
    let reference = match &ts.reference {
        Some(p) => {
            let p = ctx.resolve(p);
            m.input(&p).map_err(|e| CliError::Config(e.to_string()))?;
            Some(read_reference(&p)?)
        }
        None => None,
    };
    let tc = ctx.cfg.train_config(init.clone(), ctx.seed)?;
    let (run_path, mut csv) = ctx.create("run.csv")?;
    writeln!(csv, "{RUN_CSV_SCHEMA}")?;
    writeln!(csv, "{RUN_CSV_HEADER}")?;
    csv.flush()?;
    let mut obs = CliObserver {
        csv,
        out: ctx.out,
        checkpoint_every: ts.checkpoint_every,
        progress_every: ts.progress_every,
        checkpoints: Vec::new(),
        last: None,
    };
    let result = train_with(&tc, reference.as_ref(), &mut obs);
    drop(obs.csv);
    m.output(ctx.out, &run_path)?;
    for p in &obs.checkpoints {
        m.output(ctx.out, p)?;
    }
    match result {
        Ok((ctrl, record)) => {
            ctx.write_text(m, "control.json", &(ctrl.to_json()? + "\n"))?;
            println!("trained {} steps", record.rows.len());
            Ok(())
        }
        Err(e) => {
            let last = obs.last.unwrap_or(init);
            ctx.write_text(m, "checkpoints/last_good.json", &(last.to_json()? + "\n"))?;
            if matches!(e, metais::Error::GradientUnavailable(_)) {
                return Err(CliError::Numerical(format!(
                    "{e}; every trajectory of the first batch was truncated, initialize the control from metadynamics"
                )));
            }
            Err(e.into())
        }
    }
}

fn summary_table(label: &str, e: &Estimate) -> String {
    format!(
        "{:<12} {:>14} {:>12} {:>12} {:>12} {:>8} {:>6} {:>10}\n{:<12} {:>14.6e} {:>12.4e} {:>12.6e} {:>12.6e} {:>8} {:>6} {:>10.4}\n",
        "control",
        "psi",
        "rel_error",
        "ci_lo",
        "ci_hi",
        "k",
        "trunc",
        "mean_tau",
        label,
        e.mean,
        e.rel_error,
        e.ci_lo,
        e.ci_hi,
        e.k,
        e.truncated_count,
        e.mean_hitting_time
    )
}

pub fn sample(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let es = ctx.cfg.estimation_section()?;
    let dy = ctx.cfg.dynamics()?;
    let ctrl = load_control(ctx, &es.control, dy.dim(), m)?;
    let est = estimate_psi(&dy, &ctrl, es.k, es.k_var.unwrap_or(es.k), ctx.seed)?;
    ctx.write_text(m, "estimate.json", &(est.to_json()? + "\n"))?;
    ctx.write_text(m, "estimate.csv", &format!("{ESTIMATE_CSV_HEADER}\n{}\n", est.csv_row()))?;
    print!("{}", summary_table(&es.control, &est));
    if est.unreliable {
        return Err(CliError::Unreliable(format!("{} of {} trajectories truncated", est.truncated_count, est.k.max(est.k_var))));
    }
    Ok(())
}

fn compare_row(alpha: &[f64], method: &str, est: &Result<Estimate, CliError>) -> String {
    let a = alpha_label(alpha);
    match est {
        Ok(e) => format!(
            "{COMPARE_CSV_SCHEMA},{a},{method},ok,{:?},{:?},{:?},{:?},{:?},{},{},{:?},{}",
            e.mean, e.variance, e.rel_error, e.ci_lo, e.ci_hi, e.k, e.truncated_count, e.mean_hitting_time, e.unreliable
        ),
        Err(err) => {
            let msg = err.to_string().replace([',', '\n'], ";");
            format!("{COMPARE_CSV_SCHEMA},{a},{method},error: {msg},,,,,,,,,")
        }
    }
}

pub fn compare(ctx: &Context, m: &mut Manifest) -> Result<(), CliError> {
    let cs = ctx.cfg.compare_section()?;
    let es = ctx.cfg.estimation_section()?;
    for meth in &cs.methods {
        if !["mc", "meta", "optimal", "trained"].contains(&meth.as_str()) {
            return Err(CliError::Config(format!("unknown method `{meth}` (expected mc, meta, optimal or trained)")));
        }
    }
    let k_var = es.k_var.unwrap_or(es.k);
    let mut rows = Vec::new();
    let mut failure: Option<CliError> = None;
    for (i, alpha) in cs.alphas.iter().enumerate() {
        let dy = ctx.cfg.dynamics_for(alpha)?;
        for meth in &cs.methods {
            let ctrl: Result<Control, CliError> = match meth.as_str() {
                "mc" => Ok(Control::zero(dy.dim())),
                "meta" => ctx.cfg.meta_config_for(alpha, ctx.seed).and_then(|mc| {
                    let res = run_meta(&mc)?;
                    if res.incomplete() {
                        return Err(CliError::Numerical("metadynamics did not reach the target".into()));
                    }
                    Ok(mc.control(&res.bias)?)
                }),
                "optimal" => match cs.references.get(i) {
                    None => Err(CliError::Config(format!("no reference file for alpha {}", alpha_label(alpha)))),
                    Some(p) => {
                        let p = ctx.resolve(p);
                        m.input(&p)
                            .map_err(|e| CliError::Config(e.to_string()))
                            .and_then(|_| read_reference(&p))
                            .and_then(|s| s.control().map_err(Into::into))
                    }
                },
                _ => match cs.controls.get(i) {
                    None => Err(CliError::Config(format!("no trained control for alpha {}", alpha_label(alpha)))),
                    Some(p) => {
                        let p = ctx.resolve(p);
                        m.input(&p).map_err(|e| CliError::Config(e.to_string())).and_then(|_| read_control(&p))
                    }
                },
            };
            let est = ctrl.and_then(|c| estimate_psi(&dy, &c, es.k, k_var, ctx.seed).map_err(Into::into));
            match &est {
                Ok(e) => {
                    print!("{}", summary_table(&format!("{meth}@{}", alpha_label(alpha)), e));
                    if e.unreliable {
                        failure = Some(CliError::worst(failure.take(), CliError::Unreliable(format!("{meth} at alpha {}", alpha_label(alpha)))));
                    }
                }
                Err(err) => {
                    eprintln!("metais: {meth} at alpha {}: {err}", alpha_label(alpha));
                    let copy = err.clone();
                    failure = Some(CliError::worst(failure.take(), copy));
                }
            }
            rows.push(compare_row(alpha, meth, &est));
        }
    }
    let mut text = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    ctx.write_text(m, "compare.csv", &text)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
