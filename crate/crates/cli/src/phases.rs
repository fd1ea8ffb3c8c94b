//! One function per subcommand. Each writes its CSV files through a
//! [`PhaseRecord`] and returns it for the manifest.

use std::cell::OnceCell;
use std::path::PathBuf;

use coed::bayes::Design;
use coed::config::TargetSpec;
use coed::dense::DenseModel;
use coed::lowrank::{build_frozen_svd, build_spectral_with};
use coed::oed::{percentile, percentile_rank};
use coed::pipeline::{offline_stage, run_control, run_invert, run_oed, run_uq, Offline, PriorTraces, UqContext};
use coed::problem::{Experiment, Stream};
use log::info;
use nalgebra::DVector;
use serde_json::json;

use crate::artifacts;
use crate::error::CliError;
use crate::output::{Cell, Csv, PhaseRecord};

/// Largest mesh the dense oracles are allowed on.
pub const MAX_DENSE_DOF: usize = 1681;

pub struct Run {
    pub exp: Experiment,
    pub dense: Option<DenseModel>,
    pub root: PathBuf,
    offline: OnceCell<Offline>,
}

impl Run {
    pub fn new(exp: Experiment, exact: bool, root: PathBuf) -> Result<Self, CliError> {
        let dense = if exact {
            let n = exp.ip.dim();
            if n > MAX_DENSE_DOF {
                return Err(CliError::Config(format!(
                    "--exact-mode needs at most {MAX_DENSE_DOF} nodes, the mesh has {n}"
                )));
            }
            info!("building dense operators ({n} nodes)");
            Some(DenseModel::build(&exp.ip, Some(&exp.map))?)
        } else {
            None
        };
        Ok(Self {
            exp,
            dense,
            root,
            offline: OnceCell::new(),
        })
    }

    /// Frozen factorization and prior traces, built once per invocation.
    fn offline(&self, rec: &mut PhaseRecord) -> Result<&Offline, CliError> {
        if self.offline.get().is_none() {
            info!("offline stage: frozen factorization and prior traces");
            let off = offline_stage(&self.exp, self.dense.as_ref())?;
            let t = &off.traces;
            rec.stat("offline_solves", off.solves);
            rec.stat("frozen_rank", off.frozen.rank());
            rec.stat("goal_trace_probes", t.goal_probes);
            rec.stat("prior_trace_probes", t.prior_probes);
            let _ = self.offline.set(off);
        }
        Ok(self.offline.get().expect("offline stage is set"))
    }

    fn node_cells(&self, i: usize) -> [Cell; 3] {
        let [x, y] = self.exp.mesh.nodes[i];
        [i.into(), x.into(), y.into()]
    }

    fn field(&self, values: &[(&str, &DVector<f64>)]) -> Csv {
        let mut header = vec!["node", "x", "y"];
        header.extend(values.iter().map(|(name, _)| *name));
        let mut csv = Csv::new(&header);
        for i in 0..self.exp.mesh.num_nodes() {
            let mut row = self.node_cells(i).to_vec();
            row.extend(values.iter().map(|(_, v)| Cell::Num(v[i])));
            csv.row(&row);
        }
        csv
    }

    fn sensor_table(&self, values: &[(&str, Vec<f64>)]) -> Csv {
        let sensors = &self.exp.ip.obs.sensors;
        let mut header = vec!["sensor", "node", "x", "y"];
        header.extend(values.iter().map(|(name, _)| *name));
        let mut csv = Csv::new(&header);
        for (s, (&node, &[x, y])) in sensors.nodes.iter().zip(&sensors.coords).enumerate() {
            let mut row = vec![s.into(), node.into(), x.into(), y.into()];
            row.extend(values.iter().map(|(_, v)| Cell::Num(v[s])));
            csv.row(&row);
        }
        csv
    }

    fn reachable(&self) -> bool {
        matches!(self.exp.config.target, TargetSpec::Reachable { .. })
    }
}

pub fn invert(run: &Run) -> Result<PhaseRecord, CliError> {
    let mut rec = PhaseRecord::new(&run.root, "invert")?;
    let exp = &run.exp;
    let before = exp.counter.get();
    let out = run_invert(exp, run.dense.as_ref())?;
    rec.write("mesh.csv", run.field(&[]))?;
    let ops = &exp.ops;
    let mut triplets = Csv::new(&["operator", "row", "col", "value"]);
    for (name, m) in [
        ("mass", &ops.mass),
        ("stiffness", &ops.stiffness),
        ("advection", &ops.advection),
        ("robin_mass", &ops.robin_mass),
    ] {
        for (r, c, v) in m.triplets() {
            triplets.row(&[name.into(), r.into(), c.into(), v.into()]);
        }
    }
    rec.write("operators.csv", triplets)?;
    rec.write("m_true.csv", run.field(&[("value", &out.m_true)]))?;
    rec.write("data.csv", run.sensor_table(&[("value", out.y.as_slice().to_vec())]))?;
    rec.write("m_map.csv", run.field(&[("value", &out.m_map)]))?;
    rec.write(
        "posterior_variance.csv",
        run.field(&[("prior", &out.prior_variance), ("posterior", &out.posterior_variance)]),
    )?;
    if run.reachable() {
        let y = exp.uq_data(out.sigma)?;
        rec.write("reference_data.csv", run.sensor_table(&[("value", y.as_slice().to_vec())]))?;
        let m = exp.reference.as_ref().expect("reachable mode draws a reference");
        rec.write("reference.csv", run.field(&[("value", m)]))?;
    }
    rec.write(
        "summary.csv",
        Csv::key_values([
            ("sigma", Cell::Num(out.sigma)),
            ("noise_delta", exp.config.noise_delta.into()),
            ("sensors", exp.num_sensors().into()),
            ("cg_iterations", out.cg_iterations.into()),
        ]),
    )?;
    rec.stat("sigma", out.sigma);
    rec.stat("cg_iterations", out.cg_iterations);
    rec.stat("pde_solves", exp.counter.get() - before);
    Ok(rec)
}

pub fn oed(run: &Run) -> Result<PhaseRecord, CliError> {
    let mut rec = PhaseRecord::new(&run.root, "oed")?;
    let exp = &run.exp;
    let (_, sigma) = exp.synthesize()?;
    let before = exp.counter.get();
    run.offline(&mut rec)?;
    info!("greedy selection of {} sensors", exp.config.oed_k);
    let out = run_oed(exp, sigma, run.dense.as_ref())?;
    rec.write(
        "designs.csv",
        run.sensor_table(&[
            ("classical", out.classical.design.weights.clone()),
            ("coed", out.coed.design.weights.clone()),
        ]),
    )?;

    let mut criteria = Csv::new(&[
        "design",
        "tr_post",
        "tr_goal",
        "rank_tr_post",
        "rank_tr_goal",
        "exact_tr_post",
        "exact_tr_goal",
    ]);
    for (i, row) in out.comparison.rows.iter().enumerate() {
        let exact = out.exact_values.map(|e| e[i]);
        criteria.row(&[
            row.label.as_str().into(),
            row.values[0].into(),
            row.values[1].into(),
            row.percentile_ranks[0].into(),
            row.percentile_ranks[1].into(),
            exact.map(|e| e[0]).into(),
            exact.map(|e| e[1]).into(),
        ]);
    }
    rec.write("criteria.csv", criteria)?;

    let mut greedy = Csv::new(&["stage", "classical_sensor", "classical_value", "coed_sensor", "coed_value"]);
    for s in 0..out.classical.selected.len() {
        greedy.row(&[
            (s + 1).into(),
            out.classical.selected[s].into(),
            out.classical.criterion_trace[s].into(),
            out.coed.selected[s].into(),
            out.coed.criterion_trace[s].into(),
        ]);
    }
    rec.write("greedy.csv", greedy)?;

    let mut random = Csv::new(&["id", "sensors", "tr_post", "tr_goal"]);
    let rv = &out.comparison.random_values;
    for (i, d) in out.random.iter().enumerate() {
        let idx: Vec<String> = d.active().iter().map(|s| s.to_string()).collect();
        random.row(&[i.into(), idx.join(" ").into(), rv[0][i].into(), rv[1][i].into()]);
    }
    rec.write("random_designs.csv", random)?;

    let t = &out.offline.traces;
    rec.write(
        "summary.csv",
        Csv::key_values([
            ("sigma", Cell::Num(sigma)),
            ("budget", exp.config.oed_k.into()),
            ("candidates", exp.num_sensors().into()),
            ("criterion", exp.config.oed_criterion.name().into()),
            ("evaluations_classical", out.classical.evaluations.into()),
            ("evaluations_coed", out.coed.evaluations.into()),
            ("greedy_pde_solves", out.greedy_solves.into()),
            ("frozen_rank", out.offline.frozen.rank().into()),
            ("prior_goal_trace", t.goal.into()),
            ("prior_trace", t.prior.into()),
            ("goal_trace_rel_error", t.goal_rel_error.into()),
            ("prior_trace_rel_error", t.prior_rel_error.into()),
        ]),
    )?;
    rec.stat("greedy_pde_solves", out.greedy_solves);
    rec.stat("evaluations", json!({"classical": out.classical.evaluations, "coed": out.coed.evaluations}));
    rec.stat("evaluation_budget", exp.config.oed_k * exp.num_sensors());
    rec.stat("pde_solves", exp.counter.get() - before);
    Ok(rec)
}

fn load_design(run: &Run, label: &str, sigma: f64) -> Result<Design, CliError> {
    let n_s = run.exp.num_sensors();
    match label {
        "full" => Ok(Design::full(n_s, sigma)),
        "classical" | "coed" => artifacts::design(&run.root, label, n_s, sigma),
        other => Err(CliError::Config(format!(
            "unknown design '{other}' (expected coed, classical or full)"
        ))),
    }
}

pub fn control(run: &Run, label: &str) -> Result<PhaseRecord, CliError> {
    let mut rec = PhaseRecord::new(&run.root, "control")?;
    let exp = &run.exp;
    let sigma = artifacts::sigma(&run.root)?;
    let y = artifacts::data(&run.root, "data.csv", exp.num_sensors())?;
    let design = load_design(run, label, sigma)?;
    let before = exp.counter.get();
    let out = run_control(exp, &design, &y)?;
    let grid = exp.map.grid();
    let mut z = Csv::new(&["step", "t", "z"]);
    for (k, v) in out.nominal.z_star.iter().enumerate() {
        z.row(&[(k + 1).into(), ((k + 1) as f64 * grid.dt).into(), (*v).into()]);
    }
    rec.write("control.csv", z)?;
    rec.write(
        "states.csv",
        run.field(&[
            ("m_map", &out.m_map),
            ("initial", &out.initial_state),
            ("terminal", &out.terminal_state),
            ("target", &out.target),
        ]),
    )?;
    rec.write(
        "summary.csv",
        Csv::key_values([
            ("design", Cell::from(label)),
            ("sensors", design.count().into()),
            ("beta_reg", exp.config.beta_reg.into()),
            ("objective_at_map", out.objective_at_map.into()),
            ("objective_at_true", out.objective_at_true.into()),
            ("improvement", out.improvement.into()),
            ("cg_iterations", out.nominal.cg_iterations.into()),
        ]),
    )?;
    rec.stat("improvement", out.improvement);
    rec.stat("objective_at_true", out.objective_at_true);
    rec.stat("pde_solves", exp.counter.get() - before);
    Ok(rec)
}

pub fn uq(run: &Run) -> Result<PhaseRecord, CliError> {
    let mut rec = PhaseRecord::new(&run.root, "uq")?;
    let exp = &run.exp;
    let n_s = exp.num_sensors();
    let sigma = artifacts::sigma(&run.root)?;
    let data_file = if run.reachable() { "reference_data.csv" } else { "data.csv" };
    let y = artifacts::data(&run.root, data_file, n_s)?;
    let designs = vec![
        ("coed".to_string(), artifacts::design(&run.root, "coed", n_s, sigma)?),
        ("classical".to_string(), artifacts::design(&run.root, "classical", n_s, sigma)?),
    ];
    let random = artifacts::random_designs(&run.root, n_s, sigma)?;
    let before = exp.counter.get();
    let offline = run.offline(&mut rec)?;
    let ctx = UqContext::new(exp, offline, &y, run.dense.as_ref())?;
    let mc_samples = if run.dense.is_some() { exp.config.mc_samples } else { 0 };
    info!("objective moments for {} designs", designs.len() + random.len());
    let out = run_uq(&ctx, &designs, &random, mc_samples)?;

    let mut moments = Csv::new(&[
        "design",
        "mean",
        "variance",
        "psi_ca",
        "trace_sq",
        "weighted_norm",
        "objective_at_map",
    ]);
    for row in &out.rows {
        let m = &row.moments;
        moments.row(&[
            row.label.as_str().into(),
            m.mean.into(),
            m.variance.into(),
            m.psi_ca.into(),
            m.trace_sq_term.into(),
            m.weighted_norm_term.into(),
            m.objective_at_map.into(),
        ]);
    }
    rec.write("moments.csv", moments)?;

    let mut rm = Csv::new(&["id", "mean", "variance"]);
    for (i, m) in out.random_moments.iter().enumerate() {
        rm.row(&[i.into(), m.mean.into(), m.variance.into()]);
    }
    rec.write("random_moments.csv", rm)?;

    let rep = &out.concentration;
    let mc = out.mc.as_ref();
    let mut conc = Csv::new(&["tau", "bound", "empirical_tail"]);
    for (i, (tau, b)) in rep.tau_grid.iter().zip(&rep.bound_values).enumerate() {
        conc.row(&[(*tau).into(), (*b).into(), mc.map(|m| m.empirical_tail[i]).into()]);
    }
    rec.write("concentration.csv", conc)?;
    let mut radii = Csv::new(&["delta", "radius", "coverage"]);
    for (i, (delta, r)) in rep.radii.iter().enumerate() {
        radii.row(&[(*delta).into(), (*r).into(), mc.map(|m| m.coverage[i].2).into()]);
    }
    rec.write("radii.csv", radii)?;

    let coed = &out.rows[0].moments;
    let means: Vec<f64> = out.random_moments.iter().map(|m| m.mean).collect();
    let vars: Vec<f64> = out.random_moments.iter().map(|m| m.variance).collect();
    let mut summary: Vec<(&str, Cell)> = vec![
        ("target", exp.config.target.describe().into()),
        ("hanson_wright_c", rep.c.into()),
        ("random_designs", random.len().into()),
    ];
    if !random.is_empty() {
        summary.extend([
            ("coed_mean_percentile_rank", percentile_rank(coed.mean, &means).into()),
            ("coed_variance_percentile_rank", percentile_rank(coed.variance, &vars).into()),
            ("random_mean_p5", percentile(&means, 5.0).into()),
            ("random_variance_p5", percentile(&vars, 5.0).into()),
        ]);
    }
    if let Some(m) = mc {
        summary.extend([
            ("mc_samples", m.samples.into()),
            ("mc_mean", m.mean.into()),
            ("mc_variance", m.variance.into()),
            ("mc_mean_rel_error", m.mean_rel_error.into()),
            ("mc_variance_rel_error", m.variance_rel_error.into()),
        ]);
        rec.stat("mc_mean_rel_error", m.mean_rel_error);
        rec.stat("mc_variance_rel_error", m.variance_rel_error);
    }
    rec.write("summary.csv", Csv::key_values(summary))?;
    rec.stat("pde_solves", exp.counter.get() - before);
    Ok(rec)
}

pub fn spectra(run: &Run) -> Result<PhaseRecord, CliError> {
    let mut rec = PhaseRecord::new(&run.root, "spectra")?;
    let exp = &run.exp;
    let n_s = exp.num_sensors();
    let before = exp.counter.get();
    let offline = run.offline(&mut rec)?;
    let mut sv = Csv::new(&["index", "value"]);
    for (i, s) in offline.frozen.singular_values.iter().enumerate() {
        sv.row(&[(i + 1).into(), (*s).into()]);
    }
    rec.write("singular_values.csv", sv)?;

    let (_, sigma) = exp.synthesize()?;
    let full = exp.full_design(sigma);
    let spec = build_spectral_with(exp.config.spectral_method, &exp.ip, &full, n_s, &mut exp.rng(Stream::Spectral))?;
    let mut ev = Csv::new(&["index", "value"]);
    for (i, l) in spec.lambda.iter().enumerate() {
        ev.row(&[(i + 1).into(), (*l).into()]);
    }
    rec.write("hessian_eigenvalues.csv", ev)?;

    if let Some(d) = &run.dense {
        info!("criterion error against the dense oracle");
        let exact = d.goal_trace(&full)?;
        let mut err = Csv::new(&["k_f", "rel_error"]);
        for k in (5..=n_s.min(60)).step_by(5) {
            let p = exp.config.oversampling.min(n_s - k);
            let mut f = build_frozen_svd(&exp.ip, exp.map.as_ref(), k, p, &mut exp.rng(Stream::Sketch))?;
            f.deflated = Some(PriorTraces::from_dense(d, &f).deflated);
            let v = f.goal_posterior_trace(&full)?;
            err.row(&[k.into(), ((v - exact).abs() / exact).into()]);
        }
        rec.write("criterion_error.csv", err)?;
    }
    rec.stat("pde_solves", exp.counter.get() - before);
    Ok(rec)
}
