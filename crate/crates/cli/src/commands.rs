use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use csvortex::diagnostics::{
    charge_observables, flux_identities, max_principle_check, threshold_sweep, FluxTolerances,
    IdentityReport, TorusShape,
};
use csvortex::elliptic::NewtonSettings;
use csvortex::fullplane::{
    bellman_ode_solve, circle_samples, decay_fit, default_epsilons, domain_continuation,
    lambda_estimate, mass_integral, phi_profile, ratio_band, sandwich_check, single_equation_solve,
    state_from_shifted, ContinuationSchedule,
};
use csvortex::params::threshold_area;
use csvortex::sources::default_epsilon;
use csvortex::variational::{recover_uv, NestedSolver, Problem};
use csvortex::{DomainSpec, Grid, Point, ScalarField, VortexConfiguration};
use serde_json::{json, Map, Value};

use crate::config::{parse_config, Diagnostic, RunConfig};
use crate::output::{content_hash, read_field, write_field, write_json, write_profile, write_table};
use crate::{RunArgs, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Torus,
    Disk,
    FullPlane,
    Single,
    Sweep,
    Diagnose,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Torus => "solve-torus",
            Kind::Disk => "solve-disk",
            Kind::FullPlane => "solve-fullplane",
            Kind::Single => "solve-single",
            Kind::Sweep => "sweep-threshold",
            Kind::Diagnose => "diagnose",
        }
    }
}

struct Ctx {
    kind: Kind,
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn wants(&self, d: Diagnostic, defaults: &[Diagnostic]) -> bool {
        match &self.cfg.output.diagnostics {
            Some(list) => list.contains(&d),
            None => defaults.contains(&d),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn usage(&self, need: &str) -> RunError {
        RunError::Usage(format!("{} needs problem.domain = {need}", self.kind.name()))
    }

    /// Print identity lines, write the report and pick the exit code.
    fn finish(
        &self,
        file: &str,
        mut body: Map<String, Value>,
        identities: &[IdentityReport],
        converged: bool,
    ) -> Result<u8, RunError> {
        for r in identities {
            self.say(format!(
                "{} {}: predicted {:.6e}, measured {:.6e}, error {:.3e} (tol {:.1e})",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                r.predicted,
                r.measured,
                r.rel_error,
                r.tolerance
            ));
        }
        let code = if !converged {
            3
        } else if identities.iter().all(|r| r.pass) {
            0
        } else {
            2
        };
        body.insert("command".into(), json!(self.kind.name()));
        body.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        body.insert("config".into(), json!(self.cfg.echo));
        body.insert("config_hash".into(), json!(content_hash(&self.cfg.echo)));
        body.insert("warnings".into(), json!(self.cfg.warnings));
        body.insert("converged".into(), json!(converged));
        body.insert("identities".into(), json!(identities));
        body.insert("exit_code".into(), json!(code));
        write_json(&self.path(file), &Value::Object(body))?;
        if !converged {
            eprintln!("error: solver did not converge");
        }
        Ok(code)
    }
}

pub fn dispatch(kind: Kind, args: &RunArgs) -> Result<u8, RunError> {
    let text = fs::read_to_string(&args.config).map_err(|e| RunError::io(&args.config, e))?;
    let cfg = parse_config(&text, &args.overrides)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| RunError::io(&out, e))?;
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    let ctx = Ctx { kind, cfg, out, quiet: args.quiet };
    match kind {
        Kind::Torus => solve_torus(&ctx),
        Kind::Disk => solve_disk(&ctx),
        Kind::FullPlane => solve_fullplane(&ctx),
        Kind::Single => solve_single(&ctx),
        Kind::Sweep => sweep(&ctx),
        Kind::Diagnose => diagnose(&ctx),
    }
}

fn epsilon_schedule(cfg: &RunConfig, h: f64) -> Vec<f64> {
    if let Some(list) = &cfg.solver.epsilons {
        list.clone()
    } else if let Some(e) = cfg.solver.epsilon {
        vec![e]
    } else {
        default_epsilons(h)
    }
}

fn inscribed_radius(grid: &Grid) -> f64 {
    match grid.domain {
        DomainSpec::Disk { radius } => radius,
        DomainSpec::Rectangle { lx, ly } => 0.5 * lx.min(ly),
        DomainSpec::Torus { tau1, tau2 } => 0.5 * tau1.min(tau2),
    }
}

/// Circle averages of `f` at radii `0, h, 2h, ...` up to the inscribed radius.
fn radial_profile(f: &ScalarField) -> Vec<(f64, f64)> {
    let grid = f.grid();
    let h = grid.h1;
    let rmax = inscribed_radius(grid);
    let mut rows = Vec::new();
    let mut r = 0.0;
    while r <= rmax + 1e-12 {
        let s = circle_samples(grid, f.values(), r, 128);
        if !s.is_empty() {
            rows.push((r, s.iter().sum::<f64>() / s.len() as f64));
        }
        r += h;
    }
    rows
}

fn flux_and_charges(
    ctx: &Ctx,
    u: &ScalarField,
    v: &ScalarField,
    problem: &Problem,
    defaults: &[Diagnostic],
    ids: &mut Vec<IdentityReport>,
    body: &mut Map<String, Value>,
) -> Result<(), RunError> {
    if ctx.wants(Diagnostic::Flux, defaults) {
        let tol = if problem.is_torus() { FluxTolerances::torus() } else { FluxTolerances::full_plane() };
        ids.extend(flux_identities(u, v, problem.params, &problem.coupling, &problem.vortices, tol)?);
    }
    if ctx.wants(Diagnostic::MaxPrinciple, defaults) {
        ids.push(max_principle_check(u, v)?);
    }
    if ctx.wants(Diagnostic::Charges, defaults) {
        body.insert("charges".into(), json!(charge_observables(u, v, problem.params)?));
    }
    Ok(())
}

fn skipped(ctx: &Ctx, supported: &[Diagnostic], body: &mut Map<String, Value>) {
    if let Some(list) = &ctx.cfg.output.diagnostics {
        let s: Vec<_> = list.iter().filter(|d| !supported.contains(d)).collect();
        if !s.is_empty() {
            body.insert("skipped_diagnostics".into(), json!(s));
        }
    }
}

fn solve_torus(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let DomainSpec::Torus { tau1, tau2 } = cfg.problem.domain else {
        return Err(ctx.usage("torus"));
    };
    let grid = Arc::new(Grid::torus(tau1, tau2, cfg.grid.n1, cfg.grid.n2)?);
    let eps = cfg.solver.epsilon.unwrap_or_else(|| default_epsilon(&grid));
    let problem = Problem::torus(cfg.problem.params, cfg.problem.vortices.clone(), grid, eps)?;
    let mut solver = NestedSolver::new(problem, cfg.solver.settings)?;
    let (state, report) = solver.solve(None)?;
    let problem = solver.problem;
    ctx.say(format!(
        "torus solve: {} outer iterations, residual {:.3e}",
        report.iterations.len().saturating_sub(1),
        report.final_residual_outer
    ));
    let (u, v) = recover_uv(&problem, &state);
    write_field(&ctx.path("fields_u.csv"), &u)?;
    write_field(&ctx.path("fields_v.csv"), &v)?;

    let defaults = [Diagnostic::Flux, Diagnostic::Charges];
    let mut ids = Vec::new();
    let mut body = Map::new();
    flux_and_charges(ctx, &u, &v, &problem, &defaults, &mut ids, &mut body)?;
    skipped(ctx, &[Diagnostic::Flux, Diagnostic::MaxPrinciple, Diagnostic::Charges], &mut body);
    let (alpha, beta) = problem.alpha_beta().expect("torus problem");
    body.insert("epsilon".into(), json!(eps));
    body.insert("alpha".into(), json!(alpha));
    body.insert("beta".into(), json!(beta));
    body.insert("threshold_area".into(), json!(threshold_area(problem.params, &problem.vortices)));
    body.insert("solve".into(), json!(report));
    ctx.finish("report.json", body, &ids, report.converged)
}

fn bounded_grid(ctx: &Ctx) -> Result<Grid, RunError> {
    let cfg = &ctx.cfg;
    Ok(match cfg.problem.domain {
        DomainSpec::Disk { radius } => Grid::disk(radius, cfg.grid.n1)?,
        DomainSpec::Rectangle { lx, ly } => Grid::rectangle(lx, ly, cfg.grid.n1, cfg.grid.n2)?,
        DomainSpec::Torus { .. } => return Err(ctx.usage("disk or rectangle")),
    })
}

fn solve_disk(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let grid = Arc::new(bounded_grid(ctx)?);
    let epsilons = epsilon_schedule(cfg, grid.h1);
    let n = grid.len();
    let (mut ut, mut vt) = (vec![0.0; n], vec![0.0; n]);
    let mut stages = Vec::new();
    let mut last = None;
    for &eps in &epsilons {
        let problem = Problem::bounded(cfg.problem.params, cfg.problem.vortices.clone(), grid.clone(), eps)?;
        let init = state_from_shifted(&problem, &ut, &vt)?;
        let mut solver = NestedSolver::new(problem, cfg.solver.settings)?;
        let (state, report) = solver.solve(Some(&init))?;
        let problem = solver.problem;
        let (u, v) = recover_uv(&problem, &state);
        ut = u.values().iter().map(|x| x + LN_2).collect();
        vt = v.values().iter().map(|x| x + LN_2).collect();
        ctx.say(format!(
            "epsilon {eps:.3e}: {} outer iterations, residual {:.3e}",
            report.iterations.len().saturating_sub(1),
            report.final_residual_outer
        ));
        stages.push(json!({
            "epsilon": eps,
            "converged": report.converged,
            "outer_iterations": report.iterations.len().saturating_sub(1),
            "residual_outer": report.final_residual_outer,
        }));
        last = Some((problem, state, u, v, report));
    }
    let Some((problem, state, u, v, report)) = last else {
        return Err(RunError::Usage("empty regularization schedule".into()));
    };
    write_field(&ctx.path("fields_u.csv"), &u)?;
    write_field(&ctx.path("fields_v.csv"), &v)?;
    write_profile(&ctx.path("profile_u.csv"), "u", &radial_profile(&u))?;
    write_profile(&ctx.path("profile_v.csv"), "v", &radial_profile(&v))?;

    let defaults = [Diagnostic::Flux, Diagnostic::MaxPrinciple, Diagnostic::Sandwich, Diagnostic::Charges];
    let mut ids = Vec::new();
    let mut body = Map::new();
    flux_and_charges(ctx, &u, &v, &problem, &defaults, &mut ids, &mut body)?;
    if ctx.wants(Diagnostic::Sandwich, &defaults) {
        let s = sandwich_check(&problem, &state, cfg.solver.monotone_tol, cfg.solver.monotone_max_iter)?;
        ids.push(IdentityReport {
            name: "sandwich bound".into(),
            predicted: 0.0,
            measured: s.max_w,
            rel_error: s.max_w.max(-s.min_gap).max(0.0),
            tolerance: 0.0,
            pass: s.pass,
            note: Some(format!("{} sweeps, max w {:.3e}, min gap {:.3e}", s.sweeps, s.max_w, s.min_gap)),
        });
        body.insert("sandwich".into(), json!(s));
    }
    skipped(ctx, &defaults, &mut body);
    body.insert("stages".into(), json!(stages));
    body.insert("solve".into(), json!(report));
    let converged = stages.iter().all(|s| s["converged"] == json!(true));
    ctx.finish("report.json", body, &ids, converged)
}

fn solve_fullplane(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let DomainSpec::Disk { radius } = cfg.problem.domain else {
        return Err(ctx.usage("disk"));
    };
    let h = cfg
        .grid
        .spacing
        .unwrap_or(2.0 * radius / (cfg.grid.n1.max(2) - 1) as f64);
    let radii = cfg.solver.radii.clone().unwrap_or_else(|| vec![radius]);
    if radii.last().is_none_or(|r| (r - radius).abs() > 1e-12 * radius) {
        return Err(RunError::Usage("solver.radii must end at problem.radius".into()));
    }
    let schedule = ContinuationSchedule { epsilons: epsilon_schedule(cfg, h), radii };
    let vort = &cfg.problem.vortices;
    let sol = domain_continuation(cfg.problem.params, vort, &schedule, h, cfg.solver.settings)?;
    for s in &sol.stages {
        ctx.say(format!(
            "R {:.2}, epsilon {:.3e}: {} outer iterations, residual {:.3e}",
            s.radius, s.epsilon, s.outer_iterations, s.residual_outer
        ));
    }
    let (u, v) = (&sol.u, &sol.v);
    write_field(&ctx.path("fields_u.csv"), u)?;
    write_field(&ctx.path("fields_v.csv"), v)?;
    let grid = u.grid().clone();
    let ut: Vec<f64> = u.values().iter().map(|x| x + LN_2).collect();
    let vt: Vec<f64> = v.values().iter().map(|x| x + LN_2).collect();
    let mag: Vec<f64> = ut.iter().zip(&vt).map(|(a, b)| a.abs().max(b.abs())).collect();
    let circle_max = |r: f64| circle_samples(&grid, &mag, r, 128).into_iter().fold(0.0, f64::max);
    let steps = ((radius - 1.0) / 0.1).floor() as usize;
    let radii: Vec<f64> = (1..=steps).map(|i| 0.1 * i as f64).collect();
    let decay: Vec<(f64, f64)> = radii.iter().map(|&r| (r, circle_max(r))).collect();
    write_profile(&ctx.path("profile_decay.csv"), "max_abs_shifted", &decay)?;

    let defaults = [
        Diagnostic::Flux,
        Diagnostic::MaxPrinciple,
        Diagnostic::Charges,
        Diagnostic::Decay,
        Diagnostic::Bellman,
    ];
    let mut ids = Vec::new();
    let mut body = Map::new();
    flux_and_charges(ctx, u, v, &sol.problem, &defaults, &mut ids, &mut body)?;
    let window = cfg.solver.fit_window;
    if ctx.wants(Diagnostic::Decay, &defaults) {
        let fit = decay_fit(u, v, window, vort.max_modulus()).map_err(|e| RunError::Input(e.to_string()))?;
        ids.push(
            IdentityReport::new("decay rate", 2.0, fit.rate, 0.1)
                .with_note(format!("r2 {:.4} (pure exponential {:.4})", fit.r2, fit.r2_pure_exponential)),
        );
        body.insert("decay_fit".into(), json!(fit));
    }
    if ctx.wants(Diagnostic::Bellman, &defaults) {
        let profile = phi_profile(u, v, &sol.problem.coupling, &radii, 128)?;
        write_profile(&ctx.path("profile_phi.csv"), "phi", &profile)?;
        let t0 = window[0];
        let b = bellman_ode_solve(&profile, t0, 20f64.max(2.0 * radius), circle_max(t0), 3600)?;
        let bellman_rows: Vec<(f64, f64)> = b.t.iter().copied().zip(b.w.iter().copied()).collect();
        write_profile(&ctx.path("profile_bellman.csv"), "w", &bellman_rows)?;
        let mut excess = f64::NEG_INFINITY;
        for (t, w) in b.t.iter().zip(&b.w) {
            if *t > radius - 1.0 {
                break;
            }
            excess = excess.max(circle_max(*t) - w * (1.0 + 1e-6) - 1e-12);
        }
        let band = ratio_band(&b, window[0], window[1]);
        let mut rep = IdentityReport {
            name: "comparison bound".into(),
            predicted: 0.0,
            measured: excess,
            rel_error: excess.max(0.0),
            tolerance: 0.0,
            pass: excess <= 0.0,
            note: None,
        };
        if let Some((lo, hi)) = band {
            rep = rep.with_note(format!("ratio band over the fit window: [{lo:.4}, {hi:.4}]"));
        }
        ids.push(rep);
    }
    skipped(ctx, &defaults, &mut body);
    let converged = sol.report.converged;
    body.insert("spacing".into(), json!(h));
    body.insert("schedule".into(), json!(schedule));
    body.insert("stages".into(), json!(sol.stages));
    body.insert("solve".into(), json!(sol.report));
    ctx.finish("report.json", body, &ids, converged)
}

fn solve_single(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let DomainSpec::Disk { radius } = cfg.problem.domain else {
        return Err(ctx.usage("disk"));
    };
    let grid = Arc::new(Grid::disk(radius, cfg.grid.n1)?);
    let points: Vec<Point> = cfg.problem.vortices.merged();
    let epsilons = epsilon_schedule(cfg, grid.h1);
    let newton = NewtonSettings {
        tol_residual: cfg.solver.settings.tol_inner,
        max_iter: cfg.solver.settings.max_inner,
        min_step: 1e-6,
    };
    let sol = single_equation_solve(&points, &grid, &epsilons, &newton)?;
    write_field(&ctx.path("fields_u.csv"), &sol.u)?;
    write_profile(&ctx.path("profile_u.csv"), "u", &radial_profile(&sol.u))?;
    let n = points.len();
    let lambda = lambda_estimate(&sol.u, n);
    let mass = mass_integral(&sol.u);
    ctx.say(format!("single equation: {} stages, lambda {lambda:.3e}, mass {mass:.6}", sol.stages.len()));
    let ids = vec![
        IdentityReport::new("lambda", 0.0, lambda, 0.05),
        IdentityReport::new("mass", 4.0 * PI * n as f64, mass, 0.02),
    ];
    let mut body = Map::new();
    body.insert("epsilons".into(), json!(epsilons));
    ctx.finish("report.json", body, &ids, true)
}

fn sweep(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let DomainSpec::Torus { tau1, tau2 } = cfg.problem.domain else {
        return Err(ctx.usage("torus"));
    };
    let vort = &cfg.problem.vortices;
    let threshold = threshold_area(cfg.problem.params, vort);
    if threshold <= 0.0 {
        return Err(RunError::Usage("the existence threshold is zero without vortices; nothing to sweep".into()));
    }
    let frac = |pts: &[Point]| pts.iter().map(|p| Point::new(p.x / tau1, p.y / tau2)).collect();
    let fractional = VortexConfiguration::new(frac(&vort.upper), frac(&vort.lower));
    let shape = TorusShape { aspect: tau1 / tau2, n1: cfg.grid.n1, n2: cfg.grid.n2 };
    let areas: Vec<f64> = cfg.solver.sweep_factors.iter().map(|f| f * threshold).collect();
    let rows = threshold_sweep(cfg.problem.params, &fractional, &areas, shape, cfg.solver.settings)?;
    let fmt_opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.16e}"));
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{}",
                r.area,
                r.threshold,
                r.alpha,
                r.beta,
                r.feasible,
                r.converged.map_or(String::new(), |c| c.to_string()),
                fmt_opt(r.residual_outer),
                fmt_opt(r.constraint_error)
            )
        })
        .collect();
    write_table(
        &ctx.path("sweep.csv"),
        "area,threshold,alpha,beta,feasible,converged,residual_outer,constraint_error",
        &lines,
    )?;
    let mut ids = Vec::new();
    for (r, f) in rows.iter().zip(&cfg.solver.sweep_factors) {
        ctx.say(format!(
            "area {:.4} ({f} x threshold): feasible {}, converged {}",
            r.area,
            r.feasible,
            r.converged.map_or("-".to_string(), |c| c.to_string())
        ));
        let expected = r.area > r.threshold;
        let solved = !r.feasible || r.converged == Some(true);
        ids.push(IdentityReport {
            name: format!("feasibility at {f} x threshold"),
            predicted: if expected { 1.0 } else { 0.0 },
            measured: if r.feasible && solved { 1.0 } else { 0.0 },
            rel_error: 0.0,
            tolerance: 0.0,
            pass: r.feasible == expected && solved,
            note: r.error.clone(),
        });
    }
    let mut body = Map::new();
    body.insert("threshold_area".into(), json!(threshold));
    body.insert("rows".into(), json!(rows));
    ctx.finish("report.json", body, &ids, true)
}

fn matches(grid: &Grid, rows: &[(f64, f64, f64)]) -> bool {
    grid.len() == rows.len()
        && rows.iter().enumerate().all(|(k, (x, y, _))| {
            let (gx, gy) = grid.coords(k);
            (gx - x).abs() <= 1e-9 * (1.0 + gx.abs()) && (gy - y).abs() <= 1e-9 * (1.0 + gy.abs())
        })
}

fn diagnose(ctx: &Ctx) -> Result<u8, RunError> {
    let cfg = &ctx.cfg;
    let ru = read_field(&ctx.path("fields_u.csv"))?;
    let rv = read_field(&ctx.path("fields_v.csv"))?;
    let (n1, n2) = (cfg.grid.n1, cfg.grid.n2);
    let candidates: Vec<Grid> = match cfg.problem.domain {
        DomainSpec::Torus { tau1, tau2 } => vec![Grid::torus(tau1, tau2, n1, n2)?],
        DomainSpec::Rectangle { lx, ly } => vec![Grid::rectangle(lx, ly, n1, n2)?],
        DomainSpec::Disk { radius } => {
            let h = cfg.grid.spacing.unwrap_or(2.0 * radius / (n1.max(2) - 1) as f64);
            let mut v = vec![Grid::disk(radius, n1)?];
            v.extend(Grid::disk_with_spacing(radius, h).ok());
            v
        }
    };
    let grid = candidates
        .into_iter()
        .find(|g| matches(g, &ru) && matches(g, &rv))
        .map(Arc::new)
        .ok_or_else(|| RunError::Input("field files do not match the configured grid".into()))?;
    let u = ScalarField::new(grid.clone(), ru.iter().map(|r| r.2).collect())?;
    let v = ScalarField::new(grid.clone(), rv.iter().map(|r| r.2).collect())?;
    let params = cfg.problem.params;
    let coupling = csvortex::build_coupling(params)?;
    let vort = &cfg.problem.vortices;

    let bounded = !grid.is_periodic();
    let mut defaults = vec![Diagnostic::Flux, Diagnostic::Charges];
    if bounded {
        defaults.push(Diagnostic::MaxPrinciple);
    }
    let mut ids = Vec::new();
    let mut body = Map::new();
    if ctx.wants(Diagnostic::Flux, &defaults) {
        let tol = if bounded { FluxTolerances::full_plane() } else { FluxTolerances::torus() };
        ids.extend(flux_identities(&u, &v, params, &coupling, vort, tol)?);
    }
    if ctx.wants(Diagnostic::MaxPrinciple, &defaults) {
        ids.push(max_principle_check(&u, &v)?);
    }
    if ctx.wants(Diagnostic::Charges, &defaults) {
        body.insert("charges".into(), json!(charge_observables(&u, &v, params)?));
    }
    skipped(ctx, &[Diagnostic::Flux, Diagnostic::MaxPrinciple, Diagnostic::Charges], &mut body);
    body.insert("nodes".into(), json!(grid.len()));
    ctx.finish("diagnostics.json", body, &ids, true)
}
