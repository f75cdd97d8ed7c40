use std::fs;
use std::path::PathBuf;

use inertial_core::manifold::{
    decouple_trajectory, estimate_gapdata, knee, manifold_point, manifold_trajectory, sweep, t_lower_bound,
    truncation_bound, Combined, ManifoldQuery,
};
use inertial_core::problems::ProblemDef;

use crate::config::Config;
use crate::output::{indexed, num, opt, Table};
use crate::{Cli, CliError, Command};

struct Ctx {
    config: Config,
    header: Vec<String>,
    out: PathBuf,
    seed: u64,
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = Config::parse(&text)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let resolved = serde_json::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let header = vec![
        format!("inertial {}", env!("CARGO_PKG_VERSION")),
        format!("command: {}", cli.command.name()),
        format!("seed: {}", cli.seed),
        format!("config: {resolved}"),
    ];
    let ctx = Ctx { config, header, out: cli.out.clone(), seed: cli.seed };
    match cli.command {
        Command::Tbound => tbound(&ctx),
        cmd => {
            let problem = ctx.config.problem()?;
            let mut ctx = ctx;
            ctx.header.push(format!("problem: {}", problem.params()));
            match cmd {
                Command::ManifoldPoint => point(&ctx, problem.as_ref()),
                Command::Sweep => sweep_cmd(&ctx, problem.as_ref()),
                Command::Trajectory => trajectory(&ctx, problem.as_ref()),
                Command::Decouple => decouple(&ctx, problem.as_ref()),
                Command::Tbound => unreachable!(),
            }
        }
    }
}

fn query(ctx: &Ctx, problem: &dyn ProblemDef) -> Result<ManifoldQuery, CliError> {
    ctx.config.section(&ctx.config.manifold, "manifold")?.query(problem.dim(), ctx.seed)
}

fn point(ctx: &Ctx, problem: &dyn ProblemDef) -> Result<Vec<PathBuf>, CliError> {
    let q = query(ctx, problem)?;
    let pt = manifold_point(problem, &q)?;
    let (p, d) = (q.p, problem.dim());
    let mut header = ctx.header.clone();
    header.extend(pt.warnings.iter().map(|w| format!("warning: {w}")));

    let mut cols = vec!["t".to_string(), "horizon".into()];
    cols.extend(indexed("y", p));
    cols.extend(indexed("x", d - p));
    cols.extend(indexed("u", d));
    cols.extend(indexed("dy", p));
    cols.extend(["residual", "bvp_residual", "bc_residual", "nodes", "newton_iterations", "rewrites", "chart_switches"].map(String::from));
    let mut t = Table::new(cols);
    let mut row = vec![num(pt.t), num(q.horizon)];
    row.extend(pt.y.iter().chain(pt.x.iter()).chain(pt.u.iter()).chain(pt.slow_rhs.iter()).map(|&v| num(v)));
    row.extend([
        opt(pt.residual),
        num(pt.bvp_residual),
        num(pt.bc_residual),
        pt.nodes.to_string(),
        pt.newton_iterations.iter().sum::<usize>().to_string(),
        pt.rewrites.to_string(),
        pt.chart_switches.to_string(),
    ]);
    t.push(row);

    let sys = Combined::new(problem, p)?;
    let mut cols = vec!["t".to_string()];
    cols.extend(indexed("u", d));
    let mut mesh = Table::new(cols);
    for (tn, s) in pt.solution.t.iter().zip(&pt.solution.y) {
        let mut row = vec![num(*tn)];
        row.extend(sys.u(s)?.iter().map(|&v| num(v)));
        mesh.push(row);
    }
    Ok(vec![t.write(&ctx.out, "manifold_point.csv", &header)?, mesh.write(&ctx.out, "manifold_path.csv", &header)?])
}

fn sweep_cmd(ctx: &Ctx, problem: &dyn ProblemDef) -> Result<Vec<PathBuf>, CliError> {
    let base = query(ctx, problem)?;
    let cfg = ctx.config.section(&ctx.config.sweep, "sweep")?;
    let horizons = cfg.horizons();
    if horizons.is_empty() {
        return Err(CliError::Config("sweep needs horizons or horizon_range".into()));
    }
    let whats: Vec<Option<f64>> = if cfg.what_first.is_empty() { vec![None] } else { cfg.what_first.iter().map(|&v| Some(v)).collect() };
    let mut queries = Vec::with_capacity(whats.len() * horizons.len());
    for w in &whats {
        for &h in &horizons {
            let mut q = base.clone();
            q.horizon = h;
            if let Some(v) = w {
                q = q.with_first_what(*v);
            }
            queries.push(q);
        }
    }
    let rows = sweep(problem, &queries, cfg.defect_horizon);

    let mut table = Table::new(["what_first", "horizon", "status", "residual", "defect", "bvp_residual", "nodes", "error"]);
    let mut knees = Table::new(["what_first", "knee"]);
    let mut failed = 0;
    for (chunk, w) in rows.chunks(horizons.len()).zip(&whats) {
        let wf = opt(*w);
        for r in chunk {
            match &r.result {
                Ok(v) => table.push(vec![
                    wf.clone(),
                    num(r.horizon),
                    "ok".into(),
                    opt(v.residual),
                    opt(v.defect),
                    num(v.point.bvp_residual),
                    v.point.nodes.to_string(),
                    String::new(),
                ]),
                Err(e) => {
                    failed += 1;
                    table.push(vec![
                        wf.clone(),
                        num(r.horizon),
                        "failed".into(),
                        "nan".into(),
                        "nan".into(),
                        "nan".into(),
                        "0".into(),
                        e.to_string(),
                    ]);
                }
            }
        }
        knees.push(vec![wf, opt(knee(chunk))]);
    }
    let paths = vec![table.write(&ctx.out, "sweep.csv", &ctx.header)?, knees.write(&ctx.out, "sweep_knee.csv", &ctx.header)?];
    match failed {
        0 => Ok(paths),
        n if n == rows.len() => Err(rows.into_iter().find_map(|r| r.result.err()).map(CliError::Core).expect("failed rows")),
        n => Err(CliError::Partial { failed: n, total: rows.len() }),
    }
}

fn trajectory(ctx: &Ctx, problem: &dyn ProblemDef) -> Result<Vec<PathBuf>, CliError> {
    let q = query(ctx, problem)?;
    let cfg = ctx.config.section(&ctx.config.trajectory, "trajectory")?;
    let tr = manifold_trajectory(problem, &q, cfg.dt, cfg.steps, cfg.scheme()?)?;
    let (p, d) = (q.p, problem.dim());
    let mut header = ctx.header.clone();
    header.push(format!("solves: {} (warm-start failures {})", tr.total_solves, tr.warm_start_failures));

    let mut cols = vec!["step".to_string(), "t".into()];
    cols.extend(indexed("y", p));
    cols.extend(indexed("x", d - p));
    cols.extend(["residual", "bvp_residual", "solves"].map(String::from));
    let mut t = Table::new(cols);
    for n in 0..tr.t.len() {
        let mut row = vec![n.to_string(), num(tr.t[n])];
        row.extend(tr.y[n].iter().chain(tr.x[n].iter()).map(|&v| num(v)));
        row.push(opt(tr.residual[n]));
        row.push(num(tr.bvp_residual[n]));
        row.push(tr.step_solves.get(n).copied().unwrap_or(0).to_string());
        t.push(row);
    }
    Ok(vec![t.write(&ctx.out, "trajectory.csv", &header)?])
}

fn decouple(ctx: &Ctx, problem: &dyn ProblemDef) -> Result<Vec<PathBuf>, CliError> {
    let cfg = ctx.config.section(&ctx.config.decouple, "decouple")?;
    let d = problem.dim();
    let (u0, stack0) = cfg.initial(d, ctx.seed)?;
    if cfg.samples < 2 {
        return Err(CliError::Config("decouple needs samples ≥ 2".into()));
    }
    let grid: Vec<f64> = (0..cfg.samples).map(|i| cfg.t0 + (cfg.t1 - cfg.t0) * i as f64 / (cfg.samples - 1) as f64).collect();
    let run = decouple_trajectory(problem, &u0, &stack0, cfg.t0, cfg.t1, (cfg.rtol, cfg.atol), Some(&grid))?;
    let mut header = ctx.header.clone();
    header.push(format!("reembeddings: {}", run.events.len()));

    let mut cols = vec!["t".to_string()];
    cols.extend(indexed("u", d));
    cols.extend(indexed("D", d));
    cols.extend(indexed("sigma", cfg.p));
    cols.push("leakage".into());
    let mut samples = Table::new(cols);
    for s in &run.samples {
        let full = s.d.assemble();
        let mut row = vec![num(s.t)];
        row.extend(s.u.iter().map(|&v| num(v)));
        row.extend((0..d).map(|i| num(full[(i, i)])));
        row.extend(s.stack.sigma().iter().map(|&v| num(v)));
        row.push(num(s.leakage));
        samples.push(row);
    }
    let mut avg = Table::new(["index", "block", "average"]);
    for (i, a) in run.averages.iter().enumerate() {
        avg.push(vec![i.to_string(), if i < cfg.p { "slow" } else { "fast" }.into(), num(*a)]);
    }
    let mut paths = vec![samples.write(&ctx.out, "decouple.csv", &header)?, avg.write(&ctx.out, "decouple_averages.csv", &header)?];
    if let Some(radius) = cfg.estimate_radius {
        let g = estimate_gapdata(problem, &run, cfg.p, radius)?;
        let mut t = Table::new(["k", "alpha", "beta", "l", "sigma", "kappa", "gap_ok", "provenance"]);
        t.push(vec![
            num(g.k),
            num(g.alpha),
            num(g.beta),
            num(g.l),
            num(g.sigma),
            num(g.kappa),
            g.gap_ok().to_string(),
            serde_json::to_string(&g.provenance).map_err(|e| CliError::Config(e.to_string()))?,
        ]);
        paths.push(t.write(&ctx.out, "gapdata.csv", &header)?);
    }
    Ok(paths)
}

fn tbound(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let cfg = ctx.config.section(&ctx.config.tbound, "tbound")?;
    let g = cfg.gap()?;
    let c = g.bound_constant()?;
    let t_min = t_lower_bound(&g, cfg.tol, cfg.x0_norm, cfg.t0)?;
    let mut summary = Table::new(["k", "alpha", "beta", "l", "sigma", "kappa", "gap_ok", "bound_constant", "tol", "t_min"]);
    summary.push(vec![
        num(g.k),
        num(g.alpha),
        num(g.beta),
        num(g.l),
        num(g.sigma),
        num(g.kappa),
        g.gap_ok().to_string(),
        num(c),
        num(cfg.tol),
        num(t_min),
    ]);
    let mut paths = vec![summary.write(&ctx.out, "tbound.csv", &ctx.header)?];
    if !cfg.horizons.is_empty() {
        let mut t = Table::new(["horizon", "bound"]);
        for &h in &cfg.horizons {
            t.push(vec![num(h), num(truncation_bound(&g, cfg.x0_norm, cfg.t0, h)?)]);
        }
        paths.push(t.write(&ctx.out, "tbound_horizons.csv", &ctx.header)?);
    }
    Ok(paths)
}
