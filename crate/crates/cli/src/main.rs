use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hmot::barycenter::{compute_barycenter, BarycenterOptions, Tuple};
use hmot::io::{
    self, c1_summary, load_cloud, map_potentials, pushforward_from_plan, read_json, run_pipeline,
    solve_plan, summarize_psi, write_cloud, write_json, PlanFile, ScenarioConfig, SolverSpec,
};
use hmot::metric::geodesic_point;
use hmot::mmot::{
    assemble_cost_tensor, check_cyclical_monotonicity, gamma_u, AssemblyOptions, WeightedCloud,
};
use hmot::monge::{
    check_condition_c2, check_swap_consistency, default_psi_step, extract_monge, psi_coherence,
    C2Options, PotentialField, PushforwardOptions,
};
use hmot::{HPoint, Metric, MetricKind};

#[derive(Parser)]
#[command(
    name = "hmot",
    version,
    about = "Multi-marginal optimal transport on the Heisenberg group"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct MetricArgs {
    #[arg(long, default_value = "cc")]
    metric: Metric,
    /// Cost exponent.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
}

impl MetricArgs {
    fn kind(&self) -> Result<MetricKind> {
        Ok(MetricKind::new(self.metric, self.p)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Lp,
    Entropic,
}

#[derive(Subcommand)]
enum Command {
    /// Distance between two points, or `d^p` when `--p` is given.
    Dist {
        #[arg(long, default_value = "cc")]
        metric: Metric,
        #[arg(long)]
        p: Option<f64>,
        #[arg(allow_hyphen_values = true)]
        x: String,
        #[arg(allow_hyphen_values = true)]
        y: String,
    },
    /// CSV polyline along the CC geodesic from `x` to `y`.
    Geodesic {
        #[arg(allow_hyphen_values = true)]
        x: String,
        #[arg(allow_hyphen_values = true)]
        y: String,
        /// Number of segments; prints `steps + 1` points.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Barycentric cost and minimizers of a tuple of points.
    Barycenter {
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(required = true, num_args = 2.., allow_hyphen_values = true)]
        points: Vec<String>,
    },
    /// Solve the discrete multi-marginal problem and write `plan.json`.
    SolveMmot {
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long, value_enum, default_value = "lp")]
        solver: SolverArg,
        #[arg(long, default_value_t = 1e-2)]
        epsilon: f64,
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 2_000_000)]
        max_tuples: usize,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
        #[arg(required = true, num_args = 2..)]
        marginals: Vec<PathBuf>,
    },
    /// Graph part of a plan and, with `--psi`, the map built from the first potential.
    ExtractMap {
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
        #[arg(long)]
        psi: bool,
        #[arg(long, default_value = "map.json")]
        out: PathBuf,
    },
    /// Pushforward of a plan through the barycenter map.
    Wbary {
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
        #[arg(long)]
        select_first: bool,
        #[arg(long, default_value = "nu.json")]
        out: PathBuf,
    },
    /// Run structural checks on a saved plan; exits 1 when a check fails.
    Verify {
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "c1,c2,monotone,swap")]
        checks: Vec<Check>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Full pipeline from a scenario file; exits 1 when a hard check fails.
    Run { config: PathBuf },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Check {
    C1,
    C2,
    Monotone,
    Swap,
}

/// A point given inline (`0,1,0.5` or `[0,1,0.5]`) or as a file holding a JSON array.
fn parse_point(s: &str) -> Result<HPoint> {
    let path = Path::new(s);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let coords: Vec<f64> =
            serde_json::from_str(&text).with_context(|| format!("reading point {s}"))?;
        return Ok(HPoint::from_coords(coords)?);
    }
    let inline = s.trim().trim_start_matches('[').trim_end_matches(']');
    let coords = inline
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .with_context(|| format!("bad coordinate `{c}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HPoint::from_coords(coords)?)
}

/// Round to 15 significant digits and print the shortest form.
fn sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let r: f64 = format!("{x:.14e}").parse().expect("formatted float parses");
    if r == 0.0 || (1e-4..1e15).contains(&r.abs()) {
        r.to_string()
    } else {
        format!("{r:e}")
    }
}

fn fmt_point(p: &HPoint) -> String {
    let parts: Vec<String> = p.coords().iter().map(|&c| sig(c)).collect();
    format!("[{}]", parts.join(", "))
}

fn load_plan(path: &Path) -> Result<PlanFile> {
    read_json(path).with_context(|| format!("reading plan {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Dist { metric, p, x, y } => {
            let kind = MetricKind::new(metric, p.unwrap_or(2.0))?;
            let d = kind.dist(&parse_point(&x)?, &parse_point(&y)?)?;
            let out = if p.is_some() { d.powf(kind.p) } else { d };
            println!("{}", sig(out));
        }
        Command::Geodesic { x, y, steps } => {
            let (x, y) = (parse_point(&x)?, parse_point(&y)?);
            let n = x.n();
            let mut header = vec!["s".to_string()];
            header.extend((1..=n).map(|j| format!("zeta{j}")));
            header.extend((1..=n).map(|j| format!("eta{j}")));
            header.push("t".into());
            println!("{}", header.join(","));
            let steps = steps.max(1);
            for i in 0..=steps {
                let s = i as f64 / steps as f64;
                let p = geodesic_point(&x, &y, s)?;
                let row: Vec<String> = std::iter::once(s)
                    .chain(p.coords().iter().copied())
                    .map(sig)
                    .collect();
                println!("{}", row.join(","));
            }
        }
        Command::Barycenter { metric, points } => {
            let pts = points
                .iter()
                .map(|s| parse_point(s))
                .collect::<Result<Vec<_>>>()?;
            let r = compute_barycenter(
                &Tuple::new(pts)?,
                &metric.kind()?,
                &BarycenterOptions::default(),
            )?;
            println!("cost {}", sig(r.cost));
            println!("unique {}", r.certified_unique);
            for y in &r.minimizers {
                println!("minimizer {}", fmt_point(y));
            }
        }
        Command::SolveMmot {
            metric,
            solver,
            epsilon,
            max_iters,
            max_tuples,
            out,
            marginals,
        } => {
            let clouds = marginals
                .iter()
                .map(|p| load_cloud(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let solver = match solver {
                SolverArg::Lp => SolverSpec::Lp,
                SolverArg::Entropic => SolverSpec::Entropic { epsilon, max_iters },
            };
            let assembly = AssemblyOptions {
                max_tuples,
                ..Default::default()
            };
            let (plan, _) = solve_plan(&clouds, &metric.kind()?, &solver, &assembly)?;
            write_json(&out, &plan)?;
            println!("value {}", sig(plan.value));
            println!("gap {}", sig(plan.gap));
            println!("support {}", plan.support.len());
        }
        Command::ExtractMap { plan, psi, out } => {
            let plan = load_plan(&plan)?;
            let coupling = plan.coupling()?;
            let extraction = extract_monge(&coupling);
            let records = if psi {
                let clouds = &plan.marginals;
                let cost = assemble_cost_tensor(clouds, &plan.metric, &AssemblyOptions::default())?;
                let (u, _) =
                    map_potentials(&cost, clouds, &coupling, &plan.duals, plan.solver == "lp")?;
                let field = PotentialField::new(
                    clouds,
                    &cost,
                    &u,
                    &plan.metric,
                    &BarycenterOptions::default(),
                )?;
                let recs = psi_coherence(&field, &extraction, default_psi_step(clouds))?;
                let summary = summarize_psi(recs, &extraction, 1e-3);
                println!("psi coherent mass {}", sig(summary.coherent_mass_fraction));
                Some(summary.records)
            } else {
                None
            };
            write_json(
                &out,
                &serde_json::json!({
                    "assignments": extraction.assignments,
                    "graph_fraction": extraction.graph_fraction,
                    "conflicts": extraction.conflicts,
                    "psi": records,
                }),
            )?;
            println!("graph fraction {}", sig(extraction.graph_fraction));
        }
        Command::Wbary {
            plan,
            select_first,
            out,
        } => {
            let plan = load_plan(&plan)?;
            let opts = PushforwardOptions {
                select_first,
                ..Default::default()
            };
            let nu = pushforward_from_plan(&plan, &opts)?;
            write_cloud(&out, &nu)?;
            println!("atoms {}", nu.k());
        }
        Command::Verify {
            plan,
            checks,
            trials,
            seed,
            out,
        } => return verify(&load_plan(&plan)?, &checks, trials, seed, &out),
        Command::Run { config } => {
            let cfg = ScenarioConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let base = config.parent().unwrap_or(Path::new("."));
            let outcome = run_pipeline(&cfg, base)?;
            for c in &outcome.report.checks {
                let tag = if c.hard { "hard" } else { "soft" };
                println!(
                    "{:<24} {} ({tag})",
                    c.name,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            println!("value {}", sig(outcome.report.value));
            println!("output {}", outcome.output_dir.display());
            return Ok(outcome.report.passed);
        }
    }
    Ok(true)
}

fn verify(plan: &PlanFile, checks: &[Check], trials: usize, seed: u64, out: &Path) -> Result<bool> {
    let clouds: &[WeightedCloud] = &plan.marginals;
    if clouds.len() < 2 {
        bail!("plan carries fewer than 2 marginals");
    }
    plan.check_marginals(clouds)?;
    let kind = plan.metric;
    let bary = BarycenterOptions::default();
    let cost = assemble_cost_tensor(clouds, &kind, &AssemblyOptions::default())?;
    let coupling = plan.coupling()?;
    let mut report = serde_json::Map::new();
    let mut passed = true;
    for check in checks {
        let (name, ok, value) = match check {
            Check::C1 => {
                let s = c1_summary(&cost, &extract_monge(&coupling), &kind, clouds)?;
                ("c1", s.passed, serde_json::to_value(&s)?)
            }
            Check::C2 => {
                let r =
                    check_condition_c2(clouds, &kind, Some(&cost), &bary, &C2Options::default())?;
                ("c2", r.passed(), serde_json::to_value(&r)?)
            }
            Check::Monotone => {
                let gamma = gamma_u(&plan.duals, &cost, 1e-7);
                let r = check_cyclical_monotonicity(&gamma, &cost, trials, seed);
                ("monotone", r.passed(), serde_json::to_value(&r)?)
            }
            Check::Swap => {
                let r = check_swap_consistency(&coupling, &cost, clouds, &kind, &bary)?;
                ("swap", r.passed, serde_json::to_value(&r)?)
            }
        };
        println!("{name:<10} {}", if ok { "pass" } else { "FAIL" });
        passed &= ok;
        report.insert(name.into(), value);
    }
    report.insert("passed".into(), passed.into());
    io::write_json(out, &report)?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(t) = std::env::var("HMOT_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: HMOT_THREADS must be a positive integer, got `{t}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
