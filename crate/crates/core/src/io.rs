//! Marginal ingestion, samplers, scenario configuration, the end-to-end
//! pipeline, and deterministic JSON output.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barycenter::BarycenterResult;
use crate::error::{Error, Result};
use crate::heis::HPoint;
use crate::metric::MetricKind;
use crate::mmot::{
    assemble_cost_tensor, c_conjugate_update, check_cyclical_monotonicity, duality_gap, gamma_u,
    gap_tolerance, solve_entropic, solve_exact_lp, strict_potentials, AssemblyOptions, CostTensor,
    CouplingTensor, EntropicOptions, LpOptions, MonotonicityReport, PotentialSet, Shape,
    SupportEntry, WeightedCloud, MARG_TOL,
};
use crate::monge::{
    self, check_condition_c2, check_swap_consistency, default_psi_step, extract_monge,
    psi_coherence, transport_cost, BarycenterIndex, C2Options, C2Report, MongeExtraction,
    PotentialField, PsiRecord, PushforwardOptions, SwapReport,
};

// ---------------------------------------------------------------------------
// JSON

/// Writes every float with 17 significant digits so values round-trip exactly.
#[derive(Debug, Default)]
struct PreciseFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        if value == 0.0 {
            // keeps -0.0 and 0.0 apart without the exponent noise
            return write!(
                w,
                "{}",
                if value.is_sign_negative() {
                    "-0.0"
                } else {
                    "0.0"
                }
            );
        }
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Pretty JSON with exact float round trip.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Write-then-rename, so readers never see a partial file.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_string(value)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// clouds

/// Accepted band for the total weight of a cloud file before renormalization.
pub const WEIGHT_BAND: f64 = 1e-6;

#[derive(Deserialize)]
struct CloudFile {
    n: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Parse a cloud document `{"n", "points", "weights"}`.
pub fn parse_cloud(text: &str) -> Result<WeightedCloud> {
    let raw: CloudFile = serde_json::from_str(text)?;
    let mut points = Vec::with_capacity(raw.points.len());
    for coords in raw.points {
        if coords.len() != 2 * raw.n + 1 {
            return Err(Error::DimensionMismatch {
                expected: raw.n,
                found: coords.len().saturating_sub(1) / 2,
            });
        }
        points.push(HPoint::from_coords(coords)?);
    }
    if let Some(w) = raw.weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Format(format!("negative or non-finite weight {w}")));
    }
    let sum: f64 = raw.weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_BAND {
        return Err(Error::WeightSum { sum });
    }
    // sums already at roundoff level are kept so written clouds read back exactly
    WeightedCloud::new(points.clone(), raw.weights.clone())
        .or_else(|_| WeightedCloud::normalized(points, raw.weights))
}

pub fn load_cloud(path: &Path) -> Result<WeightedCloud> {
    parse_cloud(&fs::read_to_string(path)?)
}

pub fn write_cloud(path: &Path, cloud: &WeightedCloud) -> Result<()> {
    write_json(path, cloud)
}

// ---------------------------------------------------------------------------
// samplers and discretization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    /// `max(0, offset + gradient . x)`.
    Linear {
        gradient: Vec<f64>,
        offset: f64,
    },
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
    },
}

impl DensitySpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            DensitySpec::Uniform => 1.0,
            DensitySpec::Linear { gradient, offset } => {
                (offset + gradient.iter().zip(x).map(|(g, c)| g * c).sum::<f64>()).max(0.0)
            }
            DensitySpec::Gaussian { center, sigma } => {
                let r2: f64 = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
                (-0.5 * r2 / (sigma * sigma)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis; a single entry applies to every axis.
    pub resolution: Vec<usize>,
}

impl GridSpec {
    fn validate(&self) -> Result<(usize, Vec<usize>)> {
        let d = self.lo.len();
        if d < 3 || d.is_multiple_of(2) || self.hi.len() != d {
            return Err(Error::InvalidArgument(
                "grid box needs 2n+1 lower and upper bounds".into(),
            ));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(Error::InvalidArgument(
                "grid box must have positive extent".into(),
            ));
        }
        let res = match self.resolution.as_slice() {
            [r] => vec![*r; d],
            r if r.len() == d => r.to_vec(),
            _ => {
                return Err(Error::InvalidArgument(
                    "resolution needs 1 or 2n+1 entries".into(),
                ))
            }
        };
        if res.contains(&0) {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        Ok((d, res))
    }

    /// Largest cell width.
    pub fn spacing(&self) -> Result<f64> {
        let (_, res) = self.validate()?;
        Ok(self
            .lo
            .iter()
            .zip(&self.hi)
            .zip(&res)
            .map(|((l, h), &r)| (h - l) / r as f64)
            .fold(0.0, f64::max))
    }
}

/// Cell-centred grid cloud with weights proportional to density times cell volume.
pub fn discretize_density<F: Fn(&[f64]) -> f64>(
    grid: &GridSpec,
    density: F,
) -> Result<WeightedCloud> {
    let (d, res) = grid.validate()?;
    let widths: Vec<f64> = (0..d)
        .map(|k| (grid.hi[k] - grid.lo[k]) / res[k] as f64)
        .collect();
    let volume: f64 = widths.iter().product();
    let shape = Shape::new(res.clone());
    let mut idx = vec![0; d];
    let mut points = Vec::with_capacity(shape.len());
    let mut weights = Vec::with_capacity(shape.len());
    loop {
        let center: Vec<f64> = (0..d)
            .map(|k| grid.lo[k] + (idx[k] as f64 + 0.5) * widths[k])
            .collect();
        let rho = density(&center);
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "density {rho} at {center:?}"
            )));
        }
        weights.push(rho * volume);
        points.push(HPoint::from_coords(center)?);
        if !shape.advance(&mut idx) {
            break;
        }
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::DegenerateDensity);
    }
    WeightedCloud::normalized(points, weights)
}

/// `k` points uniform (Haar) in the metric ball `B(center, radius)`, equal weights.
pub fn sample_uniform_ball(
    center: &HPoint,
    radius: f64,
    k: usize,
    kind: &MetricKind,
    seed: u64,
) -> Result<WeightedCloud> {
    if !(radius > 0.0) || k == 0 {
        return Err(Error::InvalidArgument(
            "ball sampler needs radius > 0 and k > 0".into(),
        ));
    }
    let n = center.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertical = radius * radius / kind.vertical_constant();
    let origin = HPoint::origin(n);
    let mut points = Vec::with_capacity(k);
    while points.len() < k {
        let mut w: Vec<f64> = (0..2 * n)
            .map(|_| rng.random_range(-radius..radius))
            .collect();
        w.push(rng.random_range(-vertical..vertical));
        let w = HPoint::from_coords(w)?;
        if kind.dist(&origin, &w)? <= radius {
            points.push(center.mul(&w)?);
        }
    }
    WeightedCloud::uniform(points)
}

/// `k` points uniform in a coordinate box, equal weights.
pub fn sample_uniform_box(lo: &[f64], hi: &[f64], k: usize, seed: u64) -> Result<WeightedCloud> {
    if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(h > l)) || k == 0 {
        return Err(Error::InvalidArgument(
            "box sampler needs lo < hi and k > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..k)
        .map(|_| {
            HPoint::from_coords(
                lo.iter()
                    .zip(hi)
                    .map(|(&l, &h)| rng.random_range(l..h))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedCloud::uniform(points)
}

// ---------------------------------------------------------------------------
// scenario configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MarginalSpec {
    File {
        path: PathBuf,
    },
    Points {
        points: Vec<HPoint>,
        weights: Vec<f64>,
    },
    UniformBall {
        center: HPoint,
        radius: f64,
        k: usize,
        seed: u64,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        k: usize,
        seed: u64,
    },
    GridDensity {
        #[serde(flatten)]
        grid: GridSpec,
        density: DensitySpec,
    },
}

impl MarginalSpec {
    pub fn build(&self, kind: &MetricKind, base: &Path) -> Result<WeightedCloud> {
        match self {
            MarginalSpec::File { path } => load_cloud(&base.join(path)),
            MarginalSpec::Points { points, weights } => {
                WeightedCloud::normalized(points.clone(), weights.clone())
            }
            MarginalSpec::UniformBall {
                center,
                radius,
                k,
                seed,
            } => sample_uniform_ball(center, *radius, *k, kind, *seed),
            MarginalSpec::UniformBox { lo, hi, k, seed } => sample_uniform_box(lo, hi, *k, *seed),
            MarginalSpec::GridDensity { grid, density } => {
                discretize_density(grid, |x| density.eval(x))
            }
        }
    }

    fn spacing(&self) -> Result<f64> {
        match self {
            MarginalSpec::GridDensity { grid, .. } => grid.spacing(),
            _ => Ok(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SolverSpec {
    Lp,
    Entropic { epsilon: f64, max_iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    pub monotonicity_trials: usize,
    pub seed: u64,
    pub gamma_tol: f64,
    /// Evaluate the transport map on every single-valued atom.
    pub psi: bool,
    pub c2: C2Options,
    pub select_first: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            monotonicity_trials: 200,
            seed: 0,
            gamma_tol: 1e-7,
            psi: true,
            c2: C2Options::default(),
            select_first: false,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    /// Number of marginals; checked against `marginals` when present.
    #[serde(default)]
    pub m: Option<usize>,
    pub metric: MetricKind,
    pub marginals: Vec<MarginalSpec>,
    #[serde(default = "default_solver")]
    pub solver: SolverSpec,
    #[serde(default)]
    pub assembly: AssemblyOptions,
    #[serde(default)]
    pub checks: CheckOptions,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_solver() -> SolverSpec {
    SolverSpec::Lp
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.marginals.len() < 2 {
            return Err(Error::InvalidArgument(
                "a scenario needs at least 2 marginals".into(),
            ));
        }
        if let Some(m) = self.m {
            if m != self.marginals.len() {
                return Err(Error::InvalidArgument(format!(
                    "m = {m} but {} marginals are listed",
                    self.marginals.len()
                )));
            }
        }
        for spec in &self.marginals {
            if let MarginalSpec::File { path } = spec {
                if !base.join(path).is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "missing marginal file {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// pipeline artifacts

/// Everything `plan.json` carries: enough to rebuild the pushforward without
/// recomputing barycenters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub metric: MetricKind,
    pub solver: String,
    pub value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub shape: Shape,
    pub support: Vec<SupportEntry>,
    pub duals: PotentialSet,
    /// Barycenter results of the support tuples, in support order.
    pub barycenters: Vec<BarycenterResult>,
    pub marginals: Vec<WeightedCloud>,
}

impl PlanFile {
    pub fn coupling(&self) -> Result<CouplingTensor> {
        CouplingTensor::new(self.shape.clone(), self.support.clone())
    }

    pub fn check_marginals(&self, clouds: &[WeightedCloud]) -> Result<()> {
        if Shape::of(clouds) != self.shape {
            return Err(Error::InvalidArgument(format!(
                "marginal sizes {:?} do not match the plan shape {:?}",
                Shape::of(clouds).dims(),
                self.shape.dims()
            )));
        }
        Ok(())
    }
}

/// Solve a multi-marginal problem and package the result.
pub fn solve_plan(
    clouds: &[WeightedCloud],
    kind: &MetricKind,
    solver: &SolverSpec,
    assembly: &AssemblyOptions,
) -> Result<(PlanFile, CostTensor)> {
    let cost = assemble_cost_tensor(clouds, kind, assembly).map_err(|e| e.at_stage("cost"))?;
    let (plan, duals, name) = match solver {
        SolverSpec::Lp => {
            let sol = solve_exact_lp(&cost, clouds, &LpOptions::default())
                .map_err(|e| e.at_stage("solve"))?;
            (sol.plan, sol.potentials, "lp")
        }
        SolverSpec::Entropic { epsilon, max_iters } => {
            let opts = EntropicOptions {
                epsilon: *epsilon,
                max_iters: *max_iters,
                marg_tol: MARG_TOL,
            };
            let sol = solve_entropic(&cost, clouds, &opts).map_err(|e| e.at_stage("solve"))?;
            // conjugate the scalings into feasible potentials
            let mut u = sol.potentials;
            for i in (1..clouds.len()).chain(std::iter::once(0)) {
                u.u[i] = c_conjugate_update(&u, &cost, i);
            }
            (sol.plan, u, "entropic")
        }
    };
    let value = plan.value(&cost);
    let gap = duality_gap(&plan, &duals, &cost, clouds);
    let barycenters = plan
        .support
        .iter()
        .map(|e| {
            cost.barycenter(&e.idx)
                .cloned()
                .expect("assembled tensors carry barycenters")
        })
        .collect();
    Ok((
        PlanFile {
            metric: *kind,
            solver: name.into(),
            value,
            dual_value: value - gap,
            gap,
            shape: plan.shape.clone(),
            support: plan.support,
            duals,
            barycenters,
            marginals: clouds.to_vec(),
        },
        cost,
    ))
}

/// Pushforward of a saved plan through its stored barycenters.
pub fn pushforward_from_plan(plan: &PlanFile, opts: &PushforwardOptions) -> Result<WeightedCloud> {
    monge::pushforward(&plan.coupling()?, &plan.barycenters, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Hard checks decide the exit status.
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiSummary {
    pub evaluated: usize,
    pub excluded: usize,
    pub threshold: f64,
    /// Share of single-valued mass whose map value lies within `threshold`
    /// of the assigned barycenter.
    pub coherent_mass_fraction: f64,
    pub max_distance: f64,
    pub records: Vec<PsiRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Summary {
    pub tuples_indexed: usize,
    pub merge_tol: f64,
    pub collisions: Vec<Vec<Vec<usize>>>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushforwardSummary {
    pub atoms: usize,
    pub sum_of_transport_costs: f64,
    pub mmot_value: f64,
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: MetricKind,
    pub n: usize,
    pub shape: Vec<usize>,
    pub solver: String,
    pub value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub gap_tol: f64,
    pub support_size: usize,
    pub gamma_u_size: usize,
    pub support_in_gamma_u: bool,
    pub strict_slack: Option<f64>,
    pub monotonicity: MonotonicityReport,
    pub graph_fraction: f64,
    pub conflicts: Vec<usize>,
    pub psi: Option<PsiSummary>,
    pub c1: C1Summary,
    pub c2: C2Report,
    pub swap: SwapReport,
    pub pushforward: Option<PushforwardSummary>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: Report,
    pub output_dir: PathBuf,
}

/// Strict potentials are only attempted below this many tuples.
const STRICT_DUAL_LIMIT: usize = 20_000;

/// Run every stage and write `plan.json`, `duals.json`, `map.json`, `nu.json`,
/// `report.json` and `timing.json` into the configured output directory
/// (relative paths resolve against `base`).
pub fn run_pipeline(cfg: &ScenarioConfig, base: &Path) -> Result<PipelineOutcome> {
    let mut timing = Timing::default();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut Timing| {
        timing
            .stages
            .push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    cfg.validate(base).map_err(|e| e.at_stage("config"))?;
    let kind = cfg.metric;
    let clouds = cfg
        .marginals
        .iter()
        .map(|s| s.build(&kind, base))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("load"))?;
    if let Some(c) = clouds.iter().find(|c| c.n() != cfg.n) {
        return Err(Error::DimensionMismatch {
            expected: cfg.n,
            found: c.n(),
        }
        .at_stage("load"));
    }
    let out = base.join(&cfg.output_dir);
    fs::create_dir_all(&out)?;
    lap("load", &mut timing);

    let (plan_file, cost) = solve_plan(&clouds, &kind, &cfg.solver, &cfg.assembly)?;
    let plan = plan_file.coupling()?;
    write_json(&out.join("plan.json"), &plan_file)?;
    lap("solve", &mut timing);

    let (field_u, strict) = map_potentials(
        &cost,
        &clouds,
        &plan,
        &plan_file.duals,
        plan_file.solver == "lp",
    )
    .map_err(|e| e.at_stage("duals"))?;
    write_json(
        &out.join("duals.json"),
        &serde_json::json!({
            "u": plan_file.duals.u,
            "strict": strict.map(|s| serde_json::json!({"u": field_u.u, "slack": s})),
        }),
    )?;
    lap("duals", &mut timing);

    let gamma = gamma_u(&plan_file.duals, &cost, cfg.checks.gamma_tol);
    let support_in_gamma = plan.support.iter().all(|e| gamma.contains(&e.idx));
    let monotonicity = check_cyclical_monotonicity(
        &gamma,
        &cost,
        cfg.checks.monotonicity_trials,
        cfg.checks.seed,
    );
    lap("gamma", &mut timing);

    let extraction = extract_monge(&plan);
    let bary_opts = cfg.assembly.barycenter;
    let psi = if cfg.checks.psi {
        let spacing = cfg
            .marginals
            .iter()
            .map(MarginalSpec::spacing)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let field = PotentialField::new(&clouds, &cost, &field_u, &kind, &bary_opts)
            .map_err(|e| e.at_stage("map"))?;
        let records = psi_coherence(&field, &extraction, default_psi_step(&clouds))
            .map_err(|e| e.at_stage("map"))?;
        Some(summarize_psi(
            records,
            &extraction,
            (2.0 * spacing).max(1e-3),
        ))
    } else {
        None
    };
    write_json(
        &out.join("map.json"),
        &serde_json::json!({
            "assignments": extraction.assignments,
            "graph_fraction": extraction.graph_fraction,
            "conflicts": extraction.conflicts,
            "psi": psi.as_ref().map(|p| &p.records),
        }),
    )?;
    lap("map", &mut timing);

    let c1 = c1_summary(&cost, &extraction, &kind, &clouds).map_err(|e| e.at_stage("c1"))?;
    let c2 = check_condition_c2(&clouds, &kind, Some(&cost), &bary_opts, &cfg.checks.c2)
        .map_err(|e| e.at_stage("c2"))?;
    let swap = check_swap_consistency(&plan, &cost, &clouds, &kind, &bary_opts)
        .map_err(|e| e.at_stage("swap"))?;
    lap("checks", &mut timing);

    let push_opts = PushforwardOptions {
        select_first: cfg.checks.select_first,
        ..Default::default()
    };
    let nu = pushforward_from_plan(&plan_file, &push_opts).map_err(|e| e.at_stage("wbary"))?;
    write_cloud(&out.join("nu.json"), &nu)?;
    let mut sum = 0.0;
    for c in &clouds {
        sum += transport_cost(c, &nu, &kind).map_err(|e| e.at_stage("wbary"))?;
    }
    let pushforward = Some(PushforwardSummary {
        atoms: nu.k(),
        sum_of_transport_costs: sum,
        mmot_value: plan_file.value,
        defect: (sum - plan_file.value).abs(),
    });
    lap("wbary", &mut timing);

    let gap_tol = gap_tolerance(plan_file.value);
    let is_lp = plan_file.solver == "lp";
    let checks = vec![
        CheckResult {
            name: "duality_gap".into(),
            passed: plan_file.gap.abs() <= gap_tol,
            hard: is_lp,
        },
        CheckResult {
            name: "support_in_gamma_u".into(),
            passed: support_in_gamma,
            hard: is_lp,
        },
        CheckResult {
            name: "cyclical_monotonicity".into(),
            passed: monotonicity.passed(),
            hard: true,
        },
        CheckResult {
            name: "c1".into(),
            passed: c1.passed,
            hard: true,
        },
        CheckResult {
            name: "c2".into(),
            passed: c2.passed(),
            hard: kind.p == 2.0,
        },
        CheckResult {
            name: "swap".into(),
            passed: swap.passed,
            hard: false,
        },
    ];
    let passed = checks.iter().all(|c| c.passed || !c.hard);
    let report = Report {
        metric: kind,
        n: cfg.n,
        shape: plan_file.shape.dims().to_vec(),
        solver: plan_file.solver.clone(),
        value: plan_file.value,
        dual_value: plan_file.dual_value,
        gap: plan_file.gap,
        gap_tol,
        support_size: plan.support.len(),
        gamma_u_size: gamma.len(),
        support_in_gamma_u: support_in_gamma,
        strict_slack: strict,
        monotonicity,
        graph_fraction: extraction.graph_fraction,
        conflicts: extraction.conflicts.clone(),
        psi,
        c1,
        c2,
        swap,
        pushforward,
        checks,
        passed,
    };
    write_json(&out.join("report.json"), &report)?;
    lap("report", &mut timing);
    write_json(&out.join("timing.json"), &timing)?;
    Ok(PipelineOutcome {
        report,
        output_dir: out,
    })
}

/// Potentials for evaluating the transport map: strict ones when `plan` is an
/// exact optimum and the tensor is small enough, else `duals`; the first slot is replaced by its c-conjugate.
/// Also returns the strict slack when strict potentials were found.
pub fn map_potentials(
    cost: &CostTensor,
    clouds: &[WeightedCloud],
    plan: &CouplingTensor,
    duals: &PotentialSet,
    exact: bool,
) -> Result<(PotentialSet, Option<f64>)> {
    let (mut u, slack) = if exact && cost.shape().len() <= STRICT_DUAL_LIMIT {
        let (u, s) = strict_potentials(cost, clouds, plan)?;
        (u, Some(s))
    } else {
        (duals.clone(), None)
    };
    u.u[0] = c_conjugate_update(&u, cost, 0);
    Ok((u, slack))
}

/// Index the single-valued support tuples and list every shared barycenter.
pub fn c1_summary(
    cost: &CostTensor,
    extraction: &MongeExtraction,
    kind: &MetricKind,
    clouds: &[WeightedCloud],
) -> Result<C1Summary> {
    let tuples: Vec<Vec<usize>> = extraction
        .assignments
        .iter()
        .map(|a| a.idx.clone())
        .collect();
    let merge_tol = monge::default_merge_tolerance(clouds);
    let index = BarycenterIndex::build(cost, &tuples, kind, merge_tol)?;
    let collisions: Vec<Vec<Vec<usize>>> = index
        .collisions()
        .iter()
        .map(|e| e.tuples.clone())
        .collect();
    Ok(C1Summary {
        tuples_indexed: tuples.len(),
        merge_tol,
        passed: collisions.is_empty(),
        collisions,
    })
}

pub fn summarize_psi(
    records: Vec<PsiRecord>,
    extraction: &MongeExtraction,
    threshold: f64,
) -> PsiSummary {
    let single: f64 = extraction.assignments.iter().map(|a| a.mass).sum();
    let coherent: f64 = records
        .iter()
        .filter(|r| r.distance.is_some_and(|d| d <= threshold))
        .map(|r| r.mass)
        .sum();
    PsiSummary {
        evaluated: records.iter().filter(|r| r.psi.is_some()).count(),
        excluded: records.iter().filter(|r| r.excluded.is_some()).count(),
        threshold,
        coherent_mass_fraction: if single > 0.0 { coherent / single } else { 1.0 },
        max_distance: records
            .iter()
            .filter_map(|r| r.distance)
            .fold(0.0, f64::max),
        records,
    }
}
