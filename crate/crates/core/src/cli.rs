//! Run configuration and the `fit`, `simulate`, `benchmark`, `cv` and
//! `diagnose` commands. Every command writes into one output directory:
//! numeric artifacts, the resolved `config.toml`, a `manifest.json` with
//! output hashes, and a `timing.json` that is the only non-reproducible file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::KnotLayout;
use crate::dataprep::{default_prior, load_csv, partition_folds, partition_folds_contiguous, Dataset, PChoice, PriorSpec, Transform};
use crate::error::{Error, Result};
use crate::evaluation::{
    data_bounds, grid_points, inefficiency_factor, knot_heatmap, lpds_partitioned, posterior_surface, surface_if_summary,
    LpdsReport,
};
use crate::posterior::Model;
use crate::rng::derive_seed;
use crate::sampler::{run_chain, ChainConfig, ChainOutput, MHConfig, UpdateFlags};
use crate::simulation::{generate_dgp, run_benchmark, BenchmarkConfig, BenchmarkReport, DgpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Simulate,
    Benchmark,
    Cv,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::Benchmark => "benchmark",
            Command::Cv => "cv",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Headed numeric CSV; every non-response column is a covariate.
    pub path: Option<PathBuf>,
    pub responses: Vec<String>,
    pub transform: Transform,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            responses: vec!["y1".into()],
            transform: Transform::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnotConfig {
    pub surface: usize,
    /// Knots per covariate, unless `additive_counts` lists them one by one.
    pub additive: usize,
    pub additive_counts: Vec<usize>,
}

impl Default for KnotConfig {
    fn default() -> Self {
        Self {
            surface: 5,
            additive: 2,
            additive_counts: Vec::new(),
        }
    }
}

impl KnotConfig {
    pub fn layout(&self, dim: usize) -> Result<KnotLayout> {
        if self.additive_counts.is_empty() {
            Ok(KnotLayout::uniform(dim, self.surface, self.additive))
        } else {
            KnotLayout::new(dim, self.surface, self.additive_counts.clone())
        }
    }
}

/// Replacements for the data-driven default hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_o: Option<PChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_a: Option<PChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_s: Option<PChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_lambda_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_lambda_var: Option<f64>,
}

impl PriorOverrides {
    pub fn apply(&self, prior: &mut PriorSpec) -> Result<()> {
        if let Some(c2) = self.c2 {
            if !(c2 > 0.0) {
                return Err(Error::Config(format!("prior.c2 = {c2} must be positive")));
            }
            // Both knot covariances are proportional to c².
            let ratio = c2 / prior.c2;
            prior.surface_knot_cov *= ratio;
            prior.additive_knot_var.iter_mut().for_each(|v| *v *= ratio);
            prior.c2 = c2;
        }
        if let Some(n0) = self.n0 {
            prior.n0 = n0;
        }
        for (slot, choice) in prior.p_choice.iter_mut().zip([self.p_o, self.p_a, self.p_s]) {
            if let Some(c) = choice {
                *slot = c;
            }
        }
        if let Some(m) = self.log_lambda_mean {
            prior.log_lambda_mean.fill(m);
        }
        if let Some(v) = self.log_lambda_var {
            prior.log_lambda_var.fill(v);
        }
        prior.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mh: MHConfig,
    pub update: UpdateFlags,
    pub iterations: usize,
    pub burn_in: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            mh: c.mh,
            update: c.update,
            iterations: c.iterations,
            burn_in: c.burn_in,
        }
    }
}

impl SamplerConfig {
    pub fn chain(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            mh: self.mh.clone(),
            update: self.update,
            iterations: self.iterations,
            burn_in: self.burn_in,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FoldScheme {
    #[default]
    Strided,
    Contiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub scheme: FoldScheme,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            scheme: FoldScheme::Strided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Cells per axis of the posterior surface grid.
    pub grid_resolution: usize,
    pub heatmap_resolution: usize,
    /// Random points for the surface inefficiency factor.
    pub if_points: usize,
    /// Fraction of each covariate range added on both sides of the grids.
    pub grid_pad: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 25,
            heatmap_resolution: 70,
            if_points: 100,
            grid_pad: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub replicates: usize,
    pub fixed_knots: Vec<usize>,
    pub free_knots: Vec<usize>,
    pub oracle: bool,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            replicates: b.replicates,
            fixed_knots: b.fixed_knots,
            free_knots: b.free_knots,
            oracle: b.oracle,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// A `fit` output directory or a single draws CSV.
    pub draws: Option<PathBuf>,
}

/// Everything a command needs. Precedence: built-in defaults, then the
/// config file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never affects numeric output.
    pub workers: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub knots: KnotConfig,
    pub prior: PriorOverrides,
    pub sampler: SamplerConfig,
    pub cv: CvConfig,
    pub output: OutputConfig,
    /// Data-generating process for `simulate` and `benchmark`; its seed is
    /// replaced by the run seed.
    pub simulate: DgpSpec,
    pub benchmark: BenchmarkSection,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            out: PathBuf::from("freeknot-out"),
            data: DataConfig::default(),
            knots: KnotConfig::default(),
            prior: PriorOverrides::default(),
            sampler: SamplerConfig::default(),
            cv: CvConfig::default(),
            output: OutputConfig::default(),
            simulate: DgpSpec::default(),
            benchmark: BenchmarkSection::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the config with the fields that cannot change the numbers
    /// (`workers`, `out`) cleared.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig {
            workers: 0,
            out: PathBuf::new(),
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    fn chain(&self) -> ChainConfig {
        self.sampler.chain(self.seed)
    }

    fn dgp(&self) -> DgpSpec {
        DgpSpec {
            seed: self.seed,
            ..self.simulate.clone()
        }
    }

    fn load_data(&self) -> Result<Dataset> {
        let path = self
            .data
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("no data file: set data.path or pass --data".into()))?;
        load_csv(path, &self.data.responses, self.data.transform)
    }

    fn prior_for(&self, data: &Dataset, seed: u64) -> Result<PriorSpec> {
        let layout = self.knots.layout(data.dim())?;
        let mut prior = default_prior(data, &layout, seed)?;
        self.prior.apply(&mut prior)?;
        Ok(prior)
    }
}

/// Wall-clock seconds by phase; goes to `timing.json` only.
type Timing = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    pub config_file: String,
    pub config_hash: String,
    pub outputs: Vec<OutputEntry>,
}

struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }
}

/// Header plus one comma-separated line per row; floats use `{}` so they
/// parse back to the same bits.
fn csv_table(header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

/// Runs `cmd` inside a pool of `cfg.workers` threads and writes the manifest.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Manifest> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let start = Instant::now();
    let mut out = OutDir::create(&cfg.out)?;
    let mut timing = pool.install(|| match cmd {
        Command::Fit => cmd_fit(cfg, &mut out),
        Command::Simulate => cmd_simulate(cfg, &mut out),
        Command::Benchmark => cmd_benchmark(cfg, &mut out),
        Command::Cv => cmd_cv(cfg, &mut out),
        Command::Diagnose => cmd_diagnose(cfg, &mut out),
    })?;
    let outputs = out
        .files
        .iter()
        .map(|f| {
            let path = out.root.join(f);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(OutputEntry {
                file: f.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // The config carries the output path, so it stays out of the hashed list.
    out.write("config.toml", &cfg.to_toml()?)?;
    let manifest = Manifest {
        command: cmd,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_file: "config.toml".into(),
        config_hash: cfg.hash()?,
        outputs,
    };
    let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    let path = out.root.join("manifest.json");
    fs::write(&path, s).map_err(|e| Error::io(&path, e))?;

    timing.insert("command_secs".into(), start.elapsed().as_secs_f64());
    let runtime = serde_json::json!({
        "workers": pool.current_num_threads(),
        "seconds": timing,
    });
    let path = out.root.join("timing.json");
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&runtime).expect("json"))).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn component_tag(c: usize) -> &'static str {
    ["o", "a", "s"][c]
}

/// Column names of each stored block.
fn draw_columns(layout: &KnotLayout, data: &Dataset, q: usize) -> BTreeMap<&'static str, Vec<String>> {
    let p = data.p();
    let mut knots = Vec::with_capacity(layout.len());
    for k in 0..layout.surface {
        for c in &data.covariate_names {
            knots.push(format!("s{k}_{c}"));
        }
    }
    for (j, &m) in layout.additive.iter().enumerate() {
        for k in 0..m {
            knots.push(format!("a{k}_{}", data.covariate_names[j]));
        }
    }
    let lambda = (0..3)
        .flat_map(|c| data.response_names.iter().map(move |r| format!("log_lambda_{}_{r}", component_tag(c))))
        .collect();
    let sigma = (0..p)
        .flat_map(|i| (i..p).map(move |j| (i, j)))
        .map(|(i, j)| format!("sigma_{}_{}", data.response_names[i], data.response_names[j]))
        .collect();
    let coef = |prefix: &str| -> Vec<String> {
        (0..p)
            .flat_map(|j| (0..q).map(move |r| (r, j)))
            .map(|(r, j)| format!("{prefix}_{r}_{}", data.response_names[j]))
            .collect()
    };
    let mut m = BTreeMap::new();
    m.insert("knots", knots);
    m.insert("log_lambda", lambda);
    m.insert("sigma", sigma);
    m.insert("b", coef("b"));
    m.insert("b_tilde", coef("b_tilde"));
    m
}

fn block_rows(chain: &ChainOutput, block: &str) -> Vec<Vec<f64>> {
    chain
        .draws
        .iter()
        .map(|d| match block {
            "knots" => d.knots.iter().copied().collect(),
            "log_lambda" => d.log_lambda.iter().copied().collect(),
            "sigma" => {
                let p = d.sigma.nrows();
                (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).map(|(i, j)| d.sigma[(i, j)]).collect()
            }
            "b" => d.b.iter().copied().collect(),
            "b_tilde" => d.b_tilde.iter().copied().collect(),
            _ => unreachable!("unknown block {block}"),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockIndex {
    pub name: String,
    pub file: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawIndex {
    pub draws: usize,
    pub burn_in: usize,
    pub p: usize,
    pub q: usize,
    pub layout: KnotLayout,
    pub covariates: Vec<String>,
    pub responses: Vec<String>,
    pub blocks: Vec<BlockIndex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub draws: usize,
    pub sigma_acceptance: f64,
    pub knot_acceptance: f64,
    pub lambda_acceptance: f64,
    /// Mean surface inefficiency factor; absent below 50 draws.
    pub surface_if: Option<f64>,
    pub srwm_scales: Option<Vec<f64>>,
    pub prior: PriorSpec,
}

fn write_draws(out: &mut OutDir, chain: &ChainOutput, data: &Dataset, q: usize) -> Result<()> {
    let columns = draw_columns(&chain.knot_layout, data, q);
    let mut blocks = Vec::new();
    for name in ["knots", "log_lambda", "sigma", "b", "b_tilde"] {
        let file = format!("draws/{name}.csv");
        out.write(&file, &csv_table(&columns[name], block_rows(chain, name)))?;
        blocks.push(BlockIndex {
            name: name.into(),
            file,
            columns: columns[name].clone(),
        });
    }
    let acc_header: Vec<String> = ["sigma_accepted", "sigma_attempted", "knot_accepted", "knot_attempted", "lambda_accepted", "lambda_attempted"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut acc = acc_header.join(",");
    acc.push('\n');
    for i in 0..chain.draws.len() {
        let recs = [&chain.sigma_acceptance[i], &chain.knot_acceptance[i], &chain.lambda_acceptance[i]];
        let line: Vec<String> = recs.iter().flat_map(|r| [r.accepted.to_string(), r.attempted.to_string()]).collect();
        acc.push_str(&line.join(","));
        acc.push('\n');
    }
    out.write("draws/acceptance.csv", &acc)?;
    out.write_json(
        "draws.json",
        &DrawIndex {
            draws: chain.draws.len(),
            burn_in: chain.config.burn_in,
            p: data.p(),
            q,
            layout: chain.knot_layout.clone(),
            covariates: data.covariate_names.clone(),
            responses: data.response_names.clone(),
            blocks,
        },
    )
}

fn write_grids(out: &mut OutDir, cfg: &RunConfig, chain: &ChainOutput, data: &Dataset) -> Result<()> {
    let d = data.dim();
    if d == 0 {
        return Ok(());
    }
    let bounds = data_bounds(data, cfg.output.grid_pad);
    let view: Vec<usize> = (0..d.min(2)).collect();
    let names = &data.covariate_names;
    let mut header: Vec<String> = view.iter().map(|&c| names[c].clone()).collect();
    for r in &data.response_names {
        header.push(format!("mean_{r}"));
        header.push(format!("sd_{r}"));
    }
    // Other covariates sit at their standardised mean of zero.
    let points = grid_points(&bounds, cfg.output.grid_resolution, &view, &vec![0.0; d]);
    let rows: Vec<Vec<f64>> = if chain.draws.is_empty() {
        Vec::new()
    } else {
        let surf = posterior_surface(chain, &points)?;
        (0..points.nrows())
            .map(|i| {
                let mut row: Vec<f64> = view.iter().map(|&c| points[(i, c)]).collect();
                for j in 0..data.p() {
                    row.push(surf.mean[(i, j)]);
                    row.push(surf.sd[(i, j)]);
                }
                row
            })
            .collect()
    };
    out.write("grids/surface.csv", &csv_table(&header, rows))?;
    let (surface, additive) = knot_heatmap(chain, &bounds, cfg.output.heatmap_resolution, &view)?;
    out.write("grids/heatmap_surface.csv", &surface.to_csv())?;
    for (j, grid) in additive.iter().enumerate() {
        out.write(&format!("grids/heatmap_additive_{}.csv", names[j]), &grid.to_csv())?;
    }
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, out: &mut OutDir) -> Result<Timing> {
    let data = cfg.load_data()?;
    let prior = cfg.prior_for(&data, derive_seed(cfg.seed, 1))?;
    let model = Model::new(data.clone(), prior.clone())?;
    log::info!("fitting {} rows, q = {}, {} knot coordinates", data.n(), model.q(), model.knot_layout.len());
    let chain = run_chain(&model, &cfg.chain(), None)?;
    write_draws(out, &chain, &data, model.q())?;
    write_grids(out, cfg, &chain, &data)?;
    let surface_if = if chain.draws.len() >= 50 && data.dim() > 0 {
        Some(surface_if_summary(&chain, &data, cfg.output.if_points, derive_seed(cfg.seed, 2))?)
    } else {
        None
    };
    out.write_json(
        "summary.json",
        &FitSummary {
            draws: chain.draws.len(),
            sigma_acceptance: chain.sigma_acceptance_rate(),
            knot_acceptance: chain.knot_acceptance_rate(),
            lambda_acceptance: chain.lambda_acceptance_rate(),
            surface_if,
            srwm_scales: chain.srwm_scales.clone(),
            prior,
        },
    )?;
    let t = &chain.timing;
    let timing = [
        ("sigma_secs", t.sigma_secs),
        ("knots_secs", t.knots_secs),
        ("lambda_secs", t.lambda_secs),
        ("b_secs", t.b_secs),
        ("sampling_secs", t.sampling_secs),
        ("chain_secs", t.total_secs),
    ];
    Ok(timing.iter().map(|(k, v)| (k.to_string(), *v)).collect())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_simulate(cfg: &RunConfig, out: &mut OutDir) -> Result<Timing> {
    let spec = cfg.dgp();
    let syn = generate_dgp(&spec)?;
    let cov = syn.data.covariates();
    let ys: Vec<String> = (1..=spec.p).map(|j| format!("y{j}")).collect();
    let xs: Vec<String> = (1..=spec.covariates).map(|j| format!("x{j}")).collect();
    let header: Vec<String> = ys.iter().chain(&xs).cloned().collect();
    let rows = (0..syn.data.n()).map(|i| syn.data.y.row(i).iter().chain(cov.row(i).iter()).copied().collect());
    out.write("data.csv", &csv_table(&header, rows))?;
    let fs: Vec<String> = (1..=spec.p).map(|j| format!("f{j}")).collect();
    out.write("f_train.csv", &csv_table(&fs, matrix_rows(&syn.f_train)))?;
    let eval_header: Vec<String> = xs.iter().chain(&fs).cloned().collect();
    let eval_rows = (0..syn.eval_covariates.nrows())
        .map(|i| syn.eval_covariates.row(i).iter().chain(syn.f_eval.row(i).iter()).copied().collect());
    out.write("eval.csv", &csv_table(&eval_header, eval_rows))?;
    out.write_json(
        "truth.json",
        &serde_json::json!({
            "weights": syn.weights,
            "component_means": matrix_rows(&syn.component_means),
            "true_knots": matrix_rows(&syn.true_knots),
            "true_b": matrix_rows(&syn.true_b),
            "sigma_true": matrix_rows(&syn.sigma_true),
        }),
    )?;
    Ok(Timing::new())
}

fn benchmark_table(report: &BenchmarkReport) -> String {
    let mut s = String::from("fixed_knots,free_knots,tercile,replicates,median_log_loss_ratio\n");
    for cell in report.overall.iter().chain(&report.cells) {
        let tercile = match cell.tercile {
            0 => "low",
            1 => "mid",
            2 => "high",
            _ => "all",
        };
        let median = cell.median.map_or_else(|| "NaN".to_string(), |m| m.to_string());
        writeln!(s, "{},{},{tercile},{},{median}", cell.fixed, cell.free, cell.log_ratios.len()).expect("write to string");
    }
    s
}

fn cmd_benchmark(cfg: &RunConfig, out: &mut OutDir) -> Result<Timing> {
    let b = &cfg.benchmark;
    let bench = BenchmarkConfig {
        replicates: b.replicates,
        dgp: cfg.dgp(),
        fixed_knots: b.fixed_knots.clone(),
        free_knots: b.free_knots.clone(),
        oracle: b.oracle,
        chain: cfg.chain(),
        seed: cfg.seed,
    };
    let report = run_benchmark(&bench)?;
    let mut rows = String::from("replicate,model,knots,dnl,loss,error\n");
    for r in &report.rows {
        let model = serde_json::to_value(r.model).expect("json");
        let loss = r.loss.map_or_else(String::new, |l| l.to_string());
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(rows, "{},{},{},{},{loss},{err}", r.replicate, model.as_str().unwrap_or(""), r.knots, r.dnl).expect("write to string");
    }
    out.write("rows.csv", &rows)?;
    out.write("table.csv", &benchmark_table(&report))?;
    out.write_json("report.json", &report)?;
    Ok(Timing::new())
}

fn cmd_cv(cfg: &RunConfig, out: &mut OutDir) -> Result<Timing> {
    let data = cfg.load_data()?;
    let parts = match cfg.cv.scheme {
        FoldScheme::Strided => partition_folds(data.n(), cfg.cv.folds)?,
        FoldScheme::Contiguous => partition_folds_contiguous(data.n(), cfg.cv.folds)?,
    };
    let report: LpdsReport = lpds_partitioned(&data, |train, seed| cfg.prior_for(train, seed), &parts, &cfg.chain())?;
    let header: Vec<String> = ["fold", "size", "log_pd", "mc_se"].iter().map(|s| s.to_string()).collect();
    let rows = (0..parts.len()).map(|f| vec![f as f64, report.fold_sizes[f] as f64, report.fold_log_pd[f], report.fold_mc_se[f]]);
    out.write("folds.csv", &csv_table(&header, rows))?;
    out.write_json("lpds.json", &report)?;
    Ok(Timing::new())
}

/// Reads a headed numeric CSV into column names and columns.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); names.len()];
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad value '{field}' in row {}", path.display(), line + 2)))?;
            cols[j].push(v);
        }
    }
    Ok((names, cols))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub block: String,
    pub column: String,
    pub mean: f64,
    pub sd: f64,
    /// NaN when the series is too short.
    pub inefficiency: f64,
    pub ess: f64,
}

/// IF and ESS of every column of a draws CSV.
pub fn diagnose_columns(block: &str, names: &[String], cols: &[Vec<f64>]) -> Vec<DiagnosticRow> {
    names
        .iter()
        .zip(cols)
        .map(|(name, col)| {
            let m = col.len() as f64;
            let mean = col.iter().sum::<f64>() / m;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            let inefficiency = inefficiency_factor(col).unwrap_or(f64::NAN);
            DiagnosticRow {
                block: block.into(),
                column: name.clone(),
                mean,
                sd,
                inefficiency,
                ess: m / inefficiency,
            }
        })
        .collect()
}

fn cmd_diagnose(cfg: &RunConfig, out: &mut OutDir) -> Result<Timing> {
    let target = cfg
        .diagnose
        .draws
        .as_ref()
        .ok_or_else(|| Error::Config("no draws to diagnose: set diagnose.draws or pass a path".into()))?;
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    if target.is_dir() {
        let index_path = target.join("draws.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: DrawIndex =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", index_path.display())))?;
        for b in index.blocks {
            sources.push((b.name, target.join(b.file)));
        }
    } else {
        let stem = target.file_stem().map_or("draws".into(), |s| s.to_string_lossy().into_owned());
        sources.push((stem, target.clone()));
    }
    let mut rows = Vec::new();
    for (block, path) in &sources {
        let (names, cols) = read_columns(path)?;
        rows.extend(diagnose_columns(block, &names, &cols));
    }
    let mut s = String::from("block,column,mean,sd,inefficiency,ess\n");
    for r in &rows {
        writeln!(s, "{},{},{},{},{},{}", r.block, r.column, r.mean, r.sd, r.inefficiency, r.ess).expect("write to string");
    }
    out.write("diagnostics.csv", &s)?;
    let finite: Vec<f64> = rows.iter().map(|r| r.inefficiency).filter(|v| v.is_finite()).collect();
    let mut summary = serde_json::json!({
        "columns": rows.len(),
        "mean_inefficiency": if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        "max_inefficiency": finite.iter().copied().fold(f64::NAN, f64::max),
    });
    // ESS per minute needs the sampling time of a fit directory.
    if target.is_dir() {
        if let Ok(text) = fs::read_to_string(target.join("timing.json")) {
            let t: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            if let Some(secs) = t["seconds"]["sampling_secs"].as_f64() {
                summary["sampling_secs"] = secs.into();
            }
        }
    }
    out.write_json("diagnostics.json", &summary)?;
    Ok(Timing::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_fall_back_to_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[sampler]\niterations = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sampler.iterations, 3);
        assert_eq!(cfg.sampler.burn_in, SamplerConfig::default().burn_in);
        assert_eq!(cfg.knots, KnotConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[sampler.mh]\nnewton = 2\n").is_err());
    }

    #[test]
    fn hash_ignores_workers_and_out() {
        let a = RunConfig::default();
        let b = RunConfig {
            workers: 7,
            out: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 2, ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn csv_floats_round_trip() {
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, 123456789.125, f64::MIN_POSITIVE];
        let text = csv_table(&["v".into()], vals.iter().map(|v| vec![*v]));
        let parsed: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        assert_eq!(parsed, vals);
        assert_eq!(csv_table(&["v".into()], parsed.iter().map(|v| vec![*v])), text);
    }

    #[test]
    fn c2_override_rescales_knot_covariances() {
        let data = Dataset::from_raw(
            DMatrix::from_fn(30, 1, |i, _| (i as f64 * 0.3).sin()),
            &DMatrix::from_fn(30, 2, |i, j| ((i * (j + 2)) as f64 * 0.7).cos()),
            true,
        )
        .unwrap();
        let mut prior = default_prior(&data, &KnotLayout::uniform(2, 2, 1), 3).unwrap();
        let base = prior.clone();
        PriorOverrides {
            c2: Some(2.0 * base.c2),
            ..Default::default()
        }
        .apply(&mut prior)
        .unwrap();
        assert_eq!(prior.surface_knot_cov, &base.surface_knot_cov * 2.0);
        assert_eq!(prior.additive_knot_var[1], base.additive_knot_var[1] * 2.0);
    }

    #[test]
    fn iid_columns_have_unit_if() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::stream_rng(5, 0);
        let col: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows = diagnose_columns("x", &["z".into()], &[col]);
        assert!((0.9..1.2).contains(&rows[0].inefficiency), "{}", rows[0].inefficiency);
    }
}
