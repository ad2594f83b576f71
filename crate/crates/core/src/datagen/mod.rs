//! Seeded datasets for the advection, diffusion-reaction and Poisson problems.
//!
//! Every input function `k` (training first, then validation) draws from its
//! own stream `ChaCha8Rng::seed_from_u64(seed)` with `set_stream(k)`, so a
//! dataset is a pure function of its config.
//!
//! Grids are equidistant on `[0, 1]` with `grid` nodes per axis. Output
//! points are ordered `q = j * grid + i` with `i` along the first trunk
//! coordinate (`x`) and `j` along the second (`t` or `y`). Fields stored as
//! matrices put `j` on rows.

pub mod fdm;
pub mod gp;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::deeponet::{LossTerm, TrunkOperator};
use crate::linalg::{LinalgError, Matrix};
use crate::nets::ImageShape;
use crate::train::{TrainData, Validation};
use fdm::{DiffusionReactionGrid, FdmError, PoissonSolver};
use gp::{GpKernel, GpSampler, GpSampler2d};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("GP sampling failed: {0}")]
    Gp(#[from] LinalgError),
    #[error("reference solver failed for function {index}: {source}")]
    Fdm { index: usize, source: FdmError },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Advection,
    DiffusionReaction,
    PoissonCoefficient,
    PoissonBc,
    PoissonSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Supervised,
    Unsupervised,
}

fn default_grid() -> usize {
    33
}
fn default_refine() -> usize {
    4
}
fn default_speed() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub problem: Problem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Nodes per axis of the output grid.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Reference solutions are computed on `refine * (grid - 1) + 1` nodes.
    #[serde(default = "default_refine")]
    pub refine: usize,
    #[serde(default = "default_speed")]
    pub advection_speed: f64,
    /// `ε` of the residual term in unsupervised variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physics_weight: Option<f64>,
    /// Multiplies inputs and solutions (linear problems only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<f64>,
}

impl GenConfig {
    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(match self.problem {
            Problem::PoissonSource => Variant::Unsupervised,
            _ => Variant::Supervised,
        })
    }

    pub fn fine(&self) -> usize {
        self.refine * (self.grid - 1) + 1
    }

    pub fn physics_weight(&self) -> f64 {
        self.physics_weight.unwrap_or(match self.problem {
            Problem::Advection => 0.1,
            _ => 1e-4,
        })
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale.unwrap_or(match (self.problem, self.variant()) {
            (Problem::PoissonBc, Variant::Unsupervised) => 0.1,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.grid < 3 {
            return fail(format!("grid must have at least 3 nodes, got {}", self.grid));
        }
        if self.refine == 0 {
            return fail("refine must be positive".into());
        }
        if self.n_train == 0 {
            return fail("n_train must be positive".into());
        }
        match (self.problem, self.variant()) {
            (Problem::DiffusionReaction, Variant::Unsupervised) | (Problem::PoissonCoefficient, Variant::Unsupervised) => {
                return fail(format!(
                    "{:?} has no unsupervised variant: its residual operator is nonlinear or input dependent",
                    self.problem
                ));
            }
            (Problem::PoissonSource, Variant::Supervised) => {
                return fail("poisson_source is unsupervised only".into());
            }
            _ => {}
        }
        if self.problem == Problem::PoissonCoefficient && self.refine % 2 != 0 {
            return fail("poisson_coefficient needs an even refine factor to read cell centres".into());
        }
        if !(self.advection_speed > 0.0 && self.advection_speed.is_finite()) {
            return fail("advection_speed must be positive".into());
        }
        if !(self.physics_weight() > 0.0 && self.input_scale().is_finite()) {
            return fail("physics_weight must be positive and input_scale finite".into());
        }
        if self.input_scale() != 1.0 && self.problem == Problem::DiffusionReaction {
            return fail("input_scale applies to linear problems only".into());
        }
        Ok(())
    }

    pub fn kernel(&self) -> GpKernel {
        match self.problem {
            Problem::Advection => GpKernel::SqExp { l: 0.2, variance: 1.0 },
            Problem::DiffusionReaction => GpKernel::SqExp { l: 0.2, variance: 0.5 },
            Problem::PoissonCoefficient => GpKernel::SqExp2d {
                lx: 0.1,
                ly: 0.1,
                variance: 0.2,
            },
            Problem::PoissonBc => GpKernel::Periodic {
                l: 0.3,
                period: 4.0,
                variance: 1.0,
            },
            Problem::PoissonSource => GpKernel::SqExp2d {
                lx: 0.2,
                ly: 0.2,
                variance: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermInfo {
    pub name: String,
    pub weight: f64,
    pub op: TrunkOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    pub info: TermInfo,
    /// `Q × 2` trunk points.
    pub tau: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub targets: Vec<Matrix>,
    /// Solution on the output grid.
    pub reference: Matrix,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub config: GenConfig,
    pub kernel: GpKernel,
    pub gp_jitter: f64,
    pub fine_grid: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_image: Option<ImageShape>,
    pub input_len: usize,
    pub terms: Vec<TermInfo>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub terms: Vec<TermSpec>,
    /// Output grid, `grid² × 2`.
    pub eval_points: Matrix,
    pub train: Split,
    pub val: Split,
}

pub const DATASET_FORMAT: &str = "deeponet-dataset-v1";

impl Dataset {
    fn loss_terms(&self, split: &Split) -> Vec<LossTerm> {
        self.terms
            .iter()
            .zip(&split.targets)
            .map(|(t, f)| LossTerm {
                name: t.info.name.clone(),
                weight: t.info.weight,
                op: t.info.op.clone(),
                tau: t.tau.clone(),
                target: f.clone(),
            })
            .collect()
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            inputs: self.train.inputs.clone(),
            terms: self.loss_terms(&self.train),
        }
    }

    pub fn val_data(&self) -> TrainData {
        TrainData {
            inputs: self.val.inputs.clone(),
            terms: self.loss_terms(&self.val),
        }
    }

    pub fn validation(&self) -> Validation {
        self.split_validation(&self.val)
    }

    pub fn train_validation(&self) -> Validation {
        self.split_validation(&self.train)
    }

    fn split_validation(&self, split: &Split) -> Validation {
        Validation {
            inputs: split.inputs.clone(),
            points: self.eval_points.clone(),
            reference: split.reference.clone(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_value(&self.meta).map_err(ContainerError::from)?;
        let mut c = Container::new(meta);
        c.push("eval_points", self.eval_points.clone());
        for (k, t) in self.terms.iter().enumerate() {
            c.push(format!("term{k}.tau"), t.tau.clone());
        }
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            c.push(format!("{name}.inputs"), split.inputs.clone());
            for (k, f) in split.targets.iter().enumerate() {
                c.push(format!("{name}.target{k}"), f.clone());
            }
            c.push(format!("{name}.reference"), split.reference.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| DataError::Format(format!("not a dataset manifest: {e}")))?;
        if meta.format != DATASET_FORMAT {
            return Err(DataError::Format(format!("unsupported format {:?}", meta.format)));
        }
        let terms = meta
            .terms
            .iter()
            .enumerate()
            .map(|(k, info)| {
                Ok(TermSpec {
                    info: info.clone(),
                    tau: c.get(&format!("term{k}.tau"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let split = |name: &str| -> Result<Split> {
            Ok(Split {
                inputs: c.get(&format!("{name}.inputs"))?.clone(),
                targets: (0..terms.len())
                    .map(|k| c.get(&format!("{name}.target{k}")).cloned())
                    .collect::<std::result::Result<_, _>>()?,
                reference: c.get(&format!("{name}.reference"))?.clone(),
            })
        };
        let ds = Dataset {
            eval_points: c.get("eval_points")?.clone(),
            train: split("train")?,
            val: split("val")?,
            terms,
            meta,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let q = self.eval_points.rows();
        for (name, s) in [("train", &self.train), ("val", &self.val)] {
            let p = s.inputs.rows();
            if s.inputs.cols() != self.meta.input_len || s.reference.shape() != (p, q) {
                return Err(DataError::Format(format!("{name} split has inconsistent shapes")));
            }
            for (t, f) in self.terms.iter().zip(&s.targets) {
                if f.shape() != (p, t.tau.rows()) {
                    return Err(DataError::Format(format!("{name} target of term {} has the wrong shape", t.info.name)));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn summary(&self) -> String {
        let c = &self.meta.config;
        let mut s = format!(
            "problem {:?} ({:?}), seed {}, grid {} (reference grid {})\n  train: inputs {}x{}, val: inputs {}x{}\n",
            c.problem,
            c.variant(),
            c.seed,
            c.grid,
            self.meta.fine_grid,
            self.train.inputs.rows(),
            self.train.inputs.cols(),
            self.val.inputs.rows(),
            self.val.inputs.cols(),
        );
        for (t, f) in self.terms.iter().zip(&self.train.targets) {
            s.push_str(&format!(
                "  term {}: weight {:e}, {} points, train targets {}x{}\n",
                t.info.name,
                t.info.weight,
                t.tau.rows(),
                f.rows(),
                f.cols()
            ));
        }
        s
    }
}

fn coords(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// All grid nodes, `q = j * n + i`.
pub fn grid_points(n: usize) -> Matrix {
    let c = coords(n);
    Matrix::from_fn(n * n, 2, |q, d| if d == 0 { c[q % n] } else { c[q / n] })
}

/// Interior nodes `1 ≤ i, j ≤ n - 2`, `j` major.
pub fn interior_points(n: usize) -> Matrix {
    let c = coords(n);
    let m = n - 2;
    Matrix::from_fn(m * m, 2, |q, d| if d == 0 { c[q % m + 1] } else { c[q / m + 1] })
}

/// Grid indices `(i, j)` of the `4(n-1)` boundary nodes in arc-length order
/// `(t,0) → (1,t) → (1-t,1) → (0,1-t)`.
pub fn boundary_nodes(n: usize) -> Vec<(usize, usize)> {
    let e = n - 1;
    (0..4 * e)
        .map(|k| match k / e {
            0 => (k, 0),
            1 => (e, k - e),
            2 => (3 * e - k, e),
            _ => (0, 4 * e - k),
        })
        .collect()
}

pub fn boundary_points(n: usize) -> Matrix {
    let c = coords(n);
    let nodes = boundary_nodes(n);
    Matrix::from_fn(nodes.len(), 2, |k, d| if d == 0 { c[nodes[k].0] } else { c[nodes[k].1] })
}

/// Points of the advection data term in input order:
/// `(0, t)` for `t = 1 … 0`, then `(x, 0)` for `x = h … 1`.
pub fn advection_boundary_points(n: usize) -> Matrix {
    let c = coords(n);
    Matrix::from_fn(2 * n - 1, 2, |k, d| {
        let (x, t) = if k < n { (0.0, c[n - 1 - k]) } else { (c[k - n + 1], 0.0) };
        if d == 0 {
            x
        } else {
            t
        }
    })
}

fn field_row(f: &Matrix) -> Vec<f64> {
    f.data().to_vec()
}

struct Sample {
    input: Vec<f64>,
    targets: Vec<Vec<f64>>,
    reference: Vec<f64>,
}

enum Generator {
    Advection {
        n: usize,
        sampler: GpSampler,
        supervised: bool,
    },
    DiffusionReaction {
        n: usize,
        refine: usize,
        sampler: GpSampler,
        grid: DiffusionReactionGrid,
    },
    PoissonCoefficient {
        n: usize,
        refine: usize,
        sampler: GpSampler2d,
    },
    PoissonBc {
        n: usize,
        refine: usize,
        sampler: GpSampler,
        solver: PoissonSolver,
        supervised: bool,
        scale: f64,
    },
    PoissonSource {
        n: usize,
        refine: usize,
        sampler: GpSampler2d,
        solver: PoissonSolver,
    },
}

impl Generator {
    fn new(cfg: &GenConfig) -> Result<Self> {
        let n = cfg.grid;
        let nf = cfg.fine();
        let kernel = cfg.kernel();
        let supervised = cfg.variant() == Variant::Supervised;
        Ok(match cfg.problem {
            Problem::Advection => {
                let c = coords(n);
                let a = cfg.advection_speed;
                let pts: Vec<f64> = (0..n * n).map(|q| c[q % n] - a * c[q / n]).collect();
                Generator::Advection {
                    n,
                    sampler: GpSampler::new(&kernel, &pts)?,
                    supervised,
                }
            }
            Problem::DiffusionReaction => Generator::DiffusionReaction {
                n,
                refine: cfg.refine,
                sampler: GpSampler::new(&kernel, &coords(nf))?,
                grid: DiffusionReactionGrid {
                    nx: nf,
                    nt: nf,
                    diffusion: 0.01,
                    reaction: 1.0,
                },
            },
            Problem::PoissonCoefficient => Generator::PoissonCoefficient {
                n,
                refine: cfg.refine,
                sampler: GpSampler2d::new(&kernel, &coords(nf), &coords(nf))?,
            },
            Problem::PoissonBc => {
                let pts: Vec<f64> = (0..=4 * (nf - 1)).map(|m| m as f64 / (nf - 1) as f64).collect();
                Generator::PoissonBc {
                    n,
                    refine: cfg.refine,
                    sampler: GpSampler::new(&kernel, &pts)?,
                    solver: PoissonSolver::constant(nf).map_err(|source| DataError::Fdm { index: 0, source })?,
                    supervised,
                    scale: cfg.input_scale(),
                }
            }
            Problem::PoissonSource => Generator::PoissonSource {
                n,
                refine: cfg.refine,
                sampler: GpSampler2d::new(&kernel, &coords(nf), &coords(nf))?,
                solver: PoissonSolver::constant(nf).map_err(|source| DataError::Fdm { index: 0, source })?,
            },
        })
    }

    fn terms(&self, cfg: &GenConfig) -> Vec<TermSpec> {
        let n = cfg.grid;
        let data = |tau: Matrix| TermSpec {
            info: TermInfo {
                name: "data".into(),
                weight: 1.0,
                op: TrunkOperator::identity(2),
            },
            tau,
        };
        let physics = |op: TrunkOperator, tau: Matrix| TermSpec {
            info: TermInfo {
                name: "physics".into(),
                weight: cfg.physics_weight(),
                op,
            },
            tau,
        };
        match self {
            Generator::Advection { supervised: false, .. } => {
                let c = coords(n);
                let m = n - 1;
                let tau = Matrix::from_fn(m * m, 2, |q, d| if d == 0 { c[q % m + 1] } else { c[q / m + 1] });
                vec![
                    data(advection_boundary_points(n)),
                    physics(TrunkOperator::first_order(&[cfg.advection_speed, 1.0]), tau),
                ]
            }
            Generator::PoissonBc { supervised: false, .. } | Generator::PoissonSource { .. } => vec![
                data(boundary_points(n)),
                physics(TrunkOperator::neg_laplacian(2), interior_points(n)),
            ],
            _ => vec![data(grid_points(n))],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, index: usize) -> Result<Sample> {
        let fdm_err = |source| DataError::Fdm { index, source };
        Ok(match self {
            Generator::Advection { n, sampler, supervised } => {
                let n = *n;
                let u = sampler.sample(rng);
                let mut r: Vec<f64> = (0..n).rev().map(|j| u[j * n]).collect();
                r.extend(u[1..n].iter().copied());
                let targets = if *supervised {
                    vec![u.clone()]
                } else {
                    vec![r.clone(), vec![0.0; (n - 1) * (n - 1)]]
                };
                Sample {
                    input: r,
                    targets,
                    reference: u,
                }
            }
            Generator::DiffusionReaction { n, refine, sampler, grid } => {
                let f = sampler.sample(rng);
                let u = fdm::fdm_diffusion_reaction(&f, grid).map_err(fdm_err)?;
                let u = field_row(&fdm::restrict(&u, *refine));
                Sample {
                    input: (0..*n).map(|i| f[i * refine]).collect(),
                    targets: vec![u.clone()],
                    reference: u,
                }
            }
            Generator::PoissonCoefficient { n, refine, sampler } => {
                let kappa = sampler.sample(rng).map(f64::exp);
                let nf = kappa.rows();
                let r = *refine;
                let cells = n - 1;
                let image = Matrix::from_fn(cells, cells, |j, i| kappa.get(r * j + r / 2, r * i + r / 2));
                let f = Matrix::from_fn(nf, nf, |_, _| 1.0);
                let u = fdm::fdm_poisson_variable(&kappa, &f, &Matrix::zeros(nf, nf)).map_err(fdm_err)?;
                let u = field_row(&fdm::restrict(&u, r));
                Sample {
                    input: field_row(&image),
                    targets: vec![u.clone()],
                    reference: u,
                }
            }
            Generator::PoissonBc {
                n,
                refine,
                sampler,
                solver,
                supervised,
                scale,
            } => {
                let g = sampler.sample(rng);
                let nf = (n - 1) * refine + 1;
                let mut field = Matrix::zeros(nf, nf);
                for (m, (i, j)) in boundary_nodes(nf).into_iter().enumerate() {
                    field.set(j, i, g[m]);
                }
                let u = solver.solve(&Matrix::zeros(nf, nf), &field).map_err(fdm_err)?;
                let u: Vec<f64> = field_row(&fdm::restrict(&u, *refine)).iter().map(|v| v * scale).collect();
                let input: Vec<f64> = (0..=4 * (n - 1)).map(|k| g[k * refine] * scale).collect();
                let targets = if *supervised {
                    vec![u.clone()]
                } else {
                    vec![input[..4 * (n - 1)].to_vec(), vec![0.0; (n - 2) * (n - 2)]]
                };
                Sample {
                    input,
                    targets,
                    reference: u,
                }
            }
            Generator::PoissonSource {
                n,
                refine,
                sampler,
                solver,
            } => {
                let f = sampler.sample(rng);
                let nf = f.rows();
                let u = solver.solve(&f, &Matrix::zeros(nf, nf)).map_err(fdm_err)?;
                let coarse = fdm::restrict(&f, *refine);
                let m = n - 2;
                let interior: Vec<f64> = (0..m * m).map(|q| coarse.get(q / m + 1, q % m + 1)).collect();
                Sample {
                    input: field_row(&coarse),
                    targets: vec![vec![0.0; 4 * (n - 1)], interior],
                    reference: field_row(&fdm::restrict(&u, *refine)),
                }
            }
        })
    }

    fn input_image(&self) -> Option<ImageShape> {
        match self {
            Generator::PoissonCoefficient { n, .. } => Some(ImageShape {
                channels: 1,
                height: n - 1,
                width: n - 1,
            }),
            Generator::PoissonSource { n, .. } => Some(ImageShape {
                channels: 1,
                height: *n,
                width: *n,
            }),
            _ => None,
        }
    }
}

fn notes(cfg: &GenConfig) -> Vec<String> {
    let mut v = vec![format!(
        "rng: ChaCha8 seeded with {}, stream k for function k (validation starts at {})",
        cfg.seed, cfg.n_train
    )];
    match cfg.problem {
        Problem::Advection => {
            v.push("solution u(x,t) = f(x - a t) with f drawn on the distinct values of x - a t".into());
            if cfg.variant() == Variant::Unsupervised {
                v.push("physics points exclude the x = 0 and t = 0 lines".into());
            }
        }
        Problem::DiffusionReaction => v.push(format!(
            "backward Euler with Newton (tol {NEWTON_TOL:e}) on {f}x{f} space-time nodes, restricted",
            NEWTON_TOL = fdm::NEWTON_TOL,
            f = cfg.fine()
        )),
        Problem::PoissonCoefficient => {
            v.push("log-coefficient drawn on the fine nodes; image reads cell centres of the output grid".into())
        }
        Problem::PoissonBc => v.push("boundary function drawn at 4(fine-1)+1 arc-length nodes; input every refine-th".into()),
        Problem::PoissonSource => v.push("source drawn on the fine nodes; input is its restriction".into()),
    }
    if matches!(cfg.kernel(), GpKernel::SqExp2d { .. }) {
        v.push("2-D draws use separate Cholesky factors per axis, each with the jitter".into());
    }
    v.push("Poisson face coefficients are arithmetic means of the adjacent nodes".into());
    v
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let gen = Generator::new(cfg)?;
    let terms = gen.terms(cfg);
    let build = |start: usize, count: usize| -> Result<Split> {
        let mut inputs = Vec::new();
        let mut targets: Vec<Vec<f64>> = vec![Vec::new(); terms.len()];
        let mut reference = Vec::new();
        for k in start..start + count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let s = gen.sample(&mut rng, k)?;
            inputs.extend(s.input);
            for (acc, t) in targets.iter_mut().zip(s.targets) {
                acc.extend(t);
            }
            reference.extend(s.reference);
        }
        let mat = |data: Vec<f64>, rows: usize| -> Result<Matrix> {
            let cols = if rows == 0 { 0 } else { data.len() / rows };
            Matrix::new(rows, cols, data).map_err(DataError::from)
        };
        let fix = |m: Matrix, cols: usize| if m.rows() == 0 { Matrix::zeros(0, cols) } else { m };
        Ok(Split {
            inputs: mat(inputs, count)?,
            targets: targets
                .into_iter()
                .zip(&terms)
                .map(|(t, spec)| mat(t, count).map(|m| fix(m, spec.tau.rows())))
                .collect::<Result<_>>()?,
            reference: fix(mat(reference, count)?, cfg.grid * cfg.grid),
        })
    };
    let train = build(0, cfg.n_train)?;
    let mut val = build(cfg.n_train, cfg.n_val)?;
    if val.inputs.rows() == 0 {
        val.inputs = Matrix::zeros(0, train.inputs.cols());
    }
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        config: cfg.clone(),
        kernel: cfg.kernel(),
        gp_jitter: gp::GP_JITTER,
        fine_grid: cfg.fine(),
        input_image: gen.input_image(),
        input_len: train.inputs.cols(),
        terms: terms.iter().map(|t| t.info.clone()).collect(),
        notes: notes(cfg),
    };
    Ok(Dataset {
        meta,
        eval_points: grid_points(cfg.grid),
        terms,
        train,
        val,
    })
}
