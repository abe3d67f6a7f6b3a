//! 2D heat equation with Dirichlet boundaries, implicit Euler in time and the
//! 5-point Laplacian in space. Each step solves the SPD system
//! `(I - dt*alpha*L) u_next = u` with conjugate gradient.
//!
//! Fields are row-major with `x` fastest: node `(i, j)` lives at `j * nx + i`.
//! The `i = 0` / `i = nx-1` columns hold `t_x1` / `t_x2`, the `j = 0` /
//! `j = ny-1` rows hold `t_y1` / `t_y2`. Corner nodes take the x-side value;
//! they are not coupled to any interior node.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Sample, SimParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub alpha: f64,
    pub dt: f64,
}

impl Grid {
    /// Unit-square domain with `n x n` points.
    pub fn unit_square(n: usize, dt: f64, alpha: f64) -> Self {
        let h = 1.0 / (n as f64 - 1.0);
        Grid {
            nx: n,
            ny: n,
            dx: h,
            dy: h,
            alpha,
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.nx < 3 || self.ny < 3 {
            return Err(SolverError::InvalidGrid(format!(
                "{}x{} is below 3x3",
                self.nx, self.ny
            )));
        }
        for (name, v) in [
            ("dx", self.dx),
            ("dy", self.dy),
            ("dt", self.dt),
            ("alpha", self.alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SolverError::InvalidGrid(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        Ok(())
    }

    fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub values: Vec<f64>,
    pub t: u32,
}

impl Field {
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("field has {got} values, grid expects {expected}")]
    FieldShape { expected: usize, got: usize },
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

#[derive(Debug, Error)]
pub enum SimulationError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("sink rejected step {t}: {source}")]
    Sink {
        t: u32,
        #[source]
        source: E,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    pub fn for_grid(grid: &Grid) -> Self {
        SolverOptions {
            tol: 1e-9,
            max_iter: 10 * grid.len(),
        }
    }
}

pub fn init_field(params: &SimParams, grid: &Grid) -> Field {
    Field {
        values: vec![params.t_ic; grid.len()],
        t: 0,
    }
}

/// Value of boundary node `(i, j)`.
fn boundary_value(params: &SimParams, grid: &Grid, i: usize, j: usize) -> f64 {
    if i == 0 {
        params.t_x1
    } else if i == grid.nx - 1 {
        params.t_x2
    } else if j == 0 {
        params.t_y1
    } else {
        params.t_y2
    }
}

/// Applies `x - dt*alpha*L x` at interior node `(i, j)` of a full field.
/// Written in difference form so a constant field maps exactly onto itself.
#[inline]
fn apply_at(u: &[f64], grid: &Grid, cx: f64, cy: f64, i: usize, j: usize) -> f64 {
    let k = j * grid.nx + i;
    let c = u[k];
    let lap_x = (u[k + 1] - c) - (c - u[k - 1]);
    let lap_y = (u[k + grid.nx] - c) - (c - u[k - grid.nx]);
    c - (cx * lap_x + cy * lap_y)
}

/// One implicit Euler step. Boundary nodes of the result hold the Dirichlet values.
pub fn step(
    field: &Field,
    params: &SimParams,
    grid: &Grid,
    opts: SolverOptions,
) -> Result<Field, SolverError> {
    grid.validate()?;
    if field.values.len() != grid.len() {
        return Err(SolverError::FieldShape {
            expected: grid.len(),
            got: field.values.len(),
        });
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let cx = grid.dt * grid.alpha / (grid.dx * grid.dx);
    let cy = grid.dt * grid.alpha / (grid.dy * grid.dy);

    // Initial guess: previous interior values with the new boundary imposed.
    let mut x = field.values.clone();
    for j in 0..ny {
        for i in 0..nx {
            if grid.is_boundary(i, j) {
                x[j * nx + i] = boundary_value(params, grid, i, j);
            }
        }
    }

    // Residual r = u_prev - A x over interior nodes (zero on the boundary),
    // and the norm of the full right-hand side for the relative criterion.
    let mut r = vec![0.0; grid.len()];
    let mut rhs_sq = 0.0;
    let mut r_sq = 0.0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = j * nx + i;
            let mut b = field.values[k];
            if i == 1 {
                b += cx * x[k - 1];
            }
            if i == nx - 2 {
                b += cx * x[k + 1];
            }
            if j == 1 {
                b += cy * x[k - nx];
            }
            if j == ny - 2 {
                b += cy * x[k + nx];
            }
            rhs_sq += b * b;
            let rk = field.values[k] - apply_at(&x, grid, cx, cy, i, j);
            r[k] = rk;
            r_sq += rk * rk;
        }
    }
    let rhs_norm = rhs_sq.sqrt().max(f64::MIN_POSITIVE);
    let target = opts.tol * rhs_norm;

    if r_sq.sqrt() > target {
        // CG on the homogeneous operator for the correction, boundary held at zero.
        let mut p = r.clone();
        let mut ap = vec![0.0; grid.len()];
        let mut converged = false;
        for _ in 0..opts.max_iter {
            let mut p_ap = 0.0;
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let k = j * nx + i;
                    let v = apply_at(&p, grid, cx, cy, i, j);
                    ap[k] = v;
                    p_ap += p[k] * v;
                }
            }
            let step_len = r_sq / p_ap;
            let mut r_sq_next = 0.0;
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let k = j * nx + i;
                    x[k] += step_len * p[k];
                    r[k] -= step_len * ap[k];
                    r_sq_next += r[k] * r[k];
                }
            }
            if r_sq_next.sqrt() <= target {
                converged = true;
                r_sq = r_sq_next;
                break;
            }
            let beta = r_sq_next / r_sq;
            r_sq = r_sq_next;
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let k = j * nx + i;
                    p[k] = r[k] + beta * p[k];
                }
            }
        }
        if !converged {
            return Err(SolverError::NonConvergence {
                iterations: opts.max_iter,
                residual: r_sq.sqrt() / rhs_norm,
            });
        }
    }
    Ok(Field {
        values: x,
        t: field.t + 1,
    })
}

/// Identity of the emitting simulation, copied into each [`Sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationTag {
    pub client_id: u32,
    pub sim_index: u32,
}

/// Stateful stepper; lets clients resume from a saved field.
pub struct Simulation {
    params: SimParams,
    grid: Grid,
    opts: SolverOptions,
    field: Field,
}

impl Simulation {
    pub fn new(params: SimParams, grid: Grid, opts: SolverOptions) -> Result<Self, SolverError> {
        grid.validate()?;
        let field = init_field(&params, &grid);
        Ok(Simulation {
            params,
            grid,
            opts,
            field,
        })
    }

    pub fn resume(
        params: SimParams,
        grid: Grid,
        opts: SolverOptions,
        field: Field,
    ) -> Result<Self, SolverError> {
        grid.validate()?;
        if field.values.len() != grid.len() {
            return Err(SolverError::FieldShape {
                expected: grid.len(),
                got: field.values.len(),
            });
        }
        Ok(Simulation {
            params,
            grid,
            opts,
            field,
        })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn advance(&mut self) -> Result<(), SolverError> {
        self.field = step(&self.field, &self.params, &self.grid, self.opts)?;
        Ok(())
    }

    pub fn sample(&self, tag: SimulationTag) -> Sample {
        Sample {
            params: self.params,
            t: self.field.t,
            field: Arc::from(self.field.to_f32()),
            client_id: tag.client_id,
            sim_index: tag.sim_index,
        }
    }
}

/// Runs `steps` time steps, emitting t = 0 (the initial condition) through
/// `steps - 1` to `sink` in order.
pub fn run_simulation<E, F>(
    params: &SimParams,
    grid: &Grid,
    steps: usize,
    opts: SolverOptions,
    tag: SimulationTag,
    mut sink: F,
) -> Result<usize, SimulationError<E>>
where
    E: std::error::Error + 'static,
    F: FnMut(Sample) -> Result<(), E>,
{
    if steps == 0 {
        return Ok(0);
    }
    let mut sim = Simulation::new(*params, *grid, opts)?;
    for t in 0..steps {
        if t > 0 {
            sim.advance()?;
        }
        sink(sim.sample(tag)).map_err(|source| SimulationError::Sink {
            t: t as u32,
            source,
        })?;
    }
    Ok(steps)
}

/// Header of an offline simulation file: three little-endian u32 values
/// `{nx, ny, steps}` followed by `steps * nx * ny` little-endian f32 values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfflineHeader {
    pub nx: u32,
    pub ny: u32,
    pub steps: u32,
}

pub const OFFLINE_HEADER_BYTES: usize = 12;

pub struct OfflineWriter {
    out: BufWriter<File>,
    header: OfflineHeader,
    written: u32,
}

impl OfflineWriter {
    pub fn create(path: &Path, header: OfflineHeader) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in [header.nx, header.ny, header.steps] {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(OfflineWriter {
            out,
            header,
            written: 0,
        })
    }

    pub fn write_step(&mut self, values: &[f32]) -> io::Result<()> {
        let expected = (self.header.nx * self.header.ny) as usize;
        if values.len() != expected || self.written >= self.header.steps {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!(
                    "step {} with {} values does not fit header {:?}",
                    self.written,
                    values.len(),
                    self.header
                ),
            ));
        }
        for v in values {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        if self.written != self.header.steps {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("wrote {} of {} steps", self.written, self.header.steps),
            ));
        }
        self.out.flush()
    }
}

/// Reads a whole offline file; returns the header and one vector per step.
pub fn read_offline_file(path: &Path) -> io::Result<(OfflineHeader, Vec<Vec<f32>>)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut word = [0u8; 4];
    let mut header = [0u32; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word);
    }
    let header = OfflineHeader {
        nx: header[0],
        ny: header[1],
        steps: header[2],
    };
    let per_step = (header.nx as usize) * (header.ny as usize);
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != per_step * header.steps as usize * 4 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!(
                "{}: payload has {} bytes, header {:?} implies {}",
                path.display(),
                bytes.len(),
                header,
                per_step * header.steps as usize * 4
            ),
        ));
    }
    let steps = bytes
        .chunks_exact(per_step * 4)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    Ok((header, steps))
}
