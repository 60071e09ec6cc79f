//! Leapfrog (kick-drift-kick) integration of pairwise-interacting particles.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Trajectory, TrajectoryMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Charged,
    Spring,
    Gravity,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Charged => "charged",
            Scenario::Spring => "spring",
            Scenario::Gravity => "gravity",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charged" => Ok(Scenario::Charged),
            "spring" => Ok(Scenario::Spring),
            "gravity" => Ok(Scenario::Gravity),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected charged, spring or gravity)"
            ))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Physical setup of one scenario. Every field ends up in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub num_entities: usize,
    pub dim: usize,
    /// Internal integrator step.
    pub dt: f64,
    /// Integrator steps between stored frames.
    pub stride: usize,
    /// Stored frames per trajectory, including the initial one.
    pub frames: usize,
    /// Plummer softening length for charged and gravity interactions.
    pub softening: f64,
    pub spring_constant: f64,
    pub connection_probability: f64,
    /// Reflective walls at `+-box_half_width` (charged only).
    pub box_half_width: f64,
    pub coupling: f64,
    pub mass_range: [f64; 2],
    pub position_std: f64,
    /// Each initial velocity is a random direction scaled to this speed.
    pub speed: f64,
}

impl ScenarioConfig {
    pub fn default_for(scenario: Scenario) -> Self {
        let base = Self {
            scenario,
            num_entities: 5,
            dim: 3,
            dt: 0.001,
            stride: 100,
            frames: 30,
            softening: 0.1,
            spring_constant: 1.0,
            connection_probability: 0.5,
            box_half_width: 5.0,
            coupling: 1.0,
            mass_range: [1.0, 1.0],
            position_std: 0.5,
            speed: 0.5,
        };
        match scenario {
            Scenario::Spring => Self {
                mass_range: [0.5, 1.5],
                ..base
            },
            Scenario::Charged => base,
            Scenario::Gravity => Self {
                num_entities: 10,
                mass_range: [0.5, 1.5],
                position_std: 1.0,
                speed: 0.3,
                stride: 50,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_entities < 2 {
            return fail(format!("need at least 2 particles, got {}", self.num_entities));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("integrator step must be positive, got {}", self.dt));
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        if self.frames < 2 {
            return fail(format!("need at least 2 stored frames, got {}", self.frames));
        }
        if self.dim == 0 {
            return fail("spatial dimension must be >= 1".into());
        }
        if self.softening < 0.0 {
            return fail("softening must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.connection_probability) {
            return fail("connection probability must lie in [0, 1]".into());
        }
        if !(self.mass_range[0] > 0.0 && self.mass_range[0] <= self.mass_range[1]) {
            return fail(format!("invalid mass range {:?}", self.mass_range));
        }
        if self.scenario == Scenario::Charged && self.box_half_width <= 0.0 {
            return fail("box half-width must be positive".into());
        }
        Ok(())
    }

    /// Physical time between stored frames.
    pub fn frame_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }
}

/// Starting point of a simulation, in full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub positions: Array2<f64>,
    pub velocities: Array2<f64>,
    pub masses: Vec<f64>,
    /// Charges for the charged scenario, otherwise unused.
    pub charges: Vec<f64>,
    /// Symmetric spring adjacency for the spring scenario, otherwise unused.
    pub springs: Array2<bool>,
}

impl InitialConditions {
    pub fn sample<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Self {
        let (n, d) = (cfg.num_entities, cfg.dim);
        let positions = Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(rng);
            cfg.position_std * z
        });
        let mut velocities = Array2::<f64>::zeros((n, d));
        for mut row in velocities.rows_mut() {
            loop {
                row.mapv_inplace(|_| -> f64 { StandardNormal.sample(rng) });
                let norm = row.dot(&row).sqrt();
                if norm > 1e-9 {
                    row.mapv_inplace(|v| v * cfg.speed / norm);
                    break;
                }
            }
        }
        let masses = (0..n)
            .map(|_| {
                if cfg.mass_range[0] == cfg.mass_range[1] {
                    cfg.mass_range[0]
                } else {
                    rng.random_range(cfg.mass_range[0]..cfg.mass_range[1])
                }
            })
            .collect();
        let charges = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mut springs = Array2::from_elem((n, n), false);
        for i in 0..n {
            for j in (i + 1)..n {
                let on = rng.random_bool(cfg.connection_probability);
                springs[[i, j]] = on;
                springs[[j, i]] = on;
            }
        }
        Self {
            positions,
            velocities,
            masses,
            charges,
            springs,
        }
    }
}

/// Full-precision conservation diagnostics at every stored frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub momentum: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// `sum_i m_i |v_i|` at the start; the scale for relative momentum drift.
    pub momentum_scale: f64,
}

impl Diagnostics {
    /// `max_t |P(t) - P(0)| / sum_i m_i |v_i(0)|`.
    pub fn momentum_drift(&self) -> f64 {
        let p0 = &self.momentum[0];
        self.momentum
            .iter()
            .map(|p| {
                p.iter()
                    .zip(p0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
            / self.momentum_scale.max(f64::MIN_POSITIVE)
    }

    /// `(max E - min E) / |E(0)|`.
    pub fn energy_oscillation(&self) -> f64 {
        let max = self.energy.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.energy.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / self.energy[0].abs().max(f64::MIN_POSITIVE)
    }
}

/// A simulated trajectory in full precision, before conversion to storage.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// `frames x N x D`.
    pub positions: Array3<f64>,
    pub initial: InitialConditions,
    pub diagnostics: Diagnostics,
}

impl Simulation {
    pub fn into_trajectory(self, cfg: &ScenarioConfig, seed: u64) -> Result<Trajectory> {
        let n = cfg.num_entities;
        let props = match cfg.scenario {
            Scenario::Charged => self.initial.charges.clone(),
            Scenario::Spring | Scenario::Gravity => self.initial.masses.clone(),
        };
        let properties = Array2::from_shape_fn((n, 1), |(i, _)| props[i] as f32);
        Trajectory::new(
            self.positions.mapv(|v| v as f32),
            properties,
            cfg.frame_dt() as f32,
            TrajectoryMeta {
                scenario: cfg.scenario.name().into(),
                seed,
            },
        )
    }
}

fn accelerations(cfg: &ScenarioConfig, ic: &InitialConditions, x: &Array2<f64>, acc: &mut Array2<f64>) {
    let (n, d) = x.dim();
    acc.fill(0.0);
    let eps2 = cfg.softening * cfg.softening;
    let mut diff = vec![0.0f64; d];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            for k in 0..d {
                diff[k] = x[[i, k]] - x[[j, k]];
                r2 += diff[k] * diff[k];
            }
            // Force on i along (x_i - x_j); j receives the exact negative.
            let coef = match cfg.scenario {
                Scenario::Spring => {
                    if !ic.springs[[i, j]] {
                        continue;
                    }
                    -cfg.spring_constant
                }
                Scenario::Charged => {
                    cfg.coupling * ic.charges[i] * ic.charges[j] / (r2 + eps2).powf(1.5)
                }
                Scenario::Gravity => {
                    -cfg.coupling * ic.masses[i] * ic.masses[j] / (r2 + eps2).powf(1.5)
                }
            };
            for k in 0..d {
                let f = coef * diff[k];
                acc[[i, k]] += f / ic.masses[i];
                acc[[j, k]] -= f / ic.masses[j];
            }
        }
    }
}

fn energy(cfg: &ScenarioConfig, ic: &InitialConditions, x: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let kinetic: f64 = (0..n)
        .map(|i| 0.5 * ic.masses[i] * (0..d).map(|k| v[[i, k]].powi(2)).sum::<f64>())
        .sum();
    let eps2 = cfg.softening * cfg.softening;
    let mut potential = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r2: f64 = (0..d).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum();
            potential += match cfg.scenario {
                Scenario::Spring if ic.springs[[i, j]] => 0.5 * cfg.spring_constant * r2,
                Scenario::Spring => 0.0,
                Scenario::Charged => cfg.coupling * ic.charges[i] * ic.charges[j] / (r2 + eps2).sqrt(),
                Scenario::Gravity => -cfg.coupling * ic.masses[i] * ic.masses[j] / (r2 + eps2).sqrt(),
            };
        }
    }
    kinetic + potential
}

fn momentum(ic: &InitialConditions, v: &Array2<f64>) -> Vec<f64> {
    let (n, d) = v.dim();
    (0..d)
        .map(|k| (0..n).map(|i| ic.masses[i] * v[[i, k]]).sum())
        .collect()
}

fn reflect(x: &mut Array2<f64>, v: &mut Array2<f64>, half_width: f64) {
    for (xi, vi) in x.iter_mut().zip(v.iter_mut()) {
        // A particle can overshoot by at most one step, so one fold suffices
        // unless it is moving absurdly fast; loop to be safe.
        while xi.abs() > half_width {
            *xi = xi.signum() * 2.0 * half_width - *xi;
            *vi = -*vi;
        }
    }
}

/// Integrates from explicit initial conditions.
pub fn simulate_from(cfg: &ScenarioConfig, initial: InitialConditions) -> Result<Simulation> {
    cfg.validate()?;
    let (n, d) = initial.positions.dim();
    if n != cfg.num_entities || d != cfg.dim || initial.velocities.dim() != (n, d) {
        return Err(Error::Shape(format!(
            "initial conditions are {n}x{d}, config expects {}x{}",
            cfg.num_entities, cfg.dim
        )));
    }
    let mut x = initial.positions.clone();
    let mut v = initial.velocities.clone();
    let mut acc = Array2::<f64>::zeros((n, d));
    accelerations(cfg, &initial, &x, &mut acc);
    let walls = cfg.scenario == Scenario::Charged;

    let mut positions = Array3::<f64>::zeros((cfg.frames, n, d));
    let mut diagnostics = Diagnostics {
        momentum: Vec::with_capacity(cfg.frames),
        energy: Vec::with_capacity(cfg.frames),
        momentum_scale: (0..n)
            .map(|i| initial.masses[i] * v.row(i).dot(&v.row(i)).sqrt())
            .sum(),
    };
    let half = 0.5 * cfg.dt;
    for frame in 0..cfg.frames {
        if frame > 0 {
            for _ in 0..cfg.stride {
                v.scaled_add(half, &acc);
                x.scaled_add(cfg.dt, &v);
                if walls {
                    reflect(&mut x, &mut v, cfg.box_half_width);
                }
                accelerations(cfg, &initial, &x, &mut acc);
                v.scaled_add(half, &acc);
            }
        }
        positions.index_axis_mut(ndarray::Axis(0), frame).assign(&x);
        diagnostics.momentum.push(momentum(&initial, &v));
        diagnostics.energy.push(energy(cfg, &initial, &x, &v));
    }
    Ok(Simulation {
        positions,
        initial,
        diagnostics,
    })
}

/// Samples initial conditions from `seed` and integrates them.
pub fn simulate(cfg: &ScenarioConfig, seed: u64) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = InitialConditions::sample(cfg, &mut rng);
    simulate_from(cfg, initial)
}

fn simulate_scenario(cfg: &ScenarioConfig, scenario: Scenario, seed: u64) -> Result<Trajectory> {
    if cfg.scenario != scenario {
        return Err(Error::Config(format!(
            "config describes `{}`, not `{}`",
            cfg.scenario, scenario
        )));
    }
    simulate(cfg, seed)?.into_trajectory(cfg, seed)
}

/// Particles with random masses joined by Hookean springs on a random graph.
pub fn simulate_spring(cfg: &ScenarioConfig, seed: u64) -> Result<Trajectory> {
    simulate_scenario(cfg, Scenario::Spring, seed)
}

/// +1/-1 charges with softened Coulomb interaction inside a reflective box.
pub fn simulate_charged(cfg: &ScenarioConfig, seed: u64) -> Result<Trajectory> {
    simulate_scenario(cfg, Scenario::Charged, seed)
}

/// Random masses under softened Newtonian gravity.
pub fn simulate_gravity(cfg: &ScenarioConfig, seed: u64) -> Result<Trajectory> {
    simulate_scenario(cfg, Scenario::Gravity, seed)
}
