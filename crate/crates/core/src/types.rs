//! Entities, system states and trajectories.
//!
//! Storage is 0-based throughout. Documentation and user-facing reports talk
//! about frames `1..=T`; [`frame_to_index`] and [`index_to_frame`] are the only
//! place where the two conventions meet.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a 1-based frame number into a storage index.
pub fn frame_to_index(frame: usize) -> Result<usize> {
    frame.checked_sub(1).ok_or(Error::Range {
        what: "frame",
        detail: "frames are numbered from 1".into(),
    })
}

/// Converts a storage index into a 1-based frame number.
pub fn index_to_frame(index: usize) -> usize {
    index + 1
}

/// A single entity at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub index: usize,
    pub coords: Vec<f32>,
    pub properties: Vec<f32>,
}

impl Entity {
    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Validation("entity needs at least one coordinate".into()));
        }
        if self.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!(
                "entity {} has non-finite coordinates",
                self.index
            )));
        }
        Ok(())
    }
}

/// The whole system at one frame: `N x D_x` positions and `N x D_m` properties.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub positions: Array2<f32>,
    pub properties: Array2<f32>,
    /// Storage index of the frame this state was taken from.
    pub frame: usize,
}

impl SystemState {
    pub fn new(positions: Array2<f32>, properties: Array2<f32>, frame: usize) -> Result<Self> {
        if positions.nrows() != properties.nrows() {
            return Err(Error::Validation(format!(
                "positions have {} entities but properties have {}",
                positions.nrows(),
                properties.nrows()
            )));
        }
        if positions.iter().chain(properties.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("state contains NaN or Inf".into()));
        }
        Ok(Self {
            positions,
            properties,
            frame,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.positions.nrows()
    }

    pub fn entity(&self, n: usize) -> Entity {
        Entity {
            index: n,
            coords: self.positions.row(n).to_vec(),
            properties: self.properties.row(n).to_vec(),
        }
    }
}

/// Provenance carried along with every trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrajectoryMeta {
    pub scenario: String,
    pub seed: u64,
}

/// `T x N x D_x` coordinates with time-invariant `N x D_m` properties.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Array3<f32>,
    pub properties: Array2<f32>,
    /// Physical time between stored frames.
    pub dt: f32,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    /// Builds a trajectory and runs [`validate_trajectory`] on it.
    pub fn new(
        positions: Array3<f32>,
        properties: Array2<f32>,
        dt: f32,
        meta: TrajectoryMeta,
    ) -> Result<Self> {
        validate_trajectory(Self {
            positions,
            properties,
            dt,
            meta,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.positions.dim().0
    }

    pub fn num_entities(&self) -> usize {
        self.positions.dim().1
    }

    pub fn spatial_dim(&self) -> usize {
        self.positions.dim().2
    }

    pub fn property_dim(&self) -> usize {
        self.properties.ncols()
    }

    pub fn frame(&self, index: usize) -> ArrayView2<'_, f32> {
        self.positions.index_axis(Axis(0), index)
    }

    pub fn state(&self, index: usize) -> SystemState {
        SystemState {
            positions: self.frame(index).to_owned(),
            properties: self.properties.clone(),
            frame: index,
        }
    }
}

/// A contiguous run of frames cut out of a trajectory. Unlike [`Trajectory`]
/// it may hold a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySlice {
    pub positions: Array3<f32>,
    pub properties: Array2<f32>,
    pub dt: f32,
    /// Storage index of the first frame within the parent trajectory.
    pub start: usize,
}

impl TrajectorySlice {
    pub fn num_frames(&self) -> usize {
        self.positions.dim().0
    }

    pub fn num_entities(&self) -> usize {
        self.positions.dim().1
    }

    pub fn last_frame(&self) -> ArrayView2<'_, f32> {
        self.positions.index_axis(Axis(0), self.num_frames() - 1)
    }

    pub fn from_state(state: &SystemState, dt: f32) -> Self {
        Self {
            positions: state.positions.clone().insert_axis(Axis(0)),
            properties: state.properties.clone(),
            dt,
            start: state.frame,
        }
    }
}

/// Fixed-shape latent states `T x L x D_z`, independent of the entity count.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub latents: Array3<f32>,
}

impl LatentTrajectory {
    pub fn num_frames(&self) -> usize {
        self.latents.dim().0
    }

    pub fn num_latents(&self) -> usize {
        self.latents.dim().1
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.dim().2
    }
}

/// Observed length `T_o`; the horizon `T_f = T - T_o` follows from the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub observed: usize,
}

impl SplitSpec {
    pub fn new(observed: usize) -> Self {
        Self { observed }
    }

    pub fn horizon(&self, total: usize) -> Result<usize> {
        self.check(total)?;
        Ok(total - self.observed)
    }

    pub fn check(&self, total: usize) -> Result<()> {
        if self.observed == 0 || self.observed >= total {
            return Err(Error::Range {
                what: "observed frame count",
                detail: format!("need 1 <= T_o < T, got T_o={} with T={total}", self.observed),
            });
        }
        Ok(())
    }
}

/// Checks every invariant of a trajectory and hands it back unchanged.
pub fn validate_trajectory(traj: Trajectory) -> Result<Trajectory> {
    let (t, n, dx) = traj.positions.dim();
    if t < 2 {
        return Err(Error::Validation(format!("trajectory needs T >= 2 frames, got {t}")));
    }
    if n == 0 {
        return Err(Error::Validation("trajectory has no entities".into()));
    }
    if dx == 0 {
        return Err(Error::Validation("spatial dimension D_x must be >= 1".into()));
    }
    if traj.properties.nrows() != n {
        return Err(Error::Validation(format!(
            "properties describe {} entities but positions have N={n}",
            traj.properties.nrows()
        )));
    }
    if let Some(pos) = traj.positions.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "positions contain a non-finite value at flat index {pos}"
        )));
    }
    if traj.properties.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("properties contain NaN or Inf".into()));
    }
    if !(traj.dt.is_finite() && traj.dt > 0.0) {
        return Err(Error::Validation(format!("time step must be positive, got {}", traj.dt)));
    }
    Ok(traj)
}

/// Cuts a trajectory into its observed prefix and the future to be predicted.
pub fn split_observed(
    traj: &Trajectory,
    spec: SplitSpec,
) -> Result<(TrajectorySlice, TrajectorySlice)> {
    spec.check(traj.num_frames())?;
    let cut = spec.observed;
    let observed = TrajectorySlice {
        positions: traj.positions.slice(s![..cut, .., ..]).to_owned(),
        properties: traj.properties.clone(),
        dt: traj.dt,
        start: 0,
    };
    let future = TrajectorySlice {
        positions: traj.positions.slice(s![cut.., .., ..]).to_owned(),
        properties: traj.properties.clone(),
        dt: traj.dt,
        start: cut,
    };
    Ok((observed, future))
}

/// Joins consecutive slices back into one frame stack.
pub fn concat_frames(parts: &[&TrajectorySlice]) -> Result<Array3<f32>> {
    let views: Vec<_> = parts.iter().map(|p| p.positions.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// A rotation followed by a translation, shared by every frame of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidMotion {
    /// Row-major `D x D` orthogonal matrix with determinant +1.
    pub rotation: Array2<f64>,
    pub translation: Vec<f64>,
}

impl RigidMotion {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: Array2::eye(dim),
            translation: vec![0.0; dim],
        }
    }

    /// Draws a rotation uniformly (Haar measure) and a translation uniformly
    /// from `[-half_width, half_width]^D`.
    pub fn sample<R: Rng + ?Sized>(dim: usize, half_width: f64, rng: &mut R) -> Result<Self> {
        if !matches!(dim, 2 | 3) {
            return Err(Error::UnsupportedDimension(dim));
        }
        let rotation = sample_rotation(dim, rng);
        let translation = (0..dim)
            .map(|_| {
                if half_width > 0.0 {
                    rng.random_range(-half_width..=half_width)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    /// Applies `x -> R x + t` to every row of `points` (each row one entity).
    pub fn apply_points(&self, points: &mut Array2<f32>) {
        let d = self.dim();
        let mut buf = vec![0.0f64; d];
        for mut row in points.rows_mut() {
            for (i, out) in buf.iter_mut().enumerate() {
                let mut acc = self.translation[i];
                for j in 0..d {
                    acc += self.rotation[[i, j]] * row[j] as f64;
                }
                *out = acc;
            }
            for (dst, src) in row.iter_mut().zip(&buf) {
                *dst = *src as f32;
            }
        }
    }

    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory> {
        if traj.spatial_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "rigid motion is {}-dimensional but trajectory has D_x={}",
                self.dim(),
                traj.spatial_dim()
            )));
        }
        let mut out = traj.clone();
        for mut frame in out.positions.outer_iter_mut() {
            let mut owned = frame.to_owned();
            self.apply_points(&mut owned);
            frame.assign(&owned);
        }
        Ok(out)
    }
}

/// QR of a Gaussian matrix with the sign correction that makes `Q` Haar
/// distributed, then a reflection fix so that `det Q = +1`.
fn sample_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    // Modified Gram-Schmidt yields R with positive diagonal, i.e. the sign-corrected QR.
    for i in 0..dim {
        for j in 0..i {
            let proj: f64 = (0..dim).map(|k| cols[i][k] * cols[j][k]).sum();
            for k in 0..dim {
                cols[i][k] -= proj * cols[j][k];
            }
        }
        let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[i].iter_mut() {
            *v /= norm;
        }
    }
    let mut q = Array2::<f64>::zeros((dim, dim));
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            q[[i, j]] = *v;
        }
    }
    if determinant(&q) < 0.0 {
        q.column_mut(0).mapv_inplace(|v| -v);
    }
    q
}

fn determinant(m: &Array2<f64>) -> f64 {
    match m.nrows() {
        2 => m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]],
        3 => {
            m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]])
                - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
                + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
        }
        _ => unreachable!("rotations are sampled for 2 or 3 dimensions only"),
    }
}

/// Applies one random rigid motion to every frame of the trajectory.
pub fn augment_rigid<R: Rng + ?Sized>(
    traj: &Trajectory,
    translation_half_width: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let motion = RigidMotion::sample(traj.spatial_dim(), translation_half_width, rng)?;
    motion.apply(traj)
}

/// Euclidean distance matrix of the rows of `points`.
pub fn pairwise_distances(points: ArrayView2<'_, f32>) -> Array2<f64> {
    let n = points.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_traj(t: usize, n: usize, d: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array::from_shape_fn((t, n, d), |_| rng.random_range(-3.0f32..3.0));
        let properties = Array::from_shape_fn((n, 1), |_| rng.random_range(0.5f32..1.5));
        Trajectory::new(positions, properties, 0.1, TrajectoryMeta::default()).unwrap()
    }

    #[test]
    fn frame_conversion() {
        assert_eq!(frame_to_index(1).unwrap(), 0);
        assert_eq!(index_to_frame(frame_to_index(30).unwrap()), 30);
        assert!(frame_to_index(0).is_err());
    }

    #[test]
    fn split_shapes() {
        for (t, to) in [(30, 10), (2, 1), (20, 8)] {
            let traj = random_traj(t, 3, 3, 1);
            let (obs, fut) = split_observed(&traj, SplitSpec::new(to)).unwrap();
            assert_eq!(obs.num_frames(), to);
            assert_eq!(fut.num_frames(), t - to);
            assert_eq!(fut.start, to);
        }
    }

    #[test]
    fn split_rejects_out_of_range() {
        let traj = random_traj(5, 2, 3, 2);
        assert!(split_observed(&traj, SplitSpec::new(0)).is_err());
        assert!(split_observed(&traj, SplitSpec::new(5)).is_err());
    }

    #[test]
    fn validation_catches_each_invariant() {
        let good = random_traj(30, 5, 3, 3);
        assert_eq!(validate_trajectory(good.clone()).unwrap(), good);

        let mut nan = good.clone();
        nan.positions[[4, 2, 1]] = f32::NAN;
        let err = validate_trajectory(nan).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");

        let mut wrong_m = good.clone();
        wrong_m.properties = Array2::zeros((4, 1));
        let err = validate_trajectory(wrong_m).unwrap_err().to_string();
        assert!(err.contains("N=5"), "{err}");

        let mut short = good;
        short.positions = short.positions.slice(s![..1, .., ..]).to_owned();
        assert!(validate_trajectory(short).is_err());
    }

    #[test]
    fn identity_motion_is_noop() {
        let traj = random_traj(6, 4, 3, 4);
        let out = RigidMotion::identity(3).apply(&traj).unwrap();
        assert_eq!(out, traj);
    }

    #[test]
    fn sampled_rotation_is_proper_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2, 3] {
            for _ in 0..50 {
                let m = RigidMotion::sample(dim, 1.0, &mut rng).unwrap();
                let rtr = m.rotation.t().dot(&m.rotation);
                for i in 0..dim {
                    for j in 0..dim {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((rtr[[i, j]] - expect).abs() < 1e-12);
                    }
                }
                assert!((determinant(&m.rotation) - 1.0).abs() < 1e-12);
                assert!(m.translation.iter().all(|t| t.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let traj = random_traj(5, 4, 3, 6);
        let a = augment_rigid(&traj, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment_rigid(&traj, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, traj);
    }

    #[test]
    fn augmentation_rejects_other_dimensions() {
        let traj = random_traj(3, 2, 4, 7);
        let err = augment_rigid(&traj, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDimension(4)));
    }

    #[test]
    fn system_state_rejects_mismatch() {
        let err = SystemState::new(Array2::zeros((3, 2)), Array2::zeros((2, 1)), 0);
        assert!(err.is_err());
        let ok = SystemState::new(Array2::ones((3, 2)), Array2::zeros((3, 1)), 0).unwrap();
        assert_eq!(ok.entity(2).coords, vec![1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(t in 2usize..12, n in 1usize..6, d in 1usize..4, seed in 0u64..1000) {
            let traj = random_traj(t, n, d, seed);
            let to = 1 + (seed as usize % (t - 1));
            let (obs, fut) = split_observed(&traj, SplitSpec::new(to)).unwrap();
            prop_assert_eq!(concat_frames(&[&obs, &fut]).unwrap(), traj.positions);
        }

        #[test]
        fn augmentation_preserves_distances(n in 2usize..8, d in 2usize..4, seed in 0u64..1000) {
            let traj = random_traj(4, n, d, seed);
            let out = augment_rigid(&traj, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
            for f in 0..traj.num_frames() {
                let before = pairwise_distances(traj.frame(f));
                let after = pairwise_distances(out.frame(f));
                for (a, b) in before.iter().zip(after.iter()) {
                    prop_assert!((a - b).abs() <= 1e-5 * a.max(1.0));
                }
            }
        }

        #[test]
        fn corrupting_one_invariant_is_rejected(t in 2usize..8, n in 1usize..6, which in 0usize..4, seed in 0u64..500) {
            let mut traj = random_traj(t, n, 3, seed);
            match which {
                0 => traj.positions[[t - 1, n - 1, 0]] = f32::INFINITY,
                1 => traj.properties = Array2::zeros((n + 1, 1)),
                2 => traj.positions = traj.positions.slice(s![..1, .., ..]).to_owned(),
                _ => traj.properties[[0, 0]] = f32::NAN,
            }
            prop_assert!(validate_trajectory(traj).is_err());
        }
    }
}
