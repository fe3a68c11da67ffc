//! Mass-spring point physics in two dimensions.
//!
//! Semi-implicit Euler integration of point masses under gravity and Hooke
//! springs. Each spring's force is computed once and applied to both
//! endpoints with opposite sign, so action/reaction pairs cancel exactly in
//! floating point. Learning targets are the next-step positions and
//! velocities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Edge, Graph};

use super::Sample;

pub const DEFAULT_MASS: f64 = 1.0;
pub const DEFAULT_STIFFNESS: f64 = 50.0;
pub const DEFAULT_REST_LENGTH: f64 = 1.0;
pub const DEFAULT_GRAVITY: [f64; 2] = [0.0, -10.0];
pub const DEFAULT_DT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
    pub stiffness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub masses: Vec<f64>,
    pub fixed: Vec<bool>,
    pub springs: Vec<Spring>,
    pub gravity: [f64; 2],
    pub dt: f64,
}

impl PhysicsState {
    pub fn num_masses(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.masses.len() != n || self.fixed.len() != n {
            return Err(format!(
                "per-mass arrays disagree: {} positions, {} velocities, {} masses, {} fixed flags",
                n,
                self.velocities.len(),
                self.masses.len(),
                self.fixed.len()
            ));
        }
        if let Some(i) = self.masses.iter().position(|&m| !(m > 0.0)) {
            return Err(format!("mass {i} is not positive"));
        }
        if !(self.dt > 0.0) {
            return Err("timestep must be positive".into());
        }
        for (k, s) in self.springs.iter().enumerate() {
            if s.a >= n || s.b >= n {
                return Err(format!("spring {k} references a missing mass"));
            }
            if s.a == s.b {
                return Err(format!("spring {k} connects a mass to itself"));
            }
        }
        Ok(())
    }

    /// True when any position or velocity has stopped being finite.
    pub fn has_non_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(self.velocities.iter())
            .any(|p| !p[0].is_finite() || !p[1].is_finite())
    }
}

/// Force a spring applies to its `a` endpoint; the `b` endpoint receives the
/// exact negation. Coincident endpoints exert no force (direction undefined).
pub fn spring_force(state: &PhysicsState, spring: &Spring) -> [f64; 2] {
    let pa = state.positions[spring.a];
    let pb = state.positions[spring.b];
    let d = [pb[0] - pa[0], pb[1] - pa[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist == 0.0 {
        return [0.0, 0.0];
    }
    let scale = spring.stiffness * (dist - spring.rest_length) / dist;
    [scale * d[0], scale * d[1]]
}

/// Both applications of each spring's force: `(on_a, on_b)` with
/// `on_b = -on_a` componentwise — the cancellation is exact by construction.
pub fn spring_force_pairs(state: &PhysicsState) -> Vec<([f64; 2], [f64; 2])> {
    state
        .springs
        .iter()
        .map(|s| {
            let f = spring_force(state, s);
            (f, [-f[0], -f[1]])
        })
        .collect()
}

/// Net force on every mass: gravity plus accumulated spring forces.
pub fn forces(state: &PhysicsState) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = state
        .masses
        .iter()
        .map(|&m| [m * state.gravity[0], m * state.gravity[1]])
        .collect();
    for spring in &state.springs {
        let f = spring_force(state, spring);
        out[spring.a][0] += f[0];
        out[spring.a][1] += f[1];
        out[spring.b][0] -= f[0];
        out[spring.b][1] -= f[1];
    }
    out
}

/// One semi-implicit Euler step: velocities update from forces first, then
/// positions update from the new velocities. Fixed masses stay frozen.
pub fn physics_step(state: &PhysicsState) -> PhysicsState {
    let fs = forces(state);
    let mut next = state.clone();
    for i in 0..state.num_masses() {
        if state.fixed[i] {
            continue;
        }
        let m = state.masses[i];
        let v = [
            state.velocities[i][0] + state.dt * fs[i][0] / m,
            state.velocities[i][1] + state.dt * fs[i][1] / m,
        ];
        next.velocities[i] = v;
        next.positions[i] = [
            state.positions[i][0] + state.dt * v[0],
            state.positions[i][1] + state.dt * v[1],
        ];
    }
    next
}

/// Kinetic plus spring potential plus gravitational potential energy.
pub fn total_energy(state: &PhysicsState) -> f64 {
    let mut e = 0.0;
    for i in 0..state.num_masses() {
        let v = state.velocities[i];
        e += 0.5 * state.masses[i] * (v[0] * v[0] + v[1] * v[1]);
        let p = state.positions[i];
        e -= state.masses[i] * (state.gravity[0] * p[0] + state.gravity[1] * p[1]);
    }
    for s in &state.springs {
        let pa = state.positions[s.a];
        let pb = state.positions[s.b];
        let d = [pb[0] - pa[0], pb[1] - pa[1]];
        let stretch = (d[0] * d[0] + d[1] * d[1]).sqrt() - s.rest_length;
        e += 0.5 * s.stiffness * stretch * stretch;
    }
    e
}

/// Total momentum, summed over all masses in index order.
pub fn total_momentum(state: &PhysicsState) -> [f64; 2] {
    let mut p = [0.0, 0.0];
    for i in 0..state.num_masses() {
        p[0] += state.masses[i] * state.velocities[i][0];
        p[1] += state.masses[i] * state.velocities[i][1];
    }
    p
}

/// Random fully connected system: `n` unit masses in [0, 2]^2 with
/// velocities in [-0.5, 0.5]^2, default spring constants and gravity.
pub fn gen_physics(n: usize, rng: &mut impl Rng) -> PhysicsState {
    let positions = (0..n)
        .map(|_| [2.0 * rng.gen::<f64>(), 2.0 * rng.gen::<f64>()])
        .collect();
    let velocities = (0..n)
        .map(|_| [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
        .collect();
    let mut springs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            springs.push(Spring {
                a,
                b,
                rest_length: DEFAULT_REST_LENGTH,
                stiffness: DEFAULT_STIFFNESS,
            });
        }
    }
    PhysicsState {
        positions,
        velocities,
        masses: vec![DEFAULT_MASS; n],
        fixed: vec![false; n],
        springs,
        gravity: DEFAULT_GRAVITY,
        dt: DEFAULT_DT,
    }
}

/// Graph encoding: node `[x, y, vx, vy, mass, fixed]`, one directed edge
/// per spring direction with `[rest_length, stiffness]`, global
/// `[gravity_x, gravity_y]`. The timestep travels alongside, not in the
/// features.
pub fn state_to_graph(state: &PhysicsState) -> Graph {
    let nodes = (0..state.num_masses())
        .map(|i| {
            vec![
                state.positions[i][0],
                state.positions[i][1],
                state.velocities[i][0],
                state.velocities[i][1],
                state.masses[i],
                if state.fixed[i] { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let mut edges = Vec::new();
    for s in &state.springs {
        let attr = vec![s.rest_length, s.stiffness];
        edges.push(Edge::new(s.a, s.b, attr.clone()));
        edges.push(Edge::new(s.b, s.a, attr));
    }
    Graph::new(state.gravity.to_vec(), nodes, edges)
}

/// Inverse of [`state_to_graph`]: springs recovered by deduplicating the
/// directed edge pairs on their unordered endpoints.
pub fn graph_to_state(g: &Graph, dt: f64) -> Result<PhysicsState, String> {
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    let mut masses = Vec::new();
    let mut fixed = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if n.len() != 6 {
            return Err(format!(
                "node {i} has {} features, expected 6 ([x, y, vx, vy, mass, fixed])",
                n.len()
            ));
        }
        positions.push([n[0], n[1]]);
        velocities.push([n[2], n[3]]);
        masses.push(n[4]);
        fixed.push(n[5] != 0.0);
    }
    if g.global.len() != 2 {
        return Err(format!(
            "global has {} features, expected 2 (gravity vector)",
            g.global.len()
        ));
    }
    let mut springs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (k, e) in g.edges.iter().enumerate() {
        if e.sender == e.receiver {
            return Err(format!("edge {k} connects a mass to itself"));
        }
        if e.attr.len() != 2 {
            return Err(format!(
                "edge {k} has {} features, expected 2 ([rest_length, stiffness])",
                e.attr.len()
            ));
        }
        let key = (e.sender.min(e.receiver), e.sender.max(e.receiver));
        if seen.insert(key) {
            springs.push(Spring {
                a: key.0,
                b: key.1,
                rest_length: e.attr[0],
                stiffness: e.attr[1],
            });
        }
    }
    let state = PhysicsState {
        positions,
        velocities,
        masses,
        fixed,
        springs,
        gravity: [g.global[0], g.global[1]],
        dt,
    };
    state.validate()?;
    Ok(state)
}

/// Target graph for one-step prediction: node `[x', y', vx', vy']` after a
/// step, with the input connectivity and empty edge/global attributes.
pub fn step_target(state: &PhysicsState) -> Graph {
    let next = physics_step(state);
    let nodes = (0..next.num_masses())
        .map(|i| {
            vec![
                next.positions[i][0],
                next.positions[i][1],
                next.velocities[i][0],
                next.velocities[i][1],
            ]
        })
        .collect();
    let mut edges = Vec::new();
    for s in &state.springs {
        edges.push(Edge::new(s.a, s.b, vec![]));
        edges.push(Edge::new(s.b, s.a, vec![]));
    }
    Graph::new(vec![], nodes, edges)
}

pub fn gen_physics_sample(n: usize, rng: &mut impl Rng) -> Sample {
    let state = gen_physics(n, rng);
    Sample {
        input: state_to_graph(&state),
        target: step_target(&state),
    }
}

/// Builds the predicted next state from per-mass velocity-change rows
/// `[Δvx, Δvy]`: the new velocity is `v + Δv` and the new position follows
/// the same semi-implicit update as the simulator, `p + Δt·(v + Δv)`.
/// Masses, springs, gravity, and the timestep carry over; fixed masses
/// ignore the prediction and stay frozen. Tying the position to the
/// predicted velocity means the model only has to regress the effect of
/// the forces, on the scale of one step's velocity change.
pub fn predicted_next_state(
    state: &PhysicsState,
    node_outputs: &[Vec<f64>],
) -> Result<PhysicsState, String> {
    if node_outputs.len() != state.num_masses() {
        return Err(format!(
            "prediction has {} node rows for {} masses",
            node_outputs.len(),
            state.num_masses()
        ));
    }
    let mut next = state.clone();
    for (i, row) in node_outputs.iter().enumerate() {
        if row.len() != 2 {
            return Err(format!(
                "prediction row {i} has {} values, expected 2 ([Δvx, Δvy])",
                row.len()
            ));
        }
        if !state.fixed[i] {
            let v = [
                state.velocities[i][0] + row[0],
                state.velocities[i][1] + row[1],
            ];
            next.velocities[i] = v;
            next.positions[i] = [
                state.positions[i][0] + state.dt * v[0],
                state.positions[i][1] + state.dt * v[1],
            ];
        }
    }
    Ok(next)
}

/// Feeds a one-step model back into itself `t` times. Returns the visited
/// states — `t + 1` entries on success — plus a diagnostic if a step failed
/// or produced non-finite values, in which case the trajectory is truncated
/// at the last good state.
pub fn rollout(
    step: impl Fn(&PhysicsState) -> Result<PhysicsState, String>,
    s0: &PhysicsState,
    t: usize,
) -> (Vec<PhysicsState>, Option<String>) {
    let mut traj = vec![s0.clone()];
    for k in 0..t {
        let next = match step(traj.last().unwrap()) {
            Ok(next) => next,
            Err(e) => return (traj, Some(format!("step {k} failed: {e}"))),
        };
        if next.has_non_finite() {
            return (
                traj,
                Some(format!("step {k} produced a non-finite position or velocity")),
            );
        }
        traj.push(next);
    }
    (traj, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_mass_state(pa: [f64; 2], pb: [f64; 2]) -> PhysicsState {
        PhysicsState {
            positions: vec![pa, pb],
            velocities: vec![[0.0, 0.0], [0.0, 0.0]],
            masses: vec![1.0, 1.0],
            fixed: vec![false, false],
            springs: vec![Spring {
                a: 0,
                b: 1,
                rest_length: 1.0,
                stiffness: 50.0,
            }],
            gravity: [0.0, 0.0],
            dt: 0.02,
        }
    }

    #[test]
    fn free_fall_matches_hand_integration() {
        let state = PhysicsState {
            positions: vec![[0.0, 0.0]],
            velocities: vec![[0.0, 0.0]],
            masses: vec![1.0],
            fixed: vec![false],
            springs: vec![],
            gravity: [0.0, -10.0],
            dt: 0.1,
        };
        let next = physics_step(&state);
        assert_eq!(next.velocities[0], [0.0, -1.0]);
        assert_eq!(next.positions[0], [0.0, -0.1]);
    }

    #[test]
    fn equilibrium_state_is_bitwise_unchanged() {
        let state = two_mass_state([0.0, 0.0], [1.0, 0.0]);
        assert_eq!(physics_step(&state), state);
    }

    #[test]
    fn stretched_spring_pulls_endpoints_together() {
        let state = two_mass_state([0.0, 0.0], [2.0, 0.0]);
        let f = spring_force(&state, &state.springs[0]);
        // stretch 1 m at k=50 pulls mass a toward b with 50 N
        assert_eq!(f, [50.0, 0.0]);
        let next = physics_step(&state);
        assert!(next.velocities[0][0] > 0.0 && next.velocities[1][0] < 0.0);
    }

    #[test]
    fn force_pairs_cancel_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let state = gen_physics(4, &mut rng);
            for (fa, fb) in spring_force_pairs(&state) {
                assert_eq!(fa[0] + fb[0], 0.0);
                assert_eq!(fa[1] + fb[1], 0.0);
            }
        }
    }

    #[test]
    fn resting_pair_conserves_momentum_exactly() {
        let state = two_mass_state([0.3, 0.4], [1.9, 0.7]);
        assert_eq!(total_momentum(&state), [0.0, 0.0]);
        let next = physics_step(&state);
        assert_eq!(total_momentum(&next), [0.0, 0.0]);
    }

    #[test]
    fn momentum_drift_stays_below_1e12_over_1000_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = gen_physics(4, &mut rng);
        state.gravity = [0.0, 0.0];
        state.dt = 1e-3;
        let p0 = total_momentum(&state);
        for _ in 0..1000 {
            state = physics_step(&state);
        }
        let p = total_momentum(&state);
        assert!((p[0] - p0[0]).abs() < 1e-12, "{} vs {}", p[0], p0[0]);
        assert!((p[1] - p0[1]).abs() < 1e-12, "{} vs {}", p[1], p0[1]);
    }

    #[test]
    fn energy_drifts_less_than_one_percent_without_gravity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = gen_physics(4, &mut rng);
        state.gravity = [0.0, 0.0];
        state.dt = 1e-3;
        let e0 = total_energy(&state);
        assert!(e0 > 0.0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            state = physics_step(&state);
            worst = worst.max(((total_energy(&state) - e0) / e0).abs());
        }
        assert!(worst < 0.01, "relative energy drift {worst}");
    }

    #[test]
    fn fixed_mass_never_moves() {
        let mut state = two_mass_state([0.0, 0.0], [2.0, 0.0]);
        state.fixed[0] = true;
        state.gravity = [0.0, -10.0];
        let mut cur = state.clone();
        for _ in 0..10 {
            cur = physics_step(&cur);
        }
        assert_eq!(cur.positions[0], [0.0, 0.0]);
        assert_eq!(cur.velocities[0], [0.0, 0.0]);
        assert_ne!(cur.positions[1], [2.0, 0.0]);
    }

    #[test]
    fn coincident_endpoints_exert_no_force() {
        let state = two_mass_state([0.5, 0.5], [0.5, 0.5]);
        assert_eq!(spring_force(&state, &state.springs[0]), [0.0, 0.0]);
        assert_eq!(physics_step(&state), state);
    }

    #[test]
    fn graph_round_trip_preserves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut state = gen_physics(5, &mut rng);
        state.fixed[2] = true;
        state.masses[1] = 2.5;
        let g = state_to_graph(&state);
        assert_eq!(graph_to_state(&g, state.dt).unwrap(), state);
    }

    #[test]
    fn sample_targets_equal_simulator_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = gen_physics(4, &mut rng);
        let target = step_target(&state);
        let next = physics_step(&state);
        for i in 0..4 {
            assert_eq!(
                target.nodes[i],
                vec![
                    next.positions[i][0],
                    next.positions[i][1],
                    next.velocities[i][0],
                    next.velocities[i][1]
                ]
            );
        }
        assert_eq!(target.edges.len(), state.springs.len() * 2);
    }

    #[test]
    fn malformed_graphs_are_rejected() {
        let g = Graph::new(vec![0.0, 0.0], vec![vec![1.0; 5]], vec![]);
        assert!(graph_to_state(&g, 0.02).unwrap_err().contains("node 0"));
        let g = Graph::new(
            vec![0.0, 0.0],
            vec![vec![0.0; 6]],
            vec![Edge::new(0, 0, vec![1.0, 50.0])],
        );
        assert!(graph_to_state(&g, 0.02).unwrap_err().contains("itself"));
    }

    #[test]
    fn rollout_with_zero_steps_returns_only_the_start() {
        let state = two_mass_state([0.0, 0.0], [1.5, 0.0]);
        let (traj, diag) = rollout(|s| Ok(physics_step(s)), &state, 0);
        assert_eq!(traj, vec![state]);
        assert!(diag.is_none());
    }

    #[test]
    fn identity_model_rolls_out_a_constant_trajectory() {
        let state = two_mass_state([0.0, 0.0], [1.5, 0.0]);
        let (traj, diag) = rollout(|s| Ok(s.clone()), &state, 5);
        assert!(diag.is_none());
        assert_eq!(traj.len(), 6);
        assert!(traj.iter().all(|s| *s == state));
    }

    #[test]
    fn oracle_rollout_matches_repeated_stepping() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s0 = gen_physics(3, &mut rng);
        let (traj, diag) = rollout(|s| Ok(physics_step(s)), &s0, 4);
        assert!(diag.is_none());
        let mut expect = s0.clone();
        for state in &traj[1..] {
            expect = physics_step(&expect);
            assert_eq!(*state, expect);
        }
    }

    #[test]
    fn non_finite_step_truncates_the_trajectory() {
        let state = two_mass_state([0.0, 0.0], [1.5, 0.0]);
        let (traj, diag) = rollout(
            |s| {
                let mut next = physics_step(s);
                if next.positions[0][0] != 0.0 {
                    next.positions[0][0] = f64::NAN;
                }
                Ok(next)
            },
            &state,
            10,
        );
        assert!(traj.len() < 11);
        assert!(diag.unwrap().contains("non-finite"));
    }

    #[test]
    fn predicted_state_integrates_velocity_changes_and_respects_fixed_masses() {
        let mut state = two_mass_state([0.0, 0.0], [1.5, 0.0]);
        state.fixed[0] = true;
        let rows = vec![vec![9.0, 9.0], vec![1.0, 2.0]];
        let next = predicted_next_state(&state, &rows).unwrap();
        assert_eq!(next.positions[0], [0.0, 0.0]);
        assert_eq!(next.velocities[1], [1.0, 2.0]);
        // p' = p + dt * v' with dt = 0.02
        assert_eq!(next.positions[1], [1.5 + 0.02 * 1.0, 0.02 * 2.0]);
        assert!(predicted_next_state(&state, &rows[..1].to_vec()).is_err());

        // zero change on a resting state leaves everything in place
        let zero = vec![vec![0.0; 2]; 2];
        let frozen = predicted_next_state(&state, &zero).unwrap();
        assert_eq!(frozen.positions, state.positions);
        assert_eq!(frozen.velocities, state.velocities);
    }

    #[test]
    fn validation_catches_bad_springs_and_masses() {
        let mut state = two_mass_state([0.0, 0.0], [1.0, 0.0]);
        assert!(state.validate().is_ok());
        state.springs[0].b = 7;
        assert!(state.validate().unwrap_err().contains("missing mass"));
        state.springs[0].b = 1;
        state.masses[0] = 0.0;
        assert!(state.validate().unwrap_err().contains("not positive"));
    }
}
