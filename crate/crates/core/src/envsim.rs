//! Analytic physics testbeds with closed-form energies, plus the
//! energy-consumption (TEC) and jerk (MSJ) behavioural metrics.
//!
//! Every environment integrates its equations of motion with semi-implicit
//! Euler at `substeps` per control step and records the generalized
//! acceleration and actuator force of each step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// Torque-limited pendulum, `θ = 0` hanging, reward for height.
    Pendulum,
    /// Force-driven mass on a spring, reward for holding `target`.
    MassSpring,
    /// Cart with a point-mass pole, `θ = 0` upright, reward for balance.
    CartPole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub dt: f64,
    pub substeps: usize,
    pub gravity: f64,
    /// Bob, block or pole-tip mass.
    pub mass: f64,
    pub length: f64,
    pub cart_mass: f64,
    pub stiffness: f64,
    pub target: f64,
    /// Viscous damping per DoF.
    pub damping: Vec<f64>,
    /// Force limit per actuator; actions in `[-1, 1]` are scaled by it.
    pub max_force: Vec<f64>,
    /// DoF driven by each actuator.
    pub actuator_map: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qacc: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    pub reward: f64,
    pub cont: bool,
}

impl EnvSpec {
    pub fn pendulum() -> Self {
        EnvSpec {
            kind: EnvKind::Pendulum,
            dt: 0.05,
            substeps: 200,
            gravity: 9.81,
            mass: 1.0,
            length: 1.0,
            cart_mass: 0.0,
            stiffness: 0.0,
            target: 0.0,
            damping: vec![0.05],
            max_force: vec![2.0],
            actuator_map: vec![0],
        }
    }

    pub fn mass_spring() -> Self {
        EnvSpec {
            kind: EnvKind::MassSpring,
            dt: 0.05,
            substeps: 200,
            gravity: 0.0,
            mass: 1.0,
            length: 0.0,
            cart_mass: 0.0,
            stiffness: 4.0,
            target: 0.5,
            damping: vec![0.1],
            max_force: vec![4.0],
            actuator_map: vec![0],
        }
    }

    pub fn cartpole() -> Self {
        EnvSpec {
            kind: EnvKind::CartPole,
            dt: 0.05,
            substeps: 200,
            gravity: 9.81,
            mass: 0.1,
            length: 0.5,
            cart_mass: 1.0,
            stiffness: 0.0,
            target: 0.0,
            damping: vec![0.1, 0.002],
            max_force: vec![10.0],
            actuator_map: vec![0],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" | "pendulum-swingup" => Ok(Self::pendulum()),
            "mass-spring" | "mass-spring-damper" => Ok(Self::mass_spring()),
            "cartpole" | "cartpole-balance" => Ok(Self::cartpole()),
            other => Err(Error::Dimension(format!("unknown environment '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::Pendulum => "pendulum",
            EnvKind::MassSpring => "mass-spring",
            EnvKind::CartPole => "cartpole",
        }
    }

    /// Same spec without friction.
    pub fn undamped(mut self) -> Self {
        self.damping.iter_mut().for_each(|d| *d = 0.0);
        self
    }

    pub fn d_q(&self) -> usize {
        self.damping.len()
    }

    pub fn d_a(&self) -> usize {
        self.actuator_map.len()
    }

    /// Which coordinates are angles.
    pub fn angle_mask(&self) -> Vec<bool> {
        match self.kind {
            EnvKind::Pendulum => vec![true],
            EnvKind::MassSpring => vec![false],
            EnvKind::CartPole => vec![false, true],
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pendulum => 3,
            EnvKind::MassSpring => 2,
            EnvKind::CartPole => 5,
        }
    }

    /// Proprioceptive observation; angles are encoded as `(cos, sin)`.
    pub fn observe(&self, q: &[f64], qdot: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => vec![q[0].cos(), q[0].sin(), qdot[0]],
            EnvKind::MassSpring => vec![q[0], qdot[0]],
            EnvKind::CartPole => vec![q[0], q[1].cos(), q[1].sin(), qdot[0], qdot[1]],
        }
    }

    /// Coordinates recovered from an observation (inverse of [`observe`] on
    /// `q`; decoded observations need not lie on the unit circle).
    ///
    /// [`observe`]: EnvSpec::observe
    pub fn coordinates_from_obs(&self, obs: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => vec![obs[1].atan2(obs[0])],
            EnvKind::MassSpring => vec![obs[0]],
            EnvKind::CartPole => vec![obs[0], obs[2].atan2(obs[1])],
        }
    }

    pub fn reset(&self, rng: &mut impl Rng) -> SimState {
        let (q, qdot) = match self.kind {
            EnvKind::Pendulum => (vec![rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)], vec![0.0]),
            EnvKind::MassSpring => (vec![rng.random_range(-1.0..1.0)], vec![rng.random_range(-0.5..0.5)]),
            EnvKind::CartPole => (
                vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
                vec![rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
            ),
        };
        self.state_at(0.0, q, qdot)
    }

    /// State with accelerations filled from the unforced equations of motion.
    pub fn state_at(&self, t: f64, q: Vec<f64>, qdot: Vec<f64>) -> SimState {
        let tau = vec![0.0; self.d_a()];
        let qacc = self.acceleration(&q, &qdot, &self.generalized_force(&tau));
        SimState { t, q, qdot, qacc, tau }
    }

    fn generalized_force(&self, tau: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.d_q()];
        for (&dof, &t) in self.actuator_map.iter().zip(tau) {
            f[dof] += t;
        }
        f
    }

    /// `q̈` of the equations of motion under generalized force `force`.
    pub fn acceleration(&self, q: &[f64], qdot: &[f64], force: &[f64]) -> Vec<f64> {
        let (g, m, l) = (self.gravity, self.mass, self.length);
        match self.kind {
            EnvKind::Pendulum => {
                vec![(force[0] - self.damping[0] * qdot[0] - m * g * l * q[0].sin()) / (m * l * l)]
            }
            EnvKind::MassSpring => {
                vec![(force[0] - self.damping[0] * qdot[0] - self.stiffness * q[0]) / m]
            }
            EnvKind::CartPole => {
                let (s, c) = q[1].sin_cos();
                let m11 = self.cart_mass + m;
                let m12 = m * l * c;
                let m22 = m * l * l;
                let r1 = force[0] - self.damping[0] * qdot[0] + m * l * s * qdot[1] * qdot[1];
                let r2 = force[1] - self.damping[1] * qdot[1] + m * g * l * s;
                let det = m11 * m22 - m12 * m12;
                vec![(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det]
            }
        }
    }

    /// Generalized momentum `M(q) q̇`.
    pub fn momentum(&self, q: &[f64], qdot: &[f64]) -> Vec<f64> {
        let (m, l) = (self.mass, self.length);
        match self.kind {
            EnvKind::Pendulum => vec![m * l * l * qdot[0]],
            EnvKind::MassSpring => vec![m * qdot[0]],
            EnvKind::CartPole => {
                let c = q[1].cos();
                vec![(self.cart_mass + m) * qdot[0] + m * l * c * qdot[1], m * l * c * qdot[0] + m * l * l * qdot[1]]
            }
        }
    }

    pub fn reward(&self, s: &SimState) -> f64 {
        match self.kind {
            EnvKind::Pendulum => (1.0 - s.q[0].cos()) / 2.0,
            EnvKind::MassSpring => (-10.0 * (s.q[0] - self.target).powi(2)).exp(),
            EnvKind::CartPole => (1.0 + s.q[1].cos()) / 2.0 * (0.5 + 0.5 * (-s.q[0] * s.q[0]).exp()),
        }
    }
}

/// Kinetic plus potential energy in joules. Potentials are zero at the
/// lowest configuration (hanging pendulum or pole, spring at rest).
pub fn ground_truth_energy(spec: &EnvSpec, s: &SimState) -> f64 {
    let (g, m, l) = (spec.gravity, spec.mass, spec.length);
    match spec.kind {
        EnvKind::Pendulum => m * g * l * (1.0 - s.q[0].cos()) + 0.5 * m * l * l * s.qdot[0] * s.qdot[0],
        EnvKind::MassSpring => 0.5 * spec.stiffness * s.q[0] * s.q[0] + 0.5 * m * s.qdot[0] * s.qdot[0],
        EnvKind::CartPole => {
            let (xd, td) = (s.qdot[0], s.qdot[1]);
            let kinetic = 0.5 * (spec.cart_mass + m) * xd * xd
                + m * l * s.q[1].cos() * xd * td
                + 0.5 * m * l * l * td * td;
            kinetic + m * g * l * (1.0 + s.q[1].cos())
        }
    }
}

/// Advances one control step with the action clamped to `[-1, 1]` and held
/// over all substeps.
pub fn env_step(spec: &EnvSpec, state: &SimState, a: &[f64]) -> Result<StepOutcome> {
    if a.len() != spec.d_a() {
        return Err(Error::Dimension(format!("action has {} entries, expected {}", a.len(), spec.d_a())));
    }
    let tau: Vec<f64> = a
        .iter()
        .zip(&spec.max_force)
        .map(|(&u, &f)| if u.is_nan() { f64::NAN } else { u.clamp(-1.0, 1.0) * f })
        .collect();
    let force = spec.generalized_force(&tau);
    let h = spec.dt / spec.substeps as f64;
    let mut q = state.q.clone();
    let mut qdot = state.qdot.clone();
    for _ in 0..spec.substeps {
        let acc = spec.acceleration(&q, &qdot, &force);
        for i in 0..q.len() {
            qdot[i] += h * acc[i];
            q[i] += h * qdot[i];
        }
    }
    let qacc = spec.acceleration(&q, &qdot, &force);
    if q.iter().chain(&qdot).chain(&qacc).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{} state diverged at t = {}", spec.name(), state.t)));
    }
    let next = SimState { t: state.t + spec.dt, q, qdot, qacc, tau };
    let reward = spec.reward(&next);
    Ok(StepOutcome { state: next, reward, cont: true })
}

/// One recorded control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qacc: Vec<f64>,
    pub tau: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub done: bool,
    #[serde(rename = "E_true")]
    pub e_true: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub actuator_map: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(spec: &EnvSpec) -> Self {
        Trajectory { dt: spec.dt, actuator_map: spec.actuator_map.clone(), steps: Vec::new() }
    }

    pub fn record(&mut self, spec: &EnvSpec, out: &StepOutcome, a: &[f64], done: bool) {
        let s = &out.state;
        self.steps.push(StepRecord {
            t: s.t,
            q: s.q.clone(),
            qdot: s.qdot.clone(),
            qacc: s.qacc.clone(),
            tau: s.tau.clone(),
            a: a.to_vec(),
            r: out.reward,
            done,
            e_true: ground_truth_energy(spec, s),
        });
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.r).sum()
    }
}

/// Runs one episode of `steps` control steps from a fresh reset; `policy`
/// sees the current state and returns the action.
pub fn rollout_episode<R: Rng>(
    spec: &EnvSpec,
    steps: usize,
    rng: &mut R,
    mut policy: impl FnMut(&SimState, &mut R) -> Vec<f64>,
) -> Result<Trajectory> {
    let mut state = spec.reset(rng);
    let mut traj = Trajectory::new(spec);
    for k in 0..steps {
        let a = policy(&state, rng);
        let out = env_step(spec, &state, &a)?;
        traj.record(spec, &out, &a, k + 1 == steps);
        state = out.state;
    }
    Ok(traj)
}

/// Exploration policy: uniform actions in `[-1, 1]`, each held for a random
/// number of steps in `1..=max_hold`.
#[derive(Clone, Debug)]
pub struct HeldRandomActions {
    current: Vec<f64>,
    left: usize,
    max_hold: usize,
}

impl HeldRandomActions {
    pub fn new(d_a: usize, max_hold: usize) -> Self {
        HeldRandomActions { current: vec![0.0; d_a], left: 0, max_hold: max_hold.max(1) }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        if self.left == 0 {
            self.current.iter_mut().for_each(|a| *a = rng.random_range(-1.0..=1.0));
            self.left = rng.random_range(1..=self.max_hold);
        }
        self.left -= 1;
        self.current.clone()
    }
}

/// `α Σ_t Σ_i |τ_i q̇_{M(i)}| Δt + β Σ_t Σ_i τ_i² Δt`.
pub fn tec_metric(traj: &Trajectory, alpha: f64, beta: f64) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::InsufficientData("TEC of an empty trajectory".into()));
    }
    let mut work = 0.0;
    let mut effort = 0.0;
    for s in &traj.steps {
        for (i, &tau) in s.tau.iter().enumerate() {
            work += (tau * s.qdot[traj.actuator_map[i]]).abs();
            effort += tau * tau;
        }
    }
    Ok(alpha * work * traj.dt + beta * effort * traj.dt)
}

/// Mean over steps and DoFs of the squared finite-difference jerk.
pub fn msj_metric(traj: &Trajectory) -> Result<f64> {
    let steps = &traj.steps;
    if steps.len() < 2 {
        return Err(Error::InsufficientData("MSJ needs at least 2 steps".into()));
    }
    let n_dof = steps[0].qacc.len();
    let mut total = 0.0;
    for w in steps.windows(2) {
        for j in 0..n_dof {
            let jerk = (w[1].qacc[j] - w[0].qacc[j]) / traj.dt;
            total += jerk * jerk;
        }
    }
    Ok(total / ((steps.len() - 1) * n_dof) as f64)
}

/// Percent change of `ours` relative to `baseline`.
pub fn relative_change(baseline: f64, ours: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok((ours - baseline) / baseline.abs() * 100.0)
}

/// Per-task relative change first, then the mean across tasks.
pub fn aggregate_relative_change(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no tasks to aggregate".into()));
    }
    let changes = pairs.iter().map(|&(b, o)| relative_change(b, o)).collect::<Result<Vec<_>>>()?;
    Ok(changes.iter().sum::<f64>() / changes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rollout(spec: &EnvSpec, s0: SimState, steps: usize, a: &[f64]) -> Vec<SimState> {
        let mut out = vec![s0];
        for _ in 0..steps {
            let next = env_step(spec, out.last().unwrap(), a).unwrap().state;
            out.push(next);
        }
        out
    }

    #[test]
    fn coordinates_invert_observation() {
        for spec in [EnvSpec::pendulum(), EnvSpec::mass_spring(), EnvSpec::cartpole()] {
            let q: Vec<f64> = (0..spec.d_q()).map(|i| 0.7 - 1.9 * i as f64).collect();
            let qdot = vec![0.3; spec.d_q()];
            let back = spec.coordinates_from_obs(&spec.observe(&q, &qdot));
            for (a, b) in q.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hanging_pendulum_stays_put() {
        let spec = EnvSpec::pendulum();
        let s0 = spec.state_at(0.0, vec![0.0], vec![0.0]);
        let traj = rollout(&spec, s0, 50, &[0.0]);
        let last = traj.last().unwrap();
        assert_eq!(last.q, vec![0.0]);
        assert_eq!(last.qdot, vec![0.0]);
        assert_eq!(ground_truth_energy(&spec, last), 0.0);
    }

    #[test]
    fn energy_examples() {
        let p = EnvSpec::pendulum();
        let e = ground_truth_energy(&p, &p.state_at(0.0, vec![std::f64::consts::FRAC_PI_2], vec![0.0]));
        assert!((e - 9.81).abs() < 1e-12);
        let s = EnvSpec::mass_spring();
        assert_eq!(ground_truth_energy(&s, &s.state_at(0.0, vec![1.0], vec![0.0])), 2.0);
    }

    #[test]
    fn undamped_pendulum_conserves_energy() {
        let spec = EnvSpec::pendulum().undamped();
        for theta in [0.3, 1.5, 2.8] {
            let traj = rollout(&spec, spec.state_at(0.0, vec![theta], vec![0.0]), 200, &[0.0]);
            let e0 = ground_truth_energy(&spec, &traj[0]);
            let drift = traj.iter().map(|s| (ground_truth_energy(&spec, s) - e0).abs()).fold(0.0, f64::max);
            assert!(drift / e0 < 1e-3, "θ0 = {theta}: relative drift {}", drift / e0);
        }
    }

    #[test]
    fn undamped_cartpole_conserves_energy() {
        let spec = EnvSpec::cartpole().undamped();
        let traj = rollout(&spec, spec.state_at(0.0, vec![0.0, 0.4], vec![0.3, 0.0]), 200, &[0.0]);
        let e0 = ground_truth_energy(&spec, &traj[0]);
        for s in &traj {
            assert!((ground_truth_energy(&spec, s) - e0).abs() / e0 < 1e-3);
        }
    }

    #[test]
    fn spring_matches_closed_form() {
        let spec = EnvSpec::mass_spring().undamped();
        let omega = (spec.stiffness / spec.mass).sqrt();
        let period = 2.0 * std::f64::consts::PI / omega;
        let steps = (5.0 * period / spec.dt).ceil() as usize;
        let traj = rollout(&spec, spec.state_at(0.0, vec![1.0], vec![0.0]), steps, &[0.0]);
        for s in &traj {
            assert!((s.q[0] - (omega * s.t).cos()).abs() < 1e-3, "t = {}", s.t);
        }
    }

    #[test]
    fn damped_energy_decays() {
        for spec in [EnvSpec::pendulum(), EnvSpec::mass_spring(), EnvSpec::cartpole()] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let s0 = spec.reset(&mut rng);
            let traj = rollout(&spec, s0, 200, &vec![0.0; spec.d_a()]);
            let e: Vec<f64> = traj.iter().map(|s| ground_truth_energy(&spec, s)).collect();
            for w in e.windows(2) {
                assert!(w[1] <= w[0], "{}: {} -> {}", spec.name(), w[0], w[1]);
            }
        }
    }

    #[test]
    fn recorded_acceleration_matches_dynamics() {
        let spec = EnvSpec::cartpole();
        let s0 = spec.state_at(0.0, vec![0.0, 0.2], vec![0.0, 0.0]);
        let out = env_step(&spec, &s0, &[0.5]).unwrap();
        let s = &out.state;
        assert_eq!(s.tau, vec![5.0]);
        assert_eq!(s.qacc, spec.acceleration(&s.q, &s.qdot, &[5.0, 0.0]));
        assert!((0.0..=1.0).contains(&out.reward));
        let clamped = env_step(&spec, &s0, &[3.0]).unwrap();
        assert_eq!(clamped.state.tau, vec![10.0]);
        assert!(env_step(&spec, &s0, &[f64::NAN]).is_err());
        assert!(env_step(&spec, &s0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn momentum_is_gradient_of_kinetic_energy() {
        let spec = EnvSpec::cartpole();
        let q = [0.3, 0.7];
        let qd = [0.4, -1.1];
        let p = spec.momentum(&q, &qd);
        let e = |v: &[f64]| ground_truth_energy(&spec, &spec.state_at(0.0, q.to_vec(), v.to_vec()));
        let h = 1e-6;
        for i in 0..2 {
            let mut up = qd;
            let mut dn = qd;
            up[i] += h;
            dn[i] -= h;
            assert!(((e(&up) - e(&dn)) / (2.0 * h) - p[i]).abs() < 1e-7);
        }
    }

    fn record(tau: f64, qdot: f64, qacc: f64) -> StepRecord {
        StepRecord {
            t: 0.0,
            q: vec![0.0],
            qdot: vec![qdot],
            qacc: vec![qacc],
            tau: vec![tau],
            a: vec![0.0],
            r: 0.0,
            done: false,
            e_true: 0.0,
        }
    }

    fn traj(steps: Vec<StepRecord>) -> Trajectory {
        Trajectory { dt: 0.1, actuator_map: vec![0], steps }
    }

    #[test]
    fn tec_examples() {
        assert_eq!(tec_metric(&traj(vec![record(0.0, 3.0, 0.0); 5]), 1.0, 0.1).unwrap(), 0.0);
        let v = tec_metric(&traj(vec![record(1.0, 2.0, 0.0)]), 1.0, 0.1).unwrap();
        assert!((v - 0.21).abs() < 1e-15);
        assert!(tec_metric(&traj(vec![]), 1.0, 0.1).is_err());

        let base = traj(vec![record(0.5, 2.0, 0.0), record(-1.5, 0.3, 0.0)]);
        let doubled = traj(base.steps.iter().map(|s| record(2.0 * s.tau[0], s.qdot[0], 0.0)).collect());
        let work = |t: &Trajectory| tec_metric(t, 1.0, 0.0).unwrap();
        let effort = |t: &Trajectory| tec_metric(t, 0.0, 1.0).unwrap();
        assert!((work(&doubled) - 2.0 * work(&base)).abs() < 1e-14);
        assert!((effort(&doubled) - 4.0 * effort(&base)).abs() < 1e-14);

        let mut joined = base.clone();
        joined.steps.extend(doubled.steps.clone());
        let sum = tec_metric(&base, 1.0, 0.01).unwrap() + tec_metric(&doubled, 1.0, 0.01).unwrap();
        assert!((tec_metric(&joined, 1.0, 0.01).unwrap() - sum).abs() < 1e-14);
    }

    #[test]
    fn msj_examples() {
        assert_eq!(msj_metric(&traj(vec![record(0.0, 0.0, 2.5); 4])).unwrap(), 0.0);
        let v = msj_metric(&traj(vec![record(0.0, 0.0, 0.0), record(0.0, 0.0, 1.0)])).unwrap();
        assert!((v - 100.0).abs() < 1e-9);
        assert!(msj_metric(&traj(vec![record(0.0, 0.0, 1.0)])).is_err());
        let fwd = traj([0.1, -0.4, 0.9, 0.2].iter().map(|&a| record(0.0, 0.0, a)).collect());
        let mut rev = fwd.clone();
        rev.steps.reverse();
        assert_eq!(msj_metric(&fwd).unwrap(), msj_metric(&rev).unwrap());
    }

    #[test]
    fn aggregation_averages_per_task_changes() {
        let v = aggregate_relative_change(&[(10.0, 9.0), (200.0, 190.0)]).unwrap();
        assert!((v + 7.5).abs() < 1e-12);
        assert!(relative_change(0.0, 1.0).is_err());
    }

    #[test]
    fn record_serializes_with_dataset_field_names() {
        let json = serde_json::to_string(&record(1.0, 2.0, 3.0)).unwrap();
        for key in ["\"t\"", "\"q\"", "\"qdot\"", "\"qacc\"", "\"tau\"", "\"a\"", "\"r\"", "\"done\"", "\"E_true\""] {
            assert!(json.contains(key), "{key} missing from {json}");
        }
    }
}
