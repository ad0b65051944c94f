//! Small environments: an exactly solvable tabular MDP, a noisy 2-D point
//! mass, and a Pareto ratio sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::policy::{one_hot, Action, Arch, Policy};
use crate::{Error, Result};

/// Largest residual accepted from the linear solves.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s' | s, a)` at `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// `R(s, a)` at `s * n_actions + a`.
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub start: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub v: Vec<f64>,
    /// Row-major `[n_states, n_actions]`.
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    /// Start-weighted value `Σ μ(s) V(s)`.
    pub j: f64,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn solve(m: DMatrix<f64>, b: DVector<f64>) -> Result<Vec<f64>> {
    let x = m
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("singular linear system".into()))?;
    let residual = (&m * &x - &b).amax();
    if residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::Numeric(format!("linear solve residual {residual:e}")));
    }
    Ok(x.iter().copied().collect())
}

impl ExactMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || start.len() != n_states
        {
            return Err(Error::Dimension("MDP tensor sizes do not match the state and action counts".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        for row in transition.chunks(n_states) {
            check_distribution("transition row", row)?;
        }
        check_distribution("start distribution", &start)?;
        Ok(Self { n_states, n_actions, transition, reward, gamma, start })
    }

    /// Random MDP: transition rows and the start law from a flat Dirichlet,
    /// standard normal rewards.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut dirichlet = |n: usize| {
            let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            // push the rounding residue into the largest entry so rows sum to 1
            let err = 1.0 - v.iter().sum::<f64>();
            let imax = (0..n).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap_or(0);
            v[imax] += err;
            v
        };
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(dirichlet(n_states));
        }
        let start = dirichlet(n_states);
        let reward = (0..n_states * n_actions).map(|_| StandardNormal.sample(rng)).collect();
        Self::new(n_states, n_actions, transition, reward, gamma, start)
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Row-major `[n_states, n_actions]` action probabilities of a tabular policy.
    pub fn policy_table(&self, policy: &Policy) -> Result<Vec<f64>> {
        match policy.arch() {
            Arch::Categorical { obs_dim, n_actions, .. } if *obs_dim == self.n_states && *n_actions == self.n_actions => {
                let states: Vec<f64> = (0..self.n_states).flat_map(|s| one_hot(s, self.n_states)).collect();
                Ok(policy.log_prob_table(&states)?.into_iter().map(f64::exp).collect())
            }
            _ => Err(Error::Dimension(format!(
                "policy {:?} is not tabular over {} states and {} actions",
                policy.arch(),
                self.n_states,
                self.n_actions
            ))),
        }
    }

    fn check_table(&self, pi: &[f64]) -> Result<()> {
        if pi.len() != self.n_states * self.n_actions {
            return Err(Error::Dimension("policy table size".into()));
        }
        for row in pi.chunks(self.n_actions) {
            if row.iter().any(|x| !(*x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("policy table row is not a distribution"));
            }
        }
        Ok(())
    }

    fn state_transition(&self, pi: &[f64]) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |s, s2| (0..self.n_actions).map(|a| pi[s * self.n_actions + a] * self.p(s, a, s2)).sum())
    }

    pub fn solve_table(&self, pi: &[f64]) -> Result<ExactSolution> {
        self.check_table(pi)?;
        let (n, k) = (self.n_states, self.n_actions);
        let p_pi = self.state_transition(pi);
        let r_pi = DVector::from_fn(n, |s, _| (0..k).map(|a| pi[s * k + a] * self.r(s, a)).sum());
        let m = DMatrix::identity(n, n) - p_pi * self.gamma;
        let v = solve(m, r_pi)?;
        let mut q = vec![0.0; n * k];
        for s in 0..n {
            for a in 0..k {
                q[s * k + a] = self.r(s, a) + self.gamma * (0..n).map(|s2| self.p(s, a, s2) * v[s2]).sum::<f64>();
            }
        }
        let adv = (0..n * k).map(|i| q[i] - v[i / k]).collect();
        let j = self.start.iter().zip(&v).map(|(m, v)| m * v).sum();
        Ok(ExactSolution { v, q, a: adv, j })
    }

    pub fn solve_exact(&self, policy: &Policy) -> Result<ExactSolution> {
        self.solve_table(&self.policy_table(policy)?)
    }

    /// Normalized discounted state occupancy `(1 − γ) Σ_t γ^t P(s_t = s)`.
    pub fn occupancy_table(&self, pi: &[f64]) -> Result<Vec<f64>> {
        self.check_table(pi)?;
        let n = self.n_states;
        let m = DMatrix::identity(n, n) - self.state_transition(pi).transpose() * self.gamma;
        let b = DVector::from_iterator(n, self.start.iter().map(|x| (1.0 - self.gamma) * x));
        solve(m, b)
    }

    pub fn occupancy(&self, policy: &Policy) -> Result<Vec<f64>> {
        self.occupancy_table(&self.policy_table(policy)?)
    }
}

/// What an environment accepts as an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode over (terminal state or horizon reached).
    pub done: bool,
    /// The action was outside the valid box and got clamped.
    pub clamped: bool,
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn step(&mut self, action: &Action, rng: &mut dyn rand::RngCore) -> Result<Step>;
}

/// Point mass in the plane pushed by a force in `[-1, 1]²` toward the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMassEnv {
    pub horizon: usize,
    pub noise: f64,
    pub dt: f64,
    pub goal: [f64; 2],
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self::new(100, 0.05)
    }
}

impl PointMassEnv {
    pub fn new(horizon: usize, noise: f64) -> Self {
        Self { horizon, noise, dt: 0.1, goal: [0.0, 0.0], pos: [0.0; 2], vel: [0.0; 2], t: 0 }
    }

    pub fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    /// Puts the mass at a chosen state, restarting the episode clock.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.t = 0;
    }
}

impl Env for PointMassEnv {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.vel = [0.0; 2];
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &Action, rng: &mut dyn rand::RngCore) -> Result<Step> {
        let Action::Continuous(a) = action else {
            return Err(Error::Dimension("point mass takes a continuous action".into()));
        };
        if a.len() != 2 || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dimension("point mass takes a finite 2-D force".into()));
        }
        let clamped = a.iter().any(|x| x.abs() > 1.0);
        let f = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let dist2: f64 = (0..2).map(|i| (self.pos[i] - self.goal[i]).powi(2)).sum();
        let reward = -(dist2 + 0.01 * (f[0] * f[0] + f[1] * f[1]));
        for i in 0..2 {
            let eps: f64 = StandardNormal.sample(rng);
            self.vel[i] += self.dt * f[i] + self.noise * eps;
            self.pos[i] += self.dt * self.vel[i];
        }
        self.t += 1;
        Ok(Step { obs: self.obs(), reward, done: self.t >= self.horizon, clamped })
    }
}

/// A tabular MDP run as an episodic environment with one-hot observations.
#[derive(Clone, Debug)]
pub struct MdpEnv {
    pub mdp: ExactMdp,
    pub horizon: usize,
    state: usize,
    t: usize,
}

impl MdpEnv {
    pub fn new(mdp: ExactMdp, horizon: usize) -> Self {
        Self { mdp, horizon, state: 0, t: 0 }
    }
}

fn sample_index(p: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

impl Env for MdpEnv {
    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions)
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.state = sample_index(&self.mdp.start, rng);
        self.t = 0;
        one_hot(self.state, self.mdp.n_states)
    }

    fn step(&mut self, action: &Action, rng: &mut dyn rand::RngCore) -> Result<Step> {
        let a = match action {
            Action::Discrete(a) if *a < self.mdp.n_actions => *a,
            _ => return Err(Error::Dimension("action outside the MDP's action set".into())),
        };
        let (n, k) = (self.mdp.n_states, self.mdp.n_actions);
        let reward = self.mdp.r(self.state, a);
        let row = &self.mdp.transition[(self.state * k + a) * n..(self.state * k + a + 1) * n];
        self.state = sample_index(row, rng);
        self.t += 1;
        Ok(Step { obs: one_hot(self.state, n), reward, done: self.t >= self.horizon, clamped: false })
    }
}

/// Pareto law with scale 1: `P(r > t) = t^{−α}` for `t ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoSampler {
    pub alpha: f64,
}

impl ParetoSampler {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("tail index must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// Inverse-CDF draw `U^{−1/α}` with `U` uniform on `(0, 1]`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = 1.0 - rng.random::<f64>();
        u.powf(-1.0 / self.alpha)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t < 1.0 {
            0.0
        } else {
            1.0 - t.powf(-self.alpha)
        }
    }
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn zero_rewards_and_geometric_series() {
        let mut rng = stream(0, Stream::Aux);
        let mut mdp = ExactMdp::random(3, 2, 0.9, &mut rng).unwrap();
        mdp.reward = vec![0.0; 6];
        let sol = mdp.solve_exact(&Policy::tabular(3, 2).unwrap()).unwrap();
        assert!(sol.v.iter().chain(&sol.q).chain(&sol.a).all(|x| *x == 0.0));
        assert_eq!(sol.j, 0.0);

        let one = ExactMdp::new(1, 1, vec![1.0], vec![1.0], 0.9, vec![1.0]).unwrap();
        let sol = one.solve_exact(&Policy::tabular(1, 1).unwrap()).unwrap();
        assert!((sol.v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(ExactMdp::new(1, 1, vec![0.9], vec![1.0], 0.9, vec![1.0]).is_err());
        assert!(ExactMdp::new(1, 1, vec![1.0], vec![1.0], 1.0, vec![1.0]).is_err());
        let mdp = ExactMdp::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![1.0]).unwrap();
        assert!(mdp.solve_exact(&Policy::tabular(2, 1).unwrap()).is_err());
    }

    #[test]
    fn advantages_have_zero_policy_mean_and_occupancy_sums_to_one() {
        let mut rng = stream(1, Stream::Aux);
        let mdp = ExactMdp::random(5, 3, 0.95, &mut rng).unwrap();
        let logits: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let pol = Policy::tabular_from_logits(5, 3, logits).unwrap();
        let pi = mdp.policy_table(&pol).unwrap();
        let sol = mdp.solve_exact(&pol).unwrap();
        for s in 0..5 {
            let m: f64 = (0..3).map(|a| pi[s * 3 + a] * sol.a[s * 3 + a]).sum();
            assert!(m.abs() < 1e-12);
        }
        let d = mdp.occupancy(&pol).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // J = Σ_s d(s) Σ_a π R / (1 − γ)
        let j: f64 = (0..5).map(|s| d[s] * (0..3).map(|a| pi[s * 3 + a] * mdp.r(s, a)).sum::<f64>()).sum::<f64>() / 0.05;
        assert!((j - sol.j).abs() < 1e-9 * sol.j.abs().max(1.0));
    }

    #[test]
    fn point_mass_basics() {
        let mut env = PointMassEnv::new(100, 0.0);
        env.set_state([0.0, 0.0], [0.0, 0.0]);
        let mut rng = stream(0, Stream::Rollout);
        let st = env.step(&Action::Continuous(vec![0.0, 0.0]), &mut rng).unwrap();
        assert_eq!(st.reward, 0.0);
        let st = env.step(&Action::Continuous(vec![3.0, 0.0]), &mut rng).unwrap();
        assert!(st.clamped);
        assert!(env.step(&Action::Discrete(0), &mut rng).is_err());

        let replay = |seed| {
            let mut env = PointMassEnv::default();
            let mut rng = stream(seed, Stream::Rollout);
            let mut obs = vec![env.reset(&mut rng)];
            for t in 0..100 {
                let st = env.step(&Action::Continuous(vec![0.5, -0.5 + 0.01 * t as f64]), &mut rng).unwrap();
                obs.push(st.obs);
                assert_eq!(st.done, t == 99);
            }
            obs
        };
        assert_eq!(replay(4), replay(4));
    }

    #[test]
    fn pd_controller_beats_random_actions() {
        let episodes = |controller: &dyn Fn(&[f64], &mut crate::rng::Rng) -> Vec<f64>| {
            let mut env = PointMassEnv::default();
            let mut rng = stream(10, Stream::Rollout);
            let mut act_rng = stream(10, Stream::Aux);
            let mut total = 0.0;
            for _ in 0..100 {
                let mut obs = env.reset(&mut rng);
                loop {
                    let st = env.step(&Action::Continuous(controller(&obs, &mut act_rng)), &mut rng).unwrap();
                    total += st.reward;
                    obs = st.obs;
                    if st.done {
                        break;
                    }
                }
            }
            total / 100.0
        };
        let pd = episodes(&|o, _| vec![(-2.0 * o[0] - 2.0 * o[2]).clamp(-1.0, 1.0), (-2.0 * o[1] - 2.0 * o[3]).clamp(-1.0, 1.0)]);
        let random = episodes(&|_, r| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        assert!(pd > random, "pd {pd} random {random}");
    }

    #[test]
    fn pareto_sampler_laws() {
        let mut rng = stream(2, Stream::Aux);
        let s = ParetoSampler::new(1e12).unwrap();
        assert!(s.sample(1000, &mut rng).iter().all(|x| (x - 1.0).abs() < 1e-9));
        assert!(ParetoSampler::new(0.0).is_err());
        let p = ParetoSampler::new(2.5).unwrap();
        let xs = p.sample(100_000, &mut rng);
        assert!(xs.iter().all(|x| *x >= 1.0));
        assert!(ks_statistic(&xs, |t| p.cdf(t)) < 0.01);
    }

    #[test]
    fn ks_detects_wrong_law() {
        let mut rng = stream(3, Stream::Aux);
        let xs = ParetoSampler::new(1.5).unwrap().sample(10_000, &mut rng);
        let wrong = ParetoSampler::new(3.0).unwrap();
        assert!(ks_statistic(&xs, |t| wrong.cdf(t)) > 0.1);
    }
}
