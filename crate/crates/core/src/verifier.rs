//! Exact tabular checks of the VM/IDM identities on small finite MDPs.
//!
//! Tables are flat row-major vectors. Conditionals that are undefined
//! because their conditioning event has zero probability carry a `false`
//! flag instead of a fabricated row.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p(s' | s, a)` at `[(s * A + a) * S + s']`.
    pub transition: Vec<f64>,
    pub initial: Vec<f64>,
    pub horizon: usize,
}

/// `π(a | s)` at `[s * A + a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    pub defined: Vec<bool>,
}

/// `h(a | s, s')` at `[(s * S + s') * A + a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularIdm {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    pub defined: Vec<bool>,
}

/// `v(s' | s)` at `[s * S + s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularVm {
    pub n_states: usize,
    pub probs: Vec<f64>,
    pub defined: Vec<bool>,
}

fn check_rows(values: &[f64], width: usize, defined: Option<&[bool]>, what: &str) -> Result<()> {
    for (i, row) in values.chunks(width).enumerate() {
        if defined.is_some_and(|d| !d[i]) {
            continue;
        }
        if row.iter().any(|&v| !(0.0..=1.0 + ROW_TOL).contains(&v)) {
            return Err(Error::Verification(format!("{what} row {i} has entries outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(Error::Verification(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn dirichlet_row<R: Rng>(rng: &mut R, n: usize, support: Option<&[bool]>) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|i| {
            let x: f64 = rng.sample(Exp1);
            if support.is_none_or(|s| s[i]) {
                x
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
    row
}

fn random_support<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    let keep = rng.random_range(1..=n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut s = vec![false; n];
    idx[..keep].iter().for_each(|&i| s[i] = true);
    s
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, transition: Vec<f64>, initial: Vec<f64>, horizon: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::Parameter("states, actions and horizon must be positive".into()));
        }
        if transition.len() != n_states * n_actions * n_states || initial.len() != n_states {
            return Err(Error::Parameter("table sizes do not match the state/action counts".into()));
        }
        check_rows(&transition, n_states, None, "transition")?;
        check_rows(&initial, n_states, None, "initial")?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            initial,
            horizon,
        })
    }

    /// Dirichlet(1) rows everywhere: every conditional is defined.
    pub fn random_dense<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, horizon: usize) -> Result<Self> {
        let transition = (0..n_states * n_actions)
            .flat_map(|_| dirichlet_row(rng, n_states, None))
            .collect();
        let initial = dirichlet_row(rng, n_states, None);
        Self::new(n_states, n_actions, transition, initial, horizon)
    }

    /// Dirichlet(1) rows on random supports, so some conditionals vanish.
    pub fn random_sparse<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, horizon: usize) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let support = random_support(rng, n_states);
            transition.extend(dirichlet_row(rng, n_states, Some(&support)));
        }
        let support = random_support(rng, n_states);
        let initial = dirichlet_row(rng, n_states, Some(&support));
        Self::new(n_states, n_actions, transition, initial, horizon)
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Parameter("policy table has the wrong size".into()));
        }
        check_rows(&probs, n_actions, None, "policy")?;
        Ok(Self {
            n_states,
            n_actions,
            probs,
            defined: vec![true; n_states],
        })
    }

    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> Result<Self> {
        let probs = (0..n_states).flat_map(|_| dirichlet_row(rng, n_actions, None)).collect();
        Self::new(n_states, n_actions, probs)
    }

    pub fn random_sparse<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> Result<Self> {
        let probs = (0..n_states)
            .flat_map(|_| {
                let support = random_support(rng, n_actions);
                dirichlet_row(rng, n_actions, Some(&support))
            })
            .collect();
        Self::new(n_states, n_actions, probs)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

impl TabularIdm {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>, defined: Vec<bool>) -> Result<Self> {
        if probs.len() != n_states * n_states * n_actions || defined.len() != n_states * n_states {
            return Err(Error::Parameter("IDM table has the wrong size".into()));
        }
        check_rows(&probs, n_actions, Some(&defined), "IDM")?;
        Ok(Self {
            n_states,
            n_actions,
            probs,
            defined,
        })
    }

    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> Result<Self> {
        let probs = (0..n_states * n_states)
            .flat_map(|_| dirichlet_row(rng, n_actions, None))
            .collect();
        Self::new(n_states, n_actions, probs, vec![true; n_states * n_states])
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_states * n_actions],
            defined: vec![true; n_states * n_states],
        }
    }

    pub fn row(&self, s: usize, s_next: usize) -> Option<&[f64]> {
        let k = s * self.n_states + s_next;
        self.defined[k].then(|| &self.probs[k * self.n_actions..(k + 1) * self.n_actions])
    }

    pub fn undefined_rows(&self) -> usize {
        self.defined.iter().filter(|d| !**d).count()
    }
}

impl TabularVm {
    pub fn row(&self, s: usize) -> Option<&[f64]> {
        self.defined[s].then(|| &self.probs[s * self.n_states..(s + 1) * self.n_states])
    }
}

/// `p_π(s)` and `p_π(s, a, s')` at `[(s * A + a) * S + s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct Visitation {
    pub state: Vec<f64>,
    pub joint: Vec<f64>,
}

impl Visitation {
    /// `p(s, s') = Σ_a p(s, a, s')`.
    pub fn pair(&self, n_states: usize, n_actions: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                for n in 0..n_states {
                    out[s * n_states + n] += self.joint[(s * n_actions + a) * n_states + n];
                }
            }
        }
        out
    }
}

fn conform(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::Parameter("policy does not match the MDP".into()));
    }
    Ok(())
}

/// `(1/T) Σ_{t=1..T} p^t_π(s)` and the joint `p_π(s) π(a|s) p(s'|s,a)`.
pub fn visitation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Visitation> {
    conform(mdp, policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut current = mdp.initial.clone();
    let mut state = vec![0.0; ns];
    for t in 0..mdp.horizon {
        for (acc, p) in state.iter_mut().zip(&current) {
            *acc += p / mdp.horizon as f64;
        }
        if t + 1 == mdp.horizon {
            break;
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = current[s] * policy.row(s)[a];
                if w == 0.0 {
                    continue;
                }
                for (n, acc) in next.iter_mut().enumerate() {
                    *acc += w * mdp.p(s, a, n);
                }
            }
        }
        current = next;
    }
    let mut joint = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            for n in 0..ns {
                joint[(s * na + a) * ns + n] = state[s] * policy.row(s)[a] * mdp.p(s, a, n);
            }
        }
    }
    Ok(Visitation { state, joint })
}

/// `h*(a|s,s') = p(s,a,s') / p(s,s')` and `v*(s'|s) = p(s,s') / p(s)`,
/// flagged undefined where the denominator vanishes.
pub fn induced_idm_vm(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<(TabularIdm, TabularVm)> {
    let vis = visitation(mdp, policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let pair = vis.pair(ns, na);
    let mut h = vec![0.0; ns * ns * na];
    let mut h_def = vec![false; ns * ns];
    for s in 0..ns {
        for n in 0..ns {
            let z = pair[s * ns + n];
            if z <= 0.0 {
                continue;
            }
            h_def[s * ns + n] = true;
            for a in 0..na {
                h[(s * ns + n) * na + a] = vis.joint[(s * na + a) * ns + n] / z;
            }
        }
    }
    let mut v = vec![0.0; ns * ns];
    let mut v_def = vec![false; ns];
    for s in 0..ns {
        if vis.state[s] <= 0.0 {
            continue;
        }
        v_def[s] = true;
        for n in 0..ns {
            v[s * ns + n] = pair[s * ns + n] / vis.state[s];
        }
    }
    Ok((
        TabularIdm {
            n_states: ns,
            n_actions: na,
            probs: h,
            defined: h_def,
        },
        TabularVm {
            n_states: ns,
            probs: v,
            defined: v_def,
        },
    ))
}

/// `π(a|s) = Σ_{s'} h(a|s,s') v(s'|s)`. Rows with undefined `v` stay
/// undefined; reaching an undefined `h` row with positive mass is an error.
pub fn compose(v: &TabularVm, h: &TabularIdm) -> Result<TabularPolicy> {
    if v.n_states != h.n_states {
        return Err(Error::Parameter("VM and IDM disagree on the state count".into()));
    }
    let (ns, na) = (h.n_states, h.n_actions);
    let mut probs = vec![0.0; ns * na];
    let mut defined = vec![false; ns];
    for s in 0..ns {
        let Some(vrow) = v.row(s) else { continue };
        defined[s] = true;
        for (n, &w) in vrow.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let hrow = h.row(s, n).ok_or_else(|| {
                Error::Verification(format!("IDM undefined at ({s}, {n}) but the VM puts mass {w} there"))
            })?;
            for a in 0..na {
                probs[s * na + a] += w * hrow[a];
            }
        }
    }
    Ok(TabularPolicy {
        n_states: ns,
        n_actions: na,
        probs,
        defined,
    })
}

/// `KL(p ‖ q)` with `0 log(0/q) = 0`; `p > 0 = q` gives `+∞`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| if qi <= 0.0 { f64::INFINITY } else { pi * (pi / qi).ln() })
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Exact `H(a|s)` and `H(a|s,s')` under the policy's visitation.
pub fn conditional_entropies(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<(f64, f64)> {
    let vis = visitation(mdp, policy)?;
    let (h, _) = induced_idm_vm(mdp, policy)?;
    let ns = mdp.n_states;
    let pair = vis.pair(ns, mdp.n_actions);
    let h_pol = (0..ns).map(|s| vis.state[s] * entropy(policy.row(s))).sum();
    let h_idm = (0..ns * ns)
        .filter(|&k| pair[k] > 0.0)
        .map(|k| pair[k] * entropy(h.row(k / ns, k % ns).expect("defined where p(s,s') > 0")))
        .sum();
    Ok((h_pol, h_idm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlReport {
    /// `E_{p(s,s')} KL(h* ‖ ĥ)`
    pub lhs: f64,
    /// `E_{p(s)} KL(π* ‖ π̂_{v*,ĥ})`
    pub rhs_policy_term: f64,
    /// `E_{p(s,a)} KL(p(·|s,a) ‖ p_{v*,ĥ}(·|s,a))`
    pub rhs_dynamics_term: f64,
    pub inequality_holds: bool,
    pub equality_residual: f64,
}

impl KlReport {
    pub fn is_infinite(&self) -> bool {
        self.lhs.is_infinite()
    }
}

/// Evaluates both sides of the KL chain rule for `ĥ` against the IDM
/// induced by `expert`.
pub fn check_kl_decomposition(mdp: &TabularMdp, expert: &TabularPolicy, h_hat: &TabularIdm) -> Result<KlReport> {
    let vis = visitation(mdp, expert)?;
    let (h_star, v_star) = induced_idm_vm(mdp, expert)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if h_hat.n_states != ns || h_hat.n_actions != na {
        return Err(Error::Parameter("IDM does not match the MDP".into()));
    }
    let pair = vis.pair(ns, na);
    let mut lhs = 0.0;
    for s in 0..ns {
        for n in 0..ns {
            let w = pair[s * ns + n];
            if w <= 0.0 {
                continue;
            }
            let hs = h_star.row(s, n).expect("defined where p(s,s') > 0");
            let hh = h_hat
                .row(s, n)
                .ok_or_else(|| Error::Verification(format!("ĥ undefined at ({s}, {n}) where h* is defined")))?;
            lhs += w * kl(hs, hh);
        }
    }
    let pi_hat = compose(&v_star, h_hat)?;
    let mut policy_term = 0.0;
    let mut dynamics_term = 0.0;
    for s in 0..ns {
        if vis.state[s] <= 0.0 {
            continue;
        }
        policy_term += vis.state[s] * kl(expert.row(s), pi_hat.row(s));
        let vrow = v_star.row(s).expect("defined where p(s) > 0");
        for a in 0..na {
            let p_sa = vis.state[s] * expert.row(s)[a];
            if p_sa <= 0.0 {
                continue;
            }
            let target: Vec<f64> = (0..ns).map(|n| mdp.p(s, a, n)).collect();
            let denom = pi_hat.row(s)[a];
            let model: Vec<f64> = (0..ns)
                .map(|n| match h_hat.row(s, n) {
                    Some(hrow) if denom > 0.0 => vrow[n] * hrow[a] / denom,
                    _ => 0.0,
                })
                .collect();
            dynamics_term += p_sa * kl(&target, &model);
        }
    }
    let rhs = policy_term + dynamics_term;
    let equality_residual = if lhs.is_infinite() || rhs.is_infinite() {
        if lhs == rhs {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (lhs - rhs).abs()
    };
    Ok(KlReport {
        lhs,
        rhs_policy_term: policy_term,
        rhs_dynamics_term: dynamics_term,
        inequality_holds: lhs >= policy_term - 1e-12,
        equality_residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// Closed-form minimiser of the IDM-labeling population loss.
    pub labeling_policy: TabularPolicy,
    pub composed_policy: TabularPolicy,
    pub max_residual: f64,
}

/// Compares the population IDM-labeling optimum, computed from the labeled
/// joint `Σ_{s'} p(s,s') ĥ(a|s,s')`, against `compose(v*, ĥ)`.
pub fn check_equivalence(mdp: &TabularMdp, expert: &TabularPolicy, h_hat: &TabularIdm) -> Result<EquivalenceReport> {
    let vis = visitation(mdp, expert)?;
    let (_, v_star) = induced_idm_vm(mdp, expert)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let pair = vis.pair(ns, na);
    let mut probs = vec![0.0; ns * na];
    let mut defined = vec![false; ns];
    for s in 0..ns {
        let mut labeled = vec![0.0; na];
        for n in 0..ns {
            let w = pair[s * ns + n];
            if w <= 0.0 {
                continue;
            }
            let hrow = h_hat
                .row(s, n)
                .ok_or_else(|| Error::Verification(format!("ĥ undefined at ({s}, {n}) where data exists")))?;
            for a in 0..na {
                labeled[a] += w * hrow[a];
            }
        }
        let z: f64 = labeled.iter().sum();
        if z > 0.0 {
            defined[s] = true;
            for a in 0..na {
                probs[s * na + a] = labeled[a] / z;
            }
        }
    }
    let labeling_policy = TabularPolicy {
        n_states: ns,
        n_actions: na,
        probs,
        defined,
    };
    let composed_policy = compose(&v_star, h_hat)?;
    let max_residual = max_row_diff(&labeling_policy, &composed_policy);
    Ok(EquivalenceReport {
        labeling_policy,
        composed_policy,
        max_residual,
    })
}

/// Largest entrywise gap over rows defined in both tables.
pub fn max_row_diff(a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    (0..a.n_states)
        .filter(|&s| a.defined[s] && b.defined[s])
        .flat_map(|s| a.row(s).iter().zip(b.row(s)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub kl: KlReport,
    pub consistency_residual: f64,
    pub equivalence_residual: f64,
}

pub const KL_TOL: f64 = 1e-10;
pub const TABLE_TOL: f64 = 1e-12;

impl TrialRecord {
    pub fn passed(&self) -> bool {
        self.kl.equality_residual < KL_TOL
            && self.kl.inequality_holds
            && self.consistency_residual < TABLE_TOL
            && self.equivalence_residual < TABLE_TOL
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "trial={} states={} actions={} horizon={} lhs={:.17e} policy_term={:.17e} dynamics_term={:.17e} \
             kl_residual={:.3e} inequality={} consistency_residual={:.3e} equivalence_residual={:.3e} status={}",
            self.trial,
            self.n_states,
            self.n_actions,
            self.horizon,
            self.kl.lhs,
            self.kl.rhs_policy_term,
            self.kl.rhs_dynamics_term,
            self.kl.equality_residual,
            self.kl.inequality_holds,
            self.consistency_residual,
            self.equivalence_residual,
            if self.passed() { "pass" } else { "FAIL" }
        );
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSpec {
    pub trials: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
}

impl Default for TrialSpec {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            max_states: 6,
            max_actions: 3,
            max_horizon: 5,
        }
    }
}

/// One trial: random dense MDP, random expert, random `ĥ`.
pub fn run_trial(trial: usize, rng: &mut ChaCha8Rng, spec: &TrialSpec) -> Result<TrialRecord> {
    let ns = rng.random_range(2..=spec.max_states.max(2));
    let na = rng.random_range(2..=spec.max_actions.max(2));
    let horizon = rng.random_range(1..=spec.max_horizon.max(1));
    let mdp = TabularMdp::random_dense(rng, ns, na, horizon)?;
    let expert = TabularPolicy::random(rng, ns, na)?;
    let h_hat = TabularIdm::random(rng, ns, na)?;
    let kl = check_kl_decomposition(&mdp, &expert, &h_hat)?;
    let (h_star, v_star) = induced_idm_vm(&mdp, &expert)?;
    let consistency_residual = max_row_diff(&compose(&v_star, &h_star)?, &expert);
    let equivalence_residual = check_equivalence(&mdp, &expert, &h_hat)?.max_residual;
    Ok(TrialRecord {
        trial,
        n_states: ns,
        n_actions: na,
        horizon,
        kl,
        consistency_residual,
        equivalence_residual,
    })
}

pub fn run_trials(spec: &TrialSpec) -> Result<Vec<TrialRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.trials).map(|i| run_trial(i, &mut rng, spec)).collect()
}

/// One line per trial plus a summary line.
pub fn report_text(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    let failures = records.iter().filter(|r| !r.passed()).count();
    let worst_kl = records.iter().map(|r| r.kl.equality_residual).fold(0.0, f64::max);
    let worst_eq = records
        .iter()
        .map(|r| r.consistency_residual.max(r.equivalence_residual))
        .fold(0.0, f64::max);
    let _ = writeln!(
        out,
        "summary trials={} failures={} max_kl_residual={:.3e} max_table_residual={:.3e}",
        records.len(),
        failures,
        worst_kl,
        worst_eq
    );
    out
}
