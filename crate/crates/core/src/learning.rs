//! BC, IDM learning, VM-IDM composition and IDM labeling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Tensor};
use crate::datasets::{idm_relabel, RelabelMode, State, StateFormat, Transition};
use crate::error::{Error, Result};
use crate::gridworld::{sample_index, Action, ExpertPolicy, Grid, IdmTable, PosState, N_ACTIONS};
use crate::models::{ActionModel, ArchKind, ArchSpec, Model, Network, Role};

pub const DEFAULT_MAX_EPOCHS: usize = 2000;
/// The linear classifier converges slowly on raw coordinates.
pub const LC_MAX_EPOCHS: usize = 30_000;
pub const DEFAULT_EARLY_STOP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchRule {
    /// `min(32, |D|)`
    Min32,
    /// `|D|`
    Full,
    /// `min(512, |D|)`
    Min512,
}

impl BatchRule {
    pub fn size(self, n: usize) -> usize {
        match self {
            BatchRule::Min32 => n.min(32),
            BatchRule::Full => n,
            BatchRule::Min512 => n.min(512),
        }
        .max(1)
    }

    pub fn for_arch(spec: &ArchSpec) -> Self {
        if spec.kind.is_cnn() {
            BatchRule::Min32
        } else {
            BatchRule::Full
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_rule: BatchRule,
    pub max_epochs: usize,
    pub early_stop_loss: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn for_arch(spec: &ArchSpec, seed: u64) -> Self {
        Self {
            lr: spec.default_lr(),
            batch_rule: BatchRule::for_arch(spec),
            max_epochs: if spec.kind == ArchKind::Lc { LC_MAX_EPOCHS } else { DEFAULT_MAX_EPOCHS },
            early_stop_loss: DEFAULT_EARLY_STOP,
            seed,
            eval_every: 0,
        }
    }

    pub fn with_epochs(mut self, max_epochs: usize) -> Self {
        self.max_epochs = max_epochs;
        self
    }

    pub fn with_batch(mut self, rule: BatchRule) -> Self {
        self.batch_rule = rule;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Parameter("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub history: Vec<EpochRecord>,
    pub best_eval: Option<f64>,
    pub final_eval: Option<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub report: TrainReport,
}

pub type EvalFn<'a> = &'a mut dyn FnMut(&Model) -> Result<f64>;

/// Mini-batch cross-entropy training of any classifier network.
pub fn fit_classifier(
    net: &mut Network,
    inputs: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    mut on_eval: Option<&mut dyn FnMut(&Network, usize) -> Result<f64>>,
) -> Result<TrainReport> {
    config.validate()?;
    let n = inputs.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Parameter(format!("{} labels for {n} inputs", labels.len())));
    }
    let batch = config.batch_rule.size(n);
    let mut adam = AdamState::new(net.params(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let (mut best, mut last_eval) = (None::<f64>, None);
    let mut final_loss = f64::INFINITY;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let x = inputs.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = net.params().register(&mut tape);
            let xv = tape.constant(x);
            let logits = net.forward(&mut tape, &vars, xv)?;
            let loss = tape.cross_entropy_loss(logits, &y)?;
            total += tape.value(loss).data()[0] * idx.len() as f64;
            let grads = tape.backward(loss)?;
            net.params_mut().absorb(&grads, &vars)?;
            adam_step(net.params_mut(), &mut adam)?;
        }
        final_loss = total / n as f64;
        epochs_run = epoch;
        let done = final_loss < config.early_stop_loss || epoch == config.max_epochs;
        let eval_now = config.eval_every > 0 && epoch % config.eval_every == 0;
        let mut eval = None;
        if eval_now || done {
            if let Some(f) = on_eval.as_mut() {
                let v = f(net, epoch)?;
                best = Some(best.map_or(v, |b| b.max(v)));
                last_eval = Some(v);
                eval = Some(v);
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss: final_loss,
            eval,
        });
        if done {
            break;
        }
    }
    Ok(TrainReport {
        epochs_run,
        final_loss,
        history,
        best_eval: best,
        final_eval: last_eval,
    })
}

fn labels_of(records: &[Transition]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|t| {
            t.a.map(Action::index)
                .ok_or_else(|| Error::Parameter("training records must carry actions".into()))
        })
        .collect()
}

fn train_role(records: &[Transition], spec: ArchSpec, role: Role, config: &TrainConfig, eval: Option<EvalFn<'_>>) -> Result<Trained> {
    if spec.role != role {
        return Err(Error::InvalidArch(format!("expected a {} spec, got {spec}", role.name())));
    }
    if records.is_empty() {
        return Err(Error::Parameter("labeled dataset is empty".into()));
    }
    let labels = labels_of(records)?;
    let mut model = Model::build(spec, config.seed)?;
    let inputs = model.encode(records)?;
    let report = match eval {
        Some(f) => {
            let mut wrapped = |net: &Network, _epoch: usize| f(&Model::from_network(spec, net.clone()));
            fit_classifier(model.network_mut(), &inputs, &labels, config, Some(&mut wrapped))?
        }
        None => fit_classifier(model.network_mut(), &inputs, &labels, config, None)?,
    };
    Ok(Trained { model, report })
}

/// Behaviour cloning: `min -1/N Σ log π(a_i | s_i)`.
pub fn train_bc(labeled: &[Transition], spec: ArchSpec, config: &TrainConfig, eval: Option<EvalFn<'_>>) -> Result<Trained> {
    train_role(labeled, spec, Role::Policy, config, eval)
}

/// IDM learning: `min -1/N Σ log h(a_i | s_i, s'_i)`.
pub fn train_idm(labeled: &[Transition], spec: ArchSpec, config: &TrainConfig, eval: Option<EvalFn<'_>>) -> Result<Trained> {
    train_role(labeled, spec, Role::Idm, config, eval)
}

/// A next-state model `v(s' | s)`.
pub trait VideoModel: Send + Sync {
    /// Support of `v(·|s)` with probabilities, for the record's state and goal.
    fn next_states(&self, record: &Transition) -> Result<Vec<(State, f64)>>;
}

impl<T: VideoModel + ?Sized> VideoModel for &T {
    fn next_states(&self, record: &Transition) -> Result<Vec<(State, f64)>> {
        (**self).next_states(record)
    }
}

/// The experts of one maze layout, one per goal cell.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    experts: BTreeMap<PosState, (Grid, ExpertPolicy)>,
    default_goal: PosState,
    format: StateFormat,
}

impl ExpertSet {
    pub fn single(grid: Grid, expert: ExpertPolicy, format: StateFormat) -> Self {
        let goal = grid.goal();
        Self {
            experts: BTreeMap::from([(goal, (grid, expert))]),
            default_goal: goal,
            format,
        }
    }

    /// Shortest-path experts for every goal in `goals`.
    pub fn multi_goal(grid: &Grid, goals: &[PosState], format: StateFormat) -> Result<Self> {
        let first = *goals
            .first()
            .ok_or_else(|| Error::Parameter("at least one goal required".into()))?;
        let mut experts = BTreeMap::new();
        for &g in goals {
            let gg = grid.with_goal(g)?;
            let e = crate::gridworld::solve_expert(&gg);
            experts.insert(g, (gg, e));
        }
        Ok(Self {
            experts,
            default_goal: first,
            format,
        })
    }

    pub fn format(&self) -> StateFormat {
        self.format
    }

    pub fn goals(&self) -> impl Iterator<Item = PosState> + '_ {
        self.experts.keys().copied()
    }

    pub fn get(&self, goal: Option<PosState>) -> Result<&(Grid, ExpertPolicy)> {
        let g = goal.unwrap_or(self.default_goal);
        self.experts
            .get(&g)
            .ok_or_else(|| Error::Domain(format!("no expert for goal {g}")))
    }

    pub fn render(&self, grid: &Grid, p: PosState) -> Result<State> {
        Ok(match self.format {
            StateFormat::Pos => State::Pos(p),
            StateFormat::Img => State::Img(grid.render_img(p)?),
        })
    }

    fn position(record: &Transition) -> Result<PosState> {
        record
            .s
            .position()
            .ok_or_else(|| Error::Domain("state has no player".into()))
    }
}

/// `v*(s'|s) = Σ_a π*(a|s) 1[f(s,a) = s']`.
#[derive(Clone, Debug)]
pub struct ExpertVideoModel(pub ExpertSet);

impl VideoModel for ExpertVideoModel {
    fn next_states(&self, record: &Transition) -> Result<Vec<(State, f64)>> {
        let (grid, expert) = self.0.get(record.goal)?;
        let s = ExpertSet::position(record)?;
        let pi = expert
            .distribution(grid, s)
            .ok_or_else(|| Error::Domain(format!("video model undefined at {s}")))?;
        let mut out: Vec<(PosState, f64)> = Vec::new();
        for a in Action::ALL {
            let p = pi[a.index()];
            if p <= 0.0 {
                continue;
            }
            let n = grid.step(s, a)?;
            match out.iter_mut().find(|(q, _)| *q == n) {
                Some(e) => e.1 += p,
                None => out.push((n, p)),
            }
        }
        out.into_iter()
            .map(|(n, p)| Ok((self.0.render(grid, n)?, p)))
            .collect()
    }
}

/// `π*` as an [`ActionModel`].
#[derive(Clone, Debug)]
pub struct ExpertModel(pub ExpertSet);

impl ActionModel for ExpertModel {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        records
            .iter()
            .map(|r| {
                let (grid, expert) = self.0.get(r.goal)?;
                let s = ExpertSet::position(r)?;
                expert
                    .distribution(grid, s)
                    .ok_or_else(|| Error::Domain(format!("expert undefined at {s}")))
            })
            .collect()
    }
}

impl ActionModel for IdmTable {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        records
            .iter()
            .map(|r| {
                let (Some(s), Some(n)) = (r.s.position(), r.s_next.position()) else {
                    return Err(Error::Domain("IDM table needs located states".into()));
                };
                self.get(s, n)
                    .ok_or_else(|| Error::Domain(format!("pair ({s}, {n}) has zero probability")))
            })
            .collect()
    }
}

/// `π̂(a|s) = Σ_{s'} ĥ(a|s,s') v(s'|s)`, sampled ancestrally by [`act`].
pub struct ComposedPolicy<V, H> {
    pub vm: V,
    pub idm: H,
}

pub fn compose_vm_idm<V: VideoModel, H: ActionModel>(vm: V, idm: H) -> ComposedPolicy<V, H> {
    ComposedPolicy { vm, idm }
}

impl<V: VideoModel, H: ActionModel> ComposedPolicy<V, H> {
    fn queries(&self, records: &[Transition]) -> Result<(Vec<Transition>, Vec<(usize, f64)>)> {
        let mut queries = Vec::new();
        let mut owners = Vec::new();
        for (i, r) in records.iter().enumerate() {
            for (n, p) in self.vm.next_states(r)? {
                if n.format() != r.s.format() {
                    return Err(Error::Domain("video model output format differs from the IDM's".into()));
                }
                queries.push(Transition {
                    s: r.s.clone(),
                    a: None,
                    s_next: n,
                    goal: r.goal,
                });
                owners.push((i, p));
            }
        }
        Ok((queries, owners))
    }

    /// Ancestral sample: `s' ~ v(·|s)`, then `a ~ ĥ(·|s, s')`.
    pub fn act<R: Rng>(&self, record: &Transition, rng: &mut R) -> Result<Action> {
        let next = self.vm.next_states(record)?;
        let weights: Vec<f64> = next.iter().map(|(_, p)| *p).collect();
        let k = sample_index(&weights, rng).ok_or_else(|| Error::Domain("empty video model support".into()))?;
        let query = Transition {
            s: record.s.clone(),
            a: None,
            s_next: next[k].0.clone(),
            goal: record.goal,
        };
        let p = self.idm.action_probs(std::slice::from_ref(&query))?[0];
        sample_index(&p, rng)
            .and_then(Action::from_index)
            .ok_or_else(|| Error::Domain("IDM returned an empty distribution".into()))
    }
}

impl<V: VideoModel, H: ActionModel> ActionModel for ComposedPolicy<V, H> {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        let (queries, owners) = self.queries(records)?;
        let mut out = vec![[0.0; N_ACTIONS]; records.len()];
        if queries.is_empty() {
            return Ok(out);
        }
        let h = self.idm.action_probs(&queries)?;
        for ((i, w), p) in owners.into_iter().zip(h) {
            for a in 0..N_ACTIONS {
                out[i][a] += w * p[a];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelingConfig {
    pub idm: TrainConfig,
    pub policy: TrainConfig,
    pub relabel: RelabelMode,
}

pub struct LabelingResult {
    pub idm: Trained,
    pub policy: Trained,
    pub relabeled: Vec<Transition>,
}

/// Trains `ĥ` on `D_L`, labels `D_U` with samples from it, then runs BC on
/// the relabeled set.
pub fn train_idm_labeling(
    labeled: &[Transition],
    unlabeled: &[Transition],
    idm_spec: ArchSpec,
    policy_spec: ArchSpec,
    config: &LabelingConfig,
) -> Result<LabelingResult> {
    if unlabeled.is_empty() {
        return Err(Error::Parameter("unlabeled dataset is empty".into()));
    }
    let idm = train_idm(labeled, idm_spec, &config.idm, None)?;
    let (policy, relabeled) = label_and_clone(unlabeled, &idm.model, policy_spec, &config.policy, config.relabel)?;
    Ok(LabelingResult { idm, policy, relabeled })
}

/// BC on `D_U` labeled by a fixed IDM (oracle substitution for the first stage).
pub fn label_and_clone(unlabeled: &[Transition], idm: &dyn ActionModel, policy_spec: ArchSpec, config: &TrainConfig, mode: RelabelMode) -> Result<(Trained, Vec<Transition>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1abe_1000);
    let relabeled = idm_relabel(unlabeled, idm, mode, &mut rng)?;
    Ok((train_bc(&relabeled, policy_spec, config, None)?, relabeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchKind;

    #[test]
    fn batch_rules() {
        assert_eq!(BatchRule::Min32.size(10), 10);
        assert_eq!(BatchRule::Min32.size(100), 32);
        assert_eq!(BatchRule::Full.size(100), 100);
        assert_eq!(BatchRule::Min512.size(988), 512);
    }

    #[test]
    fn single_record_is_memorised() {
        let r = Transition::labeled(State::Pos(PosState::new(2, 3)), Action::Up, State::Pos(PosState::new(2, 4)));
        let spec = ArchSpec::new(ArchKind::Lc, Role::Policy);
        let cfg = TrainConfig::for_arch(&spec, 1).with_epochs(20_000);
        let t = train_bc(&[r], spec, &cfg, None).unwrap();
        assert!(t.report.final_loss < DEFAULT_EARLY_STOP);
        assert!(t.report.epochs_run < 20_000);
    }

    #[test]
    fn role_and_labels_checked() {
        let r = Transition::labeled(State::Pos(PosState::new(2, 3)), Action::Up, State::Pos(PosState::new(2, 4)));
        let idm = ArchSpec::new(ArchKind::Lc, Role::Idm);
        let cfg = TrainConfig::for_arch(&idm, 1);
        assert!(matches!(train_bc(&[r.clone()], idm, &cfg, None), Err(Error::InvalidArch(_))));
        assert!(matches!(train_idm(&[], idm, &cfg, None), Err(Error::Parameter(_))));
        assert!(matches!(train_idm(&[r.stripped()], idm, &cfg, None), Err(Error::Parameter(_))));
    }
}
