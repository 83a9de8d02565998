//! Transitions, labeled/unlabeled splits and IDM relabeling.
//!
//! Two construction protocols share these types. The maze protocol
//! enumerates every feasible state once (the exhaustive test set) and
//! subsamples it for training. The trajectory protocol pools expert
//! rollouts and labels a fraction of the pool. In both cases the unlabeled
//! set is the full pool with its actions removed.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{ground_truth_vm, sample_index, Action, ExpertPolicy, Grid, ImgState, PosState};
use crate::models::ActionModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateFormat {
    Pos,
    Img,
}

impl StateFormat {
    pub fn name(self) -> &'static str {
        match self {
            StateFormat::Pos => "pos",
            StateFormat::Img => "img",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum State {
    Pos(PosState),
    Img(ImgState),
}

impl State {
    pub fn format(&self) -> StateFormat {
        match self {
            State::Pos(_) => StateFormat::Pos,
            State::Img(_) => StateFormat::Img,
        }
    }

    /// Position of the player, read from the image when needed.
    pub fn position(&self) -> Option<PosState> {
        match self {
            State::Pos(p) => Some(*p),
            State::Img(img) => img.player(),
        }
    }
}

/// One `(s, a, s', g)` record. `a` is `None` in unlabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: State,
    pub a: Option<Action>,
    pub s_next: State,
    pub goal: Option<PosState>,
}

impl Transition {
    pub fn labeled(s: State, a: Action, s_next: State) -> Self {
        Self {
            s,
            a: Some(a),
            s_next,
            goal: None,
        }
    }

    pub fn with_goal(mut self, goal: PosState) -> Self {
        self.goal = Some(goal);
        self
    }

    /// Copy with the action removed.
    pub fn stripped(&self) -> Self {
        Self {
            a: None,
            ..self.clone()
        }
    }

    pub fn format(&self) -> StateFormat {
        self.s.format()
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub environment: String,
    pub expert: String,
}

impl Provenance {
    pub fn new(environment: impl Into<String>, expert: impl Into<String>) -> Self {
        Self {
            environment: environment.into(),
            expert: expert.into(),
        }
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.environment, self.expert)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Transition>,
    pub unlabeled: Vec<Transition>,
    pub split_fraction: f64,
    pub seed: u64,
    pub provenance: Provenance,
}

/// `{(s, π*(s), v*(s))}` over every feasible non-goal state, in grid order.
pub fn build_test_set(grid: &Grid, expert: &ExpertPolicy) -> Result<Vec<Transition>> {
    let vm = ground_truth_vm(grid, expert)?;
    let mut out = Vec::with_capacity(vm.len());
    for s in grid.decision_states() {
        let (Some(a), Some(n)) = (expert.action(grid, s), vm.next(s)) else {
            continue;
        };
        out.push(Transition::labeled(State::Pos(s), a, State::Pos(n)));
    }
    Ok(out)
}

/// Re-renders position records as images of `grid`.
pub fn to_img(records: &[Transition], grid: &Grid) -> Result<Vec<Transition>> {
    let render = |s: &State| -> Result<State> {
        match s {
            State::Pos(p) => Ok(State::Img(grid.render_img(*p)?)),
            State::Img(_) => Ok(s.clone()),
        }
    };
    records
        .iter()
        .map(|t| {
            Ok(Transition {
                s: render(&t.s)?,
                a: t.a,
                s_next: render(&t.s_next)?,
                goal: t.goal,
            })
        })
        .collect()
}

/// `⌈fraction · n⌉`, forgiving float noise like `0.1 · 30 = 3.0000000000000004`.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let count = (raw - 1e-9).ceil().max(1.0) as usize;
    count.min(n)
}

/// Labels `⌈fraction · N⌉` records drawn without replacement; the unlabeled
/// side is the whole pool with actions stripped.
pub fn sample_train_split(full: &[Transition], fraction: f64, seed: u64, provenance: Provenance) -> Result<DatasetSplit> {
    if full.is_empty() {
        return Err(Error::Parameter("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("split fraction {fraction} outside (0, 1]")));
    }
    if full.iter().any(|t| t.a.is_none()) {
        return Err(Error::Parameter("source pool must be fully labeled".into()));
    }
    let n = labeled_count(full.len(), fraction);
    let mut idx: Vec<usize> = (0..full.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    Ok(DatasetSplit {
        labeled: idx.iter().map(|&i| full[i].clone()).collect(),
        unlabeled: full.iter().map(Transition::stripped).collect(),
        split_fraction: fraction,
        seed,
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelMode {
    Argmax,
    #[default]
    Sample,
}

/// Attaches an action drawn from `idm(·|s, s')` to every record.
pub fn idm_relabel<R: Rng>(unlabeled: &[Transition], idm: &dyn ActionModel, mode: RelabelMode, rng: &mut R) -> Result<Vec<Transition>> {
    let probs = idm.action_probs(unlabeled)?;
    unlabeled
        .iter()
        .zip(probs)
        .map(|(t, p)| {
            let i = match mode {
                RelabelMode::Argmax => crate::gridworld::argmax(&p),
                RelabelMode::Sample => sample_index(&p, rng)
                    .ok_or_else(|| Error::Domain("IDM returned an empty distribution".into()))?,
            };
            Ok(Transition {
                a: Action::from_index(i),
                ..t.clone()
            })
        })
        .collect()
}

pub const DATASET_MAGIC: &str = "# idmlab-dataset v1";

fn encode_state(s: &State, out: &mut String) {
    match s {
        State::Pos(p) => {
            let _ = write!(out, "{},{}", p.x, p.y);
        }
        State::Img(img) => {
            let _ = write!(out, "img:{}x{}:", img.height, img.width);
            out.extend(img.data.iter().map(|&v| if v > 0.5 { '1' } else { '0' }));
        }
    }
}

fn decode_state(field: &str, line: usize) -> Result<State> {
    let err = |d: &str| Error::Parse {
        line,
        detail: d.to_string(),
    };
    if let Some(rest) = field.strip_prefix("img:") {
        let (dims, bits) = rest.split_once(':').ok_or_else(|| err("bad image field"))?;
        let (h, w) = dims.split_once('x').ok_or_else(|| err("bad image dims"))?;
        let height: usize = h.parse().map_err(|_| err("bad image height"))?;
        let width: usize = w.parse().map_err(|_| err("bad image width"))?;
        if bits.len() != ImgState::CHANNELS * height * width {
            return Err(err("image bit count does not match dims"));
        }
        let data = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                _ => Err(err("image bits must be 0/1")),
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(State::Img(ImgState { height, width, data }));
    }
    Ok(State::Pos(decode_pos(field, line)?))
}

fn decode_pos(field: &str, line: usize) -> Result<PosState> {
    let err = || Error::Parse {
        line,
        detail: format!("bad position `{field}`"),
    };
    let (x, y) = field.split_once(',').ok_or_else(err)?;
    Ok(PosState::new(x.parse().map_err(|_| err())?, y.parse().map_err(|_| err())?))
}

/// Columnar text: a header, then `state \t action|- \t next \t goal|-`.
pub fn write_dataset(records: &[Transition], provenance: &Provenance) -> String {
    let format = records.first().map(Transition::format).unwrap_or(StateFormat::Pos);
    let mut out = format!("{DATASET_MAGIC} format={} provenance={}\n", format.name(), provenance.id());
    for t in records {
        encode_state(&t.s, &mut out);
        out.push('\t');
        match t.a {
            Some(a) => {
                let _ = write!(out, "{}", a.index());
            }
            None => out.push('-'),
        }
        out.push('\t');
        encode_state(&t.s_next, &mut out);
        out.push('\t');
        match t.goal {
            Some(g) => {
                let _ = write!(out, "{},{}", g.x, g.y);
            }
            None => out.push('-'),
        }
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<(Provenance, Vec<Transition>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        detail: "empty dataset".into(),
    })?;
    let rest = header.strip_prefix(DATASET_MAGIC).ok_or_else(|| Error::Parse {
        line: 1,
        detail: "missing dataset header".into(),
    })?;
    let mut format = None;
    let mut provenance = Provenance::new("unknown", "unknown");
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("format", "pos")) => format = Some(StateFormat::Pos),
            Some(("format", "img")) => format = Some(StateFormat::Img),
            Some(("provenance", p)) => {
                let (env, expert) = p.split_once('/').unwrap_or((p, ""));
                provenance = Provenance::new(env, expert);
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| Error::Parse {
        line: 1,
        detail: "header lacks format".into(),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: ln,
                detail: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let a = match fields[1] {
            "-" => None,
            v => Some(
                v.parse::<usize>()
                    .ok()
                    .and_then(Action::from_index)
                    .ok_or_else(|| Error::Parse {
                        line: ln,
                        detail: format!("bad action `{v}`"),
                    })?,
            ),
        };
        let goal = match fields[3] {
            "-" => None,
            g => Some(decode_pos(g, ln)?),
        };
        let t = Transition {
            s: decode_state(fields[0], ln)?,
            a,
            s_next: decode_state(fields[2], ln)?,
            goal,
        };
        if t.s.format() != format || t.s_next.format() != format {
            return Err(Error::Parse {
                line: ln,
                detail: "record format differs from header".into(),
            });
        }
        records.push(t);
    }
    Ok((provenance, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_maze, solve_expert};

    fn maze_pool() -> Vec<Transition> {
        let g = generate_maze(10, 3).unwrap();
        build_test_set(&g, &solve_expert(&g)).unwrap()
    }

    #[test]
    fn labeled_count_ceiling() {
        assert_eq!(labeled_count(988, 0.25), 247);
        assert_eq!(labeled_count(988, 0.1), 99);
        assert_eq!(labeled_count(30, 0.1), 3);
        assert_eq!(labeled_count(988, 1.0), 988);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let pool = maze_pool();
        let split = sample_train_split(&pool, 1.0, 9, Provenance::new("m", "e")).unwrap();
        assert_eq!(split.labeled, pool);
        assert!(split.unlabeled.iter().all(|t| t.a.is_none()));
    }

    #[test]
    fn splits_are_reproducible_and_without_replacement() {
        let pool = maze_pool();
        let a = sample_train_split(&pool, 0.5, 4, Provenance::new("m", "e")).unwrap();
        let b = sample_train_split(&pool, 0.5, 4, Provenance::new("m", "e")).unwrap();
        assert_eq!(a, b);
        for (i, t) in a.labeled.iter().enumerate() {
            assert!(pool.contains(t));
            assert!(!a.labeled[i + 1..].contains(t));
        }
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let pool = maze_pool();
        let p = Provenance::new("m", "e");
        assert!(matches!(sample_train_split(&[], 0.5, 0, p.clone()), Err(Error::Parameter(_))));
        assert!(matches!(sample_train_split(&pool, 0.0, 0, p.clone()), Err(Error::Parameter(_))));
        assert!(matches!(sample_train_split(&pool, 1.5, 0, p), Err(Error::Parameter(_))));
    }

    #[test]
    fn text_round_trip_pos_and_img() {
        let g = generate_maze(10, 3).unwrap();
        let pool = maze_pool();
        let prov = Provenance::new("maze10_s3", "shortest_path");
        let mut mixed = pool.clone();
        mixed[0] = mixed[0].stripped().with_goal(PosState::new(1, 1));
        let (p2, back) = read_dataset(&write_dataset(&mixed, &prov)).unwrap();
        assert_eq!(p2, prov);
        assert_eq!(back, mixed);
        let imgs = to_img(&pool[..3], &g).unwrap();
        let (_, back) = read_dataset(&write_dataset(&imgs, &prov)).unwrap();
        assert_eq!(back, imgs);
    }

    #[test]
    fn stripped_records_have_unlabeled_text_form() {
        let pool = maze_pool();
        let text = write_dataset(&[pool[0].stripped()], &Provenance::new("m", "e"));
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row.split('\t').nth(1), Some("-"));
    }
}
