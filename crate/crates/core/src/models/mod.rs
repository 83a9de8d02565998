//! Architecture catalog, policy/IDM models and the closed-form IDMs.

mod analytic;
mod network;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use analytic::{analytic_idm_img, analytic_idm_pos, motion_kernels};
pub use network::{Layer, Network, NetworkBuilder};

use crate::autodiff::{Checkpoint, ParamVars, Tape, Tensor, Var};
use crate::datasets::{State, StateFormat, Transition};
use crate::error::{Error, Result};
use crate::gridworld::{ImgState, N_ACTIONS};

pub const MLP_WIDTH: usize = 100;
pub const MLP_DEPTH: usize = 5;
pub const CNN_CHANNELS: usize = 128;
pub const CNN_DENSE: usize = 128;

/// Records per inference chunk; bounds im2col buffers on large sets.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Lc,
    Mlp5,
    Cnn1,
    Cnn5,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Lc => "LC",
            ArchKind::Mlp5 => "MLP5",
            ArchKind::Cnn1 => "CNN1",
            ArchKind::Cnn5 => "CNN5",
        }
    }

    pub fn format(self) -> StateFormat {
        match self {
            ArchKind::Lc | ArchKind::Mlp5 => StateFormat::Pos,
            ArchKind::Cnn1 | ArchKind::Cnn5 => StateFormat::Img,
        }
    }

    pub fn is_cnn(self) -> bool {
        self.format() == StateFormat::Img
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lc" => Ok(ArchKind::Lc),
            "mlp5" => Ok(ArchKind::Mlp5),
            "cnn1" => Ok(ArchKind::Cnn1),
            "cnn5" => Ok(ArchKind::Cnn5),
            _ => Err(Error::InvalidArch(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Policy,
    Idm,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Policy => "policy",
            Role::Idm => "idm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub role: Role,
    pub format: StateFormat,
    pub goal_conditioned: bool,
    /// `(height, width)` of image inputs. Required by CNN5, whose dense
    /// layers depend on it.
    pub image_size: Option<(usize, usize)>,
}

impl ArchSpec {
    pub fn new(kind: ArchKind, role: Role) -> Self {
        Self {
            kind,
            role,
            format: kind.format(),
            goal_conditioned: false,
            image_size: None,
        }
    }

    pub fn with_goal(mut self, goal_conditioned: bool) -> Self {
        self.goal_conditioned = goal_conditioned;
        self
    }

    pub fn with_image_size(mut self, height: usize, width: usize) -> Self {
        self.image_size = Some((height, width));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.format() != self.format {
            return Err(Error::InvalidArch(format!(
                "{} requires {} states, got {}",
                self.kind,
                self.kind.format().name(),
                self.format.name()
            )));
        }
        if self.goal_conditioned && self.format == StateFormat::Img {
            return Err(Error::InvalidArch(
                "image states already carry the goal channel; goal conditioning applies to pos states".into(),
            ));
        }
        if self.kind == ArchKind::Cnn5 {
            match self.image_size {
                Some((h, w)) if h >= 8 && w >= 8 => {}
                Some((h, w)) => {
                    return Err(Error::InvalidArch(format!(
                        "CNN5 needs images of at least 8x8, got {h}x{w}"
                    )))
                }
                None => return Err(Error::InvalidArch("CNN5 needs an image size".into())),
            }
        }
        Ok(())
    }

    /// Width of the flat input vector for pos-format models.
    pub fn input_dim(&self) -> usize {
        let per_state = 2;
        let states = match self.role {
            Role::Policy => 1,
            Role::Idm => 2,
        };
        per_state * states + if self.goal_conditioned { 2 } else { 0 }
    }

    /// Input channels for image models.
    pub fn input_channels(&self) -> usize {
        match self.role {
            Role::Policy => ImgState::CHANNELS,
            Role::Idm => 2 * ImgState::CHANNELS,
        }
    }

    pub fn default_lr(&self) -> f64 {
        if self.kind.is_cnn() {
            1e-4
        } else {
            1e-3
        }
    }

    fn write_meta(&self, ck: Checkpoint) -> Checkpoint {
        let ck = ck
            .with_meta("arch", self.kind.name())
            .with_meta("role", self.role.name())
            .with_meta("format", self.format.name())
            .with_meta("goal_conditioned", self.goal_conditioned.to_string());
        match self.image_size {
            Some((h, w)) => ck.with_meta("image_size", format!("{h}x{w}")),
            None => ck,
        }
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::InvalidArch(format!("checkpoint lacks `{k}`")))
        };
        let kind: ArchKind = get("arch")?.parse()?;
        let role = match get("role")? {
            "policy" => Role::Policy,
            "idm" => Role::Idm,
            r => return Err(Error::InvalidArch(format!("unknown role `{r}`"))),
        };
        let format = match get("format")? {
            "pos" => StateFormat::Pos,
            "img" => StateFormat::Img,
            f => return Err(Error::InvalidArch(format!("unknown format `{f}`"))),
        };
        let goal_conditioned = get("goal_conditioned")? == "true";
        let image_size = match ck.meta("image_size") {
            Some(s) => {
                let (h, w) = s
                    .split_once('x')
                    .ok_or_else(|| Error::InvalidArch(format!("bad image size `{s}`")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::InvalidArch(format!("bad image size `{s}`")))
                };
                Some((parse(h)?, parse(w)?))
            }
            None => None,
        };
        let spec = ArchSpec {
            kind,
            role,
            format,
            goal_conditioned,
            image_size,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.kind, self.role.name(), self.format.name())?;
        if self.goal_conditioned {
            f.write_str("-goal")?;
        }
        Ok(())
    }
}

/// Anything that yields an action distribution per transition record.
/// Policies read `s` (and the goal, if conditioned); IDMs read `(s, s')`.
pub trait ActionModel: Send + Sync {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>>;
}

impl<T: ActionModel + ?Sized> ActionModel for &T {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        (**self).action_probs(records)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    net: Network,
}

impl Model {
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let b = NetworkBuilder::new(seed);
        let net = match spec.kind {
            ArchKind::Lc => b.dense("fc", spec.input_dim(), N_ACTIONS, false).build(),
            ArchKind::Mlp5 => {
                let mut b = b;
                let mut width = spec.input_dim();
                for i in 0..MLP_DEPTH {
                    b = b.dense(&format!("hidden{i}"), width, MLP_WIDTH, true);
                    width = MLP_WIDTH;
                }
                b.dense("head", width, N_ACTIONS, false).build()
            }
            ArchKind::Cnn1 => b
                .conv3x3("conv", spec.input_channels(), N_ACTIONS, 0, false)
                .global_max()
                .build(),
            ArchKind::Cnn5 => {
                let (mut h, mut w) = spec.image_size.expect("validated");
                let mut b = b;
                let mut channels = spec.input_channels();
                for i in 0..3 {
                    b = b.conv3x3(&format!("conv{i}"), channels, CNN_CHANNELS, 1, true).maxpool2();
                    channels = CNN_CHANNELS;
                    h /= 2;
                    w /= 2;
                }
                b.flatten()
                    .dense("dense0", channels * h * w, CNN_DENSE, true)
                    .dense("dense1", CNN_DENSE, CNN_DENSE, true)
                    .dense("head", CNN_DENSE, N_ACTIONS, false)
                    .build()
            }
        };
        Ok(Self { spec, net })
    }

    pub(crate) fn from_network(spec: ArchSpec, net: Network) -> Self {
        Self { spec, net }
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.params().count()
    }

    /// Builds the batched input tensor for `records`.
    pub fn encode(&self, records: &[Transition]) -> Result<Tensor> {
        encode_inputs(&self.spec, records)
    }

    /// Records the forward pass on `tape`; returns `[B, 4]` logits.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        self.net.forward(tape, vars, x)
    }

    pub fn logits(&self, records: &[Transition]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in records.chunks(INFER_CHUNK) {
            parts.push(self.net.infer(self.encode(chunk)?)?);
        }
        Tensor::stack_batch(&parts)
    }

    pub fn predict(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        let logits = self.logits(records)?;
        Ok(logits.data().chunks(N_ACTIONS).map(softmax4).collect())
    }

    /// `log p(a_i | inputs_i)` per record.
    pub fn log_prob(&self, records: &[Transition], actions: &[usize]) -> Result<Vec<f64>> {
        if actions.len() != records.len() {
            return Err(Error::dim("log_prob", "one action per record required"));
        }
        let logits = self.logits(records)?;
        logits
            .data()
            .chunks(N_ACTIONS)
            .zip(actions)
            .map(|(row, &a)| {
                if a >= N_ACTIONS {
                    return Err(Error::Index {
                        label: a,
                        classes: N_ACTIONS,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                Ok(row[a] - lse)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.spec
            .write_meta(Checkpoint::new())
            .with_section("model", self.net.params().clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = ArchSpec::read_meta(ck)?;
        let params = ck
            .section("model")
            .ok_or_else(|| Error::InvalidArch("checkpoint lacks a `model` section".into()))?;
        let mut model = Model::build(spec, 0)?;
        model.net.load_params(params.clone())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl ActionModel for Model {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        self.predict(records)
    }
}

pub(crate) fn softmax4(row: &[f64]) -> [f64; N_ACTIONS] {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; N_ACTIONS];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn pos_of(s: &State) -> Result<[f64; 2]> {
    match s {
        State::Pos(p) => Ok([p.x as f64, p.y as f64]),
        State::Img(_) => Err(Error::Domain("model expects pos states, got an image".into())),
    }
}

fn img_of(s: &State) -> Result<&ImgState> {
    match s {
        State::Img(img) => Ok(img),
        State::Pos(_) => Err(Error::Domain("model expects image states, got a position".into())),
    }
}

/// Flat `[B, D]` inputs for pos models, `[B, C, H, W]` for image models.
pub fn encode_inputs(spec: &ArchSpec, records: &[Transition]) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Parameter("no records to encode".into()));
    }
    match spec.format {
        StateFormat::Pos => {
            let dim = spec.input_dim();
            let mut data = Vec::with_capacity(records.len() * dim);
            for t in records {
                data.extend(pos_of(&t.s)?);
                if spec.role == Role::Idm {
                    data.extend(pos_of(&t.s_next)?);
                }
                if spec.goal_conditioned {
                    let g = t
                        .goal
                        .ok_or_else(|| Error::Domain("goal-conditioned model given a record without goal".into()))?;
                    data.extend([g.x as f64, g.y as f64]);
                }
            }
            Tensor::new(vec![records.len(), dim], data)
        }
        StateFormat::Img => {
            let first = img_of(&records[0].s)?;
            let (h, w) = (first.height, first.width);
            if let Some(size) = spec.image_size {
                if size != (h, w) {
                    return Err(Error::Domain(format!(
                        "model built for {}x{} images, got {h}x{w}",
                        size.0, size.1
                    )));
                }
            }
            let channels = spec.input_channels();
            let mut data = Vec::with_capacity(records.len() * channels * h * w);
            for t in records {
                let s = img_of(&t.s)?;
                if (s.height, s.width) != (h, w) {
                    return Err(Error::Domain("mixed image sizes in one batch".into()));
                }
                data.extend_from_slice(&s.data);
                if spec.role == Role::Idm {
                    let n = img_of(&t.s_next)?;
                    if (n.height, n.width) != (h, w) {
                        return Err(Error::Domain("mixed image sizes in one batch".into()));
                    }
                    data.extend_from_slice(&n.data);
                }
            }
            Tensor::new(vec![records.len(), channels, h, w], data)
        }
    }
}
