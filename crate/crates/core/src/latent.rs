//! Latent-action pretraining with a vector-quantised bottleneck, and the
//! LAPO / LAPO+ pipelines built on it.
//!
//! Stage 1 trains a latent IDM `h̃(z|s,s')` and a latent FDM `f̃(s'|s,q(z))`
//! jointly on reconstruction. LAPO then fits a latent policy `π̃(s) ≈ z` and
//! decodes its output with a small head `φ(a|z)`. LAPO+ decodes the latent
//! IDM instead and labels the unlabeled data with `φ∘h̃`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Checkpoint, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::datasets::{idm_relabel, RelabelMode, Transition};
use crate::error::{Error, Result};
use crate::gridworld::{ImgState, N_ACTIONS};
use crate::learning::{fit_classifier, BatchRule, TrainConfig, TrainReport};
use crate::models::{encode_inputs, softmax4, ActionModel, ArchKind, ArchSpec, Network, NetworkBuilder, Role};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub commitment_coeff: f64,
    /// Gradient steps for (pretraining, decoding, policy learning).
    pub stage_steps: [usize; 3],
    /// Conv channels of every encoder block.
    pub channels: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            codebook_size: 16,
            commitment_coeff: 0.25,
            stage_steps: [2500, 500, 3000],
            channels: 16,
            hidden: 64,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.codebook_size == 0 || self.channels == 0 || self.hidden == 0 || self.batch == 0 {
            return Err(Error::Parameter("latent sizes must be positive".into()));
        }
        if self.stage_steps.contains(&0) {
            return Err(Error::Parameter("stage step counts must be positive".into()));
        }
        if !(self.commitment_coeff >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Parameter("commitment must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Three conv-ReLU-maxpool blocks, flattened.
fn encoder(b: NetworkBuilder, in_channels: usize, channels: usize) -> NetworkBuilder {
    let mut b = b;
    let mut c = in_channels;
    for i in 0..3 {
        b = b.conv3x3(&format!("conv{i}"), c, channels, 1, true).maxpool2();
        c = channels;
    }
    b.flatten()
}

fn encoder_width(channels: usize, (h, w): (usize, usize)) -> usize {
    channels * (h / 8) * (w / 8)
}

fn head(b: NetworkBuilder, inputs: usize, hidden: usize, outputs: usize) -> NetworkBuilder {
    b.dense("dense0", inputs, hidden, true).dense("head", hidden, outputs, false)
}

/// Nearest codebook row per latent (Euclidean, ties to the lower index).
pub fn nearest_codes(z: &[f64], codebook: &Tensor) -> Vec<usize> {
    let d = codebook.shape()[1];
    z.chunks(d)
        .map(|zi| {
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.shape()[0] {
                let e = codebook.row(k);
                let dist: f64 = zi.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Replaces every latent row by its nearest code.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<Tensor> {
    codebook.select_rows(&nearest_codes(z.data(), codebook))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Fresh,
    Pretrained,
}

/// Snapshot bits of every parameter group; used to prove stage isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub lidm: Vec<u64>,
    pub lfdm: Vec<u64>,
    pub codebook: Vec<u64>,
    pub latent_policy: Option<Vec<u64>>,
    pub decode_head: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    config: LatentConfig,
    image_size: (usize, usize),
    lidm: Network,
    lfdm_enc: Network,
    lfdm_dec: Network,
    codebook: ParamStore,
    latent_policy: Option<Network>,
    decode_head: Option<Network>,
    stage: Stage,
}

struct Batches {
    rng: ChaCha8Rng,
    n: usize,
    size: usize,
}

impl Batches {
    fn next(&mut self) -> Vec<usize> {
        if self.size >= self.n {
            return (0..self.n).collect();
        }
        let all: Vec<usize> = (0..self.n).collect();
        all.choose_multiple(&mut self.rng, self.size).copied().collect()
    }
}

fn step(store: &mut ParamStore, adam: &mut AdamState, tape: &Tape, loss: Var, vars: &ParamVars) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.absorb(&grads, vars)?;
    adam_step(store, adam)
}

fn pair_spec() -> ArchSpec {
    ArchSpec::new(ArchKind::Cnn1, Role::Idm)
}

fn state_spec() -> ArchSpec {
    ArchSpec::new(ArchKind::Cnn1, Role::Policy)
}

fn image_size_of(records: &[Transition]) -> Result<(usize, usize)> {
    match records.first().map(|t| &t.s) {
        Some(crate::datasets::State::Img(img)) => Ok((img.height, img.width)),
        Some(_) => Err(Error::Unsupported("latent pretraining reconstructs pixels; pos states are not supported".into())),
        None => Err(Error::Parameter("no transitions".into())),
    }
}

fn next_targets(records: &[Transition]) -> Result<Tensor> {
    let spec = state_spec();
    let shifted: Vec<Transition> = records
        .iter()
        .map(|t| Transition {
            s: t.s_next.clone(),
            ..t.clone()
        })
        .collect();
    let x = encode_inputs(&spec, &shifted)?;
    let n = x.shape()[0];
    let width = x.numel() / n;
    x.reshaped(vec![n, width])
}

impl LatentStack {
    pub fn new(config: LatentConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let (h, w) = image_size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidArch(format!("latent encoders need at least 8x8 images, got {h}x{w}")));
        }
        let lidm = head(
            NetworkBuilder::new(config.seed ^ 0x11d)
                .conv3x3("conv0", 2 * ImgState::CHANNELS, config.channels, 0, true)
                .global_max(),
            config.channels,
            config.hidden,
            config.latent_dim,
        )
        .build();
        // fully convolutional with the latent broadcast over the grid: a
        // local receptive field cannot recover the expert's move from `s`
        let lfdm_enc = NetworkBuilder::new(config.seed ^ 0xfd1)
            .conv3x3("conv0", ImgState::CHANNELS + config.latent_dim, config.channels, 1, true)
            .build();
        let lfdm_dec = NetworkBuilder::new(config.seed ^ 0xfd2)
            .conv3x3("conv0", config.channels, ImgState::CHANNELS, 1, false)
            .flatten()
            .build();
        let mut codebook = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0de);
        codebook.insert_uniform("codebook", &[config.codebook_size, config.latent_dim], config.latent_dim, &mut rng);
        Ok(Self {
            config,
            image_size,
            lidm,
            lfdm_enc,
            lfdm_dec,
            codebook,
            latent_policy: None,
            decode_head: None,
            stage: Stage::Fresh,
        })
    }

    pub fn config(&self) -> &LatentConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn codebook(&self) -> &Tensor {
        self.codebook.tensor(0)
    }

    pub fn lidm(&self) -> &Network {
        &self.lidm
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            lidm: self.lidm.params().snapshot(),
            lfdm: [self.lfdm_enc.params().snapshot(), self.lfdm_dec.params().snapshot()].concat(),
            codebook: self.codebook.snapshot(),
            latent_policy: self.latent_policy.as_ref().map(|n| n.params().snapshot()),
            decode_head: self.decode_head.as_ref().map(|n| n.params().snapshot()),
        }
    }

    fn require_pretrained(&self, what: &str) -> Result<()> {
        if self.stage < Stage::Pretrained {
            return Err(Error::StageOrder(format!("{what} needs stage-1 pretraining first")));
        }
        Ok(())
    }

    fn check_images(&self, records: &[Transition]) -> Result<()> {
        let size = image_size_of(records)?;
        if size != self.image_size {
            return Err(Error::Domain(format!(
                "stack built for {:?} images, got {size:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Pre-quantisation latents `h̃(s, s')`.
    pub fn latents(&self, records: &[Transition]) -> Result<Tensor> {
        self.check_images(records)?;
        self.lidm.infer(encode_inputs(&pair_spec(), records)?)
    }

    /// Reconstruction MSE of `s'` through the quantised bottleneck.
    pub fn reconstruction_loss(&self, records: &[Transition]) -> Result<f64> {
        self.check_images(records)?;
        let pairs = encode_inputs(&pair_spec(), records)?;
        let states = encode_inputs(&state_spec(), records)?;
        let target = next_targets(records)?;
        let z = self.lidm.infer(pairs)?;
        let q = quantize(&z, self.codebook())?;
        let mut tape = Tape::new();
        let enc_vars = self.lfdm_enc.params().register_frozen(&mut tape);
        let dec_vars = self.lfdm_dec.params().register_frozen(&mut tape);
        let s = tape.constant(states);
        let qv = tape.constant(q);
        let pred = self.predict_next(&mut tape, &enc_vars, &dec_vars, s, qv)?;
        let t = tape.constant(target);
        let loss = tape.mse_loss(pred, t)?;
        Ok(tape.value(loss).data()[0])
    }

    /// `f̃(s, z)` as flattened `[B, C·H·W]` pixels.
    fn predict_next(&self, tape: &mut Tape, enc: &ParamVars, dec: &ParamVars, s: Var, z: Var) -> Result<Var> {
        let (h, w) = self.image_size;
        let d = self.config.latent_dim;
        let area = h * w;
        let mut spread = vec![0.0; d * area * d];
        for j in 0..d {
            for p in 0..area {
                spread[(j * area + p) * d + j] = 1.0;
            }
        }
        let spread = tape.constant(Tensor::new(vec![d * area, d], spread)?);
        let planes = tape.linear(z, spread, None)?;
        let flat = tape.flatten(s)?;
        let joined = tape.concat_cols(flat, planes)?;
        let batch = tape.value(joined).shape()[0];
        let x = tape.reshape(joined, vec![batch, ImgState::CHANNELS + d, h, w])?;
        let f = self.lfdm_enc.forward(tape, enc, x)?;
        self.lfdm_dec.forward(tape, dec, f)
    }

    /// Code index chosen for each transition.
    pub fn code_usage(&self, records: &[Transition]) -> Result<Vec<usize>> {
        Ok(nearest_codes(self.latents(records)?.data(), self.codebook()))
    }

    fn batches(&self, n: usize, salt: u64) -> Batches {
        Batches {
            rng: ChaCha8Rng::seed_from_u64(self.config.seed ^ salt),
            n,
            size: self.config.batch.min(n),
        }
    }

    /// k-means over the current LIDM latents (farthest-point start, Lloyd
    /// refinement); surplus codes copy a random latent.
    fn seed_codebook(&mut self, pairs: &Tensor) -> Result<()> {
        let z = self.lidm.infer(pairs.clone())?;
        let n = z.shape()[0];
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut centres: Vec<Vec<f64>> = vec![z.row(0).to_vec()];
        while centres.len() < k.min(n) {
            let (far, gap) = (0..n)
                .map(|i| (i, centres.iter().map(|c| dist(z.row(i), c)).fold(f64::INFINITY, f64::min)))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if gap <= 0.0 {
                break;
            }
            centres.push(z.row(far).to_vec());
        }
        for _ in 0..20 {
            let mut sums = vec![vec![0.0; d]; centres.len()];
            let mut counts = vec![0usize; centres.len()];
            for i in 0..n {
                let c = (0..centres.len())
                    .min_by(|&a, &b| dist(z.row(i), &centres[a]).total_cmp(&dist(z.row(i), &centres[b])))
                    .unwrap_or(0);
                counts[c] += 1;
                sums[c].iter_mut().zip(z.row(i)).for_each(|(s, v)| *s += v);
            }
            for (c, centre) in centres.iter_mut().enumerate() {
                if counts[c] > 0 {
                    *centre = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xc0de_5eed);
        while centres.len() < k {
            centres.push(z.row(rng.random_range(0..n)).to_vec());
        }
        let cb = self.codebook.tensor_mut(0);
        cb.data_mut().copy_from_slice(&centres.concat());
        Ok(())
    }
}

/// Stage 1: joint LIDM/LFDM reconstruction with a VQ bottleneck,
/// straight-through gradients and a commitment term.
pub fn lapo_stage1(unlabeled: &[Transition], config: LatentConfig) -> Result<(LatentStack, StageReport)> {
    let size = image_size_of(unlabeled)?;
    let mut stack = LatentStack::new(config, size)?;
    stack.check_images(unlabeled)?;
    let pairs = encode_inputs(&pair_spec(), unlabeled)?;
    let states = encode_inputs(&state_spec(), unlabeled)?;
    let targets = next_targets(unlabeled)?;
    let initial_loss = stack.reconstruction_loss(unlabeled)?;
    // the bottleneck opens only after a short unquantised warm-up; codes
    // seeded from untrained latents all coincide
    let warmup = config.stage_steps[0] / 5;
    let lr = config.lr;
    // squared error summed over pixels, so the few pixels a move changes
    // are not drowned out by the VQ terms
    let pixels = targets.shape()[1] as f64;
    let mut a_lidm = AdamState::new(stack.lidm.params(), lr);
    let mut a_enc = AdamState::new(stack.lfdm_enc.params(), lr);
    let mut a_dec = AdamState::new(stack.lfdm_dec.params(), lr);
    let mut a_cb = AdamState::new(&stack.codebook, lr);
    let mut batches = stack.batches(unlabeled.len(), 0x57a9e1);
    let mut losses = Vec::with_capacity(config.stage_steps[0]);
    for step_i in 0..config.stage_steps[0] {
        let quantised = step_i >= warmup;
        if step_i == warmup {
            stack.seed_codebook(&pairs)?;
        }
        let idx = batches.next();
        let mut tape = Tape::new();
        let v_lidm = stack.lidm.params().register(&mut tape);
        let v_enc = stack.lfdm_enc.params().register(&mut tape);
        let v_dec = stack.lfdm_dec.params().register(&mut tape);
        let v_cb = stack.codebook.register(&mut tape);
        let x = tape.constant(pairs.select_rows(&idx)?);
        let z = stack.lidm.forward(&mut tape, &v_lidm, x)?;
        let codes = nearest_codes(tape.value(z).data(), stack.codebook.tensor(0));
        let q = tape.gather_rows(v_cb.get(0), &codes)?;
        let zq = if quantised { tape.straight_through(z, q)? } else { z };
        let s = tape.constant(states.select_rows(&idx)?);
        let pred = stack.predict_next(&mut tape, &v_enc, &v_dec, s, zq)?;
        let target = tape.constant(targets.select_rows(&idx)?);
        let rec = tape.mse_loss(pred, target)?;
        let rec_sum = tape.scale(rec, pixels)?;
        let z_sg = tape.detach(z);
        let q_sg = tape.detach(q);
        let codebook_loss = tape.mse_loss(z_sg, q)?;
        let commit = tape.mse_loss(z, q_sg)?;
        let commit = tape.scale(commit, config.commitment_coeff)?;
        let loss = if quantised {
            let l = tape.add(rec_sum, codebook_loss)?;
            tape.add(l, commit)?
        } else {
            rec_sum
        };
        losses.push(tape.value(rec).data()[0]);
        let grads = tape.backward(loss)?;
        stack.lidm.params_mut().absorb(&grads, &v_lidm)?;
        stack.lfdm_enc.params_mut().absorb(&grads, &v_enc)?;
        stack.lfdm_dec.params_mut().absorb(&grads, &v_dec)?;
        stack.codebook.absorb(&grads, &v_cb)?;
        adam_step(stack.lidm.params_mut(), &mut a_lidm)?;
        adam_step(stack.lfdm_enc.params_mut(), &mut a_enc)?;
        adam_step(stack.lfdm_dec.params_mut(), &mut a_dec)?;
        adam_step(&mut stack.codebook, &mut a_cb)?;
    }
    stack.stage = Stage::Pretrained;
    let final_loss = stack.reconstruction_loss(unlabeled)?;
    Ok((
        stack,
        StageReport {
            losses,
            initial_loss,
            final_loss,
        },
    ))
}

/// LAPO stage 2: `min (1/N) Σ ‖π̃(s_i) − h̃(s_i, s'_i)‖²` over `π̃` only,
/// regressing pre-quantised latents.
pub fn lapo_stage2_policy(stack: &mut LatentStack, unlabeled: &[Transition]) -> Result<StageReport> {
    stack.require_pretrained("latent policy training")?;
    stack.check_images(unlabeled)?;
    let cfg = stack.config;
    let targets = stack.latents(unlabeled)?;
    let states = encode_inputs(&state_spec(), unlabeled)?;
    let enc = encoder_width(cfg.channels, stack.image_size);
    let mut policy = head(
        encoder(NetworkBuilder::new(cfg.seed ^ 0x9011), ImgState::CHANNELS, cfg.channels),
        enc,
        cfg.hidden,
        cfg.latent_dim,
    )
    .build();
    let eval = |net: &Network| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = net.params().register_frozen(&mut tape);
        let x = tape.constant(states.clone());
        let y = net.forward(&mut tape, &vars, x)?;
        let t = tape.constant(targets.clone());
        let l = tape.mse_loss(y, t)?;
        Ok(tape.value(l).data()[0])
    };
    let initial_loss = eval(&policy)?;
    let mut adam = AdamState::new(policy.params(), cfg.lr);
    let mut batches = stack.batches(unlabeled.len(), 0x57a9e2);
    let mut losses = Vec::with_capacity(cfg.stage_steps[2]);
    for _ in 0..cfg.stage_steps[2] {
        let idx = batches.next();
        let mut tape = Tape::new();
        let vars = policy.params().register(&mut tape);
        let x = tape.constant(states.select_rows(&idx)?);
        let y = policy.forward(&mut tape, &vars, x)?;
        let t = tape.constant(targets.select_rows(&idx)?);
        let loss = tape.mse_loss(y, t)?;
        losses.push(tape.value(loss).data()[0]);
        step(policy.params_mut(), &mut adam, &tape, loss, &vars)?;
    }
    let final_loss = eval(&policy)?;
    stack.latent_policy = Some(policy);
    Ok(StageReport {
        losses,
        initial_loss,
        final_loss,
    })
}

/// Variance of the pre-quantised LIDM latents, summed over dimensions and
/// divided by the latent width (the MSE of predicting the mean).
pub fn latent_variance(z: &Tensor) -> f64 {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| z.data()[i * d + j]).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (z.data()[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

fn decode_config(cfg: &LatentConfig, n: usize) -> TrainConfig {
    // one "epoch" per step: each epoch draws ceil(n / batch) batches
    let per_epoch = n.div_ceil(cfg.batch.min(n)).max(1);
    TrainConfig {
        lr: cfg.lr,
        batch_rule: if cfg.batch >= n { BatchRule::Full } else { BatchRule::Min32 },
        max_epochs: cfg.stage_steps[1].div_ceil(per_epoch).max(1),
        early_stop_loss: 0.0,
        seed: cfg.seed ^ 0xdec0,
        eval_every: 0,
    }
}

fn fresh_head(cfg: &LatentConfig) -> Network {
    head(NetworkBuilder::new(cfg.seed ^ 0x4ead), cfg.latent_dim, cfg.hidden, N_ACTIONS).build()
}

fn labels(records: &[Transition]) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Err(Error::Parameter("labeled dataset is empty".into()));
    }
    records
        .iter()
        .map(|t| {
            t.a.map(|a| a.index())
                .ok_or_else(|| Error::Parameter("decoding needs labeled transitions".into()))
        })
        .collect()
}

/// LAPO stage 3: trains `φ(a | π̃(s))` on `D_L`; `φ` is the only update.
pub fn lapo_stage3_decode_policy(stack: &mut LatentStack, labeled: &[Transition]) -> Result<(LapoPolicy, TrainReport)> {
    let latent_policy = stack
        .latent_policy
        .clone()
        .ok_or_else(|| Error::StageOrder("LAPO decoding needs a trained latent policy".into()))?;
    stack.check_images(labeled)?;
    let y = labels(labeled)?;
    let z = latent_policy.infer(encode_inputs(&state_spec(), labeled)?)?;
    let mut phi = fresh_head(&stack.config);
    let report = fit_classifier(&mut phi, &z, &y, &decode_config(&stack.config, labeled.len()), None)?;
    stack.decode_head = Some(phi.clone());
    Ok((
        LapoPolicy {
            image_size: stack.image_size,
            latent_policy,
            head: phi,
        },
        report,
    ))
}

/// LAPO+ stage 2: trains `φ(a | h̃(s, s'))` on `D_L` from pre-quantised
/// latents; `φ` is the only update.
pub fn lapo_plus_stage2_decode_idm(stack: &mut LatentStack, labeled: &[Transition]) -> Result<(LatentIdm, TrainReport)> {
    stack.require_pretrained("IDM decoding")?;
    let y = labels(labeled)?;
    let z = stack.latents(labeled)?;
    let mut phi = fresh_head(&stack.config);
    let report = fit_classifier(&mut phi, &z, &y, &decode_config(&stack.config, labeled.len()), None)?;
    stack.decode_head = Some(phi.clone());
    Ok((
        LatentIdm {
            image_size: stack.image_size,
            lidm: stack.lidm.clone(),
            head: phi,
        },
        report,
    ))
}

/// LAPO+ stage 3: labels `D_U` with `φ∘h̃` and clones the result into an
/// image policy with the encoder architecture of the latent policy.
pub fn lapo_plus_stage3_label(idm: &LatentIdm, unlabeled: &[Transition], config: &LatentConfig, mode: RelabelMode) -> Result<(EncoderPolicy, TrainReport)> {
    if unlabeled.is_empty() {
        return Err(Error::Parameter("unlabeled dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1abe_1000);
    let relabeled = idm_relabel(unlabeled, idm, mode, &mut rng)?;
    let y = labels(&relabeled)?;
    let x = encode_inputs(&state_spec(), &relabeled)?;
    let enc = encoder_width(config.channels, idm.image_size);
    let mut net = head(
        encoder(NetworkBuilder::new(config.seed ^ 0xbc), ImgState::CHANNELS, config.channels),
        enc,
        config.hidden,
        N_ACTIONS,
    )
    .build();
    let n = relabeled.len();
    let per_epoch = n.div_ceil(config.batch.min(n)).max(1);
    let train = TrainConfig {
        lr: config.lr,
        batch_rule: if config.batch >= n { BatchRule::Full } else { BatchRule::Min32 },
        max_epochs: config.stage_steps[2].div_ceil(per_epoch).max(1),
        early_stop_loss: 0.0,
        seed: config.seed ^ 0xbc,
        eval_every: 0,
    };
    let report = fit_classifier(&mut net, &x, &y, &train, None)?;
    Ok((
        EncoderPolicy {
            image_size: idm.image_size,
            net,
        },
        report,
    ))
}

fn probs_from(net: &Network, z: Tensor) -> Result<Vec<[f64; N_ACTIONS]>> {
    Ok(net.infer(z)?.data().chunks(N_ACTIONS).map(softmax4).collect())
}

/// `φ ∘ π̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct LapoPolicy {
    image_size: (usize, usize),
    latent_policy: Network,
    head: Network,
}

impl ActionModel for LapoPolicy {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        let spec = state_spec().with_image_size(self.image_size.0, self.image_size.1);
        let z = self.latent_policy.infer(encode_inputs(&spec, records)?)?;
        probs_from(&self.head, z)
    }
}

/// `φ ∘ h̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentIdm {
    image_size: (usize, usize),
    lidm: Network,
    head: Network,
}

impl ActionModel for LatentIdm {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        let spec = pair_spec().with_image_size(self.image_size.0, self.image_size.1);
        let z = self.lidm.infer(encode_inputs(&spec, records)?)?;
        probs_from(&self.head, z)
    }
}

/// Image policy trained by BC on relabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPolicy {
    image_size: (usize, usize),
    net: Network,
}

impl ActionModel for EncoderPolicy {
    fn action_probs(&self, records: &[Transition]) -> Result<Vec<[f64; N_ACTIONS]>> {
        let spec = state_spec().with_image_size(self.image_size.0, self.image_size.1);
        let logits = self.net.infer(encode_inputs(&spec, records)?)?;
        Ok(logits.data().chunks(N_ACTIONS).map(softmax4).collect())
    }
}

impl LatentStack {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new()
            .with_meta("kind", "latent-stack")
            .with_meta("latent_dim", c.latent_dim.to_string())
            .with_meta("codebook_size", c.codebook_size.to_string())
            .with_meta("commitment_coeff", format!("{:?}", c.commitment_coeff))
            .with_meta(
                "stage_steps",
                format!("{},{},{}", c.stage_steps[0], c.stage_steps[1], c.stage_steps[2]),
            )
            .with_meta("channels", c.channels.to_string())
            .with_meta("hidden", c.hidden.to_string())
            .with_meta("lr", format!("{:?}", c.lr))
            .with_meta("batch", c.batch.to_string())
            .with_meta("seed", c.seed.to_string())
            .with_meta("image_size", format!("{}x{}", self.image_size.0, self.image_size.1))
            .with_meta("stage", if self.stage == Stage::Pretrained { "pretrained" } else { "fresh" })
            .with_section("lidm", self.lidm.params().clone())
            .with_section("lfdm_encoder", self.lfdm_enc.params().clone())
            .with_section("lfdm_decoder", self.lfdm_dec.params().clone())
            .with_section("codebook", self.codebook.clone());
        if let Some(p) = &self.latent_policy {
            ck = ck.with_section("latent_policy", p.params().clone());
        }
        if let Some(p) = &self.decode_head {
            ck = ck.with_section("decode_head", p.params().clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::InvalidArch(format!("latent checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::InvalidArch(format!("bad `{k}`")))
        };
        let real = |k: &str| -> Result<f64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::InvalidArch(format!("bad `{k}`")))
        };
        let steps: Vec<usize> = meta("stage_steps")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::InvalidArch("bad `stage_steps`".into())))
            .collect::<Result<_>>()?;
        let steps: [usize; 3] = steps
            .try_into()
            .map_err(|_| Error::InvalidArch("`stage_steps` needs three entries".into()))?;
        let (h, w) = meta("image_size")?
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| Error::InvalidArch("bad `image_size`".into()))?;
        let config = LatentConfig {
            latent_dim: num("latent_dim")?,
            codebook_size: num("codebook_size")?,
            commitment_coeff: real("commitment_coeff")?,
            stage_steps: steps,
            channels: num("channels")?,
            hidden: num("hidden")?,
            lr: real("lr")?,
            batch: num("batch")?,
            seed: meta("seed")?
                .parse()
                .map_err(|_| Error::InvalidArch("bad `seed`".into()))?,
        };
        let mut stack = LatentStack::new(config, (h, w))?;
        let section = |name: &str| {
            ck.section(name)
                .cloned()
                .ok_or_else(|| Error::InvalidArch(format!("latent checkpoint lacks section `{name}`")))
        };
        stack.lidm.load_params(section("lidm")?)?;
        stack.lfdm_enc.load_params(section("lfdm_encoder")?)?;
        stack.lfdm_dec.load_params(section("lfdm_decoder")?)?;
        let cb = section("codebook")?;
        if cb.len() != 1 || cb.tensor(0).shape() != [config.codebook_size, config.latent_dim] {
            return Err(Error::InvalidArch("codebook section has the wrong shape".into()));
        }
        stack.codebook = cb;
        if let Some(p) = ck.section("latent_policy") {
            let enc = encoder_width(config.channels, (h, w));
            let mut net = head(
                encoder(NetworkBuilder::new(0), ImgState::CHANNELS, config.channels),
                enc,
                config.hidden,
                config.latent_dim,
            )
            .build();
            net.load_params(p.clone())?;
            stack.latent_policy = Some(net);
        }
        if let Some(p) = ck.section("decode_head") {
            let mut net = fresh_head(&config);
            net.load_params(p.clone())?;
            stack.decode_head = Some(net);
        }
        stack.stage = if meta("stage")? == "pretrained" {
            Stage::Pretrained
        } else {
            Stage::Fresh
        };
        Ok(stack)
    }
}
