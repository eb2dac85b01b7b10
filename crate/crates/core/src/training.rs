//! Objectives, optimizer and the staged training schedule.
//!
//! The gated model trains in three stages: wake-only warm start, gate
//! pre-training on generator labels with the encoder frozen, then joint
//! training on the full objective under a depth curriculum. Baselines train
//! wake-only under their own cache policy for the same number of epochs.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use sleepgate_tensor::{lit, Graph, Result as TResult, Scalar, Tensor, TensorError, Var};

use crate::checkpoint;
use crate::config::HyperParams;
use crate::data::{gen_mixed_relevance, gen_multi_entity, gen_pi_episode, Episode};
use crate::error::{io_err, Error, Result};
use crate::gate::{binary_noise, gumbel_temperature};
use crate::model::{forward, init_params, BaseVars, ModelConfig};
use crate::params::{Binding, Component, ParamStore};
use crate::policy::Method;
use crate::rng::{stream, Rng};
use crate::scheduler::{Relaxation, SleepVars};
use crate::system::{gate_agreement, gated_forward, layer0_cycle, predict, EvalMode};

/// Mean next-token NLL on the unbiased logits.
pub fn wake_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize], mask: &[bool]) -> TResult<Var> {
    g.cross_entropy(logits, targets, mask)
}

/// Mean NLL of the gold values at answer positions of the biased logits.
pub fn sleep_loss<S: Scalar>(g: &mut Graph<S>, biased: Var, targets: &[usize], mask: &[bool]) -> TResult<Var> {
    g.cross_entropy(biased, targets, mask)
}

/// Mean retention.
pub fn compress_loss<S: Scalar>(g: &mut Graph<S>, r: Var) -> TResult<Var> {
    g.mean(r)
}

/// `−mean[(1−σ) ln r + σ ln(1−r)]` with `r` clamped to `[c, 1−c]`.
pub fn align_loss<S: Scalar>(g: &mut Graph<S>, r: Var, flags: &[bool], clamp: f64) -> TResult<Var> {
    let shape = g.value(r).shape().to_vec();
    let m = flags.len();
    if m == 0 {
        return g.constant(Tensor::scalar(S::zero()));
    }
    let rc = g.clamp(r, lit(clamp), lit(1.0 - clamp))?;
    let ln_r = g.log(rc)?;
    let neg = g.scale(rc, -S::one())?;
    let one_minus = g.add_scalar(neg, S::one())?;
    let ln_1m = g.log(one_minus)?;
    let keep = Tensor::new(&shape, flags.iter().map(|&f| if f { S::zero() } else { S::one() }).collect())?;
    let drop = Tensor::new(&shape, flags.iter().map(|&f| if f { S::one() } else { S::zero() }).collect())?;
    let a = g.mul_const(ln_r, &keep)?;
    let b = g.mul_const(ln_1m, &drop)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, lit(-1.0 / m as f64))
}

/// `L_wake + λ_s L_sleep + λ_c L_compress + λ_g L_align`.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, parts: [Var; 4], hp: &HyperParams) -> TResult<Var> {
    let [w, s, c, a] = parts;
    let s = g.scale(s, lit(hp.sleep_weight))?;
    let c = g.scale(c, lit(hp.compress_weight))?;
    let a = g.scale(a, lit(hp.align_weight))?;
    let t = g.add(w, s)?;
    let t = g.add(t, c)?;
    g.add(t, a)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, hp: &HyperParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: hp.learning_rate,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            eps: hp.adam_eps,
            weight_decay: hp.weight_decay,
        }
    }

    /// Applies one update from `(store index, gradient)` pairs.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(usize, Vec<f32>)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, grad) in grads {
            let (m, v) = (&mut self.m[*i], &mut self.v[*i]);
            let p = params.tensor_mut(*i).data_mut();
            for j in 0..p.len() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                let upd = mh / (vh.sqrt() + self.eps) + self.weight_decay * p[j] as f64;
                p[j] = (p[j] as f64 - self.lr * upd) as f32;
            }
        }
    }
}

/// Running sums of one epoch's metrics.
#[derive(Clone, Debug, Default)]
struct EpochStats {
    episodes: usize,
    total: f64,
    wake: f64,
    sleep: f64,
    compress: f64,
    align: f64,
    label_bce: f64,
    gate_correct: usize,
    gate_total: usize,
}

impl EpochStats {
    fn mean(&self, x: f64) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            x / self.episodes as f64
        }
    }
}

struct EpisodeOutcome {
    loss: Var,
    parts: [f64; 4],
    /// Stage-1 cross-entropy against generator labels.
    label_bce: f64,
    gate: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Wake(Method),
    GateLabels,
    Joint,
}

impl Phase {
    fn include(self) -> &'static [Component] {
        match self {
            Phase::Wake(_) => &[Component::Base],
            Phase::GateLabels | Phase::Joint => &[Component::Base, Component::Tagger, Component::Gate],
        }
    }

    fn trainable(self) -> &'static [Component] {
        match self {
            Phase::Wake(_) => &[Component::Base],
            Phase::GateLabels => &[Component::Gate],
            Phase::Joint => &[Component::Base, Component::Tagger, Component::Gate],
        }
    }

    fn stage(self) -> u8 {
        match self {
            Phase::Wake(Method::SleepGate) => 0,
            Phase::Wake(_) => 9,
            Phase::GateLabels => 1,
            Phase::Joint => 2,
        }
    }
}

fn value_of<S: Scalar>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap()
}

fn episode_loss(
    g: &mut Graph<f32>,
    b: &Binding,
    cfg: &ModelConfig,
    hp: &HyperParams,
    phase: Phase,
    ep: &Episode,
    relax: Option<Relaxation<'_>>,
) -> Result<EpisodeOutcome> {
    let base = BaseVars::from_binding(b, cfg);
    match phase {
        Phase::Wake(method) => {
            let policy = method.policy(hp).unwrap_or(crate::policy::CachePolicy::Full);
            let out = forward(g, &base, cfg, &ep.tokens, &policy.plan(ep.len()), false)?;
            let (targets, mask) = ep.wake_targets();
            let loss = wake_loss(g, out.logits.expect("logits"), &targets, &mask)?;
            let w = value_of(g, loss);
            Ok(EpisodeOutcome { loss, parts: [w, 0.0, 0.0, 0.0], label_bce: 0.0, gate: (0, 0) })
        }
        Phase::GateLabels => {
            let sleep = SleepVars::from_binding(b);
            let (cycle, _) = layer0_cycle(g, &base, &sleep, cfg, hp, &ep.tokens)?;
            let labels = ep.forget_labels();
            let loss = align_loss(g, cycle.retention, &labels, hp.align_clamp)?;
            let r = g.value(cycle.retention).data();
            let correct = r.iter().zip(&labels).filter(|(&r, &f)| (r < 0.5) == f).count();
            let a = value_of(g, loss);
            Ok(EpisodeOutcome { loss, parts: [0.0; 4], label_bce: a, gate: (correct, labels.len()) })
        }
        Phase::Joint => {
            let sleep = SleepVars::from_binding(b);
            let out = gated_forward(g, &base, &sleep, cfg, hp, &ep.tokens, relax)?;
            let (targets, mask) = ep.wake_targets();
            let wake = wake_loss(g, out.plain.logits.expect("logits"), &targets, &mask)?;
            let (at, am) = ep.answer_targets();
            let sl = sleep_loss(g, out.biased.logits.expect("logits"), &at, &am)?;
            let comp = compress_loss(g, out.cycle.retention)?;
            let al = align_loss(g, out.cycle.retention, &out.cycle.flags, hp.align_clamp)?;
            let parts = [wake, sl, comp, al];
            let loss = total_loss(g, parts, hp)?;
            let labels = ep.forget_labels();
            let r = g.value(out.cycle.retention).data();
            let correct = r.iter().zip(&labels).filter(|(&r, &f)| (r < 0.5) == f).count();
            Ok(EpisodeOutcome { loss, parts: parts.map(|v| value_of(g, v)), label_bce: 0.0, gate: (correct, labels.len()) })
        }
    }
}

/// Training episode `index` of an epoch: PI by default, optionally mixed
/// with multi-entity and mixed-relevance streams.
fn training_episode(rng: &mut Rng, max_depth: usize, mix: f64) -> Result<Episode> {
    let depth = rng.random_range(1..=max_depth.max(1));
    if mix > 0.0 && rng.random::<f64>() < mix {
        if rng.random::<bool>() {
            let k = rng.random_range(2..=3);
            return gen_multi_entity(k, depth.min(10), rng);
        }
        let k = rng.random_range(1..=2);
        let extra = rng.random_range(1..=2);
        return gen_mixed_relevance(k, extra, depth.min(10), rng);
    }
    gen_pi_episode(depth, rng)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_checkpoint: PathBuf,
    pub probe_accuracy: Option<f64>,
    pub gate_accuracy: Option<f64>,
}

struct Trainer<'a> {
    cfg: &'a ModelConfig,
    hp: &'a HyperParams,
    opts: &'a TrainOptions,
    params: ParamStore<f32>,
    log: fs::File,
    global_epoch: usize,
    probe: Vec<Episode>,
    gate_dev: Vec<Episode>,
    last_probe: Option<f64>,
    last_gate: Option<f64>,
}

pub const RUN_LOG: &str = "run.log";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.sgc";

impl Trainer<'_> {
    fn run_phase(&mut self, phase: Phase, epochs: usize) -> Result<()> {
        let mut opt = AdamW::new(&self.params, self.hp);
        let temp_epochs = epochs;
        for epoch in 1..=epochs {
            let started = Instant::now();
            let max_depth = match phase {
                Phase::Joint => self.hp.curriculum.cap(epoch).min(self.hp.max_train_depth),
                _ => self.hp.max_train_depth,
            };
            let mix = if phase == Phase::Joint { self.hp.stage2_mix } else { 0.0 };
            let temperature = gumbel_temperature(self.hp, epoch - 1, temp_epochs);
            let mut stats = EpochStats::default();
            let n = self.hp.episodes_per_epoch;
            let stream_name = format!("train-{}-stage{}", self.opts.method, phase.stage());
            let mut index = 0;
            while index < n {
                let batch = self.hp.batch_size.min(n - index);
                let mut acc: Vec<Option<Vec<f32>>> = vec![None; self.params.len()];
                for _ in 0..batch {
                    let mut rng = stream(self.opts.seed, &stream_name, (epoch * 1_000_000 + index) as u64);
                    index += 1;
                    let ep = training_episode(&mut rng, max_depth, mix)?;
                    let noise: Vec<f64>;
                    let relax = if phase == Phase::Joint && self.hp.stage2_gumbel {
                        let mut nr = stream(self.opts.seed, "gumbel", (epoch * 1_000_000 + index) as u64);
                        noise = (0..ep.len()).map(|_| binary_noise(&mut nr)).collect();
                        Some(Relaxation { noise: &noise, temperature })
                    } else {
                        None
                    };
                    let mut g = Graph::<f32>::new();
                    let b = self.params.bind(&mut g, phase.include(), phase.trainable())?;
                    let step = episode_loss(&mut g, &b, self.cfg, self.hp, phase, &ep, relax)
                        .and_then(|o| g.backward(o.loss).map(|_| o).map_err(Error::from));
                    let out = match step {
                        Ok(o) => o,
                        Err(Error::Tensor(TensorError::NonFinite { op })) => {
                            return Err(self.diverged(phase, epoch, format!("non-finite value in {op}")));
                        }
                        Err(e) => return Err(e),
                    };
                    let total = value_of(&g, out.loss);
                    if !total.is_finite() {
                        return Err(self.diverged(phase, epoch, "non-finite loss".into()));
                    }
                    stats.episodes += 1;
                    stats.total += total;
                    stats.wake += out.parts[0];
                    stats.sleep += out.parts[1];
                    stats.compress += out.parts[2];
                    stats.align += out.parts[3];
                    stats.label_bce += out.label_bce;
                    stats.gate_correct += out.gate.0;
                    stats.gate_total += out.gate.1;
                    for (i, gr) in b.grads(&g) {
                        match &mut acc[i] {
                            Some(a) => a.iter_mut().zip(&gr).for_each(|(a, g)| *a += g),
                            slot => *slot = Some(gr),
                        }
                    }
                }
                let scale = 1.0 / batch as f32;
                let grads: Vec<(usize, Vec<f32>)> = acc
                    .into_iter()
                    .enumerate()
                    .filter_map(|(i, a)| a.map(|mut a| {
                        a.iter_mut().for_each(|x| *x *= scale);
                        (i, a)
                    }))
                    .collect();
                if grads.iter().any(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
                    return Err(self.diverged(phase, epoch, "non-finite gradient".into()));
                }
                opt.step(&mut self.params, &grads);
            }
            self.global_epoch += 1;
            self.end_epoch(phase, epoch, max_depth, &stats, started)?;
        }
        Ok(())
    }

    fn probe_mode(&self, phase: Phase) -> EvalMode {
        match phase {
            Phase::Wake(m) => EvalMode::for_method(m, self.hp).min_policy(),
            Phase::GateLabels | Phase::Joint => EvalMode::Gated,
        }
    }

    fn end_epoch(&mut self, phase: Phase, epoch: usize, max_depth: usize, s: &EpochStats, started: Instant) -> Result<()> {
        let mode = self.probe_mode(phase);
        let mut hits = 0;
        for ep in &self.probe {
            let pred = predict(&self.params, self.cfg, self.hp, mode, ep)?;
            hits += usize::from(pred[0] == ep.queries[0].gold);
        }
        let probe = hits as f64 / self.probe.len().max(1) as f64;
        self.last_probe = Some(probe);
        let gate = if matches!(phase, Phase::GateLabels | Phase::Joint) {
            let (mut c, mut t) = (0, 0);
            for ep in &self.gate_dev {
                let (ci, ti) = gate_agreement(&self.params, self.cfg, self.hp, ep)?;
                c += ci;
                t += ti;
            }
            let acc = c as f64 / t.max(1) as f64;
            self.last_gate = Some(acc);
            Some(acc)
        } else {
            None
        };
        let mut line = String::new();
        write!(
            line,
            "method={} stage={} epoch={} global_epoch={} episodes={} max_depth={} total={:.9} wake={:.9} sleep={:.9} compress={:.9} align={:.9}",
            self.opts.method,
            phase.stage(),
            epoch,
            self.global_epoch,
            s.episodes,
            max_depth,
            s.mean(s.total),
            s.mean(s.wake),
            s.mean(s.sleep),
            s.mean(s.compress),
            s.mean(s.align),
        )
        .unwrap();
        if phase == Phase::GateLabels {
            write!(line, " label_bce={:.9}", s.mean(s.label_bce)).unwrap();
        }
        if s.gate_total > 0 {
            write!(line, " train_gate_acc={:.6}", s.gate_correct as f64 / s.gate_total as f64).unwrap();
        }
        if let Some(a) = gate {
            write!(line, " gate_acc={a:.6}").unwrap();
        }
        write!(line, " probe_acc={probe:.4} seconds={:.1}", started.elapsed().as_secs_f64()).unwrap();
        writeln!(self.log, "{line}").map_err(io_err("writing run log"))?;
        if self.opts.verbose {
            eprintln!("{line}");
        }
        Ok(())
    }

    fn diverged(&self, phase: Phase, epoch: usize, detail: String) -> Error {
        let dump = self.opts.out_dir.join("diverged.sgc");
        let dump = checkpoint::save(&self.params, &dump).ok().map(|_| dump);
        Error::Diverged { stage: phase.stage(), epoch, detail, dump }
    }

    fn save(&self, name: &str) -> Result<PathBuf> {
        let path = self.opts.out_dir.join(name);
        checkpoint::save(&self.params, &path)?;
        Ok(path)
    }
}

impl EvalMode {
    /// Stage-0 probing of the gated model uses the plain full-cache pass.
    fn min_policy(self) -> Self {
        match self {
            EvalMode::Gated => EvalMode::Policy(crate::policy::CachePolicy::Full),
            p => p,
        }
    }
}

/// Fixed dev probe: `probe_episodes` interference episodes at `probe_depth`.
pub fn probe_set(hp: &HyperParams, seed: u64) -> Result<Vec<Episode>> {
    (0..hp.probe_episodes)
        .map(|i| gen_pi_episode(hp.probe_depth, &mut stream(seed, "probe", i as u64)))
        .collect()
}

/// Held-out episodes for gate label accuracy, depths spread over 1..=max.
pub fn gate_dev_set(hp: &HyperParams, seed: u64, count: usize) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, "gate-dev", i as u64);
            let d = rng.random_range(1..=hp.max_train_depth);
            gen_pi_episode(d, &mut rng)
        })
        .collect()
}

pub fn run_config_text(method: Method, seed: u64, hp: &HyperParams) -> String {
    format!("# method = {method}\n# seed = {seed}\n{}", hp.to_text())
}

/// Trains one method from scratch and writes checkpoints, the resolved
/// config and the run log into `opts.out_dir`.
pub fn train(cfg: &ModelConfig, hp: &HyperParams, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    hp.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(io_err(format!("creating {}", opts.out_dir.display())))?;
    fs::write(opts.out_dir.join(CONFIG_FILE), run_config_text(opts.method, opts.seed, hp))
        .map_err(io_err("writing config"))?;
    let log_path = opts.out_dir.join(RUN_LOG);
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(io_err(format!("opening {}", log_path.display())))?;
    let params = init_params(cfg, hp, &mut stream(opts.seed, "init", 0));
    let mut t = Trainer {
        cfg,
        hp,
        opts,
        params,
        log,
        global_epoch: 0,
        probe: probe_set(hp, opts.seed)?,
        gate_dev: gate_dev_set(hp, opts.seed, 100)?,
        last_probe: None,
        last_gate: None,
    };
    t.save("init.sgc")?;
    if opts.method == Method::SleepGate {
        t.run_phase(Phase::Wake(Method::SleepGate), hp.stage0_epochs)?;
        t.save("stage0.sgc")?;
        t.run_phase(Phase::GateLabels, hp.stage1_epochs)?;
        t.save("stage1.sgc")?;
        t.run_phase(Phase::Joint, hp.stage2_epochs)?;
        t.save("stage2.sgc")?;
    } else {
        t.run_phase(Phase::Wake(opts.method), hp.baseline_epochs)?;
    }
    let final_checkpoint = t.save(FINAL_CHECKPOINT)?;
    Ok(TrainSummary {
        epochs: t.global_epoch,
        final_checkpoint,
        probe_accuracy: t.last_probe,
        gate_accuracy: t.last_gate,
    })
}

/// One parsed run-log line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRecord {
    pub fields: Vec<(String, String)>,
}

impl LogRecord {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }
}

pub fn parse_run_log(text: &str) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec = LogRecord::default();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, detail: format!("expected key=value, got {tok:?}") })?;
            rec.fields.push((k.to_string(), v.to_string()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_run_log(dir: &Path) -> Result<Vec<LogRecord>> {
    let path = dir.join(RUN_LOG);
    let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    parse_run_log(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(g: &mut Graph<f64>, x: f64) -> Var {
        g.leaf(Tensor::scalar(x), true).unwrap()
    }

    #[test]
    fn total_of_unit_parts() {
        let mut g = Graph::<f64>::new();
        let parts = [1.0; 4].map(|x| scalar_of(&mut g, x));
        let t = total_loss(&mut g, parts, &HyperParams::default()).unwrap();
        assert!((g.value(t).item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn align_examples() {
        let mut g = Graph::<f64>::new();
        let r = g.leaf(Tensor::new(&[1, 1], vec![0.5]).unwrap(), true).unwrap();
        let l = align_loss(&mut g, r, &[true], 1e-7).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let r = g.leaf(Tensor::new(&[1, 1], vec![1.0]).unwrap(), true).unwrap();
        let l = align_loss(&mut g, r, &[true], 1e-7).unwrap();
        assert!((g.value(l).item() - 16.118).abs() < 1e-3);
        let l = align_loss(&mut g, r, &[false], 1e-7).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn compress_examples() {
        let mut g = Graph::<f64>::new();
        let r = g.leaf(Tensor::new(&[2, 1], vec![0.2, 0.8]).unwrap(), true).unwrap();
        let c = compress_loss(&mut g, r).unwrap();
        assert!((g.value(c).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(&[3, 1024]), true).unwrap();
        let w = wake_loss(&mut g, l, &[5, 6, 7], &[true; 3]).unwrap();
        assert!((g.value(w).item() - 1024f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn log_lines_parse() {
        let recs = parse_run_log("a=1 b=x\n\nc=2.5\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].num("c"), Some(2.5));
        assert!(parse_run_log("oops").is_err());
    }
}
