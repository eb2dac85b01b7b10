//! Run hyperparameters and their flat `key = value` text form.
//!
//! Every key has a default; a config file only needs the keys it changes.
//! Unknown keys are rejected so that typos cannot silently fall back to a
//! default.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Comma-separated list of depths, e.g. `1,2,5`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthList(pub Vec<usize>);

impl FromStr for DepthList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err("empty depth list".into());
        }
        Ok(Self(v))
    }
}

impl fmt::Display for DepthList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Depth caps for joint training as `last_epoch:cap` pairs, e.g.
/// `8:5,16:10` means epochs 1–8 use n ≤ 5 and epochs 9–16 use n ≤ 10.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurriculumSteps(pub Vec<(usize, usize)>);

impl FromStr for CurriculumSteps {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, c) = part.split_once(':').ok_or_else(|| format!("{part:?}: expected epoch:cap"))?;
            let e = e.trim().parse::<usize>().map_err(|err| format!("{part:?}: {err}"))?;
            let c = c.trim().parse::<usize>().map_err(|err| format!("{part:?}: {err}"))?;
            steps.push((e, c));
        }
        if steps.is_empty() {
            return Err("empty curriculum".into());
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1) {
            return Err("curriculum epochs must increase and caps must not decrease".into());
        }
        Ok(Self(steps))
    }
}

impl CurriculumSteps {
    /// Depth cap for 1-based `epoch`; epochs past the last step keep its cap.
    pub fn cap(&self, epoch: usize) -> usize {
        self.0.iter().find(|&&(e, _)| epoch <= e).unwrap_or(self.0.last().expect("non-empty")).1
    }
}

impl fmt::Display for CurriculumSteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(e, c)| format!("{e}:{c}")).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! hyperparams {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct HyperParams {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for HyperParams {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl HyperParams {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| Error::Config {
                            line: 0,
                            detail: format!("{key}: {e}"),
                        })?;
                    } )*
                    _ => return Err(Error::Config { line: 0, detail: format!("unknown key {key:?}") }),
                }
                Ok(())
            }

            /// All keys, in declaration order, as `key = value` lines.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field), self.$field)); )*
                out
            }
        }
    };
}

hyperparams! {
    // Forgetting gate, tagger, consolidation and scheduler.
    gate_hidden: usize = 128,
    signature_dim: usize = 64,
    pool_window: usize = 4,
    conflict_threshold: f64 = 0.85,
    keep_threshold: f64 = 0.7,
    evict_threshold: f64 = 0.3,
    decay_rate: f64 = 0.01,
    entropy_kappa: f64 = 1.5,
    max_conflict_density: f64 = 0.4,
    fallback_interval: usize = 128,
    sleep_weight: f64 = 0.5,
    compress_weight: f64 = 0.1,
    align_weight: f64 = 0.3,
    bias_scale: f64 = 5.0,
    recency_weight: f64 = 2.0,
    gumbel_temp_start: f64 = 1.0,
    gumbel_temp_end: f64 = 0.1,
    learning_rate: f64 = 3e-4,
    batch_size: usize = 16,
    /// Floor on retention before taking its log for the attention bias.
    bias_eps: f64 = 1e-6,
    /// Stabilizer in the retention-weighted key average.
    consolidation_eps: f64 = 1e-6,
    /// Retention clamp used by the alignment cross-entropy.
    align_clamp: f64 = 1e-7,
    /// Number of most recent entries averaged into the gate's context summary.
    context_window: usize = 16,
    entropy_window: usize = 64,
    entropy_min_samples: usize = 8,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    weight_decay: f64 = 0.01,
    // Training schedule.
    stage0_epochs: usize = 10,
    stage1_epochs: usize = 5,
    stage2_epochs: usize = 30,
    baseline_epochs: usize = 45,
    episodes_per_epoch: usize = 1000,
    max_train_depth: usize = 30,
    curriculum: CurriculumSteps = CurriculumSteps(vec![(8, 5), (16, 10), (23, 15), (30, 30)]),
    /// Sample retention through the binary-concrete relaxation during joint
    /// training instead of using it deterministically.
    stage2_gumbel: bool = false,
    /// Fraction of joint-training episodes drawn from the multi-entity and
    /// mixed-relevance generators instead of pure interference streams.
    stage2_mix: f64 = 0.0,
    probe_episodes: usize = 50,
    probe_depth: usize = 5,
    // Baseline cache policies.
    window: usize = 64,
    h2o_heavy: usize = 32,
    h2o_recent: usize = 32,
    sinks: usize = 4,
    stream_window: usize = 60,
    // Evaluation.
    eval_per_depth: usize = 200,
    eval_depths: DepthList = DepthList(vec![1, 2, 5, 10, 15, 20, 30]),
}

impl HyperParams {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut hp = Self::default();
        hp.apply(text)?;
        Ok(hp)
    }

    /// Applies overrides on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                detail: format!("expected key = value, got {raw:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config { detail, .. } => Error::Config { line: i + 1, detail },
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(Error::Config { line: 0, detail: detail.to_string() });
        if self.keep_threshold <= self.evict_threshold {
            return bad("keep_threshold must exceed evict_threshold");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.stage2_mix) {
            return bad("stage2_mix must lie in [0, 1]");
        }
        if self.h2o_heavy == 0 || self.h2o_recent == 0 || self.stream_window == 0 || self.window == 0 {
            return bad("cache budgets must be positive");
        }
        if self.gumbel_temp_start <= 0.0 || self.gumbel_temp_end <= 0.0 {
            return bad("gumbel temperatures must be positive");
        }
        Ok(())
    }

    /// Total epochs consumed by the staged schedule.
    pub fn staged_epochs(&self) -> usize {
        self.stage0_epochs + self.stage1_epochs + self.stage2_epochs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_table() {
        let hp = HyperParams::default();
        assert_eq!(hp.gate_hidden, 128);
        assert_eq!(hp.signature_dim, 64);
        assert_eq!(hp.pool_window, 4);
        assert_eq!(hp.conflict_threshold, 0.85);
        assert_eq!((hp.keep_threshold, hp.evict_threshold), (0.7, 0.3));
        assert_eq!(hp.decay_rate, 0.01);
        assert_eq!(hp.entropy_kappa, 1.5);
        assert_eq!(hp.max_conflict_density, 0.4);
        assert_eq!(hp.fallback_interval, 128);
        assert_eq!((hp.sleep_weight, hp.compress_weight, hp.align_weight), (0.5, 0.1, 0.3));
        assert_eq!(hp.bias_scale, 5.0);
        assert_eq!(hp.recency_weight, 2.0);
        assert_eq!((hp.gumbel_temp_start, hp.gumbel_temp_end), (1.0, 0.1));
        assert_eq!(hp.learning_rate, 3e-4);
        assert_eq!(hp.batch_size, 16);
        assert_eq!(hp.staged_epochs(), 45);
        assert_eq!(hp.baseline_epochs, 45);
    }

    #[test]
    fn text_round_trip() {
        let hp = HyperParams { learning_rate: 1.5e-3, eval_depths: DepthList(vec![3, 4]), ..Default::default() };
        let back = HyperParams::parse(&hp.to_text()).unwrap();
        assert_eq!(back, hp);
        assert_eq!(hp.to_text().lines().count(), HyperParams::KEYS.len());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = HyperParams::parse("# c\nbatch_size = 4\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = HyperParams::parse("learning_rate = abc").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn curriculum_must_be_monotone() {
        assert!("8:5,4:10".parse::<CurriculumSteps>().is_err());
        assert!("8:10,16:5".parse::<CurriculumSteps>().is_err());
        assert_eq!("8:5,16:10".parse::<CurriculumSteps>().unwrap().0, vec![(8, 5), (16, 10)]);
    }
}
