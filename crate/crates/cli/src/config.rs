//! Hyperparameter resolution: flags override the config file, which
//! overrides the named preset.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use mnmt_core::model::ModelConfig;
use mnmt_core::trainer::{Stage, TrainPlan};

/// Optional `[model]` and `[plan]` tables of a TOML config file.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    pub model: Option<toml::Table>,
    pub plan: Option<toml::Table>,
}

impl ConfigFile {
    pub fn read(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let mut take = |key: &str| -> Result<Option<toml::Table>> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::Table(t)) => Ok(Some(t)),
                Some(_) => bail!("[{key}] must be a table"),
            }
        };
        let model = take("model")?;
        let plan = take("plan")?;
        if let Some(extra) = table.keys().next() {
            bail!("unknown config section {extra:?} (expected [model] or [plan])");
        }
        Ok(Self { model, plan })
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelFlags {
    /// Named model shape: tiny, E6D6, E9D3, 12E6D, 24E12D, full-12E6D, full-24E12D.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

pub fn resolve_model(flags: &ModelFlags, file: &ConfigFile, vocab_size: usize) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(&flags.preset, vocab_size)?;
    if let Some(overrides) = &file.model {
        let mut base = toml::Table::try_from(&cfg)?;
        for (k, v) in overrides {
            if k == "vocab_size" {
                bail!("[model] vocab_size is taken from the vocabulary");
            }
            if !base.contains_key(k) {
                bail!("unknown [model] key {k:?}");
            }
            base.insert(k.clone(), v.clone());
        }
        cfg = toml::Value::Table(base).try_into()?;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.enc_layers, flags.enc_layers);
    set(&mut cfg.dec_layers, flags.dec_layers);
    set(&mut cfg.d_model, flags.d_model);
    set(&mut cfg.d_ffn, flags.d_ffn);
    set(&mut cfg.n_heads, flags.heads);
    set(&mut cfg.max_len, flags.max_positions);
    if let Some(d) = flags.dropout {
        cfg.dropout = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args, Clone, Debug, Default)]
pub struct PlanFlags {
    /// Named plan: pretrain, finetune, full-pretrain-12E6D, full-pretrain-24E12D, full-finetune.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Seed for initialization, batching and dropout.
    #[arg(long, env = "MNMT_SEED")]
    pub seed: Option<u64>,
}

pub fn resolve_plan(flags: &PlanFlags, file: &ConfigFile, default_preset: &str, stage: Stage) -> Result<TrainPlan> {
    let mut plan = TrainPlan::preset(flags.plan.as_deref().unwrap_or(default_preset))?;
    if let Some(t) = &file.plan {
        let mut t = t.clone();
        if let (Some(total), false) = (t.get("total_steps").and_then(|v| v.as_integer()), t.contains_key("warmup_steps")) {
            t.insert("warmup_steps".into(), (plan.warmup_steps as i64).min(total).into());
        }
        plan = TrainPlan::from_kv_text(&toml::to_string(&t)?, &plan)?;
    }
    let PlanFlags { plan: _, steps, lr, warmup, accum, batch_tokens, label_smoothing, eval_interval, seed } = flags.clone();
    plan.total_steps = steps.unwrap_or(plan.total_steps);
    plan.init_lr = lr.unwrap_or(plan.init_lr);
    plan.warmup_steps = warmup.unwrap_or(plan.warmup_steps);
    plan.accum = accum.unwrap_or(plan.accum);
    plan.batch_tokens = batch_tokens.unwrap_or(plan.batch_tokens);
    plan.label_smoothing = label_smoothing.unwrap_or(plan.label_smoothing);
    plan.eval_interval = eval_interval.unwrap_or(plan.eval_interval);
    plan.seed = seed.unwrap_or(plan.seed);
    // A short run keeps the preset's warmup from exceeding it.
    if steps.is_some() && warmup.is_none() && file.plan.as_ref().is_none_or(|t| !t.contains_key("warmup_steps")) {
        plan.warmup_steps = plan.warmup_steps.min(plan.total_steps);
    }
    plan.stage = stage;
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_preset() {
        let file = ConfigFile::parse("[plan]\ninit_lr = 0.01\ntotal_steps = 40\n[model]\nd_ffn = 128\n").unwrap();
        let flags = PlanFlags { steps: Some(30), ..Default::default() };
        let plan = resolve_plan(&flags, &file, "pretrain", Stage::Pretrain).unwrap();
        assert_eq!((plan.init_lr, plan.total_steps), (0.01, 30));
        assert_eq!(plan.batch_tokens, TrainPlan::pretrain().batch_tokens);
        assert_eq!(plan.warmup_steps, 30);
        let m = resolve_model(&ModelFlags { preset: "tiny".into(), d_model: Some(32), ..Default::default() }, &file, 50)
            .unwrap();
        assert_eq!((m.d_model, m.d_ffn, m.vocab_size), (32, 128, 50));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("[optim]\nlr = 1\n").is_err());
        let file = ConfigFile::parse("[plan]\nlearning_rate = 1\n").unwrap();
        assert!(resolve_plan(&PlanFlags::default(), &file, "pretrain", Stage::Pretrain).is_err());
        let file = ConfigFile::parse("[model]\nwidth = 3\n").unwrap();
        assert!(resolve_model(&ModelFlags { preset: "tiny".into(), ..Default::default() }, &file, 50).is_err());
    }
}
