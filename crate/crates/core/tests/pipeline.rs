use std::collections::BTreeMap;

use mnmt_core::corpus::{subset_for_target, LangId};
use mnmt_core::decode::{beam_best, pivot_translate, DecodeError, SearchConfig, StepModel};
use mnmt_core::distill::make_distill_corpus;
use mnmt_core::experiment::{Prepared, SyntheticWorld, WorldConfig};
use mnmt_core::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use mnmt_core::subword::EOS;
use mnmt_core::trainer::{dev_loss, encode_pair, prepare_examples, train_stage, two_stage, Stage, TrainPlan};

fn small_world() -> Prepared {
    let mut cfg = WorldConfig::uniform(21, 3, 60);
    cfg.dev_per_direction = 10;
    Prepared::new(SyntheticWorld::new(cfg).unwrap(), true, 5.0, 3).unwrap()
}

fn small_model(p: &Prepared) -> ModelConfig {
    ModelConfig { d_model: 32, d_ffn: 64, ..ModelConfig::desk(1, 1, p.vocab.len()) }
}

fn plan(steps: usize) -> TrainPlan {
    TrainPlan { total_steps: steps, warmup_steps: 10, batch_tokens: 256, eval_interval: 20, ..TrainPlan::pretrain() }
}

#[test]
fn checkpoint_reload_reproduces_dev_loss() {
    let p = small_world();
    let out = train_stage(init_params(&small_model(&p), 1), &p.pretrain_mix, &p.dev, &plan(20), &p.vocab, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.best, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let dev = prepare_examples(&p.dev, &p.vocab, Stage::Pretrain).unwrap();
    let a = dev_loss(&out.best, &dev, 0.1).unwrap();
    let b = dev_loss(&back, &dev, 0.1).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let p = small_world();
    let run = |seed| {
        let plan = TrainPlan { seed, ..plan(15) };
        let dir = tempfile::tempdir().unwrap();
        let out = train_stage(init_params(&small_model(&p), seed), &p.pretrain_mix, &p.dev, &plan, &p.vocab, Some(dir.path())).unwrap();
        let ckpt = std::fs::read(dir.path().join("pretrain/15.ckpt")).unwrap();
        let records = std::fs::read(dir.path().join("pretrain/records.tsv")).unwrap();
        (out.best.checksum(), ckpt, records)
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.0, run(5).0);
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let p = small_world();
    let out = train_stage(init_params(&small_model(&p), 2), &p.pretrain_mix, &p.dev, &plan(200), &p.vocab, None).unwrap();
    let first = out.records.first().unwrap();
    let last = out.records.last().unwrap();
    assert_eq!((first.step, last.step), (0, 200));
    assert!(last.dev_loss < first.dev_loss, "{} -> {}", first.dev_loss, last.dev_loss);
    let early: f64 = out.train_losses[..10].iter().map(|l| l.1).sum::<f64>() / 10.0;
    let late: f64 = out.train_losses[190..].iter().map(|l| l.1).sum::<f64>() / 10.0;
    assert!(late < early);
}

#[test]
fn two_stage_yields_one_model_per_target() {
    let p = small_world();
    let dev: BTreeMap<LangId, _> = p.world.langs().into_iter().map(|l| (l.clone(), p.dev_for(&l))).collect();
    let ft = TrainPlan { total_steps: 5, warmup_steps: 2, ..plan(5) };
    let out = two_stage(init_params(&small_model(&p), 3), &p.pretrain_mix, &dev, &plan(10), &ft, &p.vocab, None).unwrap();
    assert_eq!(out.finetuned.len(), 3);
    for (lang, r) in &out.finetuned {
        let r = r.as_ref().unwrap();
        assert!(r.best.all_finite(), "{lang}");
        assert_eq!(r.records.last().unwrap().step, 5);
    }
    // Finetuning must not accept data for other targets.
    let en = LangId::new("en").unwrap();
    let err = train_stage(out.pretrained.best.clone(), &p.train, &dev[&en], &TrainPlan { stage: Stage::Finetune, ..ft }, &p.vocab, None);
    assert!(err.is_err());
}

#[test]
fn distillation_keeps_cardinality_and_matches_standalone_beam() {
    let p = small_world();
    let teacher: ModelParams<f32> =
        train_stage(init_params(&small_model(&p), 6), &p.pretrain_mix, &p.dev, &plan(60), &p.vocab, None).unwrap().best;
    let de = LangId::new("de").unwrap();
    let input = subset_for_target(&p.train, &de).take(100);
    assert_eq!(input.len(), 100);
    let cfg = SearchConfig::for_vocab(4, &p.vocab).with_max_len(12);
    let out = make_distill_corpus(&teacher, &p.vocab, &input, &cfg).unwrap();
    assert_eq!(out.corpus.len() + out.dropped, input.len());
    let mut kept = out.corpus.pairs().iter();
    for pair in input.pairs() {
        let hyp = beam_best(&teacher, &encode_pair(&p.vocab, pair).src, &cfg).unwrap();
        let text = p.vocab.decode(hyp.content()).unwrap();
        if hyp.finished && !text.is_empty() {
            let d = kept.next().unwrap();
            assert_eq!((&d.source, &d.target, &d.tgt_lang), (&pair.source, &text, &pair.tgt_lang));
        }
    }
    assert!(kept.next().is_none());
}

/// Copies the source content (ids at or above `min`) and then stops.
struct Copier {
    vocab: usize,
    min: u32,
}

impl StepModel for Copier {
    type State = (Vec<u32>, usize);

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, src: &[u32]) -> Result<Self::State, DecodeError> {
        Ok((src.iter().copied().filter(|&t| t >= self.min).collect(), 0))
    }

    fn advance(&self, state: &mut Self::State, _token: u32) -> Result<Vec<f64>, DecodeError> {
        let next = state.0.get(state.1).copied().unwrap_or(EOS);
        state.1 += 1;
        let mut lp = vec![-20.0; self.vocab];
        lp[next as usize] = 0.0;
        Ok(lp)
    }
}

#[test]
fn pivot_through_copy_models_returns_the_source() {
    let m = Copier { vocab: 20, min: 8 };
    let cfg1 = SearchConfig::new(5, 8);
    let cfg2 = SearchConfig::new(4, 8);
    let src = [9, 12, 15, 4, EOS];
    let out = pivot_translate(&m, &m, &src, 5, &cfg1, &cfg2).unwrap();
    assert_eq!(out.hop1.content(), &[9, 12, 15]);
    assert_eq!(out.output.content(), &[9, 12, 15]);
    assert!(out.output.finished);
}
