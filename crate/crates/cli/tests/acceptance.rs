//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mnmt_core::corpus::{subset_for_target, temperature_sample, LangId, ParallelCorpus};
use mnmt_core::decode::{beam_best, SearchConfig};
use mnmt_core::distill::{make_distill_corpus, train_student};
use mnmt_core::eval::{corpus_bleu_text, latency_bench, Smoothing};
use mnmt_core::experiment::{
    direct_vs_pivot, median, pivot_latency, score_model, source_ids, DirectionComparison, Prepared, SyntheticWorld,
    WorldConfig,
};
use mnmt_core::model::{forward, init_params, Batch, Example, ModelConfig, ModelParams};
use mnmt_core::subword::EOS;
use mnmt_core::trainer::{train_stage, Stage, TrainPlan};

type Outcome = (bool, String);

const SEEDS: [u64; 3] = [1, 2, 3];
const BEAM: usize = 4;
const FINETUNE_STEPS: usize = 300;
const STUDENT_STEPS: usize = 600;
const BLEU_MARGIN: f64 = 2.0;

fn lang(code: &str) -> LangId {
    LangId::new(code).unwrap()
}

fn log(msg: impl AsRef<str>) {
    eprintln!("  .. {}", msg.as_ref());
}

// ---------------------------------------------------------------- oracles

fn gradient_exactness() -> Outcome {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 1..=5 {
        let r = common::gradient_check(seed);
        worst = worst.max(r.max_rel_error);
        coords = r.coords;
    }
    (worst < 1e-4, format!("max relative error {worst:.2e} over 5 seeds x {coords} coordinates (tol 1e-4)"))
}

fn temperature_sampling() -> Outcome {
    let sizes = [("de", 2000), ("fr", 600), ("cs", 90), ("ja", 10)];
    let corpus = common::grouped_corpus(&sizes);
    let t5 = common::chi_square_groups(&corpus, 5.0, 100_000, 11, &common::closed_form_q(&sizes, 5.0), 0.001);
    let t1 = common::chi_square_groups(&corpus, 1.0, 100_000, 12, &common::closed_form_q(&sizes, 1.0), 0.001);
    let raw = corpus.target_sizes();
    let total = corpus.len() as f64;
    let q1 = common::closed_form_q(&sizes, 1.0);
    let raw_ok = q1.iter().all(|(k, q)| (q - raw[&lang(k)] as f64 / total).abs() < 1e-12);
    (
        t5.passes() && t1.passes() && raw_ok,
        format!(
            "T=5 chi2 {:.2} (crit {:.2}); T=1 chi2 {:.2} (crit {:.2}), q equals raw proportions: {raw_ok}",
            t5.statistic, t5.critical, t1.statistic, t1.critical
        ),
    )
}

fn bleu_oracle() -> Outcome {
    // Precisions 5/6, 3/5, 1/4, 0/3 with equal lengths.
    let (h, r) = ("a b c d e f", "a b c x d e");
    let none = corpus_bleu_text(&[h], &[r], 4, Smoothing::None).unwrap();
    let floor = corpus_bleu_text(&[h], &[r], 4, Smoothing::Floor).unwrap();
    // Exact prefix, hypothesis 4 tokens against 6: 100 * exp(1 - 6/4).
    let short = corpus_bleu_text(&["a b c d"], &["a b c d e f"], 4, Smoothing::None).unwrap();
    let lines = ["das ist ein kleiner test", "noch ein satz hier"];
    let ident = corpus_bleu_text(&lines, &lines, 4, Smoothing::None).unwrap();
    let world = SyntheticWorld::new(WorldConfig::skewed4(1)).unwrap();
    let dev = world.dev();
    let refs: Vec<Vec<String>> = dev.pairs().iter().map(|p| p.target.clone()).collect();
    let dev_ident = mnmt_core::eval::corpus_bleu(&refs, &refs, 4, Smoothing::None).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 5e-5;
    let checks = [
        ("precisions", none.matches == [5, 3, 1, 0] && none.totals == [6, 5, 4, 3]),
        ("unsmoothed", close(none.bleu, 0.0)),
        ("floor", close(floor.bleu, 25.4066374077)),
        ("brevity", close(short.bleu, 60.6530659713)),
        ("identity", close(ident.bleu, 100.0)),
        ("dev identity", close(dev_ident.bleu, 100.0)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (
        failed.is_empty(),
        format!(
            "floor {:.4}, brevity {:.4}, unsmoothed {:.4}, BLEU(x,x) {:.4}; failed: {failed:?}",
            floor.bleu, short.bleu, none.bleu, dev_ident.bleu
        ),
    )
}

/// Log-probability of `content` followed by EOS, from one full forward pass.
fn sequence_logprob(p: &ModelParams<f64>, src: &[u32], content: &[u32]) -> f64 {
    let batch = Batch::new(&[Example { src: src.to_vec(), tgt: content.to_vec() }]);
    let logits = forward(p, &batch).unwrap();
    let v = p.config.vocab_size;
    let targets: Vec<u32> = content.iter().copied().chain([EOS]).collect();
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = &logits.data()[t * v..(t + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row[y as usize] - lse
        })
        .sum()
}

fn beam_optimality() -> Outcome {
    let cfg = ModelConfig { enc_layers: 1, dec_layers: 1, d_model: 8, d_ffn: 16, n_heads: 2, vocab_size: 6, max_len: 8, dropout: 0.0 };
    let search = SearchConfig::new(4, 4).with_alpha(0.0).with_max_len(3);
    let content = [4u32, 5];
    let mut candidates: Vec<Vec<u32>> = vec![vec![]];
    for &a in &content {
        candidates.push(vec![a]);
        for &b in &content {
            candidates.push(vec![a, b]);
        }
    }
    let mut hits = 0;
    let mut worst_gap = 0.0f64;
    let mut lengths = [0usize; 3];
    for seed in 0..50u64 {
        let mut p = init_params::<f64>(&cfg, 1000 + seed);
        p.scale(3.0);
        let src: Vec<u32> = (0..3).map(|i| 3 + ((seed * 7 + i * 5) % 3) as u32).chain([EOS]).collect();
        let (best, best_lp) = candidates
            .iter()
            .map(|c| (c.clone(), sequence_logprob(&p, &src, c)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let hyp = beam_best(&p, &src, &search).unwrap();
        worst_gap = worst_gap.max((hyp.logprob - best_lp).abs());
        lengths[best.len()] += 1;
        hits += usize::from(hyp.finished && hyp.content() == best.as_slice());
    }
    (
        hits == 50,
        format!("{hits}/50 models; optimum lengths 0/1/2: {lengths:?}; max |logprob gap| {worst_gap:.1e}"),
    )
}

// ---------------------------------------------------------- determinism

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mnmt")).current_dir(dir).env_remove("MNMT_SEED").args(args).output().unwrap();
    assert!(out.status.success(), "mnmt {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files_under(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, root, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
        }
    }
}

fn cli_pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let model = ["--d-model", "32", "--d-ffn", "64", "--enc-layers", "2", "--dec-layers", "1"];
    let train: Vec<&str> =
        ["train", "--train", "mix.tsv", "--dev", "dev.tsv", "--steps", "30", "--eval-interval", "10", "--seed", "5", "--dropout", "0.1", "--out", "pre"]
            .into_iter()
            .chain(model)
            .collect();
    let steps: [&[&str]; 12] = [
        &["data", "gen-synthetic", "--langs", "en,de,fr", "--sizes", "80,40", "--dev-size", "10", "--seed", "5", "--out", "world"],
        &["data", "filter", "--input", "world/train.tsv", "--output", "filtered.tsv"],
        &["data", "tag", "--input", "filtered.tsv", "--output", "tagged.tsv"],
        &["data", "tag", "--input", "world/dev.tsv", "--output", "dev.tsv"],
        &["data", "sample", "--input", "tagged.tsv", "--output", "mix.tsv", "--seed", "5"],
        &train,
        &["data", "filter", "--input", "tagged.tsv", "--target", "fr", "--output", "to_fr.tsv"],
        &["finetune", "--init", "pre/best.ckpt", "--vocab", "pre/vocab.txt", "--train", "to_fr.tsv", "--dev", "dev.tsv", "--target", "fr", "--steps", "10", "--seed", "5", "--out", "ft"],
        &["distill", "--teacher", "ft/best.ckpt", "--vocab", "pre/vocab.txt", "--input", "to_fr.tsv", "--output", "kd.tsv", "--max-len", "12"],
        &["data", "filter", "--input", "dev.tsv", "--target", "fr", "--output", "dev_fr.tsv"],
        &["decode", "--model", "ft/best.ckpt", "--vocab", "pre/vocab.txt", "--input", "dev_fr.tsv", "--output", "hyp.tsv", "--max-len", "12"],
        &["eval", "--hypotheses", "hyp.tsv", "--reference", "dev_fr.tsv", "--output", "bleu.json"],
    ];
    for s in steps {
        run_cli(dir, s);
    }
    let mut files = BTreeMap::new();
    files_under(dir, dir, &mut files);
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    let differing: Vec<&String> = x.keys().filter(|k| y.get(*k) != Some(&x[*k])).collect();
    let ckpt_hash = |files: &BTreeMap<String, Vec<u8>>| {
        let m: serde_json::Value = serde_json::from_slice(&files["ft/manifest.json"]).unwrap();
        m["outputs"]["ft/best.ckpt"].as_str().unwrap_or("?").to_owned()
    };
    let report = |files: &BTreeMap<String, Vec<u8>>| {
        let m: serde_json::Value = serde_json::from_slice(&files["bleu.json.manifest.json"]).unwrap();
        m["outputs"]["bleu.json"].as_str().unwrap_or("?").to_owned()
    };
    (
        x.len() == y.len() && differing.is_empty(),
        format!(
            "{} artifacts from 12 commands compared, {} differ; ft/best.ckpt {} vs {}; bleu.json {} vs {}",
            x.len(),
            differing.len(),
            ckpt_hash(&x),
            ckpt_hash(&y),
            report(&x),
            report(&y)
        ),
    )
}

// ------------------------------------------------------------ the study

type Model = ModelParams<f32>;

/// Everything trained for one seed.
struct SeedRun {
    pre_bleu: BTreeMap<LangId, f64>,
    ft_bleu: BTreeMap<LangId, f64>,
    finetuned: BTreeMap<LangId, Model>,
    scratch_bleu: f64,
    comparisons: Vec<DirectionComparison>,
}

struct Study {
    prepared: Prepared,
    runs: Vec<SeedRun>,
    lowest: LangId,
    /// Distilled corpora by (target, seed).
    distilled: RefCell<BTreeMap<(LangId, u64), ParallelCorpus>>,
    /// Students by (preset, target, seed).
    students: RefCell<BTreeMap<(String, LangId, u64), Model>>,
}

fn search(prepared: &Prepared) -> SearchConfig {
    SearchConfig::for_vocab(BEAM, &prepared.vocab)
}

fn bleu_on(model: &Model, prepared: &Prepared, target: &LangId) -> f64 {
    score_model(model, &prepared.vocab, &prepared.dev_for(target), &search(prepared)).unwrap().bleu
}

fn run_seed(prepared: &Prepared, lowest: &LangId, seed: u64) -> SeedRun {
    let t0 = Instant::now();
    let vocab = &prepared.vocab;
    let cfg = ModelConfig::tiny(vocab.len());
    let mix = temperature_sample(&prepared.train, 5.0, prepared.train.len(), seed).unwrap();
    let pre_plan = TrainPlan { seed, ..TrainPlan::pretrain() };
    let pre = train_stage(init_params(&cfg, seed), &mix, &prepared.dev, &pre_plan, vocab, None).unwrap();
    let ft_plan = TrainPlan { seed, total_steps: FINETUNE_STEPS, ..TrainPlan::finetune() };
    let mut run = SeedRun {
        pre_bleu: BTreeMap::new(),
        ft_bleu: BTreeMap::new(),
        finetuned: BTreeMap::new(),
        scratch_bleu: 0.0,
        comparisons: Vec::new(),
    };
    for l in prepared.world.langs() {
        let dev = prepared.dev_for(&l);
        let ft = train_stage(pre.best.clone(), &subset_for_target(&prepared.train, &l), &dev, &ft_plan, vocab, None).unwrap();
        run.pre_bleu.insert(l.clone(), bleu_on(&pre.best, prepared, &l));
        run.ft_bleu.insert(l.clone(), bleu_on(&ft.best, prepared, &l));
        run.finetuned.insert(l, ft.best);
    }
    // Same optimizer-step budget as pretraining plus finetuning, all of it
    // on the many-to-one data.
    let scratch_plan = TrainPlan {
        seed,
        total_steps: pre_plan.total_steps + FINETUNE_STEPS,
        stage: Stage::Finetune,
        ..TrainPlan::pretrain()
    };
    let scratch = train_stage(
        init_params(&cfg, seed),
        &subset_for_target(&prepared.train, lowest),
        &prepared.dev_for(lowest),
        &scratch_plan,
        vocab,
        None,
    )
    .unwrap();
    run.scratch_bleu = bleu_on(&scratch.best, prepared, lowest);
    run.comparisons = direct_vs_pivot(&run.finetuned, &lang("en"), vocab, &prepared.raw_dev, BEAM).unwrap();
    log(format!(
        "seed {seed}: pre {} ft {} scratch {:.2} ({:.0}s)",
        fmt_map(&run.pre_bleu),
        fmt_map(&run.ft_bleu),
        run.scratch_bleu,
        t0.elapsed().as_secs_f64()
    ));
    run
}

fn fmt_map(m: &BTreeMap<LangId, f64>) -> String {
    m.iter().map(|(k, v)| format!("{k}={v:.2}")).collect::<Vec<_>>().join(" ")
}

fn study() -> Study {
    let world = SyntheticWorld::new(WorldConfig::skewed4(1)).unwrap();
    let prepared = Prepared::new(world, true, 5.0, 1).unwrap();
    let lowest = prepared.train.target_sizes().into_iter().min_by_key(|(_, n)| *n).unwrap().0;
    let runs = SEEDS.iter().map(|&s| run_seed(&prepared, &lowest, s)).collect();
    Study { prepared, runs, lowest, distilled: RefCell::default(), students: RefCell::default() }
}

fn median_of(study: &Study, f: impl Fn(&SeedRun) -> f64) -> f64 {
    median(&study.runs.iter().map(f).collect::<Vec<_>>())
}

fn two_stage_gain(s: &Study) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for l in s.prepared.world.langs() {
        let pre = median_of(s, |r| r.pre_bleu[&l]);
        let ft = median_of(s, |r| r.ft_bleu[&l]);
        wins += usize::from(ft > pre);
        parts.push(format!("*->{l} {pre:.2}->{ft:.2}"));
    }
    (wins >= 3, format!("finetuned beats pretrained on {wins}/4 targets (median of 3 seeds): {}", parts.join(", ")))
}

fn transfer_beats_scratch(s: &Study) -> Outcome {
    let ft = median_of(s, |r| r.ft_bleu[&s.lowest]);
    let scratch = median_of(s, |r| r.scratch_bleu);
    (ft > scratch, format!("*->{}: finetuned {ft:.2} vs scratch {scratch:.2} BLEU (median of 3 seeds)", s.lowest))
}

fn direct_beats_pivot(s: &Study) -> Outcome {
    let directions: Vec<(LangId, LangId)> = s.runs[0].comparisons.iter().map(|c| c.direction.clone()).collect();
    let mut within = true;
    let mut higher = 0;
    let mut parts = Vec::new();
    for (i, d) in directions.iter().enumerate() {
        let direct = median_of(s, |r| r.comparisons[i].direct);
        let pivot = median_of(s, |r| r.comparisons[i].pivot);
        within &= direct >= pivot - 2.0;
        higher += usize::from(direct > pivot);
        parts.push(format!("{}-{} {direct:.0}/{pivot:.0}", d.0, d.1));
    }
    let n = directions.len();
    (
        n > 0 && within && 2 * higher >= n,
        format!("exact match direct/pivot (%): {}; higher on {higher}/{n}, none below -2: {within}", parts.join(", ")),
    )
}

fn student_plan(seed: u64) -> TrainPlan {
    TrainPlan { seed, total_steps: STUDENT_STEPS, stage: Stage::Finetune, ..TrainPlan::pretrain() }
}

/// Many-to-one training data for `target`, re-targeted by that seed's
/// finetuned teacher.
fn distilled(s: &Study, target: &LangId, seed: u64) -> ParallelCorpus {
    let key = (target.clone(), seed);
    if let Some(c) = s.distilled.borrow().get(&key) {
        return c.clone();
    }
    let run = &s.runs[SEEDS.iter().position(|&x| x == seed).unwrap()];
    let sources = subset_for_target(&s.prepared.train, target);
    let out = make_distill_corpus(&run.finetuned[target], &s.prepared.vocab, &sources, &search(&s.prepared)).unwrap();
    log(format!("distilled *->{target} seed {seed}: {} pairs, {} dropped", out.corpus.len(), out.dropped));
    s.distilled.borrow_mut().insert(key, out.corpus.clone());
    out.corpus
}

fn student(s: &Study, preset: &str, target: &LangId, seed: u64) -> Model {
    let key = (preset.to_owned(), target.clone(), seed);
    if let Some(m) = s.students.borrow().get(&key) {
        return m.clone();
    }
    let data = distilled(s, target, seed);
    let t0 = Instant::now();
    let cfg = ModelConfig::preset(preset, s.prepared.vocab.len()).unwrap();
    let out = train_student(&cfg, &data, &s.prepared.dev_for(target), &student_plan(seed), &s.prepared.vocab, None).unwrap();
    log(format!("{preset} student *->{target} seed {seed}: best step {} ({:.0}s)", out.best_step, t0.elapsed().as_secs_f64()));
    s.students.borrow_mut().insert(key, out.best.clone());
    out.best
}

fn distillation_retention(s: &Study) -> Outcome {
    let langs = s.prepared.world.langs();
    let best = langs
        .iter()
        .max_by(|a, b| median_of(s, |r| r.ft_bleu[*a]).total_cmp(&median_of(s, |r| r.ft_bleu[*b])))
        .unwrap()
        .clone();
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for (run, &seed) in s.runs.iter().zip(&SEEDS) {
        let st = student(s, "E9D3", &best, seed);
        let (teacher, bleu) = (run.ft_bleu[&best], bleu_on(&st, &s.prepared, &best));
        gaps.push(bleu - teacher);
        parts.push(format!("seed {seed} {teacher:.2}->{bleu:.2}"));
    }
    let gap = median(&gaps);
    (
        gap.abs() <= BLEU_MARGIN,
        format!("*->{best} teacher->E9D3 student BLEU: {}; median change {gap:+.2} (tol +-{BLEU_MARGIN})", parts.join(", ")),
    )
}

fn light_decoder(s: &Study) -> Outcome {
    let (de, en) = (lang("de"), lang("en"));
    let vocab = &s.prepared.vocab;
    let e9d3 = student(s, "E9D3", &de, 1);
    let e6d6 = student(s, "E6D6", &de, 1);
    let e6d6_en = student(s, "E6D6", &en, 1);
    let (b9, b6) = (bleu_on(&e9d3, &s.prepared, &de), bleu_on(&e6d6, &s.prepared, &de));

    let pairs: Vec<_> = s.prepared.raw_dev.pairs().iter().filter(|p| p.tgt_lang == de && p.src_lang != en).take(30).collect();
    let direct_src: Vec<Vec<u32>> = pairs.iter().map(|p| source_ids(vocab, &p.source, &de).unwrap()).collect();
    let pivot_src: Vec<Vec<u32>> = pairs.iter().map(|p| source_ids(vocab, &p.source, &en).unwrap()).collect();
    let cfg = search(&s.prepared);
    let l9 = latency_bench(&e9d3, "E9D3", &direct_src, &cfg, 3, 3).unwrap().median_ms;
    let l6 = latency_bench(&e6d6, "E6D6", &direct_src, &cfg, 3, 3).unwrap().median_ms;
    let tag = vocab.tag_id(&de).unwrap();
    let lp = pivot_latency(&e6d6_en, &e6d6, "pivot", &pivot_src, tag, vocab, 3, 3).unwrap().median_ms;
    let ratio = l9 / l6;
    let saving = 1.0 - l9 / lp;
    (
        ratio <= 0.65 && (b9 - b6).abs() <= BLEU_MARGIN && (0.60..=0.90).contains(&saving),
        format!(
            "X->de latency E9D3 {l9:.2} ms / E6D6 {l6:.2} ms = {ratio:.3} (tol 0.65); BLEU {b9:.2} vs {b6:.2}; \
             pivot E6D6 {lp:.2} ms, direct E9D3 saves {:.1}% (target 75 +- 15)",
            100.0 * saving
        ),
    )
}

// ---------------------------------------------------------------- runner

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        self.failures += usize::from(!pass);
        println!("{} [{id}] {name}: {detail} ({:.0}s)", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failures: 0 };
    report.check(1, "gradient exactness", gradient_exactness);
    report.check(7, "temperature sampling", temperature_sampling);
    report.check(8, "BLEU oracle", bleu_oracle);
    report.check(9, "beam optimality on toys", beam_optimality);
    report.check(10, "determinism", determinism);

    let t0 = Instant::now();
    match catch_unwind(study) {
        Ok(s) => {
            log(format!("multi-seed study trained in {:.0}s", t0.elapsed().as_secs_f64()));
            report.check(2, "two-stage gain", || two_stage_gain(&s));
            report.check(3, "transfer beats scratch", || transfer_beats_scratch(&s));
            report.check(4, "direct beats pivot", || direct_beats_pivot(&s));
            report.check(6, "distillation retention", || distillation_retention(&s));
            report.check(5, "light-decoder speedup", || light_decoder(&s));
        }
        Err(_) => {
            for (id, name) in [(2, "two-stage gain"), (3, "transfer beats scratch"), (4, "direct beats pivot"), (6, "distillation retention"), (5, "light-decoder speedup")] {
                report.check(id, name, || (false, "study failed to train".into()));
            }
        }
    }
    println!("acceptance: {} of 10 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
