use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use mnmt_core::corpus::{self, tag_corpus, temperature_sample, LangId, ParallelCorpus};
use mnmt_core::decode::{
    decode_corpus, exact_match, pivot_translate, write_decode_tsv, DecodedPair, SearchConfig, PIVOT_FIRST_BEAM,
};
use mnmt_core::distill::{make_distill_corpus, provenance_header, train_student};
use mnmt_core::eval::{corpus_bleu, latency_bench, latency_table, write_latency_tsv, write_tradeoff_csv, Smoothing};
use mnmt_core::experiment::{dev_by_target, source_ids, Prepared, SyntheticWorld, WorldConfig};
use mnmt_core::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use mnmt_core::subword::{train_vocab, train_vocab_exhaustive, SubwordVocab};
use mnmt_core::trainer::{train_stage, two_stage, Stage, StageOutcome, TrainPlan, FINETUNE_LR_SWEEP};

use crate::config::{resolve_model, resolve_plan, ConfigFile};
use crate::manifest::{sidecar, Manifest};
use crate::{
    BenchArgs, DecodeArgs, DistillArgs, EvalArgs, FilterArgs, FinetuneArgs, GenArgs, IoArgs, PivotAlignArgs, SampleArgs,
    SearchFlags, SmoothingArg, StatsArgs, TrainArgs,
};

/// Fails before any work if a required input is missing.
fn require(paths: &[(&str, &Path)]) -> Result<()> {
    for (what, p) in paths {
        ensure!(p.is_file(), "{what} not found: {}", p.display());
    }
    Ok(())
}

fn read_corpus(path: &Path) -> Result<ParallelCorpus> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ParallelCorpus::read_tsv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_corpus(path: &Path, corpus: &ParallelCorpus, header: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    corpus.write_tsv(&mut w, header)?;
    w.flush()?;
    Ok(())
}

fn read_vocab(path: &Path) -> Result<SubwordVocab> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SubwordVocab::read(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn write_vocab(path: &Path, vocab: &SubwordVocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    vocab.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path, vocab: &SubwordVocab) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(
        params.config.vocab_size == vocab.len(),
        "{} expects a vocabulary of {} tokens, got {}",
        path.display(),
        params.config.vocab_size,
        vocab.len()
    );
    Ok(params)
}

fn lang(code: &str) -> Result<LangId> {
    Ok(LangId::new(code)?)
}

fn search_config(flags: &SearchFlags, vocab: &SubwordVocab) -> SearchConfig {
    let cfg = SearchConfig::for_vocab(flags.beam, vocab).with_alpha(flags.alpha);
    match flags.max_len {
        Some(m) => cfg.with_max_len(m),
        None => cfg,
    }
}

fn data_manifest(command: &str, seed: Option<u64>, config: serde_json::Value, inputs: &[&Path], output: &Path) -> Result<()> {
    let mut m = Manifest::new(command, seed, config);
    for p in inputs {
        m.input(p)?;
    }
    m.output(output)?;
    m.write(&sidecar(output))
}

pub fn gen_synthetic(a: GenArgs) -> Result<()> {
    ensure!(a.langs.len() >= 2, "need at least two languages");
    ensure!(
        a.sizes.len() == a.langs.len() - 1,
        "--sizes needs one entry per non-pivot language ({} given, {} expected)",
        a.sizes.len(),
        a.langs.len() - 1
    );
    let world = SyntheticWorld::new(WorldConfig {
        seed: a.seed,
        langs: a.langs.clone(),
        latent_vocab: a.latent_vocab,
        length_range: (a.min_len, a.max_len),
        pivot_sizes: a.sizes.clone(),
        dev_per_direction: a.dev_size,
    })?;
    let train = if a.english_centric { world.english_centric()? } else { world.multi_way()? };
    fs::create_dir_all(&a.out)?;
    write_corpus(&a.out.join("train.tsv"), &train, &[])?;
    write_corpus(&a.out.join("dev.tsv"), &world.dev(), &[])?;
    for spec in &world.specs {
        fs::write(a.out.join(format!("{}.spec", spec.lang)), spec.to_kv())?;
    }
    let mut m = Manifest::new(
        "data gen-synthetic",
        Some(a.seed),
        json!({
            "langs": a.langs, "sizes": a.sizes, "latent_vocab": a.latent_vocab,
            "length_range": [a.min_len, a.max_len], "dev_size": a.dev_size,
            "english_centric": a.english_centric,
        }),
    );
    m.outputs_under(&a.out)?;
    m.write(&a.out.join("manifest.json"))?;
    eprintln!("wrote {} training pairs to {}", train.len(), a.out.display());
    Ok(())
}

pub fn filter(a: FilterArgs) -> Result<()> {
    require(&[("input", &a.input)])?;
    let input = read_corpus(&a.input)?;
    let mut kept = corpus::filter_empty(&input);
    if let Some(t) = &a.target {
        kept = corpus::subset_for_target(&kept, &lang(t)?);
    }
    write_corpus(&a.output, &kept, &[])?;
    data_manifest("data filter", None, json!({"target": a.target}), &[&a.input], &a.output)?;
    eprintln!("kept {} of {} pairs", kept.len(), input.len());
    Ok(())
}

pub fn pivot_align(a: PivotAlignArgs) -> Result<()> {
    require(&[("--en-x", &a.en_x), ("--en-y", &a.en_y)])?;
    let (x, y) = (lang(&a.x)?, lang(&a.y)?);
    let out = corpus::pivot_align(&read_corpus(&a.en_x)?, &read_corpus(&a.en_y)?, &x, &y)?;
    write_corpus(&a.output, &out, &[])?;
    data_manifest("data pivot-align", None, json!({"x": a.x, "y": a.y}), &[&a.en_x, &a.en_y], &a.output)?;
    eprintln!("aligned {} {x}-{y} pairs", out.len());
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    require(&[("input", &a.input)])?;
    let input = read_corpus(&a.input)?;
    let n = a.n.unwrap_or(input.len());
    let out = temperature_sample(&input, a.temperature, n, a.seed)?;
    write_corpus(&a.output, &out, &[])?;
    data_manifest("data sample", Some(a.seed), json!({"temperature": a.temperature, "n": n}), &[&a.input], &a.output)
}

pub fn tag(a: IoArgs) -> Result<()> {
    require(&[("input", &a.input)])?;
    let out = tag_corpus(&read_corpus(&a.input)?)?;
    write_corpus(&a.output, &out, &[])?;
    data_manifest("data tag", None, json!({}), &[&a.input], &a.output)
}

/// Per-direction pair counts, then one data-size row over target languages.
pub fn stats_table(corpus: &ParallelCorpus) -> String {
    let mut s = String::from("direction\tpairs\n");
    for ((src, tgt), n) in corpus.direction_index() {
        s.push_str(&format!("{src}-{tgt}\t{n}\n"));
    }
    let sizes = corpus.target_sizes();
    let mut sizes: Vec<_> = sizes.into_iter().collect();
    sizes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    s.push('\n');
    s.push_str("target");
    for (l, _) in &sizes {
        s.push_str(&format!("\t{l}"));
    }
    s.push_str("\ndata size");
    for (_, n) in &sizes {
        s.push_str(&format!("\t{n}"));
    }
    s.push('\n');
    s
}

pub fn stats(a: StatsArgs) -> Result<()> {
    require(&[("input", &a.input)])?;
    print!("{}", stats_table(&read_corpus(&a.input)?));
    Ok(())
}

fn report_outcome(label: &str, o: &StageOutcome) {
    let best = o.records.iter().find(|r| r.step == o.best_step).map_or(f64::NAN, |r| r.dev_loss);
    eprintln!("{label}: {} steps, best step {} (dev loss {best:.4})", o.train_losses.len(), o.best_step);
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::read(a.config.as_deref())?;
    if let Some(v) = &a.vocab {
        require(&[("--vocab", v)])?;
    }
    if let (Some(t), Some(d)) = (&a.train, &a.dev) {
        require(&[("--train", t), ("--dev", d)])?;
    }
    let plan = resolve_plan(&a.plan, &file, "pretrain", Stage::Pretrain)?;
    fs::create_dir_all(&a.out)?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    let (train, dev) = match a.langs {
        Some(n) => {
            ensure!(n >= 2, "--langs needs at least 2");
            let world = SyntheticWorld::new(WorldConfig::uniform(plan.seed, n, a.size))?;
            let p = Prepared::new(world, true, a.temperature, plan.seed)?;
            write_corpus(&a.out.join("train.tsv"), &p.pretrain_mix, &[])?;
            write_corpus(&a.out.join("dev.tsv"), &p.dev, &[])?;
            (p.pretrain_mix, p.dev)
        }
        None => {
            let (t, d) = (a.train.clone().expect("required by clap"), a.dev.clone().expect("required by clap"));
            let corpora = (read_corpus(&t)?, read_corpus(&d)?);
            inputs.extend([t, d]);
            corpora
        }
    };
    let vocab = match &a.vocab {
        Some(v) => {
            inputs.push(v.clone());
            read_vocab(v)?
        }
        None => {
            let v = match a.vocab_size {
                Some(n) => train_vocab(&train, n)?,
                None => train_vocab_exhaustive(&train)?,
            };
            write_vocab(&a.out.join("vocab.txt"), &v)?;
            v
        }
    };
    let model = resolve_model(&a.model, &file, vocab.len())?;
    let params = init_params(&model, plan.seed);
    eprintln!("model {} params, {} training pairs, {} dev pairs", params.num_params(), train.len(), dev.len());

    let mut config = json!({"model": model, "plan": plan});
    if a.two_stage {
        let mut ft = TrainPlan { seed: plan.seed, ..TrainPlan::finetune() };
        ft.total_steps = a.finetune_steps.unwrap_or(ft.total_steps);
        ft.init_lr = a.finetune_lr.unwrap_or(ft.init_lr);
        ft.warmup_steps = a.finetune_warmup.unwrap_or(ft.warmup_steps.min(ft.total_steps));
        config["finetune_plan"] = json!(ft);
        let out = two_stage(params, &train, &dev_by_target(&dev), &plan, &ft, &vocab, Some(&a.out))?;
        report_outcome("pretrain", &out.pretrained);
        save_checkpoint(&out.pretrained.best, &a.out.join("best.ckpt"))?;
        let mut failed = Vec::new();
        for (l, r) in &out.finetuned {
            match r {
                Ok(o) => {
                    report_outcome(&format!("finetune {l}"), o);
                    save_checkpoint(&o.best, &a.out.join(l.code()).join("best.ckpt"))?;
                }
                Err(e) => {
                    eprintln!("finetune {l} failed: {e}");
                    failed.push(l.to_string());
                }
            }
        }
        write_train_manifest(&a.out, "train", plan.seed, config, &inputs)?;
        ensure!(failed.is_empty(), "finetuning failed for {}", failed.join(", "));
    } else {
        let out = train_stage(params, &train, &dev, &plan, &vocab, Some(&a.out))?;
        report_outcome("pretrain", &out);
        save_checkpoint(&out.best, &a.out.join("best.ckpt"))?;
        write_train_manifest(&a.out, "train", plan.seed, config, &inputs)?;
    }
    Ok(())
}

fn write_train_manifest(out: &Path, command: &str, seed: u64, config: serde_json::Value, inputs: &[PathBuf]) -> Result<()> {
    let mut m = Manifest::new(command, Some(seed), config);
    for p in inputs {
        m.input(p)?;
    }
    m.outputs_under(out)?;
    m.write(&out.join("manifest.json"))
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    require(&[("--init", &a.init), ("--vocab", &a.vocab), ("--train", &a.train), ("--dev", &a.dev)])?;
    let file = ConfigFile::read(a.config.as_deref())?;
    let plan = resolve_plan(&a.plan, &file, "finetune", Stage::Finetune)?;
    let target = lang(&a.target)?;
    let corpus = read_corpus(&a.train)?;
    let targets: Vec<String> = corpus.target_sizes().keys().map(|l| l.to_string()).collect();
    if targets != [target.to_string()] {
        bail!(
            "finetune --target {target} needs a corpus whose every pair goes into {target}; found targets [{}]",
            targets.join(", ")
        );
    }
    let dev = read_corpus(&a.dev)?.filter(|p| p.tgt_lang == target);
    ensure!(!dev.is_empty(), "dev corpus has no pairs into {target}");
    let vocab = read_vocab(&a.vocab)?;
    let params = load_model(&a.init, &vocab)?;
    fs::create_dir_all(&a.out)?;
    let lrs = if a.lr_sweep { FINETUNE_LR_SWEEP.to_vec() } else { vec![plan.init_lr] };
    let mut best: Option<(f64, f64, StageOutcome)> = None;
    for lr in lrs {
        let run_plan = TrainPlan { init_lr: lr, ..plan.clone() };
        let dir = if a.lr_sweep { a.out.join(format!("lr-{lr:e}")) } else { a.out.clone() };
        let out = train_stage(params.clone(), &corpus, &dev, &run_plan, &vocab, Some(&dir))?;
        report_outcome(&format!("finetune {target} lr {lr:e}"), &out);
        let loss = out.records.iter().map(|r| r.dev_loss).fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, lr, out));
        }
    }
    let (loss, lr, out) = best.expect("at least one learning rate");
    if a.lr_sweep {
        eprintln!("best learning rate {lr:e} (dev loss {loss:.4})");
    }
    save_checkpoint(&out.best, &a.out.join("best.ckpt"))?;
    let config = json!({"target": a.target, "plan": plan, "lr_sweep": a.lr_sweep, "selected_lr": lr});
    write_train_manifest(&a.out, "finetune", plan.seed, config, &[a.init, a.vocab, a.train, a.dev])
}

pub fn distill(a: DistillArgs) -> Result<()> {
    require(&[("--teacher", &a.teacher), ("--vocab", &a.vocab), ("--input", &a.input)])?;
    if let Some(d) = &a.dev {
        require(&[("--dev", d)])?;
    }
    let file = ConfigFile::read(a.config.as_deref())?;
    let plan = resolve_plan(&a.plan, &file, "pretrain", Stage::Pretrain)?;
    let vocab = read_vocab(&a.vocab)?;
    let teacher = load_model(&a.teacher, &vocab)?;
    let input = read_corpus(&a.input)?;
    let cfg = search_config(&a.search, &vocab);
    let out = make_distill_corpus(&teacher, &vocab, &input, &cfg)?;
    let header = provenance_header(teacher.checksum(), &cfg, input.len(), out.dropped);
    write_corpus(&a.output, &out.corpus, &header)?;
    eprintln!("distilled {} pairs, dropped {}", out.corpus.len(), out.dropped);

    let mut m = Manifest::new(
        "distill",
        a.student.as_ref().map(|_| plan.seed),
        json!({"beam": cfg.beam, "alpha": cfg.alpha, "max_len": cfg.max_len, "student": a.student}),
    );
    for p in [&a.teacher, &a.vocab, &a.input] {
        m.input(p)?;
    }
    m.output(&a.output)?;
    if let (Some(preset), Some(dev), Some(dir)) = (&a.student, &a.dev, &a.out) {
        let student_cfg = ModelConfig::preset(preset, vocab.len())?;
        fs::create_dir_all(dir)?;
        let o = train_student(&student_cfg, &out.corpus, &read_corpus(dev)?, &plan, &vocab, Some(dir))?;
        report_outcome(&format!("student {preset}"), &o);
        save_checkpoint(&o.best, &dir.join("best.ckpt"))?;
        m.config["plan"] = json!(plan);
        m.config["student_model"] = json!(student_cfg);
        m.input(dev)?;
        m.outputs_under(dir)?;
    }
    m.write(&sidecar(&a.output))
}

fn check_tagged(corpus: &ParallelCorpus) -> Result<()> {
    for (i, p) in corpus.pairs().iter().enumerate() {
        let ok = p.source.last().is_some_and(|t| t == &p.tgt_lang.tag());
        ensure!(ok, "pair {} is not tagged for its target {} (run `mnmt data tag`)", i + 1, p.tgt_lang);
    }
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    require(&[("--model", &a.model), ("--vocab", &a.vocab), ("--input", &a.input)])?;
    if let Some(v) = &a.via {
        require(&[("--via", v)])?;
    }
    let vocab = read_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let input = read_corpus(&a.input)?;
    check_tagged(&input)?;
    let cfg = search_config(&a.search, &vocab);
    let rows = match (&a.via, &a.pivot_lang) {
        (Some(via), Some(pivot)) => {
            let first_model = load_model(via, &vocab)?;
            let pivot = lang(pivot)?;
            let first = SearchConfig { beam: PIVOT_FIRST_BEAM, ..cfg.clone() };
            input
                .pairs()
                .iter()
                .map(|p| {
                    let content = &p.source[..p.source.len() - 1];
                    let tag = vocab.tag_id(&p.tgt_lang).with_context(|| format!("no tag for {}", p.tgt_lang))?;
                    let out = pivot_translate(&first_model, &model, &source_ids(&vocab, content, &pivot)?, tag, &first, &cfg)?;
                    let text = vocab.decode(out.output.content())?;
                    Ok(DecodedPair { pair: p.clone(), hypothesis: out.output, text })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => decode_corpus(&model, &vocab, &input, &cfg)?,
    };
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&a.output)?);
    write_decode_tsv(&mut w, &rows)?;
    w.flush()?;
    drop(w);
    let unfinished = rows.iter().filter(|r| !r.hypothesis.finished).count();
    eprintln!("decoded {} sentences, exact match {:.2}%, unfinished {unfinished}", rows.len(), 100.0 * exact_match(&rows));
    let mut m = Manifest::new(
        "decode",
        None,
        json!({"beam": cfg.beam, "alpha": cfg.alpha, "max_len": cfg.max_len, "pivot_lang": a.pivot_lang}),
    );
    m.input(&a.model)?;
    if let Some(v) = &a.via {
        m.input(v)?;
    }
    m.input(&a.vocab)?;
    m.input(&a.input)?;
    m.output(&a.output)?;
    m.write(&sidecar(&a.output))
}

/// Rows of a decode TSV: `(src_lang, tgt_lang, hypothesis tokens)`.
fn read_decode_tsv(path: &Path) -> Result<Vec<(String, String, Vec<String>)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 {
            ensure!(line.starts_with("src_lang\t"), "{}:1: missing decode header", path.display());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        ensure!(fields.len() == 5, "{}:{}: expected 5 fields, found {}", path.display(), i + 1, fields.len());
        rows.push((fields[0].to_owned(), fields[1].to_owned(), fields[3].split_whitespace().map(String::from).collect()));
    }
    Ok(rows)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    require(&[("--hypotheses", &a.hypotheses), ("--reference", &a.reference)])?;
    let hyps = read_decode_tsv(&a.hypotheses)?;
    let refs = read_corpus(&a.reference)?;
    ensure!(hyps.len() == refs.len(), "{} hypotheses but {} references", hyps.len(), refs.len());
    for (i, (h, r)) in hyps.iter().zip(refs.pairs()).enumerate() {
        ensure!(
            h.0 == r.src_lang.code() && h.1 == r.tgt_lang.code(),
            "row {}: hypothesis is {}-{} but reference is {}-{}",
            i + 1,
            h.0,
            h.1,
            r.src_lang,
            r.tgt_lang
        );
    }
    let smoothing = match a.smoothing {
        SmoothingArg::None => Smoothing::None,
        SmoothingArg::Floor => Smoothing::Floor,
    };
    let h: Vec<Vec<String>> = hyps.iter().map(|r| r.2.clone()).collect();
    let r: Vec<Vec<String>> = refs.pairs().iter().map(|p| p.target.clone()).collect();
    let report = corpus_bleu(&h, &r, a.max_n, smoothing)?;
    let exact = h.iter().zip(&r).filter(|(a, b)| a == b).count() as f64 / h.len() as f64;
    let mut by_dir: BTreeMap<String, (Vec<Vec<String>>, Vec<Vec<String>>)> = BTreeMap::new();
    for ((hyp, rf), row) in h.iter().zip(&r).zip(&hyps) {
        let e = by_dir.entry(format!("{}-{}", row.0, row.1)).or_default();
        e.0.push(hyp.clone());
        e.1.push(rf.clone());
    }
    let mut directions = serde_json::Map::new();
    for (d, (hh, rr)) in &by_dir {
        directions.insert(d.clone(), json!(corpus_bleu(hh, rr, a.max_n, smoothing)?.bleu));
    }
    println!(
        "BLEU = {:.2} {} (BP = {:.3}, hyp_len = {}, ref_len = {}), exact match {:.2}%",
        report.bleu,
        report.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect::<Vec<_>>().join("/"),
        report.brevity_penalty,
        report.hyp_len,
        report.ref_len,
        100.0 * exact
    );
    if let Some(out) = &a.output {
        let j = json!({
            "bleu": report.bleu, "precisions": report.precisions, "matches": report.matches,
            "totals": report.totals, "brevity_penalty": report.brevity_penalty,
            "hyp_len": report.hyp_len, "ref_len": report.ref_len, "exact_match": exact,
            "directions": directions,
        });
        fs::write(out, serde_json::to_string_pretty(&j)? + "\n")?;
        let cfg = json!({"max_n": a.max_n, "smoothing": format!("{:?}", a.smoothing).to_lowercase()});
        data_manifest("eval", None, cfg, &[&a.hypotheses, &a.reference], out)?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    require(&[("--vocab", &a.vocab), ("--input", &a.input)])?;
    for c in &a.checkpoints {
        require(&[("checkpoint", c)])?;
    }
    ensure!(
        a.checkpoints.is_empty() || a.checkpoints.len() == a.configs.len(),
        "--checkpoints needs one entry per config ({} configs, {} checkpoints)",
        a.configs.len(),
        a.checkpoints.len()
    );
    let vocab = read_vocab(&a.vocab)?;
    let input = read_corpus(&a.input)?;
    check_tagged(&input)?;
    let subset = input.take(a.sentences);
    let srcs: Vec<Vec<u32>> = subset.pairs().iter().map(|p| mnmt_core::trainer::encode_pair(&vocab, p).src).collect();
    let cfg = search_config(&a.search, &vocab);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (i, name) in a.configs.iter().enumerate() {
        let model = match a.checkpoints.get(i) {
            Some(c) => load_model(c, &vocab)?,
            None => init_params(&ModelConfig::preset(name, vocab.len())?, a.seed),
        };
        let rep = latency_bench(&model, name, &srcs, &cfg, a.warmup, a.repeats)?;
        let decoded = decode_corpus(&model, &vocab, &subset, &cfg)?;
        let h: Vec<Vec<String>> = decoded.iter().map(|d| d.text.clone()).collect();
        let r: Vec<Vec<String>> = decoded.iter().map(|d| d.pair.target.clone()).collect();
        let bleu = corpus_bleu(&h, &r, 4, Smoothing::None)?.bleu;
        rows.push((name.clone(), rep.median_ms, bleu));
        reports.push(rep);
    }
    eprint!("{}", latency_table(&reports));
    let mut w = BufWriter::new(File::create(&a.output)?);
    write_tradeoff_csv(&mut w, &rows)?;
    w.flush()?;
    if let Some(p) = &a.latency {
        let mut w = BufWriter::new(File::create(p)?);
        write_latency_tsv(&mut w, &reports)?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mnmt_core::corpus::SentencePair;

    #[test]
    fn stats_rows_and_data_size() {
        let l = |s: &str| LangId::new(s).unwrap();
        let pair = |s: &str, t: &str| SentencePair {
            source: vec!["a".into()],
            target: vec!["b".into()],
            src_lang: l(s),
            tgt_lang: l(t),
        };
        let c = ParallelCorpus::new(vec![pair("en", "de"), pair("en", "de"), pair("de", "en")]);
        assert_eq!(stats_table(&c), "direction\tpairs\nde-en\t1\nen-de\t2\n\ntarget\tde\ten\ndata size\t2\t1\n");
    }
}
