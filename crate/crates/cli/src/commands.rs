use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use batkit::checkpoint;
use batkit::data::{
    detokenize, gen_corpus, load_corpus, read_jsonl, read_lines, tokenize, write_jsonl,
    write_lines, CorpusKind, CorpusSpec, TokenSeq, SEP,
};
use batkit::eval::{balanced_exam, load_exam, run_exam, EvalConfig};
use batkit::expansion::{
    expand_model, progressive_stack, stack_layers, verify_preservation, MapMode,
};
use batkit::model::{generate, Direction, ModelConfig, Params, Stage};
use batkit::rlhf::{
    ai_feedback, byte_density, load_preferences, random_pairs, ranking_accuracy,
    train_reward_model, FnReward, Judge, PpoTrainer, RewardFn,
};
use batkit::train::{
    train_in_place, InstructRecord, Objective, PromptResponsePair, TrainConfig,
};
use batkit::{precision, Precision};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::{Layers, ModelSpec};
use crate::manifest::{default_path, RunManifest};

pub struct Ctx {
    pub manifest: Option<PathBuf>,
}

impl Ctx {
    fn start(&self, command: &str) -> RunManifest {
        let p = match precision() {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        RunManifest::new(command, p)
    }

    /// Writes the manifest; called before any artifact is produced.
    fn commit(&self, m: &RunManifest) -> Result<()> {
        let path = self
            .manifest
            .clone()
            .unwrap_or_else(|| default_path(&m.command, m.outputs.first().map(PathBuf::as_path)));
        m.write(&path)
    }
}

fn load(path: &Path) -> Result<Params> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save(p: &Params, path: &Path) -> Result<()> {
    checkpoint::save(p, path).with_context(|| format!("writing checkpoint {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Trains with periodic loss lines on stdout.
fn fit(params: &mut Params, objective: &Objective, cfg: &TrainConfig, log_every: usize) -> Result<batkit::train::TrainReport> {
    let start = Instant::now();
    let last = cfg.steps.saturating_sub(1);
    let report = train_in_place(params, objective, cfg, |step, loss| {
        if (log_every > 0 && step % log_every == 0) || step == last {
            println!("step {step:>6}  loss {loss:.5}  {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    step: usize,
    loss: f64,
    grad_norm: f64,
}

fn write_curve(path: &Path, r: &batkit::train::TrainReport) -> Result<()> {
    let pts: Vec<CurvePoint> = r
        .losses
        .iter()
        .zip(&r.grad_norms)
        .enumerate()
        .map(|(step, (&loss, &grad_norm))| CurvePoint {
            step,
            loss,
            grad_norm,
        })
        .collect();
    write_jsonl(path, &pts)?;
    Ok(())
}

/// Pair line consumed by `ai-feedback` and produced by `gen-data --kind pairs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairLine {
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
}

pub fn gen_data(a: &GenData, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("gen-data");
    m.config(&serde_json::json!({
        "kind": format!("{:?}", a.kind).to_lowercase(),
        "size": a.size,
        "max_tokens": a.max_tokens,
        "min_unit": a.min_unit,
        "max_unit": a.max_unit,
        "categories": a.categories,
    }))?
    .seed("data", a.seed)
    .output(&a.out);
    ensure!(a.size > 0, "--size must be at least 1");
    ctx.commit(&m)?;
    let corpus = |kind| -> Result<()> {
        let spec = CorpusSpec::new(kind, a.size, a.seed, a.max_tokens)
            .with_unit_len(a.min_unit, a.max_unit);
        write_lines(&a.out, &gen_corpus(&spec)?)?;
        Ok(())
    };
    match a.kind {
        DataKind::Constant => corpus(CorpusKind::Constant)?,
        DataKind::Copy => corpus(CorpusKind::Copy)?,
        DataKind::Reversal => corpus(CorpusKind::Reversal)?,
        DataKind::Arithmetic => corpus(CorpusKind::Arithmetic)?,
        DataKind::Mixture => corpus(CorpusKind::Mixture)?,
        DataKind::Exam => write_jsonl(&a.out, &balanced_exam(a.size, a.seed, a.categories))?,
        DataKind::Instruct => {
            let recs: Vec<InstructRecord> = random_pairs(a.size, a.seed, a.max_unit, 1)
                .into_iter()
                .map(|(p, _, _)| InstructRecord::Pair {
                    response: p.chars().rev().collect(),
                    prompt: p,
                })
                .collect();
            write_jsonl(&a.out, &recs)?;
        }
        DataKind::Prompts => {
            let lines: Vec<String> = random_pairs(a.size, a.seed, a.max_unit, 1)
                .into_iter()
                .map(|(p, _, _)| p)
                .collect();
            write_lines(&a.out, &lines)?;
        }
        DataKind::Pairs => {
            let lines: Vec<PairLine> = random_pairs(a.size, a.seed, a.max_unit, a.max_unit)
                .into_iter()
                .map(|(prompt, response_a, response_b)| PairLine {
                    prompt,
                    response_a,
                    response_b,
                })
                .collect();
            write_jsonl(&a.out, &lines)?;
        }
    }
    println!("wrote {} items to {}", a.size, a.out.display());
    Ok(())
}

pub fn pretrain(a: &Pretrain, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("pretrain");
    let mut layers = Layers::new(&a.train)?;
    layers.model(&a.model);
    let (mut params, model_spec, cfg) = match &a.init {
        Some(init) => {
            m.input(init)?;
            let cfg = layers.resolve_train()?;
            (load(init)?, None, cfg)
        }
        None => {
            let s = layers.resolve()?;
            let seed = s.model.init_seed.unwrap_or(s.train.seed);
            m.seed("init", seed);
            (Params::init(s.model.config(), seed)?, Some(s.model), s.train)
        }
    };
    ensure!(
        params.stage == Stage::Pretrain,
        "pretrain needs a pretrain-stage checkpoint, got {:?}",
        params.stage
    );
    let docs = load_corpus(&a.corpus)?;
    let curve = sibling(&a.out, ".losses.jsonl");
    m.config(&serde_json::json!({ "model": model_spec, "train": cfg, "model_config": params.config }))?
        .seed("train", cfg.seed)
        .input(&a.corpus)?
        .output(&a.out)
        .output(&curve);
    ctx.commit(&m)?;
    println!(
        "pretraining {} parameters on {} documents",
        params.num_params(),
        docs.len()
    );
    let report = fit(&mut params, &Objective::Pretrain(docs), &cfg, a.train.log_every)?;
    save(&params, &a.out)?;
    write_curve(&curve, &report)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn instruct(a: &Instruct, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("instruct");
    let cfg = Layers::new(&a.train)?.resolve_train()?;
    let params = load(&a.init)?;
    let mut params = params.with_stage(Stage::Instruct)?;
    let records: Vec<InstructRecord> = read_jsonl(&a.data)?;
    let pairs = records
        .iter()
        .map(InstructRecord::to_pair)
        .collect::<batkit::Result<Vec<PromptResponsePair>>>()?;
    ensure!(!pairs.is_empty(), "{}: no instruction records", a.data.display());
    let curve = sibling(&a.out, ".losses.jsonl");
    m.config(&cfg)?
        .seed("train", cfg.seed)
        .input(&a.init)?
        .input(&a.data)?
        .output(&a.out)
        .output(&curve);
    ctx.commit(&m)?;
    let report = fit(&mut params, &Objective::Instruct(pairs), &cfg, a.train.log_every)?;
    if report.skipped > 0 {
        println!(
            "{} pair instances skipped for exceeding the context window",
            report.skipped
        );
    }
    save(&params, &a.out)?;
    write_curve(&curve, &report)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn reward_train(a: &RewardTrain, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("reward-train");
    let mut layers = Layers::new(&a.train)?;
    layers.string("preference_sign", a.preference_sign.as_deref());
    let cfg = layers.resolve_train()?;
    let init = load(&a.init)?;
    let keep = |r: &batkit::rlhf::PreferenceRecord| {
        !(a.drop_low_quality && r.quality_flag.as_deref() == Some("low"))
    };
    let prefs: Vec<_> = load_preferences(&a.prefs)?
        .into_iter()
        .filter(keep)
        .collect();
    m.config(&serde_json::json!({ "train": cfg, "drop_low_quality": a.drop_low_quality }))?
        .seed("train", cfg.seed)
        .input(&a.init)?
        .input(&a.prefs)?;
    if let Some(h) = &a.holdout {
        m.input(h)?;
    }
    m.output(&a.out);
    ctx.commit(&m)?;
    let (rm, report) = train_reward_model(&init, &prefs, &cfg)?;
    let tail = report.losses.len().min(10);
    let final_loss =
        report.losses[report.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
    println!(
        "{} records ({} ties, {} too long), final loss {final_loss:.4}",
        prefs.len(),
        report.ties,
        report.skipped
    );
    let acc = ranking_accuracy(&rm, &prefs, cfg.preference_sign)?;
    println!("train ranking accuracy {:.4} ({}/{})", acc.accuracy, acc.correct, acc.total);
    if let Some(h) = &a.holdout {
        let held: Vec<_> = load_preferences(h)?.into_iter().filter(keep).collect();
        let acc = ranking_accuracy(&rm, &held, cfg.preference_sign)?;
        println!(
            "held-out ranking accuracy {:.4} ({}/{})",
            acc.accuracy, acc.correct, acc.total
        );
    }
    save(&rm, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

enum Reward {
    Model(Params),
    Density(u8),
}

fn parse_reward(spec: &str) -> Result<Reward> {
    if let Some(b) = spec.strip_prefix("density:") {
        let bytes = b.as_bytes();
        ensure!(bytes.len() == 1, "density oracle needs exactly one byte, got {b:?}");
        return Ok(Reward::Density(bytes[0]));
    }
    let p = load(Path::new(spec))?;
    ensure!(
        p.stage == Stage::Reward,
        "{spec} is a {:?} checkpoint, not a reward model",
        p.stage
    );
    Ok(Reward::Model(p))
}

pub fn ppo(a: &Ppo, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("ppo");
    let mut layers = Layers::new(&a.train)?;
    layers
        .float("lambda_it", a.lambda_it)
        .float("lambda_pt", a.lambda_pt)
        .float("ppo_clip", a.ppo_clip)
        .int("ppo_inner_steps", a.ppo_inner_steps)
        .int("ppo_max_new_tokens", a.max_new_tokens)
        .float("ppo_temperature", a.temperature);
    let cfg = layers.resolve_train()?;
    let reference = load(&a.policy)?;
    let policy = reference.with_stage(Stage::RlPolicy)?;
    let reward = parse_reward(&a.reward)?;
    let prompts: Vec<TokenSeq> = read_lines(&a.prompts)?.iter().map(|l| tokenize(l)).collect();
    let pretrain = match &a.pretrain {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let stats_path = sibling(&a.out, ".stats.jsonl");
    m.config(&serde_json::json!({ "train": cfg, "epochs": a.epochs, "reward": a.reward }))?
        .seed("train", cfg.seed)
        .input(&a.policy)?
        .input(&a.prompts)?;
    if let Reward::Model(_) = reward {
        m.input(Path::new(&a.reward))?;
    }
    if let Some(p) = &a.pretrain {
        m.input(p)?;
    }
    m.output(&a.out).output(&stats_path);
    ctx.commit(&m)?;

    let density;
    let reward_fn: &dyn RewardFn = match &reward {
        Reward::Model(p) => p,
        Reward::Density(b) => {
            let b = *b;
            density = FnReward(move |_: &TokenSeq, r: &TokenSeq| byte_density(b, r));
            &density
        }
    };
    let mut trainer = PpoTrainer::new(policy, &reference, reward_fn, prompts, pretrain, cfg)?;
    let mut all = Vec::with_capacity(a.epochs);
    for _ in 0..a.epochs {
        let s = trainer.run_epoch()?;
        println!(
            "epoch {:>4}  reward {:.4}  log-ratio {:+.4}  clip {:.3}  len {:.1}",
            s.epoch,
            s.mean_reward,
            s.mean_log_ratio,
            s.clip_fraction.last().copied().unwrap_or(0.0),
            s.mean_response_len
        );
        all.push(s);
    }
    save(trainer.policy(), &a.out)?;
    write_jsonl(&stats_path, &all)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn target_config(src: &ModelConfig, a: &Expand) -> Result<ModelConfig> {
    if let Some(k) = a.width_mult {
        ensure!(k >= 1, "--width-mult must be at least 1");
        return Ok(ModelConfig {
            d_model: src.d_model * k,
            n_heads: src.n_heads * k,
            d_ff: src.d_ff * k,
            ..*src
        });
    }
    let d_model = a.d_model.unwrap_or(src.d_model);
    let n_heads = match a.n_heads {
        Some(h) => h,
        None => {
            ensure!(
                d_model % src.d_head == 0,
                "d_model {d_model} is not a multiple of d_head {}",
                src.d_head
            );
            d_model / src.d_head
        }
    };
    Ok(ModelConfig {
        d_model,
        n_heads,
        d_ff: a.d_ff.unwrap_or(src.d_ff),
        ..*src
    })
}

fn default_tol() -> f64 {
    match precision() {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-3,
    }
}

pub fn expand(a: &Expand, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("expand");
    let src = load(&a.src)?;
    let tgt_cfg = target_config(&src.config, a)?;
    let mode = match a.mode {
        Mode::Exact => MapMode::Exact,
        Mode::Approx => MapMode::Approx,
    };
    m.config(&serde_json::json!({ "target": tgt_cfg, "mode": format!("{mode:?}").to_lowercase(), "verify": a.verify, "probes": a.probes }))?
        .seed("maps", a.seed)
        .input(&a.src)?
        .output(&a.out);
    if let Some(p) = &a.maps {
        m.output(p);
    }
    ctx.commit(&m)?;
    let (tgt, maps) = expand_model(&src, tgt_cfg, a.seed, mode)?;
    save(&tgt, &a.out)?;
    if let Some(p) = &a.maps {
        maps.write_jsonl(p)?;
    }
    println!(
        "expanded d_model {} -> {}, heads {} -> {}, d_ff {} -> {}",
        src.config.d_model,
        tgt.config.d_model,
        src.config.n_heads,
        tgt.config.n_heads,
        src.config.d_ff,
        tgt.config.d_ff
    );
    if a.verify {
        let drift = verify_preservation(&src, &tgt, a.probes, a.seed)?;
        println!("max drift {drift:.3e} over {} probes", a.probes);
        let tol = default_tol();
        if mode == MapMode::Exact && drift > tol {
            bail!("drift {drift:.3e} exceeds {tol:.0e}");
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn stack(a: &Stack, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("stack");
    m.config(&serde_json::json!({ "times": a.times, "max_layers": a.max_layers }))?
        .input(&a.src)?
        .output(&a.out);
    ctx.commit(&m)?;
    let src = load(&a.src)?;
    let deep = stack_layers(&src, a.times, a.max_layers)?;
    save(&deep, &a.out)?;
    println!(
        "stacked {} -> {} layers; wrote {}",
        src.config.n_layers,
        deep.config.n_layers,
        a.out.display()
    );
    Ok(())
}

pub fn prog_stack(a: &ProgStack, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("prog-stack");
    let mut layers = Layers::new(&a.train)?;
    layers.model(&a.model);
    let s = layers.resolve()?;
    let stages = a.k as usize + 1;
    let steps = match a.stage_steps.len() {
        1 => vec![a.stage_steps[0]; stages],
        n if n == stages => a.stage_steps.clone(),
        n => bail!("--stage-steps needs 1 or {stages} values, got {n}"),
    };
    let docs = load_corpus(&a.corpus)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".stages.jsonl"));
    let seed = s.model.init_seed.unwrap_or(s.train.seed);
    let spec = ModelSpec {
        n_layers: a.target_layers,
        ..s.model.clone()
    };
    m.config(&serde_json::json!({ "model": spec, "train": s.train, "target_layers": a.target_layers, "k": a.k, "stage_steps": steps }))?
        .seed("init", seed)
        .seed("train", s.train.seed)
        .input(&a.corpus)?
        .output(&a.out)
        .output(&report_path);
    ctx.commit(&m)?;
    let objective = Objective::Pretrain(docs);
    let log_every = a.train.log_every;
    let (params, reports) = progressive_stack(
        spec.config(),
        a.target_layers,
        a.k,
        &steps,
        seed,
        |mut p, steps, stage| {
            println!("stage {stage}: {} layers, {steps} steps", p.config.n_layers);
            let cfg = TrainConfig {
                steps,
                ..s.train.clone()
            };
            let r = fit(&mut p, &objective, &cfg, log_every).map_err(|e| {
                batkit::Error::Contract(format!("stage {stage} failed: {e:#}"))
            })?;
            Ok((p, r.losses))
        },
    )?;
    for r in &reports {
        println!(
            "depth {:>3}  steps {:>6}  final loss {:.5}  {:.2}s  duplicated exactly: {}",
            r.depth,
            r.steps,
            r.losses.last().copied().unwrap_or(f64::NAN),
            r.seconds,
            r.duplicated_exactly.map_or("-".into(), |b| b.to_string())
        );
    }
    save(&params, &a.out)?;
    write_jsonl(&report_path, &reports)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn verify(a: &Verify, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("verify");
    let tol = a.tol.unwrap_or_else(default_tol);
    m.config(&serde_json::json!({ "probes": a.probes, "tol": tol }))?
        .seed("probes", a.seed)
        .input(&a.src)?
        .input(&a.tgt)?;
    ctx.commit(&m)?;
    let drift = verify_preservation(&load(&a.src)?, &load(&a.tgt)?, a.probes, a.seed)?;
    println!("max drift {drift:.3e} over {} probes (tolerance {tol:.0e})", a.probes);
    ensure!(drift <= tol, "drift {drift:.3e} exceeds {tol:.0e}");
    Ok(())
}

pub fn eval(a: &Eval, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("eval");
    let cfg = EvalConfig {
        style: a.style.parse()?,
        score: a.score.parse()?,
        cot_tokens: a.cot_tokens,
    };
    m.config(&serde_json::json!({ "shots": a.shots, "style": a.style, "score": a.score, "cot_tokens": a.cot_tokens }))?
        .input(&a.ckpt)?
        .input(&a.exam)?;
    if let Some(r) = &a.report {
        m.output(r);
    }
    ctx.commit(&m)?;
    let params = load(&a.ckpt)?;
    let items = load_exam(&a.exam)?;
    let report = run_exam(&params, &items, a.shots, &cfg)?;
    print!("{}", report.to_text());
    if let Some(r) = &a.report {
        std::fs::write(r, report.to_jsonl()?)
            .with_context(|| format!("writing {}", r.display()))?;
    }
    Ok(())
}

pub fn sample(a: &Sample, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("sample");
    m.config(&serde_json::json!({
        "prompt": a.prompt,
        "instruct": a.instruct,
        "direction": format!("{:?}", a.direction).to_lowercase(),
        "max_new_tokens": a.max_new_tokens,
        "temperature": a.temperature,
    }))?
    .seed("sample", a.seed)
    .input(&a.ckpt)?;
    ctx.commit(&m)?;
    let params = load(&a.ckpt)?;
    let mut prompt = tokenize(&a.prompt);
    if a.instruct {
        prompt.push(SEP);
    }
    let dir = match a.direction {
        Dir::Forward => Direction::Forward,
        Dir::Backward => Direction::Backward,
    };
    let g = generate(&params, &prompt, dir, a.max_new_tokens, a.temperature, a.seed)?;
    let text: String = detokenize(&g.tokens)
        .text
        .chars()
        .map(|c| match c {
            '\n' => c.to_string(),
            c if c.is_control() => c.escape_default().to_string(),
            c => c.to_string(),
        })
        .collect();
    println!("{text}");
    Ok(())
}

pub fn serve(a: &Serve, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("serve");
    m.config(&serde_json::json!({ "addr": a.addr.to_string() }))?
        .output(&a.store);
    ctx.commit(&m)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(pref_service::run(a.addr, &a.store))
}

pub fn ai_feedback_cmd(a: &AiFeedback, ctx: &Ctx) -> Result<()> {
    let mut m = ctx.start("ai-feedback");
    let created_at: DateTime<Utc> = match &a.created_at {
        Some(s) => DateTime::parse_from_rfc3339(s)
            .with_context(|| format!("--created-at {s:?} is not RFC 3339"))?
            .with_timezone(&Utc),
        None => Utc::now(),
    };
    m.config(&serde_json::json!({ "judge": a.judge, "created_at": created_at }))?
        .input(&a.pairs)?;
    if let Some(p) = &a.model {
        m.input(p)?;
    }
    m.output(&a.out);
    let model = a.model.as_deref().map(load).transpose()?;
    let judge = Judge::parse(&a.judge, model)?;
    let pairs: Vec<PairLine> = read_jsonl(&a.pairs)?;
    ctx.commit(&m)?;
    let records = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            ai_feedback(
                &judge,
                format!("ai-{i}"),
                &p.prompt,
                &p.response_a,
                &p.response_b,
                created_at,
            )
        })
        .collect::<batkit::Result<Vec<_>>>()?;
    write_jsonl(&a.out, &records)?;
    let count = |d| records.iter().filter(|r| r.d == d).count();
    println!(
        "labelled {} pairs with {}: {} prefer A, {} prefer B, {} ties",
        records.len(),
        judge.name(),
        count(-1),
        count(1),
        count(0)
    );
    Ok(())
}
