//! Pipeline stages. Each stage reads completed upstream directories, writes
//! into its own fresh directory and seals it with a manifest and a marker.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use onerec::ecpo::{posttrain_step, PostTrainer, RlData, StepMetrics};
use onerec::generation::write_generation_jsonl;
use onerec::policy::Policy;
use onerec::reward::{pairs_from_log, LabeledPair, PScoreFeatures, PScoreModel};
use onerec::stats::{auc, mean, spearman};
use onerec::tokenizer::io::{read_codebook, read_codes_jsonl, write_codebook, write_codes_jsonl};
use onerec::tokenizer::{fit_random_rq, fit_rq_kmeans, tokenizer_metrics, CodebookStack};
use onerec::train::{
    eval_ntp, session_samples, write_csv, Corpus, PretrainMetrics, Pretrainer, Sample,
};
use onerec::world::{
    generate_world, load_snapshot, rsft_filter, save_snapshot, simulate_sessions, InteractionLog,
    LoggingPolicy, Objective, Session, World,
};
use onerec::Scalar;

use crate::config::{derive_seed, hash_value, Precision, RunConfig};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::manifest::{
    is_complete, list_files, write_json, write_marker, write_table, Manifest, Status, DONE, FAILED,
    MANIFEST,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicySource {
    Pretrain,
    Posttrain,
}

impl PolicySource {
    pub fn stage(self) -> Stage {
        match self {
            Self::Pretrain => Stage::Pretrain,
            Self::Posttrain => Stage::Posttrain,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenWorld,
    FitTokenizer,
    Tokenize,
    Pretrain,
    TrainPscore,
    Posttrain,
    Generate(PolicySource),
    Eval(PolicySource),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::GenWorld => "gen-world",
            Self::FitTokenizer => "fit-tokenizer",
            Self::Tokenize => "tokenize",
            Self::Pretrain => "pretrain",
            Self::TrainPscore => "train-pscore",
            Self::Posttrain => "posttrain",
            Self::Generate(PolicySource::Pretrain) => "generate-pretrain",
            Self::Generate(PolicySource::Posttrain) => "generate-posttrain",
            Self::Eval(PolicySource::Pretrain) => "eval-pretrain",
            Self::Eval(PolicySource::Posttrain) => "eval-posttrain",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Self::GenWorld,
            Self::FitTokenizer,
            Self::Tokenize,
            Self::Pretrain,
            Self::TrainPscore,
            Self::Posttrain,
            Self::Generate(PolicySource::Pretrain),
            Self::Generate(PolicySource::Posttrain),
            Self::Eval(PolicySource::Pretrain),
            Self::Eval(PolicySource::Posttrain),
        ];
        all.into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown stage {s:?}")))
    }
}

impl Stage {
    /// Upstream stages. Generation and evaluation pick up a completed P-Score
    /// stage when the run has one.
    pub fn deps(self, cfg: &RunConfig, run_dir: &Path) -> Vec<Stage> {
        match self {
            Self::GenWorld => vec![],
            Self::FitTokenizer => vec![Self::GenWorld],
            Self::Tokenize => vec![Self::FitTokenizer],
            Self::Pretrain => vec![Self::GenWorld, Self::FitTokenizer],
            Self::TrainPscore => vec![Self::GenWorld],
            Self::Posttrain => {
                let mut d = vec![Self::Pretrain];
                if cfg.needs_pscore() {
                    d.push(Self::TrainPscore);
                }
                d
            }
            Self::Generate(src) | Self::Eval(src) => {
                let mut d = vec![src.stage()];
                if src == PolicySource::Posttrain && cfg.needs_pscore()
                    || is_complete(&run_dir.join(Self::TrainPscore.to_string()))
                {
                    d.push(Self::TrainPscore);
                }
                d
            }
        }
    }

    fn own_section(self, cfg: &RunConfig) -> Result<Value> {
        Ok(match self {
            Self::GenWorld => json!({ "seed": cfg.seed, "world": cfg.world }),
            Self::FitTokenizer => {
                let m = cfg.model_config()?;
                json!({ "n_t": m.n_t, "l_t": m.l_t })
            }
            Self::Tokenize => Value::Null,
            Self::Pretrain => json!({
                "precision": cfg.precision,
                "model": cfg.model_config()?,
                "pretrain": cfg.pretrain,
                "ntp_every": cfg.eval.ntp_every,
                "ntp_samples": cfg.eval.ntp_samples,
            }),
            Self::TrainPscore => json!({ "pscore": cfg.pscore }),
            Self::Posttrain => json!({ "posttrain": cfg.posttrain }),
            Self::Generate(_) | Self::Eval(_) => json!({
                "users": cfg.eval.users,
                "ks": cfg.eval.ks,
                "generation": cfg.eval.generation,
                "legality_width": cfg.eval.legality_width,
            }),
        })
    }

    /// The configuration slice this stage consumes, nested with its upstream slices.
    pub fn section(self, cfg: &RunConfig, run_dir: &Path) -> Result<Value> {
        let mut deps = serde_json::Map::new();
        for d in self.deps(cfg, run_dir) {
            deps.insert(d.to_string(), d.section(cfg, run_dir)?);
        }
        Ok(json!({ "stage": self.to_string(), "own": self.own_section(cfg)?, "deps": deps }))
    }

    pub fn config_hash(self, cfg: &RunConfig, run_dir: &Path) -> Result<String> {
        Ok(hash_value(&self.section(cfg, run_dir)?))
    }
}

// ---------------------------------------------------------------------------
// In-memory building blocks shared by the stages and the experiment suite.

/// Generates the world and logs sessions under the logging policy.
pub fn build_world(cfg: &RunConfig) -> Result<(World, InteractionLog)> {
    let wc = cfg.world_config();
    let world = generate_world(&wc)?;
    let log = simulate_sessions(
        &world,
        &LoggingPolicy::from_world(&world),
        wc.sessions_per_user,
        derive_seed(cfg.seed, "sessions"),
    );
    Ok((world, log))
}

/// RQ-Kmeans codebook fitted on raw item content.
pub fn fit_tokenizer(cfg: &RunConfig, world: &World) -> Result<(CodebookStack, Vec<Vec<usize>>)> {
    let m = cfg.model_config()?;
    let shape = (world.cfg.content_tokens, world.cfg.content_dim);
    let fit = fit_rq_kmeans(
        &world.content_matrix(),
        shape,
        m.n_t,
        m.l_t,
        derive_seed(cfg.seed, "tokenizer"),
    )?;
    Ok((fit.stack, fit.codes))
}

pub fn build_corpus(
    cfg: &RunConfig,
    world: &World,
    log: &InteractionLog,
    stack: &CodebookStack,
    codes: Vec<Vec<usize>>,
) -> Result<Corpus> {
    let m = cfg.model_config()?;
    Ok(Corpus::build(
        world,
        log,
        codes,
        stack.trie.clone(),
        &m.encoder(),
        derive_seed(cfg.seed, "corpus"),
    ))
}

/// Every tenth session is held out for NTP evaluation.
pub fn split_sessions(sessions: &[Session]) -> (Vec<Session>, Vec<Session>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in sessions.iter().enumerate() {
        if i % 10 == 9 {
            held.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, held)
}

/// Everything the training stages consume, built in memory.
pub struct Prepared {
    pub cfg: RunConfig,
    pub world: World,
    pub log: InteractionLog,
    pub stack: CodebookStack,
    pub corpus: Corpus,
    pub train: Vec<Sample>,
    pub held: Vec<Sample>,
    /// Above-median-playtime training sessions.
    pub rsft: Vec<Sample>,
}

impl Prepared {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (world, log) = build_world(cfg)?;
        let (stack, codes) = fit_tokenizer(cfg, &world)?;
        Self::assemble(cfg, world, log, stack, codes)
    }

    pub fn assemble(
        cfg: &RunConfig,
        world: World,
        log: InteractionLog,
        stack: CodebookStack,
        codes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let corpus = build_corpus(cfg, &world, &log, &stack, codes)?;
        let (train_s, held_s) = split_sessions(&log.sessions);
        Ok(Self {
            cfg: cfg.clone(),
            train: session_samples(&train_s),
            held: session_samples(&held_s),
            rsft: session_samples(&rsft_filter(&train_s)),
            world,
            log,
            stack,
            corpus,
        })
    }

    pub fn held_eval(&self) -> &[Sample] {
        &self.held[..self.held.len().min(self.cfg.eval.ntp_samples)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub step: usize,
    pub samples_seen: usize,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: f64,
    pub eval_loss: f64,
}

pub struct PretrainOutcome<T> {
    pub policy: Policy<T>,
    pub steps: Vec<PretrainMetrics>,
    pub checkpoints: Vec<Checkpoint>,
}

pub fn pretrain_policy<T: Scalar>(p: &Prepared) -> Result<PretrainOutcome<T>> {
    let cfg = &p.cfg;
    let model = cfg.model_config()?;
    let mut policy = Policy::<T>::new(&model, derive_seed(cfg.seed, "policy-init"))?;
    let pcfg = cfg.pretrain_config();
    let mut trainer = Pretrainer::new(&policy, &pcfg);
    let held = p.held_eval();
    let mut checkpoints = vec![Checkpoint {
        step: 0,
        samples_seen: 0,
        train_loss: f64::NAN,
        eval_loss: eval_ntp(&policy, &p.corpus, held)?,
    }];
    let mut steps = Vec::with_capacity(pcfg.steps);
    let mut window = Vec::new();
    for s in 1..=pcfg.steps {
        let m = trainer.step(&mut policy, &p.corpus, &p.train)?;
        window.push(m.loss);
        steps.push(m);
        let due = cfg.eval.ntp_every > 0 && s % cfg.eval.ntp_every == 0;
        if due || s == pcfg.steps {
            checkpoints.push(Checkpoint {
                step: s,
                samples_seen: s * pcfg.batch,
                train_loss: mean(&window),
                eval_loss: eval_ntp(&policy, &p.corpus, held)?,
            });
            window.clear();
        }
    }
    Ok(PretrainOutcome {
        policy,
        steps,
        checkpoints,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PScoreReport {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub final_loss: f64,
    /// Held-out AUC of each tower against its label.
    pub tower_auc: BTreeMap<String, f64>,
    /// Held-out rank correlation of the fused score with the true composite.
    pub pscore_composite_spearman: f64,
}

/// Trains the reward model on four fifths of the logged pairs and scores the rest.
pub fn train_pscore(
    cfg: &RunConfig,
    world: &World,
    log: &InteractionLog,
) -> Result<(PScoreModel<f64>, PScoreFeatures, Vec<f64>, PScoreReport)> {
    let feats = PScoreFeatures::from_world(world, log);
    let pairs = pairs_from_log(log);
    let (train, held): (Vec<(usize, LabeledPair)>, Vec<(usize, LabeledPair)>) =
        pairs.into_iter().enumerate().partition(|(i, _)| i % 5 != 4);
    let train: Vec<LabeledPair> = train.into_iter().map(|(_, p)| p).collect();
    let held: Vec<LabeledPair> = held.into_iter().map(|(_, p)| p).collect();
    let mut model = PScoreModel::<f64>::for_world(world, &feats, &cfg.pscore_config())?;
    let losses = model.train(&feats, &train)?;
    let users: Vec<usize> = held.iter().map(|p| p.user).collect();
    let items: Vec<usize> = held.iter().map(|p| p.item).collect();
    let pred = model.predict(&feats, &users, &items)?;
    let mut tower_auc = BTreeMap::new();
    for o in Objective::ALL {
        let scores: Vec<f64> = pred.iter().map(|p| p.towers[o.index()]).collect();
        let labels: Vec<bool> = held.iter().map(|p| p.label(o.index()) > 0.5).collect();
        // A label that never (or always) fires in the held-out split has no AUC.
        tower_auc.insert(
            o.name().to_string(),
            auc(&scores, &labels).unwrap_or(f64::NAN),
        );
    }
    let fused: Vec<f64> = pred.iter().map(|p| p.pscore).collect();
    let truth: Vec<f64> = held
        .iter()
        .map(|p| world.true_reward(p.user, p.item).composite)
        .collect();
    let report = PScoreReport {
        train_pairs: train.len(),
        held_out_pairs: held.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        tower_auc,
        pscore_composite_spearman: spearman(&fused, &truth).unwrap_or(f64::NAN),
    };
    Ok((model, feats, losses, report))
}

/// Runs `cfg.posttrain.steps` joint steps in place.
pub fn posttrain_policy<T: Scalar>(
    p: &Prepared,
    policy: &mut Policy<T>,
    data: &RlData,
) -> Result<Vec<StepMetrics>> {
    let ecfg = p.cfg.posttrain_config();
    let pool: Vec<usize> = (0..p.corpus.users()).collect();
    let mut tr = PostTrainer::new(policy, &ecfg)?;
    let mut out = Vec::with_capacity(ecfg.steps);
    for _ in 0..ecfg.steps {
        out.push(posttrain_step(
            &mut tr, policy, &p.corpus, &p.rsft, &pool, data,
        )?);
    }
    Ok(out)
}

pub fn evaluate_policy<T: Scalar>(
    p: &Prepared,
    policy: &Policy<T>,
    data: &RlData,
) -> Result<EvalReport> {
    evaluate(
        policy,
        &p.corpus,
        data,
        &p.cfg.eval,
        derive_seed(p.cfg.seed, "eval"),
    )
}

// ---------------------------------------------------------------------------
// Stage execution.

fn stage_dir(run_dir: &Path, stage: Stage) -> std::path::PathBuf {
    run_dir.join(stage.to_string())
}

fn load_world(run_dir: &Path) -> Result<(World, InteractionLog)> {
    Ok(load_snapshot(
        &stage_dir(run_dir, Stage::GenWorld).join("snapshot"),
    )?)
}

fn load_prepared(cfg: &RunConfig, run_dir: &Path) -> Result<Prepared> {
    let (world, log) = load_world(run_dir)?;
    let tok = stage_dir(run_dir, Stage::FitTokenizer);
    let stack = read_codebook(&mut BufReader::new(fs::File::open(
        tok.join("codebook.bin"),
    )?))?;
    let codes = read_codes_jsonl(BufReader::new(fs::File::open(tok.join("codes.jsonl"))?))?;
    Prepared::assemble(cfg, world, log, stack, codes)
}

fn load_pscore(
    run_dir: &Path,
    world: &World,
    log: &InteractionLog,
) -> Result<(PScoreModel<f64>, PScoreFeatures)> {
    let model =
        PScoreModel::<f64>::load(&stage_dir(run_dir, Stage::TrainPscore).join("pscore.ckpt"))?;
    Ok((model, PScoreFeatures::from_world(world, log)))
}

fn summary_value<S: Serialize>(s: &S) -> Result<Value> {
    Ok(serde_json::to_value(s)?)
}

fn run_gen_world(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (world, log) = build_world(cfg)?;
    save_snapshot(&dir.join("snapshot"), &world, &log)?;
    let events: Vec<_> = log.sessions.iter().flat_map(|s| &s.events).collect();
    let mut positive = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for o in Objective::ALL {
        let n = events.len().max(1) as f64;
        positive.insert(
            o.name(),
            events.iter().filter(|e| e.label(o)).count() as f64 / n,
        );
        truth.insert(
            o.name(),
            events
                .iter()
                .map(|e| world.true_reward(e.user, e.item).get(o))
                .sum::<f64>()
                / n,
        );
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "users": world.users(),
            "items": world.items(),
            "viral_items": world.viral.iter().filter(|v| **v).count(),
            "history_events": log.history.iter().map(Vec::len).sum::<usize>(),
            "sessions": log.sessions.len(),
            "session_events": events.len(),
            "logged_positive_rate": positive,
            "logged_true_probability": truth,
            "mean_session_playtime": mean(&log.sessions.iter().map(Session::playtime).collect::<Vec<_>>()),
        }),
    )
}

fn run_fit_tokenizer(cfg: &RunConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    let (world, _) = load_world(run_dir)?;
    let m = cfg.model_config()?;
    let emb = world.content_matrix();
    let shape = (world.cfg.content_tokens, world.cfg.content_dim);
    let fit = fit_rq_kmeans(
        &emb,
        shape,
        m.n_t,
        m.l_t,
        derive_seed(cfg.seed, "tokenizer"),
    )?;
    let (bstack, bcodes) = fit_random_rq(
        &emb,
        shape,
        m.n_t,
        m.l_t,
        derive_seed(cfg.seed, "tokenizer-baseline"),
    )?;
    let mut w = BufWriter::new(fs::File::create(dir.join("codebook.bin"))?);
    write_codebook(&mut w, &fit.stack)?;
    drop(w);
    let mut w = BufWriter::new(fs::File::create(dir.join("codes.jsonl"))?);
    write_codes_jsonl(&mut w, &fit.codes)?;
    drop(w);
    let ours = tokenizer_metrics(&emb, &fit.codes, &fit.stack);
    let base = tokenizer_metrics(&emb, &bcodes, &bstack);
    let header: Vec<String> = [
        "layer",
        "utilization",
        "entropy",
        "kmeans_objective",
        "baseline_utilization",
        "baseline_entropy",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = (0..m.l_t)
        .map(|l| {
            vec![
                l.to_string(),
                ours.utilization[l].to_string(),
                ours.entropy[l].to_string(),
                fit.runs[l].objective().to_string(),
                base.utilization[l].to_string(),
                base.entropy[l].to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("layers.csv"), &header, &rows)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "n_t": m.n_t,
            "l_t": m.l_t,
            "items": fit.codes.len(),
            "distinct_ids": fit.stack.trie.len(),
            "rq_kmeans": ours,
            "random_codebook": base,
        }),
    )
}

fn run_tokenize(run_dir: &Path, dir: &Path) -> Result<()> {
    let (world, _) = load_world(run_dir)?;
    let tok = stage_dir(run_dir, Stage::FitTokenizer);
    let stack = read_codebook(&mut BufReader::new(fs::File::open(
        tok.join("codebook.bin"),
    )?))?;
    let fitted = read_codes_jsonl(BufReader::new(fs::File::open(tok.join("codes.jsonl"))?))?;
    let emb = world.content_matrix();
    let codes: Vec<Vec<usize>> = (0..emb.rows())
        .map(|i| stack.quantize(emb.row(i)).codes)
        .collect();
    let mut w = BufWriter::new(fs::File::create(dir.join("codes.jsonl"))?);
    write_codes_jsonl(&mut w, &codes)?;
    drop(w);
    let agree = codes.iter().zip(&fitted).filter(|(a, b)| a == b).count();
    let mut distinct = codes.clone();
    distinct.sort();
    distinct.dedup();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "items": codes.len(),
            "distinct_ids": distinct.len(),
            "agreement_with_fit": agree as f64 / codes.len().max(1) as f64,
        }),
    )
}

fn run_pretrain<T: Scalar>(cfg: &RunConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    let p = load_prepared(cfg, run_dir)?;
    let out = pretrain_policy::<T>(&p)?;
    out.policy.save(&dir.join("policy.ckpt"))?;
    write_csv(fs::File::create(dir.join("metrics.csv"))?, &out.steps)?;
    write_csv(
        fs::File::create(dir.join("checkpoints.csv"))?,
        &out.checkpoints,
    )?;
    let tail = &out.steps[out.steps.len().saturating_sub(50)..];
    let last = out.checkpoints.last().expect("final checkpoint");
    write_json(
        &dir.join("summary.json"),
        &json!({
            "model": out.policy.cfg.name,
            "params": out.policy.num_params(),
            "steps": out.steps.len(),
            "samples_seen": last.samples_seen,
            "uniform_loss": out.policy.cfg.uniform_loss(),
            "initial_eval_loss": out.checkpoints[0].eval_loss,
            "final_eval_loss": last.eval_loss,
            "final_train_loss": mean(&tail.iter().map(|m| m.loss).collect::<Vec<_>>()),
        }),
    )
}

fn run_train_pscore(cfg: &RunConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    let (world, log) = load_world(run_dir)?;
    let (model, _, losses, report) = train_pscore(cfg, &world, &log)?;
    model.save(&dir.join("pscore.ckpt"))?;
    #[derive(Serialize)]
    struct Epoch {
        epoch: usize,
        loss: f64,
    }
    let rows: Vec<Epoch> = losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| Epoch { epoch: i + 1, loss })
        .collect();
    write_csv(fs::File::create(dir.join("metrics.csv"))?, &rows)?;
    write_json(&dir.join("summary.json"), &summary_value(&report)?)
}

fn run_posttrain<T: Scalar>(cfg: &RunConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    let p = load_prepared(cfg, run_dir)?;
    let mut policy = Policy::<T>::load(&stage_dir(run_dir, Stage::Pretrain).join("policy.ckpt"))?;
    let ps = if cfg.needs_pscore() {
        Some(load_pscore(run_dir, &p.world, &p.log)?)
    } else {
        None
    };
    let data = RlData {
        world: &p.world,
        pscore: ps.as_ref().map(|(m, f)| (m, f)),
    };
    let steps = posttrain_policy(&p, &mut policy, &data)?;
    policy.save(&dir.join("policy.ckpt"))?;
    write_csv(fs::File::create(dir.join("metrics.csv"))?, &steps)?;
    let tail = &steps[steps.len().saturating_sub(10)..];
    let avg = |f: fn(&StepMetrics) -> f64| {
        let v: Vec<f64> = tail.iter().map(f).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean(&v)
        }
    };
    write_json(
        &dir.join("summary.json"),
        &json!({
            "steps": steps.len(),
            "rl_terms": steps.iter().map(|m| m.rl_terms).sum::<usize>(),
            "final_mean_reward": avg(|m| m.mean_reward),
            "final_legality_rate": avg(|m| m.legality_rate),
            "final_viral_exposure": avg(|m| m.viral_exposure),
            "final_ntp_loss": avg(|m| m.ntp_loss),
            "final_clip_fraction": avg(|m| m.clip_fraction),
        }),
    )
}

fn eval_common<T: Scalar>(
    cfg: &RunConfig,
    run_dir: &Path,
    src: PolicySource,
) -> Result<EvalReport> {
    let p = load_prepared(cfg, run_dir)?;
    let policy = Policy::<T>::load(&stage_dir(run_dir, src.stage()).join("policy.ckpt"))?;
    let with_ps = Stage::Eval(src)
        .deps(cfg, run_dir)
        .contains(&Stage::TrainPscore);
    let ps = if with_ps {
        Some(load_pscore(run_dir, &p.world, &p.log)?)
    } else {
        None
    };
    let data = RlData {
        world: &p.world,
        pscore: ps.as_ref().map(|(m, f)| (m, f)),
    };
    evaluate_policy(&p, &policy, &data)
}

fn run_generate<T: Scalar>(
    cfg: &RunConfig,
    run_dir: &Path,
    dir: &Path,
    src: PolicySource,
) -> Result<()> {
    let report = eval_common::<T>(cfg, run_dir, src)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("generations.jsonl"))?);
    write_generation_jsonl(&mut w, &report.generations)?;
    drop(w);
    let keep = ["users", "legality", "output_legality", "viral_exposure"];
    let summary: BTreeMap<&String, &f64> = report
        .summary
        .iter()
        .filter(|(k, _)| keep.contains(&k.as_str()))
        .collect();
    write_json(&dir.join("summary.json"), &summary)
}

fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    run_dir: &Path,
    dir: &Path,
    src: PolicySource,
) -> Result<()> {
    let report = eval_common::<T>(cfg, run_dir, src)?;
    write_json(&dir.join("summary.json"), &report.summary)?;
    write_per_user(&dir.join("per_user.csv"), &report)
}

pub fn write_per_user(path: &Path, report: &EvalReport) -> Result<()> {
    let keys: Vec<String> = report
        .per_user
        .first()
        .map(|u| u.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let header: Vec<String> = std::iter::once("user".to_string())
        .chain(keys.iter().cloned())
        .collect();
    let rows: Vec<Vec<String>> = report
        .per_user
        .iter()
        .map(|u| {
            std::iter::once(u.user.to_string())
                .chain(keys.iter().map(|k| u.metrics[k].to_string()))
                .collect()
        })
        .collect();
    write_table(path, &header, &rows)
}

fn execute(stage: Stage, cfg: &RunConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    macro_rules! by_precision {
        ($f:ident, $($arg:expr),*) => {
            match cfg.precision {
                Precision::F32 => $f::<f32>($($arg),*),
                Precision::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match stage {
        Stage::GenWorld => run_gen_world(cfg, dir),
        Stage::FitTokenizer => run_fit_tokenizer(cfg, run_dir, dir),
        Stage::Tokenize => run_tokenize(run_dir, dir),
        Stage::Pretrain => by_precision!(run_pretrain, cfg, run_dir, dir),
        Stage::TrainPscore => run_train_pscore(cfg, run_dir, dir),
        Stage::Posttrain => by_precision!(run_posttrain, cfg, run_dir, dir),
        Stage::Generate(src) => by_precision!(run_generate, cfg, run_dir, dir, src),
        Stage::Eval(src) => by_precision!(run_eval, cfg, run_dir, dir, src),
    }
}

/// Verifies that every upstream stage completed under a matching configuration;
/// returns upstream name to hash.
fn check_upstream(
    stage: Stage,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<BTreeMap<String, String>> {
    let mut upstream = BTreeMap::new();
    for d in stage.deps(cfg, run_dir) {
        let ddir = stage_dir(run_dir, d);
        if !is_complete(&ddir) {
            return Err(HarnessError::MissingStage {
                stage: stage.to_string(),
                missing: d.to_string(),
            });
        }
        let m = Manifest::read(&ddir)?;
        if m.config_hash != d.config_hash(cfg, run_dir)? {
            return Err(HarnessError::ConfigMismatch {
                stage: stage.to_string(),
                upstream: d.to_string(),
            });
        }
        upstream.insert(d.to_string(), m.config_hash);
    }
    Ok(upstream)
}

/// Runs one stage into `run_dir/<stage>`, which must not exist yet. A failing
/// stage keeps whatever it wrote and is sealed with a FAILED marker.
pub fn run_stage(run_dir: &Path, stage: Stage, cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = stage_dir(run_dir, stage);
    if dir.exists() {
        return Err(HarnessError::DirExists(dir));
    }
    let upstream = check_upstream(stage, cfg, run_dir)?;
    fs::create_dir_all(run_dir)?;
    fs::create_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let result = execute(stage, cfg, run_dir, &dir);
    let mut manifest = Manifest {
        stage: stage.to_string(),
        status: Status::Complete,
        config_hash: stage.config_hash(cfg, run_dir)?,
        run_config_hash: hash_value(&serde_json::to_value(cfg)?),
        seed: cfg.seed,
        harness_version: env!("CARGO_PKG_VERSION").to_string(),
        core_version: onerec::VERSION.to_string(),
        upstream,
        files: list_files(&dir)?,
        error: None,
    };
    match result {
        Ok(()) => {
            write_json(&dir.join(MANIFEST), &manifest)?;
            write_marker(&dir.join(DONE), &format!("{}\n", manifest.config_hash))?;
            Ok(manifest)
        }
        Err(e) => {
            let record = e.record();
            manifest.status = Status::Failed;
            manifest.error = Some(record.clone());
            write_json(&dir.join(MANIFEST), &manifest)?;
            write_marker(
                &dir.join(FAILED),
                &format!("{}\n", serde_json::to_string(&record)?),
            )?;
            Err(e)
        }
    }
}

/// Checks that `stages` can run in order (each dependency earlier in the
/// list or already complete), then runs them.
pub fn run_pipeline(run_dir: &Path, stages: &[Stage], cfg: &RunConfig) -> Result<Vec<Manifest>> {
    cfg.validate()?;
    for (i, s) in stages.iter().enumerate() {
        for d in s.deps(cfg, run_dir) {
            if !stages[..i].contains(&d) && !is_complete(&stage_dir(run_dir, d)) {
                return Err(HarnessError::MissingStage {
                    stage: s.to_string(),
                    missing: d.to_string(),
                });
            }
        }
    }
    stages.iter().map(|&s| run_stage(run_dir, s, cfg)).collect()
}

/// The stage list of a full run, in dependency order.
pub fn full_pipeline(cfg: &RunConfig) -> Vec<Stage> {
    let mut s = vec![Stage::GenWorld, Stage::FitTokenizer, Stage::Pretrain];
    if cfg.needs_pscore() {
        s.push(Stage::TrainPscore);
    }
    s.extend([
        Stage::Eval(PolicySource::Pretrain),
        Stage::Posttrain,
        Stage::Eval(PolicySource::Posttrain),
    ]);
    s
}
