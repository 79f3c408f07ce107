//! Joint training: the toy model learns from mini-batches while the
//! scheduler learns, by REINFORCE, which quantiles make those batches useful.
//!
//! Per epoch the training pairs are split into search spaces. The first
//! epoch (and every epoch under uniform batching) draws shuffled batches,
//! since there is no embedding cache yet. Later epochs chain batches through
//! the cached similarity matrix of each space. After every model step the
//! reward is the drop in masked-token loss on the same batch and mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::batcher::{baseline_action, batches_per_space, compose_batch, uniform_batches, BatchPlan, SamplingPolicySpec};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalbench::{recall_at_k, selected_negative_links};
use crate::linalg::Matrix;
use crate::manifest::RunManifest;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind, ParamSet};
use crate::rng::{stream, RngState, Stream, StreamRng};
use crate::runlog::{self, BatchTrace, CsvSink, EpochRecord, JsonlSink, SchedulerTrace, StepRecord, TimingRecord};
use crate::scheduler::{PolicyHeads, QuantileAction, Scheduler, UpdateOutcome};
use crate::simgrid::{build_similarity, partition, summarize, EmbeddingCache, SearchSpace};
use crate::synthworld::{Pair, SemanticUniverse};
use crate::towers::{embed_images, embed_texts, loss_vlp, mlm_value, Batch, MaskPattern, ModelConfig, ModelParams};

/// Masked-token loss before a model step, waiting for the loss after it.
///
/// The two evaluations must see the same batch and the same mask; `finish`
/// rejects anything else.
#[derive(Clone, Debug)]
pub struct PendingReward {
    before: f64,
    batch: Batch,
    mask: MaskPattern,
}

impl PendingReward {
    pub fn begin(params: &ModelParams, batch: &Batch, mask: &MaskPattern) -> Result<Self> {
        Ok(PendingReward {
            before: mlm_value(params, batch, mask)?,
            batch: batch.clone(),
            mask: mask.clone(),
        })
    }

    /// `(Δ, loss after)` with `Δ = L_before − L_after`.
    pub fn finish(self, params: &ModelParams, batch: &Batch, mask: &MaskPattern) -> Result<(f64, f64)> {
        if *mask != self.mask {
            return Err(Error::Contract("reward mask changed between the two evaluations".into()));
        }
        if *batch != self.batch {
            return Err(Error::Contract("reward batch changed between the two evaluations".into()));
        }
        let after = mlm_value(params, batch, mask)?;
        Ok((self.before - after, after))
    }
}

/// `L_MLM(before) − L_MLM(after)` on one batch under one mask.
pub fn compute_reward(before: &ModelParams, after: &ModelParams, batch: &Batch, mask: &MaskPattern) -> Result<f64> {
    Ok(PendingReward::begin(before, batch, mask)?.finish(after, batch, mask)?.0)
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Next global step.
    pub step: u64,
    pub model: ModelParams,
    pub model_opt: Optimizer,
    pub scheduler: Scheduler,
    pub cache: Option<EmbeddingCache>,
    /// Global order of training-pair indices for the current epoch.
    pub order: Vec<usize>,
    pub masking: StreamRng,
    pub batching: StreamRng,
    pub policy: StreamRng,
}

/// Chaining details of a step; absent for uniformly drawn batches.
pub struct ChainContext<'a> {
    pub space: &'a SearchSpace,
    pub similarity: &'a Matrix,
    /// Local indices still available before this batch was composed.
    pub unselected_before: &'a [usize],
    pub plan: &'a BatchPlan,
    pub action: &'a QuantileAction,
    pub heads: Option<&'a PolicyHeads>,
}

pub struct StepContext<'a> {
    pub record: &'a StepRecord,
    pub trace: &'a BatchTrace,
    pub scheduler: Option<&'a SchedulerTrace>,
    pub batch: &'a Batch,
    pub mask: &'a MaskPattern,
    pub params_before: &'a ModelParams,
    pub params_after: &'a ModelParams,
    pub chain: Option<ChainContext<'a>>,
    pub wall_ms: f64,
}

/// Hooks into the loop. All methods default to doing nothing.
pub trait TrainObserver {
    fn on_space(&mut self, _epoch: usize, _space: usize, _indices: &[usize], _s: &Matrix) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _ctx: &StepContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Collects step records in memory.
#[derive(Default)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub batches: Vec<BatchTrace>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        self.steps.push(ctx.record.clone());
        self.batches.push(ctx.trace.clone());
        Ok(())
    }
    fn on_epoch(&mut self, record: &EpochRecord, _state: &TrainState) -> Result<()> {
        self.epochs.push(record.clone());
        Ok(())
    }
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    itc: f64,
    itm: f64,
    mlm: f64,
    total: f64,
    delta: f64,
    fn_sel: usize,
    neg_sel: usize,
    fn_in: usize,
    neg_in: usize,
    q_sum: f64,
    q_n: usize,
    alpha_sum: f64,
    beta_sum: f64,
    ab_n: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        f64::NAN
    } else {
        a / b
    }
}

pub fn model_config(cfg: &RunConfig, world: &SemanticUniverse) -> Result<ModelConfig> {
    let mc = ModelConfig {
        temperature: cfg.temperature,
        label_smoothing: cfg.label_smoothing,
        ..ModelConfig::for_world(world, cfg.d_emb, cfg.hidden)
    };
    mc.validate()?;
    Ok(mc)
}

/// Model parameters stored in a checkpoint written for `cfg` and `world`.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig, world: &SemanticUniverse) -> Result<ModelParams> {
    let mc = model_config(cfg, world)?;
    let mut model = ModelParams::init(&mc, &mut stream(cfg.seed, Stream::ModelInit));
    ckpt.fill_params("model", &mut model)?;
    Ok(model)
}

fn optimizer_for(cfg: &RunConfig) -> Optimizer {
    Optimizer::new(match cfg.optimizer {
        OptimizerKind::Sgd => OptimizerConfig {
            weight_decay: cfg.weight_decay,
            ..OptimizerConfig::sgd()
        },
        OptimizerKind::Adamw => OptimizerConfig::adamw(cfg.weight_decay),
    })
}

pub struct Trainer<'w> {
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub state: TrainState,
    world: &'w SemanticUniverse,
    world_hash: String,
    pairs: Vec<Pair>,
}

impl<'w> Trainer<'w> {
    pub fn new(config: RunConfig, world: &'w SemanticUniverse) -> Result<Self> {
        config.validate()?;
        let pairs = world.train_pairs();
        if pairs.len() < config.batch_size {
            return Err(Error::Config(format!(
                "{} training pairs cannot fill a batch of {}",
                pairs.len(),
                config.batch_size
            )));
        }
        let model_config = model_config(&config, world)?;
        let seed = config.seed;
        let model = ModelParams::init(&model_config, &mut stream(seed, Stream::ModelInit));
        let scheduler = Scheduler::new(config.scheduler.clone(), &mut stream(seed, Stream::SchedulerInit))?;
        let mut batching = stream(seed, Stream::Batching);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut batching);
        let state = TrainState {
            epoch: 0,
            step: 0,
            model,
            model_opt: optimizer_for(&config),
            scheduler,
            cache: None,
            order,
            masking: stream(seed, Stream::Masking),
            batching,
            policy: stream(seed, Stream::Policy),
        };
        Ok(Trainer {
            config,
            model_config,
            state,
            world,
            world_hash: world.content_hash()?,
            pairs,
        })
    }

    pub fn world(&self) -> &SemanticUniverse {
        self.world
    }

    pub fn world_hash(&self) -> &str {
        &self.world_hash
    }

    /// Training pairs; batch indices refer to positions in this list.
    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.pairs.len();
        let s = self.config.search_space;
        let full = n / s;
        let mut total = full * batches_per_space(s, self.config.batch_size, self.config.drop_tail);
        if n % s > 0 {
            total += batches_per_space(n % s, self.config.batch_size, self.config.drop_tail);
        }
        total
    }

    /// Constant learning rate after a linear warmup over `warmup_epochs`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = (self.config.warmup_epochs * self.steps_per_epoch()) as f64;
        if warm == 0.0 {
            self.config.lr
        } else {
            self.config.lr * ((step + 1) as f64 / warm).min(1.0)
        }
    }

    /// Re-embeds every training pair with the current model.
    pub fn refresh_cache(&mut self) -> Result<()> {
        let feats = Matrix::from_rows(
            &self
                .pairs
                .iter()
                .map(|p| self.world.images[p.image].feature.clone())
                .collect::<Vec<_>>(),
        );
        let tokens: Vec<Vec<u32>> = self.pairs.iter().map(|p| self.world.texts[p.text].tokens.clone()).collect();
        let img = embed_images(&self.state.model, &feats);
        let txt = embed_texts(&self.state.model, &tokens);
        self.state.cache = Some(EmbeddingCache::new(img, txt, self.state.epoch)?);
        Ok(())
    }

    pub fn run_epoch(&mut self, obs: &mut dyn TrainObserver) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        if self.is_finished() {
            return Err(Error::Contract(format!(
                "epoch {epoch} is past the configured {} epochs",
                self.config.epochs
            )));
        }
        let policy = self.config.policy;
        let learned = policy.is_learned();
        let chained = epoch > 0 && policy != SamplingPolicySpec::Uniform;
        let b = self.config.batch_size;
        let m = self.config.scheduler.m;
        let spaces = partition(&self.state.order, self.config.search_space);
        let mut acc = EpochAcc::default();

        for (si, space) in spaces.iter().enumerate() {
            let nb = batches_per_space(space.len(), b, self.config.drop_tail);
            if nb == 0 {
                continue;
            }
            let fits = space.len() >= 2 && (!learned || space.len() > m);
            if !(chained && fits) {
                if chained {
                    log::warn!("search space {si} ({} items) is too small to summarize; batching it uniformly", space.len());
                }
                for local in uniform_batches(space.len(), b, self.config.drop_tail, &mut self.state.batching) {
                    let global: Vec<usize> = local.iter().map(|&i| space.indices[i]).collect();
                    self.train_step(epoch, si, &global, None, obs, &mut acc)?;
                }
                continue;
            }
            let cache = self
                .state
                .cache
                .as_ref()
                .ok_or_else(|| Error::StateCorruption("chained batching without an embedding cache".into()))?;
            if cache.len() != self.pairs.len() {
                return Err(Error::StateCorruption(format!(
                    "embedding cache holds {} items for {} training pairs",
                    cache.len(),
                    self.pairs.len()
                )));
            }
            let s = build_similarity(cache, space)?;
            obs.on_space(epoch, si, &space.indices, &s)?;
            let summary = if learned {
                Some(summarize(&s, m, self.config.sim_temperature)?)
            } else {
                None
            };
            let mut unselected: Vec<usize> = (0..space.len()).collect();
            for _ in 0..nb {
                if unselected.is_empty() {
                    break;
                }
                let heads = match &summary {
                    Some(sm) => Some(self.state.scheduler.forward(sm)?),
                    None => None,
                };
                let mut action = match &heads {
                    Some(h) => Scheduler::sample_action(h, &mut self.state.policy),
                    None => baseline_action(policy, epoch, self.config.epochs, space.len())?
                        .ok_or_else(|| Error::Contract("chained batching needs a quantile action".into()))?,
                };
                let before = unselected.clone();
                let plan = compose_batch(&s, &mut unselected, b, &mut action, heads.as_ref(), &mut self.state.batching)?;
                let global: Vec<usize> = plan.indices.iter().map(|&i| space.indices[i]).collect();
                let chain = ChainContext {
                    space,
                    similarity: &s,
                    unselected_before: &before,
                    plan: &plan,
                    action: &action,
                    heads: heads.as_ref(),
                };
                self.train_step(epoch, si, &global, Some(chain), obs, &mut acc)?;
            }
        }

        self.refresh_cache()?;
        self.state.order.shuffle(&mut self.state.batching);
        self.state.epoch += 1;

        let eval_r1_mean = match recall_at_k(&self.state.model, self.world, &[1]) {
            Ok(r) => r.mean("strict", 1).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        };
        let n = acc.steps as f64;
        let record = EpochRecord {
            epoch,
            steps: acc.steps,
            uniform: !chained,
            loss_itc: acc.itc / n,
            loss_itm: acc.itm / n,
            loss_mlm: acc.mlm / n,
            loss_total: acc.total / n,
            delta_mean: acc.delta / n,
            fn_selected_rate: ratio(acc.fn_sel as f64, acc.neg_sel as f64),
            fn_in_batch_rate: ratio(acc.fn_in as f64, acc.neg_in as f64),
            q_mean: ratio(acc.q_sum, acc.q_n as f64),
            alpha_mean: ratio(acc.alpha_sum, acc.ab_n as f64),
            beta_mean: ratio(acc.beta_sum, acc.ab_n as f64),
            scheduler_updates: self.state.scheduler.updates,
            eval_r1_mean,
        };
        obs.on_epoch(&record, &self.state)?;
        Ok(record)
    }

    fn train_step(
        &mut self,
        epoch: usize,
        space: usize,
        global: &[usize],
        chain: Option<ChainContext<'_>>,
        obs: &mut dyn TrainObserver,
        acc: &mut EpochAcc,
    ) -> Result<()> {
        let started = Instant::now();
        let step = self.state.step;
        let pairs: Vec<Pair> = global.iter().map(|&g| self.pairs[g]).collect();
        let batch = Batch::from_pairs(self.world, &pairs);
        let mask = MaskPattern::sample(&batch, self.config.mask_prob, &mut self.state.masking);
        let lr = self.lr_at(step);

        let vlp = loss_vlp(&self.state.model, &self.model_config, &batch, &mask)?;
        let pending = PendingReward::begin(&self.state.model, &batch, &mask)?;
        let params_before = self.state.model.clone();
        self.state.model_opt.step(&mut self.state.model, &vlp.grads, lr)?;
        self.state.model.check_finite()?;
        let (delta, mlm_after) = pending.finish(&self.state.model, &batch, &mask)?;

        let quantiles: Vec<f64> = chain
            .as_ref()
            .map(|c| c.plan.quantiles_used.iter().map(|&(_, q)| q).collect())
            .unwrap_or_default();

        let mut update = "none";
        let mut sched_trace = None;
        if let Some(c) = &chain {
            if let Some(h) = c.heads {
                let outcome = self.state.scheduler.reinforce_update(h, c.action, delta)?;
                update = match outcome {
                    UpdateOutcome::Applied => "applied",
                    UpdateOutcome::ZeroSignal => "zero",
                    UpdateOutcome::Anomalous => "anomalous",
                };
                let anchors: Vec<usize> = c.plan.quantiles_used.iter().map(|&(a, _)| a).collect();
                for &a in &anchors {
                    acc.alpha_sum += h.alpha[a];
                    acc.beta_sum += h.beta[a];
                    acc.ab_n += 1;
                }
                sched_trace = Some(SchedulerTrace {
                    epoch,
                    step,
                    delta,
                    update: update.into(),
                    log_density: c.plan.log_density,
                    anchors: anchors.iter().map(|&a| c.space.indices[a]).collect(),
                    q: quantiles.clone(),
                    alpha: anchors.iter().map(|&a| h.alpha[a]).collect(),
                    beta: anchors.iter().map(|&a| h.beta[a]).collect(),
                });
            }
        }

        let mut fn_in_batch = 0;
        for (i, a) in pairs.iter().enumerate() {
            for (j, b) in pairs.iter().enumerate() {
                if i != j && self.world.is_false_negative(a.image, b.text) {
                    fn_in_batch += 1;
                }
            }
        }
        let links = selected_negative_links(self.world, &self.pairs, global, &quantiles)?;
        let fn_selected: usize = links.iter().map(|l| l.2).sum();
        let selected_negatives: usize = links.iter().map(|l| l.1).sum();
        let (q_mean, q_std) = mean_std(&quantiles);

        let record = StepRecord {
            epoch,
            step,
            space,
            batch_size: pairs.len(),
            lr,
            loss_itc: vlp.itc,
            loss_itm: vlp.itm,
            loss_mlm: vlp.mlm,
            loss_total: vlp.total,
            mlm_after,
            delta,
            q_mean,
            q_std,
            n_quantiles: quantiles.len(),
            log_density: chain.as_ref().map_or(0.0, |c| c.plan.log_density),
            update: update.into(),
            fn_in_batch,
            in_batch_negatives: pairs.len() * (pairs.len() - 1),
            fn_selected,
            selected_negatives,
        };
        let trace = BatchTrace {
            epoch,
            step,
            space,
            pairs: global.to_vec(),
            quantiles: quantiles.clone(),
        };

        acc.steps += 1;
        acc.itc += vlp.itc;
        acc.itm += vlp.itm;
        acc.mlm += vlp.mlm;
        acc.total += vlp.total;
        acc.delta += delta;
        acc.fn_sel += fn_selected;
        acc.neg_sel += selected_negatives;
        acc.fn_in += fn_in_batch;
        acc.neg_in += record.in_batch_negatives;
        acc.q_sum += quantiles.iter().sum::<f64>();
        acc.q_n += quantiles.len();

        self.state.step += 1;
        let ctx = StepContext {
            record: &record,
            trace: &trace,
            scheduler: sched_trace.as_ref(),
            batch: &batch,
            mask: &mask,
            params_before: &params_before,
            params_after: &self.state.model,
            chain,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        obs.on_step(&ctx)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let rng = BTreeMap::from([
            (Stream::Masking.name().to_string(), RngState::capture(&s.masking)),
            (Stream::Batching.name().to_string(), RngState::capture(&s.batching)),
            (Stream::Policy.name().to_string(), RngState::capture(&s.policy)),
        ]);
        let mut c = Checkpoint::new(CheckpointHeader {
            config_hash: self.config.hash(),
            world_hash: self.world_hash.clone(),
            epoch: s.epoch,
            step: s.step,
            model_opt_step: s.model_opt.step,
            sched_opt_step: s.scheduler.optimizer.step,
            sched_baseline: s.scheduler.baseline,
            sched_updates: s.scheduler.updates,
            order: s.order.clone(),
            cache_epoch: s.cache.as_ref().map(|c| c.epoch_tag),
            rng,
            blocks: Vec::new(),
        });
        c.push_params("model", &s.model);
        c.push_optimizer("model_opt", &s.model_opt);
        c.push_params("scheduler", &s.scheduler.policy);
        c.push_optimizer("scheduler_opt", &s.scheduler.optimizer);
        if let Some(cache) = &s.cache {
            c.push("cache/img", &cache.img);
            c.push("cache/txt", &cache.txt);
        }
        c
    }

    /// Continues from a checkpoint written by a trainer with the same
    /// configuration and world.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let h = &c.header;
        if h.config_hash != self.config.hash() {
            return Err(Error::Config(format!(
                "checkpoint was written under configuration {}, this run uses {}",
                h.config_hash,
                self.config.hash()
            )));
        }
        if h.world_hash != self.world_hash {
            return Err(Error::Config("checkpoint was written for a different world".into()));
        }
        if h.order.len() != self.pairs.len() {
            return Err(Error::StateCorruption("checkpoint order does not cover the training pairs".into()));
        }
        let rng = |s: Stream| {
            h.rng
                .get(s.name())
                .map(RngState::restore)
                .ok_or_else(|| Error::StateCorruption(format!("checkpoint lacks the {} stream", s.name())))
        };
        let mut state = self.state.clone();
        c.fill_params("model", &mut state.model)?;
        c.fill_params("scheduler", &mut state.scheduler.policy)?;
        let (m, v) = c.moments("model_opt");
        state.model_opt.first_moment = m;
        state.model_opt.second_moment = v;
        state.model_opt.step = h.model_opt_step;
        let (m, v) = c.moments("scheduler_opt");
        state.scheduler.optimizer.first_moment = m;
        state.scheduler.optimizer.second_moment = v;
        state.scheduler.optimizer.step = h.sched_opt_step;
        state.scheduler.baseline = h.sched_baseline;
        state.scheduler.updates = h.sched_updates;
        state.cache = match (h.cache_epoch, c.block("cache/img"), c.block("cache/txt")) {
            (Some(tag), Some(img), Some(txt)) => Some(EmbeddingCache::new(img.clone(), txt.clone(), tag)?),
            (None, None, None) => None,
            _ => return Err(Error::StateCorruption("incomplete embedding cache in checkpoint".into())),
        };
        state.epoch = h.epoch;
        state.step = h.step;
        state.order = h.order.clone();
        state.masking = rng(Stream::Masking)?;
        state.batching = rng(Stream::Batching)?;
        state.policy = rng(Stream::Policy)?;
        self.state = state;
        Ok(())
    }
}

/// Writes the per-run log files.
pub struct RunWriter {
    dir: PathBuf,
    metrics: CsvSink,
    epochs: CsvSink,
    timing: CsvSink,
    batches: Option<JsonlSink>,
    scheduler: JsonlSink,
    dump_sim: bool,
}

impl RunWriter {
    /// Opens the log files in `dir`, appending when `append` is set.
    pub fn open(dir: &Path, cfg: &RunConfig, append: bool) -> Result<Self> {
        let p = |name: &str| dir.join(name);
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: CsvSink::open(&p(runlog::METRICS_FILE), append)?,
            epochs: CsvSink::open(&p(runlog::EPOCHS_FILE), append)?,
            timing: CsvSink::open(&p(runlog::TIMING_FILE), append)?,
            batches: if cfg.log_batches {
                Some(JsonlSink::open(&p(runlog::BATCHES_FILE), append)?)
            } else {
                None
            },
            scheduler: JsonlSink::open(&p(runlog::SCHEDULER_FILE), append)?,
            dump_sim: cfg.dump_sim,
        })
    }

    pub fn output_names(cfg: &RunConfig) -> Vec<&'static str> {
        let mut out = vec![
            runlog::METRICS_FILE,
            runlog::EPOCHS_FILE,
            runlog::TIMING_FILE,
            runlog::SCHEDULER_FILE,
            runlog::CHECKPOINT_FILE,
        ];
        if cfg.log_batches {
            out.push(runlog::BATCHES_FILE);
        }
        out
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.epochs.flush()?;
        self.timing.flush()?;
        self.scheduler.flush()?;
        if let Some(b) = &mut self.batches {
            b.flush()?;
        }
        Ok(())
    }
}

impl TrainObserver for RunWriter {
    fn on_space(&mut self, epoch: usize, space: usize, indices: &[usize], s: &Matrix) -> Result<()> {
        if !self.dump_sim {
            return Ok(());
        }
        let dir = self.dir.join("sim");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("epoch{epoch:03}_space{space:03}");
        crate::npy::write_f64(&dir.join(format!("{stem}.npy")), s)?;
        let idx = serde_json::to_vec(indices).expect("index list serializes");
        crate::synthworld::write_atomic(&dir.join(format!("{stem}.json")), &idx)
    }

    fn on_step(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        self.metrics.write(ctx.record)?;
        self.timing.write(&TimingRecord {
            step: ctx.record.step,
            wall_ms: ctx.wall_ms,
        })?;
        if let Some(b) = &mut self.batches {
            b.write(ctx.trace)?;
        }
        if let Some(t) = ctx.scheduler {
            self.scheduler.write(t)?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, record: &EpochRecord, _state: &TrainState) -> Result<()> {
        self.epochs.write(record)?;
        self.flush()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many epochs of this invocation.
    pub stop_after: Option<usize>,
    pub world_path: Option<PathBuf>,
    pub args: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub epochs: Vec<EpochRecord>,
    pub finished: bool,
    pub checkpoint: PathBuf,
}

/// Trains into `out_dir`, writing logs, a checkpoint and the manifest.
pub fn run_training(cfg: &RunConfig, world: &SemanticUniverse, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(cfg.clone(), world)?;
    let mut manifest = RunManifest::start("train", opts.args.clone(), cfg, opts.world_path.as_deref(), trainer.world_hash());
    for name in RunWriter::output_names(cfg) {
        manifest.add_output(name);
    }
    manifest.write(out_dir)?;
    let result = train_into(&mut trainer, cfg, out_dir, opts);
    manifest.finish(result.as_ref().map(|_| ()).map_err(|e| e.to_string()));
    manifest.write(out_dir)?;
    result
}

fn train_into(trainer: &mut Trainer<'_>, cfg: &RunConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    if let Some(p) = &opts.resume {
        trainer.restore(&Checkpoint::read(p)?)?;
        log::info!("resumed at epoch {} step {}", trainer.state.epoch, trainer.state.step);
    }
    let append = opts.resume.is_some() && out_dir.join(runlog::METRICS_FILE).exists();
    let mut writer = RunWriter::open(out_dir, cfg, append)?;
    let ckpt_path = out_dir.join(runlog::CHECKPOINT_FILE);
    let mut epochs = Vec::new();
    while !trainer.is_finished() && opts.stop_after.is_none_or(|n| epochs.len() < n) {
        let rec = trainer.run_epoch(&mut writer)?;
        log::info!(
            "epoch {} loss {:.4} fn-rate {:.4} eval R@1 {:.4}",
            rec.epoch,
            rec.loss_total,
            rec.fn_selected_rate,
            rec.eval_r1_mean
        );
        if cfg.checkpoint_every_epoch {
            trainer.checkpoint().write(&out_dir.join(format!("checkpoint_epoch{:03}.bin", rec.epoch)))?;
        }
        epochs.push(rec);
    }
    writer.flush()?;
    trainer.checkpoint().write(&ckpt_path)?;
    Ok(RunSummary {
        epochs,
        finished: trainer.is_finished(),
        checkpoint: ckpt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_universe, WorldConfig};

    pub(crate) fn tiny() -> (SemanticUniverse, RunConfig) {
        let world = WorldConfig {
            n_concepts: 6,
            n_images: 80,
            n_texts: 80,
            n_eval_images: 16,
            d_latent: 8,
            d_img: 8,
            k_text: 6,
            vocab: 16,
            ..WorldConfig::default()
        };
        let mut cfg = RunConfig {
            epochs: 3,
            batch_size: 8,
            search_space: 32,
            d_emb: 8,
            hidden: 16,
            world: world.clone(),
            ..RunConfig::default()
        };
        cfg.scheduler.m = 8;
        cfg.scheduler.hidden = 16;
        (generate_universe(&world, 1).unwrap(), cfg)
    }

    #[test]
    fn reward_rejects_a_changed_mask() {
        let (w, cfg) = tiny();
        let t = Trainer::new(cfg, &w).unwrap();
        let pairs = &t.pairs()[..4];
        let batch = Batch::from_pairs(&w, pairs);
        let m1 = MaskPattern::sample(&batch, 0.5, &mut stream(0, Stream::Masking));
        let mut m2 = m1.clone();
        m2.masked[0][0] = !m2.masked[0][0];
        let p = PendingReward::begin(&t.state.model, &batch, &m1).unwrap();
        assert!(matches!(p.finish(&t.state.model, &batch, &m2), Err(Error::Contract(_))));
        assert_eq!(compute_reward(&t.state.model, &t.state.model, &batch, &m1).unwrap(), 0.0);
    }

    #[test]
    fn epoch_zero_is_uniform_and_later_epochs_chain() {
        let (w, cfg) = tiny();
        let mut t = Trainer::new(cfg, &w).unwrap();
        let mut rec = Recorder::default();
        let e0 = t.run_epoch(&mut rec).unwrap();
        assert!(e0.uniform);
        assert_eq!(e0.steps, t.steps_per_epoch());
        assert!(rec.steps.iter().all(|s| s.n_quantiles == 0 && s.update == "none"));
        let e1 = t.run_epoch(&mut rec).unwrap();
        assert!(!e1.uniform);
        let chained: Vec<_> = rec.steps.iter().filter(|s| s.epoch == 1).collect();
        assert!(chained.iter().all(|s| s.n_quantiles == s.batch_size - 1));
        assert!(chained.iter().any(|s| s.update == "applied"));
        assert!(t.state.scheduler.updates > 0);
        // 64 training pairs, spaces of 32, batches of 8.
        assert_eq!(t.steps_per_epoch(), 8);
    }

    #[test]
    fn every_pair_is_used_once_per_epoch() {
        let (w, cfg) = tiny();
        let mut t = Trainer::new(cfg, &w).unwrap();
        let mut rec = Recorder::default();
        t.run_epoch(&mut rec).unwrap();
        t.run_epoch(&mut rec).unwrap();
        for e in 0..2 {
            let mut seen: Vec<usize> = rec.batches.iter().filter(|b| b.epoch == e).flat_map(|b| b.pairs.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..t.pairs().len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn uniform_policy_never_chains() {
        let (w, mut cfg) = tiny();
        cfg.policy = SamplingPolicySpec::Uniform;
        let mut t = Trainer::new(cfg, &w).unwrap();
        let mut rec = Recorder::default();
        for _ in 0..3 {
            assert!(t.run_epoch(&mut rec).unwrap().uniform);
        }
        assert!(t.run_epoch(&mut rec).is_err());
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let (w, cfg) = tiny();
        let t = Trainer::new(cfg.clone(), &w).unwrap();
        let n = t.steps_per_epoch() as u64;
        assert_eq!(t.lr_at(0), cfg.lr / n as f64);
        assert_eq!(t.lr_at(n - 1), cfg.lr);
        assert_eq!(t.lr_at(10 * n), cfg.lr);
    }

    #[test]
    fn restore_rejects_other_configs() {
        let (w, cfg) = tiny();
        let t = Trainer::new(cfg.clone(), &w).unwrap();
        let c = t.checkpoint();
        let mut other = cfg;
        other.seed = 99;
        let mut t2 = Trainer::new(other, &w).unwrap();
        assert!(matches!(t2.restore(&c), Err(Error::Config(_))));
    }
}
