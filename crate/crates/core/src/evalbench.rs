//! Measurement: analytic false-negative probability, false-negative rates of
//! logged batches, retrieval recall, and side-by-side comparison of runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::manifest::{RunManifest, RunStatus};
use crate::runlog::{self, BatchTrace, StepRecord};
use crate::synthworld::{is_compatible, Pair, RelationStats, SemanticUniverse};
use crate::towers::{embed_images, embed_texts, ModelParams};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Probability that a uniformly drawn non-positive pair is compatible:
/// `(1 − κ)ρ / (1 − κρ)`.
pub fn fn_probability(rho: f64, kappa: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) || !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Domain(format!("ρ = {rho} and κ = {kappa} must lie in [0, 1]")));
    }
    let denom = 1.0 - kappa * rho;
    if denom <= 0.0 {
        return Err(Error::Domain(format!(
            "κρ = {} leaves no non-positive pairs",
            kappa * rho
        )));
    }
    Ok((1.0 - kappa) * rho / denom)
}

pub fn fn_probability_of(stats: &RelationStats) -> Result<f64> {
    fn_probability(stats.rho, stats.kappa)
}

/// One row of the false-negative risk curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnCurveRow {
    pub step_start: u64,
    pub step_end: u64,
    /// `all`, `uniform` (negatives from uniformly drawn batches), or a
    /// quantile bin such as `0.2-0.4`.
    pub q_bin: String,
    pub negatives: usize,
    pub false_negatives: usize,
    pub rate: f64,
}

pub const Q_BINS: usize = 5;

fn q_bin_label(q: Option<f64>) -> String {
    match q {
        None => "uniform".into(),
        Some(q) => {
            let b = ((q * Q_BINS as f64).floor() as usize).min(Q_BINS - 1);
            let w = 1.0 / Q_BINS as f64;
            format!("{:.1}-{:.1}", b as f64 * w, (b + 1) as f64 * w)
        }
    }
}

/// Negatives formed between consecutive picks of a batch: for picks `a`, `b`
/// the cross pairs `(image a, text b)` and `(image b, text a)`. Returns
/// `(negatives, false negatives)` per link together with the link's quantile.
pub fn selected_negative_links(world: &SemanticUniverse, pairs: &[Pair], batch: &[usize], quantiles: &[f64]) -> Result<Vec<(Option<f64>, usize, usize)>> {
    let mut out = Vec::with_capacity(batch.len().saturating_sub(1));
    for k in 1..batch.len() {
        let (ia, ib) = (batch[k - 1], batch[k]);
        for &i in &[ia, ib] {
            if i >= pairs.len() {
                return Err(Error::Lookup { index: i, len: pairs.len() });
            }
        }
        let (a, b) = (pairs[ia], pairs[ib]);
        let fns = usize::from(world.is_false_negative(a.image, b.text))
            + usize::from(world.is_false_negative(b.image, a.text));
        out.push((quantiles.get(k - 1).copied(), 2, fns));
    }
    Ok(out)
}

/// False-negative rate of logged batches per step bucket and quantile bin.
/// Steps must be contiguous; a gap is reported as an incomplete log.
pub fn measure_fn_rate(traces: &[BatchTrace], world: &SemanticUniverse, bucket: usize) -> Result<Vec<FnCurveRow>> {
    if bucket == 0 {
        return Err(Error::Contract("bucket size must be positive".into()));
    }
    let pairs = world.train_pairs();
    let mut acc: BTreeMap<(u64, String), (usize, usize)> = BTreeMap::new();
    let mut expected = traces.first().map(|t| t.step);
    for t in traces {
        if Some(t.step) != expected {
            return Err(Error::IncompleteLog(format!(
                "expected step {} but found {}",
                expected.unwrap_or(0),
                t.step
            )));
        }
        expected = Some(t.step + 1);
        let b = t.step / bucket as u64;
        for (q, neg, fns) in selected_negative_links(world, &pairs, &t.pairs, &t.quantiles)? {
            for label in ["all".to_string(), q_bin_label(q)] {
                let e = acc.entry((b, label)).or_default();
                e.0 += neg;
                e.1 += fns;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((b, q_bin), (negatives, false_negatives))| FnCurveRow {
            step_start: b * bucket as u64,
            step_end: (b + 1) * bucket as u64,
            q_bin,
            negatives,
            false_negatives,
            rate: if negatives == 0 {
                f64::NAN
            } else {
                false_negatives as f64 / negatives as f64
            },
        })
        .collect())
}

/// Selected-negative false-negative rate over the last `fraction` of steps.
pub fn final_fn_rate(steps: &[StepRecord], fraction: f64) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::IncompleteLog("no step records".into()));
    }
    let take = ((steps.len() as f64 * fraction).ceil() as usize).clamp(1, steps.len());
    let tail = &steps[steps.len() - take..];
    let neg: usize = tail.iter().map(|s| s.selected_negatives).sum();
    let fns: usize = tail.iter().map(|s| s.fn_selected).sum();
    Ok(if neg == 0 { f64::NAN } else { fns as f64 / neg as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub direction: String,
    pub variant: String,
    pub k: usize,
    pub queries: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
}

impl RecallReport {
    pub fn get(&self, direction: &str, variant: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.direction == direction && r.variant == variant && r.k == k)
            .map(|r| r.recall)
    }

    /// Mean over both directions of one variant at one `k`.
    pub fn mean(&self, variant: &str, k: usize) -> Option<f64> {
        Some((self.get("t2i", variant, k)? + self.get("i2t", variant, k)?) / 2.0)
    }
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Recall@K on the held-out images and their texts, text→image and
/// image→text, counting either the labeled positive (`strict`) or any
/// compatible item (`compatible`) as a hit.
pub fn recall_at_k(params: &ModelParams, world: &SemanticUniverse, ks: &[usize]) -> Result<RecallReport> {
    let images: Vec<usize> = (0..world.images.len()).filter(|&v| world.is_eval_image(v)).collect();
    let texts: Vec<usize> = (0..world.texts.len())
        .filter(|&t| world.is_eval_image(world.texts[t].positive_image))
        .collect();
    if images.is_empty() || texts.is_empty() {
        return Err(Error::Contract("the world has no held-out image/text pairs".into()));
    }
    let feats = crate::linalg::Matrix::from_rows(
        &images.iter().map(|&v| world.images[v].feature.clone()).collect::<Vec<_>>(),
    );
    let tokens: Vec<Vec<u32>> = texts.iter().map(|&t| world.texts[t].tokens.clone()).collect();
    let img = embed_images(params, &feats);
    let txt = embed_texts(params, &tokens);
    let sim = txt.matmul_t(&img);

    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();

    let t2i_hits: Vec<(Vec<bool>, Vec<bool>)> = (0..texts.len())
        .map(|r| {
            let t = &world.texts[texts[r]];
            let top = top_k(sim.row(r), kmax);
            let strict = top.iter().map(|&c| images[c] == t.positive_image).collect();
            let compat = top
                .iter()
                .map(|&c| is_compatible(&world.images[images[c]], t))
                .collect();
            (strict, compat)
        })
        .collect();

    let img_sim = sim.transpose();
    let queries: Vec<usize> = (0..images.len())
        .filter(|&c| texts.iter().any(|&t| world.texts[t].positive_image == images[c]))
        .collect();
    let i2t_hits: Vec<(Vec<bool>, Vec<bool>)> = queries
        .iter()
        .map(|&c| {
            let v = images[c];
            let top = top_k(img_sim.row(c), kmax);
            let strict = top.iter().map(|&r| world.texts[texts[r]].positive_image == v).collect();
            let compat = top
                .iter()
                .map(|&r| is_compatible(&world.images[v], &world.texts[texts[r]]))
                .collect();
            (strict, compat)
        })
        .collect();

    for (direction, hits) in [("t2i", &t2i_hits), ("i2t", &i2t_hits)] {
        for variant in ["strict", "compatible"] {
            for &k in ks {
                let n = hits
                    .iter()
                    .filter(|(s, c)| {
                        let h = if variant == "strict" { s } else { c };
                        h.iter().take(k).any(|&x| x)
                    })
                    .count();
                rows.push(RecallRow {
                    direction: direction.into(),
                    variant: variant.into(),
                    k,
                    queries: hits.len(),
                    recall: n as f64 / hits.len() as f64,
                });
            }
        }
    }
    Ok(RecallReport { rows })
}

/// Recomputes `recall.csv` and `fn_curve.csv` for a finished run directory.
pub fn evaluate_run(dir: &Path, world: &SemanticUniverse, bucket: usize) -> Result<(RecallReport, Vec<FnCurveRow>)> {
    let manifest = RunManifest::read(dir)?;
    let hash = world.content_hash()?;
    if manifest.world_hash != hash {
        return Err(Error::IncomparableRuns(format!(
            "run {} was trained on world {} but the given world hashes to {hash}",
            dir.display(),
            manifest.world_hash,
        )));
    }
    let cfg = manifest.run_config()?;
    let ckpt = Checkpoint::read(&dir.join(runlog::CHECKPOINT_FILE))?;
    let model = crate::trainloop::model_from_checkpoint(&ckpt, &cfg, world)?;
    let report = recall_at_k(&model, world, &DEFAULT_KS)?;
    let traces: Vec<BatchTrace> = runlog::read_jsonl(&dir.join(runlog::BATCHES_FILE))?;
    let curve = measure_fn_rate(&traces, world, bucket)?;
    write_rows(&dir.join(runlog::RECALL_FILE), &report.rows)?;
    write_rows(&dir.join(runlog::FN_CURVE_FILE), &curve)?;
    Ok((report, curve))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut sink = runlog::CsvSink::create(path)?;
    for r in rows {
        sink.write(r)?;
    }
    sink.flush()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub policy: String,
    pub seed: u64,
    pub steps: usize,
    pub r1_t2i: f64,
    pub r1_i2t: f64,
    pub r1_mean: f64,
    pub r5_mean: f64,
    pub r10_mean: f64,
    pub compatible_r1_mean: f64,
    pub final_fn_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub runs: usize,
    pub r1_mean: f64,
    pub r1_std: f64,
    pub final_fn_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub comparison_key: String,
    pub world_hash: String,
    pub rows: Vec<CompareRow>,
}

/// Collects finished, evaluated runs that share a world and a configuration
/// (up to seed and policy).
pub fn compare_policies(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::Contract("nothing to compare".into()));
    }
    let mut key: Option<(String, String)> = None;
    let mut rows = Vec::new();
    for dir in dirs {
        let m = RunManifest::read(dir)?;
        if m.status != RunStatus::Complete {
            return Err(Error::IncompleteLog(format!("run {} did not finish", dir.display())));
        }
        let this = (m.comparison_key.clone(), m.world_hash.clone());
        match &key {
            None => key = Some(this),
            Some(k) if *k != this => {
                return Err(Error::IncomparableRuns(format!(
                    "{} differs from the first run in configuration or world",
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let recall_path = dir.join(runlog::RECALL_FILE);
        if !recall_path.exists() {
            return Err(Error::IncompleteLog(format!(
                "{} has no {}; evaluate the run first",
                dir.display(),
                runlog::RECALL_FILE
            )));
        }
        let report = RecallReport {
            rows: runlog::read_csv(&recall_path)?,
        };
        let steps: Vec<StepRecord> = runlog::read_csv(&dir.join(runlog::METRICS_FILE))?;
        let need = |v: Option<f64>| v.ok_or_else(|| Error::format(&recall_path, "missing recall entries"));
        rows.push(CompareRow {
            run: dir.display().to_string(),
            policy: m.policy.clone(),
            seed: m.seed,
            steps: steps.len(),
            r1_t2i: need(report.get("t2i", "strict", 1))?,
            r1_i2t: need(report.get("i2t", "strict", 1))?,
            r1_mean: need(report.mean("strict", 1))?,
            r5_mean: need(report.mean("strict", 5))?,
            r10_mean: need(report.mean("strict", 10))?,
            compatible_r1_mean: need(report.mean("compatible", 1))?,
            final_fn_rate: final_fn_rate(&steps, 0.25)?,
        });
    }
    let (comparison_key, world_hash) = key.expect("at least one run");
    Ok(Comparison {
        comparison_key,
        world_hash,
        rows,
    })
}

/// Per-policy means over seeds, in first-appearance order.
pub fn summarize_by_policy(rows: &[CompareRow]) -> Vec<PolicySummary> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.policy) {
            order.push(r.policy.clone());
        }
    }
    order
        .into_iter()
        .map(|policy| {
            let sel: Vec<&CompareRow> = rows.iter().filter(|r| r.policy == policy).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.r1_mean).sum::<f64>() / n;
            let var = if sel.len() > 1 {
                sel.iter().map(|r| (r.r1_mean - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            PolicySummary {
                policy,
                runs: sel.len(),
                r1_mean: mean,
                r1_std: var.sqrt(),
                final_fn_rate: sel.iter().map(|r| r.final_fn_rate).sum::<f64>() / n,
            }
        })
        .collect()
}

/// `compare.csv`: a `#` line naming the shared configuration and world,
/// then one row per run followed by one row per policy.
pub fn write_comparison(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# comparison_key={} world_hash={}", cmp.comparison_key, cmp.world_hash)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in &cmp.rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    for s in summarize_by_policy(&cmp.rows) {
        w.serialize(CompareRow {
            run: "mean".into(),
            policy: s.policy,
            seed: 0,
            steps: 0,
            r1_t2i: f64::NAN,
            r1_i2t: f64::NAN,
            r1_mean: s.r1_mean,
            r5_mean: f64::NAN,
            r10_mean: f64::NAN,
            compatible_r1_mean: f64::NAN,
            final_fn_rate: s.final_fn_rate,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
