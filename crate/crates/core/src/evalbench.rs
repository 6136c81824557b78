//! Pruning quality against label oracles and simple baselines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::decoder::recon_distance;
use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::objective::LossKind;
use crate::params::{derive_seed, rng};
use crate::pruner::{gather, PadMode, PruneInput};
use crate::scalar::Scalar;
use crate::token_store::{TokenCorpus, TokenSequence};
use crate::trainer::CheckpointBundle;

/// Fraction of distinct ground-truth objects hit by at least one kept index.
pub fn coverage(kept: &[usize], labels: Option<&[u32]>) -> Result<f64> {
    let labels = labels.ok_or_else(|| OcvtpError::config("labels", "coverage needs labeled tokens"))?;
    let total: BTreeSet<u32> = labels.iter().copied().collect();
    if total.is_empty() {
        return Err(OcvtpError::config("labels", "empty label vector"));
    }
    let mut hit = BTreeSet::new();
    for &j in kept {
        let l = labels.get(j).ok_or(OcvtpError::Bounds {
            index: j,
            len: labels.len(),
        })?;
        hit.insert(*l);
    }
    Ok(hit.len() as f64 / total.len() as f64)
}

/// Expected coverage of a uniform random `s`-subset of `n` tokens, given the
/// token count of every object: mean over objects of `1 - C(n - n_k, s) / C(n, s)`.
pub fn expected_random_coverage(object_sizes: &[usize], s: usize) -> f64 {
    let n: usize = object_sizes.iter().sum();
    if object_sizes.is_empty() || s > n {
        return 0.0;
    }
    let miss = |size: usize| -> f64 {
        if n - size < s {
            return 0.0;
        }
        (0..s).map(|i| (n - size - i) as f64 / (n - i) as f64).product()
    };
    object_sizes.iter().map(|&k| 1.0 - miss(k)).sum::<f64>() / object_sizes.len() as f64
}

/// Token count per object, indexed by label.
pub fn object_sizes(labels: &[u32]) -> Vec<usize> {
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sizes = vec![0; k];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    sizes.retain(|&s| s > 0);
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Random,
    NormTopk,
    Medoid,
}

impl FromStr for BaselineMethod {
    type Err = OcvtpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineMethod::Random),
            "norm_topk" => Ok(BaselineMethod::NormTopk),
            "medoid" => Ok(BaselineMethod::Medoid),
            _ => Err(OcvtpError::config(
                "method",
                format!("unknown baseline {s:?} (random, norm_topk, medoid)"),
            )),
        }
    }
}

/// Token-only selection without the learned pruner; result sorted ascending.
pub fn baseline_select<T: Scalar>(method: BaselineMethod, v_ref: &Matrix<T>, s: usize, seed: u64) -> Result<Vec<usize>> {
    let n = v_ref.rows();
    if s == 0 || s > n {
        return Err(OcvtpError::config("budget", format!("budget {s} outside 1..={n}")));
    }
    let mut out = match method {
        BaselineMethod::Random => index::sample(&mut rng(seed), n, s).into_vec(),
        BaselineMethod::NormTopk => {
            let norms: Vec<f64> = (0..n)
                .map(|j| v_ref.row(j).iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
            order.truncate(s);
            order
        }
        BaselineMethod::Medoid => greedy_medoids(v_ref, s),
    };
    out.sort_unstable();
    Ok(out)
}

/// Greedy k-medoids build: repeatedly add the token that most lowers the sum
/// over tokens of the distance to their nearest chosen medoid.
fn greedy_medoids<T: Scalar>(v: &Matrix<T>, s: usize) -> Vec<usize> {
    let n = v.rows();
    let dist: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            v.row(i)
                .iter()
                .zip(v.row(j))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut nearest = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(s);
    let mut taken = vec![false; n];
    for _ in 0..s {
        let mut best = (f64::INFINITY, usize::MAX);
        for cand in (0..n).filter(|&c| !taken[c]) {
            let cost: f64 = (0..n).map(|j| nearest[j].min(dist[cand * n + j])).sum();
            if cost < best.0 {
                best = (cost, cand);
            }
        }
        let m = best.1;
        taken[m] = true;
        chosen.push(m);
        for j in 0..n {
            nearest[j] = nearest[j].min(dist[m * n + j]);
        }
    }
    chosen
}

/// A selection method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OcVtp,
    Baseline(BaselineMethod),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::OcVtp => "oc-vtp",
            Method::Baseline(BaselineMethod::Random) => "random",
            Method::Baseline(BaselineMethod::NormTopk) => "norm_topk",
            Method::Baseline(BaselineMethod::Medoid) => "medoid",
        }
    }

    pub fn all() -> Vec<Method> {
        vec![
            Method::OcVtp,
            Method::Baseline(BaselineMethod::Random),
            Method::Baseline(BaselineMethod::NormTopk),
            Method::Baseline(BaselineMethod::Medoid),
        ]
    }
}

impl FromStr for Method {
    type Err = OcvtpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oc-vtp" | "oc_vtp" | "ocvtp" => Ok(Method::OcVtp),
            other => other.parse().map(Method::Baseline),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub budget: usize,
    /// Mean object coverage; absent for unlabeled corpora.
    pub coverage: Option<f64>,
    /// Mean frozen-decoder MSE when conditioned on the kept tokens.
    pub recon_error: f64,
    /// Duplicate elections per slot (zero for baselines).
    pub duplicate_rate: f64,
    /// Slots owning no token under the hard masks (zero for baselines).
    pub empty_slot_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomExpectation {
    pub budget: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub corpus_fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchRow>,
    /// Closed-form coverage of uniform random selection, averaged over items.
    pub random_expectation: Vec<RandomExpectation>,
}

impl BenchReport {
    pub fn row(&self, method: Method, budget: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method.name() && r.budget == budget)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OcvtpError::Format(format!("bench report: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,budget,coverage,recon_error,duplicate_rate,empty_slot_rate\n");
        for r in &self.rows {
            let cov = r.coverage.map(|c| format!("{c:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{cov},{:.6},{:.6},{:.6}",
                r.method, r.budget, r.recon_error, r.duplicate_rate, r.empty_slot_rate
            );
        }
        out
    }
}

/// Evaluates every (method, budget) pair over every item and seed. Reference
/// and forwarded tokens are the item's own tokens. Randomness for item `i`
/// under seed `seed` comes from `derive_seed(seed, [i])`, shared by all
/// methods so comparisons are paired.
pub fn run_bench<T: Scalar>(
    corpus: &TokenCorpus,
    checkpoint: &CheckpointBundle<T>,
    budgets: &[usize],
    methods: &[Method],
    seeds: &[u64],
) -> Result<BenchReport> {
    if budgets.is_empty() {
        return Err(OcvtpError::config("budgets", "no budgets requested"));
    }
    if methods.is_empty() {
        return Err(OcvtpError::config("methods", "no methods requested"));
    }
    if seeds.is_empty() {
        return Err(OcvtpError::config("seeds", "no seeds requested"));
    }
    corpus.validate()?;
    let min_n = corpus.min_tokens().ok_or_else(|| OcvtpError::config("corpus", "empty corpus"))?;
    if let Some(&b) = budgets.iter().find(|&&b| b == 0 || b > min_n) {
        return Err(OcvtpError::config("budgets", format!("budget {b} outside 1..={min_n}")));
    }
    if corpus.channels() != Some(checkpoint.c()) {
        return Err(OcvtpError::Shape(format!(
            "corpus has {:?} channels, checkpoint expects {}",
            corpus.channels(),
            checkpoint.c()
        )));
    }
    let labeled = corpus.items.iter().all(|i| i.labels.is_some());
    let tokens: Vec<Matrix<T>> = corpus.items.iter().map(TokenSequence::tokens_as).collect();

    let mut rows = Vec::new();
    for &method in methods {
        for &budget in budgets {
            let (mut cov, mut rec, mut dup, mut empty) = (0.0, 0.0, 0.0, 0.0);
            for &seed in seeds {
                for (i, (item, x)) in corpus.items.iter().zip(&tokens).enumerate() {
                    let item_seed = derive_seed(seed, &[i as u64]);
                    let kept = match method {
                        Method::OcVtp => {
                            let input = PruneInput {
                                v_ref: x,
                                v_last: x,
                                budget,
                                pad_mode: PadMode::Pad,
                            };
                            let (res, _) = checkpoint.prune(&input, item_seed)?;
                            dup += res.n_duplicates as f64 / budget as f64;
                            empty += res.empty_slots() as f64 / budget as f64;
                            res.forwarded
                        }
                        Method::Baseline(b) => baseline_select(b, x, budget, item_seed)?,
                    };
                    if labeled {
                        cov += coverage(&kept, item.labels.as_deref())?;
                    }
                    let condition = gather(x, &kept)?;
                    rec += recon_distance(&checkpoint.model.decoder, &condition, x, item_seed, LossKind::Mse, None)?;
                }
            }
            let count = (seeds.len() * corpus.len()) as f64;
            rows.push(BenchRow {
                method: method.name().to_string(),
                budget,
                coverage: labeled.then_some(cov / count),
                recon_error: rec / count,
                duplicate_rate: dup / count,
                empty_slot_rate: empty / count,
            });
        }
    }
    let random_expectation = if labeled {
        budgets
            .iter()
            .map(|&b| RandomExpectation {
                budget: b,
                coverage: corpus
                    .items
                    .iter()
                    .map(|item| expected_random_coverage(&object_sizes(item.labels.as_deref().unwrap_or(&[])), b))
                    .sum::<f64>()
                    / corpus.len() as f64,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(BenchReport {
        corpus_fingerprint: corpus.fingerprint(),
        seeds: seeds.to_vec(),
        rows,
        random_expectation,
    })
}
