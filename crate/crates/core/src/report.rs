//! Quartile summaries over per-seed metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::training::{read_metrics, MetricsRow};

/// Linear-interpolation quantile of `values` at `p ∈ [0, 1]` (position
/// `(n - 1) p` in the sorted sample). NaN entries are ignored; an all-NaN or
/// empty sample gives NaN.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            q1: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q3: quantile(values, 0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Splits `metrics_<algo>_seed<k>.csv` into its algorithm label and seed.
pub fn parse_metrics_name(path: &Path) -> Option<(String, u64)> {
    let stem = path.file_name()?.to_str()?.strip_prefix("metrics_")?.strip_suffix(".csv")?;
    let (algo, seed) = stem.rsplit_once("_seed")?;
    (!algo.is_empty()).then_some(())?;
    Some((algo.to_string(), seed.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSummary {
    pub step: u64,
    pub seeds: usize,
    pub score: Quartiles,
    pub eval_return: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoSummary {
    pub algo: String,
    pub seeds: Vec<u64>,
    pub curve: Vec<CheckpointSummary>,
    /// Quartiles of each seed's last row.
    pub final_score: Quartiles,
    pub final_return: Quartiles,
}

/// Groups files by algorithm and computes quartiles at every logged step.
pub fn summarize(paths: &[PathBuf]) -> Result<Vec<AlgoSummary>> {
    if paths.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let mut by_algo: BTreeMap<String, Vec<(u64, Vec<MetricsRow>)>> = BTreeMap::new();
    for path in paths {
        let (algo, seed) = parse_metrics_name(path).ok_or_else(|| {
            Error::Config(format!("{} is not named metrics_<algo>_seed<k>.csv", path.display()))
        })?;
        let rows = read_metrics(path)?;
        if rows.is_empty() {
            return Err(Error::Config(format!("{} has no rows", path.display())));
        }
        by_algo.entry(algo).or_default().push((seed, rows));
    }
    let mut out = Vec::new();
    for (algo, mut runs) in by_algo {
        runs.sort_by_key(|(s, _)| *s);
        let mut steps: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (_, rows) in &runs {
            for r in rows {
                let e = steps.entry(r.step).or_default();
                e.0.push(r.win_rate);
                e.1.push(r.eval_return);
            }
        }
        let curve = steps
            .into_iter()
            .map(|(step, (score, ret))| CheckpointSummary {
                step,
                seeds: score.len(),
                score: Quartiles::of(&score),
                eval_return: Quartiles::of(&ret),
            })
            .collect();
        let last = |f: fn(&MetricsRow) -> f64| runs.iter().map(|(_, r)| f(r.last().expect("non-empty"))).collect::<Vec<_>>();
        out.push(AlgoSummary {
            algo,
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            curve,
            final_score: Quartiles::of(&last(|r| r.win_rate)),
            final_return: Quartiles::of(&last(|r| r.eval_return)),
        });
    }
    Ok(out)
}

fn cell(q: &Quartiles) -> String {
    format!("{:.3} [{:.3}, {:.3}]", q.median, q.q1, q.q3)
}

/// Markdown with one quartile table per algorithm and a final comparison.
pub fn render_markdown(summaries: &[AlgoSummary]) -> String {
    let mut md = String::from("# Training summary\n\nCells show median [1st quartile, 3rd quartile] across seeds. ");
    md.push_str("`score` is the win rate on FocusFire and landmark occupancy on CooperativeSpread.\n\n");
    md.push_str("## Final performance\n\n| algo | seeds | score | eval return |\n|---|---|---|---|\n");
    for s in summaries {
        let _ = writeln!(md, "| {} | {} | {} | {} |", s.algo, s.seeds.len(), cell(&s.final_score), cell(&s.final_return));
    }
    for s in summaries {
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let _ = write!(md, "\n## {}\n\nSeeds: {}\n\n| step | n | score | eval return |\n|---|---|---|---|\n", s.algo, seeds.join(", "));
        for c in &s.curve {
            let _ = writeln!(md, "| {} | {} | {} | {} |", c.step, c.seeds, cell(&c.score), cell(&c.eval_return));
        }
    }
    md
}
