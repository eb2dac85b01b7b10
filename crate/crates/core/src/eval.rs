//! Exact-match evaluation, stale-retrieval accounting, PI slopes and CSV
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::HyperParams;
use crate::data::Episode;
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::system::{predict, EvalMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub depth: usize,
    pub length: usize,
    pub predicted: usize,
    pub gold: usize,
    pub correct: bool,
    pub stale: bool,
}

/// Classifies a prediction as correct, stale or neither.
pub fn score(ep: &Episode, predicted: usize) -> EpisodeRecord {
    let q = &ep.queries[0];
    let correct = predicted == q.gold;
    EpisodeRecord {
        depth: ep.depth,
        length: ep.len(),
        predicted,
        gold: q.gold,
        correct,
        stale: !correct && q.stale.contains(&predicted),
    }
}

/// Scores the first query of every episode. With `jobs > 1` episodes are
/// split across scoped threads; results are identical either way.
pub fn evaluate(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    mode: EvalMode,
    episodes: &[Episode],
    jobs: usize,
) -> Result<Vec<EpisodeRecord>> {
    let one = |ep: &Episode| -> Result<EpisodeRecord> {
        let pred = predict(params, cfg, hp, mode, ep)?;
        Ok(score(ep, pred[0]))
    };
    if jobs <= 1 || episodes.len() < 2 {
        return episodes.iter().map(one).collect();
    }
    let chunk = episodes.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            episodes.chunks(chunk).map(|c| s.spawn(move || c.iter().map(one).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(episodes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One method × depth cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: String,
    pub depth: usize,
    pub episodes: usize,
    pub accuracy: f64,
    pub stale_rate: f64,
    pub mean_length: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(method: &str, records: &[EpisodeRecord]) -> Vec<Cell> {
    let mut by_depth: BTreeMap<usize, Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        by_depth.entry(r.depth).or_default().push(r);
    }
    by_depth
        .into_iter()
        .map(|(depth, rs)| {
            let n = rs.len();
            let hits = rs.iter().filter(|r| r.correct).count();
            let stale = rs.iter().filter(|r| r.stale).count();
            let (lo, hi) = wilson(hits, n, 1.959_963_984_540_054);
            Cell {
                method: method.to_string(),
                depth,
                episodes: n,
                accuracy: hits as f64 / n as f64,
                stale_rate: stale as f64 / n as f64,
                mean_length: rs.iter().map(|r| r.length as f64).sum::<f64>() / n as f64,
                ci_low: lo,
                ci_high: hi,
            }
        })
        .collect()
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (n, p) = (n as f64, k as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Least-squares slope of accuracy against `ln(depth)`.
pub fn pi_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Input("a slope needs at least two depths".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(d, _)| (d as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("depths must not all be equal".into()));
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

pub const RESULTS_HEADER: &str = "method,depth,n_episodes,accuracy,stale_rate,mean_length,ci_low,ci_high";

pub fn results_csv(cells: &[Cell]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.3},{:.6},{:.6}",
            c.method, c.depth, c.episodes, c.accuracy, c.stale_rate, c.mean_length, c.ci_low, c.ci_high
        )
        .unwrap();
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<Cell>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::Csv { line: 1, detail: "missing results header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: String| Error::Csv { line: i + 1, detail: d };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        if f[0].is_empty() {
            return Err(bad("empty method name".into()));
        }
        let cell = Cell {
            method: f[0].to_string(),
            depth: int(f[1])?,
            episodes: int(f[2])?,
            accuracy: num(f[3])?,
            stale_rate: num(f[4])?,
            mean_length: num(f[5])?,
            ci_low: num(f[6])?,
            ci_high: num(f[7])?,
        };
        for (name, v) in [("accuracy", cell.accuracy), ("stale_rate", cell.stale_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("{name} {v} outside [0, 1]")));
            }
        }
        out.push(cell);
    }
    Ok(out)
}

/// Per-method slopes over all depths and over depths up to 10.
pub fn slopes(cells: &[Cell]) -> Vec<(String, Option<f64>, Option<f64>)> {
    let mut methods: Vec<&str> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let pts: Vec<(usize, f64)> =
                cells.iter().filter(|c| c.method == m).map(|c| (c.depth, c.accuracy)).collect();
            let low: Vec<(usize, f64)> = pts.iter().copied().filter(|p| p.0 <= 10).collect();
            (m.to_string(), pi_slope(&pts).ok(), pi_slope(&low).ok())
        })
        .collect()
}

/// Writes `results.csv`, `slopes.csv` and `plotdata.csv` and returns any
/// warnings about missing grid cells.
pub fn emit_report(cells: &[Cell], dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(format!("writing {}", p.display())))
    };
    write("results.csv", results_csv(cells))?;
    let mut s = String::from("method,slope_all,slope_1_10\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for (m, all, low) in slopes(cells) {
        writeln!(s, "{m},{},{}", fmt(all), fmt(low)).unwrap();
    }
    write("slopes.csv", s)?;

    let mut methods: Vec<&str> = Vec::new();
    let mut depths: Vec<usize> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
        if !depths.contains(&c.depth) {
            depths.push(c.depth);
        }
    }
    depths.sort_unstable();
    let mut warnings = Vec::new();
    let mut p = format!("depth,{}\n", methods.join(","));
    for &d in &depths {
        let mut row = d.to_string();
        for m in &methods {
            row.push(',');
            match cells.iter().find(|c| c.method == *m && c.depth == d) {
                Some(c) => row.push_str(&format!("{:.6}", c.accuracy)),
                None => {
                    row.push_str("NA");
                    warnings.push(format!("no result for {m} at depth {d}"));
                }
            }
        }
        p.push_str(&row);
        p.push('\n');
    }
    write("plotdata.csv", p)?;
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EpisodeKind;

    #[test]
    fn scoring_is_exclusive() {
        let ep = Episode::from_tokens(
            EpisodeKind::Pi,
            3,
            vec![1, 2, 10, 200, 2, 10, 201, 2, 10, 202, 3, 10],
        )
        .unwrap();
        let r = score(&ep, 202);
        assert!(r.correct && !r.stale);
        let r = score(&ep, 200);
        assert!(!r.correct && r.stale);
        let r = score(&ep, 400);
        assert!(!r.correct && !r.stale);
    }

    #[test]
    fn slope_examples() {
        assert_eq!(pi_slope(&[(1, 0.5), (2, 0.5), (5, 0.5)]).unwrap(), 0.0);
        let two = pi_slope(&[(1, 1.0), (3, 0.8)]).unwrap();
        assert!((two - (-0.2 / 3f64.ln())).abs() < 1e-12);
        assert!(pi_slope(&[(1, 1.0)]).is_err());
    }

    #[test]
    fn wilson_brackets_the_point_estimate() {
        let (lo, hi) = wilson(90, 100, 1.96);
        assert!(lo < 0.9 && hi > 0.9);
        assert_eq!(wilson(0, 10, 1.96).0, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let cells = vec![Cell {
            method: "full".into(),
            depth: 5,
            episodes: 200,
            accuracy: 0.125,
            stale_rate: 0.5,
            mean_length: 18.0,
            ci_low: 0.08,
            ci_high: 0.18,
        }];
        assert_eq!(parse_results_csv(&results_csv(&cells)).unwrap(), cells);
        assert!(parse_results_csv("nope").is_err());
    }
}
