//! Call-graph impact factors and a least-squares severity model.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{build_call_graph, CallGraph};
use crate::macke::{ErrorChain, VulnRecord};
use crate::ir::Program;

pub const FEATURES: [&str; 7] = [
    "degree_in",
    "degree_out",
    "betweenness",
    "entry_distance",
    "longest_chain",
    "exploit_count",
    "reachable",
];

pub const MAX_SCORE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SeverityError {
    #[error("unknown vulnerability `{0}`")]
    UnknownVulnerability(String),
    #[error("{rows} rows cannot determine {params} parameters")]
    Underdetermined { rows: usize, params: usize },
    #[error("design matrix is rank deficient (rank {rank} of {params})")]
    SingularDesign { rank: usize, params: usize },
    #[error("model lacks weight `{0}`")]
    MissingWeight(String),
    #[error("dataset: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImpactVector {
    pub degree_in: u64,
    pub degree_out: u64,
    pub betweenness: f64,
    pub entry_distance: u64,
    pub longest_chain: u64,
    pub exploit_count: u64,
    pub reachable_from_entry: u64,
}

impl ImpactVector {
    pub fn features(&self) -> [f64; 7] {
        [
            self.degree_in as f64,
            self.degree_out as f64,
            self.betweenness,
            self.entry_distance as f64,
            self.longest_chain as f64,
            self.exploit_count as f64,
            self.reachable_from_entry as f64,
        ]
    }
}

/// Shortest-path betweenness on the undirected call graph (self-loops
/// ignored), summed over ordered endpoint pairs and divided by
/// (n-1)(n-2); 0 for graphs with fewer than three nodes.
pub fn betweenness(cg: &CallGraph) -> BTreeMap<String, f64> {
    let names: Vec<&str> = cg.nodes.iter().map(String::as_str).collect();
    let n = names.len();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in cg.edge_pairs() {
        let (i, j) = (index[a], index[b]);
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut score = vec![0.0f64; n];
    for s in 0..n {
        let mut order = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![usize::MAX; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0f64; n];
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                score[w] += delta[w];
            }
        }
    }
    let norm = if n >= 3 {
        ((n - 1) * (n - 2)) as f64
    } else {
        0.0
    };
    names
        .iter()
        .zip(score)
        .map(|(name, b)| (name.to_string(), if norm > 0.0 { b / norm } else { 0.0 }))
        .collect()
}

/// Impact factors of one vulnerability record.
pub fn compute_impact_factors(
    p: &Program,
    records: &[VulnRecord],
    chains: &[ErrorChain],
    record_id: &str,
) -> Result<ImpactVector, SeverityError> {
    let record = records
        .iter()
        .find(|r| r.id == record_id)
        .ok_or_else(|| SeverityError::UnknownVulnerability(record_id.to_string()))?;
    let cg = build_call_graph(p);
    Ok(impact_with(p, &cg, &betweenness(&cg), record, chains))
}

/// Impact factors for every record, in record order.
pub fn impact_table(
    p: &Program,
    records: &[VulnRecord],
    chains: &[ErrorChain],
) -> Vec<ImpactVector> {
    let cg = build_call_graph(p);
    let between = betweenness(&cg);
    records
        .iter()
        .map(|r| impact_with(p, &cg, &between, r, chains))
        .collect()
}

fn impact_with(
    p: &Program,
    cg: &CallGraph,
    between: &BTreeMap<String, f64>,
    record: &VulnRecord,
    chains: &[ErrorChain],
) -> ImpactVector {
    let v = record.root_location.function.as_str();
    let depths = cg.depths_from(p.entry());
    let max_finite = depths.values().copied().max().unwrap_or(0) as u64;
    let (entry_distance, reachable) = match depths.get(v) {
        Some(d) => (*d as u64, 1),
        None => (max_finite + 1, 0),
    };
    ImpactVector {
        degree_in: cg.callers(v).len() as u64,
        degree_out: cg.callees(v).count() as u64,
        betweenness: between.get(v).copied().unwrap_or(0.0),
        entry_distance,
        longest_chain: chains
            .iter()
            .filter(|c| c.root_location == record.root_location)
            .map(|c| c.len() as u64)
            .max()
            .unwrap_or(0),
        exploit_count: record.exploits.len() as u64,
        reachable_from_entry: reachable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainingMeta {
    pub rows: usize,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeverityModel {
    /// Keyed by dataset column name.
    pub weights: BTreeMap<String, f64>,
    pub intercept: f64,
    pub training: TrainingMeta,
}

impl SeverityModel {
    pub fn weight_vector(&self) -> Result<[f64; 7], SeverityError> {
        let mut w = [0.0; 7];
        for (slot, name) in w.iter_mut().zip(FEATURES) {
            *slot = *self
                .weights
                .get(name)
                .ok_or_else(|| SeverityError::MissingWeight(name.to_string()))?;
        }
        Ok(w)
    }

    /// Unclamped affine value.
    pub fn raw(&self, features: &[f64; 7]) -> Result<f64, SeverityError> {
        let w = self.weight_vector()?;
        Ok(w.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() + self.intercept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub features: [f64; 7],
    pub score: f64,
}

/// Ordinary least squares with an intercept.
pub fn train_model(rows: &[TrainingRow]) -> Result<SeverityModel, SeverityError> {
    let params = FEATURES.len() + 1;
    if rows.len() < params {
        return Err(SeverityError::Underdetermined {
            rows: rows.len(),
            params,
        });
    }
    let x = DMatrix::from_fn(rows.len(), params, |i, j| {
        if j < FEATURES.len() {
            rows[i].features[j]
        } else {
            1.0
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.score));
    let svd = x.clone().svd(true, true);
    let largest = svd.singular_values.max();
    let eps = largest * 1e-10 * rows.len().max(params) as f64;
    let rank = svd.rank(eps);
    if rank < params {
        return Err(SeverityError::SingularDesign { rank, params });
    }
    let beta = svd
        .solve(&y, eps)
        .map_err(|_| SeverityError::SingularDesign { rank, params })?;
    let residual = (&x * &beta - &y).norm();
    Ok(SeverityModel {
        weights: FEATURES
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), beta[i]))
            .collect(),
        intercept: beta[FEATURES.len()],
        training: TrainingMeta {
            rows: rows.len(),
            residual_norm: residual,
        },
    })
}

pub fn predict_score(m: &SeverityModel, x: &ImpactVector) -> Result<f64, SeverityError> {
    predict_features(m, &x.features())
}

pub fn predict_features(m: &SeverityModel, features: &[f64; 7]) -> Result<f64, SeverityError> {
    Ok(m.raw(features)?.clamp(0.0, MAX_SCORE))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    degree_in: f64,
    degree_out: f64,
    betweenness: f64,
    entry_distance: f64,
    longest_chain: f64,
    exploit_count: f64,
    reachable: f64,
    score: f64,
}

pub fn read_dataset(r: impl Read) -> Result<Vec<TrainingRow>, SeverityError> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize::<CsvRow>() {
        let c = rec?;
        rows.push(TrainingRow {
            features: [
                c.degree_in,
                c.degree_out,
                c.betweenness,
                c.entry_distance,
                c.longest_chain,
                c.exploit_count,
                c.reachable,
            ],
            score: c.score,
        });
    }
    Ok(rows)
}

pub fn write_dataset(w: impl Write, rows: &[TrainingRow]) -> Result<(), SeverityError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        let f = r.features;
        out.serialize(CsvRow {
            degree_in: f[0],
            degree_out: f[1],
            betweenness: f[2],
            entry_distance: f[3],
            longest_chain: f[4],
            exploit_count: f[5],
            reachable: f[6],
            score: r.score,
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::macke::{run_macke, MackeConfig};

    #[test]
    fn path_graph_betweenness() {
        let p = parse_program(include_str!("../fixtures/p1.ir")).unwrap();
        let b = betweenness(&build_call_graph(&p));
        assert_eq!(b["mid"], 1.0);
        assert_eq!(b["main"], 0.0);
        assert_eq!(b["target"], 0.0);
    }

    #[test]
    fn small_graphs_have_zero_betweenness() {
        let p = parse_program("fn main()\n  call f()\n  ret\n\nfn f()\n  ret\n").unwrap();
        assert!(betweenness(&build_call_graph(&p)).values().all(|&b| b == 0.0));
    }

    #[test]
    fn p1_target_impact() {
        let p = parse_program(include_str!("../fixtures/p1.ir")).unwrap();
        let r = run_macke(&p, &MackeConfig::default()).unwrap();
        let own = r.records.iter().find(|r| r.found_in == "target").unwrap();
        let v = compute_impact_factors(&p, &r.records, &r.chains, &own.id).unwrap();
        assert_eq!(v.entry_distance, 2);
        assert_eq!(v.degree_in, 1);
        assert_eq!(v.degree_out, 0);
        assert_eq!(v.longest_chain, 3);
        assert_eq!(v.exploit_count, 1);
        assert_eq!(v.reachable_from_entry, 1);
        assert!(matches!(
            compute_impact_factors(&p, &r.records, &r.chains, "nope"),
            Err(SeverityError::UnknownVulnerability(_))
        ));
    }

    #[test]
    fn unreachable_distance_encoding() {
        let p = parse_program(
            "fn main()\n  call a()\n  ret\n\nfn a()\n  call b()\n  ret\n\nfn b()\n  ret\n\nfn u()\n  assert 0\n  ret\n",
        )
        .unwrap();
        let r = run_macke(&p, &MackeConfig::default()).unwrap();
        let rec = r.records.iter().find(|r| r.root_location.function == "u").unwrap();
        let v = compute_impact_factors(&p, &r.records, &r.chains, &rec.id).unwrap();
        assert_eq!(v.entry_distance, 3);
        assert_eq!(v.reachable_from_entry, 0);
    }

    fn rows_from(weights: [f64; 7], intercept: f64, n: usize) -> Vec<TrainingRow> {
        (0..n)
            .map(|i| {
                let f = [
                    (i % 5) as f64,
                    (i * 7 % 4) as f64,
                    (i * 13 % 11) as f64 / 10.0,
                    (i * 3 % 6) as f64,
                    (1 + i % 4) as f64,
                    (1 + i * 5 % 7) as f64,
                    (i % 3 != 0) as u8 as f64,
                ];
                let score = f.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + intercept;
                TrainingRow { features: f, score }
            })
            .collect()
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let w = [0.3, -0.2, 2.0, -0.4, 0.5, 0.1, 1.5];
        let m = train_model(&rows_from(w, 1.0, 40)).unwrap();
        let got = m.weight_vector().unwrap();
        for (a, b) in got.iter().zip(w) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((m.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn underdetermined_and_singular() {
        let rows = rows_from([1.0; 7], 0.0, 3);
        assert!(matches!(
            train_model(&rows),
            Err(SeverityError::Underdetermined { rows: 3, .. })
        ));
        let mut rows = rows_from([1.0; 7], 0.0, 30);
        for r in &mut rows {
            r.features[1] = r.features[0] * 2.0;
        }
        assert!(matches!(
            train_model(&rows),
            Err(SeverityError::SingularDesign { .. })
        ));
    }

    #[test]
    fn predictions_clamp() {
        let mut m = train_model(&rows_from([0.0; 7], 0.0, 20)).unwrap();
        m.intercept = 12.3;
        assert_eq!(predict_features(&m, &[0.0; 7]).unwrap(), 10.0);
        m.intercept = -1.4;
        assert_eq!(predict_features(&m, &[0.0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = rows_from([0.5; 7], 2.0, 9);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "degree_in,degree_out,betweenness,entry_distance,longest_chain,exploit_count,reachable,score\n"
        ));
        assert_eq!(read_dataset(&buf[..]).unwrap(), rows);
    }
}
