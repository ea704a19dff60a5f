use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::Serialize;

use super::eval::check_env;
use super::{files, load_checkpoint, model_based_checkpoint, write_csv, write_json, ExperimentConfig};
use crate::context::EncoderParams;
use crate::envs::{random_policy, rollout, Registry};
use crate::replay::Segment;
use crate::rng::Streams;
use crate::{Error, Result};

/// One context head at one step of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub episode_id: u64,
    pub step: usize,
    pub setting_id: u64,
    pub head: usize,
    pub values: Vec<f64>,
}

pub fn write_embeddings_csv<W: Write>(w: W, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["episode_id".to_string(), "step".into(), "setting_id".into(), "head".into()];
    header.extend((0..dim).map(|i| format!("c{i}")));
    w.write_record(&header)?;
    for r in rows {
        if r.values.len() != dim {
            return Err(Error::Format(format!("row of width {} in a file of width {dim}", r.values.len())));
        }
        let mut rec = vec![r.episode_id.to_string(), r.step.to_string(), r.setting_id.to_string(), r.head.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: Read>(r: R) -> Result<Vec<EmbeddingRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let bad = |m: String| Error::Format(m);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(bad(format!("embedding row {} has {} columns", i + 1, rec.len())));
        }
        let num = |j: usize| rec[j].trim().parse::<f64>().map_err(|_| bad(format!("row {}: cannot parse {:?}", i + 1, &rec[j])));
        let int = |j: usize| rec[j].trim().parse::<u64>().map_err(|_| bad(format!("row {}: cannot parse {:?}", i + 1, &rec[j])));
        rows.push(EmbeddingRow {
            episode_id: int(0)?,
            step: int(1)? as usize,
            setting_id: int(2)?,
            head: int(3)? as usize,
            values: (4..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Rolls out a uniform random policy on `embed_settings` settings of the
/// configured split (spread evenly over the split's grid), `embed_trajectories`
/// episodes each, and records the encoder's contexts at every step with a
/// full history window.
pub fn export_embeddings(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EmbeddingRow>> {
    cfg.validate()?;
    let records = load_checkpoint(&model_based_checkpoint(cfg, out), "train-mb")?;
    let encoder = EncoderParams::from_records(&records)?;
    check_env(cfg.env, encoder.cfg.state_dim)?;
    let all = Registry::standard(cfg.env).enumerate(cfg.split);
    if cfg.embed_settings < 2 || cfg.embed_settings > all.len() || cfg.embed_trajectories < 2 {
        return Err(Error::Config(format!(
            "need 2..={} settings and at least 2 trajectories each, got {} x {}",
            all.len(),
            cfg.embed_settings,
            cfg.embed_trajectories
        )));
    }
    let streams = Streams::new(cfg.seed).child("embeddings", 0);
    let ec = encoder.cfg;
    let mut rows = Vec::new();
    for s in 0..cfg.embed_settings {
        let setting = &all[s * all.len() / cfg.embed_settings];
        for j in 0..cfg.embed_trajectories {
            let ep = (s * cfg.embed_trajectories + j) as u64;
            let mut pol = random_policy(cfg.env, streams.stream("action", ep));
            let traj = rollout(cfg.env, &mut pol, setting, cfg.episode_length, ep, &mut streams.stream("env", ep))?;
            for t in ec.h_past..=traj.len() {
                let seg = Segment::from_history(&traj.transitions[..t], ec.h_past, ec.state_dim, ec.action_dim);
                for (head, values) in encoder.encode_context(&seg)?.vectors.into_iter().enumerate() {
                    rows.push(EmbeddingRow { episode_id: ep, step: t, setting_id: setting.setting_id, head, values });
                }
            }
        }
    }
    std::fs::create_dir_all(out)?;
    write_embeddings_csv(std::fs::File::create(out.join(files::embeddings(cfg.split)))?, &rows)?;
    Ok(rows)
}

/// Per-episode mean of every head, heads concatenated in order, with the
/// episode's setting as label. Episodes come out sorted by id.
pub fn trajectory_means(rows: &[EmbeddingRow]) -> Result<(Vec<u64>, Vec<u64>, Vec<Vec<f64>>)> {
    let mut groups: BTreeMap<u64, (u64, BTreeMap<usize, (Vec<f64>, usize)>)> = BTreeMap::new();
    for r in rows {
        let (setting, heads) = groups.entry(r.episode_id).or_insert_with(|| (r.setting_id, BTreeMap::new()));
        if *setting != r.setting_id {
            return Err(Error::Format(format!("episode {} appears under settings {setting} and {}", r.episode_id, r.setting_id)));
        }
        let (sum, n) = heads.entry(r.head).or_insert_with(|| (vec![0.0; r.values.len()], 0));
        if sum.len() != r.values.len() {
            return Err(Error::Format(format!("episode {} head {} changes width", r.episode_id, r.head)));
        }
        for (s, v) in sum.iter_mut().zip(&r.values) {
            *s += v;
        }
        *n += 1;
    }
    let mut episodes = Vec::new();
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for (ep, (setting, heads)) in groups {
        episodes.push(ep);
        labels.push(setting);
        vectors.push(heads.into_values().flat_map(|(sum, n)| sum.into_iter().map(move |s| s / n as f64)).collect::<Vec<f64>>());
    }
    if let Some(w) = vectors.first().map(Vec::len) {
        if vectors.iter().any(|v| v.len() != w) {
            return Err(Error::Format("episodes disagree on the number of heads".into()));
        }
    }
    Ok((episodes, labels, vectors))
}

/// Projection onto the leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Top-2 PCA by power iteration with deflation on the centered covariance.
///
/// Components whose eigenvalue is negligible are left as zero vectors (the
/// projection coordinate is then 0) and a warning is logged. Each component
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_project(data: &[Vec<f64>]) -> Result<Projection> {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Contract("PCA needs at least one non-empty vector".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = data.iter().map(|x| x.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += x[i] * x[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + k * 3) % 11) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w: Vec<f64> = (0..d).map(|i| cov[i].iter().zip(&v).map(|(c, x)| c * x).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 * trace.max(1e-300) {
                lambda = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            lambda = norm;
            if diff < 1e-13 {
                break;
            }
        }
        if lambda <= 1e-12 * trace || trace == 0.0 {
            warn!("covariance has rank {k}; principal component {} left at zero", k + 1);
            components.push(vec![0.0; d]);
            eigenvalues.push(0.0);
            continue;
        }
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let points = centered
        .iter()
        .map(|x| {
            let p = |c: &Vec<f64>| x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Projection { points, components, eigenvalues })
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Points alone in their cluster score 0, and so does any point whose
/// intra- and nearest inter-cluster distances are both 0.
pub fn silhouette(data: &[Vec<f64>], labels: &[u64]) -> Result<f64> {
    if data.len() != labels.len() {
        return Err(Error::Dimension(format!("{} vectors with {} labels", data.len(), labels.len())));
    }
    let clusters: BTreeMap<u64, Vec<usize>> = labels.iter().enumerate().fold(BTreeMap::new(), |mut m, (i, &l)| {
        m.entry(l).or_default().push(i);
        m
    });
    if clusters.len() < 2 {
        return Err(Error::Contract("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, x) in data.iter().enumerate() {
        let own = &clusters[&labels[i]];
        if own.len() < 2 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(x, &data[j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| m.iter().map(|&j| dist(x, &data[j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingAnalysis {
    pub settings: usize,
    pub trajectories: usize,
    pub dimension: usize,
    pub silhouette: f64,
    pub eigenvalues: Vec<f64>,
}

#[derive(Serialize)]
struct PcaRow {
    episode_id: u64,
    setting_id: u64,
    pc1: f64,
    pc2: f64,
}

/// Projects per-trajectory mean contexts to 2-D and scores how well they
/// cluster by setting.
pub fn analyze_embeddings(rows: &[EmbeddingRow], out: &Path) -> Result<EmbeddingAnalysis> {
    let (episodes, labels, vectors) = trajectory_means(rows)?;
    let mut per_setting: BTreeMap<u64, usize> = BTreeMap::new();
    for l in &labels {
        *per_setting.entry(*l).or_default() += 1;
    }
    if per_setting.len() < 2 || per_setting.values().any(|&c| c < 2) {
        return Err(Error::Contract(format!("need at least 2 settings with 2 trajectories each, got {per_setting:?}")));
    }
    let proj = pca_project(&vectors)?;
    let score = silhouette(&vectors, &labels)?;
    let pca_rows: Vec<PcaRow> = episodes
        .iter()
        .zip(&labels)
        .zip(&proj.points)
        .map(|((&episode_id, &setting_id), p)| PcaRow { episode_id, setting_id, pc1: p[0], pc2: p[1] })
        .collect();
    let analysis = EmbeddingAnalysis {
        settings: per_setting.len(),
        trajectories: vectors.len(),
        dimension: vectors[0].len(),
        silhouette: score,
        eigenvalues: proj.eigenvalues,
    };
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(files::EMBEDDINGS_PCA), &pca_rows)?;
    write_json(&out.join(files::EMBEDDINGS_SUMMARY), &analysis)?;
    Ok(analysis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clusters_score_near_one() {
        let data = vec![vec![0.0, 0.0], vec![0.01, 0.0], vec![100.0, 0.0], vec![100.0, 0.01]];
        let s = silhouette(&data, &[1, 1, 2, 2]).unwrap();
        assert!(s > 0.999, "{s}");
    }

    #[test]
    fn identical_vectors_score_zero() {
        let data = vec![vec![1.0, 2.0]; 6];
        assert_eq!(silhouette(&data, &[0, 0, 0, 1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_by_hand() {
        // Points 0, 1 | 4. Point 0: a = 1, b = 4 -> 0.75. Point 1: a = 1,
        // b = 3 -> 2/3. Point 4 is alone -> 0.
        let data = vec![vec![0.0], vec![1.0], vec![4.0]];
        let s = silhouette(&data, &[0, 0, 1]).unwrap();
        assert!((s - (0.75 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pca_of_axis_aligned_data_is_the_centered_data() {
        let data = vec![vec![3.0, 1.0], vec![-3.0, 1.0], vec![0.0, 2.0], vec![0.0, 0.0]];
        let p = pca_project(&data).unwrap();
        for (x, q) in data.iter().zip(&p.points) {
            assert!((q[0].abs() - x[0].abs()).abs() < 1e-9 && (q[1].abs() - (x[1] - 1.0).abs()).abs() < 1e-9, "{q:?}");
        }
        assert!((p.eigenvalues[0] - 4.5).abs() < 1e-9 && (p.eigenvalues[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rank_one_data_leaves_the_second_component_at_zero() {
        let data: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = pca_project(&data).unwrap();
        assert_eq!(p.eigenvalues[1], 0.0);
        assert!(p.points.iter().all(|q| q[1] == 0.0));
    }

    #[test]
    fn csv_round_trip_and_means() {
        let rows = vec![
            EmbeddingRow { episode_id: 3, step: 10, setting_id: 7, head: 0, values: vec![1.0, 2.0] },
            EmbeddingRow { episode_id: 3, step: 10, setting_id: 7, head: 1, values: vec![0.5, 0.25] },
            EmbeddingRow { episode_id: 3, step: 11, setting_id: 7, head: 0, values: vec![3.0, 4.0] },
            EmbeddingRow { episode_id: 3, step: 11, setting_id: 7, head: 1, values: vec![1.5, 0.75] },
        ];
        let mut buf = Vec::new();
        write_embeddings_csv(&mut buf, &rows).unwrap();
        let back = read_embeddings_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let (eps, labels, vecs) = trajectory_means(&back).unwrap();
        assert_eq!((eps, labels), (vec![3], vec![7]));
        assert_eq!(vecs, vec![vec![2.0, 3.0, 1.0, 0.5]]);
    }
}
