//! Gallery/probe identification and verification metrics.
//!
//! Score matrices are indexed `[probe][gallery]`. Identification ties go to
//! the lowest gallery index. The verification threshold for a target FAR is
//! the smallest observed score `t` with `#(impostor ≥ t) / #impostor ≤ far`;
//! scores equal to the threshold count as accepts. If no observed score
//! qualifies the threshold is `+∞` and the verification rate is 0.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::cosine_similarity;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub sample_id: String,
    pub identity: usize,
    pub embedding: Vec<f32>,
}

/// One VIS gallery entry per identity, NIR probes.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    gallery: Vec<Entry>,
    probes: Vec<Entry>,
}

impl Protocol {
    pub fn new(gallery: Vec<Entry>, probes: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for g in &gallery {
            if !seen.insert(g.identity) {
                return Err(Error::Protocol(format!(
                    "identity {} appears twice in the gallery ({})",
                    g.identity, g.sample_id
                )));
            }
        }
        if gallery.is_empty() || probes.is_empty() {
            return Err(Error::Protocol("gallery and probe sets must be non-empty".into()));
        }
        for p in &probes {
            if !seen.contains(&p.identity) {
                return Err(Error::Protocol(format!(
                    "probe {} has identity {} with no gallery entry",
                    p.sample_id, p.identity
                )));
            }
        }
        Ok(Protocol { gallery, probes })
    }

    pub fn gallery(&self) -> &[Entry] {
        &self.gallery
    }

    pub fn probes(&self) -> &[Entry] {
        &self.probes
    }

    pub fn gallery_ids(&self) -> Vec<usize> {
        self.gallery.iter().map(|e| e.identity).collect()
    }

    pub fn probe_ids(&self) -> Vec<usize> {
        self.probes.iter().map(|e| e.identity).collect()
    }
}

/// Cosine similarities `[num_probes][num_gallery]`.
pub fn score_matrix(protocol: &Protocol) -> Result<Vec<Vec<f64>>> {
    let widen = |e: &Entry| e.embedding.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let gallery: Vec<Vec<f64>> = protocol.gallery.iter().map(widen).collect();
    protocol
        .probes
        .iter()
        .map(|p| {
            let pv = widen(p);
            gallery
                .iter()
                .map(|g| cosine_similarity(&pv, g).map(|s| s.clamp(-1.0, 1.0)))
                .collect()
        })
        .collect()
}

fn check_labels(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    if scores.is_empty() || scores.len() != probe_ids.len() {
        return Err(Error::Protocol(format!(
            "{} score rows for {} probes",
            scores.len(),
            probe_ids.len()
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != gallery_ids.len()) {
        return Err(Error::Protocol(format!(
            "score row of length {} for {} gallery entries",
            row.len(),
            gallery_ids.len()
        )));
    }
    let gallery: HashSet<usize> = gallery_ids.iter().copied().collect();
    if gallery.len() != gallery_ids.len() {
        return Err(Error::Protocol("gallery identities are not unique".into()));
    }
    if let Some(p) = probe_ids.iter().find(|p| !gallery.contains(p)) {
        return Err(Error::Protocol(format!("probe identity {p} is not in the gallery")));
    }
    Ok(())
}

/// Zero-based rank of the correct gallery entry for each probe.
fn correct_ranks(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Vec<usize> {
    scores
        .iter()
        .zip(probe_ids)
        .map(|(row, pid)| {
            let j = gallery_ids.iter().position(|g| g == pid).expect("checked");
            let s = row[j];
            row.iter()
                .enumerate()
                .filter(|&(k, &v)| v > s || (v == s && k < j))
                .count()
        })
        .collect()
}

pub fn rank1(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    Ok(cmc_curve(scores, probe_ids, gallery_ids, 1)?[0])
}

/// `cmc[k]` is the fraction of probes whose correct entry is within the top `k + 1`.
pub fn cmc_curve(
    scores: &[Vec<f64>],
    probe_ids: &[usize],
    gallery_ids: &[usize],
    max_rank: usize,
) -> Result<Vec<f64>> {
    check_labels(scores, probe_ids, gallery_ids)?;
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be positive".into()));
    }
    let ranks = correct_ranks(scores, probe_ids, gallery_ids);
    let n = ranks.len() as f64;
    Ok((0..max_rank)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect())
}

pub fn vr_at_far(
    scores: &[Vec<f64>],
    probe_ids: &[usize],
    gallery_ids: &[usize],
    far: f64,
) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::InvalidArgument(format!("far must be in (0, 1), got {far}")));
    }
    if scores.len() != probe_ids.len() || scores.iter().any(|r| r.len() != gallery_ids.len()) {
        return Err(Error::Protocol("score matrix does not match the labels".into()));
    }
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (row, pid) in scores.iter().zip(probe_ids) {
        for (&s, gid) in row.iter().zip(gallery_ids) {
            if s.is_nan() {
                return Err(Error::Protocol("NaN score".into()));
            }
            if pid == gid {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    if impostor.is_empty() {
        return Err(Error::Protocol("no impostor pairs".into()));
    }
    if genuine.is_empty() {
        return Err(Error::Protocol("no genuine pairs".into()));
    }
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    let n_imp = impostor.len() as f64;
    let threshold = genuine
        .iter()
        .chain(&impostor)
        .copied()
        .filter(|&t| at_least(&impostor, t) as f64 / n_imp <= far)
        .fold(f64::INFINITY, f64::min);
    Ok(at_least(&genuine, threshold) as f64 / genuine.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    /// `(far, verification rate)`.
    pub vr: Vec<(f64, f64)>,
    pub cmc: Vec<f64>,
}

pub fn evaluate(protocol: &Protocol, fars: &[f64]) -> Result<Metrics> {
    let scores = score_matrix(protocol)?;
    let (pids, gids) = (protocol.probe_ids(), protocol.gallery_ids());
    let cmc = cmc_curve(&scores, &pids, &gids, gids.len())?;
    let vr = fars
        .iter()
        .map(|&far| Ok((far, vr_at_far(&scores, &pids, &gids, far)?)))
        .collect::<Result<_>>()?;
    Ok(Metrics {
        rank1: cmc[0],
        vr,
        cmc,
    })
}

/// Writes `metric,value` rows: `rank1` and one `vr@far=<far>` per FAR.
pub fn write_metrics_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = vec![("rank1".to_string(), metrics.rank1)];
    rows.extend(metrics.vr.iter().map(|&(far, vr)| (format!("vr@far={far}"), vr)));
    w.write_record(["metric", "value"]).map_err(|e| csv_error(path, e))?;
    for (name, value) in rows {
        w.write_record([name, format!("{value:.6}")])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cmc_csv(path: &Path, cmc: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["rank", "accuracy"]).map_err(|e| csv_error(path, e))?;
    for (k, acc) in cmc.iter().enumerate() {
        w.write_record([(k + 1).to_string(), format!("{acc:.6}")])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank1_examples() {
        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(rank1(&s, &[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(rank1(&s, &[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(rank1(&s, &[0, 2], &[0, 1]).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = vec![vec![0.5, 0.5]];
        assert_eq!(rank1(&s, &[3], &[3, 4]).unwrap(), 1.0);
        assert_eq!(rank1(&s, &[4], &[3, 4]).unwrap(), 0.0);
        assert_eq!(cmc_curve(&s, &[4], &[3, 4], 2).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn hand_quantile_case() {
        // impostors 0.1, 0.3, 0.5; genuine 0.2, 0.6, 0.9
        let s = vec![vec![0.2, 0.1], vec![0.3, 0.6], vec![0.9, 0.5]];
        let vr = vr_at_far(&s, &[0, 1, 0], &[0, 1], 1.0 / 3.0).unwrap();
        assert!((vr - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vr_edge_cases() {
        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(vr_at_far(&s, &[0, 1], &[0, 1], 0.01).unwrap(), 1.0);
        assert!(vr_at_far(&[vec![0.5]], &[0], &[0], 0.1).is_err());
        assert!(vr_at_far(&s, &[0, 1], &[0, 1], 0.0).is_err());
        // top score is an impostor: nothing qualifies below 50% FAR
        let s = vec![vec![0.1, 0.9]];
        assert_eq!(vr_at_far(&s, &[0], &[0, 1], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn protocol_validation() {
        let e = |id: usize, v: f32| Entry {
            sample_id: format!("s{id}"),
            identity: id,
            embedding: vec![v, 1.0],
        };
        assert!(Protocol::new(vec![e(0, 1.0), e(0, 2.0)], vec![e(0, 1.0)]).is_err());
        assert!(Protocol::new(vec![e(0, 1.0)], vec![e(1, 1.0)]).is_err());
        let p = Protocol::new(vec![e(0, 1.0), e(1, -1.0)], vec![e(0, 1.0)]).unwrap();
        let s = score_matrix(&p).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0][0] - 1.0).abs() < 1e-12);
        let zero = Entry {
            embedding: vec![0.0, 0.0],
            ..e(1, 0.0)
        };
        let p = Protocol::new(vec![e(0, 1.0), zero], vec![e(0, 1.0)]).unwrap();
        assert!(score_matrix(&p).is_err());
    }

    #[test]
    fn csv_output() {
        let dir = tempfile::tempdir().unwrap();
        let m = Metrics {
            rank1: 1.0,
            vr: vec![(0.01, 0.5), (0.001, 0.25)],
            cmc: vec![1.0, 1.0],
        };
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "metric,value\nrank1,1.000000\nvr@far=0.01,0.500000\nvr@far=0.001,0.250000\n"
        );
        let path = dir.path().join("cmc.csv");
        write_cmc_csv(&path, &m.cmc).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "rank,accuracy\n1,1.000000\n2,1.000000\n");
    }
}
