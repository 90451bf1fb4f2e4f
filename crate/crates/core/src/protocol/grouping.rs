//! Group formation for the grouped cyclic variant.

use rand::Rng;

use super::{Federation, Grouping};
use crate::error::{Error, Result};
use crate::nncore::{derive_seed, seeded_rng};

const TAG_KMEANS: u64 = 0x21;
const MAX_LLOYD_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `points` into `k` groups with k-means++ seeding followed by
/// Lloyd iterations. Features are standardized per coordinate first. Groups
/// are returned as sorted index lists, ordered by their smallest member.
pub fn kmeans_groups(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} groups from {n} federations")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("feature statistics differ in width".into()));
    }
    let mut z: Vec<Vec<f64>> = points.to_vec();
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for p in z.iter_mut() {
            p[j] = (p[j] - mean) / sd;
        }
    }

    let mut rng = seeded_rng(derive_seed(seed, &[TAG_KMEANS]));
    let mut centers = vec![z[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = z
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, di) in d.iter().enumerate() {
                if target < *di {
                    chosen = i;
                    break;
                }
                target -= di;
            }
            chosen
        } else {
            // All points coincide with a center; take the first unused index.
            (0..n).find(|i| !centers.iter().any(|c| c == &z[*i])).unwrap_or(centers.len())
        };
        centers.push(z[pick].clone());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        (0..centers.len())
            .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
            .expect("k >= 1")
    };
    let mut assign: Vec<usize> = z.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = z.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
        // Refill empty clusters with the point farthest from its center.
        for c in 0..k {
            if assign.contains(&c) {
                continue;
            }
            let far = (0..n)
                .filter(|&i| assign.iter().filter(|&&a| a == assign[i]).count() > 1)
                .max_by(|&a, &b| {
                    sq_dist(&z[a], &centers[assign[a]]).total_cmp(&sq_dist(&z[b], &centers[assign[b]]))
                })
                .expect("k <= n leaves a cluster with two members");
            assign[far] = c;
            centers[c] = z[far].clone();
        }
        let next: Vec<usize> = z.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign || (0..k).any(|c| !next.contains(&c)) {
            break;
        }
        assign = next;
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, a) in assign.iter().enumerate() {
        groups[*a].push(i);
    }
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Turns a grouping into rings of positions into `feds`. Each group is
/// ordered by the global ring `order`, and groups by their first member's
/// place in it. Without a grouping, three k-means groups are formed (fewer
/// when there are fewer federations).
pub fn resolve_groups(grouping: Option<&Grouping>, feds: &[Federation], order: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = feds.len();
    let groups = match grouping {
        Some(Grouping::Explicit(groups)) => {
            let mut seen = vec![false; n];
            for g in groups {
                if g.is_empty() {
                    return Err(Error::Config("empty group".into()));
                }
                for &i in g {
                    if i >= n || seen[i] {
                        return Err(Error::Config(format!("federation {i} is out of range or in two groups")));
                    }
                    seen[i] = true;
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::Config(format!("federation {missing} is in no group")));
            }
            groups.clone()
        }
        other => {
            let k = match other {
                Some(Grouping::KMeans(k)) => *k,
                _ => 3.min(n),
            };
            let stats: Vec<Vec<f64>> = feds
                .iter()
                .map(|f| {
                    let (mean, var) = f.train().feature_moments();
                    mean.into_iter().chain(var).collect()
                })
                .collect();
            kmeans_groups(&stats, k, seed)?
        }
    };
    let mut rank = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    let mut rings: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            g.sort_by_key(|&i| rank[i]);
            g
        })
        .collect();
    rings.sort_by_key(|g| rank[g[0]]);
    Ok(rings)
}
