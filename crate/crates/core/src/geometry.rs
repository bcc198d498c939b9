//! Locations, distances, maximin ordering and nearest-predecessor sets.
//!
//! Everything downstream (inducing points, transport-map conditioning sets,
//! the transport-map prior) is driven by the greedy maximin permutation built
//! here, so the tie-breaking rules are fixed and deterministic.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Straight-line distance between unit-sphere embeddings of (lon, lat) in degrees.
    ChordalSphere,
    /// Plain Euclidean distance on (x, y).
    EuclideanPlane,
}

impl Metric {
    pub fn tag(self) -> u8 {
        match self {
            Metric::ChordalSphere => 0,
            Metric::EuclideanPlane => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::ChordalSphere),
            1 => Some(Metric::EuclideanPlane),
            _ => None,
        }
    }
}

/// Checks that a (lon, lat) pair is valid for the chordal metric.
fn check_lon_lat(lon: f64, lat: f64) -> Result<()> {
    if !(lon.is_finite() && (-180.0..360.0).contains(&lon)) {
        return Err(SctError::domain(format!("longitude {lon} outside [-180, 360)")));
    }
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
        return Err(SctError::domain(format!("latitude {lat} outside [-90, 90]")));
    }
    Ok(())
}

fn unit_vector(lon: f64, lat: f64) -> [f64; 3] {
    let (lon, lat) = (lon.to_radians(), lat.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Distance between two coordinate pairs under `metric`.
pub fn distance(a: [f64; 2], b: [f64; 2], metric: Metric) -> Result<f64> {
    match metric {
        Metric::ChordalSphere => {
            check_lon_lat(a[0], a[1])?;
            check_lon_lat(b[0], b[1])?;
            Ok(chord(&unit_vector(a[0], a[1]), &unit_vector(b[0], b[1])))
        }
        Metric::EuclideanPlane => {
            if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
                return Err(SctError::domain("non-finite planar coordinate"));
            }
            Ok((a[0] - b[0]).hypot(a[1] - b[1]))
        }
    }
}

fn chord(u: &[f64; 3], v: &[f64; 3]) -> f64 {
    let d = [u[0] - v[0], u[1] - v[1], u[2] - v[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// A validated set of distinct locations.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    coords: Vec<[f64; 2]>,
    metric: Metric,
    // Cartesian embedding used for fast distance evaluation.
    embedded: Vec<[f64; 3]>,
}

impl LocationSet {
    pub fn new(coords: Vec<[f64; 2]>, metric: Metric) -> Result<Self> {
        if coords.is_empty() {
            return Err(SctError::validation("location set must contain at least one location"));
        }
        let mut embedded = Vec::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            match metric {
                Metric::ChordalSphere => {
                    check_lon_lat(c[0], c[1])
                        .map_err(|e| SctError::validation(format!("location {i}: {e}")))?;
                    embedded.push(unit_vector(c[0], c[1]));
                }
                Metric::EuclideanPlane => {
                    if !(c[0].is_finite() && c[1].is_finite()) {
                        return Err(SctError::validation(format!(
                            "location {i}: non-finite coordinate"
                        )));
                    }
                    embedded.push([c[0], c[1], 0.0]);
                }
            }
        }
        let dups = duplicate_groups(&embedded);
        if !dups.is_empty() {
            let listing: Vec<String> = dups.iter().map(|g| format!("{g:?}")).collect();
            return Err(SctError::validation(format!(
                "duplicate locations (indices): {}",
                listing.join(", ")
            )));
        }
        Ok(LocationSet { coords, metric, embedded })
    }

    /// Regular `nx` x `ny` planar grid with unit spacing, row-major in x.
    pub fn planar_grid(nx: usize, ny: usize) -> Self {
        let coords = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| [x as f64, y as f64]))
            .collect();
        LocationSet::new(coords, Metric::EuclideanPlane).expect("grid points are distinct")
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        chord(&self.embedded[i], &self.embedded[j])
    }

    /// Largest pairwise distance (exact, O(L^2)).
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| self.dist(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LocationSet {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            metric: self.metric,
            embedded: idx.iter().map(|&i| self.embedded[i]).collect(),
        }
    }
}

/// Groups of indices whose embeddings coincide (to 1e-10).
fn duplicate_groups(embedded: &[[f64; 3]]) -> Vec<Vec<usize>> {
    let key = |p: &[f64; 3]| {
        let q = |v: f64| (v * 1e10).round() as i64;
        (q(p[0]), q(p[1]), q(p[2]))
    };
    let mut seen: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in embedded.iter().enumerate() {
        seen.entry(key(p)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = seen.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    groups
}

/// A greedy maximin permutation of a location set.
#[derive(Clone, Debug, PartialEq)]
pub struct MaximinOrdering {
    /// `order[j]` is the original index of the location at position `j`.
    pub order: Vec<usize>,
    /// `min_dists[j - 1]` is the distance from position `j` to its nearest predecessor (`j >= 1`).
    pub min_dists: Vec<f64>,
    position: Vec<usize>,
}

impl MaximinOrdering {
    pub fn from_parts(order: Vec<usize>, min_dists: Vec<f64>) -> Result<Self> {
        let n = order.len();
        if n == 0 || min_dists.len() + 1 != n {
            return Err(SctError::validation("ordering/min-distance length mismatch"));
        }
        let mut position = vec![usize::MAX; n];
        for (j, &i) in order.iter().enumerate() {
            if i >= n || position[i] != usize::MAX {
                return Err(SctError::validation("ordering is not a permutation"));
            }
            position[i] = j;
        }
        Ok(MaximinOrdering { order, min_dists, position })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Position in the ordering of original index `i`.
    pub fn position_of(&self, i: usize) -> usize {
        self.position[i]
    }

    /// Minimum distance to predecessors for position `pos`; `None` for the first position.
    pub fn delta(&self, pos: usize) -> Option<f64> {
        pos.checked_sub(1).map(|p| self.min_dists[p])
    }

    /// The first `m` original indices (inducing-point prefix).
    pub fn prefix(&self, m: usize) -> &[usize] {
        &self.order[..m.min(self.order.len())]
    }
}

/// Exact O(L^2) greedy maximin ordering starting at original index `first`.
///
/// Ties in the argmax go to the lowest original index.
pub fn maximin_order(locs: &LocationSet, first: usize) -> Result<MaximinOrdering> {
    let n = locs.len();
    if first >= n {
        return Err(SctError::domain(format!("first index {first} out of range for {n} locations")));
    }
    let mut chosen = vec![false; n];
    let mut min_d: Vec<f64> = (0..n).map(|i| locs.dist(i, first)).collect();
    let mut order = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n.saturating_sub(1));
    chosen[first] = true;
    order.push(first);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !chosen[i] && min_d[i] > best_d {
                best = i;
                best_d = min_d[i];
            }
        }
        chosen[best] = true;
        order.push(best);
        deltas.push(best_d);
        for i in 0..n {
            if !chosen[i] {
                let d = locs.dist(i, best);
                if d < min_d[i] {
                    min_d[i] = d;
                }
            }
        }
    }
    MaximinOrdering::from_parts(order, deltas)
}

/// Up to `m` predecessor positions of position `pos`, nearest first.
///
/// Equal distances are broken toward the earlier maximin position.
pub fn nearest_predecessors(
    ordering: &MaximinOrdering,
    locs: &LocationSet,
    pos: usize,
    m: usize,
) -> Vec<usize> {
    let take = m.min(pos);
    if take == 0 {
        return Vec::new();
    }
    let target = ordering.order[pos];
    let mut cand: Vec<(f64, usize)> =
        (0..pos).map(|p| (locs.dist(target, ordering.order[p]), p)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
    };
    if take < cand.len() {
        cand.select_nth_unstable_by(take - 1, cmp);
        cand.truncate(take);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, p)| p).collect()
}

/// Conditioning sets for every position, capped at `m` predecessors each.
pub fn conditioning_sets(ordering: &MaximinOrdering, locs: &LocationSet, m: usize) -> Vec<Vec<usize>> {
    (0..ordering.len())
        .into_par_iter()
        .map(|pos| nearest_predecessors(ordering, locs, pos, m))
        .collect()
}
