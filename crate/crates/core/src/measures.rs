//! Empirical measures as weighted particle clouds, frozen measure paths, and
//! the one-dimensional Wasserstein-2 distance.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{ParticleEnsemble, TimeGrid};

/// How a weighted cloud turns into a measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `sum_j w_j delta_{y_j} / sum_j w_j`
    Probability,
    /// `sum_j w_j delta_{y_j} / N`; the likelihood-weighted empirical
    /// measure, which is not a probability measure path by path.
    RawAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    points: Vec<f64>,
    weights: Vec<f64>,
    normalization: Normalization,
}

impl WeightedCloud {
    pub fn new(points: Vec<f64>, weights: Vec<f64>, normalization: Normalization) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("empty cloud".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::Domain(format!(
                "cloud has {} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("cloud weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Domain("cloud needs at least one positive weight".into()));
        }
        Ok(Self { points, weights, normalization })
    }

    /// Unit weights, probability normalisation.
    pub fn uniform(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n], Normalization::Probability)
    }

    pub fn dirac(x: f64) -> Self {
        Self { points: vec![x], weights: vec![1.0], normalization: Normalization::Probability }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// 1-d Wasserstein-2 distance between two probability clouds, computed as
/// the L2 distance between their quantile functions.
pub fn wasserstein2_1d(mu: &WeightedCloud, nu: &WeightedCloud) -> Result<f64> {
    for c in [mu, nu] {
        if c.normalization != Normalization::Probability {
            return Err(Error::Domain("wasserstein2_1d needs probability-normalised clouds".into()));
        }
    }
    let a = sorted_atoms(mu);
    let b = sorted_atoms(nu);

    // Walk both quantile functions over their merged breakpoints. Levels
    // closer than SNAP are treated as the same breakpoint so that equal
    // clouds give exactly zero.
    const SNAP: f64 = 1e-12;
    let (mut i, mut j) = (0, 0);
    let (mut ca, mut cb) = (a[0].1, b[0].1);
    let mut level = 0.0;
    let mut cost = 0.0;
    loop {
        let next = ca.min(cb);
        let d = a[i].0 - b[j].0;
        cost += (next - level).max(0.0) * d * d;
        level = next;
        let adv_a = ca - next <= SNAP;
        let adv_b = cb - next <= SNAP;
        if adv_a {
            i += 1;
        }
        if adv_b {
            j += 1;
        }
        if i == a.len() || j == b.len() {
            break;
        }
        if adv_a {
            ca = a[i].1;
        }
        if adv_b {
            cb = b[j].1;
        }
    }
    Ok(cost.sqrt())
}

/// Points sorted ascending with cumulative normalised weight; zero-weight
/// atoms are dropped.
fn sorted_atoms(c: &WeightedCloud) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> =
        c.points.iter().zip(&c.weights).filter(|(_, &w)| w > 0.0).map(|(&x, &w)| (x, w)).collect();
    atoms.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total: f64 = atoms.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for p in &mut atoms {
        acc += p.1;
        p.1 = acc / total;
    }
    if let Some(last) = atoms.last_mut() {
        last.1 = 1.0;
    }
    atoms
}

/// The law of a particle system frozen on the time grid. Between nodes the
/// law is taken at the left endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePath {
    grid: TimeGrid,
    clouds: Vec<WeightedCloud>,
}

impl MeasurePath {
    pub fn new(grid: TimeGrid, clouds: Vec<WeightedCloud>) -> Result<Self> {
        if clouds.len() != grid.n_steps() + 1 {
            return Err(Error::Config(format!(
                "measure path has {} clouds for a grid with {} nodes",
                clouds.len(),
                grid.n_steps() + 1
            )));
        }
        let n = clouds[0].len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(Error::Config("particle count varies across the measure path".into()));
        }
        Ok(Self { grid, clouds })
    }

    /// A path that sits at one cloud for every node.
    pub fn constant(grid: TimeGrid, cloud: WeightedCloud) -> Self {
        let clouds = vec![cloud; grid.n_steps() + 1];
        Self { grid, clouds }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn clouds(&self) -> &[WeightedCloud] {
        &self.clouds
    }

    /// Law in force on `[t_k, t_{k+1})`.
    pub fn at_step(&self, k: usize) -> &WeightedCloud {
        &self.clouds[k]
    }

    pub fn n_particles(&self) -> usize {
        self.clouds[0].len()
    }

    /// Writes `step,particle,state` rows. Weights are not written; a path
    /// read back has unit weights.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "particle", "state"])?;
        for (k, c) in self.clouds.iter().enumerate() {
            for (i, x) in c.points.iter().enumerate() {
                w.write_record(&[k.to_string(), i.to_string(), format!("{x:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, grid: TimeGrid) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut nodes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); grid.n_steps() + 1];
        for row in r.records() {
            let row = row?;
            let parse_err = || Error::Config(format!("malformed measure path row: {row:?}"));
            let k: usize = row.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            let i: usize = row.get(1).and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            let x: f64 = row.get(2).and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            let node = nodes.get_mut(k).ok_or_else(|| {
                Error::Config(format!("step {k} outside a grid with {} steps", grid.n_steps()))
            })?;
            node.push((i, x));
        }
        let clouds = nodes
            .into_iter()
            .enumerate()
            .map(|(k, mut node)| {
                node.sort_by_key(|p| p.0);
                if node.iter().enumerate().any(|(i, p)| p.0 != i) {
                    return Err(Error::Config(format!("step {k}: particle indices not 0..N")));
                }
                WeightedCloud::uniform(node.into_iter().map(|p| p.1).collect())
                    .map_err(|_| Error::Config(format!("step {k} has no particles")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, clouds)
    }
}

/// Freezes the empirical law of a simulated ensemble: unit-weight clouds of
/// the particle states at every grid node.
pub fn freeze_measure_path(ensemble: &ParticleEnsemble) -> MeasurePath {
    let grid = *ensemble.grid();
    let clouds = (0..=grid.n_steps())
        .map(|k| {
            let pts = (0..ensemble.n_particles()).map(|i| ensemble.state(i, k)).collect();
            WeightedCloud::uniform(pts).expect("ensembles have at least one particle")
        })
        .collect();
    MeasurePath { grid, clouds }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clouds_are_at_distance_zero() {
        let c = WeightedCloud::uniform(vec![0.3, -1.0, 2.5, 0.1, 0.1, 7.0, 0.2]).unwrap();
        assert_eq!(wasserstein2_1d(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn diracs_are_at_distance_of_their_atoms() {
        let d = wasserstein2_1d(&WeightedCloud::dirac(-1.5), &WeightedCloud::dirac(2.0)).unwrap();
        assert!((d - 3.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_two_atom_case() {
        // mu = 0.25 d0 + 0.75 d1, nu = d1: only the mass at 0 moves.
        let mu = WeightedCloud::new(vec![0.0, 1.0], vec![1.0, 3.0], Normalization::Probability).unwrap();
        let nu = WeightedCloud::dirac(1.0);
        let d = wasserstein2_1d(&mu, &nu).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn raw_average_clouds_rejected() {
        let c = WeightedCloud::new(vec![0.0], vec![1.0], Normalization::RawAverage).unwrap();
        assert!(wasserstein2_1d(&c, &c).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(WeightedCloud::uniform(vec![]).is_err());
        assert!(WeightedCloud::new(vec![1.0], vec![0.0], Normalization::Probability).is_err());
        assert!(WeightedCloud::new(vec![1.0], vec![-1.0], Normalization::Probability).is_err());
        assert!(WeightedCloud::new(vec![1.0, 2.0], vec![1.0], Normalization::Probability).is_err());
    }

    #[test]
    fn measure_path_csv_round_trip() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let clouds = vec![
            WeightedCloud::uniform(vec![0.0, 0.0]).unwrap(),
            WeightedCloud::uniform(vec![0.1, -0.25]).unwrap(),
            WeightedCloud::uniform(vec![1e-17, 3.5]).unwrap(),
        ];
        let path = MeasurePath::new(grid, clouds).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,particle,state\n"));
        let back = MeasurePath::read_csv(buf.as_slice(), grid).unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn measure_path_rejects_wrong_node_count() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let r = MeasurePath::new(grid, vec![WeightedCloud::dirac(0.0); 3]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
