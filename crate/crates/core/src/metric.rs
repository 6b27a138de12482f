//! Metric spaces, weighted point sets, and the linear clustering cost
//! functions every other module evaluates against.
//!
//! Distances are computed in double precision; weights stay exact
//! rationals. Points either carry Euclidean coordinates or an index into
//! an explicit symmetric distance matrix.

use num_rational::BigRational;
use thiserror::Error;

use crate::weights::BoundedRational;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix index {0} out of range (size {1})")]
    IndexOutOfRange(usize, usize),
    #[error("point kind does not match the space")]
    WrongKind,
    #[error("distance matrix is not symmetric at ({0},{1})")]
    NotSymmetric(usize, usize),
    #[error("distance matrix has nonzero diagonal at {0}")]
    NonzeroDiagonal(usize),
    #[error("negative distance at ({0},{1})")]
    NegativeDistance(usize, usize),
    #[error("triangle inequality violated at ({0},{1},{2})")]
    TriangleViolation(usize, usize, usize),
    #[error("a solution needs at least one center")]
    EmptySolution,
    #[error("point sets must have disjoint ids (id {0} repeats)")]
    OverlappingIds(u64),
}

/// The clustering objective: the power applied to distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// k-median: sum of distances.
    Median,
    /// k-means: sum of squared distances.
    Means,
}

impl Objective {
    pub fn z(self) -> u32 {
        match self {
            Objective::Median => 1,
            Objective::Means => 2,
        }
    }

    pub fn from_z(z: u32) -> Option<Self> {
        match z {
            1 => Some(Objective::Median),
            2 => Some(Objective::Means),
            _ => None,
        }
    }

    pub fn apply(self, d: f64) -> f64 {
        match self {
            Objective::Median => d,
            Objective::Means => d * d,
        }
    }
}

/// An explicit symmetric nonnegative distance matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    entries: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn new(entries: Vec<Vec<f64>>, check_triangle: bool) -> Result<Self, MetricError> {
        let n = entries.len();
        for (i, row) in entries.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::DimensionMismatch(row.len(), n));
            }
            if entries[i][i] != 0.0 {
                return Err(MetricError::NonzeroDiagonal(i));
            }
            for (j, value) in row.iter().enumerate() {
                if *value < 0.0 {
                    return Err(MetricError::NegativeDistance(i, j));
                }
                if *value != entries[j][i] {
                    return Err(MetricError::NotSymmetric(i, j));
                }
            }
        }
        if check_triangle {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        if entries[i][j] > entries[i][k] + entries[k][j] + 1e-12 {
                            return Err(MetricError::TriangleViolation(i, j, k));
                        }
                    }
                }
            }
        }
        Ok(DistanceMatrix { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Where points live: Euclidean R^d or rows of an explicit matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Space {
    Euclidean { dim: usize },
    Matrix(DistanceMatrix),
}

impl Space {
    pub fn euclidean(dim: usize) -> Self {
        Space::Euclidean { dim }
    }

    pub fn distance(&self, a: &Point, b: &Point) -> Result<f64, MetricError> {
        match (self, &a.loc, &b.loc) {
            (Space::Euclidean { dim }, Location::Coords(x), Location::Coords(y)) => {
                if x.len() != *dim || y.len() != *dim {
                    return Err(MetricError::DimensionMismatch(x.len(), y.len()));
                }
                Ok(x.iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt())
            }
            (Space::Matrix(m), Location::MatrixRow(i), Location::MatrixRow(j)) => {
                let n = m.len();
                if *i >= n {
                    return Err(MetricError::IndexOutOfRange(*i, n));
                }
                if *j >= n {
                    return Err(MetricError::IndexOutOfRange(*j, n));
                }
                Ok(m.entries[*i][*j])
            }
            _ => Err(MetricError::WrongKind),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Coords(Vec<f64>),
    MatrixRow(usize),
}

/// An input point: stable identity plus its place in the space.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub id: u64,
    pub loc: Location,
}

impl Point {
    pub fn new(id: u64, coords: Vec<f64>) -> Self {
        Point {
            id,
            loc: Location::Coords(coords),
        }
    }

    pub fn matrix_row(id: u64, row: usize) -> Self {
        Point {
            id,
            loc: Location::MatrixRow(row),
        }
    }
}

/// A point with its exact rational weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub point: Point,
    pub weight: BoundedRational,
}

/// A feasible solution: at most k centers drawn from the candidate
/// universe (by default the current point set).
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub centers: Vec<Point>,
}

impl Solution {
    pub fn new(centers: Vec<Point>) -> Result<Self, MetricError> {
        if centers.is_empty() {
            return Err(MetricError::EmptySolution);
        }
        Ok(Solution { centers })
    }
}

/// Distance from a point to its nearest center.
pub fn min_distance(space: &Space, centers: &[Point], p: &Point) -> Result<f64, MetricError> {
    if centers.is_empty() {
        return Err(MetricError::EmptySolution);
    }
    let mut best = f64::INFINITY;
    for c in centers {
        let d = space.distance(c, p)?;
        if d < best {
            best = d;
        }
    }
    Ok(best)
}

/// The linear clustering cost
/// `sum_x w(x) * min_{s in S} d(x, s)^z` with exact weights converted to
/// doubles at the evaluation boundary. Cost of an empty set is 0.
pub fn cost(
    space: &Space,
    solution: &Solution,
    points: &[WeightedPoint],
    z: Objective,
) -> Result<f64, MetricError> {
    cost_f64(
        space,
        &solution.centers,
        points
            .iter()
            .map(|wp| (&wp.point, wp.weight.to_f64()))
            .collect::<Vec<_>>()
            .as_slice(),
        z,
    )
}

/// Cost over pre-converted f64 weights; the hot path for oracles.
pub fn cost_f64(
    space: &Space,
    centers: &[Point],
    points: &[(&Point, f64)],
    z: Objective,
) -> Result<f64, MetricError> {
    if centers.is_empty() {
        return Err(MetricError::EmptySolution);
    }
    let mut total = 0.0;
    for (p, w) in points {
        total += w * z.apply(min_distance(space, centers, p)?);
    }
    Ok(total)
}

/// Cost with exact rational weights: distances stay doubles, but the
/// weighted accumulation happens in exact arithmetic over the rational
/// weight times the (rationalized) distance power.
pub fn cost_exact_weights(
    space: &Space,
    solution: &Solution,
    points: &[(Point, BigRational)],
    z: Objective,
) -> Result<BigRational, MetricError> {
    use num_traits::Zero;
    let mut total = BigRational::zero();
    for (p, w) in points {
        let d = z.apply(min_distance(space, &solution.centers, p)?);
        let d = crate::weights::ratio_from_f64(d);
        total += w * d;
    }
    Ok(total)
}

/// Verify that cost is additive over a disjoint union: evaluates both
/// routes and compares to 1e-9 relative tolerance (distances are
/// floating point; weights are exact).
pub fn linearity_check(
    space: &Space,
    solution: &Solution,
    x1: &[WeightedPoint],
    x2: &[WeightedPoint],
    z: Objective,
) -> Result<bool, MetricError> {
    for a in x1 {
        for b in x2 {
            if a.point.id == b.point.id {
                return Err(MetricError::OverlappingIds(a.point.id));
            }
        }
    }
    let union: Vec<WeightedPoint> = x1.iter().chain(x2).cloned().collect();
    let whole = cost(space, solution, &union, z)?;
    let split = cost(space, solution, x1, z)? + cost(space, solution, x2, z)?;
    let scale = whole.abs().max(split.abs()).max(1e-300);
    Ok((whole - split).abs() / scale <= 1e-9)
}

/// Total weight of a set, exactly.
pub fn total_weight(points: &[WeightedPoint]) -> BigRational {
    use num_traits::Zero;
    points
        .iter()
        .fold(BigRational::zero(), |acc, wp| acc + wp.weight.value())
}
