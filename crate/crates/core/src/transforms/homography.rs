//! 3×3 projective maps on normalized image coordinates.

use super::TransformError;

/// A point in normalized image coordinates (`[-1, 1]²` spans the image).
pub type Point = [f64; 2];

/// Corners of the image in normalized coordinates, clockwise from top-left.
pub const CANONICAL_CORNERS: [Point; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

const DET_FLOOR: f64 = 1e-12;
const W_FLOOR: f64 = 1e-12;
const COLLINEAR_TOL: f64 = 1e-9;

/// Invertible projective transformation, normalized so that `m[2][2] == 1`
/// whenever that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Normalizes and validates a raw matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, TransformError> {
        let h = Homography { m }.normalized();
        let det = h.determinant();
        if !det.is_finite() || det.abs() <= DET_FLOOR {
            return Err(TransformError::Singular(det));
        }
        Ok(h)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Isotropic scaling about the image center.
    pub fn scaling(s: f64) -> Self {
        Homography {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the image center. Quarter turns are built from exact
    /// sines and cosines so that they permute pixel grids exactly.
    pub fn rotation_deg(deg: f64) -> Self {
        let quarter = deg / 90.0;
        let (s, c) = if quarter.fract() == 0.0 {
            match (quarter as i64).rem_euclid(4) {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                _ => (-1.0, 0.0),
            }
        } else {
            deg.to_radians().sin_cos()
        };
        Homography {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Horizontal shear by `deg` degrees.
    pub fn shear_deg(deg: f64) -> Self {
        Homography {
            m: [[1.0, deg.to_radians().tan(), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Scale so the bottom-right entry is 1 (left alone when it is zero).
    pub fn normalized(&self) -> Self {
        let s = self.m[2][2];
        if s == 0.0 || s == 1.0 {
            return *self;
        }
        let mut m = self.m;
        for row in &mut m {
            for v in row {
                *v /= s;
            }
        }
        Homography { m }
    }

    /// Maps a point; fails when it lands at infinity.
    pub fn apply(&self, p: Point) -> Result<Point, TransformError> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if !(w.abs() >= W_FLOOR) {
            return Err(TransformError::PointAtInfinity { x: p[0], y: p[1] });
        }
        Ok([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    /// Matrix product `self · rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Homography) -> Homography {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        Homography { m }.normalized()
    }

    pub fn inverse(&self) -> Result<Homography, TransformError> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() <= DET_FLOOR {
            return Err(TransformError::Singular(det));
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = adj;
        for row in &mut inv {
            for v in row {
                *v /= det;
            }
        }
        Ok(Homography { m: inv }.normalized())
    }

    /// Largest entry-wise difference after normalizing both matrices.
    pub fn max_entry_diff(&self, other: &Homography) -> f64 {
        let (a, b) = (self.normalized(), other.normalized());
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((a.m[i][j] - b.m[i][j]).abs());
            }
        }
        d
    }
}

/// Twice the signed area of the triangle `abc`.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// True when any three of the four points are collinear within tolerance.
pub fn has_collinear_triple(pts: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| cross(pts[t[0]], pts[t[1]], pts[t[2]]).abs() <= COLLINEAR_TOL)
}

/// Direct linear transform from four correspondences.
///
/// Fixes `h33 = 1` and solves the resulting 8×8 system by Gaussian
/// elimination with partial pivoting.
pub fn dlt_solve(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography, TransformError> {
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(TransformError::Degenerate);
    }
    let mut a = [[0.0f64; 9]; 8];
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(TransformError::Degenerate);
        }
        a.swap(col, pivot);
        for r in col + 1..8 {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut h = [0.0f64; 8];
    for r in (0..8).rev() {
        let tail: f64 = (r + 1..8).map(|c| a[r][c] * h[c]).sum();
        h[r] = (a[r][8] - tail) / a[r][r];
    }
    Homography::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn dlt_identity() {
        let h = dlt_solve(&CANONICAL_CORNERS, &CANONICAL_CORNERS).unwrap();
        assert!(h.max_entry_diff(&Homography::IDENTITY) < 1e-15);
    }

    #[test]
    fn dlt_recovers_translation() {
        let dst = CANONICAL_CORNERS.map(|p| [p[0] + 0.1, p[1] + 0.2]);
        let h = dlt_solve(&CANONICAL_CORNERS, &dst).unwrap();
        for (s, d) in CANONICAL_CORNERS.iter().zip(&dst) {
            assert!(close(h.apply(*s).unwrap(), *d, 1e-12));
        }
        assert!(h.max_entry_diff(&Homography::translation(0.1, 0.2)) < 1e-12);
    }

    #[test]
    fn dlt_rejects_collinear() {
        let dst = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 1.0]];
        assert_eq!(dlt_solve(&CANONICAL_CORNERS, &dst), Err(TransformError::Degenerate));
    }

    #[test]
    fn quarter_rotation_maps_corner() {
        let p = Homography::rotation_deg(90.0).apply([1.0, 1.0]).unwrap();
        assert_eq!(p, [-1.0, 1.0]);
    }

    #[test]
    fn apply_identity_and_translation() {
        assert_eq!(Homography::IDENTITY.apply([0.3, -0.7]).unwrap(), [0.3, -0.7]);
        assert_eq!(Homography::translation(0.1, 0.2).apply([0.0, 0.0]).unwrap(), [0.1, 0.2]);
    }

    #[test]
    fn point_at_infinity_rejected() {
        let h = Homography::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(h.apply([-1.0, 0.5]), Err(TransformError::PointAtInfinity { .. })));
    }

    #[test]
    fn singular_matrix_rejected() {
        let err = Homography::from_matrix([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, TransformError::Singular(_)));
    }

    #[test]
    fn normalization_is_idempotent() {
        let h = Homography { m: [[2.0, 0.4, 0.2], [0.1, 3.0, -0.4], [0.02, 0.06, 2.0]] };
        let once = h.normalized();
        assert_eq!(once.m[2][2], 1.0);
        assert_eq!(once.normalized(), once);
    }

    fn arb_homography() -> impl Strategy<Value = Homography> {
        prop::array::uniform8(-0.3f64..0.3).prop_map(|j| {
            let dst = [
                [-1.0 + j[0], -1.0 + j[1]],
                [1.0 + j[2], -1.0 + j[3]],
                [1.0 + j[4], 1.0 + j[5]],
                [-1.0 + j[6], 1.0 + j[7]],
            ];
            dlt_solve(&CANONICAL_CORNERS, &dst).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn dlt_maps_random_corners(src in prop::array::uniform4(prop::array::uniform2(-2.0f64..2.0)),
                                   dst in prop::array::uniform4(prop::array::uniform2(-2.0f64..2.0))) {
            // Keep the sets comfortably non-degenerate.
            let spread = |p: &[Point; 4]| [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
                .iter().map(|t| cross(p[t[0]], p[t[1]], p[t[2]]).abs()).fold(f64::INFINITY, f64::min);
            prop_assume!(spread(&src) > 0.05 && spread(&dst) > 0.05);
            let h = dlt_solve(&src, &dst).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                let p = h.apply(*s).unwrap();
                prop_assert!(close(p, *d, 1e-9), "{p:?} vs {d:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn composition_is_sequential_application(h1 in arb_homography(), h2 in arb_homography(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let composed = h2.compose(&h1).apply([x, y]).unwrap();
            let staged = h2.apply(h1.apply([x, y]).unwrap()).unwrap();
            prop_assert!(close(composed, staged, 1e-12), "{composed:?} vs {staged:?}");
        }

        #[test]
        fn compose_with_identity_and_inverse(h in arb_homography()) {
            prop_assert!(h.compose(&Homography::IDENTITY).max_entry_diff(&h) < 1e-15);
            let inv = h.inverse().unwrap();
            prop_assert!(h.compose(&inv).max_entry_diff(&Homography::IDENTITY) < 1e-10);
        }
    }
}
