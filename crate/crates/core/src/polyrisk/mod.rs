//! Polynomial obstacles, raw moments of their random parameters, and the
//! moment-based risk contours built from them.

mod contour;
mod distribution;
mod polynomial;

pub use contour::{
    contour_from_obstacle, membership_from_moments, Aabb, Membership, RiskContour, RiskContourMap,
    UncertainObstacle, WorkspacePoint, POSITION_VARS,
};
pub use distribution::{Sampler, ScalarDistribution};
pub use polynomial::{CompiledPoly3, Monomial, Polynomial, MAX_VARS};
