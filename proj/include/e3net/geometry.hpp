#pragma once

#include <Eigen/Core>

#include <span>
#include <utility>
#include <vector>

#include "e3net/error.hpp"

namespace e3net::geometry {

enum class Phase { kEd, kEs };

/// One endocardial chord: a pair of opposing border points in pixel units.
struct Chord {
  Eigen::Vector2d p1{0.0, 0.0};
  Eigen::Vector2d p2{0.0, 0.0};
};

/// Ordered chord stack for one cardiac phase, apex (index 0) to mitral
/// annulus (index L-1).
struct ChordSet {
  std::vector<Chord> chords;
  Phase phase = Phase::kEd;

  /// Flattened [L,4] coordinate view in (x1,y1,x2,y2) order.
  Eigen::Matrix<double, Eigen::Dynamic, 4> coords() const;
  static ChordSet from_coords(const Eigen::Matrix<double, Eigen::Dynamic, 4>& c, Phase phase);
};

/// Stacked-disk decomposition of a chord set. Level i (i = 1..L-1 here,
/// counting from the second chord) contributes a disk whose diameter is the
/// chord length and whose height is the perpendicular distance from the
/// previous chord's center to the current chord's line.
struct DiskGeometry {
  Eigen::ArrayXd diameters;     // L-1 entries
  Eigen::ArrayXd heights;       // L-1 entries
  Eigen::ArrayXd disk_volumes;  // L-1 entries, pi*(B/2)^2*H
  double total_volume = 0.0;    // sum of disk_volumes, pixel^3
};

/// Partial derivatives of a scalar loss with respect to chord coordinates,
/// one row per chord in (x1,y1,x2,y2) order.
struct GeoGradient {
  Eigen::Matrix<double, Eigen::Dynamic, 4> d_coords;
};

/// Sub-terms of the Simpson-inspired geometric regularizer.
struct GeometricLosses {
  double pts = 0.0;       // coordinate anchoring term
  double diameter = 0.0;  // disk diameter mismatch
  double taper = 0.0;     // mismatch of diameter differences along the axis
  double height = 0.0;    // disk height mismatch
  double total = 0.0;     // sum of the four terms
};

/// Euclidean distance between the chord endpoints. Throws InvalidCoordinate
/// on non-finite input.
double chord_diameter(const Chord& chord);

/// Midpoint of the chord.
Eigen::Vector2d chord_center(const Chord& chord);

/// Perpendicular distance from `point` to the infinite line through the
/// chord endpoints. A zero-length chord degenerates to the point-to-point
/// distance so the value (and its gradient) stay bounded.
double point_line_distance(const Eigen::Vector2d& point, const Chord& line_chord);

/// Converts a chord stack into disk diameters, heights and volumes.
/// Requires at least two chords.
DiskGeometry simpson_geometry(const ChordSet& chords);

/// Geometric ejection-fraction surrogate (ed.V - es.V) / ed.V * 100.
/// Diagnostic only; throws DegenerateVolume when ed.V <= 0.
double ef_surrogate(const DiskGeometry& ed, const DiskGeometry& es);

/// Batch-mean geometric losses between predicted and reference chord sets.
/// All sets must share the same L >= 3; the pts term is normalized per
/// coordinate (2*L*4 coordinates per sample), the remaining terms follow the
/// per-phase/per-level sums with a batch mean only.
GeometricLosses geometric_losses(std::span<const ChordSet> pred_ed,
                                 std::span<const ChordSet> pred_es,
                                 std::span<const ChordSet> gt_ed,
                                 std::span<const ChordSet> gt_es);
GeometricLosses geometric_losses(const ChordSet& pred_ed, const ChordSet& pred_es,
                                 const ChordSet& gt_ed, const ChordSet& gt_es);

/// Analytic gradient of GeometricLosses::total with respect to every
/// predicted coordinate. Returns one GeoGradient per sample and phase,
/// ordered (ed, es); values match central finite differences.
struct GeometricLossGradients {
  std::vector<GeoGradient> d_pred_ed;
  std::vector<GeoGradient> d_pred_es;
};
GeometricLossGradients geometric_losses_gradient(std::span<const ChordSet> pred_ed,
                                                 std::span<const ChordSet> pred_es,
                                                 std::span<const ChordSet> gt_ed,
                                                 std::span<const ChordSet> gt_es);
std::pair<GeoGradient, GeoGradient> geometric_losses_gradient(const ChordSet& pred_ed,
                                                              const ChordSet& pred_es,
                                                              const ChordSet& gt_ed,
                                                              const ChordSet& gt_es);

}  // namespace e3net::geometry
