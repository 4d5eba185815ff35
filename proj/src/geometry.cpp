#include "e3net/geometry.hpp"

#include <cmath>
#include <string>

namespace e3net::geometry {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_finite(const Chord& c) {
  if (!c.p1.allFinite() || !c.p2.allFinite())
    throw InvalidCoordinate("chord has non-finite coordinates");
}

double sign_or_zero(double s) { return s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0); }

// Measurements of one chord stack together with the partial derivatives
// needed to backpropagate through diameters and heights. Level k corresponds
// to chords k-1 (previous) and k (current), k = 1..L-1.
struct Measured {
  Eigen::ArrayXd b;                                   // diameters, L-1
  Eigen::ArrayXd h;                                   // heights, L-1
  Eigen::Matrix<double, Eigen::Dynamic, 4> db;        // dB_k / d chord_k
  Eigen::Matrix<double, Eigen::Dynamic, 4> dh_prev;   // dH_k / d chord_{k-1}
  Eigen::Matrix<double, Eigen::Dynamic, 4> dh_cur;    // dH_k / d chord_k
};

// Diameter plus gradient wrt the chord's own (x1,y1,x2,y2).
double diameter_grad(const Chord& c, Eigen::RowVector4d& g) {
  const Eigen::Vector2d u = c.p1 - c.p2;
  const double b = u.norm();
  if (b > 0.0) {
    g << u.x() / b, u.y() / b, -u.x() / b, -u.y() / b;
  } else {
    g.setZero();  // subgradient at coincident endpoints
  }
  return b;
}

// Perpendicular distance from q to line(a, b) plus gradients wrt q, a, b.
// With u = b - a and w = q - a the signed area s = ux*wy - uy*wx gives
// d = |s| / |u|; the partials below are the exact derivatives of that
// expression, with sign(0) taken as 0 so the loss keeps a bounded
// subgradient when the point lies on the line.
double distance_grad(const Eigen::Vector2d& q, const Eigen::Vector2d& a,
                     const Eigen::Vector2d& b, Eigen::Vector2d& dq,
                     Eigen::Vector2d& da, Eigen::Vector2d& db) {
  const Eigen::Vector2d u = b - a;
  const double n2 = u.squaredNorm();
  if (n2 <= 0.0) {
    // Degenerate chord: fall back to distance to the (coincident) midpoint.
    const Eigen::Vector2d m = 0.5 * (a + b);
    const Eigen::Vector2d r = q - m;
    const double d = r.norm();
    if (d > 0.0) {
      dq = r / d;
      da = -0.5 * r / d;
      db = da;
    } else {
      dq.setZero();
      da.setZero();
      db.setZero();
    }
    return d;
  }
  const double n = std::sqrt(n2);
  const Eigen::Vector2d w = q - a;
  const double s = u.x() * w.y() - u.y() * w.x();
  const double d = std::abs(s) / n;
  const double sg = sign_or_zero(s);
  dq = sg / n * Eigen::Vector2d(-u.y(), u.x());
  da = sg / n * Eigen::Vector2d(b.y() - q.y(), q.x() - b.x()) + std::abs(s) / (n2 * n) * u;
  db = sg / n * Eigen::Vector2d(q.y() - a.y(), a.x() - q.x()) - std::abs(s) / (n2 * n) * u;
  return d;
}

Measured measure(const ChordSet& set) {
  const Eigen::Index levels = static_cast<Eigen::Index>(set.chords.size()) - 1;
  Measured m;
  m.b.resize(levels);
  m.h.resize(levels);
  m.db.resize(levels, 4);
  m.dh_prev.resize(levels, 4);
  m.dh_cur.resize(levels, 4);
  for (Eigen::Index k = 0; k < levels; ++k) {
    const Chord& prev = set.chords[k];
    const Chord& cur = set.chords[k + 1];
    check_finite(prev);
    check_finite(cur);
    Eigen::RowVector4d gb;
    m.b[k] = diameter_grad(cur, gb);
    m.db.row(k) = gb;
    const Eigen::Vector2d center = 0.5 * (prev.p1 + prev.p2);
    Eigen::Vector2d dq, da, db;
    m.h[k] = distance_grad(center, cur.p1, cur.p2, dq, da, db);
    // The center is the mean of the previous chord's endpoints.
    m.dh_prev.row(k) << 0.5 * dq.x(), 0.5 * dq.y(), 0.5 * dq.x(), 0.5 * dq.y();
    m.dh_cur.row(k) << da.x(), da.y(), db.x(), db.y();
  }
  return m;
}

void require_same_length(std::span<const ChordSet> sets, std::size_t l) {
  for (const ChordSet& s : sets)
    if (s.chords.size() != l)
      throw ShapeMismatch("chord sets must all have " + std::to_string(l) + " chords, got " +
                          std::to_string(s.chords.size()));
}

}  // namespace

Eigen::Matrix<double, Eigen::Dynamic, 4> ChordSet::coords() const {
  Eigen::Matrix<double, Eigen::Dynamic, 4> c(chords.size(), 4);
  for (std::size_t i = 0; i < chords.size(); ++i)
    c.row(static_cast<Eigen::Index>(i)) << chords[i].p1.x(), chords[i].p1.y(),
        chords[i].p2.x(), chords[i].p2.y();
  return c;
}

ChordSet ChordSet::from_coords(const Eigen::Matrix<double, Eigen::Dynamic, 4>& c, Phase phase) {
  ChordSet set;
  set.phase = phase;
  set.chords.resize(static_cast<std::size_t>(c.rows()));
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    set.chords[static_cast<std::size_t>(i)] = {{c(i, 0), c(i, 1)}, {c(i, 2), c(i, 3)}};
  return set;
}

double chord_diameter(const Chord& chord) {
  check_finite(chord);
  return (chord.p1 - chord.p2).norm();
}

Eigen::Vector2d chord_center(const Chord& chord) {
  check_finite(chord);
  return 0.5 * (chord.p1 + chord.p2);
}

double point_line_distance(const Eigen::Vector2d& point, const Chord& line_chord) {
  if (!point.allFinite()) throw InvalidCoordinate("point has non-finite coordinates");
  check_finite(line_chord);
  Eigen::Vector2d dq, da, db;
  return distance_grad(point, line_chord.p1, line_chord.p2, dq, da, db);
}

DiskGeometry simpson_geometry(const ChordSet& chords) {
  if (chords.chords.size() < 2)
    throw InsufficientChords("simpson_geometry needs at least 2 chords, got " +
                             std::to_string(chords.chords.size()));
  const Measured m = measure(chords);
  DiskGeometry g;
  g.diameters = m.b;
  g.heights = m.h;
  g.disk_volumes = kPi * (m.b / 2.0).square() * m.h;
  g.total_volume = 0.0;
  for (Eigen::Index k = 0; k < g.disk_volumes.size(); ++k)
    g.total_volume += g.disk_volumes[k];  // fixed order for determinism
  return g;
}

double ef_surrogate(const DiskGeometry& ed, const DiskGeometry& es) {
  if (!(ed.total_volume > 0.0))
    throw DegenerateVolume("ef_surrogate requires a positive end-diastolic volume");
  return (ed.total_volume - es.total_volume) / ed.total_volume * 100.0;
}

GeometricLosses geometric_losses(std::span<const ChordSet> pred_ed,
                                 std::span<const ChordSet> pred_es,
                                 std::span<const ChordSet> gt_ed,
                                 std::span<const ChordSet> gt_es) {
  const std::size_t n = pred_ed.size();
  if (pred_es.size() != n || gt_ed.size() != n || gt_es.size() != n)
    throw ShapeMismatch("geometric_losses batch sizes differ");
  if (n == 0) throw ShapeMismatch("geometric_losses needs a non-empty batch");
  const std::size_t l = pred_ed[0].chords.size();
  if (l < 3) throw InsufficientChords("geometric losses need L >= 3 chords");
  require_same_length(pred_ed, l);
  require_same_length(pred_es, l);
  require_same_length(gt_ed, l);
  require_same_length(gt_es, l);

  GeometricLosses out;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double pts_norm = inv_n / static_cast<double>(2 * l * 4);
  for (std::size_t s = 0; s < n; ++s) {
    const ChordSet* pred[2] = {&pred_ed[s], &pred_es[s]};
    const ChordSet* gt[2] = {&gt_ed[s], &gt_es[s]};
    for (int phase = 0; phase < 2; ++phase) {
      const auto pc = pred[phase]->coords();
      const auto gc = gt[phase]->coords();
      out.pts += (pc - gc).squaredNorm() * pts_norm;
      const Measured mp = measure(*pred[phase]);
      const Measured mg = measure(*gt[phase]);
      out.diameter += (mp.b - mg.b).square().sum() * inv_n;
      out.height += (mp.h - mg.h).square().sum() * inv_n;
      const Eigen::Index levels = mp.b.size();
      for (Eigen::Index k = 0; k + 1 < levels; ++k) {
        const double dp = mp.b[k + 1] - mp.b[k];
        const double dg = mg.b[k + 1] - mg.b[k];
        out.taper += (dp - dg) * (dp - dg) * inv_n;
      }
    }
  }
  out.total = out.pts + out.diameter + out.taper + out.height;
  return out;
}

GeometricLosses geometric_losses(const ChordSet& pred_ed, const ChordSet& pred_es,
                                 const ChordSet& gt_ed, const ChordSet& gt_es) {
  return geometric_losses(std::span(&pred_ed, 1), std::span(&pred_es, 1), std::span(&gt_ed, 1),
                          std::span(&gt_es, 1));
}

GeometricLossGradients geometric_losses_gradient(std::span<const ChordSet> pred_ed,
                                                 std::span<const ChordSet> pred_es,
                                                 std::span<const ChordSet> gt_ed,
                                                 std::span<const ChordSet> gt_es) {
  // Validates shapes (and raises the same errors) before any work.
  (void)geometric_losses(pred_ed, pred_es, gt_ed, gt_es);

  const std::size_t n = pred_ed.size();
  const std::size_t l = pred_ed[0].chords.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double pts_norm = inv_n / static_cast<double>(2 * l * 4);

  GeometricLossGradients out;
  out.d_pred_ed.resize(n);
  out.d_pred_es.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    const ChordSet* pred[2] = {&pred_ed[s], &pred_es[s]};
    const ChordSet* gt[2] = {&gt_ed[s], &gt_es[s]};
    GeoGradient* grads[2] = {&out.d_pred_ed[s], &out.d_pred_es[s]};
    for (int phase = 0; phase < 2; ++phase) {
      Eigen::Matrix<double, Eigen::Dynamic, 4> g =
          Eigen::Matrix<double, Eigen::Dynamic, 4>::Zero(static_cast<Eigen::Index>(l), 4);
      const auto pc = pred[phase]->coords();
      const auto gc = gt[phase]->coords();
      g += 2.0 * pts_norm * (pc - gc);

      const Measured mp = measure(*pred[phase]);
      const Measured mg = measure(*gt[phase]);
      const Eigen::Index levels = mp.b.size();

      // d(total)/dB_k: the diameter term plus both taper differences that
      // involve level k.
      Eigen::ArrayXd gb = 2.0 * inv_n * (mp.b - mg.b);
      for (Eigen::Index k = 0; k + 1 < levels; ++k) {
        const double e = (mp.b[k + 1] - mp.b[k]) - (mg.b[k + 1] - mg.b[k]);
        gb[k + 1] += 2.0 * inv_n * e;
        gb[k] -= 2.0 * inv_n * e;
      }
      const Eigen::ArrayXd gh = 2.0 * inv_n * (mp.h - mg.h);

      for (Eigen::Index k = 0; k < levels; ++k) {
        g.row(k + 1) += gb[k] * mp.db.row(k);
        g.row(k) += gh[k] * mp.dh_prev.row(k);
        g.row(k + 1) += gh[k] * mp.dh_cur.row(k);
      }
      grads[phase]->d_coords = std::move(g);
    }
  }
  return out;
}

std::pair<GeoGradient, GeoGradient> geometric_losses_gradient(const ChordSet& pred_ed,
                                                              const ChordSet& pred_es,
                                                              const ChordSet& gt_ed,
                                                              const ChordSet& gt_es) {
  GeometricLossGradients g =
      geometric_losses_gradient(std::span(&pred_ed, 1), std::span(&pred_es, 1),
                                std::span(&gt_ed, 1), std::span(&gt_es, 1));
  return {std::move(g.d_pred_ed[0]), std::move(g.d_pred_es[0])};
}

}  // namespace e3net::geometry
