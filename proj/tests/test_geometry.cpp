#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Geometry>

#include <cmath>
#include <vector>

#include "e3net/geometry.hpp"
#include "e3net/random.hpp"

using namespace e3net;
using namespace e3net::geometry;

namespace {

constexpr double kPi = 3.14159265358979323846;

Chord chord(double x1, double y1, double x2, double y2) {
  return Chord{{x1, y1}, {x2, y2}};
}

ChordSet make_set(std::vector<Chord> chords, Phase phase = Phase::kEd) {
  return ChordSet{std::move(chords), phase};
}

// Independent stacked-disk oracle. Deliberately uses a different formulation
// of the height (projection onto the unit normal of the current chord) so it
// does not share code with the implementation under test.
double oracle_volume(const ChordSet& set, std::vector<double>* disk_volumes = nullptr) {
  double total = 0.0;
  for (std::size_t i = 1; i < set.chords.size(); ++i) {
    const Chord& cur = set.chords[i];
    const Chord& prev = set.chords[i - 1];
    const double b = std::hypot(cur.p1.x() - cur.p2.x(), cur.p1.y() - cur.p2.y());
    const double cx = 0.5 * (prev.p1.x() + prev.p2.x());
    const double cy = 0.5 * (prev.p1.y() + prev.p2.y());
    double h;
    const double ux = cur.p2.x() - cur.p1.x();
    const double uy = cur.p2.y() - cur.p1.y();
    const double un = std::hypot(ux, uy);
    if (un == 0.0) {
      h = std::hypot(cx - cur.p1.x(), cy - cur.p1.y());
    } else {
      // Unit normal of the chord direction.
      const double nx = -uy / un;
      const double ny = ux / un;
      h = std::abs(nx * (cx - cur.p1.x()) + ny * (cy - cur.p1.y()));
    }
    const double v = kPi * (b / 2.0) * (b / 2.0) * h;
    if (disk_volumes) disk_volumes->push_back(v);
    total += v;
  }
  return total;
}

ChordSet random_set(Rng& rng, int l) {
  std::vector<Chord> cs;
  for (int i = 0; i < l; ++i)
    cs.push_back(chord(rng.uniform(5.0, 107.0), rng.uniform(5.0, 107.0),
                       rng.uniform(5.0, 107.0), rng.uniform(5.0, 107.0)));
  return make_set(std::move(cs));
}

double fd_gradient(std::vector<ChordSet>& pred_ed, std::vector<ChordSet>& pred_es,
                   const std::vector<ChordSet>& gt_ed, const std::vector<ChordSet>& gt_es,
                   int phase, std::size_t sample, std::size_t chord_idx, int coord,
                   double step) {
  auto& set = phase == 0 ? pred_ed[sample] : pred_es[sample];
  double* v = nullptr;
  Chord& c = set.chords[chord_idx];
  switch (coord) {
    case 0: v = &c.p1.x(); break;
    case 1: v = &c.p1.y(); break;
    case 2: v = &c.p2.x(); break;
    default: v = &c.p2.y(); break;
  }
  const double saved = *v;
  *v = saved + step;
  const double up = geometric_losses(pred_ed, pred_es, gt_ed, gt_es).total;
  *v = saved - step;
  const double dn = geometric_losses(pred_ed, pred_es, gt_ed, gt_es).total;
  *v = saved;
  return (up - dn) / (2.0 * step);
}

}  // namespace

TEST_CASE("chord_diameter basics") {
  CHECK(chord_diameter(chord(0, 0, 0, 0)) == 0.0);
  CHECK(chord_diameter(chord(0, 0, 3, 4)) == doctest::Approx(5.0));
  CHECK(chord_diameter(chord(1.5, 2.0, 4.5, 6.0)) == doctest::Approx(5.0));
  CHECK_THROWS_AS(chord_diameter(chord(0, 0, std::nan(""), 1)), InvalidCoordinate);
}

TEST_CASE("chord_center basics") {
  CHECK(chord_center(chord(0, 0, 2, 0)).isApprox(Eigen::Vector2d(1, 0)));
  CHECK(chord_center(chord(1, 1, 1, 1)).isApprox(Eigen::Vector2d(1, 1)));
  CHECK(chord_center(chord(-1, 3, 5, 7)).isApprox(Eigen::Vector2d(2, 5)));
}

TEST_CASE("point_line_distance including degenerate chord") {
  CHECK(point_line_distance({1, 0}, chord(0, 1, 2, 1)) == doctest::Approx(1.0));
  CHECK(point_line_distance({1, 1}, chord(0, 1, 2, 1)) == doctest::Approx(0.0));
  // Coincident endpoints fall back to point-to-point distance.
  CHECK(point_line_distance({0, 0}, chord(1, 1, 1, 1)) == doctest::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(point_line_distance({std::nan(""), 0}, chord(0, 0, 1, 1)), InvalidCoordinate);
}

TEST_CASE("simpson_geometry fixtures match the independent oracle") {
  SUBCASE("coincident chords give zero volume") {
    const auto g = simpson_geometry(make_set({chord(0, 0, 2, 0), chord(0, 0, 2, 0)}));
    CHECK(g.heights[0] == 0.0);
    CHECK(g.total_volume == 0.0);
  }
  SUBCASE("unit cylinder disk") {
    const auto set = make_set({chord(0, 0, 2, 0), chord(0, 1, 2, 1)});
    const auto g = simpson_geometry(set);
    CHECK(g.diameters[0] == doctest::Approx(2.0));
    CHECK(g.heights[0] == doctest::Approx(1.0));
    CHECK(g.total_volume == doctest::Approx(kPi).epsilon(1e-9));
    CHECK(g.total_volume == doctest::Approx(oracle_volume(set)).epsilon(1e-12));
  }
  SUBCASE("three-chord tapering stack") {
    const auto set =
        make_set({chord(0, 0, 4, 0), chord(0.5, 1, 3.5, 1), chord(1, 2, 3, 2)});
    std::vector<double> oracle_disks;
    const double oracle_total = oracle_volume(set, &oracle_disks);
    const auto g = simpson_geometry(set);
    CHECK(g.disk_volumes[0] == doctest::Approx(kPi * 1.5 * 1.5).epsilon(1e-12));
    CHECK(g.disk_volumes[1] == doctest::Approx(kPi).epsilon(1e-12));
    CHECK(g.total_volume == doctest::Approx(3.25 * kPi).epsilon(1e-12));
    CHECK(g.disk_volumes[0] == doctest::Approx(oracle_disks[0]).epsilon(1e-12));
    CHECK(g.disk_volumes[1] == doctest::Approx(oracle_disks[1]).epsilon(1e-12));
    CHECK(g.total_volume == doctest::Approx(oracle_total).epsilon(1e-12));
  }
  SUBCASE("fewer than two chords is an error") {
    CHECK_THROWS_AS(simpson_geometry(make_set({chord(0, 0, 1, 1)})), InsufficientChords);
  }
}

TEST_CASE("disk geometry internal consistency") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto set = random_set(rng, 8);
    const auto g = simpson_geometry(set);
    double sum = 0.0;
    for (Eigen::Index k = 0; k < g.disk_volumes.size(); ++k) {
      CHECK(g.disk_volumes[k] >= 0.0);
      CHECK(g.disk_volumes[k] ==
            doctest::Approx(kPi * (g.diameters[k] / 2) * (g.diameters[k] / 2) * g.heights[k])
                .epsilon(1e-9));
      sum += g.disk_volumes[k];
    }
    CHECK(g.total_volume == sum);  // same summation order, bitwise
  }
}

TEST_CASE("ef_surrogate") {
  DiskGeometry ed, es;
  ed.total_volume = 2 * kPi;
  es.total_volume = kPi;
  CHECK(ef_surrogate(ed, es) == doctest::Approx(50.0));
  es.total_volume = ed.total_volume;
  CHECK(ef_surrogate(ed, es) == doctest::Approx(0.0));

  const auto cone =
      make_set({chord(0, 0, 4, 0), chord(0.5, 1, 3.5, 1), chord(1, 2, 3, 2)});
  const auto cyl = make_set({chord(0, 0, 2, 0), chord(0, 1, 2, 1)});
  const double ef = ef_surrogate(simpson_geometry(cone), simpson_geometry(cyl));
  CHECK(ef == doctest::Approx(69.23).epsilon(0.0002));

  DiskGeometry zero;
  zero.total_volume = 0.0;
  CHECK_THROWS_AS(ef_surrogate(zero, es), DegenerateVolume);
}

TEST_CASE("rigid motion leaves diameters and heights unchanged") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto set = random_set(rng, 6);
    const double angle = rng.uniform(0.0, 2 * kPi);
    const Eigen::Rotation2D<double> rot(angle);
    const Eigen::Vector2d shift(rng.uniform(-50, 50), rng.uniform(-50, 50));
    ChordSet moved = set;
    for (auto& c : moved.chords) {
      c.p1 = rot * c.p1 + shift;
      c.p2 = rot * c.p2 + shift;
    }
    const auto a = simpson_geometry(set);
    const auto b = simpson_geometry(moved);
    for (Eigen::Index k = 0; k < a.diameters.size(); ++k) {
      CHECK(b.diameters[k] == doctest::Approx(a.diameters[k]).epsilon(1e-9));
      CHECK(b.heights[k] == doctest::Approx(a.heights[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("scaling covariance and EF invariance") {
  Rng rng(13);
  const auto ed = random_set(rng, 6);
  const auto es = random_set(rng, 6);
  const double s = 2.75;
  auto scaled = [&](const ChordSet& set) {
    ChordSet out = set;
    for (auto& c : out.chords) {
      c.p1 *= s;
      c.p2 *= s;
    }
    return out;
  };
  const auto a = simpson_geometry(ed);
  const auto b = simpson_geometry(scaled(ed));
  for (Eigen::Index k = 0; k < a.diameters.size(); ++k) {
    CHECK(b.diameters[k] == doctest::Approx(s * a.diameters[k]).epsilon(1e-9));
    CHECK(b.heights[k] == doctest::Approx(s * a.heights[k]).epsilon(1e-9));
    CHECK(b.disk_volumes[k] == doctest::Approx(s * s * s * a.disk_volumes[k]).epsilon(1e-9));
  }
  const double ef = ef_surrogate(simpson_geometry(ed), simpson_geometry(es));
  const double ef_scaled = ef_surrogate(simpson_geometry(scaled(ed)), simpson_geometry(scaled(es)));
  CHECK(ef_scaled == doctest::Approx(ef).epsilon(1e-9));
}

TEST_CASE("geometric losses") {
  // Three-chord cylinder: all horizontal chords of width 2, spaced 1 apart.
  const auto cyl =
      make_set({chord(0, 0, 2, 0), chord(0, 1, 2, 1), chord(0, 2, 2, 2)});

  SUBCASE("identity gives zero everywhere") {
    const auto l = geometric_losses(cyl, cyl, cyl, cyl);
    CHECK(l.pts == 0.0);
    CHECK(l.diameter == 0.0);
    CHECK(l.taper == 0.0);
    CHECK(l.height == 0.0);
    CHECK(l.total == 0.0);
  }

  SUBCASE("translation of a chord along its own line moves only the pts term") {
    ChordSet pred = cyl;
    pred.chords[1].p1.x() += 1.0;  // (0,1)-(2,1) -> (1,1)-(3,1)
    pred.chords[1].p2.x() += 1.0;
    const auto l = geometric_losses(pred, cyl, cyl, cyl);
    // Two coordinates changed by 1 each; mean over 2*L*4 = 24 coordinates.
    CHECK(l.pts == doctest::Approx(2.0 / 24.0).epsilon(1e-12));
    CHECK(l.diameter == doctest::Approx(0.0));
    CHECK(l.taper == doctest::Approx(0.0));
    CHECK(l.height == doctest::Approx(0.0));
    CHECK(l.total == doctest::Approx(2.0 / 24.0).epsilon(1e-12));
  }

  SUBCASE("loss decays quadratically in the perturbation") {
    double prev = -1.0;
    std::vector<double> eps = {0.1, 0.01, 0.001};
    std::vector<double> vals;
    for (double e : eps) {
      ChordSet pred = cyl;
      pred.chords[2].p1.y() += e;
      vals.push_back(geometric_losses(pred, cyl, cyl, cyl).total);
      CHECK(vals.back() > 0.0);
      if (prev > 0.0) CHECK(vals.back() < prev);
      prev = vals.back();
    }
    // Log-log slope between consecutive epsilons is 2 (pure quadratic).
    const double slope = std::log(vals[0] / vals[1]) / std::log(eps[0] / eps[1]);
    CHECK(slope == doctest::Approx(2.0).epsilon(0.01));
  }

  SUBCASE("nonnegativity and identity of indiscernibles for pts") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const auto gt_ed = random_set(rng, 5);
      const auto gt_es = random_set(rng, 5);
      const auto pr_ed = random_set(rng, 5);
      const auto pr_es = random_set(rng, 5);
      const auto l = geometric_losses(pr_ed, pr_es, gt_ed, gt_es);
      CHECK(l.pts >= 0.0);
      CHECK(l.diameter >= 0.0);
      CHECK(l.taper >= 0.0);
      CHECK(l.height >= 0.0);
      CHECK(l.pts > 0.0);  // random sets differ almost surely
      const auto zero = geometric_losses(pr_ed, pr_es, pr_ed, pr_es);
      CHECK(zero.pts == 0.0);
    }
  }

  SUBCASE("shape errors") {
    auto short_set = make_set({chord(0, 0, 1, 0), chord(0, 1, 1, 1)});
    CHECK_THROWS_AS(geometric_losses(short_set, short_set, short_set, short_set),
                    InsufficientChords);
    auto other = make_set(
        {chord(0, 0, 1, 0), chord(0, 1, 1, 1), chord(0, 2, 1, 2), chord(0, 3, 1, 3)});
    CHECK_THROWS_AS(geometric_losses(cyl, cyl, other, cyl), ShapeMismatch);
  }
}

TEST_CASE("geometric loss gradient matches central finite differences") {
  SUBCASE("zero at the global minimum") {
    const auto set =
        make_set({chord(0, 0, 2, 0), chord(0, 1, 2, 1), chord(0, 2, 2, 2)});
    auto [ged, ges] = geometric_losses_gradient(set, set, set, set);
    CHECK(ged.d_coords.cwiseAbs().maxCoeff() == 0.0);
    CHECK(ges.d_coords.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("100 random configurations") {
    const double step = 1e-3;
    double worst = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
      Rng rng(1000 + seed);
      const int l = 3 + static_cast<int>(rng.uniform_int(6));
      std::vector<ChordSet> pred_ed = {random_set(rng, l)};
      std::vector<ChordSet> pred_es = {random_set(rng, l)};
      std::vector<ChordSet> gt_ed = {random_set(rng, l)};
      std::vector<ChordSet> gt_es = {random_set(rng, l)};
      const auto grads = geometric_losses_gradient(pred_ed, pred_es, gt_ed, gt_es);
      for (int phase = 0; phase < 2; ++phase) {
        const auto& g = phase == 0 ? grads.d_pred_ed[0] : grads.d_pred_es[0];
        for (int ci = 0; ci < l; ++ci) {
          for (int k = 0; k < 4; ++k) {
            const double analytic = g.d_coords(ci, k);
            const double fd =
                fd_gradient(pred_ed, pred_es, gt_ed, gt_es, phase, 0, ci, k, step);
            const double diff = std::abs(analytic - fd);
            if (diff > 1e-8) {
              const double rel = diff / std::max(std::abs(analytic), std::abs(fd));
              worst = std::max(worst, rel);
            }
          }
        }
      }
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("pts-only direction reproduces the quadratic derivative") {
    const auto cyl =
        make_set({chord(0, 0, 2, 0), chord(0, 1, 2, 1), chord(0, 2, 2, 2)});
    ChordSet pred = cyl;
    pred.chords[1].p1.x() += 1.0;
    pred.chords[1].p2.x() += 1.0;
    auto [ged, ges] = geometric_losses_gradient(pred, cyl, cyl, cyl);
    // Along-the-line translation keeps B and H flat, so the gradient on the
    // shifted coordinates is the pts derivative 2*(pd-gt)/(2*L*4).
    CHECK(ged.d_coords(1, 0) == doctest::Approx(2.0 / 24.0).epsilon(1e-9));
    CHECK(ged.d_coords(1, 2) == doctest::Approx(2.0 / 24.0).epsilon(1e-9));
    CHECK(ges.d_coords.cwiseAbs().maxCoeff() == 0.0);
  }
}
