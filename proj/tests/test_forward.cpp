#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/forward.hpp"
#include "dipolegrid/random.hpp"

using namespace dipolegrid;

namespace {

SensorArray one_sensor(const Vec3& r) {
  SensorArray s;
  s.positions = {r};
  return s;
}

Vec3 random_vec(RandomStream& rng, double scale) { return scale * Vec3(rng.normal(), rng.normal(), rng.normal()); }

}  // namespace

TEST_CASE("MEG field examples") {
  DipoleState d;
  d.moment = Vec3(1, 0, 0);
  CHECK(meg_field(d, one_sensor(Vec3(0, 0, 10)))(0) == 0.0);
  CHECK(meg_field(d, one_sensor(Vec3(0, 1, 0)))(0) == doctest::Approx(1.0));
  d.moment.setZero();
  CHECK(meg_field(d, one_sensor(Vec3(3, 1, 2))).norm() == 0.0);
}

TEST_CASE("MEG field against a hand-written formula") {
  RandomStream rng(1);
  for (int i = 0; i < 100; ++i) {
    DipoleState d{random_vec(rng, 3), random_vec(rng, 2)};
    const Vec3 r = random_vec(rng, 10);
    const Vec3 v = r - d.location;
    const double expected = 2.5 * (d.moment.x() * v.y() - d.moment.y() * v.x()) / std::pow(v.norm(), 3);
    CHECK(meg_field(d, one_sensor(r), FieldConstants{2.5})(0) == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("singular geometry is rejected") {
  DipoleState d{Vec3(1, 2, 3), Vec3(1, 0, 0)};
  CHECK_THROWS_AS(meg_field(d, one_sensor(Vec3(1, 2, 3))), NumericError);
  CHECK_THROWS_AS(meg_field(d, one_sensor(Vec3(1, 2, 3 + 1e-7))), NumericError);
  CHECK_NOTHROW(meg_field(d, one_sensor(Vec3(1, 2, 3 + 1e-5))));
  CHECK_THROWS_AS(meg_field(d, one_sensor(Vec3(0, 0, 0)), FieldConstants{0.0}), ValidationError);
}

TEST_CASE("EEG potential examples") {
  SensorArray s = one_sensor(Vec3(0, 2, 0));
  s.modality = Modality::kEeg;
  s.conductivity = 1.0 / (4.0 * std::numbers::pi);
  DipoleState d{Vec3::Zero(), Vec3(0, 1, 0)};
  CHECK(eeg_potential(d, s)(0) == doctest::Approx(0.25));
  const double before = eeg_potential(d, s)(0);
  s.conductivity *= 2;
  CHECK(eeg_potential(d, s)(0) == doctest::Approx(before / 2));
  d.moment = Vec3(1, 0, 1);  // orthogonal to r - p
  CHECK(eeg_potential(d, s)(0) == 0.0);
  s.conductivity = 0.0;
  CHECK_THROWS_AS(eeg_potential(d, s), ValidationError);
  s.conductivity = 1.0;
  CHECK(sensor_response(d, s).isApprox(eeg_potential(d, s)));
}

TEST_CASE("superposition of sources") {
  RandomStream rng(5);
  SensorArray s;
  for (int l = 0; l < 8; ++l) s.positions.push_back(random_vec(rng, 12));
  const DipoleState a{random_vec(rng, 2), random_vec(rng, 1)}, b{random_vec(rng, 2), random_vec(rng, 1)};
  const std::vector<DipoleState> two{a, a}, single{a}, pair{a, b};
  CHECK(multi_source_field(two, s).isApprox(2.0 * meg_field(a, s), 1e-14));
  CHECK(multi_source_field(single, s) == meg_field(a, s));
  CHECK(multi_source_field(pair, s).isApprox(meg_field(a, s) + meg_field(b, s), 1e-14));
  const std::vector<DipoleState> opposite{a, DipoleState{a.location, -a.moment}};
  CHECK(multi_source_field(opposite, s).norm() < 1e-15);
  CHECK_THROWS_AS(multi_source_field(std::vector<DipoleState>{}, s), ValidationError);
}
