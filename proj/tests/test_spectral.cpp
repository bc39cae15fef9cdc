#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qfm/errors.hpp"
#include "qfm/spectral.hpp"

using namespace qfm;
using spectral::Vector;

TEST_CASE("real DFT matches the naive sum for odd and even lengths") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (int n : {1, 2, 3, 7, 16, 45, 100, 127}) {
    std::vector<double> x(static_cast<std::size_t>(n));
    for (auto& e : x) e = nd(rng);
    const auto got = spectral::dft<double>(Eigen::Map<const Vector<double>>(x.data(), n));
    const auto ref = oracle::naive_dft(x);
    REQUIRE(got.size() == static_cast<Eigen::Index>(ref.size()));
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(got(static_cast<Eigen::Index>(k)) - ref[k]) < 1e-10);
  }
}

TEST_CASE("pure cosine lands in one bin with the expected amplitude and phase") {
  const int n = 64, k0 = 5;
  const double phi = 0.7;
  Vector<double> x(n);
  for (int t = 0; t < n; ++t) x(t) = std::cos(2 * std::numbers::pi * k0 * t / n + phi);
  const auto target = spectral::amp_phase<double>(spectral::dft<double>(x), n);
  CHECK(target.amplitude(0, k0) == doctest::Approx(n / 2.0));
  CHECK(target.phase(0, k0) == doctest::Approx(phi));
  for (int k = 0; k < target.bins(); ++k)
    if (k != k0) {
      CHECK(target.amplitude(0, k) < 1e-9);
      // Numerically empty bins carry no phase.
      if (target.amplitude(0, k) < spectral::kPhaseMaskEpsilon) {
        CHECK(target.phase(0, k) == 0.0);
        CHECK(target.phase_mask()(0, k) == 0.0);
      }
    }
}

TEST_CASE("phase is quadrant aware") {
  spectral::ComplexVector<double> s(4);
  s << std::complex<double>(-1, 0), std::complex<double>(-1, -1), std::complex<double>(0, 2),
      std::complex<double>(1, -1);
  const auto t = spectral::amp_phase<double>(s, 6);
  CHECK(t.phase(0, 0) == doctest::Approx(std::numbers::pi));
  CHECK(t.phase(0, 1) == doctest::Approx(-3 * std::numbers::pi / 4));
  CHECK(t.phase(0, 2) == doctest::Approx(std::numbers::pi / 2));
  CHECK(t.phase(0, 3) == doctest::Approx(-std::numbers::pi / 4));
  CHECK(t.amplitude(0, 1) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("inverse transform recovers odd-length signals") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  for (int n : {1, 9, 101, 8999}) {
    Vector<double> x(n);
    for (auto& e : x) e = nd(rng);
    const auto back = spectral::inverse_dft<double>(spectral::dft<double>(x), n);
    CHECK((back - x).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("power spectrum is the squared magnitude") {
  Vector<double> x(10);
  x << 1, 2, 0, -1, 3, 0.5, 0, 0, 2, -2;
  const auto p = spectral::power_spectrum<double>(x);
  const auto ref = oracle::naive_dft(std::vector<double>(x.data(), x.data() + x.size()));
  for (std::size_t k = 0; k < ref.size(); ++k) CHECK(p(static_cast<Eigen::Index>(k)) == doctest::Approx(std::norm(ref[k])));
}

TEST_CASE("single precision agrees with double") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Vector<double> x(300);
  for (auto& e : x) e = nd(rng);
  const Vector<float> xf = x.cast<float>();
  const auto d = spectral::dft<double>(x);
  const auto f = spectral::dft<float>(xf);
  for (Eigen::Index k = 0; k < d.size(); ++k) CHECK(std::abs(std::complex<double>(f(k)) - d(k)) < 1e-3);
}

TEST_CASE("invalid input is rejected") {
  CHECK_THROWS_AS(spectral::dft<double>(Vector<double>()), ContractError);
  Vector<double> x = Vector<double>::Ones(4);
  x(2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(spectral::dft<double>(x), ContractError);
}
