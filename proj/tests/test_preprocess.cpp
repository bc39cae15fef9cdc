#include <cmath>
#include <cstring>
#include <numbers>

#include "doctest.h"
#include "qfm/errors.hpp"
#include "qfm/preprocess.hpp"

using namespace qfm;

namespace {

RecordPair session(double seconds, std::uint64_t seed, const std::string& id = "s", double start = 0.0) {
  SyntheticSpec s;
  s.duration_s = seconds;
  s.seed = seed;
  s.subject_id = id;
  s.start_time_s = start;
  s.noise_kind = NoiseKind::gaussian;
  s.noise_level = 0.1;
  return generate_synthetic(s);
}

}  // namespace

TEST_CASE("filter drops short records and records with too many gaps") {
  auto ok = session(300, 1).ppg;
  auto short_rec = session(299, 1).ppg;
  auto gappy = ok;
  for (std::size_t i = 0; i < gappy.size() / 4; ++i) gappy.missing_mask[i] = true;  // 25% missing
  auto edge = ok;
  for (std::size_t i = 0; i < edge.size() / 5; ++i) edge.missing_mask[i] = true;  // exactly 20%
  const auto kept = filter_records({ok, short_rec, gappy, edge});
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] == ok);
  CHECK(kept[1] == edge);
}

TEST_CASE("gap interpolation is linear between observed neighbours") {
  const std::vector<float> x{9, 1, 0, 0, 4, 0, 6};
  const std::vector<bool> miss{true, false, true, true, false, true, false};
  const auto y = interpolate_missing(x, miss);
  REQUIRE(y.size() == x.size());
  CHECK(y[0] == 1.0);  // leading gap holds the nearest value
  CHECK(y[2] == doctest::Approx(2.0));
  CHECK(y[3] == doctest::Approx(3.0));
  CHECK(y[5] == doctest::Approx(5.0));
  CHECK(interpolate_missing(x, std::vector<bool>(x.size(), true)).empty());
}

TEST_CASE("resampling preserves a band-limited sine") {
  const double f = 1.3, fin = 125.0;
  std::vector<double> x(2500);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * std::numbers::pi * f * static_cast<double>(i) / fin);
  const auto y = resample(x, fin, 300.0);
  REQUIRE(y.size() == 6000);
  double worst = 0;
  // Away from the edges the kernel support is complete.
  for (std::size_t m = 300; m + 300 < y.size(); ++m)
    worst = std::max(worst, std::abs(y[m] - std::sin(2 * std::numbers::pi * f * static_cast<double>(m) / 300.0)));
  CHECK(worst < 1e-3);
}

TEST_CASE("min-max normalization") {
  const std::vector<double> x{3, -1, 7, 5};
  const auto y = minmax_normalize(x);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 1.0);
  const auto c = minmax_normalize(std::vector<double>{2, 2, 2});
  for (double v : c) CHECK(v == 0.5);
}

TEST_CASE("pairwise segmentation yields 30 s windows every 15 s") {
  const auto p = session(600, 2, "subj", 100.0);
  const auto segs = segment_pairwise(p.ppg, p.ecg);
  // starts 0, 15, ..., 570 relative to the record
  REQUIRE(segs.size() == 39);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    CHECK(segs[i].t_start_s == doctest::Approx(100.0 + 15.0 * static_cast<double>(i)));
    CHECK(segs[i].channels.cols() == kSegmentLength);
    CHECK(segs[i].channels.minCoeff() >= 0.0f);
    CHECK(segs[i].channels.maxCoeff() <= 1.0f);
    CHECK(segs[i].subject_id == "subj");
  }
  // Overlapping halves of consecutive windows hold the same raw samples once the resampling kernel
  // no longer reaches a window edge.
  const Eigen::Index half = kSegmentLength / 2, margin = 100;
  const auto a = segs[0].raw.middleCols(half + margin, half - 2 * margin);
  const auto b = segs[1].raw.middleCols(margin, half - 2 * margin);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("segmentation rejects mismatched subjects") {
  const auto a = session(300, 3, "a"), b = session(300, 3, "b");
  CHECK_THROWS_AS(segment_pairwise(a.ppg, b.ecg), ContractError);
}

TEST_CASE("corpus preprocessing orders by subject and start") {
  const auto a = session(300, 4, "b"), b = session(330, 5, "a");
  const auto segs = preprocess_corpus({a.ppg, a.ecg, b.ppg, b.ecg});
  REQUIRE(segs.size() == 19 + 21);
  CHECK(segs.front().subject_id == "a");
  CHECK(segs.back().subject_id == "b");
  for (std::size_t i = 1; i < segs.size(); ++i)
    if (segs[i].subject_id == segs[i - 1].subject_id) CHECK(segs[i].t_start_s > segs[i - 1].t_start_s);
}

TEST_CASE("segment container round-trips and rejects damage") {
  const auto p = session(300, 6);
  const auto segs = segment_pairwise(p.ppg, p.ecg);
  auto bytes = encode_segments(segs);
  CHECK(std::memcmp(bytes.data(), "QFMSEGS1", 8) == 0);
  CHECK(decode_segments(bytes) == segs);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_segments(bytes), FormatError);
}
