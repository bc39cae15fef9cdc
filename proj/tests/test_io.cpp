#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"
#include "qfm/waveio.hpp"

using namespace qfm;

TEST_CASE("byte writer emits little-endian fields") {
  io::ByteWriter w;
  w.u32(0x01020304u);
  w.u64(0x0102030405060708ull);
  w.f64(1.0);
  const std::vector<std::uint8_t> expect{4, 3, 2, 1, 8, 7, 6, 5, 4, 3, 2, 1, 0, 0, 0, 0, 0, 0, 0xf0, 0x3f};
  CHECK(w.data() == expect);
}

TEST_CASE("bit packing is LSB first and round-trips") {
  io::ByteWriter w;
  const std::vector<bool> flags{true, false, false, false, false, false, false, false, false, true};
  w.bits(flags);
  REQUIRE(w.data().size() == 2);
  CHECK(w.data()[0] == 0x01);
  CHECK(w.data()[1] == 0x02);
  io::ByteReader r(w.data());
  CHECK(r.bits(flags.size()) == flags);
  CHECK(r.at_end());
}

TEST_CASE("scalar and string fields round-trip") {
  io::ByteWriter w;
  w.u8(7);
  w.str("subject");
  w.f32(-2.5f);
  w.f64(std::nextafter(1.0, 2.0));
  io::ByteReader r(w.data());
  CHECK(r.u8() == 7);
  CHECK(r.str() == "subject");
  CHECK(r.f32() == -2.5f);
  CHECK(r.f64() == std::nextafter(1.0, 2.0));
  CHECK(r.at_end());
}

TEST_CASE("truncated input reports the failing offset") {
  io::ByteWriter w;
  w.u32(5);
  std::vector<std::uint8_t> bytes = w.data();
  bytes.pop_back();
  io::ByteReader r(bytes);
  try {
    r.u32();
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
}

namespace {

WaveformRecord small_record(const std::string& id, Channel ch) {
  WaveformRecord r;
  r.subject_id = id;
  r.channel = ch;
  r.sampling_rate_hz = 125.0;
  r.start_time_s = 12.5;
  for (int i = 0; i < 37; ++i) r.samples.push_back(static_cast<float>(std::sin(i * 0.3)));
  r.missing_mask.assign(37, false);
  r.missing_mask[3] = r.missing_mask[36] = true;
  return r;
}

}  // namespace

TEST_CASE("corpus container round-trips records exactly") {
  const std::vector<WaveformRecord> recs{small_record("a", Channel::PPG), small_record("a", Channel::ECG_LEAD_II)};
  const auto bytes = encode_corpus(recs);
  CHECK(std::memcmp(bytes.data(), "QFMCORP1", 8) == 0);
  CHECK(decode_corpus(bytes) == recs);

  const auto path = std::filesystem::temp_directory_path() / "qfm_test_corpus.bin";
  write_corpus(recs, path.string());
  CHECK(read_corpus(path.string()) == recs);
  std::filesystem::remove(path);
}

TEST_CASE("corpus decoding rejects damaged containers") {
  auto bytes = encode_corpus({small_record("a", Channel::PPG)});
  SUBCASE("magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_corpus(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_corpus(bytes), FormatError);
  }
  SUBCASE("trailing") {
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_corpus(bytes), FormatError);
  }
  SUBCASE("channel tag") {
    // magic 8 + version 4 + count 8 + id length 4 + "a"
    bytes[25] = 9;
    CHECK_THROWS_AS(decode_corpus(bytes), FormatError);
  }
}

TEST_CASE("record validation") {
  auto r = small_record("a", Channel::PPG);
  CHECK_NOTHROW(r.validate());
  CHECK(r.missing_fraction() == doctest::Approx(2.0 / 37.0));
  r.missing_mask.pop_back();
  CHECK_THROWS_AS(r.validate(), ContractError);
  r = small_record("a", Channel::PPG);
  r.sampling_rate_hz = 0;
  CHECK_THROWS_AS(r.validate(), ContractError);
}

TEST_CASE("synthetic generator is deterministic in the seed") {
  SyntheticSpec s;
  s.noise_kind = NoiseKind::mixed;
  s.noise_level = 0.7;
  s.duration_s = 60;
  s.seed = 42;
  const auto a = generate_synthetic(s), b = generate_synthetic(s);
  CHECK(a.ppg == b.ppg);
  CHECK(a.ecg == b.ecg);
  s.seed = 43;
  CHECK_FALSE(generate_synthetic(s).ppg == a.ppg);
  CHECK(a.ppg.size() == 60 * 125);
  CHECK(a.ecg.channel == Channel::ECG_LEAD_II);
}

TEST_CASE("regular beat times are spaced at 60 / bpm") {
  const auto beats = synthetic_beat_times(75.0, 30.0);
  REQUIRE(beats.size() > 30);
  for (std::size_t i = 1; i < beats.size(); ++i) CHECK(beats[i] - beats[i - 1] == doctest::Approx(0.8));
  const auto irregular = synthetic_beat_times(75.0, 30.0, 0.2, 3);
  double lo = 1e9, hi = 0;
  for (std::size_t i = 1; i < irregular.size(); ++i) {
    const double rr = irregular[i] - irregular[i - 1];
    lo = std::min(lo, rr);
    hi = std::max(hi, rr);
  }
  CHECK(hi - lo > 0.05);
  CHECK(lo >= 0.4 * 0.8 - 1e-12);
  CHECK(hi <= 1.8 * 0.8 + 1e-12);
}

TEST_CASE("ECG template peaks at the R wave") {
  double best_t = 0, best = -1e9;
  for (int i = -300; i <= 300; ++i) {
    const double t = i / 1000.0;
    if (ecg_template(t) > best) best = ecg_template(t), best_t = t;
  }
  CHECK(std::abs(best_t) <= 0.002);
}

TEST_CASE("dropout noise marks samples missing") {
  SyntheticSpec s;
  s.noise_kind = NoiseKind::dropout;
  s.noise_level = 0.5;
  s.duration_s = 120;
  s.seed = 1;
  const auto p = generate_synthetic(s);
  CHECK(p.ppg.missing_fraction() > 0.0);
  CHECK(parse_noise_kind("baseline_wander") == NoiseKind::baseline_wander);
  CHECK_THROWS(parse_noise_kind("pink"));
}
