#include "qfm/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <tuple>

#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"

namespace qfm {

namespace {

constexpr char kSegmentMagic[] = "QFMSEGS1";
constexpr std::uint32_t kSegmentVersion = 1;
// Zero crossings of the sinc kernel on each side, in units of the (possibly lowered) cutoff.
constexpr double kSincZeroCrossings = 16.0;

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

double blackman(double x) {
  // x in [-1, 1]
  const double a = std::numbers::pi * (x + 1.0);
  return 0.42 - 0.5 * std::cos(a) + 0.08 * std::cos(2.0 * a);
}

}  // namespace

std::vector<WaveformRecord> filter_records(const std::vector<WaveformRecord>& records, const FilterConfig& config) {
  std::vector<WaveformRecord> kept;
  for (const auto& r : records) {
    if (r.duration_s() < config.min_duration_s) continue;
    if (r.missing_fraction() > config.max_missing_fraction) continue;
    kept.push_back(r);
  }
  return kept;
}

std::vector<double> interpolate_missing(std::span<const float> samples, const std::vector<bool>& missing) {
  if (samples.size() != missing.size()) throw ContractError("samples and missing mask lengths differ");
  const auto n = samples.size();
  std::vector<double> out(n);
  std::ptrdiff_t prev = -1;
  for (std::size_t i = 0; i < n; ++i) {
    if (missing[i]) continue;
    out[i] = samples[i];
    const auto gap_start = static_cast<std::size_t>(prev + 1);
    if (prev < 0) {
      for (std::size_t j = 0; j < i; ++j) out[j] = samples[i];
    } else {
      const double a = samples[static_cast<std::size_t>(prev)];
      const double b = samples[i];
      const double span = static_cast<double>(i) - static_cast<double>(prev);
      for (std::size_t j = gap_start; j < i; ++j)
        out[j] = a + (b - a) * (static_cast<double>(j) - static_cast<double>(prev)) / span;
    }
    prev = static_cast<std::ptrdiff_t>(i);
  }
  if (prev < 0) return {};
  for (auto j = static_cast<std::size_t>(prev + 1); j < n; ++j) out[j] = samples[static_cast<std::size_t>(prev)];
  return out;
}

std::vector<double> resample_to_length(std::span<const double> samples, double rate_in, double rate_out,
                                       std::size_t out_len) {
  if (samples.empty()) throw ContractError("resample of an empty signal");
  if (!(rate_in > 0.0) || !(rate_out > 0.0)) throw ContractError("resample rates must be positive");
  const auto n = static_cast<std::ptrdiff_t>(samples.size());
  const double cutoff = std::min(1.0, rate_out / rate_in);
  const double half_width = kSincZeroCrossings / cutoff;
  const double step = rate_in / rate_out;
  std::vector<double> out(out_len);
  for (std::size_t m = 0; m < out_len; ++m) {
    const double pos = static_cast<double>(m) * step;
    const auto lo = static_cast<std::ptrdiff_t>(std::ceil(pos - half_width));
    const auto hi = static_cast<std::ptrdiff_t>(std::floor(pos + half_width));
    double acc = 0.0, wsum = 0.0;
    for (auto i = lo; i <= hi; ++i) {
      const double d = pos - static_cast<double>(i);
      const double w = cutoff * sinc(cutoff * d) * blackman(d / half_width);
      const auto idx = std::clamp<std::ptrdiff_t>(i, 0, n - 1);
      acc += w * samples[static_cast<std::size_t>(idx)];
      wsum += w;
    }
    out[m] = acc / wsum;
  }
  return out;
}

std::vector<double> resample(std::span<const double> samples, double rate_in, double rate_out) {
  if (samples.empty()) throw ContractError("resample of an empty signal");
  if (!(rate_in > 0.0)) throw ContractError("resample rate_in must be positive");
  const auto out_len =
      static_cast<std::size_t>(std::llround(static_cast<double>(samples.size()) * rate_out / rate_in));
  return resample_to_length(samples, rate_in, rate_out, out_len);
}

std::vector<double> minmax_normalize(std::span<const double> samples) {
  std::vector<double> out(samples.size(), 0.5);
  if (samples.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = std::clamp((samples[i] - lo) * inv, 0.0, 1.0);
  return out;
}

std::vector<Segment> segment_pairwise(const WaveformRecord& ppg, const WaveformRecord& ecg) {
  ppg.validate();
  ecg.validate();
  if (ppg.subject_id != ecg.subject_id)
    throw ContractError("segment_pairwise: subjects differ ('" + ppg.subject_id + "' vs '" + ecg.subject_id + "')");
  if (ppg.channel != Channel::PPG || ecg.channel != Channel::ECG_LEAD_II)
    throw ContractError("segment_pairwise: expected (PPG, ECG_LEAD_II) records");
  const double tolerance = 0.5 / std::max(ppg.sampling_rate_hz, ecg.sampling_rate_hz);
  if (std::abs(ppg.start_time_s - ecg.start_time_s) > tolerance)
    throw ContractError("segment_pairwise: records are misaligned (start " + std::to_string(ppg.start_time_s) +
                        " vs " + std::to_string(ecg.start_time_s) + ")");

  const double covered = std::min(ppg.duration_s(), ecg.duration_s());
  std::vector<Segment> out;
  for (int k = 0;; ++k) {
    const double offset = kSegmentHopSeconds * k;
    if (offset + kSegmentSeconds > covered + 1e-9) break;

    Segment seg;
    seg.subject_id = ppg.subject_id;
    seg.t_start_s = ppg.start_time_s + offset;
    bool usable = true;
    for (int c = 0; c < 2 && usable; ++c) {
      const auto& rec = c == 0 ? ppg : ecg;
      const auto i0 = static_cast<std::size_t>(std::llround(offset * rec.sampling_rate_hz));
      const auto len = std::min(static_cast<std::size_t>(std::llround(kSegmentSeconds * rec.sampling_rate_hz)),
                                rec.size() - i0);
      const std::vector<bool> mask(rec.missing_mask.begin() + static_cast<std::ptrdiff_t>(i0),
                                   rec.missing_mask.begin() + static_cast<std::ptrdiff_t>(i0 + len));
      const auto filled = interpolate_missing(std::span(rec.samples).subspan(i0, len), mask);
      if (filled.empty()) {
        usable = false;
        break;
      }
      const auto resampled = resample_to_length(filled, rec.sampling_rate_hz, kSegmentRateHz, kSegmentLength);
      const auto normalized = minmax_normalize(resampled);
      for (Eigen::Index i = 0; i < kSegmentLength; ++i) {
        seg.raw(c, i) = static_cast<float>(resampled[static_cast<std::size_t>(i)]);
        seg.channels(c, i) = static_cast<float>(normalized[static_cast<std::size_t>(i)]);
      }
    }
    if (usable) out.push_back(std::move(seg));
  }
  return out;
}

std::vector<Segment> preprocess_corpus(const std::vector<WaveformRecord>& records, const FilterConfig& config) {
  const auto kept = filter_records(records, config);
  // Pair PPG and ECG records of the same subject that start together.
  std::map<std::tuple<std::string, double>, std::pair<const WaveformRecord*, const WaveformRecord*>> groups;
  for (const auto& r : kept) {
    auto& slot = groups[{r.subject_id, r.start_time_s}];
    (r.channel == Channel::PPG ? slot.first : slot.second) = &r;
  }
  std::vector<Segment> out;
  for (const auto& [key, pair] : groups) {
    if (pair.first == nullptr || pair.second == nullptr) continue;
    auto segs = segment_pairwise(*pair.first, *pair.second);
    std::move(segs.begin(), segs.end(), std::back_inserter(out));
  }
  std::stable_sort(out.begin(), out.end(), [](const Segment& a, const Segment& b) {
    return std::tie(a.subject_id, a.t_start_s) < std::tie(b.subject_id, b.t_start_s);
  });
  return out;
}

void write_segment(io::ByteWriter& w, const Segment& s) {
  w.str(s.subject_id);
  w.f64(s.t_start_s);
  w.u32(static_cast<std::uint32_t>(s.channels.rows()));
  w.u32(static_cast<std::uint32_t>(s.channels.cols()));
  w.f32_array(std::span<const float>(s.channels.data(), static_cast<std::size_t>(s.channels.size())));
  w.f32_array(std::span<const float>(s.raw.data(), static_cast<std::size_t>(s.raw.size())));
}

Segment read_segment(io::ByteReader& r) {
  Segment s;
  s.subject_id = r.str();
  s.t_start_s = r.f64();
  const auto rows = r.u32();
  const auto cols = r.u32();
  if (rows != kSegmentChannels || cols != kSegmentLength)
    r.fail("segment shape " + std::to_string(rows) + "x" + std::to_string(cols) + " is not 2x9000");
  const auto norm = r.f32_array(static_cast<std::uint64_t>(rows) * cols);
  const auto raw = r.f32_array(static_cast<std::uint64_t>(rows) * cols);
  s.channels = Eigen::Map<const SegmentMatrix>(norm.data(), rows, cols);
  s.raw = Eigen::Map<const SegmentMatrix>(raw.data(), rows, cols);
  return s;
}

std::vector<std::uint8_t> encode_segments(const std::vector<Segment>& segments) {
  io::ByteWriter w;
  w.magic(std::string_view(kSegmentMagic, 8));
  w.u32(kSegmentVersion);
  w.u64(segments.size());
  for (const auto& s : segments) write_segment(w, s);
  return w.data();
}

std::vector<Segment> decode_segments(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kSegmentMagic, 8));
  const auto version = r.u32();
  if (version != kSegmentVersion) r.fail("unsupported segment container version " + std::to_string(version));
  const auto count = r.u64();
  std::vector<Segment> out;
  for (std::uint64_t k = 0; k < count; ++k) out.push_back(read_segment(r));
  if (!r.at_end()) r.fail("trailing bytes after last segment");
  return out;
}

void write_segments(const std::vector<Segment>& segments, const std::string& path) {
  io::write_file(path, encode_segments(segments));
}

std::vector<Segment> read_segments(const std::string& path) { return decode_segments(io::read_file(path)); }

}  // namespace qfm
