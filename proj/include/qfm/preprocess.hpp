#pragma once

// Record filtering, 30 s / 50 % overlap segmentation, gap interpolation, resampling and normalization.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qfm/waveio.hpp"

namespace qfm {

namespace io {
class ByteWriter;
class ByteReader;
}  // namespace io

inline constexpr double kSegmentRateHz = 300.0;
inline constexpr double kSegmentSeconds = 30.0;
inline constexpr double kSegmentHopSeconds = 15.0;
inline constexpr Eigen::Index kSegmentLength = 9000;
inline constexpr Eigen::Index kSegmentChannels = 2;

using SegmentMatrix = Eigen::Matrix<float, kSegmentChannels, Eigen::Dynamic, Eigen::RowMajor>;

/// A 2-channel 30 s window at 300 Hz. Row 0 is PPG, row 1 is ECG.
/// `channels` is min-max normalized; `raw` keeps the interpolated, resampled amplitudes before
/// normalization (perfusion scoring needs the AC/DC ratio).
struct Segment {
  std::string subject_id;
  double t_start_s = 0.0;
  SegmentMatrix channels = SegmentMatrix::Zero(kSegmentChannels, kSegmentLength);
  SegmentMatrix raw = SegmentMatrix::Zero(kSegmentChannels, kSegmentLength);

  bool operator==(const Segment& o) const {
    return subject_id == o.subject_id && t_start_s == o.t_start_s && channels == o.channels && raw == o.raw;
  }
};

struct FilterConfig {
  double min_duration_s = 300.0;
  double max_missing_fraction = 0.20;
};

/// Drops records shorter than the minimum duration or with too many missing samples.
std::vector<WaveformRecord> filter_records(const std::vector<WaveformRecord>& records,
                                           const FilterConfig& config = {});

/// Linear interpolation over masked samples; leading/trailing gaps hold the nearest observed value.
/// Returns an empty vector when every sample is missing.
std::vector<double> interpolate_missing(std::span<const float> samples, const std::vector<bool>& missing);

/// Windowed-sinc resampling to round(len * rate_out / rate_in) samples.
std::vector<double> resample(std::span<const double> samples, double rate_in, double rate_out = kSegmentRateHz);

/// Same kernel, explicit output length (sample m sits at time m / rate_out).
std::vector<double> resample_to_length(std::span<const double> samples, double rate_in, double rate_out,
                                       std::size_t out_len);

/// Affine map of [min, max] onto [0, 1]; a constant input maps to 0.5 everywhere.
std::vector<double> minmax_normalize(std::span<const double> samples);

/// Segments a time-aligned PPG/ECG pair of one subject. Windows start every 15 s from the record
/// start; only windows fully covered by both channels are emitted.
std::vector<Segment> segment_pairwise(const WaveformRecord& ppg, const WaveformRecord& ecg);

/// filter_records + pairing by (subject, start time) + segment_pairwise, ordered by (subject, t_start).
std::vector<Segment> preprocess_corpus(const std::vector<WaveformRecord>& records, const FilterConfig& config = {});

/// One segment record as laid out inside the segment container (shared by other containers).
void write_segment(io::ByteWriter& w, const Segment& s);
Segment read_segment(io::ByteReader& r);

std::vector<std::uint8_t> encode_segments(const std::vector<Segment>& segments);
std::vector<Segment> decode_segments(const std::vector<std::uint8_t>& bytes);
void write_segments(const std::vector<Segment>& segments, const std::string& path);
std::vector<Segment> read_segments(const std::string& path);

}  // namespace qfm
