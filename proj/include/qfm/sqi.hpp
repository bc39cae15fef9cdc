#pragma once

// Signal quality indices for PPG and ECG segments, their fusion into a 5-class pseudo-label, and
// mining of quality-divergent segment pairs.

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qfm/preprocess.hpp"

namespace qfm {

/// Ordered worst to best; comparisons follow the enum values.
enum class QualityLabel : int { Bad = 0, Poor = 1, Acceptable = 2, Good = 3, Excellent = 4 };

const char* to_string(QualityLabel l);
QualityLabel parse_quality_label(const std::string& s);

/// Thresholds are closed below: >= 0.9 Excellent, >= 0.7 Good, >= 0.5 Acceptable, >= 0.3 Poor.
QualityLabel label_for(double sqi);

struct SqiConfig {
  double fs = kSegmentRateHz;

  double power_band_lo = 0.5, power_band_hi = 4.0, power_total_hi = 15.0;
  double perfusion_band_lo = 0.5, perfusion_band_hi = 4.0, perfusion_ref = 0.05;
  double skewness_ref = 0.0;
  double relative_band_lo = 1.0, relative_band_hi = 2.25, relative_total_hi = 8.0;
  int entropy_bins = 16;

  double ecg_subwindow_s = 3.0;
  double energy_z_threshold = 3.0;
  /// Floor on the robust energy dispersion, as a fraction of the median sub-window energy.
  double energy_dispersion_floor = 0.1;
  int sampen_m = 2;
  double sampen_r = 0.2;
  double sampen_threshold = 1.5;
  /// Sample entropy is evaluated on every n-th sample (300 Hz / 3 = 100 Hz).
  int sampen_decimation = 3;

  double hr_min_bpm = 30.0, hr_max_bpm = 220.0;
  double rr_ratio_min = 2.0 / 3.0, rr_ratio_max = 1.5;

  double ppg_weight = 0.5;
  double ecg_noise_weight = 0.5;
  /// Weights of power, perfusion, skewness, relative power, entropy.
  std::array<double, 5> ppg_component_weights{0.2, 0.2, 0.2, 0.2, 0.2};
};

struct QualityAssessment {
  double sqi_ppg = 0.0;
  double sqi_ecg = 0.0;
  double sqi = 0.0;
  QualityLabel label = QualityLabel::Bad;
  std::map<std::string, double> component_scores;
};

// PPG components. Inputs are one channel sampled at config.fs.
double ppg_power_sqi(std::span<const double> x, const SqiConfig& config = {});
/// Needs the amplitudes before min-max normalization.
double ppg_perfusion_sqi(std::span<const double> raw, const SqiConfig& config = {});
double ppg_skewness_sqi(std::span<const double> x, const SqiConfig& config = {});
double ppg_relative_power_sqi(std::span<const double> x, const SqiConfig& config = {});
double ppg_entropy_sqi(std::span<const double> x, const SqiConfig& config = {});

// ECG components.
double ecg_noise_sqi(std::span<const double> x, const SqiConfig& config = {});
double ecg_beat_sqi(std::span<const double> x, const SqiConfig& config = {});

/// Population skewness; 0 for a constant signal.
double skewness(std::span<const double> x);
/// SampEn(m, r) with r given in absolute units. Returns +inf when no (m+1)-matches exist.
double sample_entropy(std::span<const double> x, int m, double r);
/// Pan-Tompkins-style R-peak detector: 5-15 Hz band-pass, derivative, squaring, 150 ms moving
/// integration, adaptive signal/noise peak threshold. Returns beat times in seconds.
std::vector<double> detect_beats(std::span<const double> ecg, double fs);
/// Per-beat plausibility for beats 1..n-1: heart rate within range and, from beat 2 on, the ratio
/// of consecutive RR intervals within range. Element i refers to beat i+1.
std::vector<bool> beat_plausibility(std::span<const double> beat_times_s, const SqiConfig& config = {});
/// Fraction of plausible beats; 0 when fewer than 2 beats.
double beat_plausibility_score(std::span<const double> beat_times_s, const SqiConfig& config = {});

QualityAssessment assess(const Segment& segment, const SqiConfig& config = {});

struct AssessedSegment {
  std::size_t index = 0;  // position in the owning segment collection
  std::string subject_id;
  double t_start_s = 0.0;
  QualityAssessment quality;
};

/// A same-subject pair whose starts lie less than `max_gap_s` apart and whose labels differ.
/// `high` indexes the better-labeled segment.
struct QualityPair {
  std::size_t high = 0;
  std::size_t low = 0;
  std::string subject_id;
  double t_high = 0.0;
  double t_low = 0.0;
  QualityLabel label_high = QualityLabel::Bad;
  QualityLabel label_low = QualityLabel::Bad;

  bool operator==(const QualityPair&) const = default;
};

inline constexpr double kPairMaxGapSeconds = 300.0;

std::vector<QualityPair> mine_pairs(const std::vector<AssessedSegment>& assessed,
                                    double max_gap_s = kPairMaxGapSeconds);

/// Scores every segment in order.
std::vector<AssessedSegment> assess_all(const std::vector<Segment>& segments, const SqiConfig& config = {},
                                        int threads = 1);

// Tab-separated manifest (one line per segment) and pair list. `source` records the file the
// indices refer to.
void write_manifest(const std::vector<AssessedSegment>& assessed, const std::string& source, const std::string& path);
std::vector<AssessedSegment> read_manifest(const std::string& path, std::string* source = nullptr);
void write_pairs(const std::vector<QualityPair>& pairs, const std::string& source, const std::string& path);
std::vector<QualityPair> read_pairs(const std::string& path, std::string* source = nullptr);

}  // namespace qfm
