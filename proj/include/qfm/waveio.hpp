#pragma once

// Raw waveform records, the on-disk corpus container, and a synthetic PPG/ECG generator.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace qfm {

enum class Channel : std::uint8_t { PPG = 0, ECG_LEAD_II = 1 };

const char* to_string(Channel c);

/// One raw single-channel recording. `missing_mask[i] == true` marks sample i as absent.
struct WaveformRecord {
  std::string subject_id;
  Channel channel = Channel::PPG;
  double sampling_rate_hz = 125.0;
  double start_time_s = 0.0;
  std::vector<float> samples;
  std::vector<bool> missing_mask;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sampling_rate_hz; }
  double missing_fraction() const;

  /// Throws ContractError when the type invariants do not hold.
  void validate() const;

  bool operator==(const WaveformRecord&) const = default;
};

/// `mixed` draws an independent kind (none, gaussian, baseline_wander, motion_burst) and a level
/// in [0, noise_level] for every 30 s block, so one session spans several quality labels.
enum class NoiseKind { none, gaussian, baseline_wander, motion_burst, dropout, mixed };

NoiseKind parse_noise_kind(const std::string& s);
const char* to_string(NoiseKind k);

struct SyntheticSpec {
  double heart_rate_bpm = 75.0;
  NoiseKind noise_kind = NoiseKind::none;
  double noise_level = 0.0;
  double duration_s = 30.0;
  std::uint64_t seed = 0;
  double sampling_rate_hz = 125.0;
  double start_time_s = 0.0;
  std::string subject_id = "synth";
  /// Coefficient of variation of RR intervals (0 = regular rhythm).
  double rr_irregularity = 0.0;
  /// Height of the second (reflected) PPG wave relative to the first.
  double dicrotic_ratio = 0.8;

  void validate() const;
};

struct RecordPair {
  WaveformRecord ppg;
  WaveformRecord ecg;
};

/// Time-aligned PPG + ECG sharing one beat sequence. Bitwise deterministic in `spec.seed`.
RecordPair generate_synthetic(const SyntheticSpec& spec);

/// Noise-free PQRST template evaluated at `t` seconds relative to the R peak.
double ecg_template(double t);
/// Noise-free PPG pulse (two Gaussians) at `t` seconds after the R peak, for beat period `period_s`.
double ppg_pulse(double t, double period_s, double dicrotic_ratio = 0.8);

/// Beat (R-peak) times used by the generator for a given heart rate and duration. With
/// irregularity > 0 each RR interval is scaled by a seeded factor (1 + irregularity * N(0,1)),
/// clamped to [0.4, 1.8].
std::vector<double> synthetic_beat_times(double heart_rate_bpm, double duration_s, double irregularity = 0.0,
                                         std::uint64_t seed = 0);

void write_corpus(const std::vector<WaveformRecord>& records, const std::string& path);
std::vector<WaveformRecord> read_corpus(const std::string& path);

std::vector<std::uint8_t> encode_corpus(const std::vector<WaveformRecord>& records);
std::vector<WaveformRecord> decode_corpus(const std::vector<std::uint8_t>& bytes);

}  // namespace qfm
