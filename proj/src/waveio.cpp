#include "qfm/waveio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"

namespace qfm {

namespace {

constexpr double kPpgDc = 1.0;
constexpr double kPpgAc = 0.1;
constexpr double kEcgScale = 1.0;
// Pulse arrival lag behind the R peak.
constexpr double kPulseTransit = 0.2;
constexpr double kFirstBeat = 0.1;

constexpr char kCorpusMagic[] = "QFMCORP1";
constexpr std::uint32_t kCorpusVersion = 1;

double gauss(double t, double mu, double sigma) {
  const double z = (t - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

struct Wave {
  std::vector<double> ppg;
  std::vector<double> ecg;
};

void add_gaussian(Wave& w, double level, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& v : w.ppg) v += level * 0.5 * kPpgAc * n01(rng);
  for (auto& v : w.ecg) v += level * 0.5 * kEcgScale * n01(rng);
}

void add_baseline_wander(Wave& w, double level, double fs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> freq(0.05, 0.5);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (auto* sig : {&w.ppg, &w.ecg}) {
    const double scale = sig == &w.ppg ? kPpgAc : kEcgScale;
    for (int c = 0; c < 3; ++c) {
      const double f = freq(rng);
      const double p = phase(rng);
      for (std::size_t i = 0; i < sig->size(); ++i) {
        (*sig)[i] += level * scale * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / fs + p);
      }
    }
  }
}

// Large erratic excursions of 2-3 s, one per 15 s slot, on both channels.
void add_motion_bursts(Wave& w, double level, double fs, std::mt19937_64& rng) {
  constexpr double slot = 15.0;
  constexpr double ramp = 0.2;
  const auto n = w.ppg.size();
  const double duration = static_cast<double>(n) / fs;
  const int bursts = std::max(1, static_cast<int>(std::ceil(duration / slot)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int b = 0; b < bursts; ++b) {
    const double len = 2.0 + u01(rng);
    const double start = slot * b + u01(rng) * (slot - len);
    const auto i0 = static_cast<std::size_t>(start * fs);
    const auto i1 = std::min(n, static_cast<std::size_t>((start + len) * fs));
    // Slow drift outside the cardiac band plus a fast tremor component.
    const double f1 = 0.1 + 0.3 * u01(rng), f2 = 5.0 + 6.0 * u01(rng);
    const double p1 = 2.0 * std::numbers::pi * u01(rng), p2 = 2.0 * std::numbers::pi * u01(rng);
    for (std::size_t i = i0; i < i1; ++i) {
      const double t = static_cast<double>(i - i0) / fs;
      const double env = std::min({1.0, t / ramp, (len - t) / ramp});
      const double shape = std::sin(2.0 * std::numbers::pi * f1 * t + p1) +
                           0.6 * std::sin(2.0 * std::numbers::pi * f2 * t + p2) + 0.3 * n01(rng);
      // Sensor displacement pulls the PPG one way (one-sided dips).
      w.ppg[i] -= level * 10.0 * kPpgAc * env * std::abs(shape);
      w.ecg[i] += level * 3.0 * kEcgScale * env * (0.3 * shape + 2.0 * n01(rng));
    }
  }
}

// Marks contiguous gaps (0.5-3 s) until exactly round(level * n) samples are missing.
std::vector<bool> make_dropout(std::size_t n, double level, double fs, std::mt19937_64& rng) {
  std::vector<bool> mask(n, false);
  const auto target = static_cast<std::size_t>(std::llround(std::min(level, 1.0) * static_cast<double>(n)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::size_t count = 0;
  while (count < target) {
    const auto len = static_cast<std::size_t>((0.5 + 2.5 * u01(rng)) * fs) + 1;
    const auto start = static_cast<std::size_t>(u01(rng) * static_cast<double>(n));
    for (std::size_t i = start; i < std::min(n, start + len) && count < target; ++i) {
      if (!mask[i]) {
        mask[i] = true;
        ++count;
      }
    }
  }
  return mask;
}

constexpr double kMixedBlockSeconds = 30.0;

void add_mixed(Wave& w, double level, double fs, std::mt19937_64& rng) {
  const auto n = w.ppg.size();
  const auto block = static_cast<std::size_t>(std::llround(kMixedBlockSeconds * fs));
  std::uniform_int_distribution<int> pick(0, 3);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t b0 = 0; b0 < n; b0 += block) {
    const auto b1 = std::min(n, b0 + block);
    const int kind = pick(rng);
    const double l = level * u01(rng);
    Wave part{std::vector<double>(w.ppg.begin() + b0, w.ppg.begin() + b1),
              std::vector<double>(w.ecg.begin() + b0, w.ecg.begin() + b1)};
    switch (kind) {
      case 0: break;
      case 1: add_gaussian(part, l, rng); break;
      case 2: add_baseline_wander(part, l, fs, rng); break;
      default: add_motion_bursts(part, l, fs, rng); break;
    }
    std::copy(part.ppg.begin(), part.ppg.end(), w.ppg.begin() + b0);
    std::copy(part.ecg.begin(), part.ecg.end(), w.ecg.begin() + b0);
  }
}

}  // namespace

const char* to_string(Channel c) {
  switch (c) {
    case Channel::PPG: return "PPG";
    case Channel::ECG_LEAD_II: return "ECG_LEAD_II";
  }
  return "?";
}

const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::gaussian: return "gaussian";
    case NoiseKind::baseline_wander: return "baseline_wander";
    case NoiseKind::motion_burst: return "motion_burst";
    case NoiseKind::dropout: return "dropout";
    case NoiseKind::mixed: return "mixed";
  }
  return "?";
}

NoiseKind parse_noise_kind(const std::string& s) {
  for (auto k : {NoiseKind::none, NoiseKind::gaussian, NoiseKind::baseline_wander, NoiseKind::motion_burst,
                 NoiseKind::dropout, NoiseKind::mixed}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown noise kind '" + s + "'");
}

double WaveformRecord::missing_fraction() const {
  if (missing_mask.empty()) return 0.0;
  const auto missing = std::count(missing_mask.begin(), missing_mask.end(), true);
  return static_cast<double>(missing) / static_cast<double>(missing_mask.size());
}

void WaveformRecord::validate() const {
  if (!(sampling_rate_hz > 0.0) || !std::isfinite(sampling_rate_hz))
    throw ContractError("sampling_rate_hz must be positive and finite");
  if (samples.size() != missing_mask.size())
    throw ContractError("samples and missing_mask lengths differ: " + std::to_string(samples.size()) + " vs " +
                        std::to_string(missing_mask.size()));
}

void SyntheticSpec::validate() const {
  if (!(heart_rate_bpm > 20.0 && heart_rate_bpm < 300.0))
    throw ContractError("heart_rate_bpm must lie in (20, 300), got " + std::to_string(heart_rate_bpm));
  if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) throw ContractError("noise_level must be >= 0");
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) throw ContractError("duration_s must be positive");
  if (!(sampling_rate_hz > 0.0)) throw ContractError("sampling_rate_hz must be positive");
  if (!(rr_irregularity >= 0.0 && rr_irregularity <= 1.0)) throw ContractError("rr_irregularity must lie in [0, 1]");
  if (!(dicrotic_ratio >= 0.0 && dicrotic_ratio <= 2.0)) throw ContractError("dicrotic_ratio must lie in [0, 2]");
}

double ecg_template(double t) {
  return 0.12 * gauss(t, -0.20, 0.025)     // P
         - 0.10 * gauss(t, -0.035, 0.010)  // Q
         + 1.00 * gauss(t, 0.0, 0.012)     // R
         - 0.22 * gauss(t, 0.035, 0.010)   // S
         + 0.30 * gauss(t, 0.26, 0.045);   // T
}

double ppg_pulse(double t, double period_s, double dicrotic_ratio) {
  return gauss(t, 0.15 * period_s, 0.12 * period_s) + dicrotic_ratio * gauss(t, 0.40 * period_s, 0.12 * period_s);
}

std::vector<double> synthetic_beat_times(double heart_rate_bpm, double duration_s, double irregularity,
                                         std::uint64_t seed) {
  const double period = 60.0 / heart_rate_bpm;
  std::vector<double> beats;
  if (irregularity <= 0.0) {
    // Beats before t=0 contribute tails to the first samples.
    for (double t = kFirstBeat - 3.0 * period; t < duration_s + 2.0 * period; t += period) beats.push_back(t);
    return beats;
  }
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (double t = kFirstBeat - 3.0 * period; t < duration_s + 2.0 * period;) {
    beats.push_back(t);
    t += period * std::clamp(1.0 + irregularity * n01(rng), 0.4, 1.8);
  }
  return beats;
}

RecordPair generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const double fs = spec.sampling_rate_hz;
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * fs));
  const double period = 60.0 / spec.heart_rate_bpm;
  const auto beats = synthetic_beat_times(spec.heart_rate_bpm, spec.duration_s, spec.rr_irregularity, spec.seed);

  Wave w{std::vector<double>(n, kPpgDc), std::vector<double>(n, 0.0)};
  for (double beat : beats) {
    const auto lo = static_cast<std::ptrdiff_t>(std::floor((beat - 0.5) * fs));
    const auto hi = static_cast<std::ptrdiff_t>(std::ceil((beat + kPulseTransit + 2.0 * period) * fs));
    for (auto i = std::max<std::ptrdiff_t>(lo, 0); i < std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n));
         ++i) {
      const double t = static_cast<double>(i) / fs - beat;
      if (t < 0.6) w.ecg[static_cast<std::size_t>(i)] += kEcgScale * ecg_template(t);
      if (t >= kPulseTransit - period && t - kPulseTransit < 1.5 * period)
        w.ppg[static_cast<std::size_t>(i)] += kPpgAc * ppg_pulse(t - kPulseTransit, period, spec.dicrotic_ratio);
    }
  }

  std::mt19937_64 rng(spec.seed);
  std::vector<bool> ppg_mask(n, false), ecg_mask(n, false);
  switch (spec.noise_kind) {
    case NoiseKind::none: break;
    case NoiseKind::gaussian: add_gaussian(w, spec.noise_level, rng); break;
    case NoiseKind::baseline_wander: add_baseline_wander(w, spec.noise_level, fs, rng); break;
    case NoiseKind::motion_burst: add_motion_bursts(w, spec.noise_level, fs, rng); break;
    case NoiseKind::dropout:
      ppg_mask = make_dropout(n, spec.noise_level, fs, rng);
      ecg_mask = make_dropout(n, spec.noise_level, fs, rng);
      break;
    case NoiseKind::mixed: add_mixed(w, spec.noise_level, fs, rng); break;
  }

  auto to_record = [&](const std::vector<double>& x, std::vector<bool> mask, Channel ch) {
    WaveformRecord r;
    r.subject_id = spec.subject_id;
    r.channel = ch;
    r.sampling_rate_hz = fs;
    r.start_time_s = spec.start_time_s;
    r.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.samples[i] = mask[i] ? 0.0f : static_cast<float>(x[i]);
    r.missing_mask = std::move(mask);
    return r;
  };
  return {to_record(w.ppg, std::move(ppg_mask), Channel::PPG),
          to_record(w.ecg, std::move(ecg_mask), Channel::ECG_LEAD_II)};
}

std::vector<std::uint8_t> encode_corpus(const std::vector<WaveformRecord>& records) {
  io::ByteWriter w;
  w.magic(std::string_view(kCorpusMagic, 8));
  w.u32(kCorpusVersion);
  w.u64(records.size());
  for (const auto& r : records) {
    r.validate();
    w.str(r.subject_id);
    w.u8(static_cast<std::uint8_t>(r.channel));
    w.f64(r.sampling_rate_hz);
    w.f64(r.start_time_s);
    w.u64(r.samples.size());
    w.f32_array(r.samples);
    w.bits(r.missing_mask);
  }
  return w.data();
}

std::vector<WaveformRecord> decode_corpus(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kCorpusMagic, 8));
  const auto version = r.u32();
  if (version != kCorpusVersion) r.fail("unsupported corpus version " + std::to_string(version));
  const auto count = r.u64();
  std::vector<WaveformRecord> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    WaveformRecord rec;
    rec.subject_id = r.str();
    const auto tag = r.u8();
    if (tag > 1) r.fail("unknown channel tag " + std::to_string(tag));
    rec.channel = static_cast<Channel>(tag);
    rec.sampling_rate_hz = r.f64();
    if (!(rec.sampling_rate_hz > 0.0) || !std::isfinite(rec.sampling_rate_hz)) r.fail("invalid sampling rate");
    rec.start_time_s = r.f64();
    const auto len = r.u64();
    rec.samples = r.f32_array(len);
    rec.missing_mask = r.bits(len);
    out.push_back(std::move(rec));
  }
  if (!r.at_end()) r.fail("trailing bytes after last record");
  return out;
}

void write_corpus(const std::vector<WaveformRecord>& records, const std::string& path) {
  io::write_file(path, encode_corpus(records));
}

std::vector<WaveformRecord> read_corpus(const std::string& path) { return decode_corpus(io::read_file(path)); }

}  // namespace qfm
