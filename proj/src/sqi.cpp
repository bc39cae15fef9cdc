#include "qfm/sqi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

#include "qfm/errors.hpp"
#include "qfm/parallel.hpp"
#include "qfm/spectral.hpp"

namespace qfm {

namespace {

using spectral::Vector;

Vector<double> to_vector(std::span<const double> x) {
  return Eigen::Map<const Vector<double>>(x.data(), static_cast<Eigen::Index>(x.size()));
}

struct BinRange {
  Eigen::Index lo, hi;  // inclusive, DC excluded
};

BinRange bins_for(double f_lo, double f_hi, Eigen::Index n, double fs, Eigen::Index nbins) {
  const double per_bin = static_cast<double>(n) / fs;
  auto lo = static_cast<Eigen::Index>(std::ceil(f_lo * per_bin - 1e-9));
  auto hi = static_cast<Eigen::Index>(std::floor(f_hi * per_bin + 1e-9));
  lo = std::max<Eigen::Index>(lo, 1);
  hi = std::min<Eigen::Index>(hi, nbins - 1);
  return {lo, hi};
}

double band_sum(const Vector<double>& psd, BinRange r) {
  if (r.hi < r.lo) return 0.0;
  return psd.segment(r.lo, r.hi - r.lo + 1).sum();
}

double band_ratio(std::span<const double> x, double fs, double num_lo, double num_hi, double den_hi) {
  if (x.size() < 2) return 0.0;
  const auto psd = spectral::power_spectrum<double>(to_vector(x));
  const auto n = static_cast<Eigen::Index>(x.size());
  const double num = band_sum(psd, bins_for(num_lo, num_hi, n, fs, psd.size()));
  const double den = band_sum(psd, bins_for(0.0, den_hi, n, fs, psd.size()));
  if (!(den > 0.0) || !std::isfinite(den)) return 0.0;
  return std::clamp(num / den, 0.0, 1.0);
}

// Zeroes every bin outside [lo, hi] Hz and transforms back.
std::vector<double> fft_bandpass(std::span<const double> x, double fs, double lo, double hi) {
  const auto n = static_cast<Eigen::Index>(x.size());
  auto spec = spectral::dft<double>(to_vector(x));
  const auto r = bins_for(lo, hi, n, fs, spec.size());
  for (Eigen::Index k = 0; k < spec.size(); ++k)
    if (k < r.lo || k > r.hi) spec[k] = 0.0;
  const auto y = spectral::inverse_dft<double>(spec, n);
  return {y.data(), y.data() + y.size()};
}

double clamp01(double v) { return std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0; }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const auto lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + lower);
  }
  return m;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

const char* to_string(QualityLabel l) {
  switch (l) {
    case QualityLabel::Bad: return "Bad";
    case QualityLabel::Poor: return "Poor";
    case QualityLabel::Acceptable: return "Acceptable";
    case QualityLabel::Good: return "Good";
    case QualityLabel::Excellent: return "Excellent";
  }
  return "?";
}

QualityLabel parse_quality_label(const std::string& s) {
  for (int i = 0; i <= 4; ++i) {
    const auto l = static_cast<QualityLabel>(i);
    if (s == to_string(l)) return l;
  }
  throw ConfigError("unknown quality label '" + s + "'");
}

QualityLabel label_for(double sqi) {
  if (sqi >= 0.9) return QualityLabel::Excellent;
  if (sqi >= 0.7) return QualityLabel::Good;
  if (sqi >= 0.5) return QualityLabel::Acceptable;
  if (sqi >= 0.3) return QualityLabel::Poor;
  return QualityLabel::Bad;
}

double ppg_power_sqi(std::span<const double> x, const SqiConfig& c) {
  return band_ratio(x, c.fs, c.power_band_lo, c.power_band_hi, c.power_total_hi);
}

double ppg_relative_power_sqi(std::span<const double> x, const SqiConfig& c) {
  return band_ratio(x, c.fs, c.relative_band_lo, c.relative_band_hi, c.relative_total_hi);
}

double ppg_perfusion_sqi(std::span<const double> raw, const SqiConfig& c) {
  if (raw.size() < 2) return 0.0;
  const double mean = std::accumulate(raw.begin(), raw.end(), 0.0) / static_cast<double>(raw.size());
  if (!(std::abs(mean) > 1e-12)) return 0.0;
  const auto ac = fft_bandpass(raw, c.fs, c.perfusion_band_lo, c.perfusion_band_hi);
  const auto [lo, hi] = std::minmax_element(ac.begin(), ac.end());
  const double pi = (*hi - *lo) / std::abs(mean);
  return clamp01(pi / c.perfusion_ref);
}

double skewness(std::span<const double> x) {
  if (x.empty()) return 0.0;
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double m2 = 0.0, m3 = 0.0;
  for (double v : x) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  if (!(m2 > 1e-24 * (1.0 + mean * mean))) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

double ppg_skewness_sqi(std::span<const double> x, const SqiConfig& c) {
  if (x.empty()) return 0.0;
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double m2 = 0.0;
  for (double v : x) m2 += (v - mean) * (v - mean);
  if (!(m2 / n > 1e-24 * (1.0 + mean * mean))) return 0.0;
  const double g = skewness(x) - c.skewness_ref;
  return clamp01(std::exp(-0.5 * g * g));
}

double ppg_entropy_sqi(std::span<const double> x, const SqiConfig& c) {
  if (x.empty()) return 0.0;
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return 1.0;
  std::vector<double> counts(static_cast<std::size_t>(c.entropy_bins), 0.0);
  for (double v : x) {
    auto b = static_cast<int>((v - lo) / (hi - lo) * c.entropy_bins);
    counts[static_cast<std::size_t>(std::clamp(b, 0, c.entropy_bins - 1))] += 1.0;
  }
  double h = 0.0;
  for (double k : counts) {
    if (k <= 0.0) continue;
    const double p = k / static_cast<double>(x.size());
    h -= p * std::log(p);
  }
  return clamp01(1.0 - h / std::log(static_cast<double>(c.entropy_bins)));
}

double sample_entropy(std::span<const double> x, int m, double r) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t templates = n - m;
  if (templates < 2) return std::numeric_limits<double>::infinity();
  double b = 0.0, a = 0.0;
  for (std::ptrdiff_t i = 0; i < templates; ++i) {
    for (std::ptrdiff_t j = i + 1; j < templates; ++j) {
      bool match = true;
      for (int k = 0; k < m && match; ++k) match = std::abs(x[i + k] - x[j + k]) <= r;
      if (!match) continue;
      b += 1.0;
      if (std::abs(x[i + m] - x[j + m]) <= r) a += 1.0;
    }
  }
  if (a == 0.0 || b == 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(a / b);
}

double ecg_noise_sqi(std::span<const double> x, const SqiConfig& c) {
  const auto len = static_cast<std::size_t>(std::llround(c.ecg_subwindow_s * c.fs));
  if (len == 0 || x.size() < len) return 0.0;
  const auto windows = x.size() / len;
  std::vector<double> energy(windows);
  std::vector<bool> flagged(windows, false);
  for (std::size_t w = 0; w < windows; ++w) {
    const auto sub = x.subspan(w * len, len);
    const double mean = std::accumulate(sub.begin(), sub.end(), 0.0) / static_cast<double>(len);
    double e = 0.0;
    for (double v : sub) e += (v - mean) * (v - mean);
    energy[w] = e;
    std::vector<double> decimated;
    for (std::size_t i = 0; i < len; i += static_cast<std::size_t>(std::max(1, c.sampen_decimation)))
      decimated.push_back(sub[i]);
    const double sigma = std::sqrt(e / static_cast<double>(len));
    if (sample_entropy(decimated, c.sampen_m, c.sampen_r * sigma) > c.sampen_threshold) flagged[w] = true;
  }
  const double med = median(energy);
  std::vector<double> dev(windows);
  for (std::size_t w = 0; w < windows; ++w) dev[w] = std::abs(energy[w] - med);
  const double dispersion = std::max({1.4826 * median(dev), c.energy_dispersion_floor * med, 1e-12});
  for (std::size_t w = 0; w < windows; ++w)
    if ((energy[w] - med) / dispersion > c.energy_z_threshold) flagged[w] = true;
  const auto clean = std::count(flagged.begin(), flagged.end(), false);
  return static_cast<double>(clean) / static_cast<double>(windows);
}

std::vector<double> detect_beats(std::span<const double> ecg, double fs) {
  const auto n = ecg.size();
  if (n < static_cast<std::size_t>(fs)) return {};
  const auto filtered = fft_bandpass(ecg, fs, 5.0, 15.0);

  std::vector<double> energy(n, 0.0);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double d = (filtered[i + 1] - filtered[i - 1]) * 0.5 * fs;
    energy[i] = d * d;
  }
  const auto win = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.150 * fs)));
  std::vector<double> integrated(n, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += energy[i];
    if (i >= win) acc -= energy[i - win];
    integrated[i] = acc / static_cast<double>(win);
  }
  const double peak_max = *std::max_element(integrated.begin(), integrated.end());
  if (!(peak_max > 1e-12)) return {};

  // Signal/noise peak levels seeded from the first two seconds.
  const auto learn = std::min(n, static_cast<std::size_t>(2.0 * fs));
  double spk = 0.25 * *std::max_element(integrated.begin(), integrated.begin() + static_cast<std::ptrdiff_t>(learn));
  double npk = 0.5 * std::accumulate(integrated.begin(), integrated.begin() + static_cast<std::ptrdiff_t>(learn), 0.0) /
               static_cast<double>(learn);
  const auto refractory = static_cast<std::size_t>(0.2 * fs);

  std::vector<std::size_t> peaks;
  std::vector<double> heights;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (!(integrated[i] > integrated[i - 1] && integrated[i] >= integrated[i + 1])) continue;
    const double h = integrated[i];
    const double threshold = npk + 0.25 * (spk - npk);
    if (h <= threshold) {
      npk = 0.125 * h + 0.875 * npk;
      continue;
    }
    if (!peaks.empty() && i - peaks.back() < refractory) {
      if (h > heights.back()) {
        peaks.back() = i;
        heights.back() = h;
      }
      continue;
    }
    peaks.push_back(i);
    heights.push_back(h);
    spk = 0.125 * h + 0.875 * spk;
  }

  // Moving integration lags the QRS; locate the R peak on the band-passed trace.
  std::vector<double> beats;
  const auto back = win + static_cast<std::size_t>(0.05 * fs);
  for (auto p : peaks) {
    const auto lo = p > back ? p - back : 0;
    std::size_t best = lo;
    for (std::size_t i = lo; i <= p; ++i)
      if (filtered[i] > filtered[best]) best = i;
    const double t = static_cast<double>(best) / fs;
    if (beats.empty() || t - beats.back() > 1e-9) beats.push_back(t);
  }
  return beats;
}

std::vector<bool> beat_plausibility(std::span<const double> beats, const SqiConfig& c) {
  std::vector<bool> ok;
  if (beats.size() < 2) return ok;
  double prev_rr = 0.0;
  for (std::size_t i = 1; i < beats.size(); ++i) {
    const double rr = beats[i] - beats[i - 1];
    bool good = rr > 0.0;
    if (good) {
      const double hr = 60.0 / rr;
      good = hr >= c.hr_min_bpm && hr <= c.hr_max_bpm;
    }
    if (good && i >= 2 && prev_rr > 0.0) {
      const double ratio = rr / prev_rr;
      good = ratio >= c.rr_ratio_min && ratio <= c.rr_ratio_max;
    }
    ok.push_back(good);
    prev_rr = rr;
  }
  return ok;
}

double beat_plausibility_score(std::span<const double> beats, const SqiConfig& c) {
  const auto ok = beat_plausibility(beats, c);
  if (ok.empty()) return 0.0;
  return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

double ecg_beat_sqi(std::span<const double> x, const SqiConfig& c) {
  const auto beats = detect_beats(x, c.fs);
  return beat_plausibility_score(beats, c);
}

QualityAssessment assess(const Segment& segment, const SqiConfig& c) {
  auto row = [](const SegmentMatrix& m, int r) {
    std::vector<double> v(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.cols(); ++i) v[static_cast<std::size_t>(i)] = m(r, i);
    return v;
  };
  const auto ppg = row(segment.channels, 0);
  const auto ppg_raw = row(segment.raw, 0);
  const auto ecg = row(segment.channels, 1);

  QualityAssessment q;
  const std::array<std::pair<const char*, double>, 5> ppg_parts{{
      {"ppg_power", ppg_power_sqi(ppg, c)},
      {"ppg_perfusion", ppg_perfusion_sqi(ppg_raw, c)},
      {"ppg_skewness", ppg_skewness_sqi(ppg, c)},
      {"ppg_relative_power", ppg_relative_power_sqi(ppg, c)},
      {"ppg_entropy", ppg_entropy_sqi(ppg, c)},
  }};
  double wsum = 0.0;
  for (std::size_t i = 0; i < ppg_parts.size(); ++i) {
    q.component_scores[ppg_parts[i].first] = ppg_parts[i].second;
    q.sqi_ppg += c.ppg_component_weights[i] * ppg_parts[i].second;
    wsum += c.ppg_component_weights[i];
  }
  q.sqi_ppg = clamp01(wsum > 0.0 ? q.sqi_ppg / wsum : 0.0);

  const double noise = ecg_noise_sqi(ecg, c);
  const double beat = ecg_beat_sqi(ecg, c);
  q.component_scores["ecg_noise"] = noise;
  q.component_scores["ecg_beat"] = beat;
  q.sqi_ecg = clamp01(c.ecg_noise_weight * noise + (1.0 - c.ecg_noise_weight) * beat);
  q.sqi = clamp01(c.ppg_weight * q.sqi_ppg + (1.0 - c.ppg_weight) * q.sqi_ecg);
  q.label = label_for(q.sqi);
  return q;
}

std::vector<AssessedSegment> assess_all(const std::vector<Segment>& segments, const SqiConfig& config,
                                        int threads) {
  std::vector<AssessedSegment> out(segments.size());
  parallel_for(segments.size(), threads, [&](std::size_t i) {
    out[i] = {i, segments[i].subject_id, segments[i].t_start_s, assess(segments[i], config)};
  });
  return out;
}

std::vector<QualityPair> mine_pairs(const std::vector<AssessedSegment>& assessed, double max_gap_s) {
  std::vector<const AssessedSegment*> order;
  for (const auto& a : assessed) order.push_back(&a);
  std::stable_sort(order.begin(), order.end(), [](const AssessedSegment* a, const AssessedSegment* b) {
    return std::tie(a->subject_id, a->t_start_s) < std::tie(b->subject_id, b->t_start_s);
  });

  std::vector<QualityPair> pairs;
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto& a = *order[i];
      const auto& b = *order[j];
      if (b.subject_id != a.subject_id || b.t_start_s - a.t_start_s >= max_gap_s) break;
      if (a.quality.label == b.quality.label) continue;
      const bool a_high = a.quality.label > b.quality.label;
      const auto& hi = a_high ? a : b;
      const auto& lo = a_high ? b : a;
      pairs.push_back({hi.index, lo.index, a.subject_id, hi.t_start_s, lo.t_start_s, hi.quality.label,
                       lo.quality.label});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const QualityPair& x, const QualityPair& y) {
    return std::tie(x.subject_id, x.t_high, x.t_low) < std::tie(y.subject_id, y.t_high, y.t_low);
  });
  return pairs;
}

namespace {

const std::array<const char*, 7> kComponentOrder{"ppg_power", "ppg_perfusion", "ppg_skewness", "ppg_relative_power",
                                                 "ppg_entropy", "ecg_noise", "ecg_beat"};

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file for reading: " + path);
  return in;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, '\t')) fields.push_back(field);
  return fields;
}

double parse_double(const std::string& s, const std::string& path, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(path + ":" + std::to_string(line_no) + ": not a number '" + s + "'");
  }
}

}  // namespace

void write_manifest(const std::vector<AssessedSegment>& assessed, const std::string& source, const std::string& path) {
  auto out = open_out(path);
  out << "#source\t" << source << "\n";
  out << "index\tsubject\tt_start_s\tsqi_ppg\tsqi_ecg\tsqi\tlabel";
  for (auto* name : kComponentOrder) out << '\t' << name;
  out << '\n';
  for (const auto& a : assessed) {
    out << a.index << '\t' << a.subject_id << '\t' << format_double(a.t_start_s) << '\t'
        << format_double(a.quality.sqi_ppg) << '\t' << format_double(a.quality.sqi_ecg) << '\t'
        << format_double(a.quality.sqi) << '\t' << to_string(a.quality.label);
    for (auto* name : kComponentOrder) {
      const auto it = a.quality.component_scores.find(name);
      out << '\t' << format_double(it == a.quality.component_scores.end() ? 0.0 : it->second);
    }
    out << '\n';
  }
}

std::vector<AssessedSegment> read_manifest(const std::string& path, std::string* source) {
  auto in = open_in(path);
  std::string line;
  std::vector<AssessedSegment> out;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("#source\t", 0) == 0) {
      if (source) *source = line.substr(8);
      continue;
    }
    if (line.rfind("index\t", 0) == 0) continue;
    const auto f = split_tabs(line);
    if (f.size() != 7 + kComponentOrder.size())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(7 + kComponentOrder.size()) + " fields");
    AssessedSegment a;
    a.index = static_cast<std::size_t>(parse_double(f[0], path, line_no));
    a.subject_id = f[1];
    a.t_start_s = parse_double(f[2], path, line_no);
    a.quality.sqi_ppg = parse_double(f[3], path, line_no);
    a.quality.sqi_ecg = parse_double(f[4], path, line_no);
    a.quality.sqi = parse_double(f[5], path, line_no);
    a.quality.label = parse_quality_label(f[6]);
    for (std::size_t k = 0; k < kComponentOrder.size(); ++k)
      a.quality.component_scores[kComponentOrder[k]] = parse_double(f[7 + k], path, line_no);
    out.push_back(std::move(a));
  }
  return out;
}

void write_pairs(const std::vector<QualityPair>& pairs, const std::string& source, const std::string& path) {
  auto out = open_out(path);
  out << "#source\t" << source << "\n";
  out << "high\tlow\tsubject\tt_high\tt_low\tlabel_high\tlabel_low\n";
  for (const auto& p : pairs) {
    out << p.high << '\t' << p.low << '\t' << p.subject_id << '\t' << format_double(p.t_high) << '\t'
        << format_double(p.t_low) << '\t' << to_string(p.label_high) << '\t' << to_string(p.label_low) << '\n';
  }
}

std::vector<QualityPair> read_pairs(const std::string& path, std::string* source) {
  auto in = open_in(path);
  std::string line;
  std::vector<QualityPair> out;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("#source\t", 0) == 0) {
      if (source) *source = line.substr(8);
      continue;
    }
    if (line.rfind("high\t", 0) == 0) continue;
    const auto f = split_tabs(line);
    if (f.size() != 7) throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 7 fields");
    QualityPair p;
    p.high = static_cast<std::size_t>(parse_double(f[0], path, line_no));
    p.low = static_cast<std::size_t>(parse_double(f[1], path, line_no));
    p.subject_id = f[2];
    p.t_high = parse_double(f[3], path, line_no);
    p.t_low = parse_double(f[4], path, line_no);
    p.label_high = parse_quality_label(f[5]);
    p.label_low = parse_quality_label(f[6]);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace qfm
