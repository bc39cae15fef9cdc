#include "qfm/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "qfm/errors.hpp"

namespace qfm::config {

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::invalid_argument with a reason
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename Acc>
Field number(std::string key, Acc acc) {
  using T = std::remove_reference_t<decltype(acc(std::declval<RunConfig&>()))>;
  return {std::move(key), [acc](RunConfig& c, const std::string& v) { acc(c) = parse_number<T>(v); },
          [acc](const RunConfig& c) {
            const T v = acc(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>)
              return format_double(v);
            else
              return std::to_string(v);
          }};
}

template <typename Acc>
Field boolean(std::string key, Acc acc) {
  return {std::move(key), [acc](RunConfig& c, const std::string& v) { acc(c) = parse_bool(v); },
          [acc](const RunConfig& c) { return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define QFM_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(number("seed", QFM_REF(seed)));
    f.push_back(number("threads", QFM_REF(threads)));
    f.push_back({"precision",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "float" || v == "f32")
                     c.precision = Precision::f32;
                   else if (v == "double" || v == "f64")
                     c.precision = Precision::f64;
                   else
                     throw std::invalid_argument("expected float or double, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.precision == Precision::f32 ? "float" : "double"); }});

    f.push_back({"model.preset",
                 [](RunConfig& c, const std::string& v) {
                   c.model = model::ModelConfig::preset(v);
                   c.model_preset = v;
                 },
                 [](const RunConfig& c) { return c.model_preset; }});
    f.push_back(number("model.layers", QFM_REF(model.layers)));
    f.push_back(number("model.hidden", QFM_REF(model.hidden)));
    f.push_back(number("model.mlp", QFM_REF(model.mlp)));
    f.push_back(number("model.heads", QFM_REF(model.heads)));
    f.push_back(number("model.window", QFM_REF(model.window)));
    f.push_back(number("model.patch_len", QFM_REF(model.patch_len)));
    f.push_back(number("model.out_dim", QFM_REF(model.out_dim)));
    f.push_back(number("model.recon_hidden", QFM_REF(model.recon_hidden)));
    f.push_back(boolean("model.positional", QFM_REF(model.positional)));

    f.push_back(number("pretrain.tau_s", QFM_REF(pretrain.tau_s)));
    f.push_back(number("pretrain.tau_t", QFM_REF(pretrain.tau_t)));
    f.push_back(number("pretrain.lambda_amp", QFM_REF(pretrain.lambda_amp)));
    f.push_back(number("pretrain.lambda_pha", QFM_REF(pretrain.lambda_pha)));
    f.push_back(number("pretrain.lr", QFM_REF(pretrain.lr)));
    f.push_back(number("pretrain.min_lr", QFM_REF(pretrain.min_lr)));
    f.push_back(number("pretrain.warmup_steps", QFM_REF(pretrain.warmup_steps)));
    f.push_back(number("pretrain.weight_decay", QFM_REF(pretrain.weight_decay)));
    f.push_back(number("pretrain.beta1", QFM_REF(pretrain.beta1)));
    f.push_back(number("pretrain.beta2", QFM_REF(pretrain.beta2)));
    f.push_back(number("pretrain.adam_eps", QFM_REF(pretrain.adam_eps)));
    f.push_back(number("pretrain.batch_size", QFM_REF(pretrain.batch_size)));
    f.push_back(number("pretrain.epochs", QFM_REF(pretrain.epochs)));
    f.push_back(number("pretrain.max_steps", QFM_REF(pretrain.max_steps)));
    f.push_back(number("pretrain.ema_start", QFM_REF(pretrain.ema_start)));
    f.push_back(number("pretrain.ema_end", QFM_REF(pretrain.ema_end)));
    f.push_back(boolean("pretrain.center_teacher", QFM_REF(pretrain.center_teacher)));
    f.push_back(number("pretrain.center_momentum", QFM_REF(pretrain.center_momentum)));
    f.push_back({"pretrain.amplitude_scale",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "orthonormal")
                     c.pretrain.amplitude_scale = train::AmplitudeScale::orthonormal;
                   else if (v == "none")
                     c.pretrain.amplitude_scale = train::AmplitudeScale::none;
                   else
                     throw std::invalid_argument("expected orthonormal or none, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.pretrain.amplitude_scale == train::AmplitudeScale::orthonormal ? "orthonormal"
                                                                                                      : "none");
                 }});

    f.push_back(number("finetune.lr", QFM_REF(finetune.lr)));
    f.push_back(number("finetune.weight_decay", QFM_REF(finetune.weight_decay)));
    f.push_back(number("finetune.batch_size", QFM_REF(finetune.batch_size)));
    f.push_back(number("finetune.epochs", QFM_REF(finetune.epochs)));
    f.push_back(number("finetune.max_steps", QFM_REF(finetune.max_steps)));
    f.push_back(number("finetune.class_weight", QFM_REF(finetune.class_weight)));
    f.push_back(number("finetune.powerline_hz", QFM_REF(finetune.powerline_hz)));
    f.push_back(boolean("finetune.freeze_backbone", QFM_REF(finetune.freeze_backbone)));
    f.push_back(number("finetune.beta1", QFM_REF(finetune.beta1)));
    f.push_back(number("finetune.beta2", QFM_REF(finetune.beta2)));
    f.push_back(number("finetune.train_fraction", QFM_REF(finetune.train_fraction)));

    f.push_back(number("filter.min_duration_s", QFM_REF(filter.min_duration_s)));
    f.push_back(number("filter.max_missing_fraction", QFM_REF(filter.max_missing_fraction)));

    f.push_back(number("sqi.power_band_lo", QFM_REF(sqi.power_band_lo)));
    f.push_back(number("sqi.power_band_hi", QFM_REF(sqi.power_band_hi)));
    f.push_back(number("sqi.power_total_hi", QFM_REF(sqi.power_total_hi)));
    f.push_back(number("sqi.perfusion_band_lo", QFM_REF(sqi.perfusion_band_lo)));
    f.push_back(number("sqi.perfusion_band_hi", QFM_REF(sqi.perfusion_band_hi)));
    f.push_back(number("sqi.perfusion_ref", QFM_REF(sqi.perfusion_ref)));
    f.push_back(number("sqi.skewness_ref", QFM_REF(sqi.skewness_ref)));
    f.push_back(number("sqi.relative_band_lo", QFM_REF(sqi.relative_band_lo)));
    f.push_back(number("sqi.relative_band_hi", QFM_REF(sqi.relative_band_hi)));
    f.push_back(number("sqi.relative_total_hi", QFM_REF(sqi.relative_total_hi)));
    f.push_back(number("sqi.entropy_bins", QFM_REF(sqi.entropy_bins)));
    f.push_back(number("sqi.ecg_subwindow_s", QFM_REF(sqi.ecg_subwindow_s)));
    f.push_back(number("sqi.energy_z_threshold", QFM_REF(sqi.energy_z_threshold)));
    f.push_back(number("sqi.energy_dispersion_floor", QFM_REF(sqi.energy_dispersion_floor)));
    f.push_back(number("sqi.sampen_m", QFM_REF(sqi.sampen_m)));
    f.push_back(number("sqi.sampen_r", QFM_REF(sqi.sampen_r)));
    f.push_back(number("sqi.sampen_threshold", QFM_REF(sqi.sampen_threshold)));
    f.push_back(number("sqi.sampen_decimation", QFM_REF(sqi.sampen_decimation)));
    f.push_back(number("sqi.hr_min_bpm", QFM_REF(sqi.hr_min_bpm)));
    f.push_back(number("sqi.hr_max_bpm", QFM_REF(sqi.hr_max_bpm)));
    f.push_back(number("sqi.rr_ratio_min", QFM_REF(sqi.rr_ratio_min)));
    f.push_back(number("sqi.rr_ratio_max", QFM_REF(sqi.rr_ratio_max)));
    f.push_back(number("sqi.ppg_weight", QFM_REF(sqi.ppg_weight)));
    f.push_back(number("sqi.ecg_noise_weight", QFM_REF(sqi.ecg_noise_weight)));
    f.push_back({"sqi.ppg_component_weights",
                 [](RunConfig& c, const std::string& v) {
                   std::array<double, 5> w{};
                   std::stringstream ss(v);
                   std::string item;
                   std::size_t n = 0;
                   while (std::getline(ss, item, ',')) {
                     if (n == w.size()) throw std::invalid_argument("expected 5 comma-separated weights");
                     w[n++] = parse_number<double>(trim(item));
                   }
                   if (n != w.size()) throw std::invalid_argument("expected 5 comma-separated weights");
                   c.sqi.ppg_component_weights = w;
                 },
                 [](const RunConfig& c) {
                   std::string out;
                   for (double w : c.sqi.ppg_component_weights) out += (out.empty() ? "" : ",") + format_double(w);
                   return out;
                 }});
    f.push_back(number("pairs.max_gap_s", QFM_REF(pair_max_gap_s)));

    f.push_back(number("probe.iterations", QFM_REF(probe.iterations)));
    f.push_back(number("probe.lr", QFM_REF(probe.lr)));
    f.push_back(number("probe.l2", QFM_REF(probe.l2)));

    f.push_back(number("ablate.steps", QFM_REF(ablate.steps)));
    f.push_back(number("ablate.pairs", QFM_REF(ablate.pairs)));
    f.push_back(number("ablate.seeds", QFM_REF(ablate.seeds)));
    f.push_back(number("ablate.subjects", QFM_REF(ablate.subjects)));
    f.push_back(number("ablate.minutes", QFM_REF(ablate.minutes)));
    f.push_back(number("ablate.probe_subjects", QFM_REF(ablate.probe_subjects)));
    f.push_back(number("ablate.probe_train_subjects", QFM_REF(ablate.probe_train_subjects)));
    f.push_back(number("ablate.noise_level", QFM_REF(ablate.noise_level)));
    f.push_back(number("ablate.batch_size", QFM_REF(ablate.batch_size)));
    f.push_back(number("ablate.lr", QFM_REF(ablate.lr)));
    return f;
  }();
  return table;
}

#undef QFM_REF

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

void parse_into(const std::string& text, const std::string& origin, std::vector<Entry>& out,
                std::vector<std::string>& stack) {
  namespace fs = std::filesystem;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto where = origin + ":" + std::to_string(line_no);
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty() || section.find_first_of(" \t.=") != std::string::npos)
        throw ConfigError(where + ": invalid section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (key == "include") {
      if (value.empty()) throw ConfigError(where + ": include needs a path");
      fs::path target(value);
      if (target.is_relative()) target = fs::path(origin).parent_path() / target;
      const std::string path = target.lexically_normal().string();
      for (const auto& s : stack)
        if (s == path) throw ConfigError(where + ": include cycle through '" + path + "'");
      std::ifstream f(path);
      if (!f) throw ConfigError(where + ": cannot open included file '" + path + "'");
      std::stringstream buf;
      buf << f.rdbuf();
      stack.push_back(path);
      parse_into(buf.str(), path, out, stack);
      stack.pop_back();
      continue;
    }
    out.push_back({section.empty() ? key : section + "." + key, value, origin, line_no});
  }
}

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  model.validate();
  pretrain.validate();
  finetune.validate();
  if (!(filter.min_duration_s >= 0.0)) throw ConfigError("filter: min_duration_s must be >= 0");
  if (!(filter.max_missing_fraction >= 0.0 && filter.max_missing_fraction <= 1.0))
    throw ConfigError("filter: max_missing_fraction must be in [0, 1]");
  if (!(sqi.ppg_weight >= 0.0 && sqi.ppg_weight <= 1.0)) throw ConfigError("sqi: ppg_weight must be in [0, 1]");
  if (!(sqi.ecg_noise_weight >= 0.0 && sqi.ecg_noise_weight <= 1.0))
    throw ConfigError("sqi: ecg_noise_weight must be in [0, 1]");
  double wsum = 0.0;
  for (double w : sqi.ppg_component_weights) {
    if (w < 0.0) throw ConfigError("sqi: ppg_component_weights must be >= 0");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("sqi: ppg_component_weights must sum to 1");
  if (sqi.entropy_bins < 2) throw ConfigError("sqi: entropy_bins must be >= 2");
  if (sqi.sampen_m < 1 || sqi.sampen_decimation < 1) throw ConfigError("sqi: sampen_m and sampen_decimation must be >= 1");
  if (!(pair_max_gap_s > 0.0)) throw ConfigError("pairs: max_gap_s must be > 0");
  if (probe.iterations < 1 || !(probe.lr > 0.0) || probe.l2 < 0.0) throw ConfigError("probe: invalid settings");
  if (ablate.steps < 1 || ablate.pairs < 1 || ablate.seeds < 1 || ablate.batch_size < 1)
    throw ConfigError("ablate: steps, pairs, seeds and batch_size must be >= 1");
  if (ablate.probe_train_subjects < 1 || ablate.probe_train_subjects >= ablate.probe_subjects)
    throw ConfigError("ablate: need 1 <= probe_train_subjects < probe_subjects");
}

std::vector<Entry> parse_text(const std::string& text, const std::string& origin) {
  std::vector<Entry> out;
  std::vector<std::string> stack{origin};
  parse_into(text, origin, out, stack);
  return out;
}

std::vector<Entry> parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_text(buf.str(), std::filesystem::path(path).lexically_normal().string());
}

void apply(RunConfig& cfg, const std::vector<Entry>& entries) {
  auto set = [&](const Entry& e) {
    const Field* f = find_field(e.key);
    if (!f) throw ConfigError(e.where() + ": unknown key '" + e.key + "'");
    try {
      f->set(cfg, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(e.where() + ": " + e.key + ": " + err.what());
    } catch (const std::invalid_argument& err) {
      throw ConfigError(e.where() + ": " + e.key + ": " + err.what());
    }
  };
  // Entries apply in order; a preset replaces every model field, so keys after it refine it.
  for (const auto& e : entries) set(e);
}

std::vector<Entry> parse_overrides(const std::vector<std::string>& assignments) {
  std::vector<Entry> out;
  int n = 0;
  for (const auto& a : assignments) {
    ++n;
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("<override>:" + std::to_string(n) + ": expected key=value, got '" + a + "'");
    out.push_back({trim(a.substr(0, eq)), trim(a.substr(eq + 1)), "<override>", n});
  }
  return out;
}

RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  std::vector<Entry> entries;
  if (!path.empty()) entries = parse_file(path);
  const auto extra = parse_overrides(overrides);
  entries.insert(entries.end(), extra.begin(), extra.end());
  config::apply(cfg, entries);
  cfg.pretrain.seed = cfg.seed;
  cfg.pretrain.threads = cfg.threads;
  cfg.finetune.seed = cfg.seed;
  cfg.finetune.threads = cfg.threads;
  cfg.validate();
  return cfg;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace qfm::config
