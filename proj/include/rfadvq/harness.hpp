#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "rfadvq/attacks.hpp"
#include "rfadvq/classifier.hpp"
#include "rfadvq/io/checkpoint.hpp"
#include "rfadvq/io/dataset_io.hpp"
#include "rfadvq/metrics.hpp"
#include "rfadvq/parallel.hpp"
#include "rfadvq/vqvae.hpp"
#include "rfadvq/waveforms.hpp"

namespace rfadvq {

enum class Stage : std::uint8_t { Generate = 1, TrainClassifier, TrainVQVAE, Attack, Evaluate, Report };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Generate: return "generate";
    case Stage::TrainClassifier: return "train-classifier";
    case Stage::TrainVQVAE: return "train-vqvae";
    case Stage::Attack: return "attack";
    case Stage::Evaluate: return "evaluate";
    case Stage::Report: return "report";
  }
  return "?";
}

struct ExperimentConfig {
  DatasetSpec dataset{};
  TrainHyper classifier{};
  VQVAEHyper vqvae{};
  std::vector<AttackKind> attacks{AttackKind::FGSM1, AttackKind::FGSM2, AttackKind::PGD};
  std::vector<double> epsilons{0.01, 0.06, 0.1, 0.2, 0.3};
  std::size_t pgd_steps = 10;
  double pgd_step_size = 0.0;  // 0 selects epsilon / 4
  bool phase_preserving_pgd = false;
  QuantMode eval_quantization = QuantMode::Stochastic;
  std::size_t eval_trials = 8;
  std::size_t distance_trials = 32;
  std::size_t triplet_index = 0;  // per-class test datapoint dumped as I/Q triplets
  std::filesystem::path output_dir = "rf-advq-out";
  std::uint64_t master_seed = 1;
  bool reuse_artifacts = true;
  std::size_t threads = 0;  // 0 = all cores

  // Seeds of the individual stages; every stage can be rerun on its own.
  std::uint64_t stage_seed(Stage s) const {
    return derive_seed(master_seed, 0x57A6E, static_cast<std::uint64_t>(s));
  }

  // Copy with the stage seeds filled in from master_seed.
  ExperimentConfig resolved() const {
    ExperimentConfig c = *this;
    c.dataset.seed = stage_seed(Stage::Generate);
    c.classifier.seed = stage_seed(Stage::TrainClassifier);
    c.vqvae.seed = stage_seed(Stage::TrainVQVAE);
    return c;
  }

  std::size_t reconstruction_trials() const {
    return eval_quantization == QuantMode::Stochastic ? eval_trials : 1;
  }

  AttackSpec attack_spec(AttackKind kind, double eps) const {
    AttackSpec s;
    s.kind = kind;
    s.epsilon = eps;
    s.pgd_steps = pgd_steps;
    s.pgd_step_size = pgd_step_size;
    s.phase_preserving_pgd = phase_preserving_pgd;
    s.seed = stage_seed(Stage::Attack);
    return s;
  }

  void validate() const {
    dataset.validate();
    classifier.validate();
    vqvae.validate();
    if (attacks.empty()) throw InvalidArgument("attack list is empty");
    if (epsilons.empty()) throw InvalidArgument("epsilon grid is empty");
    for (double e : epsilons) {
      if (!(e >= 0.0) || !std::isfinite(e)) throw InvalidArgument("epsilon values must be >= 0");
    }
    if (pgd_steps == 0) throw InvalidArgument("pgd_steps must be >= 1");
    if (pgd_step_size < 0.0) throw InvalidArgument("pgd_step_size must be >= 0");
    if (eval_trials == 0) throw InvalidArgument("evaluation trials must be >= 1");
    if (distance_trials < 2) throw InvalidArgument("distance trials must be >= 2");
    if (triplet_index >= dataset.per_class_count - dataset.train_per_class()) {
      throw InvalidArgument("triplet_index exceeds the per-class test count");
    }
  }
};

namespace detail {

using boost::property_tree::ptree;

template <typename T>
std::string fmt_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", double(v));
    return buf;
  } else {
    return std::to_string(v);
  }
}

inline bool parse_bool(const std::string& key, std::string v) {
  boost::algorithm::to_lower(v);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw InvalidArgument("config " + key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_value(const std::string& key, const std::string& raw) {
  const std::string v = boost::algorithm::trim_copy(raw);
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_same_v<T, bool>) {
      return parse_bool(key, v);
    } else if constexpr (std::is_floating_point_v<T>) {
      out = T(std::stod(v, &used));
    } else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = T(std::stoull(v, &used, 0));
    }
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::logic_error&) {
    throw InvalidArgument("config " + key + ": cannot parse '" + v + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, v, boost::algorithm::is_any_of(", "),
                          boost::algorithm::token_compress_on);
  std::erase_if(parts, [](const std::string& s) { return s.empty(); });
  return parts;
}

// Binds "section.key" names to config fields in both directions.
class ConfigBinder {
 public:
  template <typename T>
  void bind(const std::string& key, T& field) {
    set_[key] = [&field, key](const std::string& v) { field = parse_value<T>(key, v); };
    get_[key] = [&field] { return fmt_value(field); };
    order_.push_back(key);
  }
  void bind_custom(const std::string& key, std::function<void(const std::string&)> set,
                   std::function<std::string()> get) {
    set_[key] = std::move(set);
    get_[key] = std::move(get);
    order_.push_back(key);
  }

  void set(const std::string& key, const std::string& value) {
    auto it = set_.find(key);
    if (it == set_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    it->second(value);
  }

  void load(const ptree& pt) {
    for (const auto& [section, body] : pt) {
      if (body.empty()) throw InvalidArgument("config key '" + section + "' is outside a section");
      for (const auto& [name, leaf] : body) set(section + "." + name, leaf.data());
    }
  }

  ptree dump() const {
    ptree pt;
    for (const auto& key : order_) pt.put(ptree::path_type(key, '.'), get_.at(key)());
    return pt;
  }

 private:
  std::map<std::string, std::function<void(const std::string&)>> set_;
  std::map<std::string, std::function<std::string()>> get_;
  std::vector<std::string> order_;
};

inline void bind_config(ConfigBinder& b, ExperimentConfig& c) {
  b.bind("experiment.master_seed", c.master_seed);
  b.bind_custom(
      "experiment.output_dir", [&c](const std::string& v) { c.output_dir = boost::algorithm::trim_copy(v); },
      [&c] { return c.output_dir.string(); });
  b.bind("experiment.reuse_artifacts", c.reuse_artifacts);
  b.bind("experiment.threads", c.threads);

  b.bind("dataset.per_class_count", c.dataset.per_class_count);
  b.bind_custom(
      "dataset.train_fraction",
      [&c](const std::string& v) {
        c.dataset.train_fraction = parse_value<double>("dataset.train_fraction", v);
        c.dataset.test_fraction = 1.0 - c.dataset.train_fraction;
      },
      [&c] { return fmt_value(c.dataset.train_fraction); });
  b.bind("dataset.rrc_rolloff", c.dataset.modulator.rrc_rolloff);
  b.bind("dataset.ofdm_cyclic_prefix", c.dataset.modulator.ofdm_cyclic_prefix);

  b.bind("classifier.epochs", c.classifier.epochs);
  b.bind("classifier.batch_size", c.classifier.batch_size);
  b.bind("classifier.learning_rate", c.classifier.learning_rate);
  b.bind("classifier.cosine_schedule", c.classifier.cosine_schedule);
  b.bind("classifier.validation_fraction", c.classifier.validation_fraction);
  b.bind("classifier.target_accuracy", c.classifier.target_accuracy);
  b.bind("classifier.augment", c.classifier.augment);

  b.bind("vqvae.epochs", c.vqvae.epochs);
  b.bind("vqvae.batch_size", c.vqvae.batch_size);
  b.bind("vqvae.learning_rate", c.vqvae.learning_rate);
  b.bind("vqvae.beta", c.vqvae.beta);
  b.bind("vqvae.codebook_size", c.vqvae.codebook_size);
  b.bind("vqvae.reset_fraction", c.vqvae.reset_fraction);
  b.bind("vqvae.encoder_output_gain", c.vqvae.encoder_output_gain);
  b.bind_custom(
      "vqvae.channels",
      [&c](const std::string& v) {
        const auto parts = split_list(v);
        if (parts.size() != 2) throw InvalidArgument("vqvae.channels needs two widths");
        for (std::size_t i = 0; i < 2; ++i) c.vqvae.channels[i] = parse_value<std::size_t>("vqvae.channels", parts[i]);
      },
      [&c] { return fmt_value(c.vqvae.channels[0]) + ", " + fmt_value(c.vqvae.channels[1]); });

  b.bind_custom(
      "attacks.kinds",
      [&c](const std::string& v) {
        c.attacks.clear();
        for (const auto& s : split_list(v)) c.attacks.push_back(parse_attack_kind(s));
      },
      [&c] {
        std::vector<std::string> s;
        for (auto k : c.attacks) s.emplace_back(to_string(k));
        return boost::algorithm::join(s, ", ");
      });
  b.bind_custom(
      "attacks.epsilons",
      [&c](const std::string& v) {
        c.epsilons.clear();
        for (const auto& s : split_list(v)) c.epsilons.push_back(parse_value<double>("attacks.epsilons", s));
      },
      [&c] {
        std::vector<std::string> s;
        for (double e : c.epsilons) s.push_back(fmt_value(e));
        return boost::algorithm::join(s, ", ");
      });
  b.bind("attacks.pgd_steps", c.pgd_steps);
  b.bind("attacks.pgd_step_size", c.pgd_step_size);
  b.bind("attacks.phase_preserving_pgd", c.phase_preserving_pgd);

  b.bind_custom(
      "evaluation.quantization",
      [&c](const std::string& v) { c.eval_quantization = parse_quant_mode(boost::algorithm::trim_copy(v)); },
      [&c] { return std::string(to_string(c.eval_quantization)); });
  b.bind("evaluation.trials", c.eval_trials);
  b.bind("evaluation.distance_trials", c.distance_trials);
  b.bind("evaluation.triplet_index", c.triplet_index);
}

}  // namespace detail

// Applies "section.key=value" overrides on top of cfg.
inline void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  detail::ConfigBinder b;
  detail::bind_config(b, cfg);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw InvalidArgument("override '" + o + "' is not key=value");
    b.set(boost::algorithm::trim_copy(o.substr(0, eq)), o.substr(eq + 1));
  }
}

inline ExperimentConfig parse_config(std::istream& is, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  detail::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  detail::ConfigBinder b;
  detail::bind_config(b, cfg);
  b.load(pt);
  apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open config " + path.string());
  return parse_config(is, overrides);
}

inline std::string to_ini(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  detail::ConfigBinder b;
  detail::bind_config(b, copy);
  std::ostringstream os;
  boost::property_tree::ini_parser::write_ini(os, b.dump());
  return os.str();
}

// ---------------------------------------------------------------- report

struct IQTriplet {
  std::size_t label = 0;
  AttackSpec spec;
  std::size_t index = 0;  // position in the test set
  IQDatapoint x, x_a, x_hat;
};

struct AttackEvaluation {
  AttackSpec spec;
  double snr_a_db = 0.0;
  double max_linf = 0.0;
  double accuracy_original = 0.0;
  double accuracy_attacked = 0.0;
  double accuracy_reconstructed = 0.0;  // averaged over reconstruction trials
  ConfusionMatrix confusion_original, confusion_attacked, confusion_reconstructed;
  std::array<LatentDistanceReport, kNumClasses> distances{};
  std::array<CodewordHistogram, kNumClasses> histograms{};
};

struct EvalReport {
  std::uint64_t master_seed = 0;
  std::string quantization;
  std::size_t reconstruction_trials = 0;
  std::size_t distance_trials = 0;
  double data_std = 0.0;
  std::size_t test_count = 0;
  double accuracy_clean = 0.0;
  double accuracy_clean_reconstructed = 0.0;
  ConfusionMatrix confusion_clean, confusion_clean_reconstructed;
  std::array<LatentDistanceReport, kNumClasses> self_distances{};  // (x, x)
  std::array<CodewordHistogram, kNumClasses> clean_histograms{};
  std::vector<AttackEvaluation> attacks;
  std::vector<IQTriplet> triplets;

  const AttackEvaluation& find(AttackKind kind, double eps) const {
    for (const auto& a : attacks) {
      if (a.spec.kind == kind && a.spec.epsilon == eps) return a;
    }
    throw InvalidArgument(std::string("report has no row for ") + to_string(kind) + " at eps " +
                          detail::fmt_value(eps));
  }
};

namespace detail {

inline std::string eps_tag(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", eps);
  return buf;
}

inline std::string population_tag(const AttackSpec& s) {
  return std::string(to_string(s.kind)) + "_eps" + eps_tag(s.epsilon);
}

inline nlohmann::json per_class_json(const std::array<LatentDistanceReport, kNumClasses>& d) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) j[std::string(scheme_name(kAllSchemes[c]))] = to_json(d[c]);
  return j;
}

inline nlohmann::json per_class_json(const std::array<CodewordHistogram, kNumClasses>& h) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    j[std::string(scheme_name(kAllSchemes[c]))] = {{"counts", h[c].counts},
                                                   {"datapoints", h[c].datapoints},
                                                   {"support", h[c].support_size()}};
  }
  return j;
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  ConfusionMatrix m;
  if (!j.is_array() || j.size() != kNumClasses) throw FormatError("report: bad confusion matrix");
  for (std::size_t a = 0; a < kNumClasses; ++a) {
    if (j[a].size() != kNumClasses) throw FormatError("report: bad confusion matrix");
    for (std::size_t b = 0; b < kNumClasses; ++b) m.counts[a][b] = j[a][b].get<std::uint64_t>();
  }
  return m;
}

inline std::optional<double> opt_double(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline LatentDistanceReport distance_from_json(const nlohmann::json& j) {
  LatentDistanceReport r;
  r.raw_hamming = j.at("raw_hamming").get<double>();
  r.raw_set = j.at("raw_set").get<double>();
  r.raw_set_one_sided = j.at("raw_set_one_sided").get<double>();
  r.baseline_hamming = j.at("baseline_hamming").get<double>();
  r.baseline_set = j.at("baseline_set").get<double>();
  r.baseline_set_one_sided = j.at("baseline_set_one_sided").get<double>();
  r.normalized_hamming = opt_double(j.at("normalized_hamming"));
  r.normalized_set = opt_double(j.at("normalized_set"));
  r.normalized_set_one_sided = opt_double(j.at("normalized_set_one_sided"));
  r.sigma_hamming = j.at("sigma_hamming").get<double>();
  r.sigma_set = j.at("sigma_set").get<double>();
  r.trials = j.at("trials").get<std::size_t>();
  r.datapoints = j.at("datapoints").get<std::size_t>();
  return r;
}

template <typename F>
auto per_class_from_json(const nlohmann::json& j, F&& f) {
  std::array<std::invoke_result_t<F, const nlohmann::json&, std::size_t>, kNumClasses> out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) out[c] = f(j.at(std::string(scheme_name(kAllSchemes[c]))), c);
  return out;
}

inline CodewordHistogram histogram_from_json(const nlohmann::json& j, std::string population) {
  CodewordHistogram h;
  h.counts = j.at("counts").get<std::vector<std::uint64_t>>();
  h.datapoints = j.at("datapoints").get<std::size_t>();
  h.population = std::move(population);
  return h;
}

inline AttackSpec attack_spec_from_json(const nlohmann::json& j) {
  AttackSpec s;
  s.kind = parse_attack_kind(j.at("kind").get<std::string>());
  s.epsilon = j.at("epsilon").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  if (s.kind == AttackKind::PGD) {
    s.pgd_steps = j.at("steps").get<std::size_t>();
    s.pgd_step_size = j.at("step_size").get<double>();
    s.phase_preserving_pgd = j.at("phase_preserving").get<bool>();
  }
  return s;
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& a : r.attacks) {
    rows.push_back({{"attack", to_json(a.spec)},
                    {"snr_a_db", a.snr_a_db},
                    {"max_linf", a.max_linf},
                    {"accuracy", {{"original", a.accuracy_original},
                                  {"attacked", a.accuracy_attacked},
                                  {"reconstructed", a.accuracy_reconstructed}}},
                    {"confusion", {{"original", to_json(a.confusion_original)},
                                   {"attacked", to_json(a.confusion_attacked)},
                                   {"reconstructed", to_json(a.confusion_reconstructed)}}},
                    {"distances", detail::per_class_json(a.distances)},
                    {"histograms", detail::per_class_json(a.histograms)}});
  }
  nlohmann::json triplets = nlohmann::json::array();
  for (const auto& t : r.triplets) {
    triplets.push_back({{"class", scheme_name(kAllSchemes[t.label])},
                        {"attack", to_json(t.spec)},
                        {"index", t.index}});
  }
  return {{"format", "rf-advq-report"},
          {"version", 1},
          {"master_seed", r.master_seed},
          {"quantization", r.quantization},
          {"reconstruction_trials", r.reconstruction_trials},
          {"distance_trials", r.distance_trials},
          {"data_std", r.data_std},
          {"test_count", r.test_count},
          {"clean", {{"accuracy", r.accuracy_clean},
                     {"confusion", to_json(r.confusion_clean)},
                     {"reconstructed_accuracy", r.accuracy_clean_reconstructed},
                     {"reconstructed_confusion", to_json(r.confusion_clean_reconstructed)},
                     {"self_distances", detail::per_class_json(r.self_distances)},
                     {"histograms", detail::per_class_json(r.clean_histograms)}}},
          {"attacks", rows},
          {"triplets", triplets}};
}

// Inverse of to_json; the triplet waveforms are stored separately.
inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "rf-advq-report") throw FormatError("not an rf-advq report");
    if (j.at("version").get<int>() != 1) throw UnsupportedVersion("report version is not 1");
    EvalReport r;
    r.master_seed = j.at("master_seed").get<std::uint64_t>();
    r.quantization = j.at("quantization").get<std::string>();
    r.reconstruction_trials = j.at("reconstruction_trials").get<std::size_t>();
    r.distance_trials = j.at("distance_trials").get<std::size_t>();
    r.data_std = j.at("data_std").get<double>();
    r.test_count = j.at("test_count").get<std::size_t>();
    const auto& c = j.at("clean");
    r.accuracy_clean = c.at("accuracy").get<double>();
    r.confusion_clean = detail::confusion_from_json(c.at("confusion"));
    r.accuracy_clean_reconstructed = c.at("reconstructed_accuracy").get<double>();
    r.confusion_clean_reconstructed = detail::confusion_from_json(c.at("reconstructed_confusion"));
    auto dist = [](const nlohmann::json& v, std::size_t) { return detail::distance_from_json(v); };
    r.self_distances = detail::per_class_from_json(c.at("self_distances"), dist);
    r.clean_histograms = detail::per_class_from_json(c.at("histograms"), [](const nlohmann::json& v, std::size_t k) {
      return detail::histogram_from_json(v, "clean/" + std::string(scheme_name(kAllSchemes[k])));
    });
    for (const auto& row : j.at("attacks")) {
      AttackEvaluation a;
      a.spec = detail::attack_spec_from_json(row.at("attack"));
      a.snr_a_db = row.at("snr_a_db").get<double>();
      a.max_linf = row.at("max_linf").get<double>();
      a.accuracy_original = row.at("accuracy").at("original").get<double>();
      a.accuracy_attacked = row.at("accuracy").at("attacked").get<double>();
      a.accuracy_reconstructed = row.at("accuracy").at("reconstructed").get<double>();
      a.confusion_original = detail::confusion_from_json(row.at("confusion").at("original"));
      a.confusion_attacked = detail::confusion_from_json(row.at("confusion").at("attacked"));
      a.confusion_reconstructed = detail::confusion_from_json(row.at("confusion").at("reconstructed"));
      a.distances = detail::per_class_from_json(row.at("distances"), dist);
      const std::string tag = detail::population_tag(a.spec);
      a.histograms = detail::per_class_from_json(row.at("histograms"), [&](const nlohmann::json& v, std::size_t k) {
        return detail::histogram_from_json(v, tag + "/" + std::string(scheme_name(kAllSchemes[k])));
      });
      r.attacks.push_back(std::move(a));
    }
    for (const auto& t : j.at("triplets")) {
      IQTriplet tr;
      tr.label = class_label(parse_scheme(t.at("class").get<std::string>()));
      tr.spec = detail::attack_spec_from_json(t.at("attack"));
      tr.index = t.at("index").get<std::size_t>();
      r.triplets.push_back(std::move(tr));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

// CSV with one row per class x attack x epsilon.
inline std::string distances_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "class,attack,epsilon,snr_a_db,raw_hamming,baseline_hamming,normalized_hamming,"
        "sigma_hamming,raw_set,baseline_set,normalized_set,sigma_set,raw_set_one_sided,"
        "normalized_set_one_sided,trials,datapoints\n";
  auto opt = [](const std::optional<double>& v) { return v ? detail::fmt_value(*v) : std::string(); };
  for (const auto& a : r.attacks) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto& d = a.distances[c];
      os << scheme_name(kAllSchemes[c]) << ',' << to_string(a.spec.kind) << ','
         << detail::fmt_value(a.spec.epsilon) << ',' << detail::fmt_value(a.snr_a_db) << ','
         << detail::fmt_value(d.raw_hamming) << ',' << detail::fmt_value(d.baseline_hamming) << ','
         << opt(d.normalized_hamming) << ',' << detail::fmt_value(d.sigma_hamming) << ','
         << detail::fmt_value(d.raw_set) << ',' << detail::fmt_value(d.baseline_set) << ','
         << opt(d.normalized_set) << ',' << detail::fmt_value(d.sigma_set) << ','
         << detail::fmt_value(d.raw_set_one_sided) << ',' << opt(d.normalized_set_one_sided) << ','
         << d.trials << ',' << d.datapoints << '\n';
    }
  }
  return os.str();
}

// Long format: attack, variant (original/attacked/reconstructed), epsilon.
inline std::string accuracy_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "attack,variant,epsilon,snr_a_db,accuracy\n";
  std::vector<AttackKind> kinds;
  for (const auto& a : r.attacks) {
    if (std::find(kinds.begin(), kinds.end(), a.spec.kind) == kinds.end()) kinds.push_back(a.spec.kind);
  }
  for (auto k : kinds) {
    for (const char* variant : {"original", "attacked", "reconstructed"}) {
      for (const auto& a : r.attacks) {
        if (a.spec.kind != k) continue;
        const double acc = variant[0] == 'o'   ? a.accuracy_original
                           : variant[0] == 'a' ? a.accuracy_attacked
                                               : a.accuracy_reconstructed;
        os << to_string(k) << ',' << variant << ',' << detail::fmt_value(a.spec.epsilon) << ','
           << detail::fmt_value(a.snr_a_db) << ',' << detail::fmt_value(acc) << '\n';
      }
    }
  }
  return os.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline std::string confusion_csv(const ConfusionMatrix& m) {
  std::ostringstream os;
  os << "true\\predicted";
  for (auto s : kAllSchemes) os << ',' << scheme_name(s);
  os << '\n';
  for (std::size_t a = 0; a < kNumClasses; ++a) {
    os << scheme_name(kAllSchemes[a]);
    for (std::size_t b = 0; b < kNumClasses; ++b) os << ',' << m.counts[a][b];
    os << '\n';
  }
  return os.str();
}

inline std::string histogram_csv(const CodewordHistogram& h) {
  std::ostringstream os;
  for (std::size_t k = 0; k < h.counts.size(); ++k) os << (k ? "," : "") << "cw" << k;
  os << '\n';
  for (std::size_t k = 0; k < h.counts.size(); ++k) os << (k ? "," : "") << h.counts[k];
  os << '\n';
  return os.str();
}

inline std::string iq_csv(const IQDatapoint& x) {
  std::ostringstream os;
  os << "i,q\n";
  for (std::size_t k = 0; k < kWindow; ++k) os << fmt_value(x.i[k]) << ',' << fmt_value(x.q[k]) << '\n';
  return os.str();
}

}  // namespace detail

// Plot-data files under dir: accuracy.csv, distances.csv, confusion/,
// histograms/<population>/<class>.csv, iq/<class>/<population>_{x,xa,xhat}.csv.
inline std::vector<std::filesystem::path> emit_plots(const EvalReport& r, const std::filesystem::path& dir) {
  if (r.attacks.empty()) throw InvalidArgument("emit_plots: report has no attack rows");
  std::set<double> eps;
  std::set<AttackKind> kinds;
  for (const auto& a : r.attacks) {
    eps.insert(a.spec.epsilon);
    kinds.insert(a.spec.kind);
  }
  if (r.attacks.size() != eps.size() * kinds.size()) {
    throw InvalidArgument("emit_plots: report does not cover every attack x epsilon");
  }
  for (const auto& t : r.triplets) {
    if (t.x.label != t.label || t.x_a.label != t.label) {
      throw InvalidArgument("emit_plots: triplet waveforms are missing");
    }
  }
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::filesystem::path& rel, const std::string& text) {
    detail::write_text(dir / rel, text);
    written.push_back(dir / rel);
  };
  put("accuracy.csv", accuracy_csv(r));
  put("distances.csv", distances_csv(r));
  put("confusion/clean_original.csv", detail::confusion_csv(r.confusion_clean));
  put("confusion/clean_reconstructed.csv", detail::confusion_csv(r.confusion_clean_reconstructed));
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    put("histograms/clean/" + std::string(scheme_name(kAllSchemes[c])) + ".csv",
        detail::histogram_csv(r.clean_histograms[c]));
  }
  for (const auto& a : r.attacks) {
    const std::string tag = detail::population_tag(a.spec);
    put("confusion/" + tag + "_attacked.csv", detail::confusion_csv(a.confusion_attacked));
    put("confusion/" + tag + "_reconstructed.csv", detail::confusion_csv(a.confusion_reconstructed));
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      put("histograms/" + tag + "/" + std::string(scheme_name(kAllSchemes[c])) + ".csv",
          detail::histogram_csv(a.histograms[c]));
    }
  }
  for (const auto& t : r.triplets) {
    const std::string base =
        "iq/" + std::string(scheme_name(kAllSchemes[t.label])) + "/" + detail::population_tag(t.spec);
    put(base + "_x.csv", detail::iq_csv(t.x));
    put(base + "_xa.csv", detail::iq_csv(t.x_a));
    put(base + "_xhat.csv", detail::iq_csv(t.x_hat));
  }
  return written;
}

// ---------------------------------------------------------------- pipeline

// Runs the stages against an output directory. Cached artifacts are reused
// when their recorded inputs match the current configuration.
class Experiment {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Experiment(ExperimentConfig cfg, Logger log = {})
      : cfg_(cfg.resolved()), log_(std::move(log)) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& root() const noexcept { return cfg_.output_dir; }

  std::filesystem::path data_dir() const { return root() / "data"; }
  std::filesystem::path model_dir() const { return root() / "models"; }
  std::filesystem::path adversarial_dir() const { return root() / "adversarial"; }
  std::filesystem::path token_dir() const { return root() / "tokens"; }
  std::filesystem::path report_dir() const { return root() / "reports"; }
  std::filesystem::path plot_dir() const { return root() / "plots"; }

  const Dataset& dataset() {
    if (!dataset_) dataset_ = staged(Stage::Generate, [&] { return load_or_generate(); });
    return *dataset_;
  }

  const ClassifierModel& classifier() {
    if (!classifier_) classifier_ = staged(Stage::TrainClassifier, [&] { return load_or_train_classifier(); });
    return *classifier_;
  }

  const VQVAEModel& vqvae() {
    if (!vqvae_) vqvae_ = staged(Stage::TrainVQVAE, [&] { return load_or_train_vqvae(); });
    return *vqvae_;
  }

  // One attacked copy of the test set per (kind, epsilon) in config order.
  const std::vector<AttackedDataset>& attacked() {
    if (!attacked_) attacked_ = staged(Stage::Attack, [&] { return load_or_attack(); });
    return *attacked_;
  }

  EvalReport evaluate() {
    return staged(Stage::Evaluate, [&] {
      auto r = run_evaluation();
      save_report(r);
      return r;
    });
  }

  // Full pipeline plus plot data.
  EvalReport report() {
    auto r = evaluate();
    staged(Stage::Report, [&] {
      emit_plots(r, plot_dir());
      return 0;
    });
    return r;
  }

 private:
  template <typename F>
  auto staged(Stage s, F&& f) -> decltype(f()) {
    try {
      return f();
    } catch (const StageFailed&) {
      throw;
    } catch (const std::exception& e) {
      throw StageFailed(to_string(s), e.what());
    }
  }

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  // ---- fingerprints of stage inputs

  nlohmann::json dataset_key() const {
    const auto& d = cfg_.dataset;
    std::vector<std::string> classes;
    for (auto s : d.classes) classes.emplace_back(scheme_name(s));
    return {{"seed", d.seed},
            {"per_class_count", d.per_class_count},
            {"train_fraction", d.train_fraction},
            {"classes", classes},
            {"rrc_rolloff", d.modulator.rrc_rolloff},
            {"ofdm_cyclic_prefix", d.modulator.ofdm_cyclic_prefix}};
  }
  nlohmann::json classifier_key() const {
    const auto& h = cfg_.classifier;
    return {{"dataset", dataset_key()},
            {"epochs", h.epochs},
            {"batch_size", h.batch_size},
            {"learning_rate", h.learning_rate},
            {"cosine_schedule", h.cosine_schedule},
            {"seed", h.seed},
            {"validation_fraction", h.validation_fraction},
            {"target_accuracy", h.target_accuracy},
            {"augment", h.augment}};
  }
  nlohmann::json vqvae_key() const {
    const auto& h = cfg_.vqvae;
    return {{"dataset", dataset_key()},
            {"epochs", h.epochs},
            {"batch_size", h.batch_size},
            {"learning_rate", h.learning_rate},
            {"beta", h.beta},
            {"codebook_size", h.codebook_size},
            {"reset_fraction", h.reset_fraction},
            {"encoder_output_gain", h.encoder_output_gain},
            {"channels", h.channels},
            {"seed", h.seed}};
  }

  bool cached(const std::filesystem::path& artifact, const nlohmann::json& key) const {
    if (!cfg_.reuse_artifacts) return false;
    const auto side = sidecar(artifact);
    if (!std::filesystem::exists(artifact) || !std::filesystem::exists(side)) return false;
    try {
      return nlohmann::json::parse(detail::read_text(side)).at("inputs") == key;
    } catch (const std::exception&) {
      return false;
    }
  }

  static std::filesystem::path sidecar(const std::filesystem::path& artifact) {
    auto p = artifact;
    p += ".json";
    return p;
  }

  static void write_sidecar(const std::filesystem::path& artifact, const nlohmann::json& key,
                            nlohmann::json extra = nlohmann::json::object()) {
    extra["inputs"] = key;
    detail::write_text(sidecar(artifact), extra.dump(2) + "\n");
  }

  // ---- stages

  Dataset load_or_generate() {
    const auto train = data_dir() / "train.rfds", test = data_dir() / "test.rfds";
    const auto key = dataset_key();
    Dataset ds;
    if (cached(train, key) && cached(test, key)) {
      log("generate: reusing " + data_dir().string());
      ds.train = io::load_datapoints(train);
      ds.test = io::load_datapoints(test);
      ds.std_dev = dataset_std(ds.train.empty() ? ds.test : ds.train);
      return ds;
    }
    log("generate: synthesizing " + std::to_string(cfg_.dataset.per_class_count) + " datapoints per class");
    ds = generate_dataset(cfg_.dataset);
    std::filesystem::create_directories(data_dir());
    io::save_datapoints(train, ds.train);
    io::save_datapoints(test, ds.test);
    const nlohmann::json stats = {{"std", ds.std_dev}, {"train", ds.train.size()}, {"test", ds.test.size()}};
    write_sidecar(train, key, stats);
    write_sidecar(test, key, stats);
    log("generate: dataset std " + detail::fmt_value(ds.std_dev));
    return ds;
  }

  ClassifierModel load_or_train_classifier() {
    const auto path = model_dir() / "classifier.rfnn";
    const auto key = classifier_key();
    const auto& ds = dataset();
    if (cached(path, key)) {
      log("train-classifier: reusing " + path.string());
      return classifier_from_checkpoint(io::load_checkpoint(path));
    }
    log("train-classifier: " + std::to_string(cfg_.classifier.epochs) + " epochs");
    ClassifierTrainingInfo info;
    auto model = train_classifier(ds.train, cfg_.classifier, &info);
    std::filesystem::create_directories(model_dir());
    io::save_checkpoint(path, to_checkpoint(model, info));
    write_sidecar(path, key,
                  {{"epochs_run", info.epochs_run},
                   {"train_accuracy", info.final_train_accuracy},
                   {"validation_accuracy", info.final_validation_accuracy},
                   {"loss_curve", info.epoch_loss}});
    log("train-classifier: validation accuracy " + detail::fmt_value(info.final_validation_accuracy));
    return model;
  }

  VQVAEModel load_or_train_vqvae() {
    const auto path = model_dir() / "vqvae.rfnn";
    const auto key = vqvae_key();
    const auto& ds = dataset();
    if (cached(path, key)) {
      log("train-vqvae: reusing " + path.string());
      return vqvae_from_checkpoint(io::load_checkpoint(path));
    }
    log("train-vqvae: " + std::to_string(cfg_.vqvae.epochs) + " epochs");
    VQTrainingInfo info;
    auto model = train_vqvae(ds.train, cfg_.vqvae, &info);
    std::filesystem::create_directories(model_dir());
    io::save_checkpoint(path, to_checkpoint(model, info));
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& t : info.epoch_terms) curve.push_back(to_json(t));
    write_sidecar(path, key,
                  {{"epochs_run", info.epochs_run},
                   {"loss_curve", curve},
                   {"resets", info.resets},
                   {"active_codewords", info.active_codewords}});
    if (!info.epoch_terms.empty()) {
      log("train-vqvae: final reconstruction loss " + detail::fmt_value(info.epoch_terms.back().reconstruction));
    }
    return model;
  }

  std::vector<AttackedDataset> load_or_attack() {
    const auto& ds = dataset();
    const auto& model = classifier();
    std::vector<AttackedDataset> out;
    for (auto kind : cfg_.attacks) {
      for (double eps : cfg_.epsilons) {
        const auto spec = cfg_.attack_spec(kind, eps);
        const auto path = adversarial_dir() / (detail::population_tag(spec) + ".rfds");
        const nlohmann::json key = {{"classifier", classifier_key()}, {"attack", to_json(spec)}};
        AttackedDataset a;
        if (cached(path, key)) {
          log("attack: reusing " + path.string());
          a = reload_attacked(path, ds.test, model, spec);
        } else {
          log("attack: " + detail::population_tag(spec));
          a = attack_dataset(model, ds.test, spec, cfg_.threads);
          std::filesystem::create_directories(adversarial_dir());
          io::save_datapoints(path, a.datapoints());
          write_sidecar(path, key, {{"manifest", to_json(a.manifest)}});
        }
        out.push_back(std::move(a));
      }
    }
    return out;
  }

  AttackedDataset reload_attacked(const std::filesystem::path& path, const Datapoints& test,
                                  const ClassifierModel& model, const AttackSpec& spec) const {
    const auto xs = io::load_datapoints(path);
    if (xs.size() != test.size()) throw FormatError(path.string() + ": size does not match the test set");
    AttackedDataset a;
    for (std::size_t n = 0; n < xs.size(); ++n) {
      a.points.push_back({xs[n], n, spec, detail::linf(xs[n], test[n])});
    }
    a.manifest = summarize_attack(model, test, a.points, spec, cfg_.threads);
    return a;
  }

  // Per-datapoint results of one population (clean or attacked test set).
  struct ItemResult {
    std::size_t attacked_prediction = 0;
    std::vector<std::size_t> reconstructed_predictions;
    Tokens first_tokens{};
    IQDatapoint first_reconstruction;
    std::optional<LatentDistanceAccumulator> distances;
  };

  std::vector<ItemResult> evaluate_population(const Datapoints& clean, const Datapoints& xs,
                                              std::uint64_t population) {
    const auto& model = classifier();
    const auto& vq = vqvae();
    const std::size_t trials = cfg_.reconstruction_trials();
    const std::uint64_t seed = cfg_.stage_seed(Stage::Evaluate);
    std::vector<ItemResult> out(xs.size());
    parallel_for(xs.size(), cfg_.threads, [&](std::size_t n) {
      auto& r = out[n];
      const auto pa = vq.posterior_grid(vq.encode(xs[n]));
      r.attacked_prediction = model.predict_label(xs[n]);
      Rng rng(derive_seed(seed, 2 * population, n));
      for (std::size_t t = 0; t < trials; ++t) {
        const Tokens tok = draw_tokens(pa, cfg_.eval_quantization, rng);
        const auto xh = vq.decode(tok);
        r.reconstructed_predictions.push_back(model.predict_label(xh));
        if (t == 0) {
          r.first_tokens = tok;
          r.first_reconstruction = IQDatapoint::from_tensor(xh, xs[n].label);
        }
      }
      Rng drng(derive_seed(seed, 2 * population + 1, n));
      r.distances.emplace(cfg_.distance_trials);
      const auto px = &clean == &xs ? pa : vq.posterior_grid(vq.encode(clean[n]));
      r.distances->add(px, pa, drng);
    });
    return out;
  }

  struct PopulationSummary {
    ConfusionMatrix attacked, reconstructed;
    std::array<LatentDistanceReport, kNumClasses> distances{};
    std::array<CodewordHistogram, kNumClasses> histograms{};
  };

  PopulationSummary summarize(const Datapoints& clean, const std::vector<ItemResult>& items,
                              const std::string& tag) const {
    PopulationSummary s;
    std::vector<LatentDistanceAccumulator> acc(kNumClasses, LatentDistanceAccumulator(cfg_.distance_trials));
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      s.histograms[c].counts.assign(vqvae_->codebook_size(), 0);
      s.histograms[c].population = tag + "/" + std::string(scheme_name(kAllSchemes[c]));
    }
    for (std::size_t n = 0; n < items.size(); ++n) {
      const std::size_t y = clean[n].label;
      s.attacked.add(y, items[n].attacked_prediction);
      for (auto p : items[n].reconstructed_predictions) s.reconstructed.add(y, p);
      acc[y].merge(*items[n].distances);
      s.histograms[y].add(items[n].first_tokens);
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) s.distances[c] = acc[c].report();
    return s;
  }

  void save_tokens(const std::string& tag, const std::vector<ItemResult>& items) const {
    std::vector<std::uint8_t> flat;
    flat.reserve(items.size() * kTokens);
    for (const auto& r : items) {
      for (auto t : r.first_tokens) flat.push_back(std::uint8_t(t));
    }
    std::filesystem::create_directories(token_dir());
    io::save_tokens(token_dir() / (tag + ".tok"), flat);
  }

  EvalReport run_evaluation() {
    const auto& ds = dataset();
    classifier();
    const auto& vq = vqvae();
    if (vq.codebook_size() > 256) throw InvalidArgument("token dumps hold at most 256 codewords");
    const auto& adv = attacked();
    const auto& test = ds.test;

    EvalReport r;
    r.master_seed = cfg_.master_seed;
    r.quantization = to_string(cfg_.eval_quantization);
    r.reconstruction_trials = cfg_.reconstruction_trials();
    r.distance_trials = cfg_.distance_trials;
    r.data_std = ds.std_dev;
    r.test_count = test.size();

    log("evaluate: clean test set");
    const auto clean_items = evaluate_population(test, test, 0);
    const auto clean = summarize(test, clean_items, "clean");
    save_tokens("clean", clean_items);
    r.confusion_clean = clean.attacked;
    r.accuracy_clean = clean.attacked.accuracy();
    r.confusion_clean_reconstructed = clean.reconstructed;
    r.accuracy_clean_reconstructed = clean.reconstructed.accuracy();
    r.self_distances = clean.distances;
    r.clean_histograms = clean.histograms;

    std::array<std::size_t, kNumClasses> chosen{};
    {
      std::array<std::size_t, kNumClasses> seen{};
      chosen.fill(test.size());
      for (std::size_t n = 0; n < test.size(); ++n) {
        const std::size_t y = test[n].label;
        if (seen[y]++ == cfg_.triplet_index) chosen[y] = n;
      }
    }

    for (std::size_t p = 0; p < adv.size(); ++p) {
      const auto& a = adv[p];
      const std::string tag = detail::population_tag(a.manifest.spec);
      log("evaluate: " + tag);
      const auto xs = a.datapoints();
      const auto items = evaluate_population(test, xs, p + 1);
      const auto s = summarize(test, items, tag);
      save_tokens(tag, items);
      AttackEvaluation row;
      row.spec = a.manifest.spec;
      row.snr_a_db = row.spec.epsilon > 0.0 ? snr_a(r.data_std, row.spec.epsilon)
                                            : std::numeric_limits<double>::infinity();
      row.max_linf = a.manifest.max_linf;
      row.confusion_original = r.confusion_clean;
      row.accuracy_original = r.accuracy_clean;
      row.confusion_attacked = s.attacked;
      row.accuracy_attacked = s.attacked.accuracy();
      row.confusion_reconstructed = s.reconstructed;
      row.accuracy_reconstructed = s.reconstructed.accuracy();
      row.distances = s.distances;
      row.histograms = s.histograms;
      r.attacks.push_back(std::move(row));
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        const std::size_t n = chosen[c];
        if (n >= test.size()) continue;
        r.triplets.push_back({c, a.manifest.spec, n, test[n], xs[n], items[n].first_reconstruction});
      }
    }
    return r;
  }

  void save_report(const EvalReport& r) const {
    detail::write_text(report_dir() / "report.json", to_json(r).dump(2) + "\n");
    detail::write_text(report_dir() / "accuracy.csv", accuracy_csv(r));
    detail::write_text(report_dir() / "distances.csv", distances_csv(r));
    Datapoints wave;
    for (const auto& t : r.triplets) {
      wave.push_back(t.x);
      wave.push_back(t.x_a);
      wave.push_back(t.x_hat);
    }
    io::save_datapoints(report_dir() / "triplets.rfds", wave);
    detail::write_text(root() / "config.ini", to_ini(cfg_));
  }

  ExperimentConfig cfg_;
  Logger log_;
  std::optional<Dataset> dataset_;
  std::optional<ClassifierModel> classifier_;
  std::optional<VQVAEModel> vqvae_;
  std::optional<std::vector<AttackedDataset>> attacked_;
};

// Reads reports/report.json and the triplet waveforms written by evaluate.
inline EvalReport load_report(const std::filesystem::path& report_dir) {
  auto r = report_from_json(nlohmann::json::parse(detail::read_text(report_dir / "report.json")));
  const auto wave = io::load_datapoints(report_dir / "triplets.rfds");
  if (wave.size() != 3 * r.triplets.size()) throw FormatError("triplets.rfds does not match report.json");
  for (std::size_t k = 0; k < r.triplets.size(); ++k) {
    r.triplets[k].x = wave[3 * k];
    r.triplets[k].x_a = wave[3 * k + 1];
    r.triplets[k].x_hat = wave[3 * k + 2];
  }
  return r;
}

inline EvalReport run_experiment(const ExperimentConfig& cfg, Experiment::Logger log = {}) {
  Experiment e(cfg, std::move(log));
  return e.report();
}

}  // namespace rfadvq
