#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfadvq/classifier.hpp"
#include "rfadvq/parallel.hpp"

namespace rfadvq {

enum class AttackKind { FGSM1, FGSM2, PGD };

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::FGSM1: return "fgsm1";
    case AttackKind::FGSM2: return "fgsm2";
    case AttackKind::PGD: return "pgd";
  }
  return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "fgsm1") return AttackKind::FGSM1;
  if (s == "fgsm2") return AttackKind::FGSM2;
  if (s == "pgd") return AttackKind::PGD;
  throw InvalidArgument("unknown attack kind '" + s + "'");
}

struct AttackSpec {
  AttackKind kind = AttackKind::FGSM2;
  double epsilon = 0.0;
  std::size_t pgd_steps = 10;
  double pgd_step_size = 0.0;  // 0 selects epsilon / 4
  bool phase_preserving_pgd = false;
  std::uint64_t seed = 0;

  double step_size() const { return pgd_step_size > 0.0 ? pgd_step_size : epsilon / 4.0; }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
      throw InvalidArgument("attack epsilon must be finite and >= 0");
    }
    if (kind == AttackKind::PGD) {
      if (pgd_steps == 0) throw InvalidArgument("pgd_steps must be >= 1");
      if (pgd_step_size < 0.0) throw InvalidArgument("pgd_step_size must be > 0");
    }
  }
};

inline nlohmann::json to_json(const AttackSpec& s) {
  nlohmann::json j = {{"kind", to_string(s.kind)}, {"epsilon", s.epsilon}, {"seed", s.seed}};
  if (s.kind == AttackKind::PGD) {
    j["steps"] = s.pgd_steps;
    j["step_size"] = s.step_size();
    j["phase_preserving"] = s.phase_preserving_pgd;
  }
  return j;
}

struct AdversarialDatapoint {
  IQDatapoint x_a;
  std::size_t origin = 0;
  AttackSpec spec;
  double linf = 0.0;  // achieved ||x_a - x||_inf
};

namespace detail {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct IQBuffer {
  std::vector<double> i, q;

  explicit IQBuffer(const IQDatapoint& x) : i(x.i.begin(), x.i.end()), q(x.q.begin(), x.q.end()) {}

  nn::Tensor<float> tensor() const {
    nn::Tensor<float> t({2, kWindow});
    for (std::size_t k = 0; k < kWindow; ++k) {
      t(0, k) = float(i[k]);
      t(1, k) = float(q[k]);
    }
    return t;
  }

  IQDatapoint datapoint(std::uint8_t label) const {
    IQDatapoint x;
    x.label = label;
    for (std::size_t k = 0; k < kWindow; ++k) {
      x.i[k] = float(i[k]);
      x.q[k] = float(q[k]);
    }
    return x;
  }
};

inline nn::Tensor<float> input_gradient(const ClassifierModel& model, const nn::Tensor<float>& x,
                                        std::size_t y) {
  return model.loss_and_input_grad(x, y).input_grad;
}

inline double linf(const IQDatapoint& a, const IQDatapoint& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < kWindow; ++k) {
    m = std::max({m, std::abs(double(a.i[k]) - double(b.i[k])),
                  std::abs(double(a.q[k]) - double(b.q[k]))});
  }
  return m;
}

// Amplitude bounds [lo, hi] such that (A cos w, A sin w) stays inside
// [center - eps, center + eps] and [-1, 1] on both channels.
inline std::pair<double, double> radial_limits(double c, double s, double ic, double qc,
                                               double eps) {
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  auto constrain = [&](double coef, double center) {
    if (std::abs(coef) < 1e-300) return;
    double a = std::max(center - eps, -1.0) / coef;
    double b = std::min(center + eps, 1.0) / coef;
    if (a > b) std::swap(a, b);
    lo = std::max(lo, a);
    hi = std::min(hi, b);
  };
  constrain(c, ic);
  constrain(s, qc);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

// I/Q_a = I/Q + eps sign(dJ/dI/Q), each channel independently; sign(0) = 0.
inline IQDatapoint fgsm2(const ClassifierModel& model, const IQDatapoint& x, std::size_t y,
                         double eps) {
  const auto g = detail::input_gradient(model, x.to_tensor(), y);
  detail::IQBuffer b(x);
  for (std::size_t k = 0; k < kWindow; ++k) {
    b.i[k] += eps * detail::sign0(g(0, k));
    b.q[k] += eps * detail::sign0(g(1, k));
  }
  return b.datapoint(x.label);
}

// One FGSM1 sample: the FGSM2 step (i + eps sign(gi), q + eps sign(gq)) keeps
// its amplitude but is placed back on the phase of (i, q). A sample with
// I = Q = 0 has no phase and is returned unchanged.
inline std::pair<double, double> fgsm1_sample(double i, double q, double gi, double gq, double eps) {
  const double r = std::hypot(i, q);
  if (r == 0.0) return {i, q};
  const double a = std::hypot(i + eps * detail::sign0(gi), q + eps * detail::sign0(gq));
  if (a == r) return {i, q};
  // (A cos w, A sin w) with w the phase of (i, q).
  return {i * (a / r), q * (a / r)};
}

inline IQDatapoint fgsm1(const ClassifierModel& model, const IQDatapoint& x, std::size_t y,
                         double eps) {
  const auto g = detail::input_gradient(model, x.to_tensor(), y);
  detail::IQBuffer b(x);
  for (std::size_t k = 0; k < kWindow; ++k) {
    std::tie(b.i[k], b.q[k]) = fgsm1_sample(x.i[k], x.q[k], g(0, k), g(1, k), eps);
  }
  return b.datapoint(x.label);
}

// Iterated sign-gradient ascent from x with step alpha; after every step the
// iterate is clipped into the L-inf eps-ball around x and into [-1, 1].
// With phase_preserving, each step is re-projected onto the original phases
// and the clipping acts on the amplitude, so phases stay exact.
inline IQDatapoint pgd(const ClassifierModel& model, const IQDatapoint& x, std::size_t y,
                       double eps, std::size_t steps, double alpha, bool phase_preserving) {
  if (steps == 0) throw InvalidArgument("pgd: steps must be >= 1");
  const detail::IQBuffer x0(x);
  detail::IQBuffer b(x);
  std::vector<double> cw(kWindow), sw(kWindow);
  if (phase_preserving) {
    for (std::size_t k = 0; k < kWindow; ++k) {
      const double r = std::hypot(x0.i[k], x0.q[k]);
      cw[k] = r > 0.0 ? x0.i[k] / r : 1.0;
      sw[k] = r > 0.0 ? x0.q[k] / r : 0.0;
    }
  }
  for (std::size_t s = 0; s < steps; ++s) {
    const auto g = detail::input_gradient(model, b.tensor(), y);
    for (std::size_t k = 0; k < kWindow; ++k) {
      const double ip = b.i[k] + alpha * detail::sign0(g(0, k));
      const double qp = b.q[k] + alpha * detail::sign0(g(1, k));
      if (phase_preserving) {
        if (x0.i[k] == 0.0 && x0.q[k] == 0.0) continue;
        const auto [lo, hi] = detail::radial_limits(cw[k], sw[k], x0.i[k], x0.q[k], eps);
        const double a = std::clamp(std::hypot(ip, qp), lo, hi);
        b.i[k] = a * cw[k];
        b.q[k] = a * sw[k];
      } else {
        b.i[k] = std::clamp(std::clamp(ip, x0.i[k] - eps, x0.i[k] + eps), -1.0, 1.0);
        b.q[k] = std::clamp(std::clamp(qp, x0.q[k] - eps, x0.q[k] + eps), -1.0, 1.0);
      }
    }
  }
  return b.datapoint(x.label);
}

inline AdversarialDatapoint attack(const ClassifierModel& model, const IQDatapoint& x,
                                   const AttackSpec& spec, std::size_t origin = 0) {
  spec.validate();
  AdversarialDatapoint out;
  out.origin = origin;
  out.spec = spec;
  switch (spec.kind) {
    case AttackKind::FGSM1: out.x_a = fgsm1(model, x, x.label, spec.epsilon); break;
    case AttackKind::FGSM2: out.x_a = fgsm2(model, x, x.label, spec.epsilon); break;
    case AttackKind::PGD:
      out.x_a = pgd(model, x, x.label, spec.epsilon, spec.pgd_steps, spec.step_size(),
                    spec.phase_preserving_pgd);
      break;
  }
  out.linf = detail::linf(out.x_a, x);
  return out;
}

struct AttackManifest {
  AttackSpec spec;
  std::size_t count = 0;
  double max_linf = 0.0;
  double clean_accuracy = 0.0;
  double attacked_accuracy = 0.0;
  std::array<std::uint64_t, kNumClasses> class_counts{};
  std::array<double, kNumClasses> class_clean_accuracy{};
  std::array<double, kNumClasses> class_attacked_accuracy{};
  // Fraction of each class's datapoints misclassified after the attack.
  std::array<double, kNumClasses> class_success_rate{};
  ConfusionMatrix confusion;  // on the attacked set
};

inline nlohmann::json to_json(const AttackManifest& m) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    per[std::string(scheme_name(kAllSchemes[c]))] = {{"count", m.class_counts[c]},
                                        {"clean_accuracy", m.class_clean_accuracy[c]},
                                        {"attacked_accuracy", m.class_attacked_accuracy[c]},
                                        {"success_rate", m.class_success_rate[c]}};
  }
  return {{"attack", to_json(m.spec)},
          {"count", m.count},
          {"max_linf", m.max_linf},
          {"clean_accuracy", m.clean_accuracy},
          {"attacked_accuracy", m.attacked_accuracy},
          {"per_class", per},
          {"confusion", to_json(m.confusion)}};
}

struct AttackedDataset {
  std::vector<AdversarialDatapoint> points;
  AttackManifest manifest;

  Datapoints datapoints() const {
    Datapoints out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(p.x_a);
    return out;
  }
};

// Manifest for adversarial points of `data`, recomputing predictions.
inline AttackManifest summarize_attack(const ClassifierModel& model, std::span<const IQDatapoint> data,
                                       std::span<const AdversarialDatapoint> points,
                                       const AttackSpec& spec, std::size_t threads = 0) {
  if (points.size() != data.size()) throw InvalidArgument("summarize_attack: size mismatch");
  std::vector<std::size_t> clean_pred(data.size()), attacked_pred(data.size());
  parallel_for(data.size(), threads, [&](std::size_t n) {
    clean_pred[n] = model.predict_label(data[n]);
    attacked_pred[n] = model.predict_label(points[n].x_a);
  });
  AttackManifest m;
  m.spec = spec;
  m.count = data.size();
  ConfusionMatrix clean;
  for (std::size_t n = 0; n < data.size(); ++n) {
    m.max_linf = std::max(m.max_linf, points[n].linf);
    clean.add(data[n].label, clean_pred[n]);
    m.confusion.add(data[n].label, attacked_pred[n]);
  }
  m.clean_accuracy = clean.accuracy();
  m.attacked_accuracy = m.confusion.accuracy();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    m.class_counts[c] = m.confusion.row_sum(c);
    m.class_clean_accuracy[c] = clean.class_accuracy(c);
    m.class_attacked_accuracy[c] = m.confusion.class_accuracy(c);
    m.class_success_rate[c] = m.class_counts[c] ? 1.0 - m.class_attacked_accuracy[c] : 0.0;
  }
  return m;
}

inline AttackedDataset attack_dataset(const ClassifierModel& model,
                                      std::span<const IQDatapoint> data, const AttackSpec& spec,
                                      std::size_t threads = 0) {
  spec.validate();
  AttackedDataset out;
  out.points.resize(data.size());
  parallel_for(data.size(), threads, [&](std::size_t n) { out.points[n] = attack(model, data[n], spec, n); });
  out.manifest = summarize_attack(model, data, out.points, spec, threads);
  return out;
}

}  // namespace rfadvq
