// rf-advq: command-line driver for the experiment pipeline.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rfadvq/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool fresh = false;
  std::size_t threads = 0;
  bool threads_given = false;
  bool quiet = false;
};

rfadvq::ExperimentConfig make_config(const Options& o) {
  rfadvq::ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = rfadvq::load_config(o.config, o.overrides);
  } else {
    rfadvq::apply_overrides(cfg, o.overrides);
  }
  if (const char* env = std::getenv("RF_ADVQ_OUT"); env && *env && o.output.empty()) cfg.output_dir = env;
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (o.seed_given) cfg.master_seed = o.seed;
  if (o.fresh) cfg.reuse_artifacts = false;
  if (o.threads_given) cfg.threads = o.threads;
  cfg.validate();
  return cfg;
}

void print_summary(const rfadvq::EvalReport& r) {
  std::cout << "clean accuracy " << r.accuracy_clean << ", reconstructed " << r.accuracy_clean_reconstructed
            << " (" << r.reconstruction_trials << " " << r.quantization << " trials)\n";
  std::cout << "attack  eps     snr_a_db  X_a      X_hat_a\n";
  for (const auto& a : r.attacks) {
    std::printf("%-7s %-7g %-9.2f %-8.4f %-8.4f\n", rfadvq::to_string(a.spec.kind), a.spec.epsilon, a.snr_a_db,
                a.accuracy_attacked, a.accuracy_reconstructed);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attacks on RF modulation classifiers and VQVAE mitigation"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config, "INI file with [experiment] [dataset] ... sections")
      ->check(CLI::ExistingFile);
  app.add_option("-s,--set", o.overrides, "Override a config key, e.g. --set vqvae.epochs=5");
  app.add_option("-o,--output", o.output, "Output directory (default: $RF_ADVQ_OUT or rf-advq-out)");
  app.add_option("--seed", o.seed, "Master seed")->each([&](const std::string&) { o.seed_given = true; });
  app.add_option("-j,--threads", o.threads, "Worker threads, 0 = all cores")
      ->each([&](const std::string&) { o.threads_given = true; });
  app.add_flag("--fresh", o.fresh, "Ignore cached artifacts");
  app.add_flag("-q,--quiet", o.quiet, "Only print errors");

  const std::vector<std::pair<rfadvq::Stage, const char*>> stages = {
      {rfadvq::Stage::Generate, "Synthesize the train/test datasets"},
      {rfadvq::Stage::TrainClassifier, "Train the modulation classifier"},
      {rfadvq::Stage::TrainVQVAE, "Train the VQVAE"},
      {rfadvq::Stage::Attack, "Generate adversarial test sets for every attack and epsilon"},
      {rfadvq::Stage::Evaluate, "Evaluate originals, adversarial examples and reconstructions"},
      {rfadvq::Stage::Report, "Write plot data from the last evaluation (evaluates first if there is none)"},
  };
  std::vector<std::pair<rfadvq::Stage, CLI::App*>> subs;
  for (const auto& [stage, help] : stages) subs.emplace_back(stage, app.add_subcommand(rfadvq::to_string(stage), help));

  CLI11_PARSE(app, argc, argv);

  rfadvq::Stage stage = rfadvq::Stage::Report;
  for (const auto& [s, sub] : subs) {
    if (sub->parsed()) stage = s;
  }
  try {
    const auto cfg = make_config(o);
    rfadvq::Experiment ex(cfg, [&](const std::string& m) {
      if (!o.quiet) std::cerr << "[rf-advq] " << m << '\n';
    });
    switch (stage) {
      case rfadvq::Stage::Generate: {
        const auto& ds = ex.dataset();
        std::cout << ds.train.size() << " train, " << ds.test.size() << " test, std " << ds.std_dev << '\n';
        break;
      }
      case rfadvq::Stage::TrainClassifier: {
        const auto ev = rfadvq::evaluate(ex.classifier(), ex.dataset().test);
        std::cout << "test accuracy " << ev.accuracy << '\n';
        break;
      }
      case rfadvq::Stage::TrainVQVAE: ex.vqvae(); break;
      case rfadvq::Stage::Attack:
        for (const auto& a : ex.attacked()) {
          std::cout << rfadvq::to_string(a.manifest.spec.kind) << " eps " << a.manifest.spec.epsilon
                    << " accuracy " << a.manifest.attacked_accuracy << '\n';
        }
        break;
      case rfadvq::Stage::Evaluate: print_summary(ex.evaluate()); break;
      case rfadvq::Stage::Report: {
        const auto existing = ex.report_dir() / "report.json";
        if (cfg.reuse_artifacts && std::filesystem::exists(existing)) {
          const auto r = rfadvq::load_report(ex.report_dir());
          rfadvq::emit_plots(r, ex.plot_dir());
          print_summary(r);
        } else {
          print_summary(ex.report());
        }
        std::cout << "plot data in " << ex.plot_dir().string() << '\n';
        break;
      }
    }
  } catch (const rfadvq::StageFailed& e) {
    std::cerr << "rf-advq: stage failed: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "rf-advq: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
