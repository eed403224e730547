#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cmal/harness.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> flags;  // one per config key
};

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

void add_common(CLI::App* app, Common& common) {
  app->add_option("-c,--config", common.config_path, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("-s,--set", common.overrides, "override a config key (key=value), repeatable");
  for (const auto& [key, value] : cmal::RunConfig{}.to_kv()) {
    const std::string name = key == "out_dir" ? "-o,--out-dir" : flag_name(key);
    app->add_option(name, common.flags[key], "config key " + key + " (default " + value + ")");
  }
}

cmal::RunConfig resolve(const Common& common) {
  cmal::RunConfig config;
  if (!common.config_path.empty()) config = cmal::RunConfig::load(common.config_path);
  std::map<std::string, std::string> kv;
  for (const auto& item : common.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  for (const auto& [key, value] : common.flags) {
    if (!value.empty()) kv[key] = value;
  }
  return cmal::RunConfig::from_kv(kv, config);
}

void print_report(const cmal::EvalReport& r) {
  std::cout << "examples   " << r.examples << '\n'
            << "BLEU-4     " << r.bleu << '\n'
            << "GLEU       " << r.gleu << '\n'
            << "CIDEr-D    " << r.cider << '\n'
            << "repetition " << r.repetition << '\n'
            << "latency_ms " << r.latency_ms << '\n';
  for (const auto& b : r.buckets) {
    std::cout << "  len [" << b.lo << ", " << (b.hi ? std::to_string(b.hi) : std::string("inf")) << ") n=" << b.count
              << " GLEU " << b.gleu << " BLEU " << b.bleu << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-autoregressive sequence generation with counterfactual multi-agent training"};
  app.require_subcommand(1);

  Common common;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    return s;
  };

  auto* gen = sub("gen-data", "generate train/test corpora for the synthetic task");
  auto* teacher = sub("train-teacher", "train the autoregressive teacher");
  std::string resume;
  teacher->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  auto* distill = sub("distill", "decode training sources with the teacher");
  auto* xe = sub("pretrain-xe", "cross-entropy pretraining of the student");
  auto* train = sub("train-cmal", "CMAL fine-tuning of the student on real pairs");

  auto* eval = sub("evaluate", "score a checkpoint on a corpus");
  std::string ckpt, corpus, mode = "na";
  eval->add_option("--checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus, "corpus file")->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", mode, "ar or na")->check(CLI::IsMember({"ar", "na"}));

  auto* bench = sub("bench-latency", "batch-1 decode latency per target length");
  std::string teacher_ckpt, student_ckpt;
  std::vector<std::size_t> lengths{8, 16, 32, 64};
  bench->add_option("--teacher", teacher_ckpt)->required()->check(CLI::ExistingFile);
  bench->add_option("--student", student_ckpt)->required()->check(CLI::ExistingFile);
  bench->add_option("--lengths", lengths)->delimiter(',');

  auto* topk = sub("ablate-topk", "CMAL runs over several k");
  std::vector<std::size_t> ks{1, 2, 5};
  topk->add_option("--ks", ks, "k values")->delimiter(',');

  auto* base = sub("ablate-baselines", "CMAL runs over several baselines");
  std::vector<std::string> baselines{"none", "ma", "sc", "cf", "cf+ca"};
  base->add_option("--baselines", baselines, "names, or name@lambda for cf+ca")->delimiter(',');

  auto* unl = sub("ablate-unlabeled", "student XE with extra teacher-labelled sources");
  std::vector<std::size_t> counts{0, 5000, 10000};
  unl->add_option("--counts", counts)->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    const cmal::RunConfig config = resolve(common);
    if (gen->parsed()) cmal::cmd_gen_data(config);
    else if (teacher->parsed()) {
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      cmal::cmd_train_teacher(config, from);
    } else if (distill->parsed()) cmal::cmd_distill(config);
    else if (xe->parsed()) cmal::cmd_pretrain_xe(config);
    else if (train->parsed()) cmal::cmd_train_cmal(config);
    else if (eval->parsed()) {
      const auto m = mode == "ar" ? cmal::DecodeMode::Autoregressive : cmal::DecodeMode::NonAutoregressive;
      print_report(cmal::cmd_evaluate(config, ckpt, corpus, m, config.postprocess));
    } else if (bench->parsed()) {
      for (const auto& r : cmal::cmd_bench_latency(config, teacher_ckpt, student_ckpt, lengths)) {
        std::cout << "L=" << r.length << " ar_ms=" << r.ar_ms << " na_ms=" << r.na_ms << " speedup=" << r.speedup
                  << '\n';
      }
    } else if (topk->parsed()) cmal::cmd_ablate_topk(config, ks);
    else if (base->parsed()) cmal::cmd_ablate_baselines(config, baselines);
    else if (unl->parsed()) cmal::cmd_ablate_unlabeled(config, counts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
