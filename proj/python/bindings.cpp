#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cmal/harness.hpp"

namespace py = pybind11;
using namespace cmal;

namespace {

using Refs = std::vector<TokenSequence>;

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

PolicyMatrix policy_from_probs(const py::array_t<double, py::array::c_style | py::array::forcecast>& probs) {
  if (probs.ndim() != 2) throw std::invalid_argument("probabilities must be a 2-D array (agents x vocab)");
  const auto rows = static_cast<std::size_t>(probs.shape(0)), cols = static_cast<std::size_t>(probs.shape(1));
  std::vector<double> logp(rows * cols);
  for (std::size_t i = 0; i < logp.size(); ++i) {
    const double p = probs.data()[i];
    if (!(p > 0.0)) throw std::invalid_argument("probabilities must be strictly positive");
    logp[i] = std::log(p);
  }
  return PolicyMatrix::from_log_probs(Tensor::matrix(rows, cols, std::move(logp)));
}

JointSample make_sample(const PolicyMatrix& policy, const TokenSequence& actions, JointReward& reward) {
  if (actions.size() != policy.agents) throw std::invalid_argument("one action per agent is required");
  JointSample s;
  s.actions = actions;
  for (std::size_t a = 0; a < actions.size(); ++a) {
    if (actions[a] < 0 || static_cast<std::size_t>(actions[a]) >= policy.vocab) {
      throw std::out_of_range("action id outside the vocabulary");
    }
    s.log_probs.push_back(policy.log_prob(a, actions[a]));
  }
  s.sentence = joint_to_sentence(actions, reward.truncation());
  s.reward = reward.score_sentence(s.sentence);
  return s;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["examples"] = r.examples;
  d["bleu"] = r.bleu;
  d["gleu"] = r.gleu;
  d["cider"] = r.cider;
  d["repetition"] = r.repetition;
  d["latency_ms"] = r.latency_ms;
  py::list buckets;
  for (const auto& b : r.buckets) {
    py::dict e;
    e["lo"] = b.lo;
    e["hi"] = b.hi;
    e["count"] = b.count;
    e["gleu"] = b.gleu;
    e["bleu"] = b.bleu;
    e["repetition"] = b.repetition;
    buckets.append(e);
  }
  d["buckets"] = buckets;
  d["hypotheses"] = r.hypotheses;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Non-autoregressive sequence generation with counterfactual multi-agent training";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);

  m.attr("PAD") = kPad;
  m.attr("BOS") = kBos;
  m.attr("EOS") = kEos;
  m.attr("UNK") = kUnk;

  m.def("postprocess", [](const TokenSequence& s) { return postprocess(s); });
  m.def("truncate_at_eos", [](const TokenSequence& s) { return truncate_at_eos(s); });

  m.def(
      "sentence_bleu", [](const TokenSequence& hyp, const Refs& refs, std::size_t max_n, bool smooth) {
        return sentence_bleu(hyp, refs, max_n, smooth);
      },
      py::arg("hyp"), py::arg("refs"), py::arg("max_n") = 4, py::arg("smooth") = true);
  m.def(
      "sentence_gleu", [](const TokenSequence& hyp, const Refs& refs, std::size_t max_n) {
        return sentence_gleu(hyp, refs, max_n);
      },
      py::arg("hyp"), py::arg("refs"), py::arg("max_n") = 4);
  m.def(
      "cider_d",
      [](const TokenSequence& hyp, const Refs& refs, const std::optional<std::vector<Refs>>& corpus_refs,
         double sigma) {
        const DocFreqTable df(corpus_refs ? *corpus_refs : std::vector<Refs>{refs});
        return cider_d(hyp, refs, &df, sigma);
      },
      py::arg("hyp"), py::arg("refs"), py::arg("corpus_refs") = py::none(), py::arg("sigma") = 6.0,
      "CIDEr-D with document frequencies from corpus_refs (defaults to refs alone).");
  m.def("repetition_rate", [](const TokenSequence& s) { return repetition_rate(s); });
  m.def("corpus_bleu", &corpus_bleu, py::arg("hyps"), py::arg("refs"));

  py::enum_<TaskKind>(m, "TaskKind")
      .value("COPY", TaskKind::Copy)
      .value("REVERSE", TaskKind::Reverse)
      .value("SORT", TaskKind::Sort)
      .value("LEX_TRANSLATE", TaskKind::LexTranslate);

  py::class_<Task>(m, "Task")
      .def(py::init<>())
      .def_readwrite("kind", &Task::kind)
      .def_readwrite("vocab_size", &Task::vocab_size)
      .def_readwrite("min_len", &Task::min_len)
      .def_readwrite("max_len", &Task::max_len)
      .def_readwrite("seed", &Task::seed)
      .def_readwrite("lexicon_seed", &Task::lexicon_seed)
      .def_readwrite("distinct_tokens", &Task::distinct_tokens)
      .def("target", [](const Task& t, const TokenSequence& s) { return task_target(t, s); })
      .def("lexicon", &task_lexicon)
      .def(
          "generate",
          [](const Task& t, std::size_t n, const std::string& stream) {
            Stream st = stream == "train" ? Stream::Train : stream == "test" ? Stream::Test : Stream::Unlabeled;
            if (stream != "train" && stream != "test" && stream != "unlabeled") {
              throw std::invalid_argument("stream must be train, test or unlabeled");
            }
            std::vector<std::pair<TokenSequence, Refs>> out;
            for (const auto& ex : generate_task(t, n, st)) out.emplace_back(ex.source, ex.targets);
            return out;
          },
          py::arg("n"), py::arg("stream") = "train");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def(py::init([](const std::map<std::string, std::string>& kv) { return ModelConfig::from_kv(kv); }))
      .def("to_dict", &ModelConfig::to_kv)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("n_agents", &ModelConfig::n_agents)
      .def_readwrite("n_max", &ModelConfig::n_max);

  py::class_<Seq2Seq>(m, "Seq2Seq")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &Seq2Seq::load)
      .def("save", &Seq2Seq::save)
      .def_property_readonly("config", &Seq2Seq::config)
      .def("parameter_count", &Seq2Seq::parameter_count)
      .def("parameter_names",
           [](const Seq2Seq& s) {
             std::vector<std::string> names;
             for (const auto& [name, t] : s.parameters()) names.push_back(name);
             return names;
           })
      .def("encode", [](const Seq2Seq& s, const TokenSequence& src) { return to_array(s.encode(src)); })
      .def(
          "na_probs",
          [](const Seq2Seq& s, const TokenSequence& src, std::optional<std::size_t> length) {
            const Tensor ctx = s.encode(src);
            const PolicyMatrix p = s.decode_na(ctx, length.value_or(s.inference_length(ctx, src.size())));
            py::array_t<double> out({p.agents, p.vocab});
            std::copy(p.probs.begin(), p.probs.end(), out.mutable_data());
            return out;
          },
          py::arg("source"), py::arg("length") = py::none(), "Per-agent distributions from one parallel pass.")
      .def("decode_na", [](const Seq2Seq& s, const TokenSequence& src) { return decode_na_argmax(s, src); })
      .def(
          "decode_ar",
          [](const Seq2Seq& s, const TokenSequence& src, std::size_t beam, std::size_t max_len) {
            return truncate_at_eos(beam_search(s, s.encode(src), beam, max_len));
          },
          py::arg("source"), py::arg("beam_width") = 3, py::arg("max_len") = 32);

  py::class_<BaselineSpec>(m, "BaselineSpec")
      .def(py::init(&BaselineSpec::parse), py::arg("name"), py::arg("k") = 2, py::arg("lambda_") = 0.5,
           py::arg("decay") = 0.99)
      .def_property_readonly("name", &BaselineSpec::name)
      .def_readonly("k", &BaselineSpec::k)
      .def_readonly("lambda_", &BaselineSpec::lambda);

  m.def(
      "counterfactual_baselines",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& probs, const TokenSequence& actions,
         const std::function<double(const TokenSequence&)>& reward, std::size_t k, bool compositional,
         bool truncate) {
        const PolicyMatrix policy = policy_from_probs(probs);
        JointReward jr([&](std::span<const TokenId> s) { return reward(TokenSequence(s.begin(), s.end())); },
                       truncate ? Truncation::AtFirstEos : Truncation::None);
        const JointSample sample = make_sample(policy, actions, jr);
        return compositional ? counterfactual_baseline_compositional(sample, policy, jr, k)
                             : counterfactual_baseline_individual(sample, policy, jr, k);
      },
      py::arg("probs"), py::arg("actions"), py::arg("reward"), py::arg("k") = 2, py::arg("compositional") = false,
      py::arg("truncate") = false,
      "Per-agent counterfactual baselines for one joint action under a Python reward.");
  m.def("final_baseline", [](const std::vector<double>& ind, const std::vector<double>& comp, double lambda) {
    return final_baseline(ind, comp, lambda);
  });
  m.def("top_k_ids", [](const std::vector<double>& p, std::size_t k) { return top_k_ids(p, k); });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def(py::init([](const std::map<std::string, std::string>& kv) { return RunConfig::from_kv(kv); }))
      .def_static("load", &RunConfig::load)
      .def("save", &RunConfig::save)
      .def("to_dict", &RunConfig::to_kv)
      .def("hash", &RunConfig::hash)
      .def("with_overrides",
           [](const RunConfig& c, const std::map<std::string, std::string>& kv) { return RunConfig::from_kv(kv, c); });

  m.def("gen_data", &cmd_gen_data);
  m.def("train_teacher", [](const RunConfig& c) { cmd_train_teacher(c); });
  m.def("distill", &cmd_distill);
  m.def("pretrain_xe", &cmd_pretrain_xe);
  m.def("train_cmal", &cmd_train_cmal);
  m.def(
      "evaluate",
      [](const RunConfig& c, const std::filesystem::path& ckpt, const std::filesystem::path& corpus,
         const std::string& mode, bool postprocess) {
        if (mode != "ar" && mode != "na") throw std::invalid_argument("mode must be 'ar' or 'na'");
        return report_dict(cmd_evaluate(c, ckpt, corpus,
                                        mode == "ar" ? DecodeMode::Autoregressive : DecodeMode::NonAutoregressive,
                                        postprocess));
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("corpus"), py::arg("mode") = "na",
      py::arg("postprocess") = false);
  m.def(
      "score",
      [](const std::vector<std::pair<TokenSequence, Refs>>& pairs, const std::vector<TokenSequence>& hyps,
         const std::vector<std::size_t>& edges) {
        ParallelCorpus corpus;
        for (const auto& [src, refs] : pairs) corpus.push_back({src, refs, Provenance::Real});
        return report_dict(score_hypotheses(corpus, hyps, edges));
      },
      py::arg("pairs"), py::arg("hypotheses"), py::arg("bucket_edges") = std::vector<std::size_t>{});
}
