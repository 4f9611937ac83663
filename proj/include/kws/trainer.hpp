#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/dataset.hpp"
#include "kws/encoder.hpp"
#include "kws/evalkit.hpp"
#include "kws/features.hpp"
#include "kws/graph.hpp"
#include "kws/loss.hpp"
#include "kws/runtime.hpp"

namespace kws::train {

using nd::Graph;
using nd::Tensor;
using nd::Var;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
};

class Adam {
 public:
  explicit Adam(const AdamConfig& cfg) : cfg_(cfg) {}

  // `grads` aligned with `params`; applies global-norm clipping first.
  void step(const std::vector<encoder::NamedParam>& params, std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor->shape);
        v_.emplace_back(p.tensor->shape);
      }
    }
    if (params.size() != grads.size() || params.size() != m_.size())
      throw Error("cli", "optimizer state does not match parameter list");

    double sq = 0.0;
    for (const auto& g : grads)
      for (double v : g.data) sq += v * v;
    double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw Error("cli", "non-finite gradient norm");
    double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].tensor;
      for (size_t j = 0; j < p.numel(); ++j) {
        double g = grads[i].data[j] * scale;
        m_[i].data[j] = cfg_.beta1 * m_[i].data[j] + (1.0 - cfg_.beta1) * g;
        v_[i].data[j] = cfg_.beta2 * v_[i].data[j] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m_[i].data[j] / bc1;
        double vhat = v_[i].data[j] / bc2;
        p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  size_t t_ = 0;
};

// ---------------------------------------------------------- evaluation

struct EvalOptions {
  size_t enroll_count = 10;
  uint64_t seed = 0;
  bool noisy = false;
  double snr_lo_db = 3.0;
  double snr_hi_db = 15.0;
  double grid_step = 0.01;
};

struct EvalResult {
  std::vector<evalkit::ScoreSet> scores;
  std::vector<evalkit::PhraseMetrics> phrases;
  evalkit::AggregateMetrics aggregate;
};

// The enrollment/verification protocol: per phrase, build a centroid from
// `enroll_count` utterances and score it against every remaining test
// utterance by cosine similarity; DET/AUC/EER per phrase, then averaged.
inline EvalResult evaluate(const encoder::Encoder& enc, const dataset::Dataset& data,
                           const EvalOptions& opt) {
  if (dataset::phrase_labels(data).size() < 2)
    throw Error("evalkit", "evaluation requires >= 2 phrases (negatives are impossible otherwise)");
  dataset::EvalSplit split = dataset::make_eval_split(data, opt.enroll_count, opt.seed);

  // All test utterances, phrase labels aligned.
  std::vector<std::vector<double>> test_embeddings;
  std::vector<std::string> test_phrases;
  for (const auto& ps : split.phrases) {
    for (size_t idx : ps.test) {
      const auto& utt = data[idx];
      if (opt.noisy) {
        Rng pick(derive_seed(opt.seed, 0x5a0000 + idx));
        double snr = pick.uniform(opt.snr_lo_db, opt.snr_hi_db);
        frontend::FeatureSequence noisy =
            frontend::add_noise(utt.features(), snr, derive_seed(opt.seed, 0x6b0000 + idx));
        test_embeddings.push_back(enc.forward(noisy));
      } else {
        test_embeddings.push_back(enc.forward(utt.features()));
      }
      test_phrases.push_back(utt.phrase);
    }
  }

  EvalResult result;
  for (const auto& ps : split.phrases) {
    std::vector<const frontend::FeatureSequence*> enroll_feats;
    for (size_t idx : ps.enroll) enroll_feats.push_back(&data[idx].features());
    runtime::EnrollmentProfile profile = runtime::enroll(enc, enroll_feats, ps.phrase, opt.seed);
    result.scores.push_back(
        evalkit::score_phrase(ps.phrase, profile.centroid, test_embeddings, test_phrases));
    result.phrases.push_back(evalkit::evaluate_scores(result.scores.back(), opt.grid_step));
  }
  result.aggregate = evalkit::aggregate(result.phrases);
  return result;
}

// ------------------------------------------------------------ training

enum class LossKind { ge2e, triplet };

struct TrainOptions {
  LossKind loss = LossKind::ge2e;
  size_t steps = 2000;
  size_t batch_phrases = 8;     // X
  size_t batch_utterances = 10; // Y
  size_t train_frames = 98;     // pad/truncate length within a batch
  uint64_t seed = 1;
  AdamConfig adam;
  double triplet_margin = 0.5;
  size_t eval_every = 50;   // 0 disables periodic evaluation
  double stop_auc = -1.0;   // stop once holdout AUC <= this; < 0 disables
  EvalOptions eval;
};

struct TrainLogEntry {
  size_t step = 0;  // 1-based, 0 for the pre-training entry
  double loss = 0.0;
  std::optional<double> auc;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  size_t steps_run = 0;
  std::optional<double> final_auc;
};

namespace detail {

inline Var batch_loss_var(Graph& g, encoder::Encoder& enc, std::vector<Var>& leaves,
                          const std::vector<const frontend::FeatureSequence*>& feats,
                          const dataset::Batch& batch, const TrainOptions& opt, size_t step) {
  Var emb;
  if (enc.arch() == encoder::Arch::lstm) {
    encoder::LstmVars vars = encoder::lift(g, enc.lstm());
    leaves = vars.all;
    emb = encoder::lstm_forward_graph(g, enc.lstm().cfg, vars, feats);
  } else {
    encoder::ConformerVars vars = encoder::lift(g, enc.conformer());
    leaves = vars.all;
    std::vector<Var> rows;
    rows.reserve(feats.size());
    for (const auto* f : feats)
      rows.push_back(encoder::conformer_forward_graph(g, enc.conformer().cfg, vars, *f));
    emb = nd::concat_rows(rows);
  }
  loss::BatchEmbeddings be{emb, batch.num_phrases, batch.utterances_per};
  if (opt.loss == LossKind::ge2e) return loss::ge2e_loss(g, be).batch_loss;
  loss::TripletConfig tc{opt.triplet_margin};
  return loss::triplet_loss(g, be, tc, derive_seed(opt.seed, 0x781000 + step));
}

}  // namespace detail

// One optimizer step on one sampled batch; returns the batch loss.
inline double train_step(encoder::Encoder& enc, Adam& adam, const dataset::Dataset& data,
                         const TrainOptions& opt, size_t step) {
  dataset::Batch batch = dataset::sample_batch(data, opt.batch_phrases, opt.batch_utterances,
                                               derive_seed(opt.seed, 0x0b0000 + step));
  std::vector<frontend::FeatureSequence> fitted;
  std::vector<const frontend::FeatureSequence*> feats;
  fitted.reserve(batch.num_phrases * batch.utterances_per);
  for (size_t i = 0; i < batch.num_phrases; ++i)
    for (size_t j = 0; j < batch.utterances_per; ++j) {
      fitted.push_back(frontend::fit_length(data[batch.grid[i][j]].features(), opt.train_frames));
      feats.push_back(&fitted.back());
    }

  Graph g;
  std::vector<Var> leaves;
  Var loss_var = detail::batch_loss_var(g, enc, leaves, feats, batch, opt, step);
  double loss_value = loss_var.value().data[0];
  g.backward(loss_var);

  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (Var v : leaves) grads.push_back(v.grad());
  adam.step(enc.named_params(), grads);
  return loss_value;
}

inline TrainResult train(encoder::Encoder& enc, const dataset::Dataset& train_data,
                         const dataset::Dataset& holdout, const TrainOptions& opt,
                         std::ostream* log_stream = nullptr) {
  Adam adam(opt.adam);
  TrainResult result;
  auto maybe_eval = [&](size_t step) -> std::optional<double> {
    if (opt.eval_every == 0 || holdout.empty()) return std::nullopt;
    if (step % opt.eval_every != 0 && step != opt.steps) return std::nullopt;
    return evaluate(enc, holdout, opt.eval).aggregate.mean_auc;
  };

  for (size_t step = 1; step <= opt.steps; ++step) {
    double loss_value;
    try {
      loss_value = train_step(enc, adam, train_data, opt, step);
    } catch (const Error& e) {
      throw Error("cli", "training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    TrainLogEntry entry{step, loss_value, std::nullopt};
    entry.auc = maybe_eval(step);
    if (entry.auc) result.final_auc = entry.auc;
    result.log.push_back(entry);
    result.steps_run = step;
    if (log_stream) {
      *log_stream << "step=" << step << " loss=" << evalkit::fmt(loss_value);
      if (entry.auc) *log_stream << " holdout_auc=" << evalkit::fmt(*entry.auc);
      *log_stream << "\n";
    }
    if (entry.auc && opt.stop_auc >= 0.0 && *entry.auc <= opt.stop_auc) break;
  }
  return result;
}

}  // namespace kws::train
