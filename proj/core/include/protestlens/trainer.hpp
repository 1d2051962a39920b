#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protestlens/adamw.hpp"
#include "protestlens/corpus.hpp"
#include "protestlens/ops.hpp"
#include "protestlens/tensor.hpp"
#include "protestlens/text_model.hpp"
#include "protestlens/vision_model.hpp"

namespace protestlens {

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  std::string schedule = "warmup_linear";  // or "constant"
  std::uint32_t seed = 7;
  std::size_t patience = 3;
  std::vector<float> class_weights;  // empty = unweighted
  std::size_t eval_every = 50;
  double weight_decay = 0.01;
  double threshold = 0.5;

  void validate() const {
    if (epochs == 0) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
    if (patience == 0) throw ConfigError("train config: patience must be >= 1");
    if (eval_every == 0) throw ConfigError("train config: eval_every must be >= 1");
    if (lr < 0.0) throw ConfigError("train config: lr must be >= 0");
    if (schedule != "constant" && schedule != "warmup_linear") {
      throw ConfigError("train config: unknown schedule '" + schedule +
                        "' (want constant or warmup_linear)");
    }
    if (threshold <= 0.0 || threshold >= 1.0) {
      throw ConfigError("train config: threshold must lie in (0, 1)");
    }
  }
};

struct EvalReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t n = 0;
  double threshold = 0.5;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"accuracy", r.accuracy}, {"precision", r.precision},
                     {"recall", r.recall},     {"f1", r.f1},
                     {"tp", r.tp},             {"fp", r.fp},
                     {"tn", r.tn},             {"fn", r.fn},
                     {"n", r.n},               {"threshold", r.threshold}};
}

/// Confusion-count metrics; precision/recall/F1 fall back to 0 (never NaN)
/// when their denominators are empty.
inline EvalReport binary_report(const std::vector<double>& probs,
                                const std::vector<int>& labels, double threshold) {
  if (probs.size() != labels.size()) {
    throw ValueError("metrics: " + std::to_string(probs.size()) + " probabilities vs " +
                     std::to_string(labels.size()) + " labels");
  }
  EvalReport r;
  r.threshold = threshold;
  r.n = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) ++r.tp;
    else if (pred && !truth) ++r.fp;
    else if (!pred && truth) ++r.fn;
    else ++r.tn;
  }
  if (r.n > 0) r.accuracy = double(r.tp + r.tn) / double(r.n);
  if (r.tp + r.fp > 0) r.precision = double(r.tp) / double(r.tp + r.fp);
  if (r.tp + r.fn > 0) r.recall = double(r.tp) / double(r.tp + r.fn);
  if (r.precision + r.recall > 0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

struct HistoryRow {
  std::size_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  std::optional<EvalReport> metrics;
};

inline void write_history_csv(const std::string& path,
                              const std::vector<HistoryRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write history file: " + path);
  out << "step,split,loss,accuracy,precision,recall,f1\n";
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const HistoryRow& row : rows) {
    out << row.step << ',' << row.split << ',' << fmt(row.loss);
    if (row.metrics) {
      out << ',' << fmt(row.metrics->accuracy) << ',' << fmt(row.metrics->precision)
          << ',' << fmt(row.metrics->recall) << ',' << fmt(row.metrics->f1);
    } else {
      out << ",,,,";
    }
    out << '\n';
  }
}

struct TrainResult {
  std::vector<HistoryRow> history;
  EvalReport best_val;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

namespace detail {

inline double scheduled_lr(const TrainConfig& cfg, std::size_t step,
                           std::size_t total_steps) {
  if (cfg.schedule == "constant") return cfg.lr;
  const std::size_t warmup =
      std::max<std::size_t>(1, static_cast<std::size_t>(0.05 * double(total_steps)));
  const double current = double(step - 1);  // 0-based position
  if (current < double(warmup)) return cfg.lr * (current + 1.0) / double(warmup);
  const double span = std::max(1.0, double(total_steps) - double(warmup));
  return cfg.lr * (double(total_steps) - current) / span;
}

}  // namespace detail

/// Shared mini-batch loop: seeded shuffling, scheduled AdamW steps,
/// periodic validation with early stopping, best-weight restoration.
/// `batch_loss` must build the loss for one batch on the active tape;
/// `eval_val` scores the validation split (accuracy drives early stop).
inline TrainResult run_training(
    std::vector<Tensor<float>> params, std::size_t n_train, const TrainConfig& cfg,
    const std::function<Tensor<float>(std::span<const std::size_t>, std::mt19937&)>& batch_loss,
    const std::function<EvalReport()>& eval_val) {
  cfg.validate();
  if (n_train == 0) throw ValueError("training requires a non-empty train split");
  if (params.empty()) throw ValueError("training requires at least one parameter");

  for (Tensor<float>& p : params) p.set_requires_grad(true);
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr > 0.0 ? cfg.lr : 1.0;  // per-step lr overrides; keep config valid
  ocfg.weight_decay = cfg.weight_decay;
  AdamW<float> opt(params, ocfg);

  const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  std::mt19937 rng(cfg.seed);
  std::vector<std::size_t> indices(n_train);
  for (std::size_t i = 0; i < n_train; ++i) indices[i] = i;

  TrainResult result;
  auto snapshot = [&params] {
    std::vector<std::vector<float>> snap;
    snap.reserve(params.size());
    for (const Tensor<float>& p : params) {
      auto v = p.data();
      snap.emplace_back(v.begin(), v.end());
    }
    return snap;
  };
  std::vector<std::vector<float>> best_weights = snapshot();
  double best_acc = -1.0;
  std::size_t evals_without_improvement = 0;
  std::size_t last_eval_step = 0;
  bool stop = false;
  std::size_t step = 0;

  auto run_eval = [&] {
    const EvalReport rep = eval_val();
    HistoryRow row;
    row.step = step;
    row.split = "val";
    row.loss = 0.0;
    row.metrics = rep;
    result.history.push_back(row);
    last_eval_step = step;
    if (rep.accuracy > best_acc) {
      best_acc = rep.accuracy;
      best_weights = snapshot();
      result.best_val = rep;
      result.best_step = step;
      evals_without_improvement = 0;
    } else if (++evals_without_improvement >= cfg.patience) {
      stop = true;
      result.early_stopped = true;
    }
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    for (std::size_t i = n_train; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> dist(0, i - 1);
      std::swap(indices[i - 1], indices[dist(rng)]);
    }
    for (std::size_t at = 0; at < n_train && !stop; at += cfg.batch_size) {
      const std::size_t take = std::min(cfg.batch_size, n_train - at);
      ++step;
      const double lr_t = cfg.lr > 0.0 ? detail::scheduled_lr(cfg, step, total_steps) : 0.0;

      GradientTape<float> tape;
      Tensor<float> loss =
          batch_loss(std::span<const std::size_t>(indices.data() + at, take), rng);
      const float loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("training aborted: non-finite loss at step " +
                           std::to_string(step));
      }
      tape.backward(loss);
      opt.step(lr_t);
      opt.zero_grad();

      HistoryRow row;
      row.step = step;
      row.split = "train";
      row.loss = loss_value;
      result.history.push_back(row);

      if (step % cfg.eval_every == 0) run_eval();
    }
  }
  result.steps_run = step;
  if (!stop && last_eval_step != step) run_eval();

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].data();
    std::copy(best_weights[i].begin(), best_weights[i].end(), v.begin());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Text driver

struct TextDataset {
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;

  std::size_t size() const { return seqs.size(); }
};

inline TextDataset encode_corpus(const std::vector<LabeledExample>& examples,
                                 const Vocabulary& vocab, const TextModelConfig& config) {
  TextDataset ds;
  ds.seqs.reserve(examples.size());
  ds.labels.reserve(examples.size());
  for (const LabeledExample& ex : examples) {
    ds.seqs.push_back(encode_text(ex.text, vocab, config));
    ds.labels.push_back(ex.label);
  }
  return ds;
}

/// Protest probability from an inference-mode forward.
inline double text_probability(const TextModel<float>& model, const TokenSequence& seq) {
  std::mt19937 rng(0);
  Tensor<float> logits = text_logits(seq, model, /*training=*/false, rng);
  auto lv = logits.data();
  const double mx = std::max(lv[0], lv[1]);
  const double e0 = std::exp(lv[0] - mx), e1 = std::exp(lv[1] - mx);
  return e1 / (e0 + e1);
}

inline EvalReport evaluate_text(const TextModel<float>& model, const TextDataset& ds,
                                double threshold) {
  if (ds.size() == 0) throw ValueError("evaluation split is empty");
  std::vector<double> probs;
  probs.reserve(ds.size());
  for (const TokenSequence& seq : ds.seqs) probs.push_back(text_probability(model, seq));
  return binary_report(probs, ds.labels, threshold);
}

inline TrainResult train_text_model(TextModel<float>& model, const TextDataset& train,
                                    const TextDataset& val, const TrainConfig& cfg) {
  if (!cfg.class_weights.empty() && cfg.class_weights.size() != 2) {
    throw ConfigError("text training expects exactly 2 class weights");
  }
  const std::vector<float> weights = cfg.class_weights;
  auto batch_loss = [&model, &train, &weights](std::span<const std::size_t> batch,
                                               std::mt19937& rng) {
    std::vector<Tensor<float>> rows;
    std::vector<std::size_t> targets;
    rows.reserve(batch.size());
    targets.reserve(batch.size());
    for (std::size_t idx : batch) {
      rows.push_back(text_logits(train.seqs[idx], model, /*training=*/true, rng));
      targets.push_back(static_cast<std::size_t>(train.labels[idx]));
    }
    return cross_entropy_logits(concat_rows(rows), targets, weights);
  };
  auto eval_val = [&model, &val, &cfg] {
    return evaluate_text(model, val, cfg.threshold);
  };
  return run_training(model.params(), train.size(), cfg, batch_loss, eval_val);
}

// ---------------------------------------------------------------------------
// Vision driver

struct VisionDataset {
  std::vector<Tensor<float>> images;
  std::vector<std::vector<float>> labels;  // per-attribute targets
  std::vector<std::vector<float>> masks;   // 1 = labeled, 0 = absent

  std::size_t size() const { return images.size(); }
};

struct VisionEvalReport {
  std::map<std::string, EvalReport> heads;
  EvalReport protest;
};

inline void to_json(nlohmann::json& j, const VisionEvalReport& r) {
  j = nlohmann::json::object();
  for (const auto& [name, rep] : r.heads) j[name] = rep;
}

inline std::vector<double> vision_probabilities(const VisionModel<float>& model,
                                                const Tensor<float>& image) {
  Tensor<float> logits = vision_logits(image, model);
  auto lv = logits.data();
  std::vector<double> probs(lv.size());
  for (std::size_t i = 0; i < lv.size(); ++i) {
    probs[i] = sigmoid_value(static_cast<double>(lv[i]));
  }
  return probs;
}

/// Per-attribute metrics with absent labels masked out of the counts.
inline VisionEvalReport evaluate_vision(const VisionModel<float>& model,
                                        const VisionDataset& ds, double threshold) {
  if (ds.size() == 0) throw ValueError("evaluation split is empty");
  const auto& attrs = model.config.attribute_heads;
  std::vector<std::vector<double>> probs(attrs.size());
  std::vector<std::vector<int>> labels(attrs.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::vector<double> p = vision_probabilities(model, ds.images[i]);
    for (std::size_t a = 0; a < attrs.size(); ++a) {
      if (ds.masks[i][a] == 0.0f) continue;
      probs[a].push_back(p[a]);
      labels[a].push_back(ds.labels[i][a] >= 0.5f ? 1 : 0);
    }
  }
  VisionEvalReport report;
  for (std::size_t a = 0; a < attrs.size(); ++a) {
    report.heads[attrs[a]] = binary_report(probs[a], labels[a], threshold);
    if (attrs[a] == "protest") report.protest = report.heads[attrs[a]];
  }
  return report;
}

inline TrainResult train_vision_model(VisionModel<float>& model,
                                      const VisionDataset& train,
                                      const VisionDataset& val, const TrainConfig& cfg) {
  const std::size_t n_attr = model.config.attribute_heads.size();
  auto batch_loss = [&model, &train, n_attr](std::span<const std::size_t> batch,
                                             std::mt19937&) {
    std::vector<Tensor<float>> rows;
    rows.reserve(batch.size());
    std::vector<float> targets, mask;
    targets.reserve(batch.size() * n_attr);
    mask.reserve(batch.size() * n_attr);
    for (std::size_t idx : batch) {
      rows.push_back(vision_logits(train.images[idx], model));
      targets.insert(targets.end(), train.labels[idx].begin(), train.labels[idx].end());
      mask.insert(mask.end(), train.masks[idx].begin(), train.masks[idx].end());
    }
    Tensor<float> logits = concat_rows(rows);
    Tensor<float> t = Tensor<float>::from({batch.size(), n_attr}, std::move(targets));
    Tensor<float> m = Tensor<float>::from({batch.size(), n_attr}, std::move(mask));
    return bce_with_logits_masked(logits, t, m);
  };
  auto eval_val = [&model, &val, &cfg] {
    return evaluate_vision(model, val, cfg.threshold).protest;
  };
  return run_training(model.params(), train.size(), cfg, batch_loss, eval_val);
}

}  // namespace protestlens
