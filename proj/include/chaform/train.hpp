#pragma once

// Optimizer loop for the toy parser: AdamW with linear warmup + cosine decay,
// per-step loss trace, deterministic batch sampling, and an early stop once
// the model reproduces the training corpus under teacher forcing.

#include <chaform/decoder_model.hpp>
#include <chaform/train_data.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace chaform {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
  int steps = 200;
  int batch_size = 8;
  double lr = 3e-4;
  int warmup = 20;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  bool early_stop = true;  // stop once teacher-forced accuracy reaches 1
  int check_every = 25;    // cadence of the accuracy probe (steps)
};

struct TraceRow {
  int step = 0;
  double seq2seq = 0;
  double pointer = 0;
  double total = 0;
};

// linear warmup to `lr`, then cosine decay to zero at `total` (1-based step)
inline double lr_at_step(int step, int total, int warmup, double lr) {
  if (warmup > 0 && step <= warmup) return lr * static_cast<double>(step) / warmup;
  if (total <= warmup) return lr;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr * 0.5 * (1.0 + std::cos(progress * M_PI));
}

class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, nn::Var>>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [name, p] : params) {
      auto& [m, v] = state_[name];
      if (m.size() == 0) {
        m = nn::Mat::Zero(p->value.rows(), p->value.cols());
        v = nn::Mat::Zero(p->value.rows(), p->value.cols());
      }
      // a parameter outside the active graph simply has zero gradient
      nn::Mat g = p->grad.size() ? p->grad : nn::Mat::Zero(p->value.rows(), p->value.cols());
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      nn::Mat update = (m / bc1).array() / ((v / bc2).array().sqrt() + eps_);
      p->value -= lr * (update + wd_ * p->value);
      p->grad = nn::Mat();
    }
  }

  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  int t_ = 0;
  std::map<std::string, std::pair<nn::Mat, nn::Mat>> state_;
};

// ---- teacher-forced accuracy ----

struct Accuracy {
  int tokens_total = 0;
  int tokens_correct = 0;
  int pointers_total = 0;
  int pointers_correct = 0;
  double overall() const {
    int total = tokens_total + pointers_total;
    return total == 0 ? 1.0 : static_cast<double>(tokens_correct + pointers_correct) / total;
  }
};

namespace detail {
inline int argmax_row(const nn::Mat& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

inline void score_pointer_rows(const nn::Var& probs, const std::vector<int>& targets,
                               Accuracy& acc) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    ++acc.pointers_total;
    acc.pointers_correct +=
        argmax_row(probs->value, static_cast<Eigen::Index>(i)) == targets[i];
  }
}
}  // namespace detail

inline Accuracy teacher_forced_accuracy(const Model& model,
                                        const std::vector<EncodedExample>& corpus) {
  nn::NoGradGuard guard;
  Accuracy acc;
  for (const EncodedExample& ex : corpus) {
    Model::DecodeOut out = model.forward_example(ex);
    for (std::size_t i = 0; i < ex.labels.size(); ++i) {
      ++acc.tokens_total;
      acc.tokens_correct +=
          detail::argmax_row(out.logits->value, static_cast<Eigen::Index>(i)) == ex.labels[i];
    }
    detail::score_pointer_rows(out.coref_probs, ex.coref_tgt, acc);
    if (model.cfg.kind == FormKind::BottomUp)
      detail::score_pointer_rows(out.struct_probs, ex.struct_tgt, acc);
  }
  return acc;
}

// ---- the loop ----

struct TrainResult {
  std::vector<TraceRow> trace;
  int steps_run = 0;
  bool early_stopped = false;
  Accuracy final_accuracy;
};

inline TrainResult train_model(Model& model, const std::vector<EncodedExample>& corpus,
                               const TrainConfig& tc, std::ostream* log = nullptr) {
  if (corpus.empty()) throw TrainError("training corpus is empty");
  if (tc.steps < 0 || tc.batch_size <= 0) throw TrainError("invalid training configuration");
  AdamW opt(0.9, 0.999, 1e-8, tc.weight_decay);
  std::mt19937_64 rng(tc.seed);
  TrainResult result;
  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<EncodedExample> batch;
    batch.reserve(static_cast<std::size_t>(tc.batch_size));
    for (int b = 0; b < tc.batch_size; ++b)
      batch.push_back(corpus[static_cast<std::size_t>(rng() % corpus.size())]);
    LossBreakdown lb = model.loss_on_batch(batch);
    if (!std::isfinite(lb.total))
      throw TrainError("training diverged (non-finite loss) at step " + std::to_string(step));
    nn::backward(lb.total_var);
    opt.step(model.params.entries(), lr_at_step(step, tc.steps, tc.warmup, tc.lr));
    result.trace.push_back({step, lb.seq2seq, lb.pointer, lb.total});
    result.steps_run = step;
    if (log && (step % 50 == 0 || step == 1))
      (*log) << "step " << step << " total " << lb.total << " seq " << lb.seq2seq << " ptr "
             << lb.pointer << "\n";
    if (tc.early_stop && (step % tc.check_every == 0 || step == tc.steps)) {
      Accuracy acc = teacher_forced_accuracy(model, corpus);
      if (acc.overall() >= 1.0) {
        result.early_stopped = step < tc.steps;
        result.final_accuracy = acc;
        if (log) (*log) << "early stop at step " << step << ": corpus reproduced\n";
        return result;
      }
    }
  }
  result.final_accuracy = teacher_forced_accuracy(model, corpus);
  return result;
}

inline void write_trace(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw TrainError("cannot write trace: " + path);
  out << "step,seq2seq,pointer,total\n";
  char buf[128];
  for (const TraceRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.step, r.seq2seq, r.pointer,
                  r.total);
    out << buf;
  }
}

}  // namespace chaform
