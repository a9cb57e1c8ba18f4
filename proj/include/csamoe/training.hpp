#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "csamoe/dataset.hpp"
#include "csamoe/errors.hpp"
#include "csamoe/metrics.hpp"
#include "csamoe/moe.hpp"
#include "csamoe/ops.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

namespace csamoe {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 5e-5;
  double weight_decay = 0.0;
  double lr_factor = 0.5;
  std::size_t patience = 3;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
  Preset preset = Preset::tiny;
  Variant variant = Variant::csa_moe;
  bool drop_tumor = false;
  bool drop_boundary = false;
  bool augment = true;
  std::size_t workers = 4;
  bool log_alpha = false;
  bool log_channel_weights = false;

  ModelConfig model() const {
    ModelConfig m;
    m.preset = preset;
    m.variant = variant;
    m.drop_tumor = drop_tumor;
    m.drop_boundary = drop_boundary;
    return m;
  }

  void validate() const {
    if (epochs == 0) throw UsageError("epochs must be at least 1");
    if (batch_size == 0) throw UsageError("batch_size must be at least 1");
    if (!(lr > 0)) throw UsageError("lr must be positive");
    if (!(min_lr <= lr)) throw UsageError("min_lr must not exceed lr");
    if (patience < 1) throw UsageError("patience must be at least 1");
    if (!(lr_factor > 0 && lr_factor < 1)) throw UsageError("lr_factor must lie in (0,1)");
    if (weight_decay < 0) throw UsageError("weight_decay must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Optimizer and schedule

/// Adam with bias correction; weight_decay adds an L2 term to the gradient.
template <class T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;

  std::uint64_t steps() const { return step_; }

  void step(ParamSet<T>& params, double lr) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) throw UsageError("no gradient for parameter " + name);
      auto& st = moments_[name];
      if (st.m.empty()) {
        st.m.assign(p.numel(), 0.0);
        st.v.assign(p.numel(), 0.0);
      }
      auto data = p.mutable_data();
      const auto grad = p.grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        double g = static_cast<double>(grad[i]);
        if (weight_decay != 0.0) g += weight_decay * static_cast<double>(data[i]);
        st.m[i] = beta1 * st.m[i] + (1 - beta1) * g;
        st.v[i] = beta2 * st.v[i] + (1 - beta2) * g * g;
        const double update = lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
        if (update != 0.0) data[i] = static_cast<T>(static_cast<double>(data[i]) - update);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> moments_;
  std::uint64_t step_ = 0;
};

/// Halves (by `factor`) the rate after `patience` epochs without a strict
/// validation-loss improvement, never below min_lr.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.5, std::size_t patience = 3, double min_lr = 1e-6)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_; }

  /// Returns true when the rate was reduced.
  bool step(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      bad_ = 0;
      return false;
    }
    if (++bad_ < patience_) return false;
    bad_ = 0;
    const double next = std::max(lr_ * factor_, min_lr_);
    const bool reduced = next < lr_;
    lr_ = next;
    return reduced;
  }

 private:
  double lr_, factor_;
  std::size_t patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

/// Keeps a value copy of the model state from the best-validation-accuracy
/// epoch (the first one on ties).
template <class T>
class EarlyStop {
 public:
  bool update(double val_accuracy, std::size_t epoch, const ParamSet<T>& state) {
    if (has_ && !(val_accuracy > best_)) return false;
    has_ = true;
    best_ = val_accuracy;
    epoch_ = epoch;
    snapshot_.clear();
    for (const auto& [name, t] : state) snapshot_[name].assign(t.data().begin(), t.data().end());
    return true;
  }

  void restore(ParamSet<T>& state) const {
    for (auto& [name, t] : state) {
      const auto& v = snapshot_.at(name);
      std::copy(v.begin(), v.end(), t.mutable_data().begin());
    }
  }

  bool has_snapshot() const { return has_; }
  double best_accuracy() const { return best_; }
  std::size_t best_epoch() const { return epoch_; }

 private:
  bool has_ = false;
  double best_ = 0;
  std::size_t epoch_ = 0;
  std::map<std::string, std::vector<T>> snapshot_;
};

// ---------------------------------------------------------------------------
// Logs

struct EpochLog {
  std::size_t epoch = 0;  // 0-based
  std::string part;       // train | val
  double loss = 0, accuracy = 0;
  std::array<double, 3> gate{0, 0, 0};  // img, tumor, boundary
  double lr = 0;
};

struct AlphaLog {
  std::size_t epoch = 0;
  std::string part;
  std::size_t batch = 0;
  std::string expert;
  std::array<double, 4> alpha{};  // batch mean
};

struct ChannelLog {
  std::size_t epoch = 0;
  std::string part;
  std::size_t batch = 0;
  std::string expert;
  std::vector<double> weights;  // batch mean per channel
};

inline std::string epoch_log_csv(const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os << "epoch,part,loss,accuracy,gate_img,gate_tumor,gate_boundary,lr\n";
  for (const auto& l : logs)
    os << l.epoch << ',' << l.part << ',' << detail::fmt(l.loss) << ',' << detail::fmt(l.accuracy)
       << ',' << detail::fmt(l.gate[0]) << ',' << detail::fmt(l.gate[1]) << ','
       << detail::fmt(l.gate[2]) << ',' << detail::fmt(l.lr) << '\n';
  return os.str();
}

inline std::string alpha_log_csv(const std::vector<AlphaLog>& logs) {
  std::ostringstream os;
  os << "epoch,part,batch,expert,alpha_1,alpha_2,alpha_3,alpha_4\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << l.part << ',' << l.batch << ',' << l.expert;
    for (double a : l.alpha) os << ',' << detail::fmt(a);
    os << '\n';
  }
  return os.str();
}

/// Long format: epoch,part,batch,expert,channel,weight
inline std::string channel_log_csv(const std::vector<ChannelLog>& logs) {
  std::ostringstream os;
  os << "epoch,part,batch,expert,channel,weight\n";
  for (const auto& l : logs)
    for (std::size_t c = 0; c < l.weights.size(); ++c)
      os << l.epoch << ',' << l.part << ',' << l.batch << ',' << l.expert << ',' << c << ','
         << detail::fmt(l.weights[c]) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation and the epoch loop

struct PassResult {
  double loss = 0, accuracy = 0;
  std::array<double, 3> gate{0, 0, 0};
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> ids;
};

namespace detail {

template <class T>
void accumulate(PassResult& r, const ModelOutput<T>& out, const MultiViewBatch<T>& batch, double loss,
                std::size_t& gate_rows) {
  const std::size_t B = batch.size();
  r.loss += loss * static_cast<double>(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double p = static_cast<double>(out.prob[b]);
    const int y = batch.labels[b] > T(0.5) ? 1 : 0;
    r.scores.push_back(p);
    r.labels.push_back(y);
    r.ids.push_back(batch.ids.empty() ? std::string() : batch.ids[b]);
    if ((p >= 0.5 ? 1 : 0) == y) r.accuracy += 1;
    for (std::size_t e = 0; e < 3; ++e) r.gate[e] += static_cast<double>(out.gate[b * 3 + e]);
  }
  gate_rows += B;
}

inline void finish(PassResult& r, std::size_t rows) {
  if (rows == 0) return;
  const double n = static_cast<double>(rows);
  r.loss /= n;
  r.accuracy /= n;
  for (auto& g : r.gate) g /= n;
}

template <class T>
void log_traces(const ModelOutput<T>& out, const ModelConfig& cfg, std::size_t epoch,
                const std::string& part, std::size_t batch, std::vector<AlphaLog>* alpha,
                std::vector<ChannelLog>* channels) {
  if (!cfg.uses_csa()) return;
  for (std::size_t e : cfg.active_experts()) {
    const auto& tr = out.traces[e];
    if (!tr.alpha.defined()) continue;
    const std::size_t B = tr.alpha.dim(0);
    if (alpha) {
      AlphaLog l{epoch, part, batch, kExpertNames[e], {}};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < 4; ++k) l.alpha[k] += static_cast<double>(tr.alpha[b * 4 + k]) / B;
      alpha->push_back(l);
    }
    if (channels) {
      const std::size_t C = tr.channel_weights.dim(1);
      ChannelLog l{epoch, part, batch, kExpertNames[e], std::vector<double>(C, 0.0)};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          l.weights[c] += static_cast<double>(tr.channel_weights[b * C + c]) / B;
      channels->push_back(l);
    }
  }
}

}  // namespace detail

/// Eval-mode pass over ordered batches (no tape, no parameter updates).
template <class T>
PassResult evaluate(CsaMoeModel<T>& model, const std::vector<MultiViewBatch<T>>& batches,
                    std::vector<AlphaLog>* alpha = nullptr, std::vector<ChannelLog>* channels = nullptr,
                    std::size_t epoch = 0, const std::string& part = "val") {
  PassResult r;
  std::size_t rows = 0;
  Rng unused(0);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto out = model(batches[i], false, unused);
    const double loss = static_cast<double>(bce_loss<T>(out.prob, batches[i].labels).item());
    detail::accumulate(r, out, batches[i], loss, rows);
    detail::log_traces(out, model.config(), epoch, part, i, alpha, channels);
  }
  detail::finish(r, rows);
  return r;
}

struct FitResult {
  std::vector<EpochLog> logs;
  std::vector<AlphaLog> alpha;
  std::vector<ChannelLog> channels;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  std::vector<std::string> warnings;
};

/// Callback invoked after every epoch with the two new log rows.
using EpochCallback = std::function<void(const EpochLog& train, const EpochLog& val)>;

/// Trains with shuffled, augmented batches, validates in eval mode each epoch,
/// steps the plateau scheduler on validation loss, and finally restores the
/// best-validation-accuracy snapshot into `model`.
template <class T>
FitResult fit(const TrainConfig& cfg, const Split& split, CsaMoeModel<T>& model,
              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  FitResult res;
  ParamSet<T> params = model.parameters();
  ParamSet<T> state = model.state();
  Adam<T> adam;
  adam.weight_decay = cfg.weight_decay;
  PlateauScheduler sched(cfg.lr, cfg.lr_factor, cfg.patience, cfg.min_lr);
  EarlyStop<T> best;

  const auto val_views = precompute_views<T>(split.val, cfg.workers, &res.warnings);
  const auto val_batches = ordered_batches(val_views, cfg.batch_size);
  BatchOptions bo;
  bo.batch_size = cfg.batch_size;
  bo.shuffle = true;
  bo.augment = cfg.augment;
  bo.workers = cfg.workers;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = sched.lr();
    BatchIterator<T> it(split.train, bo, cfg.seed, epoch);
    PassResult tr;
    std::size_t rows = 0;
    for (std::size_t bi = 0; bi < it.size(); ++bi) {
      const auto batch = it.batch(bi);
      if (batch.size() == 0) continue;
      params.zero_grad();
      Tape<T> tape;
      double loss_value;
      ModelOutput<T> out;
      {
        TapeScope<T> scope(tape);
        Rng drop = make_stream(cfg.seed, Stream::dropout, epoch, bi);
        out = model(batch, true, drop);
        const Tensor<T> loss = bce_loss<T>(out.prob, batch.labels);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
          std::ostringstream msg;
          msg << "non-finite training loss at epoch " << epoch << ", batch " << bi << ", lr " << lr;
          throw NumericalError(msg.str());
        }
        tape.backward(loss);
      }
      adam.step(params, lr);
      detail::accumulate(tr, out, batch, loss_value, rows);
      detail::log_traces(out, model.config(), epoch, "train", bi,
                         cfg.log_alpha ? &res.alpha : nullptr,
                         cfg.log_channel_weights ? &res.channels : nullptr);
    }
    detail::finish(tr, rows);
    for (const auto& w : it.warnings()) res.warnings.push_back(w);

    const PassResult va = evaluate(model, val_batches, cfg.log_alpha ? &res.alpha : nullptr,
                                   cfg.log_channel_weights ? &res.channels : nullptr, epoch, "val");
    if (!std::isfinite(va.loss)) {
      std::ostringstream msg;
      msg << "non-finite validation loss at epoch " << epoch << ", lr " << lr;
      throw NumericalError(msg.str());
    }
    const EpochLog tl{epoch, "train", tr.loss, tr.accuracy, tr.gate, lr};
    const EpochLog vl{epoch, "val", va.loss, va.accuracy, va.gate, lr};
    res.logs.push_back(tl);
    res.logs.push_back(vl);
    best.update(va.accuracy, epoch, state);
    sched.step(va.loss);
    if (on_epoch) on_epoch(tl, vl);
  }
  best.restore(state);
  res.best_epoch = best.best_epoch();
  res.best_val_accuracy = best.best_accuracy();
  return res;
}

/// Test-part evaluation of a trained model: metrics plus the ROC curve.
template <class T>
std::pair<MetricsReport, RocResult> test_metrics(CsaMoeModel<T>& model, const std::vector<Sample>& part,
                                                 std::size_t batch_size, std::size_t workers = 1,
                                                 PassResult* pass = nullptr) {
  const auto views = precompute_views<T>(part, workers);
  const auto r = evaluate(model, ordered_batches(views, batch_size), nullptr, nullptr, 0, "test");
  if (pass) *pass = r;
  return {evaluate_scores(r.scores, r.labels), roc_auc(r.scores, r.labels)};
}

}  // namespace csamoe
