#pragma once

#include <functional>
#include <iostream>
#include <sstream>

#include "diva/adapt.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Knowledge distillation and surrogate construction.
//
// The teacher is a query-only function (batch of inputs -> batch of
// probability vectors), so surrogate building can never read victim
// parameters; the semi-blackbox path additionally receives the adapted
// model's public artifact (codes + scales) for initialization.
// ---------------------------------------------------------------------------

using TeacherFn = std::function<Tensor(const Tensor&)>;

struct DistillConfig {
  float temperature = 4.0f;  // softening temperature T
  float mix_lambda = 0.5f;   // weight of hard-label CE vs the KL term
  int epochs = 10;
  float lr = 0.05f;
  int qat_epochs = 2;        // blackbox path: surrogate adaptation budget
  float qat_lr = 0.05f;
  int bits = 8;
  std::string transfer_id;      // dataset identifier of the transfer set
  std::string victim_train_id;  // dataset identifier of the victim's training set
};

inline void validate_distill_config(const DistillConfig& cfg) {
  if (!(cfg.temperature > 0.0f)) throw ConfigError("distill temperature must be > 0");
  if (!(cfg.mix_lambda >= 0.0f && cfg.mix_lambda <= 1.0f))
    throw ConfigError("distill mix_lambda must be in [0,1]");
  if (cfg.epochs < 0) throw ConfigError("distill epochs must be >= 0");
  if (!cfg.transfer_id.empty() && cfg.transfer_id == cfg.victim_train_id)
    throw ConfigError("transfer set must be disjoint from the victim's training set (id '" +
                      cfg.transfer_id + "' is the victim's)");
}

inline Tensor softmax_with_temperature(const Tensor& logits, float temperature) {
  Tensor scaled = logits;
  for (float& v : scaled.data) v /= temperature;
  return softmax_probs(scaled);
}

// KL(p || q), natural log, summed over classes, averaged over rows.
inline float kl_divergence(const Tensor& p, const Tensor& q) {
  if (!same_shape(p, q)) throw ShapeError("kl_divergence: shape mismatch");
  int n = p.shape[0], k = p.shape[1];
  float total = 0.0f;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      float pi = p.data[static_cast<size_t>(i) * k + j];
      if (pi <= 0.0f) continue;
      float qi = std::max(q.data[static_cast<size_t>(i) * k + j], 1e-12f);
      total += pi * std::log(pi / qi);
    }
  }
  return total / static_cast<float>(n);
}

namespace detail {

// Distillation loss on one batch:
//   lambda * CE(student, argmax teacher)
//   + (1-lambda) * T^2 * KL(softmax(t_logits/T) || softmax(s_logits/T))
// with teacher logits recovered as log(probs + 1e-12). Returns the loss and
// fills d(loss)/d(student logits).
inline float distill_loss_and_dlogits(const Tensor& s_logits, const Tensor& t_probs,
                                      const DistillConfig& cfg, Tensor* dlogits) {
  int n = s_logits.shape[0], k = s_logits.shape[1];
  if (t_probs.shape != s_logits.shape) throw ShapeError("teacher/student shape mismatch");
  float T = cfg.temperature, lam = cfg.mix_lambda;

  Tensor t_logits = t_probs;
  for (float& v : t_logits.data) v = std::log(v + 1e-12f);
  Tensor pt = softmax_with_temperature(t_logits, T);
  Tensor ps = softmax_with_temperature(s_logits, T);
  Tensor p1 = softmax_probs(s_logits);

  std::vector<int> hard(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (t_probs.data[static_cast<size_t>(i) * k + j] >
          t_probs.data[static_cast<size_t>(i) * k + best])
        best = j;
    hard[static_cast<size_t>(i)] = best;
  }

  float ce = 0.0f;
  for (int i = 0; i < n; ++i)
    ce += -std::log(std::max(p1.data[static_cast<size_t>(i) * k + hard[static_cast<size_t>(i)]],
                             1e-12f));
  ce /= static_cast<float>(n);
  float kl = kl_divergence(pt, ps);
  float loss = lam * ce + (1.0f - lam) * T * T * kl;

  if (dlogits) {
    *dlogits = Tensor({n, k});
    float inv = 1.0f / static_cast<float>(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) {
        size_t idx = static_cast<size_t>(i) * k + j;
        float d_hard = p1.data[idx] - (j == hard[static_cast<size_t>(i)] ? 1.0f : 0.0f);
        // d/dz of T^2 * KL(pt || softmax(z/T)) = T * (ps - pt)
        float d_kl = T * (ps.data[idx] - pt.data[idx]);
        dlogits->data[idx] = (lam * d_hard + (1.0f - lam) * d_kl) * inv;
      }
    }
  }
  return loss;
}

}  // namespace detail

// Train `student` to match the teacher on the transfer set.
inline Model distill(const TeacherFn& teacher, Model student, const std::vector<Batch>& transfer,
                     const DistillConfig& cfg) {
  validate_distill_config(cfg);
  if (transfer.empty()) throw DataError("distill: empty transfer set");
  for (int e = 0; e < cfg.epochs; ++e) {
    for (size_t bi = 0; bi < transfer.size(); ++bi) {
      const Tensor& x = transfer[bi].inputs;
      Tensor t_probs = teacher(x);
      ForwardTape tape;
      Tensor s_logits = forward(student, x, &tape);
      Tensor dlogits;
      float loss = detail::distill_loss_and_dlogits(s_logits, t_probs, cfg, &dlogits);
      if (!std::isfinite(loss))
        throw NumericalError("distill: non-finite loss at epoch " + std::to_string(e) +
                             ", batch " + std::to_string(bi));
      std::map<std::string, Tensor> grads;
      backward(student, tape, dlogits, &grads);
      for (auto& [name, g] : grads) axpy(-cfg.lr, g, student.param(name));
    }
  }
  return student;
}

inline TeacherFn teacher_from(const AdaptedModel& victim) {
  return [&victim](const Tensor& inputs) { return softmax_probs(adapted_logits(victim, inputs)); };
}

inline TeacherFn teacher_from(const Model& victim) {
  return [&victim](const Tensor& inputs) { return softmax_probs(forward(victim, inputs)); };
}

// Architecture copy with parameters taken from the adapted model's public
// artifact: dequantized codes for quantized modes, masked weights for pruned.
inline Model dequantized_clone(const AdaptedModel& am) {
  Model m = am.base;
  if (am.is_quantized()) {
    for (auto& [name, t] : m.params) {
      auto it = am.wq.find(name);
      if (it == am.wq.end()) throw ConfigError("adapted model has no codes for " + name);
      t = it->second.deq;
    }
  }
  return m;
}

// Semi-blackbox: the attacker holds the adapted artifact, reconstructs a
// full-precision surrogate of the hidden original, and pairs it with the true
// adapted model.
inline ModelPair build_semi_blackbox(const AdaptedModel& adapted,
                                     const std::vector<Batch>& transfer,
                                     const DistillConfig& cfg) {
  validate_distill_config(cfg);
  Model student = dequantized_clone(adapted);
  if (cfg.epochs > 0) student = distill(teacher_from(adapted), std::move(student), transfer, cfg);
  return make_model_pair(std::move(student), adapted);
}

// Blackbox: query access only. Distill a full-precision surrogate from the
// queries, then adapt it with QAT; the resulting all-surrogate pair stands in
// for the hidden victim pair.
inline ModelPair build_blackbox(const TeacherFn& adapted_query, const Model& arch_hint,
                                const std::vector<Batch>& transfer, const DistillConfig& cfg,
                                Rng& rng) {
  if (transfer.empty()) throw DataError("build_blackbox: empty transfer predictions");
  Model student = arch_hint;
  init_he_uniform(student, rng);
  student = distill(adapted_query, std::move(student), transfer, cfg);
  AdaptedModel surrogate_adapted =
      qat_train(student, transfer, cfg.qat_lr, cfg.qat_epochs, cfg.bits);
  return make_model_pair(std::move(student), std::move(surrogate_adapted));
}

// ---------------------------------------------------------------------------
// Line-delimited teacher protocol over streams, so a victim model can live in
// a separate process. One sample per request:
//   request:  "q <v0> <v1> ... <v_{d-1}>"
//   response: "p <p0> ... <p_{K-1}>"
//   "quit" ends the session; a malformed request gets "err <reason>".
// ---------------------------------------------------------------------------

inline void serve_teacher(const AdaptedModel& victim, std::istream& in, std::ostream& out) {
  size_t d = numel_of(victim.base.input_shape);
  std::string line;
  while (std::getline(in, line)) {
    if (line == "quit") break;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "q") {
      out << "err expected 'q' or 'quit'\n" << std::flush;
      continue;
    }
    std::vector<float> vals;
    vals.reserve(d);
    float v;
    while (ls >> v) vals.push_back(v);
    if (vals.size() != d) {
      out << "err expected " << d << " values, got " << vals.size() << "\n" << std::flush;
      continue;
    }
    Tensor x(batch_shape(victim.base.input_shape, 1), std::move(vals));
    Tensor p = softmax_probs(adapted_logits(victim, x));
    out << "p";
    char buf[32];
    for (size_t i = 0; i < p.numel(); ++i) {
      std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(p.data[i]));
      out << buf;
    }
    out << "\n" << std::flush;
  }
}

// Client side of the protocol; batches are sent one sample at a time.
inline TeacherFn stdio_teacher_client(std::istream& from, std::ostream& to,
                                      std::vector<int> input_shape, int num_classes) {
  size_t d = numel_of(input_shape);
  return [&from, &to, d, num_classes](const Tensor& inputs) {
    int n = inputs.shape[0];
    Tensor probs({n, num_classes});
    char buf[32];
    for (int i = 0; i < n; ++i) {
      to << "q";
      for (size_t j = 0; j < d; ++j) {
        std::snprintf(buf, sizeof buf, " %.9g",
                      static_cast<double>(inputs.data[static_cast<size_t>(i) * d + j]));
        to << buf;
      }
      to << "\n" << std::flush;
      std::string line;
      if (!std::getline(from, line)) throw DataError("teacher stream closed mid-session");
      std::istringstream ls(line);
      std::string tag;
      ls >> tag;
      if (tag != "p") throw DataError("teacher error: " + line);
      for (int j = 0; j < num_classes; ++j) {
        float v;
        if (!(ls >> v)) throw DataError("teacher response too short");
        probs.data[static_cast<size_t>(i) * num_classes + j] = v;
      }
    }
    return probs;
  };
}

}  // namespace diva
