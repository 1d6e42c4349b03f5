#pragma once

#include <chrono>
#include <cmath>

#include "diva/data.hpp"
#include "diva/differential.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// DSSIM = (1 - SSIM)/2. SSIM uses 7x7 uniform windows, stride 1, windows
// fully inside the image, constants C1=0.01^2 and C2=0.03^2 on the [0,1]
// range, averaged over window positions and channels.
// ---------------------------------------------------------------------------

inline float dssim(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("dssim: shape mismatch");
  if (a.shape.size() != 3) throw ShapeError("dssim: expected an [H,W,C] image");
  int h = a.shape[0], w = a.shape[1], c = a.shape[2];
  constexpr int win = 7;
  if (h < win || w < win)
    throw ShapeError("dssim: image smaller than the 7x7 window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const double inv_n = 1.0 / (win * win);
  double total = 0.0;
  long long count = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y + win <= h; ++y) {
      for (int x = 0; x + win <= w; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < win; ++dy) {
          for (int dx = 0; dx < win; ++dx) {
            size_t idx = ((static_cast<size_t>(y + dy) * w) + (x + dx)) * c + ch;
            double va = a.data[idx], vb = b.data[idx];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        }
        double ma = sa * inv_n, mb = sb * inv_n;
        double va = saa * inv_n - ma * ma;
        double vb = sbb * inv_n - mb * mb;
        double cov = sab * inv_n - ma * mb;
        double ssim = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                      ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += ssim;
        ++count;
      }
    }
  }
  double mean_ssim = total / static_cast<double>(count);
  return static_cast<float>((1.0 - mean_ssim) / 2.0);
}

// ---------------------------------------------------------------------------
// Two-component PCA via power iteration with deflation.
// ---------------------------------------------------------------------------

namespace detail {

// Top eigenvector of the symmetric d x d matrix `cov`; 200 iterations, stops
// early when the iterate moves less than 1e-7. Sign fixed so the
// largest-magnitude coordinate is positive.
inline std::vector<double> power_iteration(std::vector<double>& cov, int d, double* eigenvalue) {
  std::vector<double> v(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) v[static_cast<size_t>(i)] = 1.0 + 1e-3 * i;
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;

  std::vector<double> next(static_cast<size_t>(d));
  for (int it = 0; it < 200; ++it) {
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += cov[static_cast<size_t>(i) * d + j] * v[static_cast<size_t>(j)];
      next[static_cast<size_t>(i)] = acc;
    }
    double nn = 0.0;
    for (double x : next) nn += x * x;
    nn = std::sqrt(nn);
    if (nn == 0.0) throw NumericalError("pca2: rank-0 data");
    double delta = 0.0;
    for (int i = 0; i < d; ++i) {
      next[static_cast<size_t>(i)] /= nn;
      delta = std::max(delta, std::fabs(next[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]));
    }
    v.swap(next);
    if (delta < 1e-7) break;
  }
  double lam = 0.0;
  for (int i = 0; i < d; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j)
      acc += cov[static_cast<size_t>(i) * d + j] * v[static_cast<size_t>(j)];
    lam += v[static_cast<size_t>(i)] * acc;
  }
  int arg = 0;
  for (int i = 1; i < d; ++i)
    if (std::fabs(v[static_cast<size_t>(i)]) > std::fabs(v[static_cast<size_t>(arg)])) arg = i;
  if (v[static_cast<size_t>(arg)] < 0.0)
    for (double& x : v) x = -x;
  *eigenvalue = lam;
  return v;
}

}  // namespace detail

// Mean-center and project onto the top-2 covariance eigenvectors.
inline Tensor pca2(const Tensor& activations) {
  if (activations.shape.size() != 2) throw ShapeError("pca2: expected [n,d]");
  int n = activations.shape[0], d = activations.shape[1];
  if (n < 2 || d < 2) throw ShapeError("pca2: need n >= 2 and d >= 2");

  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      mean[static_cast<size_t>(j)] += activations.data[static_cast<size_t>(i) * d + j];
  for (double& m : mean) m /= n;

  std::vector<double> centered(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      centered[static_cast<size_t>(i) * d + j] =
          activations.data[static_cast<size_t>(i) * d + j] - mean[static_cast<size_t>(j)];

  std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      double va = centered[static_cast<size_t>(i) * d + a];
      if (va == 0.0) continue;
      for (int b = 0; b < d; ++b)
        cov[static_cast<size_t>(a) * d + b] += va * centered[static_cast<size_t>(i) * d + b];
    }
  for (double& x : cov) x /= (n - 1);

  double l1 = 0.0, l2 = 0.0;
  std::vector<double> v1 = detail::power_iteration(cov, d, &l1);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b)
      cov[static_cast<size_t>(a) * d + b] -= l1 * v1[static_cast<size_t>(a)] * v1[static_cast<size_t>(b)];
  std::vector<double> v2 = detail::power_iteration(cov, d, &l2);

  Tensor out({n, 2});
  for (int i = 0; i < n; ++i) {
    double p1 = 0.0, p2 = 0.0;
    for (int j = 0; j < d; ++j) {
      p1 += centered[static_cast<size_t>(i) * d + j] * v1[static_cast<size_t>(j)];
      p2 += centered[static_cast<size_t>(i) * d + j] * v2[static_cast<size_t>(j)];
    }
    out.data[static_cast<size_t>(i) * 2] = static_cast<float>(p1);
    out.data[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(p2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attack evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
  AttackConfig attack;
  int max_samples = 200;
  float dssim_threshold = 0.01f;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  int batch_size = 64;  // instability / filtering batch size
};

struct SampleRecord {
  int index = 0;
  int label = -1;
  int orig_pred = -1;     // judged pair, on the attacked input
  int adapted_pred = -1;
  bool top1_evasive = false;
  bool top5_evasive = false;        // headline: top1_evasive AND top-5 condition
  bool top5_paper_literal = false;  // top-5 condition alone
  bool attack_only = false;
  float conf_orig = 0.0f;
  float conf_adapted = 0.0f;
  float confidence_delta = 0.0f;
  float dssim_val = 0.0f;
  bool dssim_flagged = false;
  bool rejected = false;
  int steps = 0;
  double attack_seconds = 0.0;  // wall time; never serialized into the report
  Tensor x_nat, x_adv;          // kept for image dumps; never serialized
};

struct MetricsReport {
  int n_samples = 0;
  float top1_evasive_rate = 0.0f;
  float top5_evasive_rate = 0.0f;
  float top5_literal_rate = 0.0f;
  float attack_only_rate = 0.0f;
  float confidence_delta_mean = 0.0f;
  float instability = 0.0f;
  float retention = 1.0f;
  float dssim_max = 0.0f;
  float dssim_mean = 0.0f;
  int dssim_flagged = 0;
  int rejected = 0;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string attack_variant;
  std::vector<SampleRecord> samples;
};

namespace detail {

// Predictor identity: parameters plus adaptation flavor, so a plain model and
// an adapted model with identical latents never deduplicate.
inline uint64_t predictor_checksum(const Model& m) { return params_checksum(m); }
inline uint64_t predictor_checksum(const AdaptedModel& am) {
  return fnv1a(adapt_mode_name(am.mode), params_checksum(am.base));
}

inline void append_unique_predictor(std::vector<PredictFn>& fns, std::vector<uint64_t>& seen,
                                    uint64_t checksum, PredictFn fn) {
  for (uint64_t s : seen)
    if (s == checksum) return;
  seen.push_back(checksum);
  fns.push_back(std::move(fn));
}

}  // namespace detail

// Generate attacks on `pair`, judge them on `eval_pair` (identical for the
// whitebox setting; surrogate vs true pair for transfer settings). The
// incoming dataset must be unfiltered: instability is measured on it first,
// then it is filtered to samples every involved model classifies correctly.
inline MetricsReport evaluate(const ModelPair& pair, const ModelPair& eval_pair,
                              const Dataset& dataset, const EvalConfig& cfg) {
  validate_attack_config(cfg.attack);
  MetricsReport rep;
  rep.config_hash = cfg.config_hash;
  rep.seed = cfg.seed;
  rep.attack_variant = attack_variant_name(cfg.attack.variant);

  std::vector<Batch> unfiltered = to_batches(dataset, cfg.batch_size);
  rep.instability = instability(eval_pair, unfiltered);

  std::vector<PredictFn> fns;
  std::vector<uint64_t> seen;
  detail::append_unique_predictor(fns, seen, detail::predictor_checksum(eval_pair.original),
                                  [&](const Tensor& x) { return predict1(eval_pair.original, x); });
  detail::append_unique_predictor(fns, seen, detail::predictor_checksum(eval_pair.adapted),
                                  [&](const Tensor& x) { return predict1(eval_pair.adapted, x); });
  detail::append_unique_predictor(fns, seen, detail::predictor_checksum(pair.original),
                                  [&](const Tensor& x) { return predict1(pair.original, x); });
  detail::append_unique_predictor(fns, seen, detail::predictor_checksum(pair.adapted),
                                  [&](const Tensor& x) { return predict1(pair.adapted, x); });

  Dataset filtered = take_first(filter_correct(fns, dataset), cfg.max_samples);
  rep.retention = filtered.retention;
  int n = filtered.n();
  rep.n_samples = n;
  rep.samples.assign(static_cast<size_t>(n), SampleRecord{});

  int k5 = std::min(5, eval_pair.original.num_classes);
  Rng root = make_rng(cfg.seed);

  parallel_for(static_cast<size_t>(n), worker_count(), [&](size_t i) {
    SampleRecord& rec = rep.samples[i];
    rec.index = static_cast<int>(i);
    int y = filtered.labels[i];
    rec.label = y;
    Tensor x = filtered.sample(static_cast<int>(i));
    Rng rng = root.fork(static_cast<uint64_t>(i));

    auto t0 = std::chrono::steady_clock::now();
    Tensor x_adv;
    bool rejected = false;
    int steps = cfg.attack.steps;
    switch (cfg.attack.variant) {
      case AttackVariant::fgsm:
        x_adv = fgsm(pair.adapted, x, y, cfg.attack.epsilon);
        steps = 1;
        break;
      case AttackVariant::rfgsm:
        x_adv = rfgsm(pair.adapted, x, y, cfg.attack.epsilon, cfg.attack.sigma, rng);
        steps = 1;
        break;
      case AttackVariant::pgd: {
        AttackResult r = pgd_attack(pair.adapted, x, y, cfg.attack, &rng);
        x_adv = std::move(r.x_adv);
        steps = static_cast<int>(r.loss_trace.size());
        break;
      }
      case AttackVariant::momentum_pgd: {
        AttackResult r = momentum_pgd_attack(pair.adapted, x, y, cfg.attack, &rng);
        x_adv = std::move(r.x_adv);
        steps = static_cast<int>(r.loss_trace.size());
        break;
      }
      case AttackVariant::diva: {
        AttackResult r = diva_attack(pair, x, y, cfg.attack, &rng);
        x_adv = std::move(r.x_adv);
        rejected = r.rejected;
        steps = static_cast<int>(r.loss_trace.size());
        break;
      }
    }
    rec.attack_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.steps = steps;
    rec.rejected = rejected;

    // Judgement happens on eval_pair only.
    std::vector<int> o_top = predict_topk(eval_pair.original, x_adv, k5);
    int a_top = predict1(eval_pair.adapted, x_adv);
    rec.orig_pred = o_top[0];
    rec.adapted_pred = a_top;
    rec.attack_only = a_top != y;
    rec.top1_evasive = rec.attack_only && o_top[0] == y;
    bool in_top5 = false;
    for (int v : o_top) in_top5 = in_top5 || v == a_top;
    rec.top5_paper_literal = !in_top5;
    rec.top5_evasive = rec.top1_evasive && rec.top5_paper_literal;

    Tensor x1 = as_single_batch(x_adv, eval_pair.original.input_shape);
    Tensor po = softmax_probs(forward(eval_pair.original, x1));
    Tensor pa = softmax_probs(adapted_logits(eval_pair.adapted, x1));
    rec.conf_orig = po.data[static_cast<size_t>(y)];
    rec.conf_adapted = pa.data[static_cast<size_t>(y)];
    rec.confidence_delta = rec.conf_orig - rec.conf_adapted;

    if (x.shape.size() == 3 && x.shape[0] >= 7 && x.shape[1] >= 7) {
      rec.dssim_val = dssim(x, x_adv);
      rec.dssim_flagged = rec.dssim_val > cfg.dssim_threshold;
    }
    rec.x_nat = std::move(x);
    rec.x_adv = std::move(x_adv);
  });

  double cd = 0.0, dm = 0.0;
  for (const SampleRecord& rec : rep.samples) {
    rep.top1_evasive_rate += rec.top1_evasive;
    rep.top5_evasive_rate += rec.top5_evasive;
    rep.top5_literal_rate += rec.top5_paper_literal;
    rep.attack_only_rate += rec.attack_only;
    cd += rec.confidence_delta;
    dm += rec.dssim_val;
    rep.dssim_max = std::max(rep.dssim_max, rec.dssim_val);
    rep.dssim_flagged += rec.dssim_flagged;
    rep.rejected += rec.rejected;
  }
  if (n > 0) {
    rep.top1_evasive_rate /= static_cast<float>(n);
    rep.top5_evasive_rate /= static_cast<float>(n);
    rep.top5_literal_rate /= static_cast<float>(n);
    rep.attack_only_rate /= static_cast<float>(n);
    rep.confidence_delta_mean = static_cast<float>(cd / n);
    rep.dssim_mean = static_cast<float>(dm / n);
  }
  return rep;
}

}  // namespace diva
