#pragma once

#include <filesystem>

#include "json.hpp"

#include "diva/checkpoint.hpp"
#include "diva/config.hpp"
#include "diva/defend.hpp"
#include "diva/distill.hpp"
#include "diva/metrics.hpp"
#include "diva/runner_util.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Experiment runner: executes the pipeline declared by a config file and
// persists artifacts under a run directory named by the config hash.
//
// Stages, in order: dataset+model (train), adapt, defense (optional),
// surrogate (optional), eval (+ c-sweep). `upto` truncates the pipeline so
// the CLI subcommands can reuse one code path. Re-running an identical
// config is a no-op unless forced; a run directory whose stored config
// differs from the incoming one with the same hash is a hard fault.
// ---------------------------------------------------------------------------

enum class Stage { train, adapt, defend, surrogate, eval };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::train: return "train";
    case Stage::adapt: return "adapt";
    case Stage::defend: return "defend";
    case Stage::surrogate: return "surrogate";
    case Stage::eval: return "eval";
  }
  return "?";
}

struct RunOutcome {
  std::string run_dir;
  bool skipped = false;
  bool has_report = false;
  MetricsReport report;
  std::vector<SweepRow> sweep;
};

namespace detail {

inline void check_known_sections(const Config& cfg) {
  static const char* known[] = {"experiment", "dataset", "model",     "adapt",
                                "defense",    "attack",  "eval",      "surrogate",
                                "sweep"};
  for (const auto& [name, s] : cfg.sections) {
    bool ok = false;
    for (const char* k : known) ok = ok || name == k;
    if (!ok) throw ConfigError("unknown stage in config: [" + name + "]");
  }
}

inline Model build_arch(const std::string& name, int classes) {
  if (name == "cnn16") {
    Model m = make_model({16, 16, 1});
    add_conv2d(m, 8);
    add_relu(m);
    add_maxpool2x2(m);
    add_conv2d(m, 16);
    add_relu(m);
    add_maxpool2x2(m);
    add_flatten(m);
    add_dense(m, 48);
    add_relu(m);
    add_dense(m, classes);
    finalize_classifier(m, classes);
    return m;
  }
  if (name == "cnn28") {
    Model m = make_model({28, 28, 1});
    add_conv2d(m, 8);
    add_relu(m);
    add_maxpool2x2(m);
    add_conv2d(m, 16);
    add_relu(m);
    add_maxpool2x2(m);
    add_flatten(m);
    add_dense(m, 64);
    add_relu(m);
    add_dense(m, classes);
    finalize_classifier(m, classes);
    return m;
  }
  if (name == "mlp16") {
    Model m = make_model({16, 16, 1});
    add_flatten(m);
    add_dense(m, 64);
    add_relu(m);
    add_dense(m, classes);
    finalize_classifier(m, classes);
    return m;
  }
  throw ConfigError("unknown model arch: " + name);
}

inline SynthParams synth_params_from(const Config& cfg) {
  SynthParams p;
  p.height = static_cast<int>(cfg.get_i("dataset", "height", p.height));
  p.width = static_cast<int>(cfg.get_i("dataset", "width", p.width));
  p.amplitude = cfg.get_f("dataset", "amplitude", p.amplitude);
  p.base_freq = cfg.get_f("dataset", "base_freq", p.base_freq);
  p.freq_jitter = cfg.get_f("dataset", "freq_jitter", p.freq_jitter);
  p.noise = cfg.get_f("dataset", "noise", p.noise);
  return p;
}

inline AttackConfig attack_config_from(const Config& cfg, const std::string& sec) {
  AttackConfig a;
  a.variant = attack_variant_from(cfg.get(sec, "variant", "pgd"));
  a.epsilon = cfg.get_f(sec, "epsilon", a.epsilon);
  a.alpha = cfg.get_f(sec, "alpha", a.alpha);
  a.steps = static_cast<int>(cfg.get_i(sec, "steps", a.steps));
  a.c = cfg.get_f(sec, "c", a.c);
  a.momentum_mu = cfg.get_f(sec, "momentum", a.momentum_mu);
  a.random_start = cfg.get_b(sec, "random_start", a.random_start);
  a.sigma = cfg.get_f(sec, "sigma", a.sigma);
  a.stop_on_success = cfg.get_b(sec, "stop_on_success", a.stop_on_success);
  validate_attack_config(a);
  return a;
}

}  // namespace detail

inline RunOutcome run_experiment(Config cfg, const std::string& out_dir, bool force,
                                 Stage upto = Stage::eval) {
  namespace fs = std::filesystem;
  using ojson = nlohmann::ordered_json;
  detail::check_known_sections(cfg);
  if (upto != Stage::eval) cfg.set("experiment", "stage", stage_name(upto));

  uint64_t hash = cfg.hash();
  std::string canonical = cfg.canonical();
  fs::path run_dir = fs::path(out_dir) / ("run-" + hex64(hash));
  fs::create_directories(run_dir);

  // Idempotence and collision handling.
  fs::path done_path = run_dir / "DONE";
  fs::path config_path = run_dir / "config.txt";
  if (fs::exists(config_path)) {
    std::ifstream in(config_path, std::ios::binary);
    std::ostringstream stored;
    stored << in.rdbuf();
    if (stored.str() != canonical)
      throw ConfigError("run directory " + run_dir.string() +
                        " holds a different config with the same hash");
    if (fs::exists(done_path) && !force) {
      RunOutcome out;
      out.run_dir = run_dir.string();
      out.skipped = true;
      return out;
    }
  }
  fs::remove(done_path);
  {
    std::ofstream out(config_path, std::ios::binary | std::ios::trunc);
    out << canonical;
  }

  uint64_t seed = static_cast<uint64_t>(cfg.get_i("experiment", "seed", 0));
  Rng root = make_rng(seed);

  // ---- dataset ----
  int classes = static_cast<int>(cfg.get_i("dataset", "classes", 10));
  std::string kind = cfg.get("dataset", "kind", "synth");
  Dataset train, valid, transfer;
  if (kind == "synth") {
    SynthParams sp = detail::synth_params_from(cfg);
    int n_train = static_cast<int>(cfg.get_i("dataset", "n_train", 2000));
    int n_valid = static_cast<int>(cfg.get_i("dataset", "n_valid", 600));
    int n_transfer = static_cast<int>(cfg.get_i("dataset", "n_transfer", n_train / 10));
    train = synth_dataset(seed, n_train, classes, sp);
    valid = synth_dataset(seed + 1, n_valid, classes, sp);
    if (n_transfer > 0) transfer = synth_dataset(seed + 2, n_transfer, classes, sp);
  } else if (kind == "idx") {
    train = load_idx(cfg.require("dataset", "train_images"),
                     cfg.require("dataset", "train_labels"));
    valid = load_idx(cfg.require("dataset", "valid_images"),
                     cfg.require("dataset", "valid_labels"));
    long cap = cfg.get_i("dataset", "n_train", 0);
    if (cap > 0) train = take_first(train, static_cast<int>(cap));
    cap = cfg.get_i("dataset", "n_valid", 0);
    if (cap > 0) valid = take_first(valid, static_cast<int>(cap));
    if (cfg.find("dataset", "transfer_images")) {
      transfer = load_idx(cfg.require("dataset", "transfer_images"),
                          cfg.require("dataset", "transfer_labels"));
      cap = cfg.get_i("dataset", "n_transfer", 0);
      if (cap > 0) transfer = take_first(transfer, static_cast<int>(cap));
    }
  } else {
    throw ConfigError("unknown dataset kind: " + kind);
  }
  train.split = "train";
  valid.split = "validation";
  transfer.split = "transfer";

  int batch_size = static_cast<int>(cfg.get_i("model", "batch_size", 32));
  std::vector<Batch> train_batches = to_batches(train, batch_size);

  // ---- model ----
  Model original;
  if (const std::string* load = cfg.find("model", "load")) {
    original = load_model(*load);
  } else {
    original = detail::build_arch(cfg.get("model", "arch", "cnn16"), classes);
    Rng mrng = root.fork(fnv1a("model-init"));
    init_he_uniform(original, mrng);
    original = sgd_train(std::move(original), train_batches,
                         cfg.get_f("model", "lr", 0.05f),
                         static_cast<int>(cfg.get_i("model", "epochs", 6)));
    save_model((run_dir / "model.ckpt").string(), original);
  }
  if (original.input_shape != train.sample_shape())
    throw ConfigError("model input shape does not match the dataset");

  RunOutcome out;
  out.run_dir = run_dir.string();
  if (upto == Stage::train) {
    std::ofstream done(done_path, std::ios::binary);
    done << hex64(hash) << ' ' << stage_name(upto) << '\n';
    return out;
  }

  // ---- adapt ----
  AdaptedModel adapted;
  if (const std::string* load = cfg.find("adapt", "load")) {
    adapted = import_adapted(*load);
  } else {
    std::string mode = cfg.get("adapt", "mode", "quantized");
    int bits = static_cast<int>(cfg.get_i("adapt", "bits", 8));
    float alr = cfg.get_f("adapt", "lr", 0.05f);
    int aepochs = static_cast<int>(cfg.get_i("adapt", "epochs", 2));
    if (mode == "quantized") {
      adapted = qat_train(original, train_batches, alr, aepochs, bits);
    } else if (mode == "pruned") {
      adapted = prune_magnitude(original, cfg.get_f("adapt", "sparsity", 0.3f), train_batches,
                                static_cast<int>(cfg.get_i("adapt", "finetune_epochs", 2)), alr);
    } else if (mode == "pruned+quantized") {
      adapted = prune_then_qat(original, cfg.get_f("adapt", "sparsity", 0.3f), train_batches,
                               static_cast<int>(cfg.get_i("adapt", "finetune_epochs", 2)),
                               aepochs, alr, bits);
    } else {
      throw ConfigError("unknown adaptation mode: " + mode);
    }
    export_adapted((run_dir / "adapted.ckpt").string(), adapted);
  }
  ModelPair pair = make_model_pair(original, adapted);
  if (upto == Stage::adapt) {
    std::ofstream done(done_path, std::ios::binary);
    done << hex64(hash) << ' ' << stage_name(upto) << '\n';
    return out;
  }

  // ---- defense ----
  bool want_defense = cfg.has("defense");
  if (upto == Stage::defend && !want_defense)
    throw ConfigError("defend: config has no [defense] section");
  if (want_defense) {
    DefenseConfig dc;
    dc.variant = defense_variant_from(cfg.require("defense", "variant"));
    dc.inner.epsilon = cfg.get_f("defense", "inner_epsilon", dc.inner.epsilon);
    dc.inner.alpha = cfg.get_f("defense", "inner_alpha", dc.inner.alpha);
    dc.inner.steps = static_cast<int>(cfg.get_i("defense", "inner_steps", dc.inner.steps));
    dc.inner.c = cfg.get_f("defense", "inner_c", dc.inner.c);
    dc.outer_lr = cfg.get_f("defense", "outer_lr", dc.outer_lr);
    dc.epochs = static_cast<int>(cfg.get_i("defense", "epochs", dc.epochs));
    dc.n_distill = static_cast<int>(cfg.get_i("defense", "n_distill", dc.n_distill));
    dc.qat_epochs = static_cast<int>(cfg.get_i("defense", "qat_epochs", dc.qat_epochs));
    dc.bits = static_cast<int>(cfg.get_i("adapt", "bits", dc.bits));
    validate_defense_config(dc);
    std::string prov = "defense=" + std::string(defense_variant_name(dc.variant)) +
                       " config=" + hex64(hash);
    if (dc.variant == DefenseVariant::minimax_pgd) {
      pair = minimax_pgd_train(pair.original, train_batches, dc);
    } else if (dc.variant == DefenseVariant::minimax_diva_qat) {
      pair = minimax_diva_qat(pair, train_batches, dc);
    } else {
      Rng drng = root.fork(fnv1a("defense"));
      pair = minimax_diva_qat_distill(pair, train_batches, dc, drng);
    }
    save_model((run_dir / "defended.orig.ckpt").string(), pair.original);
    export_adapted((run_dir / "defended.adapted.ckpt").string(), pair.adapted, prov);
  }
  if (upto == Stage::defend) {
    std::ofstream done(done_path, std::ios::binary);
    done << hex64(hash) << ' ' << stage_name(upto) << '\n';
    return out;
  }

  // ---- surrogate ----
  ModelPair attack_pair = pair;
  bool want_surrogate = cfg.has("surrogate");
  if (upto == Stage::surrogate && !want_surrogate)
    throw ConfigError("distill: config has no [surrogate] section");
  if (want_surrogate) {
    if (transfer.n() == 0) throw DataError("surrogate stage needs a transfer set");
    DistillConfig sc;
    sc.temperature = cfg.get_f("surrogate", "temperature", sc.temperature);
    sc.mix_lambda = cfg.get_f("surrogate", "lambda", sc.mix_lambda);
    sc.epochs = static_cast<int>(cfg.get_i("surrogate", "epochs", sc.epochs));
    sc.lr = cfg.get_f("surrogate", "lr", sc.lr);
    sc.qat_epochs = static_cast<int>(cfg.get_i("surrogate", "qat_epochs", sc.qat_epochs));
    sc.qat_lr = cfg.get_f("surrogate", "qat_lr", sc.qat_lr);
    sc.bits = static_cast<int>(cfg.get_i("adapt", "bits", sc.bits));
    sc.transfer_id = transfer.id;
    sc.victim_train_id = train.id;
    std::vector<Batch> transfer_batches = to_batches(transfer, batch_size);
    std::string skind = cfg.get("surrogate", "kind", "semi");
    if (skind == "semi") {
      attack_pair = build_semi_blackbox(pair.adapted, transfer_batches, sc);
      save_model((run_dir / "surrogate.orig.ckpt").string(), attack_pair.original);
    } else if (skind == "black") {
      Model hint = detail::build_arch(cfg.get("model", "arch", "cnn16"), classes);
      Rng srng = root.fork(fnv1a("blackbox"));
      attack_pair = build_blackbox(teacher_from(pair.adapted), hint, transfer_batches, sc, srng);
      save_model((run_dir / "surrogate.orig.ckpt").string(), attack_pair.original);
      export_adapted((run_dir / "surrogate.adapted.ckpt").string(), attack_pair.adapted);
    } else {
      throw ConfigError("unknown surrogate kind: " + skind);
    }
  }
  if (upto == Stage::surrogate) {
    std::ofstream done(done_path, std::ios::binary);
    done << hex64(hash) << ' ' << stage_name(upto) << '\n';
    return out;
  }

  // ---- eval ----
  EvalConfig ec;
  ec.attack = detail::attack_config_from(cfg, "attack");
  ec.max_samples = static_cast<int>(cfg.get_i("eval", "max_samples", 200));
  ec.dssim_threshold = cfg.get_f("eval", "dssim_threshold", 0.01f);
  ec.batch_size = static_cast<int>(cfg.get_i("eval", "batch_size", 64));
  ec.seed = seed;
  ec.config_hash = hash;
  MetricsReport rep = evaluate(attack_pair, pair, valid, ec);
  out.report = rep;
  out.has_report = true;

  // ---- c sweep ----
  if (cfg.has("sweep")) {
    std::vector<float> c_values = cfg.get_float_list("sweep", "c_values");
    if (c_values.empty()) throw ConfigError("[sweep] needs c_values");
    std::vector<PredictFn> fns;
    std::vector<uint64_t> seen;
    detail::append_unique_predictor(fns, seen, detail::predictor_checksum(pair.original),
                                    [&](const Tensor& x) { return predict1(pair.original, x); });
    detail::append_unique_predictor(fns, seen, detail::predictor_checksum(pair.adapted),
                                    [&](const Tensor& x) { return predict1(pair.adapted, x); });
    detail::append_unique_predictor(fns, seen, detail::predictor_checksum(attack_pair.original),
                                    [&](const Tensor& x) { return predict1(attack_pair.original, x); });
    detail::append_unique_predictor(fns, seen, detail::predictor_checksum(attack_pair.adapted),
                                    [&](const Tensor& x) { return predict1(attack_pair.adapted, x); });
    Dataset sweep_set = take_first(filter_correct(fns, valid),
                                   static_cast<int>(cfg.get_i("sweep", "max_samples", 60)));
    out.sweep = sweep_c(attack_pair, sweep_set.inputs, sweep_set.labels, ec.attack, c_values);
    write_sweep_csv((run_dir / "sweep.csv").string(), out.sweep);
  }

  // ---- artifacts ----
  float clean_orig = 0.0f, clean_adapted = 0.0f;
  {
    std::vector<Batch> vb = to_batches(valid, ec.batch_size);
    clean_orig = accuracy(pair.original, vb);
    clean_adapted = accuracy(pair.adapted, vb);
  }

  ojson j;
  j["name"] = cfg.get("experiment", "name", "experiment");
  j["seed"] = seed;
  j["config_hash"] = hex64(hash);
  j["attack"] = {{"variant", rep.attack_variant},
                 {"epsilon", static_cast<double>(ec.attack.epsilon)},
                 {"alpha", static_cast<double>(ec.attack.alpha)},
                 {"steps", ec.attack.steps},
                 {"c", static_cast<double>(ec.attack.c)},
                 {"momentum", static_cast<double>(ec.attack.momentum_mu)},
                 {"random_start", ec.attack.random_start}};
  j["dataset"] = {{"id", valid.id},
                  {"classes", classes},
                  {"n_train", train.n()},
                  {"n_valid", valid.n()}};
  j["clean_accuracy"] = {{"original", static_cast<double>(clean_orig)},
                         {"adapted", static_cast<double>(clean_adapted)}};
  j["metrics"] = {{"n_samples", rep.n_samples},
                  {"retention", static_cast<double>(rep.retention)},
                  {"top1_evasive_rate", static_cast<double>(rep.top1_evasive_rate)},
                  {"top5_evasive_rate", static_cast<double>(rep.top5_evasive_rate)},
                  {"top5_literal_rate", static_cast<double>(rep.top5_literal_rate)},
                  {"attack_only_rate", static_cast<double>(rep.attack_only_rate)},
                  {"confidence_delta_mean", static_cast<double>(rep.confidence_delta_mean)},
                  {"instability", static_cast<double>(rep.instability)},
                  {"dssim_max", static_cast<double>(rep.dssim_max)},
                  {"dssim_mean", static_cast<double>(rep.dssim_mean)},
                  {"dssim_flagged", rep.dssim_flagged},
                  {"rejected", rep.rejected}};
  ojson samples = ojson::array();
  for (const SampleRecord& s : rep.samples) {
    samples.push_back({{"i", s.index},
                       {"y", s.label},
                       {"orig", s.orig_pred},
                       {"adapted", s.adapted_pred},
                       {"attack_only", s.attack_only},
                       {"top1_evasive", s.top1_evasive},
                       {"top5_evasive", s.top5_evasive},
                       {"top5_literal", s.top5_paper_literal},
                       {"conf_orig", static_cast<double>(s.conf_orig)},
                       {"conf_adapted", static_cast<double>(s.conf_adapted)},
                       {"dssim", static_cast<double>(s.dssim_val)},
                       {"dssim_flagged", s.dssim_flagged},
                       {"rejected", s.rejected}});
  }
  j["samples"] = std::move(samples);
  if (!out.sweep.empty()) {
    ojson sw = ojson::array();
    for (const SweepRow& r : out.sweep)
      sw.push_back({{"c", static_cast<double>(r.c)},
                    {"evasive_rate", static_cast<double>(r.evasive_rate)},
                    {"attack_rate", static_cast<double>(r.attack_rate)},
                    {"n", r.n}});
    j["sweep"] = std::move(sw);
  }
  {
    std::ofstream jf(run_dir / "report.json", std::ios::binary | std::ios::trunc);
    jf << j.dump(2) << '\n';
  }
  write_per_sample_csv((run_dir / "per_sample.csv").string(), rep);

  int dump_images = static_cast<int>(cfg.get_i("eval", "dump_images", 8));
  if (dump_images > 0 && !rep.samples.empty() && rep.samples[0].x_nat.shape.size() == 3 &&
      rep.samples[0].x_nat.shape[2] == 1) {
    fs::path img_dir = run_dir / "images";
    fs::create_directories(img_dir);
    for (int i = 0; i < std::min<int>(dump_images, static_cast<int>(rep.samples.size())); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "nat_%03d.pgm", i);
      write_pgm((img_dir / name).string(), rep.samples[static_cast<size_t>(i)].x_nat);
      std::snprintf(name, sizeof name, "adv_%03d.pgm", i);
      write_pgm((img_dir / name).string(), rep.samples[static_cast<size_t>(i)].x_adv);
    }
  }

  std::ofstream done(done_path, std::ios::binary);
  done << hex64(hash) << ' ' << stage_name(upto) << '\n';
  return out;
}

inline RunOutcome run_experiment_file(const std::string& config_path, const std::string& out_dir,
                                      bool force, Stage upto = Stage::eval,
                                      long seed_override = -1) {
  Config cfg = parse_config_file(config_path);
  if (seed_override >= 0) cfg.set("experiment", "seed", std::to_string(seed_override));
  return run_experiment(std::move(cfg), out_dir, force, upto);
}

}  // namespace diva
