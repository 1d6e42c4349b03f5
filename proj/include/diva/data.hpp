#pragma once

#include <cstdio>
#include <fstream>
#include <functional>

#include "diva/nn.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Datasets: IDX ubyte ingestion, seeded synthetic classes, filtering.
// ---------------------------------------------------------------------------

struct Dataset {
  std::string id;
  std::string split = "train";  // train | transfer | validation
  Tensor inputs;                // [n, ...], values in [0,1]
  std::vector<int> labels;
  float retention = 1.0f;       // fraction kept by the last filter
  std::string provenance;

  int n() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
  std::vector<int> sample_shape() const { return per_sample_shape(inputs); }

  Tensor sample(int i) const {
    std::vector<int> s = sample_shape();
    size_t d = numel_of(s);
    return Tensor(s, std::vector<float>(inputs.data.begin() + static_cast<long>(i) * d,
                                        inputs.data.begin() + static_cast<long>(i + 1) * d));
  }
};

inline std::vector<Batch> to_batches(const Dataset& ds, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<Batch> out;
  size_t d = numel_of(ds.sample_shape());
  for (int start = 0; start < ds.n(); start += batch_size) {
    int bn = std::min(batch_size, ds.n() - start);
    Batch b;
    b.inputs = Tensor(batch_shape(ds.sample_shape(), bn),
                      std::vector<float>(ds.inputs.data.begin() + static_cast<long>(start) * d,
                                         ds.inputs.data.begin() + static_cast<long>(start + bn) * d));
    b.labels.assign(ds.labels.begin() + start, ds.labels.begin() + start + bn);
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX ubyte format (big-endian magic 0x00000803 images / 0x00000801 labels)
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated IDX file: " + what);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open " + images_path);
  if (detail::read_be32(img, "image magic") != 0x00000803u)
    throw DataError("bad IDX image magic in " + images_path);
  uint32_t n = detail::read_be32(img, "image count");
  uint32_t h = detail::read_be32(img, "rows");
  uint32_t w = detail::read_be32(img, "cols");
  std::vector<unsigned char> pix(static_cast<size_t>(n) * h * w);
  if (!img.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size())))
    throw DataError("truncated IDX image payload in " + images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open " + labels_path);
  if (detail::read_be32(lab, "label magic") != 0x00000801u)
    throw DataError("bad IDX label magic in " + labels_path);
  uint32_t ln = detail::read_be32(lab, "label count");
  if (ln != n)
    throw DataError("IDX label count " + std::to_string(ln) + " != image count " +
                    std::to_string(n));
  std::vector<unsigned char> raw(ln);
  if (!lab.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DataError("truncated IDX label payload in " + labels_path);

  Dataset ds;
  ds.inputs = Tensor({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w), 1});
  for (size_t i = 0; i < pix.size(); ++i) ds.inputs.data[i] = static_cast<float>(pix[i]) / 255.0f;
  ds.labels.assign(raw.begin(), raw.end());
  std::string base = images_path;
  size_t slash = base.find_last_of('/');
  if (slash != std::string::npos) base = base.substr(slash + 1);
  ds.id = "idx-" + base + "-" + std::to_string(n);
  ds.provenance = images_path;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic oriented-grating classes: class k's images carry a sinusoidal
// grating at angle pi*k/classes with per-sample phase, frequency jitter and
// pixel noise. Labels cycle (index mod classes), so counts differ by <= 1.
// ---------------------------------------------------------------------------

struct SynthParams {
  int height = 16, width = 16;
  float amplitude = 0.35f;
  float base_freq = 2.5f;    // cycles across the image
  float freq_jitter = 0.15f; // relative
  float noise = 0.12f;       // uniform pixel noise half-range
};

inline Dataset synth_dataset(uint64_t seed, int n, int classes, SynthParams p = {}) {
  if (classes < 2) throw ConfigError("synth_dataset needs >= 2 classes");
  if (n < classes) throw ConfigError("synth_dataset needs n >= classes");
  Dataset ds;
  ds.inputs = Tensor({n, p.height, p.width, 1});
  ds.labels.resize(static_cast<size_t>(n));
  Rng root = make_rng(seed);
  const float pi = 3.14159265358979323846f;
  for (int i = 0; i < n; ++i) {
    int k = i % classes;
    ds.labels[static_cast<size_t>(i)] = k;
    Rng rng = root.fork(static_cast<uint64_t>(i));
    float theta = pi * static_cast<float>(k) / static_cast<float>(classes);
    float phase = rng.uniform(0.0f, 2.0f * pi);
    float freq = p.base_freq * (1.0f + rng.uniform(-p.freq_jitter, p.freq_jitter));
    float cx = std::cos(theta), sx = std::sin(theta);
    float* img = ds.inputs.ptr() + static_cast<size_t>(i) * p.height * p.width;
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) {
        float u = (static_cast<float>(x) * cx + static_cast<float>(y) * sx) /
                  static_cast<float>(p.height);
        float v = 0.5f + p.amplitude * std::sin(2.0f * pi * freq * u + phase) +
                  rng.uniform(-p.noise, p.noise);
        img[y * p.width + x] = std::min(1.0f, std::max(0.0f, v));
      }
    }
  }
  ds.id = "synth-" + std::to_string(seed) + "-" + std::to_string(n) + "-" +
          std::to_string(classes);
  ds.provenance = "synth_dataset";
  return ds;
}

// ---------------------------------------------------------------------------
// Filtering: keep samples every listed model classifies correctly.
// ---------------------------------------------------------------------------

using PredictFn = std::function<int(const Tensor&)>;  // per-sample top-1

inline Dataset filter_correct(const std::vector<PredictFn>& models, const Dataset& ds) {
  if (ds.n() == 0) throw DataError("filter_correct: empty dataset");
  std::vector<int> keep;
  for (int i = 0; i < ds.n(); ++i) {
    Tensor x = ds.sample(i);
    bool all = true;
    for (const PredictFn& f : models)
      if (f(x) != ds.labels[static_cast<size_t>(i)]) {
        all = false;
        break;
      }
    if (all) keep.push_back(i);
  }
  if (keep.empty())
    throw DataError("filter_correct: no sample is classified correctly by every model");
  Dataset out;
  out.id = ds.id + "-filtered";
  out.split = ds.split;
  out.provenance = ds.provenance;
  out.retention = static_cast<float>(keep.size()) / static_cast<float>(ds.n());
  size_t d = numel_of(ds.sample_shape());
  out.inputs = Tensor(batch_shape(ds.sample_shape(), static_cast<int>(keep.size())));
  out.labels.resize(keep.size());
  for (size_t j = 0; j < keep.size(); ++j) {
    std::copy(ds.inputs.data.begin() + static_cast<long>(keep[j]) * d,
              ds.inputs.data.begin() + static_cast<long>(keep[j] + 1) * d,
              out.inputs.data.begin() + static_cast<long>(j) * d);
    out.labels[j] = ds.labels[static_cast<size_t>(keep[j])];
  }
  return out;
}

inline Dataset take_first(const Dataset& ds, int count) {
  if (count >= ds.n()) return ds;
  Dataset out = ds;
  size_t d = numel_of(ds.sample_shape());
  out.inputs = Tensor(batch_shape(ds.sample_shape(), count),
                      std::vector<float>(ds.inputs.data.begin(),
                                         ds.inputs.data.begin() + static_cast<long>(count) * d));
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + count);
  return out;
}

}  // namespace diva
