#pragma once

#include <cstdio>
#include <fstream>

#include "diva/differential.hpp"
#include "diva/metrics.hpp"

namespace diva {

// Shortest-exact float text: %.9g round-trips any float32.
inline std::string f32_str(float v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

inline void write_per_sample_csv(const std::string& path, const MetricsReport& rep) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "index,label,orig_pred,adapted_pred,attack_only,top1_evasive,top5_evasive,"
         "top5_literal,conf_orig,conf_adapted,confidence_delta,dssim,dssim_flagged,"
         "rejected,steps\n";
  for (const SampleRecord& s : rep.samples) {
    out << s.index << ',' << s.label << ',' << s.orig_pred << ',' << s.adapted_pred << ','
        << int(s.attack_only) << ',' << int(s.top1_evasive) << ',' << int(s.top5_evasive) << ','
        << int(s.top5_paper_literal) << ',' << f32_str(s.conf_orig) << ','
        << f32_str(s.conf_adapted) << ',' << f32_str(s.confidence_delta) << ','
        << f32_str(s.dssim_val) << ',' << int(s.dssim_flagged) << ',' << int(s.rejected) << ','
        << s.steps << '\n';
  }
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "c,evasive_rate,attack_rate,n\n";
  for (const SweepRow& r : rows)
    out << f32_str(r.c) << ',' << f32_str(r.evasive_rate) << ',' << f32_str(r.attack_rate) << ','
        << r.n << '\n';
}

// Grayscale binary PGM (P5) from an [H,W,1] tensor of [0,1] values.
inline void write_pgm(const std::string& path, const Tensor& img) {
  if (img.shape.size() != 3 || img.shape[2] != 1)
    throw ShapeError("write_pgm: expected [H,W,1], got " + Tensor(img.shape).shape_str());
  int h = img.shape[0], w = img.shape[1];
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (float v : img.data) {
    float c = std::min(1.0f, std::max(0.0f, v));
    out.put(static_cast<char>(std::lround(c * 255.0f)));
  }
}

}  // namespace diva
