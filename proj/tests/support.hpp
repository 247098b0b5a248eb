#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "blockbits/pipeline.hpp"
#include "blockbits/selftest.hpp"

#ifndef BLOCKBITS_CACHE_DIR
#define BLOCKBITS_CACHE_DIR "."
#endif

namespace bbtest {

using namespace blockbits;

// The default toy model after the default pretraining schedule. Trained once
// and cached under the build tree; later processes load the checkpoint.
inline const ModelBundle& pretrained() {
  static const ModelBundle model = [] {
    const RunConfig c;
    const std::string dir = BLOCKBITS_CACHE_DIR;
    const std::string path = dir + "/toy_pretrained.bbck";
    if (std::filesystem::exists(path)) {
      ModelBundle m = load_checkpoint(path);
      if (m.spec() == c.model_spec()) return m;
    }
    std::filesystem::create_directories(dir);
    ModelBundle m = pretrain_model(c, load_corpus(c)).model;
    const std::string tmp = path + ".tmp" + std::to_string(::getpid());
    save_checkpoint(m, tmp);
    std::filesystem::rename(tmp, path);
    return m;
  }();
  return model;
}

inline std::string pretrained_path() {
  pretrained();
  return std::string(BLOCKBITS_CACHE_DIR) + "/toy_pretrained.bbck";
}

inline const CalibrationSet& calibration() {
  static const CalibrationSet cal = [] {
    const RunConfig c;
    return load_calibration(c, load_corpus(c));
  }();
  return cal;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t = Tensor::zeros({r, c});
  for (double& v : t.data()) v = nd(rng);
  return t;
}

inline std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("bbtest_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace bbtest
