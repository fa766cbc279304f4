// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "moebqa/params.hpp"
#include "moebqa/rng.hpp"
#include "moebqa/tensor.hpp"

namespace moebqa::testing {

template <typename T>
Tensor<T> rand_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

// Constant projection weights so gradient checks are sensitive to element
// permutations, not just totals.
template <typename T>
Tensor<T> rand_const(Shape shape, Rng& rng) {
  return rand_tensor<T>(shape, rng, 1.0);
}

inline std::filesystem::path make_temp_dir(const std::string& stem) {
  static std::mt19937_64 gen(std::random_device{}());
  auto dir = std::filesystem::temp_directory_path() /
             (stem + "_" + std::to_string(gen()));
  std::filesystem::create_directories(dir);
  return dir;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& stem) : path(make_temp_dir(stem)) {}
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace moebqa::testing
