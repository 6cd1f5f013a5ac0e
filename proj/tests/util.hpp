#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "oracle.hpp"
#include "sbanet/random.hpp"
#include "sbanet/tensor.hpp"

namespace testutil {

inline sbanet::Tensor random_tensor(sbanet::Shape shape, sbanet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = sbanet::shape_numel(shape);
  return sbanet::Tensor::from_values(std::move(shape), rng.uniform_vector(n, lo, hi));
}

inline sbanet::Tensor random_leaf(sbanet::Shape shape, sbanet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = sbanet::shape_numel(shape);
  return sbanet::Tensor::parameter(std::move(shape), rng.uniform_vector(n, lo, hi));
}

inline std::vector<double> values(const sbanet::Tensor& t) { return {t.values().begin(), t.values().end()}; }

inline double max_abs_diff(const oracle::Mat& a, const oracle::Mat& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].size() != b[r].size()) return INFINITY;
    for (std::size_t c = 0; c < a[r].size(); ++c) worst = std::max(worst, std::abs(a[r][c] - b[r][c]));
  }
  return worst;
}

inline double max_abs_diff(const sbanet::Tensor& a, const oracle::Mat& b) {
  return max_abs_diff(oracle::mat(a), b);
}

// Redraws every parameter value from U(lo, hi).
template <typename List>
void scramble(const List& list, sbanet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (const auto& p : list) {
    auto v = sbanet::Tensor(p.tensor).mutable_values();
    for (auto& x : v) x = rng.uniform(lo, hi);
  }
}

struct RunResult {
  int exit_code = -1;
  std::string out;
};

// Runs a shell command, capturing stdout (stderr too when merge is set).
inline RunResult run(const std::string& command, bool merge_stderr = false) {
  const std::string cmd = merge_stderr ? command + " 2>&1" : command + " 2>/dev/null";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sbanet_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
