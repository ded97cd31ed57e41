#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/autograd.hpp"
#include "xmodal/tensor.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("xmodal-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

// Per-parameter-tensor comparison of analytic and central-difference
// gradients: ||analytic - numeric|| / max(||analytic||, ||numeric||).
struct GradCheck {
  std::string worst_name;
  double worst = 0.0;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Compares analytic gradients against central differences of evaluate(),
// which recomputes the loss from the current parameter values. At most
// max_per_tensor elements of every tensor are probed (all of them when 0).
inline GradCheck compare_gradients(xmodal::ParameterSet<double>& params,
                                   const xmodal::GradientSet<double>& grads,
                                   const std::function<double()>& evaluate, double step = 1e-4,
                                   std::size_t max_per_tensor = 0, std::uint64_t seed = 7) {
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& value = params.value(p);
    std::vector<std::size_t> idx(value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_tensor != 0 && idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_tensor);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i : idx) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = evaluate();
      value[i] = saved - step;
      const double down = evaluate();
      value[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = grads.at(p)[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++out.checked;
    }
    // Tensors whose true gradient vanishes (e.g. key biases under softmax
    // shift invariance) only see rounding noise on both sides.
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    const double rel = std::sqrt(a2) < 1e-8 && std::sqrt(n2) < 1e-8 ? 0.0 : std::sqrt(diff2) / denom;
    out.per_tensor.emplace_back(params.name(p), rel);
    if (rel >= out.worst) {
      out.worst = rel;
      out.worst_name = params.name(p);
    }
  }
  return out;
}

// Same, for a loss built on a fresh tape that reads the parameters.
inline GradCheck check_gradients(
    xmodal::ParameterSet<double>& params,
    const std::function<xmodal::Var(xmodal::Tape<double>&)>& loss, double step = 1e-4,
    std::size_t max_per_tensor = 0, std::uint64_t seed = 7) {
  xmodal::GradientSet<double> grads(params);
  {
    xmodal::Tape<double> tape;
    tape.track(params, grads);
    tape.backward(loss(tape));
  }
  const auto evaluate = [&] {
    xmodal::Tape<double> tape;
    return tape.scalar(loss(tape));
  };
  return compare_gradients(params, grads, evaluate, step, max_per_tensor, seed);
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return v;
}

// Moves every parameter off its initial value. Zero-initialized biases behind
// dead ReLUs leave pre-activations exactly on the kink, where one-sided
// differences disagree and no finite-difference check is meaningful.
inline void jitter(xmodal::ParameterSet<double>& params, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (auto& x : params.value(p).values()) x += n(rng);
  }
}

inline double brute_cosine(const std::vector<double>& u, const std::vector<double>& v) {
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (std::sqrt(nu) < 1e-12 || std::sqrt(nv) < 1e-12) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// Rank of the true pair by sorting the row (stable, diagonal placed first
// among ties), independent of the library's counting formulation.
inline std::size_t brute_rank(const std::vector<std::vector<double>>& s, std::size_t i) {
  std::vector<std::size_t> order(s.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[i][a] != s[i][b]) return s[i][a] > s[i][b];
    return a == i && b != i;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), i) - order.begin()) + 1;
}

struct BruteMetrics {
  double medR, r1, r5, r10;
};

inline BruteMetrics brute_metrics(const std::vector<std::vector<double>>& s) {
  std::vector<double> ranks;
  for (std::size_t i = 0; i < s.size(); ++i) ranks.push_back(static_cast<double>(brute_rank(s, i)));
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const auto recall = [&](double k) {
    return static_cast<double>(std::count_if(ranks.begin(), ranks.end(),
                                             [&](double r) { return r <= k; })) /
           static_cast<double>(n);
  };
  return {med, recall(1), recall(5), recall(10)};
}

}  // namespace testing
