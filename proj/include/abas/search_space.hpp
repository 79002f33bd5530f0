#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "abas/network.hpp"

namespace abas {

/// Box over BranchConfig: lambda log-uniform, dropout uniform, the three
/// architecture parameters categorical.
struct SearchSpace {
  double lambda_low = 0.05;
  double lambda_high = 5.0;
  double dropout_max = 0.8;
  std::vector<int> n_fc_layers{1, 2, 3};
  std::vector<int> fc_h{64, 128, 256, 512, 1024, 2048};
  std::vector<int> fc_b{32, 64, 128, 256, 512};

  static constexpr std::size_t kDims = 5;
  using Point = std::array<double, kDims>;

  void validate() const {
    if (!(lambda_low > 0.0 && lambda_high >= lambda_low && std::isfinite(lambda_high)))
      throw std::invalid_argument("search space: need 0 < lambda_low <= lambda_high < inf");
    if (!(dropout_max >= 0.0 && dropout_max < 1.0))
      throw std::invalid_argument("search space: dropout_max must lie in [0, 1)");
    for (const auto* set : {&n_fc_layers, &fc_h, &fc_b}) {
      if (set->empty()) throw std::invalid_argument("search space: categorical sets must be non-empty");
      for (int v : *set)
        if (v < 1) throw std::invalid_argument("search space: categorical values must be >= 1");
    }
  }

  /// 0 for continuous dimensions.
  std::size_t cardinality(std::size_t dim) const {
    switch (dim) {
      case 2: return n_fc_layers.size();
      case 3: return fc_h.size();
      case 4: return fc_b.size();
      default: return 0;
    }
  }

  BranchConfig sample_uniform(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Point x{};
    x[0] = u(rng);
    x[1] = u(rng);
    for (std::size_t d = 2; d < kDims; ++d) {
      std::uniform_int_distribution<std::size_t> pick(0, cardinality(d) - 1);
      x[d] = static_cast<double>(pick(rng));
    }
    return decode(x);
  }

  /// Continuous dimensions map to [0, 1]; categorical ones to their index.
  Point encode(const BranchConfig& c) const {
    Point x{};
    const double span = std::log(lambda_high) - std::log(lambda_low);
    x[0] = span > 0.0 ? (std::log(c.lambda) - std::log(lambda_low)) / span : 0.0;
    x[1] = dropout_max > 0.0 ? c.dropout_p / dropout_max : 0.0;
    x[2] = index_of(n_fc_layers, c.n_fc_layers, "n_fc_layers");
    x[3] = index_of(fc_h, c.fc_h, "fc_h");
    x[4] = index_of(fc_b, c.fc_b, "fc_b");
    return x;
  }

  BranchConfig decode(const Point& x) const {
    BranchConfig c;
    const double u0 = std::clamp(x[0], 0.0, 1.0);
    c.lambda = std::exp(std::log(lambda_low) + u0 * (std::log(lambda_high) - std::log(lambda_low)));
    c.lambda = std::clamp(c.lambda, lambda_low, lambda_high);
    c.dropout_p = std::clamp(x[1], 0.0, 1.0) * dropout_max;
    if (c.dropout_p >= 1.0) c.dropout_p = std::nextafter(1.0, 0.0);
    c.n_fc_layers = n_fc_layers.at(static_cast<std::size_t>(x[2]));
    c.fc_h = fc_h.at(static_cast<std::size_t>(x[3]));
    c.fc_b = fc_b.at(static_cast<std::size_t>(x[4]));
    return c;
  }

  bool contains(const BranchConfig& c) const {
    auto in = [](const std::vector<int>& s, int v) { return std::find(s.begin(), s.end(), v) != s.end(); };
    return c.lambda >= lambda_low && c.lambda <= lambda_high && c.dropout_p >= 0.0 && c.dropout_p <= dropout_max &&
           in(n_fc_layers, c.n_fc_layers) && in(fc_h, c.fc_h) && in(fc_b, c.fc_b);
  }

 private:
  static double index_of(const std::vector<int>& set, int v, const char* name) {
    auto it = std::find(set.begin(), set.end(), v);
    if (it == set.end()) throw std::invalid_argument(std::string("search space: value not in ") + name + " set");
    return static_cast<double>(it - set.begin());
  }
};

}  // namespace abas
