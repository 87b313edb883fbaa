// Copyright 2026 The PulseGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Exhaustive EER: every distinct score is tried as a threshold, plus 0 and
// one above every score, with error rates counted directly.

#pragma once

#include <algorithm>
#include <random>
#include <utility>
#include <vector>

namespace testing_support {

inline double brute_force_eer(const std::vector<double>& gen, const std::vector<double>& imp) {
  std::vector<double> th{0.0, 2.0};
  th.insert(th.end(), gen.begin(), gen.end());
  th.insert(th.end(), imp.begin(), imp.end());
  std::sort(th.begin(), th.end());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double prev_far = 0, prev_frr = 0;
  for (std::size_t k = 0; k < th.size(); ++k) {
    std::size_t fa = 0, fr = 0;
    for (double s : imp) fa += s >= th[k];
    for (double s : gen) fr += s < th[k];
    const double far = double(fa) / double(imp.size()), frr = double(fr) / double(gen.size());
    if (far <= frr) {
      if (far == frr || k == 0) return far;
      // straight line between the last point with FAR > FRR and this one
      const double t = (prev_far - prev_frr) / ((prev_far - prev_frr) - (far - frr));
      return prev_far + t * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
  return prev_far;
}

/// Mixed-shape score sets in [0,1], often with ties.
inline std::pair<std::vector<double>, std::vector<double>> random_score_sets(std::mt19937_64& rng,
                                                                            std::size_t max_n) {
  std::uniform_int_distribution<std::size_t> n(1, max_n);
  std::uniform_real_distribution<double> u(0.0, 1.0), shift(-0.3, 0.6);
  const bool coarse = u(rng) < 0.3;  // quantized scores force ties
  const double sh = shift(rng);
  auto draw = [&](double offset) {
    double v = std::clamp(0.5 * u(rng) + 0.25 + offset, 0.0, 1.0);
    return coarse ? std::round(v * 20.0) / 20.0 : v;
  };
  std::vector<double> gen(n(rng)), imp(n(rng));
  for (auto& v : gen) v = draw(sh / 2);
  for (auto& v : imp) v = draw(-sh / 2);
  return {gen, imp};
}

}  // namespace testing_support
