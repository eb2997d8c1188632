#pragma once

// Independent corpus BLEU: n-gram counts by linear scans, no maps.

#include <algorithm>
#include <cmath>
#include <vector>

#include "offtarget/synthdata.h"

namespace offtarget::testing {

using data::Tokens;

inline double brute_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, int max_n) {
  auto count_in = [](const Tokens& seq, const Tokens& gram) {
    int c = 0;
    for (std::size_t i = 0; i + gram.size() <= seq.size(); ++i)
      if (std::equal(gram.begin(), gram.end(), seq.begin() + i)) ++c;
    return c;
  };
  double log_sum = 0;
  for (int n = 1; n <= max_n; ++n) {
    double match = 0, total = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      const auto& h = hyps[s];
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        Tokens gram(h.begin() + i, h.begin() + i + n);
        // Count each distinct gram once, at its first occurrence.
        bool first = true;
        for (std::size_t k = 0; k < i; ++k)
          if (std::equal(gram.begin(), gram.end(), h.begin() + k)) first = false;
        if (first) match += std::min(count_in(h, gram), count_in(refs[s], gram));
        total += 1;
      }
    }
    if (match == 0) return 0;
    log_sum += std::log(match / total);
  }
  double c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    c += hyps[s].size();
    r += refs[s].size();
  }
  const double bp = c < r ? std::exp(1 - r / c) : 1.0;
  return 100 * bp * std::exp(log_sum / max_n);
}

}  // namespace offtarget::testing
