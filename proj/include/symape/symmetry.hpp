#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "symape/model.hpp"
#include "symape/tensor.hpp"

namespace symape {

// Skewness of one post-softmax attention row: the squared difference
// between the probability mass on the left half and on the right half of
// the sentence. The middle position of an odd-length row enters neither
// sum. Always in [0, 1].
double skewness_row(std::span<const double> p);

struct SkewnessReport {
  std::vector<double> per_token;  // (layer, sentence, head, query) order
  double mean = 0.0;              // E over all true tokens, layers, heads
  Tensor e_skew;                  // the same mean as a graph scalar
};

struct GateReport {
  std::vector<double> alpha;  // per true MT token, strictly in (0, 1)
  double mean = 0.0;          // E over all true MT tokens
  Tensor e_alpha;
};

struct LossBreakdown {
  double l_ce = 0.0;
  double e_alpha = 0.0;
  double e_skew = 0.0;
  double inducement = 0.0;  // 1 - E[alpha]
  double total = 0.0;
  Tensor total_t;           // graph scalar; backward() entry point
  bool regularized = false;
};

// E of per-token skewness across every recorded MT-encoder layer and
// head, averaged over true tokens only; differentiable back into the
// attention distributions.
SkewnessReport attention_skewness(const std::vector<AttentionRecord>& records);

// alpha[b,i] = sigmoid(w . v[b,i] + b) over true MT positions.
GateReport gate(const Tensor& v, const Tensor& w, const Tensor& b,
                const std::vector<int64_t>& true_len);

// total = L_CE + E[alpha] * E[skew] + (1 - E[alpha])
LossBreakdown compose_regularized_loss(const Tensor& l_ce, const GateReport& g,
                                       const SkewnessReport& s);
LossBreakdown compose_plain_loss(const Tensor& l_ce);

// Label-smoothed cross-entropy, averaged over unmasked target tokens:
// -[(1-eps) * log p(target) + eps/V * sum_v log p(v)]. eps = 0 reduces to
// plain cross-entropy.
Tensor cross_entropy_smoothed(const Tensor& logits,
                              const std::vector<int64_t>& targets,
                              const std::vector<uint8_t>& target_mask,
                              double label_smoothing);

}  // namespace symape
