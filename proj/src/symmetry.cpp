#include "symape/symmetry.hpp"

#include <cmath>
#include <stdexcept>

namespace symape {

double skewness_row(std::span<const double> p) {
  const int64_t len = static_cast<int64_t>(p.size());
  if (len == 0) throw std::invalid_argument("skewness_row: empty distribution");
  const int64_t half = len / 2;            // floor(L/2)
  const int64_t right_start = (len + 1) / 2;  // ceil(L/2), 0-based
  double left = 0.0, right = 0.0;
  for (int64_t j = 0; j < half; ++j) left += p[static_cast<size_t>(j)];
  for (int64_t j = right_start; j < len; ++j) right += p[static_cast<size_t>(j)];
  const double diff = left - right;
  return diff * diff;
}

SkewnessReport attention_skewness(const std::vector<AttentionRecord>& records) {
  if (records.empty())
    throw std::invalid_argument("attention_skewness: no records");

  // Total true-token entries across layers and heads, for the E[.] mean.
  int64_t entries = 0;
  for (const auto& rec : records) {
    const int64_t heads = rec.probs.dim(1);
    for (int64_t len : rec.true_len) entries += heads * len;
  }

  SkewnessReport report;
  Tensor acc;
  for (const auto& rec : records) {
    const int64_t B = rec.probs.dim(0), H = rec.probs.dim(1);
    const int64_t Lq = rec.probs.dim(2), Lk = rec.probs.dim(3);

    // sign[b,h,i,j]: +1 in the left half of sentence b, -1 in the right
    // half, 0 for the middle position and padding.
    std::vector<double> sign(static_cast<size_t>(B * H * Lq * Lk), 0.0);
    std::vector<double> row_weight(static_cast<size_t>(B * H * Lq), 0.0);
    for (int64_t b = 0; b < B; ++b) {
      const int64_t len = rec.true_len[static_cast<size_t>(b)];
      const int64_t half = len / 2;
      const int64_t right_start = (len + 1) / 2;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < Lq; ++i) {
          const int64_t row = ((b * H + h) * Lq + i);
          if (i < len) row_weight[static_cast<size_t>(row)] =
              1.0 / static_cast<double>(entries);
          for (int64_t j = 0; j < Lk; ++j) {
            double s = 0.0;
            if (j < half) s = 1.0;
            else if (j >= right_start && j < len) s = -1.0;
            sign[static_cast<size_t>(row * Lk + j)] = s;
          }
        }
    }

    Tensor sign_t = Tensor::from_vector(rec.probs.shape(), std::move(sign));
    Tensor diff = sum_lastdim(mul(rec.probs, sign_t));  // [B,H,Lq]
    Tensor sq = mul(diff, diff);

    // Collect per-token values over true query positions.
    for (int64_t b = 0; b < B; ++b) {
      const int64_t len = rec.true_len[static_cast<size_t>(b)];
      for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < len; ++i)
          report.per_token.push_back(
              sq.values()[static_cast<size_t>((b * H + h) * Lq + i)]);
    }

    Tensor weight_t = Tensor::from_vector(sq.shape(), std::move(row_weight));
    Tensor layer_sum = sum_all(mul(sq, weight_t));
    acc = acc.defined() ? add(acc, layer_sum) : layer_sum;
  }
  report.e_skew = acc;
  report.mean = acc.item();
  return report;
}

GateReport gate(const Tensor& v, const Tensor& w, const Tensor& b,
                const std::vector<int64_t>& true_len) {
  if (v.rank() != 3)
    throw std::invalid_argument("gate: v must be [batch, len, d_model]");
  const int64_t B = v.dim(0), L = v.dim(1), d = v.dim(2);
  if (w.rank() != 1 || w.size() != d)
    throw std::invalid_argument("gate: w must match d_model");
  if (b.size() != 1) throw std::invalid_argument("gate: b must be a scalar");
  if (static_cast<int64_t>(true_len.size()) != B)
    throw std::invalid_argument("gate: one true length per sentence required");

  Tensor dot = reshape(matmul(v, reshape(w, {d, 1})), {B, L});
  Tensor alpha = sigmoid(add_scalar_param(dot, b));

  int64_t total = 0;
  for (int64_t len : true_len) total += len;
  std::vector<double> weight(static_cast<size_t>(B * L), 0.0);
  GateReport report;
  for (int64_t s = 0; s < B; ++s)
    for (int64_t i = 0; i < true_len[static_cast<size_t>(s)]; ++i) {
      weight[static_cast<size_t>(s * L + i)] = 1.0 / static_cast<double>(total);
      report.alpha.push_back(alpha.values()[static_cast<size_t>(s * L + i)]);
    }
  Tensor weight_t = Tensor::from_vector({B, L}, std::move(weight));
  report.e_alpha = sum_all(mul(alpha, weight_t));
  report.mean = report.e_alpha.item();
  return report;
}

LossBreakdown compose_regularized_loss(const Tensor& l_ce, const GateReport& g,
                                       const SkewnessReport& s) {
  LossBreakdown out;
  out.regularized = true;
  Tensor penalty = mul(g.e_alpha, s.e_skew);
  Tensor inducement = add_scalar(scale(g.e_alpha, -1.0), 1.0);
  out.total_t = add(add(l_ce, penalty), inducement);
  out.l_ce = l_ce.item();
  out.e_alpha = g.e_alpha.item();
  out.e_skew = s.e_skew.item();
  out.inducement = inducement.item();
  out.total = out.total_t.item();
  return out;
}

LossBreakdown compose_plain_loss(const Tensor& l_ce) {
  LossBreakdown out;
  out.total_t = l_ce;
  out.l_ce = l_ce.item();
  out.total = out.l_ce;
  return out;
}

Tensor cross_entropy_smoothed(const Tensor& logits,
                              const std::vector<int64_t>& targets,
                              const std::vector<uint8_t>& target_mask,
                              double label_smoothing) {
  const int64_t vocab = logits.shape().back();
  const int64_t rows = logits.size() / vocab;
  if (static_cast<int64_t>(targets.size()) != rows ||
      target_mask.size() != targets.size())
    throw std::invalid_argument(
        "cross_entropy: one target and mask entry per row required");

  int64_t true_tokens = 0;
  for (uint8_t m : target_mask) true_tokens += m;
  if (true_tokens == 0)
    throw std::invalid_argument("cross_entropy: no unmasked target tokens");

  Tensor log_probs = log_softmax_lastdim(logits);
  Tensor picked = gather_lastdim(log_probs, targets);  // log p(target)

  const double eps = label_smoothing;
  Tensor per_token;
  if (eps == 0.0) {
    per_token = scale(picked, -1.0);
  } else {
    Tensor uniform_term = sum_lastdim(log_probs);  // sum_v log p(v)
    per_token = add(scale(picked, -(1.0 - eps)),
                    scale(uniform_term, -eps / static_cast<double>(vocab)));
  }

  std::vector<double> weight(target_mask.size(), 0.0);
  for (size_t i = 0; i < target_mask.size(); ++i)
    if (target_mask[i]) weight[i] = 1.0 / static_cast<double>(true_tokens);
  Tensor weight_t = Tensor::from_vector(per_token.shape(), std::move(weight));
  return sum_all(mul(per_token, weight_t));
}

}  // namespace symape
