#include <algorithm>
#include <cmath>

#include "memlab/error.hpp"
#include "memlab/kernels.hpp"
#include "memlab/model.hpp"

namespace memlab {

// Mirrors forward_taped() one row at a time. Every step uses the same kernels
// and the same operation order so results match the full pass bit for bit.
IncrementalDecoder::IncrementalDecoder(const Parameters& params) : params_(params) {
  const ModelConfig& c = params.config();
  keys_.assign(c.n_layers * c.n_heads, std::vector<double>(c.max_seq_len * c.d_head));
  values_ = keys_;
  x_.resize(c.d_model);
  ln_.resize(c.d_model);
  q_.resize(c.d_head);
  scores_.resize(c.max_seq_len);
  probs_.resize(c.max_seq_len);
  z_.resize(c.d_head);
  head_out_.resize(c.d_model);
  attn_.resize(c.d_model);
  hidden_.resize(c.d_mlp);
  mlp_.resize(c.d_model);
  logits_.resize(c.vocab_size);
}

void IncrementalDecoder::truncate(std::size_t n) {
  if (n > length_) throw ContractError("truncate beyond decoder length");
  length_ = n;
}

std::span<const double> IncrementalDecoder::push(int token, bool want_logits) {
  const ModelConfig& c = params_.config();
  const ParamLayout& layout = params_.layout();
  if (length_ >= c.max_seq_len) throw InputError("decoder exceeded max_seq_len");
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size)
    throw InputError("token id " + std::to_string(token) + " outside vocabulary");
  const std::size_t pos = length_;
  const std::size_t d = c.d_model, dh = c.d_head;
  auto W = [&](std::size_t slot) { return params_.slot(slot).data(); };
  auto add_row = [](std::vector<double>& dst, const double* row, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) dst[i] += row[i];
  };

  const double* tok = W(layout.token_embed) + static_cast<std::size_t>(token) * d;
  const double* pe = W(layout.pos_embed) + pos * d;
  for (std::size_t i = 0; i < d; ++i) x_[i] = tok[i] + pe[i];

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& ls = layout.layer(l);
    kernels::layer_norm_row(x_.data(), W(ls.ln1_gain), W(ls.ln1_offset), ln_.data(), nullptr, d,
                            kernels::kLayerNormEps);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      double* kcache = keys_[l * c.n_heads + h].data();
      double* vcache = values_[l * c.n_heads + h].data();
      kernels::matmul(ln_.data(), W(ls.query[h]), q_.data(), 1, d, dh);
      add_row(q_, W(ls.query_bias[h]), dh);
      double* krow = kcache + pos * dh;
      double* vrow = vcache + pos * dh;
      kernels::matmul(ln_.data(), W(ls.key[h]), krow, 1, d, dh);
      kernels::matmul(ln_.data(), W(ls.value[h]), vrow, 1, d, dh);
      const double* kb = W(ls.key_bias[h]);
      const double* vb = W(ls.value_bias[h]);
      for (std::size_t i = 0; i < dh; ++i) {
        krow[i] += kb[i];
        vrow[i] += vb[i];
      }
      for (std::size_t j = 0; j <= pos; ++j) {
        scores_[j] = kernels::dot(q_.data(), kcache + j * dh, dh);
        scores_[j] *= inv_sqrt_dh;
      }
      kernels::softmax_row(scores_.data(), probs_.data(), pos + 1);
      for (std::size_t i = 0; i < dh; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) acc = std::fma(probs_[j], vcache[j * dh + i], acc);
        z_[i] = acc;
      }
      kernels::matmul(z_.data(), W(ls.output[h]), head_out_.data(), 1, dh, d);
      if (h == 0) {
        attn_ = head_out_;
      } else {
        add_row(attn_, head_out_.data(), d);
      }
    }
    add_row(attn_, W(ls.output_bias), d);
    add_row(x_, attn_.data(), d);

    kernels::layer_norm_row(x_.data(), W(ls.ln2_gain), W(ls.ln2_offset), ln_.data(), nullptr, d,
                            kernels::kLayerNormEps);
    kernels::matmul(ln_.data(), W(ls.mlp_in), hidden_.data(), 1, d, c.d_mlp);
    add_row(hidden_, W(ls.mlp_in_bias), c.d_mlp);
    for (double& v : hidden_) v = kernels::gelu(v);
    kernels::matmul(hidden_.data(), W(ls.mlp_out), mlp_.data(), 1, c.d_mlp, d);
    add_row(mlp_, W(ls.mlp_out_bias), d);
    add_row(x_, mlp_.data(), d);
  }
  ++length_;
  if (!want_logits) return {};

  kernels::layer_norm_row(x_.data(), W(layout.final_ln_gain), W(layout.final_ln_offset), ln_.data(),
                          nullptr, d, kernels::kLayerNormEps);
  kernels::matmul(ln_.data(), W(layout.unembed), logits_.data(), 1, d, c.vocab_size);
  add_row(logits_, W(layout.unembed_bias), c.vocab_size);
  for (double v : logits_)
    if (!std::isfinite(v)) throw NumericError("non-finite logits during decoding");
  return logits_;
}

int argmax(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

std::vector<int> greedy_decode(const Parameters& params, std::span<const int> prefix, std::size_t n) {
  if (prefix.empty()) throw ContractError("greedy_decode needs a non-empty prefix");
  validate_tokens(params.config(), prefix);
  std::vector<int> out;
  if (n == 0) return out;
  if (prefix.size() + n - 1 > params.config().max_seq_len)
    throw InputError("prefix plus continuation exceeds max_seq_len");
  IncrementalDecoder dec(params);
  for (std::size_t i = 0; i + 1 < prefix.size(); ++i) dec.push(prefix[i], false);
  int next = argmax(dec.push(prefix.back()));
  out.push_back(next);
  while (out.size() < n) {
    next = argmax(dec.push(next));
    out.push_back(next);
  }
  return out;
}

}  // namespace memlab
