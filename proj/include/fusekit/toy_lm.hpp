#pragma once

#include "fusekit/errors.hpp"
#include "fusekit/tensor.hpp"
#include "fusekit/vocabulary.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace fusekit {

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Neural bigram language model: the previous token's embedding goes through
/// one tanh layer and a softmax over the vocabulary.
///
///   x = embedding[prev]            (1 x d)
///   z = tanh(x * hidden + hidden_bias)   (1 x h)
///   p = softmax(z * output + output_bias)  (1 x V)
template <typename Scalar>
struct ToyLM {
  Matrix<Scalar> embedding;      // V x d
  Matrix<Scalar> hidden;         // d x h
  RowVector<Scalar> hidden_bias;  // h
  Matrix<Scalar> output;         // h x V
  RowVector<Scalar> output_bias;  // V

  Eigen::Index vocab_size() const { return embedding.rows(); }
  Eigen::Index embed_dim() const { return embedding.cols(); }
  Eigen::Index hidden_dim() const { return hidden.cols(); }

  static ToyLM zeros(Eigen::Index vocab, Eigen::Index embed, Eigen::Index hidden_units) {
    return {Matrix<Scalar>::Zero(vocab, embed), Matrix<Scalar>::Zero(embed, hidden_units),
            RowVector<Scalar>::Zero(hidden_units), Matrix<Scalar>::Zero(hidden_units, vocab),
            RowVector<Scalar>::Zero(vocab)};
  }

  ToyLM zeros_like() const { return zeros(vocab_size(), embed_dim(), hidden_dim()); }

  /// this += scale * other
  void add_scaled(const ToyLM& other, Scalar scale) {
    embedding += scale * other.embedding;
    hidden += scale * other.hidden;
    hidden_bias += scale * other.hidden_bias;
    output += scale * other.output;
    output_bias += scale * other.output_bias;
  }

  template <typename Fn>
  void for_each_block(Fn&& fn) {
    fn(embedding);
    fn(hidden);
    fn(hidden_bias);
    fn(output);
    fn(output_bias);
  }

  template <typename Fn>
  void for_each_block(Fn&& fn) const {
    fn(embedding);
    fn(hidden);
    fn(hidden_bias);
    fn(output);
    fn(output_bias);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_block([&n](const auto& b) { n += static_cast<std::size_t>(b.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_block([&ok](const auto& b) { ok = ok && b.allFinite(); });
    return ok;
  }

  template <typename To>
  ToyLM<To> cast() const {
    return {embedding.template cast<To>(), hidden.template cast<To>(), hidden_bias.template cast<To>(),
            output.template cast<To>(), output_bias.template cast<To>()};
  }

  friend bool operator==(const ToyLM& a, const ToyLM& b) {
    const auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return same(a.embedding, b.embedding) && same(a.hidden, b.hidden) && same(a.hidden_bias, b.hidden_bias) &&
           same(a.output, b.output) && same(a.output_bias, b.output_bias);
  }
};

/// Gaussian initialization with standard deviation `scale`; deterministic for
/// a given seed.
template <typename Scalar = double>
ToyLM<Scalar> init_toy_lm(Eigen::Index vocab, Eigen::Index embed, Eigen::Index hidden_units, std::uint64_t seed,
                          double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  auto model = ToyLM<Scalar>::zeros(vocab, embed, hidden_units);
  model.for_each_block([&](auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = static_cast<Scalar>(normal(rng));
  });
  return model;
}

/// Previous-token context for each response position: the last instruction
/// token (or `bos` when the instruction is empty) and then the response
/// shifted by one.
inline std::vector<TokenId> context_tokens(std::span<const TokenId> instruction, std::span<const TokenId> response,
                                           TokenId bos = 0) {
  std::vector<TokenId> ctx;
  ctx.reserve(response.size());
  if (!response.empty()) ctx.push_back(instruction.empty() ? bos : instruction.back());
  for (std::size_t t = 1; t < response.size(); ++t) ctx.push_back(response[t - 1]);
  return ctx;
}

template <typename Scalar>
struct ForwardPass {
  std::vector<TokenId> context;
  Matrix<Scalar> inputs;       // N x d
  Matrix<Scalar> activations;  // N x h, after tanh
  Matrix<Scalar> log_probs;    // N x V
  Matrix<Scalar> probs;        // N x V
};

template <typename Scalar>
ForwardPass<Scalar> forward(const ToyLM<Scalar>& model, std::vector<TokenId> context) {
  const auto n = static_cast<Eigen::Index>(context.size());
  ForwardPass<Scalar> pass;
  pass.inputs.resize(n, model.embed_dim());
  for (Eigen::Index t = 0; t < n; ++t) {
    if (context[t] >= static_cast<std::size_t>(model.vocab_size())) {
      throw DataError("context token " + std::to_string(context[t]) + " out of vocabulary range");
    }
    pass.inputs.row(t) = model.embedding.row(context[t]);
  }
  Matrix<Scalar> pre = pass.inputs * model.hidden;
  pre.rowwise() += model.hidden_bias;
  pass.activations = pre.array().tanh().matrix();

  Matrix<Scalar> logits = pass.activations * model.output;
  logits.rowwise() += model.output_bias;
  pass.log_probs.resize(n, model.vocab_size());
  pass.probs.resize(n, model.vocab_size());
  for (Eigen::Index t = 0; t < n; ++t) {
    const Scalar peak = logits.row(t).maxCoeff();
    const Scalar lse = peak + std::log((logits.row(t).array() - peak).exp().sum());
    pass.log_probs.row(t) = logits.row(t).array() - lse;
    pass.probs.row(t) = pass.log_probs.row(t).array().exp();
  }
  pass.context = std::move(context);
  return pass;
}

/// Accumulates parameter gradients given d(loss)/d(logits).
template <typename Scalar>
void backward(const ToyLM<Scalar>& model, const ForwardPass<Scalar>& pass, const Matrix<Scalar>& dlogits,
              ToyLM<Scalar>& grad) {
  grad.output.noalias() += pass.activations.transpose() * dlogits;
  grad.output_bias += dlogits.colwise().sum();
  const Matrix<Scalar> dpre =
      ((dlogits * model.output.transpose()).array() * (Scalar(1) - pass.activations.array().square())).matrix();
  grad.hidden.noalias() += pass.inputs.transpose() * dpre;
  grad.hidden_bias += dpre.colwise().sum();
  const Matrix<Scalar> dinputs = dpre * model.hidden.transpose();
  for (Eigen::Index t = 0; t < dinputs.rows(); ++t) grad.embedding.row(pass.context[t]) += dinputs.row(t);
}

}  // namespace fusekit
