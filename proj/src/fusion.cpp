#include "fusekit/fusion.hpp"

#include "fusekit/errors.hpp"
#include "fusekit/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace fusekit {

namespace {

void check_example(const SupervisedExample& example, std::size_t vocab_size) {
  if (example.response.empty()) throw DataError("example has an empty response");
  for (TokenId t : example.instruction) {
    if (t >= vocab_size) throw DataError("instruction token " + std::to_string(t) + " out of vocabulary range");
  }
  for (TokenId t : example.response) {
    if (t >= vocab_size) throw DataError("response token " + std::to_string(t) + " out of vocabulary range");
  }
}

ForwardPass<double> run(const ToyLM<double>& model, const SupervisedExample& example) {
  check_example(example, static_cast<std::size_t>(model.vocab_size()));
  return forward(model, context_tokens(example.instruction, example.response));
}

void check_fused(const DistributionMatrix& fused, const SupervisedExample& example, const ToyLM<double>& model) {
  if (fused.rows.size() != example.response.size()) {
    throw DataError("fused matrix has " + std::to_string(fused.rows.size()) + " rows, response has " +
                    std::to_string(example.response.size()) + " tokens");
  }
  if (fused.vocab_size != static_cast<std::size_t>(model.vocab_size())) {
    throw DataError("fused matrix vocabulary size does not match the model");
  }
}

// d(mean NLL)/d(logits) = (p - onehot) / N
Matrix<double> sft_logit_grad(const ForwardPass<double>& pass, std::span<const TokenId> gold) {
  Matrix<double> d = pass.probs;
  for (std::size_t t = 0; t < gold.size(); ++t) d(static_cast<Eigen::Index>(t), gold[t]) -= 1.0;
  return d / static_cast<double>(gold.size());
}

double sft_value(const ForwardPass<double>& pass, std::span<const TokenId> gold) {
  double total = 0.0;
  for (std::size_t t = 0; t < gold.size(); ++t) total -= pass.log_probs(static_cast<Eigen::Index>(t), gold[t]);
  return total / static_cast<double>(gold.size());
}

// d(mean soft CE)/d(logits) = (sum(target) * p - target) / N
Matrix<double> fusion_logit_grad(const ForwardPass<double>& pass, const DistributionMatrix& fused) {
  Matrix<double> d = pass.probs;
  for (std::size_t t = 0; t < fused.rows.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    d.row(r) *= row_sum(fused.rows[t]);
    for (const auto& e : fused.rows[t]) d(r, e.id) -= e.prob;
  }
  return d / static_cast<double>(fused.rows.size());
}

double fusion_value(const ForwardPass<double>& pass, const DistributionMatrix& fused) {
  double total = 0.0;
  for (std::size_t t = 0; t < fused.rows.size(); ++t) {
    for (const auto& e : fused.rows[t]) total -= e.prob * pass.log_probs(static_cast<Eigen::Index>(t), e.id);
  }
  return total / static_cast<double>(fused.rows.size());
}

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
}

void check_dump(const DistributionDump& dump, std::span<const SupervisedExample> dataset, std::size_t vocab,
                const char* which) {
  if (dump.instructions.size() != dataset.size()) {
    throw DataError(std::string(which) + " dump has " + std::to_string(dump.instructions.size()) +
                    " instructions, dataset has " + std::to_string(dataset.size()));
  }
  if (dump.vocab_size != vocab) throw DataError(std::string(which) + " dump is not in the model's vocabulary");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dump.instructions[i].rows.size() != dataset[i].response.size()) {
      throw DataError(std::string(which) + " dump instruction " + std::to_string(i) + " has " +
                      std::to_string(dump.instructions[i].rows.size()) + " positions, response has " +
                      std::to_string(dataset[i].response.size()));
    }
  }
}

template <typename StepFn>
TrainResult descend(const ToyLM<double>& init, std::size_t examples, const TrainConfig& config, StepFn&& step) {
  if (examples == 0) throw DataError("training set is empty");
  if (!(config.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  TrainResult result{init, {}, 0};
  std::vector<CombinedLoss> per_example(examples);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    parallel_for(examples, config.workers, [&](std::size_t i) { per_example[i] = step(result.model, i); });

    // fixed reduction order keeps the update independent of the worker count
    EpochLoss loss{epoch, 0.0, 0.0, 0.0};
    ToyLM<double> grad = result.model.zeros_like();
    for (const auto& e : per_example) {
      loss.sft += e.sft;
      loss.fusion += e.fusion;
      loss.combined += e.combined;
      grad.add_scaled(e.grad, 1.0);
    }
    const double m = static_cast<double>(examples);
    loss.sft /= m;
    loss.fusion /= m;
    loss.combined /= m;
    if (!std::isfinite(loss.combined) || !grad.all_finite()) {
      throw DataError("training diverged at epoch " + std::to_string(epoch));
    }
    result.trace.push_back(loss);
    result.model.add_scaled(grad, -config.learning_rate / m);
  }
  return result;
}

}  // namespace

double matrix_cross_entropy(const DistributionMatrix& p, const DistributionMatrix& q) {
  if (p.rows.size() != q.rows.size() || p.vocab_size != q.vocab_size) {
    throw DataError("cross entropy: matrices differ in shape");
  }
  if (p.rows.empty()) throw DataError("cross entropy: empty matrices");
  double total = 0.0;
  for (std::size_t t = 0; t < p.rows.size(); ++t) {
    for (const auto& e : p.rows[t]) total -= e.prob * std::log(std::max(prob_at(q.rows[t], e.id), kProbabilityFloor));
  }
  return total / static_cast<double>(p.rows.size());
}

double matrix_cross_entropy(const DistributionMatrix& p, const Matrix<double>& q) {
  if (static_cast<Eigen::Index>(p.rows.size()) != q.rows() || static_cast<Eigen::Index>(p.vocab_size) != q.cols()) {
    throw DataError("cross entropy: matrices differ in shape");
  }
  if (p.rows.empty()) throw DataError("cross entropy: empty matrices");
  double total = 0.0;
  for (std::size_t t = 0; t < p.rows.size(); ++t) {
    for (const auto& e : p.rows[t]) {
      total -= e.prob * std::log(std::max(q(static_cast<Eigen::Index>(t), e.id), kProbabilityFloor));
    }
  }
  return total / static_cast<double>(p.rows.size());
}

double mean_entropy(const DistributionMatrix& p) { return matrix_cross_entropy(p, p); }

double gold_cross_entropy(const DistributionMatrix& m, std::span<const TokenId> gold) {
  return matrix_cross_entropy(one_hot(gold, m.vocab_size), m);
}

const DistributionMatrix& fuse_mince(const DistributionMatrix& pivot, const DistributionMatrix& source,
                                     const SupervisedExample& gold) {
  if (pivot.rows.size() != gold.response.size() || source.rows.size() != gold.response.size() ||
      pivot.vocab_size != source.vocab_size) {
    throw DataError("fuse_mince: matrices do not match the gold response shape");
  }
  const double pivot_ce = gold_cross_entropy(pivot, gold.response);
  const double source_ce = gold_cross_entropy(source, gold.response);
  return source_ce < pivot_ce ? source : pivot;
}

LossAndGrad sft_loss(const ToyLM<double>& model, const SupervisedExample& example) {
  const auto pass = run(model, example);
  LossAndGrad out{sft_value(pass, example.response), model.zeros_like()};
  backward(model, pass, sft_logit_grad(pass, example.response), out.grad);
  return out;
}

LossAndGrad fusion_loss(const ToyLM<double>& model, const SupervisedExample& example,
                        const DistributionMatrix& fused) {
  check_fused(fused, example, model);
  const auto pass = run(model, example);
  LossAndGrad out{fusion_value(pass, fused), model.zeros_like()};
  backward(model, pass, fusion_logit_grad(pass, fused), out.grad);
  return out;
}

double combined_loss(double lambda, double sft, double fusion) {
  check_lambda(lambda);
  return lambda * sft + (1.0 - lambda) * fusion;
}

CombinedLoss combined_loss_and_grad(const ToyLM<double>& model, const SupervisedExample& example,
                                    const DistributionMatrix& fused, double lambda) {
  check_lambda(lambda);
  check_fused(fused, example, model);
  const auto pass = run(model, example);
  CombinedLoss out;
  out.sft = sft_value(pass, example.response);
  out.fusion = fusion_value(pass, fused);
  out.combined = combined_loss(lambda, out.sft, out.fusion);
  out.grad = model.zeros_like();
  if (lambda == 1.0) {
    backward(model, pass, sft_logit_grad(pass, example.response), out.grad);
  } else if (lambda == 0.0) {
    backward(model, pass, fusion_logit_grad(pass, fused), out.grad);
  } else {
    const Matrix<double> d =
        lambda * sft_logit_grad(pass, example.response) + (1.0 - lambda) * fusion_logit_grad(pass, fused);
    backward(model, pass, d, out.grad);
  }
  return out;
}

Matrix<double> predict(const ToyLM<double>& model, const SupervisedExample& example) {
  return run(model, example).probs;
}

DistributionDump predict_dump(const ToyLM<double>& model, std::span<const SupervisedExample> dataset, std::size_t k,
                              const std::string& model_id) {
  const auto vocab = static_cast<std::size_t>(model.vocab_size());
  if (k == 0 || k > vocab) throw ConfigError("top-k must lie in [1, vocab size]");
  DistributionDump dump{model_id, vocab, k, {}};
  for (const auto& example : dataset) {
    const Matrix<double> probs = predict(model, example);
    DistributionMatrix m{vocab, k, {}};
    for (Eigen::Index t = 0; t < probs.rows(); ++t) m.rows.push_back(sparse_from_dense(probs.row(t).transpose(), k));
    dump.instructions.push_back(std::move(m));
  }
  return dump;
}

TrainResult train_pairwise_fusion(const ToyLM<double>& pivot_init, std::span<const SupervisedExample> dataset,
                                  const DistributionDump& pivot_dump, const DistributionDump& source_dump,
                                  const TrainConfig& config) {
  check_lambda(config.lambda);
  const auto vocab = static_cast<std::size_t>(pivot_init.vocab_size());
  check_dump(pivot_dump, dataset, vocab, "pivot");
  check_dump(source_dump, dataset, vocab, "source");

  std::vector<const DistributionMatrix*> fused(dataset.size());
  std::size_t pivot_selected = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    fused[i] = &fuse_mince(pivot_dump.instructions[i], source_dump.instructions[i], dataset[i]);
    if (fused[i] == &pivot_dump.instructions[i]) ++pivot_selected;
  }

  auto result = descend(pivot_init, dataset.size(), config, [&](const ToyLM<double>& model, std::size_t i) {
    return combined_loss_and_grad(model, dataset[i], *fused[i], config.lambda);
  });
  result.pivot_selected = pivot_selected;
  return result;
}

TrainResult train_sft(const ToyLM<double>& init, std::span<const SupervisedExample> dataset,
                      const TrainConfig& config) {
  return descend(init, dataset.size(), config, [&](const ToyLM<double>& model, std::size_t i) {
    auto sft = sft_loss(model, dataset[i]);
    return CombinedLoss{sft.loss, std::numeric_limits<double>::quiet_NaN(), sft.loss, std::move(sft.grad)};
  });
}

std::string format_loss_trace(std::span<const EpochLoss> trace) {
  std::string out;
  for (const auto& e : trace) {
    const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    const nlohmann::json line = {
        {"epoch", e.epoch}, {"sft_loss", num(e.sft)}, {"fusion_loss", num(e.fusion)}, {"combined_loss", num(e.combined)}};
    out += line.dump() + "\n";
  }
  return out;
}

NamedTensorMap to_tensor_map(const ToyLM<double>& model, const std::string& model_id) {
  NamedTensorMap map;
  const auto put = [&map](const std::string& name, std::vector<std::size_t> shape, const auto& values) {
    auto t = make_tensor<float>(std::move(shape));
    t.values = Eigen::Map<const Matrix<double>>(values.data(), t.values.rows(), t.values.cols()).template cast<float>();
    map.tensors.emplace(name, std::move(t));
  };
  const auto v = static_cast<std::size_t>(model.vocab_size());
  const auto d = static_cast<std::size_t>(model.embed_dim());
  const auto h = static_cast<std::size_t>(model.hidden_dim());
  put("embedding", {v, d}, model.embedding);
  put("hidden.weight", {d, h}, model.hidden);
  put("hidden.bias", {h}, model.hidden_bias);
  put("output.weight", {h, v}, model.output);
  put("output.bias", {v}, model.output_bias);
  map.metadata = {{"model_id", model_id},
                  {"vocab_size", std::to_string(v)},
                  {"embed_dim", std::to_string(d)},
                  {"hidden_dim", std::to_string(h)}};
  return map;
}

ToyLM<double> toy_lm_from_tensor_map(const NamedTensorMap& map) {
  const auto get = [&map](const std::string& name, std::size_t rank) -> const Tensor<float>& {
    const auto it = map.tensors.find(name);
    if (it == map.tensors.end()) throw CheckpointError(name, "missing toy-model tensor");
    if (it->second.shape.size() != rank) throw CheckpointError(name, "unexpected rank");
    return it->second;
  };
  const auto& emb = get("embedding", 2);
  const auto& hid = get("hidden.weight", 2);
  const auto& hb = get("hidden.bias", 1);
  const auto& out = get("output.weight", 2);
  const auto& ob = get("output.bias", 1);
  const auto v = emb.shape[0], d = emb.shape[1], h = hid.shape[1];
  if (hid.shape[0] != d || hb.shape[0] != h || out.shape[0] != h || out.shape[1] != v || ob.shape[0] != v) {
    throw CheckpointError("", "toy-model tensor shapes are inconsistent");
  }
  ToyLM<double> model;
  model.embedding = emb.values.cast<double>();
  model.hidden = hid.values.cast<double>();
  model.hidden_bias = hb.values.row(0).cast<double>();
  model.output = out.values.cast<double>();
  model.output_bias = ob.values.row(0).cast<double>();
  return model;
}

}  // namespace fusekit
