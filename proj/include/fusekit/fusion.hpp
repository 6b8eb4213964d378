#pragma once

#include "fusekit/distribution.hpp"
#include "fusekit/tensor.hpp"
#include "fusekit/toy_lm.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fusekit {

struct SupervisedExample {
  std::vector<TokenId> instruction;
  std::vector<TokenId> response;
};

/// Probability floor applied when a distribution lacks mass at a scored id.
inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over rows of the cross entropy -sum_v p[v] log q[v], taken over the
/// support of `p`. Missing `q` mass is floored at kProbabilityFloor.
double matrix_cross_entropy(const DistributionMatrix& p, const DistributionMatrix& q);

/// Same, against a dense N x V matrix of probabilities.
double matrix_cross_entropy(const DistributionMatrix& p, const Matrix<double>& q);

/// Mean row entropy of `p`.
double mean_entropy(const DistributionMatrix& p);

/// Cross entropy of the gold response's one-hot matrix against `m`.
double gold_cross_entropy(const DistributionMatrix& m, std::span<const TokenId> gold);

/// Minimum cross-entropy fusion: whichever matrix predicts the gold response
/// better, returned unmodified. Ties go to the pivot.
const DistributionMatrix& fuse_mince(const DistributionMatrix& pivot, const DistributionMatrix& source,
                                     const SupervisedExample& gold);

struct LossAndGrad {
  double loss = 0.0;
  ToyLM<double> grad;
};

/// Mean negative log-likelihood of the response under the model.
LossAndGrad sft_loss(const ToyLM<double>& model, const SupervisedExample& example);

/// Mean cross entropy between the fused target rows and the model's dense
/// predictions.
LossAndGrad fusion_loss(const ToyLM<double>& model, const SupervisedExample& example,
                        const DistributionMatrix& fused);

/// lambda * sft + (1 - lambda) * fusion
double combined_loss(double lambda, double sft, double fusion);

struct CombinedLoss {
  double sft = 0.0;
  double fusion = 0.0;
  double combined = 0.0;
  ToyLM<double> grad;
};

CombinedLoss combined_loss_and_grad(const ToyLM<double>& model, const SupervisedExample& example,
                                    const DistributionMatrix& fused, double lambda);

/// Dense N x V predictions for every response position.
Matrix<double> predict(const ToyLM<double>& model, const SupervisedExample& example);

/// Top-k prediction dump of the model over a dataset (teacher forcing on the
/// gold responses).
DistributionDump predict_dump(const ToyLM<double>& model, std::span<const SupervisedExample> dataset, std::size_t k,
                              const std::string& model_id);

struct TrainConfig {
  double lambda = 0.9;
  double learning_rate = 0.5;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double sft = 0.0;
  double fusion = 0.0;
  double combined = 0.0;
};

struct TrainResult {
  ToyLM<double> model;
  std::vector<EpochLoss> trace;
  std::size_t pivot_selected = 0;  // instructions where MinCE kept the pivot matrix
};

/// Full-batch gradient descent on lambda * L_sft + (1 - lambda) * L_fusion,
/// where each instruction's fusion target is the MinCE choice between the
/// pivot's and the source's pivot-space distribution matrices.
TrainResult train_pairwise_fusion(const ToyLM<double>& pivot_init, std::span<const SupervisedExample> dataset,
                                  const DistributionDump& pivot_dump, const DistributionDump& source_dump,
                                  const TrainConfig& config);

/// Plain supervised fine-tuning with the same optimizer.
TrainResult train_sft(const ToyLM<double>& init, std::span<const SupervisedExample> dataset,
                      const TrainConfig& config);

std::string format_loss_trace(std::span<const EpochLoss> trace);

NamedTensorMap to_tensor_map(const ToyLM<double>& model, const std::string& model_id);
ToyLM<double> toy_lm_from_tensor_map(const NamedTensorMap& map);

}  // namespace fusekit
