#pragma once

#include "fusekit/errors.hpp"
#include "fusekit/tensor.hpp"
#include "fusekit/tensorio.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fusekit {

// Shipped hyperparameter defaults.
inline constexpr double kDefaultSceTau = 10.0;          // percent
inline constexpr double kDefaultTaskArithmeticScale = 0.3;
inline constexpr double kDefaultTiesTrimRate = 0.4;
inline constexpr double kDefaultDareDropRate = 0.4;

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// delta_j = target_j - pivot for every target, tensor by tensor.
template <typename Scalar>
struct FusionVectorSet {
  std::vector<TensorMap<Scalar>> deltas;

  std::size_t size() const { return deltas.size(); }
};

struct SelectMask {
  double tau = kDefaultSceTau;
  std::map<std::string, Mask> masks;
};

/// eta[name][j]: share of target j in tensor `name`.
template <typename Scalar>
struct CoefficientTable {
  std::map<std::string, std::vector<Scalar>> eta;
};

enum class SceVariant {
  Full,           // select, calculate, erase
  NoSelect,       // calculate and erase ("CE")
  CalculateOnly,  // calculate only ("C")
};

const char* to_string(SceVariant v);

struct MatrixReport {
  std::size_t numel = 0;
  std::size_t selected = 0;  // elements kept by the selection mask
  std::size_t erased = 0;    // nonzero delta entries zeroed by sign election
  std::size_t dropped = 0;   // delta entries zeroed by trimming or random drop
  std::vector<double> eta;
};

struct MergeReport {
  std::string method;
  std::size_t targets = 0;
  bool select_applied = false;
  bool erase_applied = false;
  std::map<std::string, double> hyperparameters;
  std::map<std::string, MatrixReport> matrices;
};

/// Canonical (sorted-key, compact) JSON text.
std::string format_merge_report(const MergeReport& report);

template <typename Scalar>
struct MergeResult {
  TensorMap<Scalar> merged;
  MergeReport report;
};

/// Counter-based uniform draw in [0, 1) keyed by (seed, target, tensor,
/// element).
double keyed_uniform(std::uint64_t seed, std::uint64_t target, std::string_view tensor, std::uint64_t element);

namespace detail {

/// Sum in ascending value order so results do not depend on target order.
template <typename Scalar>
Scalar ordered_sum(std::vector<Scalar>& values) {
  std::sort(values.begin(), values.end());
  Scalar s = Scalar(0);
  for (Scalar v : values) s += v;
  return s;
}

template <typename Scalar>
int sign_of(Scalar v) {
  return (v > Scalar(0)) - (v < Scalar(0));
}

template <typename Scalar>
void check_inputs(const TensorMap<Scalar>& pivot, std::span<const TensorMap<Scalar>> targets) {
  if (targets.empty()) throw ConfigError("at least one target checkpoint is required");
  std::vector<TensorMap<Scalar>> all;
  all.reserve(targets.size() + 1);
  all.push_back(pivot);
  all.insert(all.end(), targets.begin(), targets.end());
  validate_same_geometry(std::span<const TensorMap<Scalar>>(all));
}

template <typename Scalar>
void check_same_geometry(std::span<const TensorMap<Scalar>> targets) {
  if (targets.empty()) throw ConfigError("at least one target checkpoint is required");
  validate_same_geometry(targets);
}

/// Indices (into `magnitudes`) of the `keep` largest values, plus every value
/// tied with the smallest of them.
template <typename Scalar>
Mask top_mask(const Matrix<Scalar>& magnitudes, std::size_t keep) {
  Mask mask = Mask::Constant(magnitudes.rows(), magnitudes.cols(), false);
  const auto n = static_cast<std::size_t>(magnitudes.size());
  if (keep == 0) return mask;
  if (keep >= n) return Mask::Constant(magnitudes.rows(), magnitudes.cols(), true);
  std::vector<Scalar> sorted(magnitudes.data(), magnitudes.data() + n);
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep - 1), sorted.end(),
                   std::greater<>());
  const Scalar threshold = sorted[keep - 1];
  mask = magnitudes.array() >= threshold;
  return mask;
}

template <typename Scalar>
MatrixReport& report_entry(MergeReport& report, const std::string& name, const Tensor<Scalar>& t) {
  auto& r = report.matrices[name];
  r.numel = t.numel();
  return r;
}

template <typename Scalar>
TensorMap<Scalar> with_metadata(const TensorMap<Scalar>& pivot, const std::string& method) {
  TensorMap<Scalar> out;
  out.metadata = pivot.metadata;
  out.metadata["merge_method"] = method;
  return out;
}

}  // namespace detail

/// Number of elements the top-tau% selection keeps in a tensor of `numel`
/// elements: ceil(tau / 100 * numel).
inline std::size_t selection_count(double tau, std::size_t numel) {
  if (!(tau > 0.0 && tau <= 100.0)) throw ConfigError("tau must lie in (0, 100]");
  const double exact = tau * static_cast<double>(numel) / 100.0;
  return std::min(numel, static_cast<std::size_t>(std::ceil(exact)));
}

template <typename Scalar>
FusionVectorSet<Scalar> compute_fusion_vectors(std::span<const TensorMap<Scalar>> targets,
                                               const TensorMap<Scalar>& pivot) {
  detail::check_inputs(pivot, targets);
  FusionVectorSet<Scalar> out;
  for (const auto& target : targets) {
    TensorMap<Scalar> delta;
    for (const auto& [name, t] : target.tensors) {
      delta.tensors.emplace(name, Tensor<Scalar>{t.shape, t.values - pivot.tensors.at(name).values});
    }
    out.deltas.push_back(std::move(delta));
  }
  return out;
}

/// Keeps, per tensor, the elements whose population variance across targets
/// is among the top tau percent (ties at the threshold included); every
/// other entry of every delta is zeroed.
template <typename Scalar>
std::pair<FusionVectorSet<Scalar>, SelectMask> sce_select(const FusionVectorSet<Scalar>& vectors, double tau) {
  if (vectors.size() < 2) throw ConfigError("selection by variance needs at least two targets");
  if (!(tau > 0.0 && tau <= 100.0)) throw ConfigError("tau must lie in (0, 100]");
  const std::size_t k = vectors.size();
  FusionVectorSet<Scalar> masked = vectors;
  SelectMask select{tau, {}};
  std::vector<Scalar> values(k);
  std::vector<Scalar> squares;
  for (const auto& [name, first] : vectors.deltas.front().tensors) {
    const auto rows = first.values.rows();
    const auto cols = first.values.cols();
    Matrix<Scalar> variance(rows, cols);
    for (Eigen::Index e = 0; e < first.values.size(); ++e) {
      // population variance as sum_{i<j} (x_i - x_j)^2 / k^2
      for (std::size_t j = 0; j < k; ++j) values[j] = vectors.deltas[j].tensors.at(name).values.data()[e];
      std::sort(values.begin(), values.end());
      squares.clear();
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) squares.push_back((values[j] - values[i]) * (values[j] - values[i]));
      }
      variance.data()[e] = detail::ordered_sum(squares) / static_cast<Scalar>(k * k);
    }
    Mask mask = detail::top_mask(variance, selection_count(tau, first.numel()));
    for (auto& delta : masked.deltas) {
      auto& v = delta.tensors.at(name).values;
      v = mask.select(v.array(), Scalar(0)).matrix();
    }
    select.masks.emplace(name, std::move(mask));
  }
  return {std::move(masked), std::move(select)};
}

/// eta_{j,m} = ||delta_{j,m}||^2 / sum_j ||delta_{j,m}||^2, uniform when every
/// delta of tensor m is zero.
template <typename Scalar>
CoefficientTable<Scalar> sce_calculate(const FusionVectorSet<Scalar>& masked) {
  CoefficientTable<Scalar> table;
  if (masked.deltas.empty()) return table;
  const std::size_t k = masked.size();
  for (const auto& [name, first] : masked.deltas.front().tensors) {
    std::vector<Scalar> energy(k);
    for (std::size_t j = 0; j < k; ++j) energy[j] = masked.deltas[j].tensors.at(name).values.squaredNorm();
    std::vector<Scalar> scratch = energy;
    const Scalar total = detail::ordered_sum(scratch);
    auto& eta = table.eta[name];
    eta.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
      eta[j] = total > Scalar(0) ? energy[j] / total : Scalar(1) / static_cast<Scalar>(k);
    }
  }
  return table;
}

/// Zeroes every entry whose sign disagrees with the sign of the per-element
/// sum across targets; zero-sum elements are zeroed everywhere.
template <typename Scalar>
FusionVectorSet<Scalar> sce_erase(const FusionVectorSet<Scalar>& masked) {
  FusionVectorSet<Scalar> out = masked;
  if (masked.deltas.empty()) return out;
  const std::size_t k = masked.size();
  std::vector<Scalar> values(k);
  for (const auto& [name, first] : masked.deltas.front().tensors) {
    for (Eigen::Index e = 0; e < first.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) values[j] = masked.deltas[j].tensors.at(name).values.data()[e];
      const int elected = detail::sign_of(detail::ordered_sum(values));
      for (std::size_t j = 0; j < k; ++j) {
        Scalar& v = out.deltas[j].tensors.at(name).values.data()[e];
        if (detail::sign_of(v) != elected) v = Scalar(0);
      }
    }
  }
  return out;
}

/// Select-calculate-erase merge: Phi_m = pivot_m + sum_j eta_{j,m} delta'_{j,m}.
/// A single target is returned unchanged.
template <typename Scalar>
MergeResult<Scalar> sce_merge(const TensorMap<Scalar>& pivot, std::span<const TensorMap<Scalar>> targets,
                              double tau = kDefaultSceTau, SceVariant variant = SceVariant::Full) {
  if (!(tau > 0.0 && tau <= 100.0)) throw ConfigError("tau must lie in (0, 100]");
  detail::check_inputs(pivot, targets);
  const std::size_t k = targets.size();

  MergeResult<Scalar> result;
  auto& report = result.report;
  report.method = std::string("sce") + (variant == SceVariant::Full ? "" : variant == SceVariant::NoSelect ? "-ce" : "-c");
  report.targets = k;
  report.select_applied = variant == SceVariant::Full && k > 1;
  report.erase_applied = variant != SceVariant::CalculateOnly && k > 1;
  if (variant == SceVariant::Full) report.hyperparameters["tau"] = tau;
  result.merged = detail::with_metadata(pivot, report.method);

  if (k == 1) {
    for (const auto& [name, t] : targets.front().tensors) {
      result.merged.tensors.emplace(name, t);
      auto& r = detail::report_entry(report, name, t);
      r.selected = t.numel();
      r.eta = {1.0};
    }
    return result;
  }

  const auto vectors = compute_fusion_vectors(targets, pivot);
  FusionVectorSet<Scalar> masked;
  if (variant == SceVariant::Full) {
    auto [selected, select] = sce_select(vectors, tau);
    masked = std::move(selected);
    for (const auto& [name, mask] : select.masks) {
      detail::report_entry(report, name, pivot.tensors.at(name)).selected = static_cast<std::size_t>(mask.count());
    }
  } else {
    masked = vectors;
    for (const auto& [name, t] : pivot.tensors) detail::report_entry(report, name, t).selected = t.numel();
  }

  const auto eta = sce_calculate(masked);
  const auto erased = variant == SceVariant::CalculateOnly ? masked : sce_erase(masked);

  std::vector<Scalar> terms(k);
  for (const auto& [name, base] : pivot.tensors) {
    auto& r = report.matrices[name];
    const auto& coeff = eta.eta.at(name);
    r.eta.assign(coeff.begin(), coeff.end());
    for (std::size_t j = 0; j < k; ++j) {
      const auto& before = masked.deltas[j].tensors.at(name).values;
      const auto& after = erased.deltas[j].tensors.at(name).values;
      r.erased += static_cast<std::size_t>(((before.array() != Scalar(0)) && (after.array() == Scalar(0))).count());
    }
    Tensor<Scalar> out{base.shape, base.values};
    for (Eigen::Index e = 0; e < base.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) terms[j] = coeff[j] * erased.deltas[j].tensors.at(name).values.data()[e];
      out.values.data()[e] = base.values.data()[e] + detail::ordered_sum(terms);
    }
    result.merged.tensors.emplace(name, std::move(out));
  }
  return result;
}

/// Elementwise mean of the targets.
template <typename Scalar>
MergeResult<Scalar> merge_linear(std::span<const TensorMap<Scalar>> targets) {
  detail::check_same_geometry(targets);
  const std::size_t k = targets.size();
  MergeResult<Scalar> result;
  result.report.method = "linear";
  result.report.targets = k;
  result.merged = detail::with_metadata(targets.front(), "linear");
  std::vector<Scalar> values(k);
  for (const auto& [name, first] : targets.front().tensors) {
    Tensor<Scalar> out{first.shape, first.values};
    for (Eigen::Index e = 0; e < first.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) values[j] = targets[j].tensors.at(name).values.data()[e];
      out.values.data()[e] = detail::ordered_sum(values) / static_cast<Scalar>(k);
    }
    auto& r = detail::report_entry(result.report, name, first);
    r.selected = first.numel();
    r.eta.assign(k, 1.0 / static_cast<double>(k));
    result.merged.tensors.emplace(name, std::move(out));
  }
  return result;
}

/// pivot + scale * sum_j delta_j
template <typename Scalar>
MergeResult<Scalar> merge_task_arithmetic(const TensorMap<Scalar>& pivot, std::span<const TensorMap<Scalar>> targets,
                                          double scale = kDefaultTaskArithmeticScale) {
  if (!std::isfinite(scale)) throw ConfigError("task-arithmetic scale must be finite");
  const auto vectors = compute_fusion_vectors(targets, pivot);
  const std::size_t k = targets.size();
  MergeResult<Scalar> result;
  result.report.method = "ta";
  result.report.targets = k;
  result.report.hyperparameters["scale"] = scale;
  result.merged = detail::with_metadata(pivot, "ta");
  std::vector<Scalar> values(k);
  for (const auto& [name, base] : pivot.tensors) {
    Tensor<Scalar> out{base.shape, base.values};
    for (Eigen::Index e = 0; e < base.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) values[j] = vectors.deltas[j].tensors.at(name).values.data()[e];
      out.values.data()[e] = base.values.data()[e] + static_cast<Scalar>(scale) * detail::ordered_sum(values);
    }
    auto& r = detail::report_entry(result.report, name, base);
    r.selected = base.numel();
    r.eta.assign(k, scale);
    result.merged.tensors.emplace(name, std::move(out));
  }
  return result;
}

/// Trim each delta to its largest-magnitude (1 - trim_rate) share per tensor
/// (magnitude ties at the threshold kept), elect a sign per element from the
/// summed trimmed deltas, then average the surviving entries that agree with
/// it.
template <typename Scalar>
MergeResult<Scalar> merge_ties(const TensorMap<Scalar>& pivot, std::span<const TensorMap<Scalar>> targets,
                               double trim_rate = kDefaultTiesTrimRate) {
  if (!(trim_rate >= 0.0 && trim_rate < 1.0)) throw ConfigError("trim rate must lie in [0, 1)");
  auto vectors = compute_fusion_vectors(targets, pivot);
  const std::size_t k = targets.size();
  MergeResult<Scalar> result;
  result.report.method = "ties";
  result.report.targets = k;
  result.report.erase_applied = true;
  result.report.hyperparameters["trim_rate"] = trim_rate;
  result.merged = detail::with_metadata(pivot, "ties");

  std::vector<Scalar> values(k);
  std::vector<Scalar> agreeing;
  for (const auto& [name, base] : pivot.tensors) {
    auto& r = detail::report_entry(result.report, name, base);
    const std::size_t numel = base.numel();
    const auto trimmed = static_cast<std::size_t>(std::floor(trim_rate * static_cast<double>(numel) + 1e-9));
    for (auto& delta : vectors.deltas) {
      auto& v = delta.tensors.at(name).values;
      const Matrix<Scalar> magnitude = v.cwiseAbs();
      const Mask keep = detail::top_mask(magnitude, numel - trimmed);
      r.dropped += static_cast<std::size_t>(((!keep) && (v.array() != Scalar(0))).count());
      v = keep.select(v.array(), Scalar(0)).matrix();
    }
    Tensor<Scalar> out{base.shape, base.values};
    for (Eigen::Index e = 0; e < base.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) values[j] = vectors.deltas[j].tensors.at(name).values.data()[e];
      std::vector<Scalar> scratch = values;
      const int elected = detail::sign_of(detail::ordered_sum(scratch));
      agreeing.clear();
      for (Scalar v : values) {
        if (v != Scalar(0) && detail::sign_of(v) == elected) {
          agreeing.push_back(v);
        } else if (v != Scalar(0)) {
          ++r.erased;
        }
      }
      const Scalar merged =
          agreeing.empty() ? Scalar(0) : detail::ordered_sum(agreeing) / static_cast<Scalar>(agreeing.size());
      out.values.data()[e] = base.values.data()[e] + merged;
    }
    r.selected = numel - trimmed;
    result.merged.tensors.emplace(name, std::move(out));
  }
  return result;
}

/// Canonical target index used to key DARE's random stream: the position of
/// each target in the sorted order of their "model_id" metadata, or the list
/// position when ids are missing or repeated.
template <typename Scalar>
std::vector<std::size_t> canonical_target_keys(std::span<const TensorMap<Scalar>> targets) {
  std::vector<std::size_t> keys(targets.size());
  std::iota(keys.begin(), keys.end(), std::size_t{0});
  std::vector<std::string> ids;
  for (const auto& t : targets) {
    const auto it = t.metadata.find("model_id");
    if (it == t.metadata.end()) return keys;
    ids.push_back(it->second);
  }
  std::vector<std::string> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return keys;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    keys[j] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), ids[j]) - sorted.begin());
  }
  return keys;
}

/// Drop each delta entry with probability drop_rate, rescale survivors by
/// 1 / (1 - drop_rate) and add the mean rescaled delta to the pivot.
template <typename Scalar>
MergeResult<Scalar> merge_dare(const TensorMap<Scalar>& pivot, std::span<const TensorMap<Scalar>> targets,
                               double drop_rate = kDefaultDareDropRate, std::uint64_t seed = 0) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ConfigError("drop rate must lie in [0, 1)");
  auto vectors = compute_fusion_vectors(targets, pivot);
  const std::size_t k = targets.size();
  const auto keys = canonical_target_keys(targets);
  MergeResult<Scalar> result;
  result.report.method = "dare";
  result.report.targets = k;
  result.report.hyperparameters["drop_rate"] = drop_rate;
  result.report.hyperparameters["seed"] = static_cast<double>(seed);
  result.merged = detail::with_metadata(pivot, "dare");

  const Scalar rescale = Scalar(1) / static_cast<Scalar>(1.0 - drop_rate);
  std::vector<Scalar> values(k);
  for (const auto& [name, base] : pivot.tensors) {
    auto& r = detail::report_entry(result.report, name, base);
    for (std::size_t j = 0; j < k; ++j) {
      auto& v = vectors.deltas[j].tensors.at(name).values;
      for (Eigen::Index e = 0; e < v.size(); ++e) {
        if (keyed_uniform(seed, keys[j], name, static_cast<std::uint64_t>(e)) < drop_rate) {
          v.data()[e] = Scalar(0);
          ++r.dropped;
        } else {
          v.data()[e] *= rescale;
        }
      }
    }
    Tensor<Scalar> out{base.shape, base.values};
    for (Eigen::Index e = 0; e < base.values.size(); ++e) {
      for (std::size_t j = 0; j < k; ++j) values[j] = vectors.deltas[j].tensors.at(name).values.data()[e];
      out.values.data()[e] = base.values.data()[e] + detail::ordered_sum(values) / static_cast<Scalar>(k);
    }
    r.selected = base.numel();
    r.eta.assign(k, 1.0 / static_cast<double>(k));
    result.merged.tensors.emplace(name, std::move(out));
  }
  return result;
}

}  // namespace fusekit
