// Acceptance harness: one PASS/FAIL line per primary criterion.

#include "fusekit/alignment.hpp"
#include "fusekit/cli.hpp"
#include "fusekit/distribution.hpp"
#include "fusekit/fusion.hpp"
#include "fusekit/merge.hpp"
#include "fusekit/projection.hpp"
#include "fusekit/tensorio.hpp"
#include "fusekit/vocabulary.hpp"
#include "oracles/lm_oracle.hpp"
#include "oracles/merge_oracle.hpp"
#include "oracles/segmentation_oracle.hpp"
#include "support.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace fusekit;

namespace {

using Map = TensorMap<double>;
using Clock = std::chrono::steady_clock;

/// Collects the outcome of one criterion; keeps the first failure message.
class Verdict {
public:
  void require(bool ok, const std::string& what) {
    if (!ok && passed_) {
      passed_ = false;
      failure_ = what;
    }
  }
  void note(const std::string& text) { notes_ += (notes_.empty() ? "" : "; ") + text; }
  bool passed() const { return passed_; }
  std::string detail() const { return passed_ ? notes_ : failure_ + (notes_.empty() ? "" : " [" + notes_ + "]"); }

private:
  bool passed_ = true;
  std::string failure_;
  std::string notes_;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

std::vector<oracle::Flat> flats(std::span<const Map> maps, const std::string& name) {
  std::vector<oracle::Flat> out;
  for (const auto& m : maps) out.push_back(support::flat(m.tensors.at(name)));
  return out;
}

double max_abs_diff(const Map& merged, const std::string& name, const oracle::Flat& expected) {
  const auto got = support::flat(merged.tensors.at(name));
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expected[i]));
  return worst;
}

bool same_bits(const Map& a, const Map& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    const auto it = b.tensors.find(name);
    if (it == b.tensors.end() || it->second.shape != t.shape) return false;
    if (std::memcmp(t.values.data(), it->second.values.data(), t.numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

std::vector<Map> random_targets(std::mt19937_64& rng, const support::Layout& layout, std::size_t k) {
  std::vector<Map> out;
  for (std::size_t j = 0; j < k; ++j) {
    out.push_back(support::random_map<double>(rng, layout));
    out.back().metadata["model_id"] = "target-" + std::to_string(j);
  }
  return out;
}

// ---------------------------------------------------------------- 1

Verdict sce_oracle_equivalence() {
  Verdict v;
  const auto start = Clock::now();
  std::mt19937_64 rng(101);
  const int taus[] = {10, 50, 100};
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto layout = support::random_layout(rng, 8);
    const auto pivot = support::random_map<double>(rng, layout);
    const auto targets = random_targets(rng, layout, 1 + trial % 3);
    const int tau = taus[(trial / 3) % 3];
    const auto result = sce_merge<double>(pivot, targets, tau);
    for (const auto& [name, _] : layout) {
      const auto expected = oracle::sce(support::flat(pivot.tensors.at(name)), flats(targets, name), tau, true, true);
      worst = std::max(worst, max_abs_diff(result.merged, name, expected.merged));
    }
  }
  const double elapsed = seconds_since(start);
  v.require(worst <= 1e-12, "max abs error " + fmt(worst) + " > 1e-12");
  v.require(elapsed < 5.0, "runtime " + fmt(elapsed) + " s >= 5 s");
  v.note("200 instances, max abs error " + fmt(worst) + ", " + fmt(elapsed) + " s");
  return v;
}

// ---------------------------------------------------------------- 2

Verdict sce_invariants() {
  Verdict v;
  const auto start = Clock::now();
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> tau_dist(1, 100);
  const int cases = 1000;
  for (int trial = 0; trial < cases; ++trial) {
    const auto layout = support::random_layout(rng, 8);
    const auto pivot = support::random_map<double>(rng, layout);
    auto targets = random_targets(rng, layout, 2 + trial % 2);
    const int tau = tau_dist(rng);
    const auto id = " (case " + std::to_string(trial) + ")";

    const auto result = sce_merge<double>(pivot, targets, tau);
    const auto vectors = compute_fusion_vectors<double>(targets, pivot);
    const auto [masked, select] = sce_select(vectors, tau);
    const auto eta = sce_calculate(masked);
    const auto erased = sce_erase(masked);

    for (const auto& [name, base] : pivot.tensors) {
      // coefficient normalization
      double energy = 0, total = 0;
      for (const auto& d : masked.deltas) energy += d.tensors.at(name).values.squaredNorm();
      for (double e : eta.eta.at(name)) total += e;
      if (energy > 0) v.require(std::abs(total - 1.0) <= 1e-9, "eta does not sum to 1" + id);

      // select cardinality, ties included
      const auto& mask = select.masks.at(name);
      const auto var = oracle::variances(flats(vectors.deltas, name));
      const std::size_t need = selection_count(tau, base.numel());
      const auto count = static_cast<std::size_t>(mask.count());
      double min_in = INFINITY, max_out = -INFINITY;
      for (std::size_t e = 0; e < var.size(); ++e) {
        (mask.data()[e] ? min_in : max_out) = mask.data()[e] ? std::min(min_in, var[e]) : std::max(max_out, var[e]);
      }
      v.require(count >= need, "mask smaller than ceil(tau * n / 100)" + id);
      v.require(count == need || min_in == max_out || count == var.size() ||
                    std::count(var.begin(), var.end(), min_in) > 1,
                "mask surplus without a tie" + id);
      v.require(max_out < min_in * (1 + 1e-12) + 1e-300, "an unselected element out-varies a selected one" + id);

      // erase sign soundness
      for (Eigen::Index e = 0; e < base.values.size(); ++e) {
        double sum = 0;
        for (const auto& d : masked.deltas) sum += d.tensors.at(name).values.data()[e];
        for (const auto& d : erased.deltas) {
          const double x = d.tensors.at(name).values.data()[e];
          if (x != 0) v.require(oracle::sgn(x) == oracle::sgn(sum), "surviving entry disagrees with the sum" + id);
        }
      }

      // reconstruction identity
      double worst = 0;
      const auto& coeff = eta.eta.at(name);
      for (Eigen::Index e = 0; e < base.values.size(); ++e) {
        double expected = 0;
        for (std::size_t j = 0; j < coeff.size(); ++j) expected += coeff[j] * erased.deltas[j].tensors.at(name).values.data()[e];
        const double got = result.merged.tensors.at(name).values.data()[e] - base.values.data()[e];
        worst = std::max(worst, std::abs(got - expected));
      }
      v.require(worst <= 1e-12, "merged - pivot differs from sum eta * delta'" + id);
    }

    // pivot fixed point
    const std::vector<Map> copies(targets.size(), pivot);
    v.require(same_bits(sce_merge<double>(pivot, copies, tau).merged, pivot), "pivot is not a fixed point" + id);

    // permutation invariance
    std::shuffle(targets.begin(), targets.end(), rng);
    v.require(same_bits(sce_merge<double>(pivot, targets, tau).merged, result.merged),
              "target order changed the merge" + id);
  }
  const double elapsed = seconds_since(start);
  v.require(elapsed < 30.0, "runtime " + fmt(elapsed) + " s >= 30 s");
  v.note(std::to_string(cases) + " cases, " + fmt(elapsed) + " s");
  return v;
}

// ---------------------------------------------------------------- 3

Verdict baseline_mergers() {
  Verdict v;
  std::mt19937_64 rng(303);
  double worst = 0;
  const int cases = 300;
  for (int trial = 0; trial < cases; ++trial) {
    const auto layout = support::random_layout(rng, 8);
    const auto pivot = support::random_map<double>(rng, layout);
    const auto targets = random_targets(rng, layout, 1 + trial % 3);
    const double rate = 0.1 * (trial % 10);
    const double scale = 0.1 * (trial % 7);
    const std::uint64_t seed = 5000 + static_cast<std::uint64_t>(trial);
    const auto lin = merge_linear<double>(targets).merged;
    const auto ta = merge_task_arithmetic<double>(pivot, targets, scale).merged;
    const auto ties = merge_ties<double>(pivot, targets, rate).merged;
    const auto dare = merge_dare<double>(pivot, targets, rate, seed).merged;
    const auto keys = canonical_target_keys<double>(targets);
    for (const auto& [name, _] : layout) {
      const auto p = support::flat(pivot.tensors.at(name));
      const auto t = flats(targets, name);
      const auto dropped = [&, name = name](std::size_t j, std::size_t e) {
        return keyed_uniform(seed, keys[j], name, e) < rate;
      };
      worst = std::max({worst, max_abs_diff(lin, name, oracle::linear(t)),
                        max_abs_diff(ta, name, oracle::task_arithmetic(p, t, scale)),
                        max_abs_diff(ties, name, oracle::ties(p, t, rate)),
                        max_abs_diff(dare, name, oracle::dare(p, t, rate, dropped))});
    }
  }
  v.require(worst <= 1e-12, "max abs error " + fmt(worst) + " > 1e-12");
  v.require(kDefaultTaskArithmeticScale == 0.3, "task-arithmetic default is not 0.3");
  v.require(kDefaultTiesTrimRate == 0.4, "TIES default is not 0.4");
  v.require(kDefaultDareDropRate == 0.4, "DARE default is not 0.4");
  v.require(kDefaultSceTau == 10.0, "SCE default is not 10%");

  // the shipped defaults are what a call without hyperparameters uses
  const auto layout = support::random_layout(rng, 8);
  const auto pivot = support::random_map<double>(rng, layout);
  const auto targets = random_targets(rng, layout, 3);
  v.require(same_bits(merge_task_arithmetic<double>(pivot, targets).merged,
                      merge_task_arithmetic<double>(pivot, targets, 0.3).merged),
            "default TA call differs from scale 0.3");
  v.require(same_bits(merge_ties<double>(pivot, targets).merged, merge_ties<double>(pivot, targets, 0.4).merged),
            "default TIES call differs from rate 0.4");
  v.require(same_bits(merge_dare<double>(pivot, targets).merged, merge_dare<double>(pivot, targets, 0.4, 0).merged),
            "default DARE call differs from rate 0.4");
  v.require(same_bits(sce_merge<double>(pivot, targets).merged, sce_merge<double>(pivot, targets, 10.0).merged),
            "default SCE call differs from tau 10");
  v.note(std::to_string(cases) + " instances x 4 methods, max abs error " + fmt(worst) +
         "; defaults scale 0.3, trim 0.4, drop 0.4, tau 10");
  return v;
}

// ---------------------------------------------------------------- 4

Verdict ablation_harness() {
  Verdict v;
  const auto pivot_model = init_toy_lm(16, 8, 16, 1);
  const Map pivot = tensor_cast<double>(to_tensor_map(pivot_model, "pivot"));
  std::vector<Map> targets;
  for (int j = 0; j < 3; ++j) {
    std::mt19937_64 rng(400 + j);
    std::normal_distribution<double> noise(0.0, 0.05);
    Map t = pivot;
    t.metadata["model_id"] = "target-" + std::to_string(j);
    for (auto& [name, tensor] : t.tensors) {
      for (Eigen::Index e = 0; e < tensor.values.size(); ++e) tensor.values.data()[e] += noise(rng);
    }
    targets.push_back(t);
  }
  const auto sce = sce_merge<double>(pivot, targets, 10.0, SceVariant::Full);
  const auto ce = sce_merge<double>(pivot, targets, 10.0, SceVariant::NoSelect);
  const auto c = sce_merge<double>(pivot, targets, 10.0, SceVariant::CalculateOnly);
  const auto as_float = [](const Map& m) { return tensor_cast<float>(m); };
  v.require(!same_bits(sce.merged, ce.merged) && !same_bits(ce.merged, c.merged) && !same_bits(sce.merged, c.merged),
            "merged checkpoints are not pairwise distinct");
  v.require(serialize_checkpoint(as_float(sce.merged)) != serialize_checkpoint(as_float(ce.merged)) &&
                serialize_checkpoint(as_float(ce.merged)) != serialize_checkpoint(as_float(c.merged)),
            "serialized checkpoints are not distinct");
  std::size_t selected = 0, numel = 0, erased_ce = 0;
  for (const auto& [name, r] : sce.report.matrices) {
    v.require(r.selected == selection_count(10.0, r.numel), "SCE selected " + std::to_string(r.selected) +
                                                                " of " + std::to_string(r.numel) + " in " + name);
    selected += r.selected;
    numel += r.numel;
  }
  for (const auto& [name, r] : ce.report.matrices) {
    v.require(r.selected == r.numel, "CE did not select every element of " + name);
    erased_ce += r.erased;
  }
  for (const auto& [name, r] : c.report.matrices) {
    v.require(r.selected == r.numel && r.erased == 0, "C selected or erased in " + name);
  }
  v.require(sce.report.select_applied && sce.report.erase_applied, "SCE report misses a stage");
  v.require(!ce.report.select_applied && ce.report.erase_applied, "CE report stages wrong");
  v.require(!c.report.select_applied && !c.report.erase_applied, "C report stages wrong");
  v.note("SCE selected " + std::to_string(selected) + "/" + std::to_string(numel) + ", CE erased " +
         std::to_string(erased_ce) + ", C erased 0");
  return v;
}

// ---------------------------------------------------------------- 5

Verdict token_alignment() {
  Verdict v;
  const auto start = Clock::now();
  std::mt19937_64 rng(505);
  const int cases = 600;
  for (int trial = 0; trial < cases; ++trial) {
    const auto text = support::random_text(rng, 12, trial % 3 == 0 ? "ab" : "abcd");
    const auto pivot = support::split_randomly(rng, text, 6);
    const auto source = support::split_randomly(rng, text, 6);
    const auto map = align_surfaces(pivot, source);
    const auto search = oracle::exhaustive_alignment(pivot, source);
    v.require(std::abs(alignment_cost(map, pivot, source) - search.best) <= 1e-12,
              "DP cost differs from the exhaustive optimum (case " + std::to_string(trial) + ")");
  }

  const auto dir = support::kFixtures / "flowers";
  const auto pivot = read_vocabulary(dir / "pivot.vocab");
  const auto source = read_vocabulary(dir / "source.vocab");
  std::vector<AlignedInstruction> aligned;
  std::ifstream in(dir / "corpus.jsonl");
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    const auto p = j.at("response").get<std::vector<TokenId>>();
    const auto s = j.at("source_response").get<std::vector<TokenId>>();
    aligned.push_back({align_sequences(p, s, pivot, source), p, s});
  }
  const auto stats = accumulate_statistics(aligned);
  const auto ms = build_projection_table(Strategy::Statistics, pivot, source, &stats);
  const auto med = build_projection_table(Strategy::MinEdit, pivot, source);
  const auto em = build_projection_table(Strategy::ExactMatch, pivot, source);
  const auto sid = [&](const char* t) { return *source.id_of(t); };
  const auto pid = [&](const char* t) { return pivot.id_of(t); };
  v.require(ms.source_to_pivot[sid("flow_")] == pid("flowers"), "MS does not map flow_ to flowers");
  v.require(ms.source_to_pivot[sid("belo_")] == pid("belongs"), "MS does not map belo_ to belongs");
  v.require(med.source_to_pivot[sid("flow_")] == pid("flown"), "MinED does not map flow_ to flown");
  v.require(!em.source_to_pivot[sid("flow_")].has_value() && em.unk_bucket == pid("<unk>"),
            "EM does not send flow_ to the unknown bucket");

  // EM sends a flow_ row's mass to the unknown bucket
  const std::vector<TokenId> p = {*pid("flown")}, s = {sid("flow_")};
  const AlignmentMap one{{{SegmentKind::OneToOne, {0, 1}, {0, 1}}}};
  const auto row = project_distribution(DistributionMatrix{source.size(), 1, {{{sid("flow_"), 1.0}}}}, one, p, s, em);
  v.require(prob_at(row.rows[0], *pid("<unk>")) == 1.0, "EM projection of flow_ misses the unknown bucket");

  const double elapsed = seconds_since(start);
  v.require(elapsed < 60.0, "runtime " + fmt(elapsed) + " s >= 60 s");
  v.note(std::to_string(cases) + " DP-vs-exhaustive cases, fixture mappings checked, " + fmt(elapsed) + " s");
  return v;
}

// ---------------------------------------------------------------- 6

Verdict projection_mass() {
  Verdict v;
  std::mt19937_64 rng(606);
  struct Pair {
    std::vector<std::string> pivot, source;
  };
  std::vector<Pair> texts;
  std::set<std::string> pivot_tokens, source_tokens;
  for (int i = 0; i < 400; ++i) {
    const auto text = support::random_text(rng, 12, "abcd");
    texts.push_back({support::split_randomly(rng, text, 6), support::split_randomly(rng, text, 6)});
    pivot_tokens.insert(texts.back().pivot.begin(), texts.back().pivot.end());
    source_tokens.insert(texts.back().source.begin(), texts.back().source.end());
  }
  for (const char* extra : {"xq", "zzz", "qy"}) source_tokens.insert(extra);
  const Vocabulary source(std::vector<std::string>(source_tokens.begin(), source_tokens.end()));

  double worst = 0;
  std::size_t one_to_many_rows = 0, rejected = 0;
  for (bool with_unk : {true, false}) {
    std::vector<std::string> ptoks;
    if (with_unk) ptoks.push_back("<unk>");
    ptoks.insert(ptoks.end(), pivot_tokens.begin(), pivot_tokens.end());
    const Vocabulary pivot(ptoks, "▁", with_unk ? std::optional<TokenId>(0) : std::nullopt);

    std::vector<AlignedInstruction> aligned;
    for (const auto& t : texts) {
      std::vector<TokenId> p, s;
      for (const auto& tok : t.pivot) p.push_back(*pivot.id_of(tok));
      for (const auto& tok : t.source) s.push_back(*source.id_of(tok));
      aligned.push_back({align_sequences(p, s, pivot, source), p, s});
    }
    const auto stats = accumulate_statistics(aligned);

    for (auto strategy : {Strategy::ExactMatch, Strategy::MinEdit, Strategy::Statistics}) {
      const auto table =
          build_projection_table(strategy, pivot, source, strategy == Strategy::Statistics ? &stats : nullptr);
      std::size_t rows = 0;
      for (std::size_t i = 0; rows < 10000; i = (i + 1) % aligned.size()) {
        const auto& a = aligned[i];
        DistributionMatrix m{source.size(), 6, {}};
        for (std::size_t t = 0; t < a.source.size(); ++t) {
          m.rows.push_back(support::random_row(rng, source.size(), 1 + (rng() % 6)));
        }
        DistributionMatrix out;
        try {
          out = project_distribution(m, a.map, a.pivot, a.source, table);
        } catch (const DataError&) {
          // only legitimate without an unknown bucket, for a row with no mappable id at all
          const bool unmappable = std::any_of(m.rows.begin(), m.rows.end(), [&](const SparseRow& r) {
            return std::none_of(r.begin(), r.end(), [&](const SparseEntry& e) { return table.source_to_pivot[e.id].has_value(); });
          });
          v.require(!with_unk && strategy == Strategy::ExactMatch && unmappable, "projection rejected a mappable row");
          ++rejected;
          continue;
        }
        rows += m.rows.size();
        for (const auto& r : out.rows) worst = std::max(worst, std::abs(row_sum(r) - 1.0));
        if (strategy == Strategy::Statistics) {
          for (const auto& seg : a.map.segments) {
            if (seg.kind == SegmentKind::OneToMany) one_to_many_rows += seg.pivot.size();
          }
        }
      }
    }
  }
  v.require(worst <= 1e-6, "a projected row is off by " + fmt(worst));
  v.require(one_to_many_rows > 0, "no frequency-weighted averaging was exercised");
  v.note("6 x 10^4 source rows (3 strategies, with and without an unknown bucket), max |sum - 1| " + fmt(worst) +
         ", " + std::to_string(one_to_many_rows) + " averaged rows, " + std::to_string(rejected) +
         " instructions rejected for an entirely unmappable row (EM, no unknown bucket)");
  return v;
}

// ---------------------------------------------------------------- 7

Verdict gradient_checks() {
  Verdict v;
  std::mt19937_64 rng(707);
  const int instances = 120;
  double worst = 0;
  for (int trial = 0; trial < instances; ++trial) {
    const std::size_t vocab = 4 + static_cast<std::size_t>(trial % 5);
    const auto model = init_toy_lm(static_cast<Eigen::Index>(vocab), 2 + trial % 3, 3 + trial % 4, 7000 + trial);
    std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
    SupervisedExample ex;
    if (trial % 4) ex.instruction = {tok(rng)};
    for (int t = 0; t < 1 + trial % 5; ++t) ex.response.push_back(tok(rng));
    DistributionMatrix fused{vocab, 3, {}};
    for (std::size_t t = 0; t < ex.response.size(); ++t) fused.rows.push_back(support::random_row(rng, vocab, 1 + t % 3));
    const auto dense = support::dense_rows(fused);

    const auto sft_fd = support::finite_difference_gradient(
        model, [&](const oracle::PlainLM& m) { return oracle::mean_nll(m, ex.instruction, ex.response); });
    const auto fusion_fd = support::finite_difference_gradient(model, [&](const oracle::PlainLM& m) {
      return oracle::dense_cross_entropy(dense, oracle::predict(m, ex.instruction, ex.response));
    });
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::vector<double> combined_fd(sft_fd.size());
    for (std::size_t i = 0; i < sft_fd.size(); ++i) combined_fd[i] = lambda * sft_fd[i] + (1 - lambda) * fusion_fd[i];

    const double e1 = support::relative_error(support::flatten(sft_loss(model, ex).grad), sft_fd);
    const double e3 = support::relative_error(support::flatten(fusion_loss(model, ex, fused).grad), fusion_fd);
    const double e4 =
        support::relative_error(support::flatten(combined_loss_and_grad(model, ex, fused, lambda).grad), combined_fd);
    worst = std::max({worst, e1, e3, e4});
  }
  v.require(worst < 1e-4, "relative error " + fmt(worst) + " >= 1e-4");
  v.note(std::to_string(instances) + " instances x 3 losses, worst relative error " + fmt(worst));
  return v;
}

// ---------------------------------------------------------------- 8

std::vector<SupervisedExample> sample_dataset(const ToyLM<double>& truth, std::mt19937_64& rng, std::size_t n,
                                              std::size_t length) {
  const auto plain = support::plain_copy(truth);
  std::uniform_int_distribution<TokenId> first(0, static_cast<TokenId>(truth.vocab_size() - 1));
  std::vector<SupervisedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    SupervisedExample ex{{first(rng)}, {}};
    TokenId prev = ex.instruction.back();
    for (std::size_t t = 0; t < length; ++t) {
      const auto p = oracle::next_token_probs(plain, prev);
      prev = static_cast<TokenId>(std::discrete_distribution<std::size_t>(p.begin(), p.end())(rng));
      ex.response.push_back(prev);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

ToyLM<double> perturbed(const ToyLM<double>& base, std::uint64_t seed, double scale) {
  auto noise = init_toy_lm(base.vocab_size(), base.embed_dim(), base.hidden_dim(), seed, scale);
  auto out = base;
  out.add_scaled(noise, 1.0);
  return out;
}

Verdict desk_scale_fusion() {
  Verdict v;
  const auto start = Clock::now();
  constexpr Eigen::Index V = 16, d = 8, h = 16;
  const auto truth = init_toy_lm(V, d, h, 808, 1.2);
  const auto teacher_a = perturbed(truth, 809, 0.25);
  const auto teacher_b = perturbed(truth, 810, 0.25);
  std::mt19937_64 rng(811);
  const auto train = sample_dataset(truth, rng, 64, 8);
  const auto held_out = sample_dataset(truth, rng, 64, 8);

  const std::size_t k = 8;
  const auto pivot_dump = predict_dump(teacher_a, train, k, "teacher-a");
  const auto source_dump = predict_dump(teacher_b, train, k, "teacher-b");
  const auto init = init_toy_lm(V, d, h, 812);

  TrainConfig config;
  config.epochs = 300;
  config.learning_rate = 0.5;
  config.lambda = 0.9;
  const auto fused_run = train_pairwise_fusion(init, train, pivot_dump, source_dump, config);
  config.lambda = 1.0;
  const auto sft_run = train_pairwise_fusion(init, train, pivot_dump, source_dump, config);

  const auto held_a = predict_dump(teacher_a, held_out, k, "teacher-a");
  const auto held_b = predict_dump(teacher_b, held_out, k, "teacher-b");
  const auto held_out_ce = [&](const ToyLM<double>& model) {
    double total = 0;
    for (std::size_t i = 0; i < held_out.size(); ++i) {
      const auto& fused = fuse_mince(held_a.instructions[i], held_b.instructions[i], held_out[i]);
      total += matrix_cross_entropy(fused, predict(model, held_out[i]));
    }
    return total / static_cast<double>(held_out.size());
  };
  const double fused_ce = held_out_ce(fused_run.model);
  const double sft_ce = held_out_ce(sft_run.model);
  const double elapsed = seconds_since(start);
  v.require(fused_ce < sft_ce, "lambda 0.9 held-out CE " + fmt(fused_ce) + " is not below lambda 1 " + fmt(sft_ce));
  v.require(elapsed < 120.0, "runtime " + fmt(elapsed) + " s >= 120 s");
  v.note("held-out CE to fused teachers: lambda 0.9 " + fmt(fused_ce) + " vs lambda 1 " + fmt(sft_ce) + ", " +
         fmt(elapsed) + " s");
  return v;
}

// ---------------------------------------------------------------- 9

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str();
  return code;
}

Verdict cli_reproducibility() {
  Verdict v;
  support::TempDir dir;
  const auto fx = support::kFixtures / "flowers";
  const std::string pv = (fx / "pivot.vocab").string(), sv = (fx / "source.vocab").string(),
                    corpus = (fx / "corpus.jsonl").string(), dump = (fx / "source.dump").string();
  write_checkpoint(to_tensor_map(init_toy_lm(12, 8, 16, 900), "pivot"), dir / "pivot.safetensors");
  const std::string pivot_ckpt = (dir / "pivot.safetensors").string();

  // Each command runs three times: the base run (which later commands read), a
  // rerun with the same settings and a rerun with four workers.
  std::size_t commands = 0;
  const auto check = [&](const std::string& name, std::vector<std::string> args) {
    ++commands;
    std::vector<std::map<std::string, std::vector<std::uint8_t>>> trees;
    for (const auto& [suffix, workers] : std::vector<std::pair<std::string, std::string>>{{"", "1"}, {"-again", "1"}, {"-w4", "4"}}) {
      auto a = args;
      a.insert(a.end(), {"--out", (dir / (name + suffix)).string(), "--workers", workers});
      const int code = cli(a);
      v.require(code == kExitOk, name + " exited with " + std::to_string(code));
      if (code != kExitOk) return;
      trees.push_back(support::tree_bytes(dir / (name + suffix)));
    }
    v.require(trees[0] == trees[1], name + ": rerun changed output bytes");
    v.require(trees[0] == trees[2], name + ": worker count changed output bytes");
  };

  check("align", {"align-stats", "--pivot-vocab", pv, "--source-vocab", sv, "--corpus", corpus});
  for (const std::string strategy : {"EM", "MinED"}) {
    check("project-" + strategy, {"project", "--pivot-vocab", pv, "--source-vocab", sv, "--corpus", corpus, "--dump",
                                  dump, "--strategy", strategy});
  }
  check("project-MS", {"project", "--pivot-vocab", pv, "--source-vocab", sv, "--corpus", corpus, "--dump", dump,
                       "--strategy", "MS", "--stats", (dir / "align" / "mapping_stats.txt").string()});
  const std::string projected = (dir / "project-MS" / "projected.dump").string();
  check("train-a", {"fuse-train", "--corpus", corpus, "--source-dump", projected, "--init", pivot_ckpt, "--epochs",
                    "20", "--model-id", "target-a"});
  check("train-b", {"fuse-train", "--corpus", corpus, "--source-dump", projected, "--init", pivot_ckpt, "--epochs",
                    "20", "--lambda", "0.5", "--model-id", "target-b"});
  check("train-random", {"fuse-train", "--corpus", corpus, "--source-dump", projected, "--epochs", "5", "--seed", "4"});
  const std::string ta = (dir / "train-a" / "model.safetensors").string();
  const std::string tb = (dir / "train-b" / "model.safetensors").string();
  for (const std::string method : {"sce", "sce-ce", "sce-c", "linear", "ta", "ties", "dare"}) {
    check("merge-" + method, {"merge", "--pivot", pivot_ckpt, "--targets", ta, tb, "--method", method});
  }
  for (const auto& path : {(dir / "merge-sce" / "merged.safetensors").string(), projected, pv,
                           (dir / "align" / "mapping_stats.txt").string()}) {
    ++commands;
    std::string first, second;
    v.require(cli({"inspect", path}, &first) == kExitOk && cli({"inspect", path}, &second) == kExitOk,
              "inspect failed on " + path);
    v.require(!first.empty() && first == second, "inspect output differs between runs");
  }
  v.note(std::to_string(commands) + " command invocations, each rerun and rerun with 4 workers");
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"SCE oracle equivalence", sce_oracle_equivalence},
      {"SCE invariant suite", sce_invariants},
      {"baseline mergers and defaults", baseline_mergers},
      {"SCE / CE / C ablation harness", ablation_harness},
      {"token alignment", token_alignment},
      {"projection mass conservation", projection_mass},
      {"gradient checks", gradient_checks},
      {"desk-scale fusion beats SFT", desk_scale_fusion},
      {"CLI reproducibility", cli_reproducibility},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict verdict;
    try {
      verdict = criteria[i].second();
    } catch (const std::exception& e) {
      verdict.require(false, std::string("exception: ") + e.what());
    }
    std::cout << (verdict.passed() ? "PASS" : "FAIL") << "  criterion " << (i + 1) << ": " << criteria[i].first
              << " -- " << verdict.detail() << std::endl;
    failures += verdict.passed() ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
