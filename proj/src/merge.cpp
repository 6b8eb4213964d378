#include "fusekit/merge.hpp"

#include <nlohmann/json.hpp>

namespace fusekit {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

const char* to_string(SceVariant v) {
  switch (v) {
    case SceVariant::Full:
      return "sce";
    case SceVariant::NoSelect:
      return "sce-ce";
    case SceVariant::CalculateOnly:
      return "sce-c";
  }
  return "?";
}

double keyed_uniform(std::uint64_t seed, std::uint64_t target, std::string_view tensor, std::uint64_t element) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ target);
  h = splitmix64(h ^ fnv1a(tensor));
  h = splitmix64(h ^ element);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::string format_merge_report(const MergeReport& report) {
  nlohmann::json j;
  j["method"] = report.method;
  j["targets"] = report.targets;
  j["select_applied"] = report.select_applied;
  j["erase_applied"] = report.erase_applied;
  j["hyperparameters"] = nlohmann::json::object();
  for (const auto& [k, v] : report.hyperparameters) j["hyperparameters"][k] = v;
  j["matrices"] = nlohmann::json::object();
  for (const auto& [name, m] : report.matrices) {
    j["matrices"][name] = {{"numel", m.numel},
                           {"selected", m.selected},
                           {"erased", m.erased},
                           {"dropped", m.dropped},
                           {"eta", m.eta}};
  }
  return j.dump();
}

}  // namespace fusekit
