#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "delib/rng.hpp"
#include "delib/tensor.hpp"

namespace delib {

using Words = std::vector<std::string>;

enum class NoiseMeta { none, sampling, sequential, single_del, single_subs };

inline std::string to_string(NoiseMeta m) {
  switch (m) {
    case NoiseMeta::none: return "none";
    case NoiseMeta::sampling: return "sampling";
    case NoiseMeta::sequential: return "sequential";
    case NoiseMeta::single_del: return "single-del";
    case NoiseMeta::single_subs: return "single-subs";
  }
  return "none";
}

inline NoiseMeta noise_meta_from_string(const std::string& s) {
  if (s == "none") return NoiseMeta::none;
  if (s == "sampling") return NoiseMeta::sampling;
  if (s == "sequential") return NoiseMeta::sequential;
  if (s == "single-del") return NoiseMeta::single_del;
  if (s == "single-subs") return NoiseMeta::single_subs;
  throw UsageError("unknown noise meta-operation '" + s + "'");
}

struct NoiseSpec {
  double deletion_p = 0.0;
  double substitution_p = 0.0;
  NoiseMeta meta = NoiseMeta::none;
  std::uint64_t seed = 0;

  void validate() const {
    if (deletion_p < 0 || deletion_p > 1 || substitution_p < 0 || substitution_p > 1) {
      throw UsageError("noise probabilities must lie in [0, 1]");
    }
  }
};

/// Counts of source -> replacement word confusions. Entries per source are
/// kept sorted by descending count, then alphabetically, so sampling and
/// serialization are deterministic.
class ConfusionDictionary {
 public:
  void add(const std::string& source, const std::string& replacement, long count = 1) {
    if (source == replacement) return;  // self-pairs excluded
    if (count <= 0) throw UsageError("confusion counts must be positive");
    auto& entries = map_[source];
    auto it = std::find_if(entries.begin(), entries.end(),
                           [&](const auto& e) { return e.first == replacement; });
    if (it == entries.end()) {
      entries.emplace_back(replacement, count);
    } else {
      it->second += count;
    }
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
  }

  bool contains(const std::string& word) const { return map_.count(word) != 0; }
  bool empty() const { return map_.empty(); }
  std::size_t size() const { return map_.size(); }

  const std::vector<std::pair<std::string, long>>& entries(const std::string& word) const {
    auto it = map_.find(word);
    if (it == map_.end()) throw UsageError("no confusions recorded for '" + word + "'");
    return it->second;
  }

  long total(const std::string& word) const {
    long t = 0;
    for (const auto& [r, c] : entries(word)) t += c;
    return t;
  }

  /// Frequency-weighted replacement sample.
  const std::string& sample(const std::string& word, Rng& rng) const {
    const auto& es = entries(word);
    std::vector<double> w(es.size());
    for (std::size_t i = 0; i < es.size(); ++i) w[i] = static_cast<double>(es[i].second);
    return es[rng.weighted_choice(w)].first;
  }

  const std::map<std::string, std::vector<std::pair<std::string, long>>>& all() const {
    return map_;
  }

  /// TSV: `source TAB replacement TAB count`, sorted by source then
  /// descending count. Round-trips exactly.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out << "source\treplacement\tcount\n";
    for (const auto& [src, entries] : map_) {
      for (const auto& [repl, count] : entries) {
        out << src << '\t' << repl << '\t' << count << '\n';
      }
    }
  }

  static ConfusionDictionary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path + "'");
    ConfusionDictionary dict;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line_no == 1 && line == "source\treplacement\tcount") continue;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string src, repl, count_str;
      if (!std::getline(ss, src, '\t') || !std::getline(ss, repl, '\t') ||
          !std::getline(ss, count_str, '\t')) {
        throw UsageError("malformed confusion entry at line " + std::to_string(line_no));
      }
      dict.add(src, repl, std::stol(count_str));
    }
    return dict;
  }

 private:
  std::map<std::string, std::vector<std::pair<std::string, long>>> map_;
};

/// Binomial draw of a deletion count, then uniform choice of that many
/// distinct positions. No placeholder is inserted.
inline Words delete_noise(const Words& tokens, double p, Rng& rng) {
  if (p < 0 || p > 1) throw UsageError("deletion probability must lie in [0, 1]");
  if (tokens.empty() || p == 0.0) return tokens;
  const std::size_t n = rng.binomial(tokens.size(), p);
  if (n == 0) return tokens;
  const auto victims = rng.sample_indices(tokens.size(), n);
  Words out;
  out.reserve(tokens.size() - n);
  std::size_t vi = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (vi < victims.size() && victims[vi] == i) {
      ++vi;
      continue;
    }
    out.push_back(tokens[i]);
  }
  return out;
}

/// Binomial position selection as in deletion; selected in-dictionary words
/// are replaced by a frequency-weighted sample, out-of-dictionary selections
/// are no-ops. Length is preserved.
inline Words substitute_noise(const Words& tokens, double p, const ConfusionDictionary& dict,
                              Rng& rng) {
  if (p < 0 || p > 1) throw UsageError("substitution probability must lie in [0, 1]");
  if (tokens.empty() || p == 0.0) return tokens;
  const std::size_t n = rng.binomial(tokens.size(), p);
  if (n == 0) return tokens;
  const auto chosen = rng.sample_indices(tokens.size(), n);
  Words out = tokens;
  for (std::size_t idx : chosen) {
    if (dict.contains(out[idx])) out[idx] = dict.sample(out[idx], rng);
  }
  return out;
}

/// Meta-operations over the two noise operators. `sampling` picks one of the
/// two uniformly per call; `sequential` chains substitution then deletion.
inline Words apply_meta(const Words& tokens, const NoiseSpec& spec,
                        const ConfusionDictionary& dict, Rng& rng) {
  spec.validate();
  switch (spec.meta) {
    case NoiseMeta::none:
      return tokens;
    case NoiseMeta::single_del:
      return delete_noise(tokens, spec.deletion_p, rng);
    case NoiseMeta::single_subs:
      return substitute_noise(tokens, spec.substitution_p, dict, rng);
    case NoiseMeta::sampling:
      if (rng.bernoulli(0.5)) {
        return delete_noise(tokens, spec.deletion_p, rng);
      }
      return substitute_noise(tokens, spec.substitution_p, dict, rng);
    case NoiseMeta::sequential:
      return delete_noise(substitute_noise(tokens, spec.substitution_p, dict, rng),
                          spec.deletion_p, rng);
  }
  return tokens;
}

/// Minimum-edit-distance alignment of each hypothesis/reference pair with
/// uniform costs; ties prefer substitution over insert+delete. Every aligned
/// substitution (ref != hyp) increments ref_word -> hyp_word.
inline ConfusionDictionary build_confusions(const std::vector<std::pair<Words, Words>>& pairs) {
  if (pairs.empty()) throw UsageError("build_confusions: empty corpus");
  ConfusionDictionary dict;
  for (const auto& [hyp, ref] : pairs) {
    const std::size_t m = ref.size(), n = hyp.size();
    std::vector<std::vector<int>> d(m + 1, std::vector<int>(n + 1, 0));
    for (std::size_t i = 0; i <= m; ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= n; ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= m; ++i) {
      for (std::size_t j = 1; j <= n; ++j) {
        const int sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
        const int del = d[i - 1][j] + 1;
        const int ins = d[i][j - 1] + 1;
        d[i][j] = std::min({sub, del, ins});
      }
    }
    std::size_t i = m, j = n;
    while (i > 0 || j > 0) {
      if (i > 0 && j > 0 &&
          d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
        if (ref[i - 1] != hyp[j - 1]) dict.add(ref[i - 1], hyp[j - 1]);
        --i;
        --j;
      } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
        --i;  // deletion: ref word absent from hyp, no confusion entry
      } else {
        --j;  // insertion
      }
    }
  }
  return dict;
}

}  // namespace delib
