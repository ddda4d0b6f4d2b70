#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "delib/tensor.hpp"

namespace delib {

/// Joint token inventory: reserved specials, ontology tokens (intent/slot
/// openers and the closing bracket), then words.
class Vocabulary {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() = default;

  /// Specials first, then ontology tokens and words in sorted order, so the
  /// mapping is deterministic for a given inventory.
  Vocabulary(const std::set<std::string>& ontology, const std::set<std::string>& words) {
    tokens_ = {"<blank>", "<bos>", "<eos>", "<unk>"};
    for (const auto& t : ontology) tokens_.push_back(t);
    ontology_count_ = ontology.size();
    for (const auto& w : words) tokens_.push_back(w);
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  explicit Vocabulary(std::vector<std::string> tokens, std::size_t ontology_count)
      : tokens_(std::move(tokens)), ontology_count_(ontology_count) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t ontology_count() const { return ontology_count_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  int require(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw UsageError("token '" + token + "' not in vocabulary");
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw UsageError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  std::vector<int> encode_strict(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(require(w));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t ontology_count_ = 0;
};

}  // namespace delib
