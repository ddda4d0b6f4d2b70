#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "delib/noising.hpp"
#include "delib/rng.hpp"
#include "delib/tensor.hpp"
#include "delib/vocab.hpp"

namespace delib {

using Json = nlohmann::json;

inline Words split_words(const std::string& s) {
  Words out;
  std::istringstream ss(s);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

inline std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// FNV-1a, pinned here so split assignment is identical everywhere.
inline std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class ParseError : public TensorError {
 public:
  using TensorError::TensorError;
};

/// Checks bracket structure: tokens starting with '[' open, "]" closes,
/// depth never negative, final depth zero, at least one frame.
inline void validate_parse(const Words& parse) {
  if (parse.empty()) throw ParseError("empty parse");
  long depth = 0;
  for (const auto& t : parse) {
    if (!t.empty() && t.front() == '[') {
      ++depth;
    } else if (t == "]") {
      --depth;
      if (depth < 0) throw ParseError("unbalanced ']' in parse: " + join_words(parse));
    }
  }
  if (depth != 0) throw ParseError("unclosed bracket in parse: " + join_words(parse));
  if (parse.front().rfind("[IN:", 0) != 0) {
    throw ParseError("parse must open with an intent: " + join_words(parse));
  }
}

struct Example {
  Words gold_words;
  Words hyp_words;
  Words parse;
  bool had_asr_error = false;
  std::string split = "train";
};

struct SentenceTemplate {
  std::string utterance;  // words and @var:filler_type slots
  std::string parse;      // ontology tokens and @var references
  double weight = 1.0;
};

struct ChannelSpec {
  double substitution_rate = 0.0;
  double deletion_rate = 0.0;
  ConfusionDictionary confusions;
};

struct GrammarSpec {
  std::vector<SentenceTemplate> templates;
  std::map<std::string, Words> fillers;
  ChannelSpec channel;
  double train_frac = 0.8;
  double valid_frac = 0.1;

  void validate() const;
};

namespace grammar_detail {

struct VarRef {
  std::string name;
  std::string filler_type;  // empty for parse-side references
};

inline bool is_var(const std::string& tok) { return !tok.empty() && tok.front() == '@'; }

inline VarRef parse_var(const std::string& tok) {
  const auto colon = tok.find(':');
  if (colon == std::string::npos) return {tok.substr(1), ""};
  return {tok.substr(1, colon - 1), tok.substr(colon + 1)};
}

}  // namespace grammar_detail

inline void GrammarSpec::validate() const {
  if (templates.empty()) throw UsageError("grammar: at least one template required");
  if (train_frac <= 0 || valid_frac < 0 || train_frac + valid_frac >= 1.0) {
    throw UsageError("grammar: split fractions must leave room for a test split");
  }
  long max_depth = 0;
  for (const auto& t : templates) {
    std::map<std::string, std::string> declared;
    for (const auto& tok : split_words(t.utterance)) {
      if (grammar_detail::is_var(tok)) {
        auto v = grammar_detail::parse_var(tok);
        if (v.filler_type.empty()) {
          throw UsageError("grammar: utterance var '@" + v.name + "' missing filler type");
        }
        if (!fillers.count(v.filler_type) || fillers.at(v.filler_type).empty()) {
          throw UsageError("grammar: no fillers for type '" + v.filler_type + "'");
        }
        declared[v.name] = v.filler_type;
      }
    }
    long depth = 0;
    Words parse_shape;
    for (const auto& tok : split_words(t.parse)) {
      if (grammar_detail::is_var(tok)) {
        auto v = grammar_detail::parse_var(tok);
        if (!declared.count(v.name)) {
          throw UsageError("grammar: parse var '@" + v.name + "' not declared in utterance");
        }
        parse_shape.push_back("w");
      } else {
        parse_shape.push_back(tok);
        if (tok.front() == '[') max_depth = std::max(max_depth, ++depth);
        if (tok == "]") --depth;
      }
    }
    if (depth != 0) throw UsageError("grammar: unbalanced parse in template: " + t.parse);
  }
  if (max_depth < 3) {
    throw UsageError("grammar: at least one compositional (nested) template required");
  }
}

/// Probability that the simulated first pass corrupts at least one word of
/// the given gold sentence, from the channel rates.
inline double channel_corruption_prob(const ChannelSpec& ch, const Words& gold) {
  double p_clean = 1.0;
  for (const auto& w : gold) {
    double keep = 1.0 - ch.deletion_rate;
    if (ch.confusions.contains(w)) keep *= 1.0 - ch.substitution_rate;
    p_clean *= keep;
  }
  return 1.0 - p_clean;
}

inline Words apply_channel(const ChannelSpec& ch, const Words& gold, Rng& rng) {
  Words hyp;
  hyp.reserve(gold.size());
  for (const auto& w : gold) {
    if (rng.bernoulli(ch.deletion_rate)) continue;
    if (ch.confusions.contains(w) && rng.bernoulli(ch.substitution_rate)) {
      hyp.push_back(ch.confusions.sample(w, rng));
    } else {
      hyp.push_back(w);
    }
  }
  // a fully-deleted hypothesis keeps one word so the text channel is never empty
  if (hyp.empty() && !gold.empty()) {
    hyp.push_back(gold[rng.uniform_int(gold.size())]);
  }
  return hyp;
}

struct Dataset {
  std::vector<Example> examples;

  std::vector<const Example*> split(const std::string& name) const {
    std::vector<const Example*> out;
    for (const auto& e : examples) {
      if (e.split == name) out.push_back(&e);
    }
    return out;
  }

  std::size_t split_size(const std::string& name) const { return split(name).size(); }
};

/// Samples template instances, runs the gold transcript through the
/// simulated ASR channel, and buckets splits by a stable hash of the gold
/// sentence so identical instances never straddle splits.
inline Dataset generate(const GrammarSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw UsageError("generate: n must be >= 1");
  spec.validate();
  Rng rng(derive_seed(seed, 0xDA7A5E7ULL));
  std::vector<double> weights;
  for (const auto& t : spec.templates) weights.push_back(t.weight);

  Dataset ds;
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tpl = spec.templates[rng.weighted_choice(weights)];
    std::map<std::string, std::string> bound;
    Words gold;
    for (const auto& tok : split_words(tpl.utterance)) {
      if (grammar_detail::is_var(tok)) {
        auto v = grammar_detail::parse_var(tok);
        const auto& pool = spec.fillers.at(v.filler_type);
        const std::string& w = pool[rng.uniform_int(pool.size())];
        bound[v.name] = w;
        gold.push_back(w);
      } else {
        gold.push_back(tok);
      }
    }
    Words parse;
    for (const auto& tok : split_words(tpl.parse)) {
      if (grammar_detail::is_var(tok)) {
        parse.push_back(bound.at(grammar_detail::parse_var(tok).name));
      } else {
        parse.push_back(tok);
      }
    }
    validate_parse(parse);

    Example ex;
    ex.gold_words = std::move(gold);
    ex.hyp_words = apply_channel(spec.channel, ex.gold_words, rng);
    ex.parse = std::move(parse);
    ex.had_asr_error = ex.hyp_words != ex.gold_words;
    const double r = static_cast<double>(stable_hash(join_words(ex.gold_words)) >> 11) * 0x1.0p-53;
    ex.split = r < spec.train_frac ? "train"
               : r < spec.train_frac + spec.valid_frac ? "valid"
                                                       : "test";
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// serialization

inline Json grammar_to_json(const GrammarSpec& spec) {
  Json j;
  j["templates"] = Json::array();
  for (const auto& t : spec.templates) {
    j["templates"].push_back({{"utterance", t.utterance}, {"parse", t.parse}, {"weight", t.weight}});
  }
  j["fillers"] = Json::object();
  for (const auto& [k, v] : spec.fillers) j["fillers"][k] = v;
  Json conf = Json::object();
  for (const auto& [src, entries] : spec.channel.confusions.all()) {
    Json e = Json::object();
    for (const auto& [repl, count] : entries) e[repl] = count;
    conf[src] = e;
  }
  j["channel"] = {{"substitution_rate", spec.channel.substitution_rate},
                  {"deletion_rate", spec.channel.deletion_rate},
                  {"confusions", conf}};
  j["split_fractions"] = {{"train", spec.train_frac}, {"valid", spec.valid_frac}};
  return j;
}

inline GrammarSpec grammar_from_json(const Json& j) {
  GrammarSpec spec;
  try {
    for (const auto& t : j.at("templates")) {
      SentenceTemplate st;
      st.utterance = t.at("utterance").get<std::string>();
      st.parse = t.at("parse").get<std::string>();
      st.weight = t.value("weight", 1.0);
      spec.templates.push_back(std::move(st));
    }
    for (const auto& [k, v] : j.at("fillers").items()) {
      spec.fillers[k] = v.get<Words>();
    }
    const auto& ch = j.at("channel");
    spec.channel.substitution_rate = ch.at("substitution_rate").get<double>();
    spec.channel.deletion_rate = ch.at("deletion_rate").get<double>();
    for (const auto& [src, entries] : ch.at("confusions").items()) {
      for (const auto& [repl, count] : entries.items()) {
        spec.channel.confusions.add(src, repl, count.get<long>());
      }
    }
    if (j.contains("split_fractions")) {
      spec.train_frac = j["split_fractions"].value("train", 0.8);
      spec.valid_frac = j["split_fractions"].value("valid", 0.1);
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("grammar spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

inline void save_grammar(const GrammarSpec& spec, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << grammar_to_json(spec).dump(2) << "\n";
}

inline GrammarSpec load_grammar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open grammar spec '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw UsageError("grammar spec '" + path + "': " + e.what());
  }
  return grammar_from_json(j);
}

/// JSON Lines with fields gold/hyp/parse/split/asr_error.
inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  for (const auto& ex : ds.examples) {
    Json j = {{"gold", join_words(ex.gold_words)},
              {"hyp", join_words(ex.hyp_words)},
              {"parse", join_words(ex.parse)},
              {"split", ex.split},
              {"asr_error", ex.had_asr_error}};
    out << j.dump() << "\n";
  }
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open dataset '" + path + "'");
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception&) {
      throw ParseError("dataset '" + path + "' line " + std::to_string(line_no) +
                       ": malformed record");
    }
    Example ex;
    for (const char* field : {"gold", "hyp", "parse", "split", "asr_error"}) {
      if (!j.contains(field)) {
        throw ParseError("dataset '" + path + "' line " + std::to_string(line_no) +
                         ": missing field '" + field + "'");
      }
    }
    ex.gold_words = split_words(j["gold"].get<std::string>());
    ex.hyp_words = split_words(j["hyp"].get<std::string>());
    ex.parse = split_words(j["parse"].get<std::string>());
    ex.split = j["split"].get<std::string>();
    ex.had_asr_error = j["asr_error"].get<bool>();
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

/// Token inventory derived from everything a grammar can emit: ontology
/// tokens from parse patterns, words from utterances, fillers, and channel
/// confusions.
inline Vocabulary build_vocabulary(const GrammarSpec& spec) {
  std::set<std::string> ontology;
  std::set<std::string> words;
  for (const auto& t : spec.templates) {
    for (const auto& tok : split_words(t.parse)) {
      if (grammar_detail::is_var(tok)) continue;
      ontology.insert(tok);
    }
    for (const auto& tok : split_words(t.utterance)) {
      if (!grammar_detail::is_var(tok)) words.insert(tok);
    }
  }
  for (const auto& [type, pool] : spec.fillers) {
    for (const auto& w : pool) words.insert(w);
  }
  for (const auto& [src, entries] : spec.channel.confusions.all()) {
    words.insert(src);
    for (const auto& [repl, count] : entries) words.insert(repl);
  }
  return Vocabulary(ontology, words);
}

/// Token inventory from a dataset alone (for training on a dataset file
/// without its generating grammar): ontology tokens from parses, words from
/// gold/hypothesis transcripts and slot fillers.
inline Vocabulary build_vocabulary(const Dataset& ds) {
  std::set<std::string> ontology;
  std::set<std::string> words;
  for (const auto& ex : ds.examples) {
    for (const auto& w : ex.gold_words) words.insert(w);
    for (const auto& w : ex.hyp_words) words.insert(w);
    for (const auto& tok : ex.parse) {
      if (!tok.empty() && (tok.front() == '[' || tok == "]")) {
        ontology.insert(tok);
      } else {
        words.insert(tok);
      }
    }
  }
  return Vocabulary(ontology, words);
}

/// Built-in task: eight domains, compositional reminder/message nesting,
/// and a confusion-heavy contact/location inventory.
inline GrammarSpec default_grammar_spec() {
  GrammarSpec spec;
  spec.templates = {
      {"remind me to @a:action @c:contact @d:datetime",
       "[IN:CREATE_REMINDER [SL:TODO @a @c ] [SL:DATETIME @d ] ]", 1.2},
      {"play some @g:genre music", "[IN:PLAY_MUSIC [SL:MUSIC_TYPE @g ] ]", 0.8},
      {"what is the weather in @l:location @d:datetime",
       "[IN:GET_WEATHER [SL:LOCATION @l ] [SL:DATETIME @d ] ]", 1.0},
      {"set an alarm for @d:datetime", "[IN:CREATE_ALARM [SL:DATETIME @d ] ]", 0.8},
      {"call @c:contact now", "[IN:CREATE_CALL [SL:CONTACT @c ] ]", 0.9},
      {"send a message to @c:contact saying @m:content @m2:content",
       "[IN:SEND_MESSAGE [SL:RECIPIENT @c ] [SL:CONTENT @m @m2 ] ]", 1.0},
      {"how long to drive to @l:location",
       "[IN:GET_ESTIMATED_DURATION [SL:DESTINATION @l ] ]", 0.7},
      {"remind me to call @c:contact @d:datetime",
       "[IN:CREATE_REMINDER [SL:TODO [IN:CREATE_CALL [SL:CONTACT @c ] ] ] [SL:DATETIME @d ] ]",
       1.2},
      {"remind me to message @c:contact about @m:content",
       "[IN:CREATE_REMINDER [SL:TODO [IN:SEND_MESSAGE [SL:RECIPIENT @c ] [SL:CONTENT @m ] ] ] ]",
       1.2},
      {"message @c:contact to call @c2:contact",
       "[IN:SEND_MESSAGE [SL:RECIPIENT @c ] [SL:CONTENT [IN:CREATE_CALL [SL:CONTACT @c2 ] ] ] ]",
       1.0},
  };
  spec.fillers = {
      {"contact",
       {"john", "jake", "kate", "mary", "sam", "paul", "anna", "lee", "emma", "david", "sarah",
        "peter", "alice", "ryan", "nina", "oscar"}},
      {"action", {"call", "text", "email", "meet", "visit", "pay"}},
      {"datetime",
       {"today", "tomorrow", "tonight", "monday", "tuesday", "wednesday", "thursday", "friday",
        "saturday", "sunday", "noon", "morning", "evening"}},
      {"location",
       {"boston", "austin", "paris", "london", "tokyo", "berlin", "madrid", "dublin", "oslo",
        "cairo"}},
      {"genre", {"jazz", "rock", "pop", "blues", "folk", "metal", "soul", "disco"}},
      {"content", {"hello", "thanks", "congrats", "sorry", "goodbye", "welcome", "cheers"}},
  };
  auto& conf = spec.channel.confusions;
  conf.add("john", "jon", 3);
  conf.add("john", "juan", 1);
  conf.add("jake", "jade", 2);
  conf.add("kate", "cait", 2);
  conf.add("kate", "kay", 1);
  conf.add("mary", "marie", 2);
  conf.add("sam", "pam", 1);
  conf.add("sam", "sammy", 1);
  conf.add("paul", "saul", 2);
  conf.add("anna", "hannah", 2);
  conf.add("lee", "leigh", 2);
  conf.add("sarah", "sara", 3);
  conf.add("peter", "petra", 1);
  conf.add("boston", "austin", 2);
  conf.add("austin", "boston", 2);
  conf.add("paris", "ferris", 1);
  conf.add("berlin", "dublin", 1);
  conf.add("dublin", "berlin", 1);
  conf.add("monday", "sunday", 1);
  conf.add("sunday", "monday", 1);
  conf.add("noon", "soon", 2);
  conf.add("tonight", "night", 1);
  conf.add("call", "paul", 1);
  conf.add("text", "test", 2);
  conf.add("meet", "eat", 1);
  spec.channel.substitution_rate = 0.17;
  spec.channel.deletion_rate = 0.018;
  return spec;
}

}  // namespace delib
