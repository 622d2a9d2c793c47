// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// TOML-style configuration: "[section]" headers and "key = value" lines,
// plus dotted "section.key=value" overrides. The schema is the JSON form of
// the defaults: unknown keys and type mismatches are rejected by key path.

#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cpcseg/data.hpp"
#include "cpcseg/errors.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/trainer.hpp"

namespace cpcseg {

struct CorpusConfig {
  SynthSpec spec;
  std::size_t n_train = 200;
  std::size_t n_val = 50;
  std::size_t n_test = 50;
};

enum class Representation { kLatent, kContext };

struct EvalConfig {
  double tolerance_ms = 20.0;
  std::int64_t offset_ms = 0;
  std::vector<double> thresholds{0.02, 0.05, 0.1, 0.2, 0.3, 0.5};
  std::size_t min_separation = 2;
  double word_prominence = 0.05;
  Representation representation = Representation::kLatent;
  std::size_t probe_epochs = 10;
  double probe_lr = 0.01;
  std::size_t abx_triples = 1000;

  void validate() const {
    if (!(tolerance_ms >= 0)) throw ConfigError("eval.tolerance_ms: must be nonnegative");
    if (offset_ms % 10 != 0) throw ConfigError("eval.offset_ms: must be a multiple of 10");
    if (thresholds.empty()) throw ConfigError("eval.thresholds: must be nonempty");
    if (min_separation == 0) throw ConfigError("eval.min_separation: must be >= 1");
    if (probe_epochs == 0) throw ConfigError("eval.probe_epochs: must be >= 1");
    if (!(probe_lr > 0)) throw ConfigError("eval.probe_lr: must be positive");
  }
};

struct AppConfig {
  TrainConfig train;
  CorpusConfig corpus;
  EvalConfig eval;
};

inline nlohmann::json to_json(const CorpusConfig& c) {
  const SynthSpec& s = c.spec;
  return {{"n_train", c.n_train},
          {"n_val", c.n_val},
          {"n_test", c.n_test},
          {"n_phone_classes", s.n_phone_classes},
          {"min_phone_ms", s.min_phone_ms},
          {"max_phone_ms", s.max_phone_ms},
          {"min_utterance_ms", s.min_utterance_ms},
          {"max_utterance_ms", s.max_utterance_ms},
          {"n_words", s.n_words},
          {"min_word_phones", s.min_word_phones},
          {"max_word_phones", s.max_word_phones},
          {"n_speakers", s.n_speakers},
          {"crossfade_ms", s.crossfade_ms},
          {"seed", s.seed}};
}

inline nlohmann::json to_json(const EvalConfig& e) {
  return {{"tolerance_ms", e.tolerance_ms},
          {"offset_ms", e.offset_ms},
          {"thresholds", e.thresholds},
          {"min_separation", e.min_separation},
          {"word_prominence", e.word_prominence},
          {"representation", e.representation == Representation::kLatent ? "z" : "c"},
          {"probe_epochs", e.probe_epochs},
          {"probe_lr", e.probe_lr},
          {"abx_triples", e.abx_triples}};
}

/// Full configuration as nested JSON: {model, train, corpus, eval}.
inline nlohmann::json to_json(const AppConfig& c) {
  nlohmann::json train = to_json(c.train);
  nlohmann::json model = train["model"];
  train.erase("model");
  return {{"model", model}, {"train", train}, {"corpus", to_json(c.corpus)}, {"eval", to_json(c.eval)}};
}

inline AppConfig app_config_from_json(const nlohmann::json& j) {
  AppConfig c;
  try {
    c.train.model = model_config_from_json(j.at("model"));
    const auto& t = j.at("train");
    c.train.epochs = t.at("epochs");
    c.train.batch_size = t.at("batch_size");
    c.train.adam.lr = t.at("lr");
    c.train.adam.beta1 = t.at("beta1");
    c.train.adam.beta2 = t.at("beta2");
    c.train.adam.eps = t.at("eps");
    c.train.clip_norm = t.at("clip_norm");
    c.train.seed = t.at("seed");
    c.train.checkpoint_every = t.at("checkpoint_every");
    c.train.manifest = t.at("manifest");
    const auto& s = j.at("corpus");
    c.corpus.n_train = s.at("n_train");
    c.corpus.n_val = s.at("n_val");
    c.corpus.n_test = s.at("n_test");
    c.corpus.spec.n_phone_classes = s.at("n_phone_classes");
    c.corpus.spec.min_phone_ms = s.at("min_phone_ms");
    c.corpus.spec.max_phone_ms = s.at("max_phone_ms");
    c.corpus.spec.min_utterance_ms = s.at("min_utterance_ms");
    c.corpus.spec.max_utterance_ms = s.at("max_utterance_ms");
    c.corpus.spec.n_words = s.at("n_words");
    c.corpus.spec.min_word_phones = s.at("min_word_phones");
    c.corpus.spec.max_word_phones = s.at("max_word_phones");
    c.corpus.spec.n_speakers = s.at("n_speakers");
    c.corpus.spec.crossfade_ms = s.at("crossfade_ms");
    c.corpus.spec.seed = s.at("seed");
    const auto& e = j.at("eval");
    c.eval.tolerance_ms = e.at("tolerance_ms");
    c.eval.offset_ms = e.at("offset_ms");
    c.eval.thresholds = e.at("thresholds").get<std::vector<double>>();
    c.eval.min_separation = e.at("min_separation");
    c.eval.word_prominence = e.at("word_prominence");
    const std::string rep = e.at("representation");
    if (rep != "z" && rep != "c")
      throw ConfigError("eval.representation: expected 'z' or 'c', got '" + rep + "'");
    c.eval.representation = rep == "z" ? Representation::kLatent : Representation::kContext;
    c.eval.probe_epochs = e.at("probe_epochs");
    c.eval.probe_lr = e.at("probe_lr");
    c.eval.abx_triples = e.at("abx_triples");
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  c.train.validate();
  c.corpus.spec.validate();
  c.eval.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::string strip_comment(std::string_view line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

inline std::vector<std::string> split_array(std::string_view body, const std::string& key) {
  std::vector<std::string> out;
  std::string cur;
  bool in_str = false;
  for (char ch : body) {
    if (ch == '"') in_str = !in_str;
    if (ch == ',' && !in_str) {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (in_str) throw ConfigError(key + ": unterminated string in array");
  if (!trim(cur).empty()) out.emplace_back(trim(cur));
  for (const auto& e : out)
    if (e.empty()) throw ConfigError(key + ": empty array element");
  return out;
}

}  // namespace detail

/// Parses one scalar or array literal.
inline nlohmann::json parse_value(std::string_view text, const std::string& key) {
  std::string_view v = detail::trim(text);
  if (v.empty()) throw ConfigError(key + ": missing value");
  if (v.front() == '[') {
    if (v.back() != ']') throw ConfigError(key + ": unterminated array");
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : detail::split_array(v.substr(1, v.size() - 2), key))
      arr.push_back(parse_value(e, key));
    return arr;
  }
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError(key + ": unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) {
        const char n = v[++i];
        out.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
      } else {
        out.push_back(v[i]);
      }
    }
    return out;
  }
  if (v == "true") return true;
  if (v == "false") return false;
  std::string s(v);
  s.erase(std::remove(s.begin(), s.end(), '_'), s.end());
  {
    std::int64_t i = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), i);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return i;
  }
  double d = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), d);
  if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return d;
  // Bare words are accepted as strings for override convenience.
  for (char ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '/' || ch == '.' || ch == '-' || ch == '_'))
      throw ConfigError(key + ": cannot parse value '" + std::string(v) + "'");
  return std::string(v);
}

/// Coerces `value` to the type of `like` or throws naming `key`.
inline nlohmann::json coerce(const nlohmann::json& value, const nlohmann::json& like,
                             const std::string& key) {
  auto mismatch = [&](const char* want) {
    return ConfigError(key + ": expected " + want + ", got " + value.dump());
  };
  if (like.is_boolean()) {
    if (!value.is_boolean()) throw mismatch("a boolean");
    return value;
  }
  if (like.is_number_unsigned()) {
    if (!value.is_number_integer()) throw mismatch("a nonnegative integer");
    if (value.get<std::int64_t>() < 0) throw mismatch("a nonnegative integer");
    return value.get<std::uint64_t>();
  }
  if (like.is_number_integer()) {
    if (!value.is_number_integer()) throw mismatch("an integer");
    return value.get<std::int64_t>();
  }
  if (like.is_number_float()) {
    if (!value.is_number()) throw mismatch("a number");
    return value.get<double>();
  }
  if (like.is_string()) {
    if (!value.is_string()) throw mismatch("a string");
    return value;
  }
  if (like.is_array()) {
    if (!value.is_array()) throw mismatch("an array");
    if (like.empty()) return value;
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : value) out.push_back(coerce(e, like.front(), key));
    return out;
  }
  throw mismatch("a supported type");
}

/// Accumulates "section.key" assignments against the default schema.
class ConfigBuilder {
 public:
  ConfigBuilder() : tree_(to_json(AppConfig{})) {}

  /// Sets a dotted key. Overrides replace file values; repeating an override
  /// with the same value is a no-op, a conflicting repeat is an error.
  void set(const std::string& dotted, const nlohmann::json& raw, const std::string& origin,
           bool is_override = false) {
    const auto dot = dotted.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size())
      throw ConfigError(dotted + ": keys take the form section.name (" + origin + ")");
    const std::string section = dotted.substr(0, dot), name = dotted.substr(dot + 1);
    if (!tree_.contains(section)) throw ConfigError(dotted + ": unknown section '" + section + "'");
    auto& sec = tree_[section];
    if (!sec.contains(name)) throw ConfigError(dotted + ": unknown key");
    nlohmann::json v = coerce(raw, sec[name], dotted);
    if (is_override) {
      auto it = seen_.find(dotted);
      if (it != seen_.end() && it->second != v)
        throw ConfigError(dotted + ": conflicting overrides " + it->second.dump() + " and " +
                          v.dump());
      seen_[dotted] = v;
    }
    sec[name] = v;
  }

  void parse_text(const std::string& text, const std::string& source) {
    std::string section;
    std::size_t lineno = 0, pos = 0;
    std::map<std::string, std::size_t> file_keys;
    while (pos <= text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      const std::string raw = detail::strip_comment(std::string_view(text).substr(pos, end - pos));
      pos = end + 1;
      ++lineno;
      const std::string_view line = detail::trim(raw);
      if (line.empty()) continue;
      const std::string where = source + ":" + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": malformed section header");
        section = std::string(detail::trim(line.substr(1, line.size() - 2)));
        if (!tree_.contains(section)) throw ConfigError(section + ": unknown section (" + where + ")");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
      std::string key(detail::trim(line.substr(0, eq)));
      if (!section.empty()) key = section + "." + key;
      if (auto f = file_keys.find(key); f != file_keys.end())
        throw ConfigError(key + ": duplicate key (" + where + ", first at line " +
                          std::to_string(f->second) + ")");
      file_keys[key] = lineno;
      set(key, parse_value(line.substr(eq + 1), key), where);
    }
  }

  /// "section.key=value".
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + assignment + "': expected key=value");
    const std::string key(detail::trim(std::string_view(assignment).substr(0, eq)));
    set(key, parse_value(std::string_view(assignment).substr(eq + 1), key), "override", true);
  }

  const nlohmann::json& tree() const { return tree_; }
  AppConfig build() const { return app_config_from_json(tree_); }

 private:
  nlohmann::json tree_;
  std::map<std::string, nlohmann::json> seen_;
};

/// Reads the file (if any), applies overrides in order and validates.
inline AppConfig parse_config(const std::optional<std::filesystem::path>& path,
                              const std::vector<std::string>& overrides = {}) {
  ConfigBuilder b;
  if (path) {
    std::ifstream in(*path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path->string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    b.parse_text(text, path->string());
  }
  for (const auto& o : overrides) b.apply_override(o);
  return b.build();
}

inline AppConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides = {}) {
  ConfigBuilder b;
  b.parse_text(text, "<text>");
  for (const auto& o : overrides) b.apply_override(o);
  return b.build();
}

}  // namespace cpcseg
