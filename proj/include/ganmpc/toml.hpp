#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ganmpc::toml {

// Minimal TOML subset used by the experiment configs: comments, [section]
// headers, and `key = value` lines where values are strings, booleans,
// integers, floats, or (possibly nested, possibly multi-line) arrays.
// Dates, inline tables, dotted keys, and table arrays are out of scope and
// rejected with a line-numbered error.
class Value {
 public:
  enum class Kind { kString, kBool, kInt, kFloat, kArray };

  Value() : kind_(Kind::kInt) {}
  explicit Value(std::string s) : kind_(Kind::kString), str_(std::move(s)) {}
  explicit Value(bool b) : kind_(Kind::kBool), bool_(b) {}
  explicit Value(std::int64_t i) : kind_(Kind::kInt), int_(i) {}
  explicit Value(double d) : kind_(Kind::kFloat), float_(d) {}
  explicit Value(std::vector<Value> items) : kind_(Kind::kArray), items_(std::move(items)) {}

  Kind kind() const { return kind_; }

  const std::string& as_string() const;
  bool as_bool() const;
  std::int64_t as_int() const;
  double as_float() const;  // accepts integer values too
  const std::vector<Value>& as_array() const;

  bool operator==(const Value& other) const;

  // TOML literal for this value. Floats always carry a '.' or exponent so
  // they re-parse as floats.
  std::string serialize() const;

 private:
  Kind kind_;
  std::string str_;
  bool bool_ = false;
  std::int64_t int_ = 0;
  double float_ = 0.0;
  std::vector<Value> items_;
};

struct Document {
  // section -> key -> value; "" holds root-level keys. std::map keeps the
  // canonical serialization sorted and byte-stable.
  std::map<std::string, std::map<std::string, Value>> sections;

  bool has(const std::string& section, const std::string& key) const;
  const Value& at(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, Value v);

  // Typed lookups that fall back to `fallback` when the key is absent.
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const;
  double get_float(const std::string& section, const std::string& key, double fallback) const;

  bool operator==(const Document&) const = default;
};

// Throws std::runtime_error with a 1-based line number on malformed input,
// duplicate keys, or redefined sections.
Document parse(const std::string& text);

// Canonical form: root keys first, then sections in sorted order, keys sorted
// within each section, arrays inline. parse(serialize(d)) == d.
std::string serialize(const Document& doc);

}  // namespace ganmpc::toml
