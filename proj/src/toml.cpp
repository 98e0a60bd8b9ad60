#include "ganmpc/toml.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ganmpc/util.hpp"

namespace ganmpc::toml {
namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
  throw std::runtime_error("toml line " + std::to_string(line) + ": " + msg);
}

bool is_bare_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
}

// Cursor over one logical line (a physical line, or several joined while an
// array stays open).
struct Scanner {
  const std::string& s;
  std::size_t pos = 0;
  int line;

  bool done() const { return pos >= s.size(); }
  char peek() const { return s[pos]; }

  void skip_space() {
    while (!done() && (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\n')) ++pos;
    if (!done() && s[pos] == '#') {  // comment runs to end of physical line
      while (!done() && s[pos] != '\n') ++pos;
      skip_space();
    }
  }

  std::string parse_basic_string() {
    ++pos;  // opening quote
    std::string out;
    while (true) {
      if (done() || s[pos] == '\n') fail(line, "unterminated string");
      char c = s[pos++];
      if (c == '"') return out;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      if (done()) fail(line, "unterminated escape");
      char e = s[pos++];
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        default: fail(line, std::string("unsupported escape \\") + e);
      }
    }
  }

  Value parse_value() {
    skip_space();
    if (done()) fail(line, "missing value");
    char c = peek();
    if (c == '"') return Value(parse_basic_string());
    if (c == '[') return parse_array();
    // bare token: boolean or number
    std::size_t start = pos;
    if (c == '+' || c == '-') ++pos;
    while (!done() && is_bare_char(s[pos])) {
      ++pos;
      // sign after an exponent marker, e.g. 1e-3
      if (!done() && (s[pos] == '+' || s[pos] == '-') &&
          (s[pos - 1] == 'e' || s[pos - 1] == 'E')) {
        ++pos;
      }
    }
    std::string tok = s.substr(start, pos - start);
    if (tok.empty() || tok == "+" || tok == "-") {
      fail(line, std::string("unexpected character '") + c + "'");
    }
    if (tok == "true") return Value(true);
    if (tok == "false") return Value(false);
    return parse_number(tok);
  }

  Value parse_number(std::string tok) {
    std::string clean;
    for (char c : tok) {
      if (c == '_') continue;  // TOML digit separators
      clean.push_back(c);
    }
    bool is_float = false;
    for (char c : clean) {
      if (c == '.' || c == 'e' || c == 'E') is_float = true;
    }
    if (clean.find("inf") != std::string::npos || clean.find("nan") != std::string::npos) {
      is_float = true;
    }
    try {
      if (is_float) return Value(parse_float_literal(clean));
      std::size_t used = 0;
      std::int64_t v = std::stoll(clean, &used);
      if (used != clean.size()) throw std::invalid_argument(clean);
      return Value(v);
    } catch (const std::exception&) {
      fail(line, "bad literal '" + tok + "'");
    }
  }

  double parse_float_literal(const std::string& clean) {
    std::string body = clean;
    double sign = 1.0;
    if (!body.empty() && (body[0] == '+' || body[0] == '-')) {
      if (body[0] == '-') sign = -1.0;
      body = body.substr(1);
    }
    if (body == "inf") return sign * std::numeric_limits<double>::infinity();
    if (body == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto res = std::from_chars(body.data(), body.data() + body.size(), v);
    if (res.ec != std::errc{} || res.ptr != body.data() + body.size()) {
      throw std::invalid_argument(body);
    }
    return sign * v;
  }

  Value parse_array() {
    ++pos;  // '['
    std::vector<Value> items;
    while (true) {
      skip_space();
      if (done()) fail(line, "unterminated array");
      if (peek() == ']') {
        ++pos;
        return Value(std::move(items));
      }
      items.push_back(parse_value());
      skip_space();
      if (done()) fail(line, "unterminated array");
      if (peek() == ',') {
        ++pos;
        continue;
      }
      if (peek() != ']') fail(line, "expected ',' or ']' in array");
    }
  }
};

// Strips comments outside strings; reports whether any unclosed '[' remains.
struct LineScrub {
  std::string text;
  int open_brackets = 0;
};

LineScrub scrub(const std::string& raw, int line) {
  LineScrub out;
  bool in_string = false;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    char c = raw[i];
    if (in_string) {
      out.text.push_back(c);
      if (c == '\\' && i + 1 < raw.size()) {
        out.text.push_back(raw[++i]);
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '#') break;
    if (c == '"') in_string = true;
    if (c == '[') ++out.open_brackets;
    if (c == ']') --out.open_brackets;
    out.text.push_back(c);
  }
  if (in_string) fail(line, "unterminated string");
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void escape_into(std::string& out, const std::string& s) {
  out.push_back('"');
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          throw std::runtime_error("toml: unencodable control character in string");
        }
        out.push_back(c);
    }
  }
  out.push_back('"');
}

}  // namespace

const std::string& Value::as_string() const {
  if (kind_ != Kind::kString) throw std::runtime_error("toml value is not a string");
  return str_;
}

bool Value::as_bool() const {
  if (kind_ != Kind::kBool) throw std::runtime_error("toml value is not a boolean");
  return bool_;
}

std::int64_t Value::as_int() const {
  if (kind_ != Kind::kInt) throw std::runtime_error("toml value is not an integer");
  return int_;
}

double Value::as_float() const {
  if (kind_ == Kind::kInt) return static_cast<double>(int_);
  if (kind_ != Kind::kFloat) throw std::runtime_error("toml value is not a number");
  return float_;
}

const std::vector<Value>& Value::as_array() const {
  if (kind_ != Kind::kArray) throw std::runtime_error("toml value is not an array");
  return items_;
}

bool Value::operator==(const Value& other) const {
  if (kind_ != other.kind_) return false;
  switch (kind_) {
    case Kind::kString: return str_ == other.str_;
    case Kind::kBool: return bool_ == other.bool_;
    case Kind::kInt: return int_ == other.int_;
    case Kind::kFloat: {
      // bit comparison so NaN == NaN and -0.0 != 0.0; equality here means
      // "serializes identically"
      return double_to_string(float_) == double_to_string(other.float_);
    }
    case Kind::kArray: return items_ == other.items_;
  }
  return false;
}

std::string Value::serialize() const {
  switch (kind_) {
    case Kind::kString: {
      std::string out;
      escape_into(out, str_);
      return out;
    }
    case Kind::kBool: return bool_ ? "true" : "false";
    case Kind::kInt: return std::to_string(int_);
    case Kind::kFloat: {
      if (std::isnan(float_)) return "nan";
      if (std::isinf(float_)) return float_ > 0 ? "inf" : "-inf";
      std::string s = double_to_string(float_);
      if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
          s.find('E') == std::string::npos) {
        s += ".0";
      }
      return s;
    }
    case Kind::kArray: {
      std::string out = "[";
      for (std::size_t i = 0; i < items_.size(); ++i) {
        if (i > 0) out += ", ";
        out += items_[i].serialize();
      }
      out += "]";
      return out;
    }
  }
  return "";
}

bool Document::has(const std::string& section, const std::string& key) const {
  auto sit = sections.find(section);
  return sit != sections.end() && sit->second.count(key) > 0;
}

const Value& Document::at(const std::string& section, const std::string& key) const {
  auto sit = sections.find(section);
  if (sit == sections.end()) throw std::runtime_error("toml: no section [" + section + "]");
  auto kit = sit->second.find(key);
  if (kit == sit->second.end()) {
    throw std::runtime_error("toml: no key '" + key + "' in [" + section + "]");
  }
  return kit->second;
}

void Document::set(const std::string& section, const std::string& key, Value v) {
  sections[section][key] = std::move(v);
}

std::string Document::get_string(const std::string& section, const std::string& key,
                                 const std::string& fallback) const {
  return has(section, key) ? at(section, key).as_string() : fallback;
}

bool Document::get_bool(const std::string& section, const std::string& key,
                        bool fallback) const {
  return has(section, key) ? at(section, key).as_bool() : fallback;
}

std::int64_t Document::get_int(const std::string& section, const std::string& key,
                               std::int64_t fallback) const {
  return has(section, key) ? at(section, key).as_int() : fallback;
}

double Document::get_float(const std::string& section, const std::string& key,
                           double fallback) const {
  return has(section, key) ? at(section, key).as_float() : fallback;
}

Document parse(const std::string& text) {
  Document doc;
  std::string section;

  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    lines.push_back(cur);
  }

  for (std::size_t i = 0; i < lines.size(); ++i) {
    int line_no = static_cast<int>(i) + 1;
    LineScrub sc = scrub(lines[i], line_no);
    // join continuation lines while an array is open
    while (sc.open_brackets > 0 && i + 1 < lines.size()) {
      ++i;
      LineScrub next = scrub(lines[i], static_cast<int>(i) + 1);
      sc.text += "\n" + next.text;
      sc.open_brackets += next.open_brackets;
    }
    if (sc.open_brackets > 0) fail(line_no, "unterminated array");
    std::string body = trim(sc.text);
    if (body.empty()) continue;

    if (body.front() == '[') {
      if (body.size() >= 2 && body[1] == '[') fail(line_no, "table arrays are unsupported");
      if (body.back() != ']') fail(line_no, "malformed section header");
      std::string name = trim(body.substr(1, body.size() - 2));
      if (name.empty()) fail(line_no, "empty section name");
      for (char c : name) {
        if (!is_bare_char(c)) fail(line_no, "bad section name '" + name + "'");
      }
      if (doc.sections.count(name) > 0) fail(line_no, "section [" + name + "] redefined");
      doc.sections[name];  // materialize so redefinition is caught
      section = name;
      continue;
    }

    std::size_t eq = std::string::npos;
    {
      bool in_string = false;
      for (std::size_t p = 0; p < body.size(); ++p) {
        char c = body[p];
        if (in_string) {
          if (c == '\\') ++p;
          else if (c == '"') in_string = false;
        } else if (c == '"') {
          in_string = true;
        } else if (c == '=') {
          eq = p;
          break;
        }
      }
    }
    if (eq == std::string::npos) fail(line_no, "expected 'key = value'");
    std::string key = trim(body.substr(0, eq));
    if (key.empty()) fail(line_no, "empty key");
    for (char c : key) {
      if (!is_bare_char(c) || c == '.') fail(line_no, "bad key '" + key + "'");
    }
    if (doc.sections[section].count(key) > 0) {
      fail(line_no, "key '" + key + "' redefined in [" + section + "]");
    }

    std::string value_text = body.substr(eq + 1);
    Scanner scan{value_text, 0, line_no};
    Value v = scan.parse_value();
    scan.skip_space();
    if (!scan.done()) fail(line_no, "trailing characters after value");
    doc.sections[section][key] = std::move(v);
  }
  return doc;
}

std::string serialize(const Document& doc) {
  std::string out;
  auto emit_section = [&out](const std::map<std::string, Value>& keys) {
    for (const auto& [key, value] : keys) {
      out += key;
      out += " = ";
      out += value.serialize();
      out += "\n";
    }
  };
  auto root = doc.sections.find("");
  if (root != doc.sections.end() && !root->second.empty()) {
    emit_section(root->second);
    out += "\n";
  }
  bool first = true;
  for (const auto& [name, keys] : doc.sections) {
    if (name.empty()) continue;
    if (!first) out += "\n";
    first = false;
    out += "[" + name + "]\n";
    emit_section(keys);
  }
  return out;
}

}  // namespace ganmpc::toml
