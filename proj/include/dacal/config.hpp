#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include "dacal/tensor.hpp"

// Structured configuration: a TOML-style [section] key = value file over a
// fixed key registry. Unknown keys are rejected by name, dotted-path
// overrides come from the command line, and serialization is canonical
// (sections and keys sorted) so a parsed config round-trips.

namespace dacal {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  using Value = std::variant<int64_t, double, std::string>;

  Config() { register_defaults(); }

  static Config from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    Config cfg;
    cfg.parse(ss.str());
    return cfg;
  }

  void parse(const std::string& text) {
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError("malformed section at line " + std::to_string(lineno));
        section = strip(s.substr(1, s.size() - 2));
        continue;
      }
      size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("expected key = value at line " + std::to_string(lineno));
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      set(section.empty() ? key : section + "." + key, value);
    }
  }

  /// Dotted-path override ("trainer.stage=2").
  void set(const std::string& dotted, const std::string& raw) {
    auto it = values_.find(dotted);
    if (it == values_.end()) throw ConfigError("unknown config key: " + dotted);
    it->second = parse_value(dotted, raw, it->second);
  }

  void set_override(const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must look like key=value: " + assignment);
    set(strip(assignment.substr(0, eq)), strip(assignment.substr(eq + 1)));
  }

  int64_t get_int(const std::string& key) const { return std::get<int64_t>(at(key)); }
  double get_double(const std::string& key) const {
    const Value& v = at(key);
    if (std::holds_alternative<int64_t>(v)) return static_cast<double>(std::get<int64_t>(v));
    return std::get<double>(v);
  }
  const std::string& get_string(const std::string& key) const { return std::get<std::string>(at(key)); }

  /// Canonical serialization: sorted sections, sorted keys, quoted strings.
  std::string serialize() const {
    std::map<std::string, std::map<std::string, const Value*>> sections;
    for (const auto& [key, val] : values_) {
      size_t dot = key.find('.');
      sections[key.substr(0, dot)][key.substr(dot + 1)] = &val;
    }
    std::ostringstream out;
    bool first = true;
    for (const auto& [section, keys] : sections) {
      if (!first) out << "\n";
      first = false;
      out << "[" << section << "]\n";
      for (const auto& [key, val] : keys) {
        out << key << " = ";
        if (std::holds_alternative<int64_t>(*val))
          out << std::get<int64_t>(*val);
        else if (std::holds_alternative<double>(*val))
          out << format_double(std::get<double>(*val));
        else
          out << '"' << std::get<std::string>(*val) << '"';
        out << "\n";
      }
    }
    return out.str();
  }

  const std::map<std::string, Value>& items() const { return values_; }

 private:
  const Value& at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    std::string s = os.str();
    // keep doubles recognizable as doubles on re-parse
    if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
        s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
      s += ".0";
    return s;
  }

  Value parse_value(const std::string& key, const std::string& raw, const Value& prototype) {
    try {
      if (std::holds_alternative<int64_t>(prototype)) {
        size_t pos = 0;
        int64_t v = std::stoll(raw, &pos);
        if (pos != raw.size()) throw std::invalid_argument(raw);
        return v;
      }
      if (std::holds_alternative<double>(prototype)) {
        size_t pos = 0;
        double v = std::stod(raw, &pos);
        if (pos != raw.size()) throw std::invalid_argument(raw);
        return v;
      }
    } catch (const std::exception&) {
      throw ConfigError("bad value for " + key + ": " + raw);
    }
    std::string s = raw;
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
  }

  void add(const std::string& key, Value v) { values_[key] = std::move(v); }

  void register_defaults() {
    // run
    add("run.dir", std::string("runs/default"));
    add("run.seed", int64_t{1234});
    // trainer
    add("trainer.mode", std::string("supervised"));
    add("trainer.stage", int64_t{1});
    add("trainer.epochs_per_stage", int64_t{20});
    add("trainer.batch_size", int64_t{8});
    add("trainer.lr_generator", 1e-4);
    add("trainer.lr_critic", 2e-4);
    add("trainer.lr_theta", 2e-4);
    add("trainer.critic_iters_per_gen", int64_t{5});
    add("trainer.alt_epochs", int64_t{-1});  // -1: one third of epochs_per_stage
    add("trainer.max_steps", int64_t{0});    // 0: no cap
    add("trainer.eval_interval", int64_t{50});
    add("trainer.checkpoint_in", std::string(""));
    add("trainer.checkpoint_out", std::string("checkpoint.dckpt"));
    // enhancer
    add("enhancer.depth", int64_t{4});
    add("enhancer.base_channels", int64_t{16});
    add("enhancer.beta", 1.0);
    // critic
    add("critic.depth", int64_t{3});
    add("critic.base_channels", int64_t{32});
    add("critic.feature_dim", int64_t{64});
    add("critic.slices", int64_t{32});
    add("critic.window", int64_t{3});
    // objective
    add("objective.gamma1", 10000.0);
    add("objective.gamma2", 1000.0);
    // penalty controller
    add("penalty.lambda", 10.0);
    add("penalty.eta", 0.99);
    add("penalty.tau", 0.05);
    add("penalty.lambda_min", 1e-3);
    add("penalty.lambda_max", 1e4);
    // frequency division
    add("blur.sigma", 3.0);
    add("blur.radius", int64_t{9});
    // data
    add("data.mode", std::string("paired"));
    add("data.low_dir", std::string(""));
    add("data.high_dir", std::string(""));
    add("data.low_height", int64_t{32});
    add("data.low_width", int64_t{64});
    add("data.val_fraction", 0.1);
    // toy benchmark
    add("toy.sigma", 0.05);
    add("toy.grid_extent", 2.0);
    add("toy.iterations", int64_t{5000});
    add("toy.batch_size", int64_t{128});
    add("toy.lr", 3e-4);
    add("toy.feature_dim", int64_t{128});
    add("toy.slices", int64_t{16});
    add("toy.hidden", int64_t{128});
    add("toy.critic_iters", int64_t{5});
  }

  std::map<std::string, Value> values_;
};

}  // namespace dacal
