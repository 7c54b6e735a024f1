#include "crowdfuse/harness/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <memory>
#include <set>
#include <sstream>

#include <json.hpp>

namespace crowdfuse::harness {

using nlohmann::json;

namespace {

// Input iterator that counts consumed newlines so parser callbacks know the
// current line.
class LineCountingIterator {
 public:
  using iterator_category = std::input_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  LineCountingIterator(const char* p, std::size_t* line) : p_(p), line_(line) {}
  reference operator*() const { return *p_; }
  LineCountingIterator& operator++() {
    if (*p_ == '\n') ++*line_;
    ++p_;
    return *this;
  }
  LineCountingIterator operator++(int) {
    auto copy = *this;
    ++*this;
    return copy;
  }
  bool operator==(const LineCountingIterator& o) const { return p_ == o.p_; }
  bool operator!=(const LineCountingIterator& o) const { return p_ != o.p_; }

 private:
  const char* p_;
  std::size_t* line_;
};

std::string escape_token(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '~') {
      out += "~0";
    } else if (c == '/') {
      out += "~1";
    } else {
      out += c;
    }
  }
  return out;
}

struct Frame {
  bool is_array = false;
  std::string pointer;
  std::string key;
  std::size_t index = 0;
};

// JSON pointer -> 1-based line of the key or array element.
using LineMap = std::map<std::string, std::size_t>;

json parse_with_lines(const std::string& text, const std::string& source, LineMap& lines) {
  std::size_t line = 1;
  std::vector<Frame> stack;
  auto child_pointer = [&]() -> std::string {
    if (stack.empty()) return "";
    const Frame& f = stack.back();
    return f.pointer + "/" + (f.is_array ? std::to_string(f.index) : escape_token(f.key));
  };
  auto note_array_element = [&]() {
    if (!stack.empty() && stack.back().is_array) lines.emplace(child_pointer(), line);
  };
  auto finish_element = [&]() {
    if (!stack.empty() && stack.back().is_array) ++stack.back().index;
  };

  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
      case json::parse_event_t::array_start: {
        note_array_element();
        Frame f;
        f.is_array = event == json::parse_event_t::array_start;
        f.pointer = child_pointer();
        stack.push_back(std::move(f));
        break;
      }
      case json::parse_event_t::key:
        stack.back().key = parsed.get<std::string>();
        lines.emplace(child_pointer(), line);
        break;
      case json::parse_event_t::object_end:
      case json::parse_event_t::array_end:
        stack.pop_back();
        finish_element();
        break;
      case json::parse_event_t::value:
        note_array_element();
        finish_element();
        break;
    }
    return true;
  };

  const char* begin = text.data();
  const char* end = text.data() + text.size();
  try {
    return json::parse(LineCountingIterator(begin, &line), LineCountingIterator(end, &line), cb);
  } catch (const json::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << line << ": syntax error: " << e.what();
    throw ConfigError(os.str());
  }
}

class Reader {
 public:
  Reader(const std::string& source, const LineMap& lines) : source_(source), lines_(lines) {}

  [[noreturn]] void fail(const std::string& pointer, const std::string& message) const {
    std::ostringstream os;
    os << source_;
    // Walk up to the nearest located ancestor.
    std::string p = pointer;
    while (true) {
      if (auto it = lines_.find(p); it != lines_.end()) {
        os << ":" << it->second;
        break;
      }
      const auto slash = p.rfind('/');
      if (slash == std::string::npos) break;
      p = p.substr(0, slash);
    }
    os << ": " << (pointer.empty() ? "/" : pointer) << ": " << message;
    throw ConfigError(os.str());
  }

  const json& member(const json& obj, const std::string& ptr, const std::string& key) const {
    if (!obj.contains(key)) fail(ptr, "missing required field '" + key + "'");
    return obj.at(key);
  }

  void check_keys(const json& obj, const std::string& ptr, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(ptr, "expected an object");
    for (const auto& [key, value] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) fail(ptr + "/" + escape_token(key), "unknown field '" + key + "'");
    }
  }

  double number(const json& v, const std::string& ptr) const {
    if (!v.is_number()) fail(ptr, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(ptr, "expected a finite number");
    return d;
  }

  double positive(const json& v, const std::string& ptr) const {
    const double d = number(v, ptr);
    if (!(d > 0.0)) fail(ptr, "must be > 0");
    return d;
  }

  std::size_t count(const json& v, const std::string& ptr, std::size_t min_value) const {
    if (!v.is_number_integer() || v.get<std::int64_t>() < static_cast<std::int64_t>(min_value)) {
      fail(ptr, "expected an integer >= " + std::to_string(min_value));
    }
    return v.get<std::size_t>();
  }

  std::string string(const json& v, const std::string& ptr) const {
    if (!v.is_string()) fail(ptr, "expected a string");
    return v.get<std::string>();
  }

  PolicyKind kind(const json& v, const std::string& ptr) const {
    const auto k = parse_policy_kind(string(v, ptr));
    if (!k) fail(ptr, "unknown policy kind '" + v.get<std::string>() + "'");
    return *k;
  }

 private:
  const std::string& source_;
  const LineMap& lines_;
};

const char* const kPewKeys[] = {"lambda", "rho", "lambda_ell", "r"};
const char* const kEmKeys[] = {"sigma_bar_sq", "rho_bar", "c"};

std::map<std::string, double> read_values(const Reader& rd, const json& obj, const std::string& ptr, PolicyKind kind) {
  if (kind == PolicyKind::pew) {
    rd.check_keys(obj, ptr, {"lambda", "rho", "lambda_ell", "r"});
  } else {
    rd.check_keys(obj, ptr, {"sigma_bar_sq", "rho_bar", "c"});
  }
  std::map<std::string, double> out;
  if (kind == PolicyKind::pew) {
    for (const char* k : kPewKeys) out[k] = rd.number(rd.member(obj, ptr, k), ptr + "/" + k);
  } else {
    for (const char* k : kEmKeys) out[k] = rd.number(rd.member(obj, ptr, k), ptr + "/" + k);
  }
  // Validate eagerly so errors carry a location.
  try {
    if (kind == PolicyKind::pew) {
      pew_from_values(out, 2, 1.0).validate();
    } else {
      em_from_values(out).validate();
    }
  } catch (const ContractError& e) {
    rd.fail(ptr, e.what());
  }
  return out;
}

TValue read_t(const Reader& rd, const json& v, const std::string& ptr) {
  TValue t;
  if (v.is_number()) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 1) rd.fail(ptr, "t must be an integer >= 1");
    t.multiple = static_cast<double>(v.get<std::int64_t>());
    return t;
  }
  if (!v.is_string()) rd.fail(ptr, "t must be an integer or a string like \"10K\"");
  const std::string s = v.get<std::string>();
  if (s.size() < 2 || s.back() != 'K') rd.fail(ptr, "t string must end in K, e.g. \"10K\"");
  const std::string head = s.substr(0, s.size() - 1);
  char* endp = nullptr;
  const double m = std::strtod(head.c_str(), &endp);
  if (endp != head.c_str() + head.size() || !(m > 0.0) || !std::isfinite(m)) {
    rd.fail(ptr, "cannot parse multiple in '" + s + "'");
  }
  t.multiple = m;
  t.per_worker = true;
  return t;
}

std::vector<double> read_grid_list(const Reader& rd, const json& v, const std::string& ptr) {
  if (!v.is_array() || v.empty()) rd.fail(ptr, "expected a nonempty array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(rd.number(v[i], ptr + "/" + std::to_string(i)));
  return out;
}

}  // namespace

std::size_t TValue::resolve(std::size_t num_workers) const {
  const double raw = per_worker ? multiple * static_cast<double>(num_workers) : multiple;
  const double rounded = std::round(raw);
  if (std::abs(raw - rounded) > 1e-9 || rounded < 1.0) {
    throw ConfigError("t value " + to_string() + " does not give a positive integer for K=" +
                      std::to_string(num_workers));
  }
  return static_cast<std::size_t>(rounded);
}

std::string TValue::to_string() const {
  std::ostringstream os;
  os << multiple;
  if (per_worker) os << "K";
  return os.str();
}

TuningGrid TuningConfig::grid_for(std::size_t num_workers) const {
  TuningGrid g = TuningGrid::standard(num_workers);
  const std::pair<const char*, std::vector<double>*> slots[] = {
      {"lambda", &g.lambdas},           {"rho", &g.rhos},          {"lambda_ell", &g.ig_shapes},
      {"r", &g.reg_decays},             {"sigma_bar_sq", &g.em_prior_vars},
      {"rho_bar", &g.em_prior_corrs},   {"c", &g.em_concentrations}};
  for (const auto& [name, slot] : slots) {
    if (auto it = grid.find(name); it != grid.end()) *slot = it->second;
  }
  return g;
}

std::vector<std::size_t> ExperimentConfig::t_values_for(std::size_t num_workers) const {
  std::set<std::size_t> ts;
  for (const TValue& t : t_values) ts.insert(t.resolve(num_workers));
  return {ts.begin(), ts.end()};
}

std::string ExperimentConfig::fingerprint() const {
  json j;
  j["schema_version"] = schema_version;
  j["master_seed"] = master_seed;
  j["dgp"] = {{"num_factors", dgp.num_factors}, {"decay", dgp.decay}, {"outcome_variance", dgp.outcome_variance}};
  j["k_values"] = k_values;
  json ts = json::array();
  for (const TValue& t : t_values) ts.push_back(t.to_string());
  j["t_values"] = ts;
  j["seeds"] = seeds;
  json ps = json::array();
  for (const PolicyConfig& p : policies) {
    json values = json::object();
    for (const auto& [k, v] : p.values) values[std::to_string(k)] = v;
    ps.push_back({{"name", p.name}, {"kind", to_string(p.kind)}, {"mode", static_cast<int>(p.mode)}, {"values", values}});
  }
  j["policies"] = ps;
  j["tuning"] = {{"policy", to_string(tuning.policy)}, {"seeds", tuning.seeds}, {"grid", tuning.grid}};
  return j.dump();
}

PewHyperparams pew_from_values(const std::map<std::string, double>& v, std::size_t num_workers,
                               double outcome_variance) {
  return PewHyperparams::with_standard_priors(num_workers, v.at("lambda"), v.at("rho"), v.at("lambda_ell"), v.at("r"),
                                              outcome_variance);
}

EmHyperparams em_from_values(const std::map<std::string, double>& v) {
  EmHyperparams hp;
  hp.prior_var = v.at("sigma_bar_sq");
  hp.prior_corr = v.at("rho_bar");
  hp.concentration = v.at("c");
  return hp;
}

PolicySpec resolve_policy(const PolicyConfig& policy, std::size_t num_workers, double outcome_variance) {
  PolicySpec spec;
  spec.kind = policy.kind;
  spec.label = policy.name;
  if (policy.kind != PolicyKind::pew && policy.kind != PolicyKind::em) return spec;
  if (policy.mode == HyperparamMode::tuned) {
    throw ConfigError("policy '" + policy.name + "' is tuned; run tuning before resolving it");
  }
  const std::size_t key = policy.mode == HyperparamMode::per_k ? num_workers : 0;
  const auto it = policy.values.find(key);
  if (it == policy.values.end()) {
    throw ConfigError("policy '" + policy.name + "' has no hyperparameters for K=" + std::to_string(num_workers));
  }
  if (policy.kind == PolicyKind::pew) {
    spec.pew = pew_from_values(it->second, num_workers, outcome_variance);
  } else {
    spec.em = em_from_values(it->second);
  }
  return spec;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  LineMap lines;
  const json root = parse_with_lines(text, source, lines);
  const Reader rd(source, lines);
  rd.check_keys(root, "",
                {"schema_version", "output_dir", "master_seed", "dgp", "k_values", "t_values", "seeds", "policies",
                 "tuning", "fig2"});

  ExperimentConfig cfg;
  cfg.schema_version = static_cast<int>(rd.count(rd.member(root, "", "schema_version"), "/schema_version", 1));
  if (cfg.schema_version != 1) rd.fail("/schema_version", "unsupported schema_version (expected 1)");
  if (root.contains("output_dir")) cfg.output_dir = rd.string(root["output_dir"], "/output_dir");
  if (root.contains("master_seed")) {
    const json& s = root["master_seed"];
    if (!s.is_number_unsigned()) rd.fail("/master_seed", "expected a non-negative integer");
    cfg.master_seed = s.get<std::uint64_t>();
  }

  if (root.contains("dgp")) {
    const json& d = root["dgp"];
    rd.check_keys(d, "/dgp", {"num_factors", "decay", "outcome_variance"});
    if (d.contains("num_factors")) cfg.dgp.num_factors = rd.count(d["num_factors"], "/dgp/num_factors", 1);
    if (d.contains("decay")) cfg.dgp.decay = rd.positive(d["decay"], "/dgp/decay");
    if (d.contains("outcome_variance")) {
      cfg.dgp.outcome_variance = rd.positive(d["outcome_variance"], "/dgp/outcome_variance");
    }
  }

  const json& ks = rd.member(root, "", "k_values");
  if (!ks.is_array() || ks.empty()) rd.fail("/k_values", "expected a nonempty array of integers");
  for (std::size_t i = 0; i < ks.size(); ++i) cfg.k_values.push_back(rd.count(ks[i], "/k_values/" + std::to_string(i), 2));

  if (root.contains("t_values")) {
    const json& ts = root["t_values"];
    if (!ts.is_array() || ts.empty()) rd.fail("/t_values", "expected a nonempty array");
    for (std::size_t i = 0; i < ts.size(); ++i) cfg.t_values.push_back(read_t(rd, ts[i], "/t_values/" + std::to_string(i)));
    for (std::size_t k : cfg.k_values) {
      for (std::size_t i = 0; i < cfg.t_values.size(); ++i) {
        try {
          cfg.t_values[i].resolve(k);
        } catch (const ConfigError& e) {
          rd.fail("/t_values/" + std::to_string(i), e.what());
        }
      }
    }
  }
  if (root.contains("seeds")) cfg.seeds = rd.count(root["seeds"], "/seeds", 1);

  if (root.contains("policies")) {
    const json& ps = root["policies"];
    if (!ps.is_array()) rd.fail("/policies", "expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string ptr = "/policies/" + std::to_string(i);
      const json& p = ps[i];
      rd.check_keys(p, ptr, {"name", "kind", "hyperparams"});
      PolicyConfig pc;
      pc.kind = rd.kind(rd.member(p, ptr, "kind"), ptr + "/kind");
      pc.name = p.contains("name") ? rd.string(p["name"], ptr + "/name") : to_string(pc.kind);
      if (pc.name.empty() || pc.name.find_first_of(",/\\ \t\n") != std::string::npos) {
        rd.fail(ptr + "/name", "policy names must be nonempty without commas, slashes or spaces");
      }
      if (!names.insert(pc.name).second) rd.fail(ptr + "/name", "duplicate policy name '" + pc.name + "'");
      const bool learned = pc.kind == PolicyKind::pew || pc.kind == PolicyKind::em;
      if (!learned) {
        if (p.contains("hyperparams")) rd.fail(ptr + "/hyperparams", "this policy kind takes no hyperparameters");
      } else {
        const std::string hptr = ptr + "/hyperparams";
        const json& hp = rd.member(p, ptr, "hyperparams");
        if (hp.is_string()) {
          if (hp.get<std::string>() != "tuned") rd.fail(hptr, "expected an object or the string \"tuned\"");
          pc.mode = HyperparamMode::tuned;
        } else if (hp.is_object() && !hp.empty() && std::isdigit(static_cast<unsigned char>(hp.begin().key()[0]))) {
          pc.mode = HyperparamMode::per_k;
          for (const auto& [key, value] : hp.items()) {
            const std::string kptr = hptr + "/" + escape_token(key);
            char* endp = nullptr;
            const unsigned long k = std::strtoul(key.c_str(), &endp, 10);
            if (key.empty() || *endp != '\0' || k < 2) rd.fail(kptr, "per-K keys must be integers >= 2");
            pc.values[k] = read_values(rd, value, kptr, pc.kind);
          }
          for (std::size_t k : cfg.k_values) {
            if (!pc.values.count(k)) rd.fail(hptr, "no hyperparameters for K=" + std::to_string(k));
          }
        } else {
          pc.mode = HyperparamMode::fixed;
          pc.values[0] = read_values(rd, hp, hptr, pc.kind);
        }
      }
      cfg.policies.push_back(std::move(pc));
    }
  }

  if (root.contains("tuning")) {
    const json& t = root["tuning"];
    rd.check_keys(t, "/tuning", {"policy", "seeds", "grid"});
    if (t.contains("policy")) {
      cfg.tuning.policy = rd.kind(t["policy"], "/tuning/policy");
      if (cfg.tuning.policy != PolicyKind::pew && cfg.tuning.policy != PolicyKind::em) {
        rd.fail("/tuning/policy", "tuning applies to pew or em only");
      }
    }
    if (t.contains("seeds")) cfg.tuning.seeds = rd.count(t["seeds"], "/tuning/seeds", 1);
    if (t.contains("grid")) {
      const json& g = t["grid"];
      rd.check_keys(g, "/tuning/grid", {"lambda", "rho", "lambda_ell", "r", "sigma_bar_sq", "rho_bar", "c"});
      for (const auto& [key, value] : g.items()) {
        cfg.tuning.grid[key] = read_grid_list(rd, value, "/tuning/grid/" + key);
      }
    }
  }

  if (root.contains("fig2")) {
    const json& f = root["fig2"];
    rd.check_keys(f, "/fig2", {"baseline_k", "policies", "seeds"});
    if (f.contains("baseline_k")) {
      const json& b = f["baseline_k"];
      if (!b.is_array() || b.empty()) rd.fail("/fig2/baseline_k", "expected a nonempty array of integers");
      cfg.matching.baseline_k.clear();
      for (std::size_t i = 0; i < b.size(); ++i) {
        cfg.matching.baseline_k.push_back(rd.count(b[i], "/fig2/baseline_k/" + std::to_string(i), 1));
      }
    }
    if (f.contains("policies")) {
      const json& p = f["policies"];
      if (!p.is_array() || p.empty()) rd.fail("/fig2/policies", "expected a nonempty array of policy kinds");
      cfg.matching.policies.clear();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const std::string ptr = "/fig2/policies/" + std::to_string(i);
        const PolicyKind k = rd.kind(p[i], ptr);
        if (k == PolicyKind::pew || k == PolicyKind::em) rd.fail(ptr, "matching uses averaging, clairvoyant or only_skills");
        cfg.matching.policies.push_back(k);
      }
    }
    if (f.contains("seeds")) cfg.matching.seeds = rd.count(f["seeds"], "/fig2/seeds", 1);
  }

  try {
    cfg.dgp.validate();
  } catch (const ContractError& e) {
    rd.fail("/dgp", e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

void apply_seed_override(ExperimentConfig& config) {
  const char* raw = std::getenv("CROWDFUSE_SEED");
  if (raw == nullptr || *raw == '\0') return;
  char* endp = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(raw, &endp, 10);
  if (*endp != '\0' || errno != 0 || raw[0] == '-') {
    throw ConfigError(std::string("CROWDFUSE_SEED: expected a non-negative integer, got '") + raw + "'");
  }
  config.master_seed = v;
}

}  // namespace crowdfuse::harness
