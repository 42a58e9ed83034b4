#include "tlgrpo/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "tlgrpo/rng.hpp"

namespace tlgrpo::io {

namespace fs = std::filesystem;

FormatError::FormatError(const std::string& source, std::size_t line, const std::string& message)
    : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + message),
      line_(line) {}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_number(const std::string& text, const std::string& source, std::size_t line, const std::string& what) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || !std::isfinite(v))
    throw FormatError(source, line, "bad number '" + text + "' for " + what);
  return v;
}

/// Splits a text file into (line number, trimmed content), dropping blanks and comments.
std::vector<std::pair<std::size_t, std::string>> content_lines(const std::string& text) {
  std::vector<std::pair<std::size_t, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (!line.empty()) out.emplace_back(n, line);
  }
  return out;
}

std::size_t line_of_offset(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

Json parse_json(const std::string& text, const std::string& source, std::size_t line = 0) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    const std::size_t at = line ? line : line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0);
    throw FormatError(source, at, "malformed JSON");
  }
}

template <class T>
T field(const Json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw std::invalid_argument(std::string("missing field '") + key + "'");
  return it->get<T>();
}

void check_header(const Json& header, const std::string& schema, const std::string& source) {
  if (!header.is_object() || header.value("schema", std::string()) != schema)
    throw FormatError(source, 1, "expected a '" + schema + "' header");
  if (header.value("version", 0) != kFormatVersion)
    throw FormatError(source, 1, "unsupported format version " + header.value("version", Json()).dump());
}

}  // namespace

score::SpecSet parse_spec_text(const std::string& text, const std::string& source) {
  std::vector<score::Objective> objectives;
  for (const auto& [line, content] : content_lines(text)) {
    std::map<std::string, std::string> kv;
    std::istringstream fields(content);
    std::string tok;
    while (fields >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) throw FormatError(source, line, "expected key=value, got '" + tok + "'");
      const auto key = tok.substr(0, eq);
      if (!kv.emplace(key, tok.substr(eq + 1)).second) throw FormatError(source, line, "repeated key '" + key + "'");
    }
    for (const auto& [k, v] : kv)
      if (k != "name" && k != "kind" && k != "target" && k != "target_upper" && k != "tau_lower" &&
          k != "tau_upper" && k != "unit")
        throw FormatError(source, line, "unknown key '" + k + "'");
    if (!kv.count("name")) throw FormatError(source, line, "missing name");
    if (!kv.count("kind")) throw FormatError(source, line, "missing kind");
    if (!kv.count("target")) throw FormatError(source, line, "missing target");
    try {
      const auto kind = score::spec_kind_from_string(kv["kind"]);
      const double target = parse_number(kv["target"], source, line, "target");
      double upper = 0.0;
      if (kind == score::SpecKind::Range) {
        if (!kv.count("target_upper")) throw FormatError(source, line, "range objective needs target_upper");
        upper = parse_number(kv["target_upper"], source, line, "target_upper");
      } else if (kv.count("target_upper")) {
        throw FormatError(source, line, "target_upper is only valid for range objectives");
      }
      // Thresholds are validated once any overrides are in place.
      score::Objective o;
      o.name = kv["name"];
      o.kind = kind;
      o.target = target;
      o.target_upper = upper;
      o.unit = kv.count("unit") ? kv["unit"] : std::string();
      const auto th = score::default_thresholds(kind, target, upper);
      o.tau_lower = kv.count("tau_lower") ? parse_number(kv["tau_lower"], source, line, "tau_lower") : th.tau_lower;
      o.tau_upper = kv.count("tau_upper") ? parse_number(kv["tau_upper"], source, line, "tau_upper") : th.tau_upper;
      o.validate();
      objectives.push_back(std::move(o));
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(source, line, e.what());
    }
  }
  try {
    return score::SpecSet(std::move(objectives));
  } catch (const std::exception& e) {
    throw FormatError(source, 0, e.what());
  }
}

std::string format_spec_text(const score::SpecSet& specs) {
  std::ostringstream os;
  for (const auto& o : specs.objectives()) {
    os << "name=" << o.name << " kind=" << score::to_string(o.kind) << " target=" << format_double(o.target);
    if (o.kind == score::SpecKind::Range) os << " target_upper=" << format_double(o.target_upper);
    os << " tau_lower=" << format_double(o.tau_lower) << " tau_upper=" << format_double(o.tau_upper);
    if (!o.unit.empty()) os << " unit=" << o.unit;
    os << '\n';
  }
  return os.str();
}

score::MetricVector parse_metric_text(const std::string& text, const std::string& source) {
  score::MetricVector out;
  for (const auto& [line, content] : content_lines(text)) {
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw FormatError(source, line, "expected 'name = value'");
    const std::string name = trim(content.substr(0, eq));
    if (name.empty() || name.find_first_of(" \t") != std::string::npos)
      throw FormatError(source, line, "bad metric name '" + name + "'");
    if (out.find(name)) throw FormatError(source, line, "repeated metric '" + name + "'");
    out.set(name, parse_number(trim(content.substr(eq + 1)), source, line, name));
  }
  return out;
}

std::string format_metric_text(const score::MetricVector& metrics) {
  std::ostringstream os;
  for (const auto& m : metrics.entries()) os << m.name << " = " << format_double(m.value) << '\n';
  return os.str();
}

Json to_json(const score::Objective& o) {
  Json j{{"name", o.name}, {"kind", std::string(score::to_string(o.kind))}, {"target", o.target}};
  if (o.kind == score::SpecKind::Range) j["target_upper"] = o.target_upper;
  j["tau_lower"] = o.tau_lower;
  j["tau_upper"] = o.tau_upper;
  j["unit"] = o.unit;
  return j;
}

score::Objective objective_from_json(const Json& j) {
  score::Objective o;
  o.name = field<std::string>(j, "name");
  o.kind = score::spec_kind_from_string(field<std::string>(j, "kind"));
  o.target = field<double>(j, "target");
  o.target_upper = j.value("target_upper", 0.0);
  o.tau_lower = field<double>(j, "tau_lower");
  o.tau_upper = field<double>(j, "tau_upper");
  o.unit = j.value("unit", std::string());
  o.validate();
  return o;
}

Json to_json(const score::SpecSet& s) {
  Json arr = Json::array();
  for (const auto& o : s.objectives()) arr.push_back(to_json(o));
  return arr;
}

score::SpecSet spec_set_from_json(const Json& j) {
  std::vector<score::Objective> objs;
  for (const auto& o : j) objs.push_back(objective_from_json(o));
  return score::SpecSet(std::move(objs));
}

Json to_json(const score::MetricVector& m) {
  Json j = Json::object();
  for (const auto& e : m.entries()) j[e.name] = e.value;
  return j;
}

score::MetricVector metrics_from_json(const Json& j) {
  score::MetricVector m;
  for (auto it = j.begin(); it != j.end(); ++it) m.set(it.key(), it.value().get<double>());
  return m;
}

Json to_json(const env::TaskDefinition& t) {
  Json metrics = Json::array();
  for (const auto& m : t.metrics) {
    Json couplings = Json::array();
    for (const auto& c : m.couplings) couplings.push_back(Json::array({c.i, c.j, c.gamma}));
    metrics.push_back({{"name", m.name},
                       {"offset", m.offset},
                       {"log_weights", m.log_weights},
                       {"bowl_centers", m.bowl_centers},
                       {"bowl_weights", m.bowl_weights},
                       {"couplings", couplings}});
  }
  return Json{{"task_id", t.task_id},
              {"seed", t.seed},
              {"lower", t.lower},
              {"upper", t.upper},
              {"threshold_alpha", t.threshold_alpha},
              {"threshold_beta", t.threshold_beta},
              {"feasible_point", t.feasible_point},
              {"base_specs", to_json(t.base_specs)},
              {"metrics", metrics}};
}

env::TaskDefinition task_from_json(const Json& j) {
  env::TaskDefinition t;
  t.task_id = field<std::string>(j, "task_id");
  t.seed = field<std::uint64_t>(j, "seed");
  t.lower = field<std::vector<double>>(j, "lower");
  t.upper = field<std::vector<double>>(j, "upper");
  t.threshold_alpha = field<double>(j, "threshold_alpha");
  t.threshold_beta = field<double>(j, "threshold_beta");
  t.feasible_point = field<std::vector<double>>(j, "feasible_point");
  t.base_specs = spec_set_from_json(field<Json>(j, "base_specs"));
  for (const auto& mj : field<Json>(j, "metrics")) {
    env::MetricModel m;
    m.name = field<std::string>(mj, "name");
    m.offset = field<double>(mj, "offset");
    m.log_weights = field<std::vector<double>>(mj, "log_weights");
    m.bowl_centers = field<std::vector<double>>(mj, "bowl_centers");
    m.bowl_weights = field<std::vector<double>>(mj, "bowl_weights");
    for (const auto& c : field<Json>(mj, "couplings"))
      m.couplings.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(), c.at(2).get<double>()});
    t.metrics.push_back(std::move(m));
  }
  t.validate();
  return t;
}

Json to_json(const env::QueryInstance& q) {
  return Json{{"query_id", q.query_id},
              {"task_id", q.task_id},
              {"max_turns", q.max_turns},
              {"initial_params", q.initial_params},
              {"specs", to_json(q.specs)}};
}

env::QueryInstance query_from_json(const Json& j) {
  env::QueryInstance q;
  q.query_id = field<std::string>(j, "query_id");
  q.task_id = field<std::string>(j, "task_id");
  q.max_turns = field<int>(j, "max_turns");
  q.initial_params = field<std::vector<double>>(j, "initial_params");
  q.specs = spec_set_from_json(field<Json>(j, "specs"));
  return q;
}

void write_tasks(const fs::path& path, const std::vector<env::TaskDefinition>& tasks) {
  Json arr = Json::array();
  for (const auto& t : tasks) arr.push_back(to_json(t));
  write_text(path, Json{{"schema", "tlgrpo-tasks"}, {"version", kFormatVersion}, {"tasks", arr}}.dump(1) + "\n");
}

std::vector<env::TaskDefinition> read_tasks(const fs::path& path) {
  const std::string source = path.string();
  const Json j = parse_json(read_text(path), source);
  check_header(j, "tlgrpo-tasks", source);
  std::vector<env::TaskDefinition> out;
  try {
    for (const auto& t : j.at("tasks")) out.push_back(task_from_json(t));
  } catch (const std::exception& e) {
    throw FormatError(source, 0, e.what());
  }
  return out;
}

void write_queries(const fs::path& path, const std::vector<env::QueryInstance>& queries, const std::string& split) {
  std::string text =
      Json{{"schema", "tlgrpo-queries"}, {"version", kFormatVersion}, {"split", split}, {"count", queries.size()}}
          .dump() +
      "\n";
  for (const auto& q : queries) text += to_json(q).dump() + "\n";
  write_text(path, text);
}

std::vector<env::QueryInstance> read_queries(const fs::path& path) {
  const std::string source = path.string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + source);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(source, 1, "empty query file");
  check_header(parse_json(line, source, 1), "tlgrpo-queries", source);
  std::vector<env::QueryInstance> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(query_from_json(parse_json(line, source, n)));
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(source, n, e.what());
    }
  }
  return out;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  const auto& opt = ckpt.optimizer;
  Json j{{"schema", "tlgrpo-checkpoint"},
         {"version", kFormatVersion},
         {"feature_schema", hex64(policy::feature_schema_hash())},
         {"iteration", ckpt.iteration},
         {"policy_version", ckpt.policy.version},
         {"weights", ckpt.policy.weights},
         {"optimizer",
          {{"step", opt.step},
           {"learning_rate", opt.learning_rate},
           {"beta1", opt.beta1},
           {"beta2", opt.beta2},
           {"epsilon", opt.epsilon},
           {"first_moment", opt.first_moment},
           {"second_moment", opt.second_moment}}}};
  write_text(path, j.dump(1) + "\n");
}

Checkpoint read_checkpoint(const fs::path& path) {
  const std::string source = path.string();
  const Json j = parse_json(read_text(path), source);
  check_header(j, "tlgrpo-checkpoint", source);
  if (j.value("feature_schema", std::string()) != hex64(policy::feature_schema_hash()))
    throw FormatError(source, 0, "checkpoint feature schema does not match this build");
  try {
    Checkpoint c;
    c.iteration = field<int>(j, "iteration");
    c.policy.version = field<std::uint64_t>(j, "policy_version");
    c.policy.weights = field<std::vector<double>>(j, "weights");
    const Json& o = j.at("optimizer");
    c.optimizer.step = field<std::uint64_t>(o, "step");
    c.optimizer.learning_rate = field<double>(o, "learning_rate");
    c.optimizer.beta1 = field<double>(o, "beta1");
    c.optimizer.beta2 = field<double>(o, "beta2");
    c.optimizer.epsilon = field<double>(o, "epsilon");
    c.optimizer.first_moment = field<std::vector<double>>(o, "first_moment");
    c.optimizer.second_moment = field<std::vector<double>>(o, "second_moment");
    const std::size_t n = policy::kNumChoices * policy::feature::kDim;
    if (c.policy.weights.size() != n || c.optimizer.first_moment.size() != n || c.optimizer.second_moment.size() != n)
      throw std::invalid_argument("weight shape mismatch");
    return c;
  } catch (const std::exception& e) {
    throw FormatError(source, 0, e.what());
  }
}

Json log_header(const std::string& kind, Json fields) {
  Json h{{"record", "header"}, {"schema", "tlgrpo-log"}, {"version", kFormatVersion}, {"kind", kind}};
  for (auto it = fields.begin(); it != fields.end(); ++it) h[it.key()] = it.value();
  return h;
}

std::string file_hash(const fs::path& path) { return hex64(fnv1a64(read_text(path))); }

}  // namespace tlgrpo::io
