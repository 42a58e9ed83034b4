#pragma once

// On-disk formats.
//
// Spec and metric files are line-oriented text so that errors can name a
// line. A spec file holds one objective per line as key=value fields:
//
//   # comment
//   name=gain kind=lower target=79.14 unit=dB
//   name=vout kind=range target=0.4 target_upper=0.6 tau_lower=0.05
//
// A metric file holds one "name = value" pair per line.
//
// Tasks, queries, checkpoints and logs are JSON. Query files and run logs are
// JSONL with a versioned header record on the first line.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlgrpo/policy.hpp"
#include "tlgrpo/surrogate_env.hpp"

namespace tlgrpo::io {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

/// Format error; `line` is 1-based, 0 when not tied to a line.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& source, std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

std::string read_text(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_text(const std::filesystem::path& path, const std::string& text);

score::SpecSet parse_spec_text(const std::string& text, const std::string& source = "<spec>");
std::string format_spec_text(const score::SpecSet& specs);
score::MetricVector parse_metric_text(const std::string& text, const std::string& source = "<metrics>");
std::string format_metric_text(const score::MetricVector& metrics);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

Json to_json(const score::Objective& o);
score::Objective objective_from_json(const Json& j);
Json to_json(const score::SpecSet& s);
score::SpecSet spec_set_from_json(const Json& j);
Json to_json(const score::MetricVector& m);
score::MetricVector metrics_from_json(const Json& j);

Json to_json(const env::TaskDefinition& t);
env::TaskDefinition task_from_json(const Json& j);
Json to_json(const env::QueryInstance& q);
env::QueryInstance query_from_json(const Json& j);

void write_tasks(const std::filesystem::path& path, const std::vector<env::TaskDefinition>& tasks);
std::vector<env::TaskDefinition> read_tasks(const std::filesystem::path& path);
void write_queries(const std::filesystem::path& path, const std::vector<env::QueryInstance>& queries,
                   const std::string& split);
std::vector<env::QueryInstance> read_queries(const std::filesystem::path& path);

struct Checkpoint {
  policy::PolicyParameters policy;
  policy::OptimizerState optimizer;
  int iteration = 0;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws FormatError when the feature schema hash does not match this build.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Header of a JSONL run log.
Json log_header(const std::string& kind, Json fields);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace tlgrpo::io
