#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace lab {

using json = nlohmann::json;

enum ExitCode { kOk = 0, kUsage = 1, kTheoryFailed = 2 };

const std::vector<std::string>& experiment_names();

// Flat dotted-key settings for one experiment. Starts from the experiment's defaults;
// every later assignment must name a known key.
class Settings {
 public:
  explicit Settings(const std::string& experiment);

  // Nested objects are flattened to dotted keys.
  void apply_json(const json& config);
  // "key=value"; value is read as JSON when it parses, otherwise as a plain string.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, json value);

  std::size_t size_value(const std::string& key) const;
  double number(const std::string& key) const;
  std::string text(const std::string& key) const;
  const std::map<std::string, json>& values() const { return values_; }

 private:
  const json& at(const std::string& key) const;
  std::map<std::string, json> values_;
};

struct Outcome {
  json report;                    // deterministic for a fixed configuration and seed
  std::vector<std::string> csv_rows;  // metrics.csv body rows (already encoded)
  std::map<std::string, std::string> extra_files;  // file name -> contents
  std::string summary;
  bool assertions_passed = true;
  std::string divergence;  // non-empty when training produced a non-finite value
  json runtime = json::object();  // depends on the machine, not the configuration; goes to timing.json
};

// Runs one experiment. Throws ssa::ConfigError for bad settings.
Outcome run_experiment(const std::string& experiment, const Settings& settings, std::uint64_t seed);

// One RFC 4180 field: quoted when it holds a comma, quote, CR or LF.
std::string csv_field(const std::string& s);
std::string csv_number(double v);
// Joins fields and terminates the record with CRLF.
std::string csv_record(const std::vector<std::string>& fields);

// Entry point shared by the binary and the tests: args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lab
