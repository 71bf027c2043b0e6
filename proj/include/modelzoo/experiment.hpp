#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace modelzoo {

enum class Verb { kGenData, kFit, kSample, kEval };
Verb parse_verb(const std::string& name);

struct RunOptions {
  std::string config;
  std::optional<std::string> out;  // overrides [experiment] out
};

// Model families accepted by `[model] family`.
const std::vector<std::string>& family_names();

// Every verb validates the whole config (unknown keys included) before doing
// any work. Throws modelzoo::Error on failure.
//
// Layout under the output directory:
//   data/          gen-data output (manifest.json plus points.csv or images/)
//   metrics.csv    fit, one row per iteration and a final row
//   model.bin      fit checkpoint
//   samples.csv    sample, for point data; samples/NNNNN.pgm for images
//   eval.csv       eval, metric,value rows
void run(Verb verb, const RunOptions& opts);

// run() with failures reported as one JSON line on `err`. Returns the exit
// status: 0, 2 for config errors, 1 otherwise.
int run_reporting(Verb verb, const RunOptions& opts, std::ostream& err);

}  // namespace modelzoo
