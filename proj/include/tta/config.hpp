#pragma once

// Run configuration file: JSON with sections model / augmentation /
// adaptation / domains / suite. Every field is optional and defaults to the
// documented value; unknown keys are a hard error naming the offending key.

#include <string>
#include <vector>

#include "tta/bench.hpp"

namespace tta {

struct RunConfig {
    HarnessConfig harness;
    std::vector<uint64_t> suite_seeds = {1, 2, 3, 4, 5};
};

RunConfig default_run_config();

// Parses a file (an empty or whitespace-only file means all defaults).
RunConfig parse_config(const std::string& path);

// Parses a JSON string; used for inline domain-spec files as well.
RunConfig parse_config_text(const std::string& text);

// Canonical serialization; parse(print(c)) == c.
std::string print_config(const RunConfig& config);

// A single domain spec given as JSON (for gen-data --spec <file>).
DomainSpec parse_domain_spec_file(const std::string& path);

}  // namespace tta
