#pragma once

// End-to-end acceptance criteria. Each prints one PASS/FAIL line.

#include <ostream>
#include <string>

namespace scenelabel {

struct AcceptanceOptions {
  /// Warm starts, simulated sessions and CLI outputs go here.
  std::string cache_dir = "acceptance_cache";
  /// Keep warm starts from an earlier run instead of recomputing them.
  bool reuse_cache = false;
  /// Only criteria whose name contains this substring.
  std::string only;
  /// The command-line tool exercised by the headless criterion.
  std::string cli_path;
};

/// Returns 0 when every selected criterion passes, 1 otherwise.
int RunAcceptance(const AcceptanceOptions& options, std::ostream& out);

}  // namespace scenelabel
