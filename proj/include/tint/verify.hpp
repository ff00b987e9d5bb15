#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tint {

// One record per enabled check.
struct CheckRecord {
  std::string check;
  std::string config;  // fingerprint of the instance matrix
  double max_abs = 0.0;
  double rel = 0.0;
  double bound = 0.0;  // tolerance the measured quantity is held to
  bool pass = false;
  std::string detail;  // measured values and, for failures, the violated tolerance
};

struct CheckInfo {
  std::string id;
  int criterion = 0;
  std::string summary;
};

// Every check in canonical order.
const std::vector<CheckInfo>& check_catalog();

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::vector<std::string> only;  // empty runs the whole catalog
  // Perturbs one encoded simulator weight in the module and end-to-end checks.
  bool inject_fault = false;
};

// Throws ConfigError for ids missing from the catalog. Records come back in
// catalog order.
std::vector<CheckRecord> run_checks(const VerifyOptions& options);

std::string to_json_line(const CheckRecord& record);

}  // namespace tint
