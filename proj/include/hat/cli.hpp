#pragma once

#include <string>
#include <vector>

#include "hat/config.hpp"

namespace hat::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidation = 2;
inline constexpr int kRuntime = 3;

/// Relative output directories are placed under this variable when it is set.
inline constexpr const char* kOutputRootEnv = "HAT_OUTPUT_ROOT";

std::string resolve_output_dir(const std::string& output_dir);

/// Pseudo-axis for the supervision/NeA ablation arms.
inline constexpr const char* kAblationAxis = "ablation";

/// Overrides for one ablation arm: full, no-mfe, no-aux, no-nea.
FlatConfig ablation_overrides(const std::string& arm);

struct SweepRow {
  std::string value;
  std::string output_dir;
  double map = 0;
  double rank1 = 0;
  double rank5 = 0;
  double rank10 = 0;
  double final_loss = 0;
};

std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows);
std::string sweep_table(const std::string& axis, const std::vector<SweepRow>& rows);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv);

/// Same, with args[0] the program name.
int run(const std::vector<std::string>& args);

}  // namespace hat::cli
