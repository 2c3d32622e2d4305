#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace diffris::cli {

// Exit codes shared by every command.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kUsageError = 2;

struct GenDataArgs {
  std::filesystem::path out;
  int n = 0;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
};

struct TrainArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
  std::vector<std::string> overrides;
  bool inject_freeze_violation = false;
};

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::string split = "val";
  std::filesystem::path report;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> overlay_dir;
  std::vector<std::string> overrides;
};

struct GradcheckArgs {
  std::optional<std::filesystem::path> config;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  std::string inject_fault;
};

// Each returns an exit code; errors are reported on stderr.
int cmd_gen_data(const GenDataArgs& args);
int cmd_train(const TrainArgs& args);
int cmd_eval(const EvalArgs& args);
int cmd_gradcheck(const GradcheckArgs& args);

}  // namespace diffris::cli
