#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "covnet/dataio.hpp"
#include "covnet/errors.hpp"
#include "covnet/nets.hpp"
#include "covnet/trainer.hpp"

namespace covnet {

// Bad command line or config file.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// Everything a command needs, resolved as defaults < config file < flags.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 1;
  std::string precision = "f32";
  std::string task = "classification";  // or "segmentation"
  std::string config_path;
  std::string manifest;
  std::string ckpt;
  std::string seg_ckpt;
  std::string input;
  std::string out;
  ArchConfig model;
  TrainConfig train;
  PhantomConfig phantom;
  std::size_t count = 20;  // phantoms to generate
  std::size_t folds = 5;
  int enhance_levels = 2;

  // Canonical JSON, echoed into every artifact.
  std::string to_json() const;
};

RunConfig resolve_run_config(const std::vector<std::string>& args);

std::string usage_text();

// Runs one subcommand. Diagnostics go to `err` as a single `error: ...` line.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace covnet
