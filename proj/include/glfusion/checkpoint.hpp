#pragma once

// Binary checkpoint container:
//
//   "GLFCKPT\0" | u32 version | u64 len + config JSON
//   | u32 count | count x (u32 len + name, u32 rows, u32 cols, rows*cols f64)
//   | u8 has_optimizer [ 5 x f64 settings, i64 step, count x (m, v) ]
//   | u64 len + metadata JSON | u64 FNV-1a of every preceding byte
//
// All integers and floats are little-endian.

#include "glfusion/model.hpp"
#include "glfusion/optim.hpp"

#include "json.hpp"

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace glf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Matrix>> parameters;
  std::optional<OptimizerState> optimizer;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Writes to a temporary file next to `path`, then renames it into place.
void save_checkpoint(const std::string& path, const GlFusionModel& model, const OptimizerState* optimizer = nullptr,
                     const nlohmann::json& metadata = nlohmann::json::object());

Checkpoint read_checkpoint(const std::string& path);

/// Copies checkpoint values into `model`. Throws ConfigError when the
/// checkpoint was produced for a different configuration.
void restore_parameters(GlFusionModel& model, const Checkpoint& checkpoint);

std::unique_ptr<GlFusionModel> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace glf
