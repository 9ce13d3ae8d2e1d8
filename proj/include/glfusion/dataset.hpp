#pragma once

// Line-delimited JSON dataset records. Tokens are stored as words so files
// stay readable; padding is dropped on write and restored on read.

#include "glfusion/tag.hpp"

#include "json.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace glf {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json instance_to_json(const Instance& instance, const Vocabulary& vocab);
Instance instance_from_json(const nlohmann::json& record, const Vocabulary& vocab);

void write_dataset(const std::string& path, const std::vector<Instance>& instances, const Vocabulary& vocab);
std::vector<Instance> read_dataset(const std::string& path, const Vocabulary& vocab);

}  // namespace glf
