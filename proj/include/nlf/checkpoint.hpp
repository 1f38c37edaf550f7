#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nlf/tensor.hpp"

namespace nlf {

// Binary tensor container. Layout (all integers little-endian u64, data f64):
//   magic "NLF1" | tensor count | per tensor: name len, name bytes, rank,
//   dims..., values...
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, ad::Tensor>>& tensors);

std::map<std::string, ad::Tensor> load_checkpoint(const std::string& path);

// Copies values from the file into the given named parameters; throws if a
// name is missing or a shape differs.
void load_checkpoint_into(const std::string& path,
                          std::vector<std::pair<std::string, ad::Tensor>> tensors);

}  // namespace nlf
