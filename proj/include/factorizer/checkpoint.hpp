#pragma once

#include <string>

#include "factorizer/network.hpp"

namespace factorizer {

// Checkpoint container: magic "FCKP", u8 version, u64 step, u64 seed, the
// serialized model configuration, then a manifest (name, dtype, shape,
// absolute file offset) followed by one FTensor blob per parameter.
// Reload is bit-exact.

void save_checkpoint(const std::string& path, const FactorizerModel<float>& model);
FactorizerModel<float> load_checkpoint(const std::string& path);

}  // namespace factorizer
