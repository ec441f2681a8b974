#pragma once

#include <string>

#include "cmformer/segmodel.hpp"

namespace cmf {

// "CMCK" checkpoint container: u32 version, u32 tensor count, then per
// tensor: u16 name length, name bytes, u8 rank, u32 dims[rank], f32 payload
// row-major, all little-endian. Model hyper-parameters travel as the
// reserved "__config__" and "__schedule__" entries so a checkpoint alone
// rebuilds the model.
void save_checkpoint(const std::string& path, Model& model);

Model load_checkpoint(const std::string& path);

}  // namespace cmf
