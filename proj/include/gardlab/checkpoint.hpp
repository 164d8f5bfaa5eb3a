#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gardlab/nn.hpp"
#include "gardlab/tensor.hpp"

namespace gardlab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);

// Canonical digest over parameter bytes (names sorted, name + raw values).
std::string params_digest(const nn::ParamSet& params);
std::string named_tensors_digest(const NamedTensors& named);

// Binary tensor container, format "gardlab-ckpt-1":
//   magic "GRDLCKPT", u32 version, config digest string, u64 count,
//   then per tensor: name, dtype tag (1 = f64), rank, dims, LE payload.
void save_checkpoint(const std::string& path, const std::string& config_digest,
                     const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path, std::string* config_digest = nullptr);

// File-level digest used by dataset manifests.
std::string file_sha256(const std::string& path);

}  // namespace gardlab
