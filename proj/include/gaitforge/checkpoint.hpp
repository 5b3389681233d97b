#pragma once

// Binary checkpoint container (normative layout, little-endian):
//   magic   8 bytes  "GFCKPT1\0"
//   count   u32      number of tensors
//   per tensor:
//     name_len u32, name bytes (UTF-8)
//     dtype    u8   (0 = f32, 1 = f64)
//     rank     u8
//     extents  u64 x rank
//     payload  raw little-endian elements

#include <string>
#include <utility>
#include <vector>

#include "gaitforge/tensor.hpp"

namespace gaitforge {

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
void save_checkpoint(const std::string& path, const NamedTensors<S>& entries);

// All stored tensors must carry dtype_of<S>() or loading fails.
template <typename S>
NamedTensors<S> load_checkpoint(const std::string& path);

extern template void save_checkpoint<float>(const std::string&,
                                            const NamedTensors<float>&);
extern template void save_checkpoint<double>(const std::string&,
                                             const NamedTensors<double>&);
extern template NamedTensors<float> load_checkpoint<float>(const std::string&);
extern template NamedTensors<double> load_checkpoint<double>(
    const std::string&);

}  // namespace gaitforge
