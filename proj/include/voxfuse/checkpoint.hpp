#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxfuse/optim.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct TensorFile {
    uint64_t step = 0;
    std::vector<NamedTensor> entries;
};

/// Named-tensor container, little-endian regardless of host. Each entry is
/// {name, dtype, shape, payload}; dtype is f64 or f32 (f32 entries are
/// upcast on load, tests and training always store f64).
void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& entries,
                      bool as_f32 = false, uint64_t step = 0);
TensorFile load_tensor_file(const std::string& path);

/// Parameter checkpoints on top of the container. Optimizer moments ride
/// along as "<name>#m" / "<name>#v" entries when requested, so a resumed run
/// continues the same trajectory.
void save_checkpoint(const std::string& path, const ParamStore& ps, bool as_f32 = false,
                     bool with_moments = false);

/// Loads values (and moments when present) into an already-built store by
/// name. Shape mismatches, missing parameters, and unrecognized entries are
/// format errors.
void load_checkpoint(const std::string& path, ParamStore& ps);

}  // namespace voxfuse
