#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bevkit/tensor.hpp"

namespace bevkit {

/// Tensor snapshot, little-endian: u32 rank, u64 extents[rank], f64 payload.
void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

/// Same snapshot as a JSON document {"shape": [...], "data": [...]}.
void save_tensor_json(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor_json(const std::filesystem::path& path);

/// A named, ordered set of parameter tensors. Loading writes values back
/// into the registered tensors in place and fails on any name or shape
/// mismatch, so a checkpoint can only restore the model it came from.
class ParamRegistry {
public:
    void add(const std::string& name, const Tensor& t);
    const std::vector<std::pair<std::string, Tensor>>& entries() const {
        return entries_;
    }
    Tensor find(const std::string& name) const;
    std::int64_t total_params() const;

    void save_checkpoint(const std::filesystem::path& path) const;
    void load_checkpoint(const std::filesystem::path& path) const;
    void save_checkpoint_json(const std::filesystem::path& path) const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace bevkit
