#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bilayer/tensor.hpp"

namespace bilayer {

/// Order-stable container of named tensors.
///
/// File format, repeated per entry: u64 name length, name bytes, then the
/// tensor dump (u64 extent count, u64 extents, raw little-endian doubles).
class Checkpoint {
public:
    void add(std::string name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    double get_scalar(const std::string& name) const { return get(name).item(); }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace bilayer
